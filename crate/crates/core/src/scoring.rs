//! Per-video concept sensitivity and class-level importance scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::convnet::ModelBackend;
use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

/// Dot product of a logit gradient with a concept direction.
pub fn sensitivity(gradient: &[f32], direction: &[f32]) -> Result<f64> {
    if gradient.len() != direction.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries but the CAV has {}",
            gradient.len(),
            direction.len()
        )));
    }
    Ok(gradient.iter().zip(direction).map(|(g, v)| *g as f64 * *v as f64).sum())
}

/// Rate of change of the class logit when layer activations move along `cav`.
pub fn directional_derivative<B: ModelBackend + ?Sized>(
    net: &B,
    video: &VideoTensor,
    class: usize,
    layer: &str,
    cav: &Cav,
) -> Result<f64> {
    if cav.layer != layer {
        return Err(Error::invalid(format!("CAV was trained at layer {:?}, not {layer:?}", cav.layer)));
    }
    let grad = net.grad_logit_wrt_activations(video, class, layer)?;
    let value = sensitivity(&grad, &cav.vector)?;
    if !value.is_finite() {
        return Err(Error::invalid("non-finite directional derivative"));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: usize,
    pub sensitivities: Vec<f64>,
    pub positives: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub class: usize,
    pub layer: String,
    pub k: usize,
    pub concepts: Vec<ConceptScore>,
    pub ranking: Vec<usize>,
}

impl ImportanceReport {
    pub fn score_of(&self, concept: usize) -> Option<f64> {
        self.concepts.iter().find(|c| c.concept == concept).map(|c| c.score)
    }
}

/// Builds a report from precomputed sensitivities, one row per concept and
/// one column per evaluation video.
pub fn report_from_sensitivities(class: usize, layer: &str, rows: Vec<(usize, Vec<f64>)>) -> Result<ImportanceReport> {
    if rows.is_empty() {
        return Err(Error::invalid("no concepts to score"));
    }
    let k = rows[0].1.len();
    if k == 0 || rows.iter().any(|(_, s)| s.len() != k) {
        return Err(Error::invalid("every concept needs one sensitivity per video and K >= 1"));
    }
    let concepts: Vec<ConceptScore> = rows
        .into_iter()
        .map(|(concept, sensitivities)| {
            let positives = sensitivities.iter().filter(|v| **v > 0.0).count();
            ConceptScore {
                concept,
                positives,
                score: positives as f64 / k as f64,
                sensitivities,
            }
        })
        .collect();
    let mut report = ImportanceReport {
        class,
        layer: layer.to_string(),
        k,
        concepts,
        ranking: Vec::new(),
    };
    report.ranking = rank_concepts(&report);
    Ok(report)
}

/// Scores every CAV against every video. All CAVs must belong to `class`.
pub fn tcav_scores<B: ModelBackend + ?Sized>(
    net: &B,
    videos: &[VideoTensor],
    cavs: &[Cav],
    class: usize,
    layer: &str,
) -> Result<ImportanceReport> {
    if cavs.is_empty() {
        return Err(Error::invalid("no CAVs to score"));
    }
    if videos.is_empty() {
        return Err(Error::invalid("K must be >= 1"));
    }
    if let Some(c) = cavs.iter().find(|c| c.class != class || c.layer != layer) {
        return Err(Error::invalid(format!(
            "CAV for concept {} belongs to class {} layer {:?}",
            c.concept, c.class, c.layer
        )));
    }
    let grads: Vec<Vec<f32>> = videos
        .par_iter()
        .map(|v| net.grad_logit_wrt_activations(v, class, layer))
        .collect::<Result<_>>()?;
    let rows = cavs
        .iter()
        .map(|cav| {
            let s = grads.iter().map(|g| sensitivity(g, &cav.vector)).collect::<Result<Vec<_>>>()?;
            Ok((cav.concept, s))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_sensitivities(class, layer, rows)
}

/// Concept ids by descending positive count, ties by ascending id.
pub fn rank_concepts(report: &ImportanceReport) -> Vec<usize> {
    let mut order: Vec<(usize, usize)> = report.concepts.iter().map(|c| (c.positives, c.concept)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, id)| id).collect()
}
