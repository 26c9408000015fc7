//! Concept addition and removal experiments.
//!
//! Each test video's segments are mapped to the nearest concept of the
//! video's class. Adding pastes the segments of chosen concepts onto a
//! mean-valued video; removing overwrites them with the mean.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{featurize, segment_to_input, Concept};
use crate::convnet::{to_model_input, ModelBackend};
use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::scoring::ImportanceReport;
use crate::supervoxel::{Segment, SegmentRef};
use crate::tensor::{compose_masked, VideoTensor, VoxelMask};

pub const DEFAULT_K_MAX: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Top,
    Random,
    Least,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Add, Mode::Remove];
}

impl Selection {
    pub const ALL: [Selection; 3] = [Selection::Top, Selection::Random, Selection::Least];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Add => "add",
            Mode::Remove => "remove",
        })
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Top => "top",
            Selection::Random => "random",
            Selection::Least => "least",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Mode::Add),
            "remove" => Ok(Mode::Remove),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

impl FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Selection::Top),
            "random" => Ok(Selection::Random),
            "least" => Ok(Selection::Least),
            _ => Err(Error::invalid(format!("unknown selection {s:?}"))),
        }
    }
}

/// Id of the concept whose centroid is nearest in squared distance; ties go
/// to the lower id.
pub fn nearest_concept(feature: &[f32], concepts: &[Concept]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for c in concepts {
        if c.centroid.len() != feature.len() {
            return Err(Error::invalid(format!(
                "concept {} centroid has width {}, feature {}",
                c.id,
                c.centroid.len(),
                feature.len()
            )));
        }
        let d: f64 = feature.iter().zip(&c.centroid).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && c.id < bid),
        };
        if better {
            best = Some((d, c.id));
        }
    }
    best.map(|(_, id)| id).ok_or_else(|| Error::invalid("no concepts to index against"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSegment {
    pub segment: SegmentRef,
    pub concept: usize,
    pub voxels: Vec<u32>,
}

/// Segments of one test video with their nearest concept.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoConceptIndex {
    pub video: usize,
    pub class: usize,
    pub entries: Vec<IndexedSegment>,
}

impl VideoConceptIndex {
    /// Union of the masks of every entry whose concept is in `chosen`.
    pub fn mask_for(&self, video: &VideoTensor, chosen: &[usize]) -> VoxelMask {
        let mut mask = VoxelMask::new(video.dims(), false);
        for e in self.entries.iter().filter(|e| chosen.contains(&e.concept)) {
            for &i in &e.voxels {
                mask.data_mut()[i as usize] = true;
            }
        }
        mask
    }
}

#[allow(clippy::too_many_arguments)]
pub fn index_video_concepts<B: ModelBackend + ?Sized>(
    net: &B,
    video_idx: usize,
    class: usize,
    video: &VideoTensor,
    segments: &[Segment],
    concepts_of_class: &[Concept],
    mean: &[f32],
    layer: &str,
) -> Result<VideoConceptIndex> {
    if concepts_of_class.is_empty() {
        return Err(Error::invalid(format!("class {class} has no concepts")));
    }
    if let Some(c) = concepts_of_class.iter().find(|c| c.class != class) {
        return Err(Error::invalid(format!("concept {} belongs to class {}, not {class}", c.id, c.class)));
    }
    let (input_dims, _) = net.input_shape();
    let inputs = segments
        .iter()
        .map(|s| segment_to_input(video, s, mean, input_dims))
        .collect::<Result<Vec<_>>>()?;
    let features = featurize(net, &inputs, layer)?;
    let entries = segments
        .iter()
        .zip(&features)
        .map(|(s, f)| {
            Ok(IndexedSegment {
                segment: s.id(),
                concept: nearest_concept(f, concepts_of_class)?,
                voxels: s.voxels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoConceptIndex { video: video_idx, class, entries })
}

/// Test split with per-video indexes and per-class rankings.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub videos: Vec<(VideoTensor, usize)>,
    pub indexes: Vec<VideoConceptIndex>,
    pub rankings: BTreeMap<usize, Vec<usize>>,
    pub mean: Vec<f32>,
}

impl EvalSet {
    pub fn new(
        dataset: &LabeledDataset,
        indexes: Vec<VideoConceptIndex>,
        reports: &[ImportanceReport],
    ) -> Result<Self> {
        let test: Vec<_> = dataset.split(Split::Test).collect();
        if test.len() != indexes.len() {
            return Err(Error::invalid(format!(
                "{} test videos but {} concept indexes",
                test.len(),
                indexes.len()
            )));
        }
        for ((idx, item), index) in test.iter().zip(&indexes) {
            if index.video != *idx || index.class != item.label {
                return Err(Error::invalid(format!("concept index does not match test video {}", item.id)));
            }
        }
        Ok(Self {
            videos: test.iter().map(|(_, it)| (it.video.clone(), it.label)).collect(),
            indexes,
            rankings: reports.iter().map(|r| (r.class, r.ranking.clone())).collect(),
            mean: dataset.train_mean(),
        })
    }
}

/// Raised when more concepts are requested than a class has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampWarning {
    pub class: usize,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub warnings: Vec<ClampWarning>,
}

fn choose(ranking: &[usize], selection: Selection, k: usize, seed: u64, video: usize) -> Vec<usize> {
    match selection {
        Selection::Top => ranking[..k].to_vec(),
        Selection::Least => ranking.iter().rev().take(k).copied().collect(),
        Selection::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(video as u64);
            ranking.choose_multiple(&mut rng, k).copied().collect()
        }
    }
}

/// The input classified for one video under an experiment.
pub fn modified_video(
    set: &EvalSet,
    i: usize,
    mode: Mode,
    chosen: &[usize],
) -> Result<VideoTensor> {
    let (video, _) = &set.videos[i];
    let mean = VideoTensor::filled(video.dims(), &set.mean);
    let mask = set.indexes[i].mask_for(video, chosen);
    match mode {
        Mode::Add => compose_masked(&mean, video, &mask),
        Mode::Remove => compose_masked(video, &mean, &mask),
    }
}

pub fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn classify<B: ModelBackend + ?Sized>(net: &B, video: &VideoTensor) -> Result<usize> {
    let (dims, _) = net.input_shape();
    if video.dims() == dims {
        Ok(net.predict(video)?.class)
    } else {
        Ok(net.predict(&to_model_input(video, dims)?)?.class)
    }
}

/// Accuracy (percent) after adding or removing `k` concepts per test video.
pub fn evaluate<B: ModelBackend + ?Sized>(
    net: &B,
    set: &EvalSet,
    mode: Mode,
    selection: Selection,
    k: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    if set.videos.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let mut warnings = Vec::new();
    for (&class, ranking) in &set.rankings {
        if k > ranking.len() {
            warnings.push(ClampWarning { class, requested: k, available: ranking.len() });
        }
    }
    let correct: Vec<bool> = (0..set.videos.len())
        .into_par_iter()
        .map(|i| {
            let label = set.videos[i].1;
            let ranking = set.rankings.get(&label).map(Vec::as_slice).unwrap_or(&[]);
            let chosen = choose(ranking, selection, k.min(ranking.len()), seed, set.indexes[i].video);
            let input = modified_video(set, i, mode, &chosen)?;
            Ok(classify(net, &input)? == label)
        })
        .collect::<Result<_>>()?;
    let n = correct.iter().filter(|c| **c).count();
    Ok(EvalOutcome { accuracy: percent(n, set.videos.len()), warnings })
}

pub fn eval_add<B: ModelBackend + ?Sized>(net: &B, set: &EvalSet, selection: Selection, k: usize, seed: u64) -> Result<EvalOutcome> {
    evaluate(net, set, Mode::Add, selection, k, seed)
}

pub fn eval_remove<B: ModelBackend + ?Sized>(net: &B, set: &EvalSet, selection: Selection, k: usize, seed: u64) -> Result<EvalOutcome> {
    evaluate(net, set, Mode::Remove, selection, k, seed)
}

/// Percent of test videos classified correctly.
pub fn baseline_accuracy<B: ModelBackend + ?Sized>(net: &B, dataset: &LabeledDataset) -> Result<f64> {
    let test: Vec<_> = dataset.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let correct: Vec<bool> = test
        .par_iter()
        .map(|(_, item)| Ok(classify(net, &item.video)? == item.label))
        .collect::<Result<_>>()?;
    Ok(percent(correct.iter().filter(|c| **c).count(), test.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub model: String,
    pub mode: Mode,
    pub selection: Selection,
    /// Accuracy at k = 1, 2, ...
    pub accuracy: Vec<f64>,
    pub baseline: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "model,mode,selection,k,accuracy,baseline,seed";

impl EvalCurve {
    pub fn csv_rows(&self) -> Vec<String> {
        self.accuracy
            .iter()
            .enumerate()
            .map(|(i, acc)| {
                format!(
                    "{},{},{},{},{:.4},{:.4},{}",
                    self.model,
                    self.mode,
                    self.selection,
                    i + 1,
                    acc,
                    self.baseline,
                    self.seed
                )
            })
            .collect()
    }
}

/// Every mode and selection for k = 1..=k_max.
pub fn eval_curves<B: ModelBackend + ?Sized>(
    net: &B,
    model: &str,
    set: &EvalSet,
    baseline: f64,
    k_max: usize,
    seed: u64,
) -> Result<(Vec<EvalCurve>, Vec<ClampWarning>)> {
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for mode in Mode::ALL {
        for selection in Selection::ALL {
            let mut accuracy = Vec::with_capacity(k_max);
            for k in 1..=k_max {
                let out = evaluate(net, set, mode, selection, k, seed)?;
                for w in out.warnings {
                    if !warnings.contains(&w) {
                        warnings.push(w);
                    }
                }
                accuracy.push(out.accuracy);
            }
            curves.push(EvalCurve {
                model: model.to_string(),
                mode,
                selection,
                accuracy,
                baseline,
                seed,
            });
        }
    }
    Ok((curves, warnings))
}

pub fn curves_to_csv(curves: &[EvalCurve]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in curves {
        for row in c.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}
