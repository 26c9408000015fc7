//! Concept discovery: encode segments as model inputs, featurize them at a
//! layer and cluster each class's segments into concepts.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::ModelBackend;
use crate::error::{Error, Result};
use crate::supervoxel::{Segment, SegmentRef};
use crate::tensor::{resize_trilinear, Dims3, VideoTensor, VoxelMask};

/// A segment rendered at model input dims with everything outside the
/// segment set to the dataset mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    pub segment: SegmentRef,
    pub tensor: VideoTensor,
}

pub fn segment_to_input(video: &VideoTensor, segment: &Segment, mean: &[f32], input_dims: Dims3) -> Result<SegmentInput> {
    if segment.voxels.is_empty() {
        return Err(Error::invalid(format!("segment {:?} has an empty mask", segment.id())));
    }
    if segment.dims != video.dims() {
        return Err(Error::invalid(format!(
            "segment dims {} do not match video {}",
            segment.dims,
            video.dims()
        )));
    }
    if mean.len() != video.channels() {
        return Err(Error::invalid(format!("mean has {} channels, video {}", mean.len(), video.channels())));
    }
    let bbox = segment.bbox;
    let crop_dims = bbox.dims();
    let mut mask = VoxelMask::new(crop_dims, false);
    for &idx in &segment.voxels {
        let (t, h, w) = segment.dims.coords(idx as usize);
        if !bbox.contains(t, h, w) {
            return Err(Error::invalid(format!("segment voxel {idx} outside its bbox")));
        }
        mask.data_mut()[crop_dims.index(t - bbox.t0, h - bbox.h0, w - bbox.w0)] = true;
    }
    let mut crop = video.crop(&bbox)?;
    fill_outside(&mut crop, &mask, mean);
    let mut tensor = resize_trilinear(&crop, input_dims)?;
    let resized_mask = mask.resize_nearest(input_dims)?;
    fill_outside(&mut tensor, &resized_mask, mean);
    Ok(SegmentInput { segment: segment.id(), tensor })
}

fn fill_outside(t: &mut VideoTensor, mask: &VoxelMask, mean: &[f32]) {
    for (i, inside) in mask.data().iter().enumerate() {
        if !inside {
            t.voxel_mut(i).copy_from_slice(mean);
        }
    }
}

/// One feature row per input, in input order.
pub fn featurize<B: ModelBackend + ?Sized>(net: &B, inputs: &[SegmentInput], layer: &str) -> Result<Vec<Vec<f32>>> {
    net.activation_dim(layer)?;
    inputs.par_iter().map(|input| net.activations(&input.tensor, layer)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every assignment step.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, c)| (*x as f64 - c).powi(2)).sum()
}

fn plus_plus_init(rows: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |r: &Vec<f32>| r.iter().map(|v| *v as f64).collect::<Vec<f64>>();
    let first = rng.gen_range(0..rows.len());
    let mut chosen = vec![first];
    let mut centroids = vec![to_f64(&rows[first])];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| nearest.iter().rposition(|d| *d > 0.0).expect("total > 0"))
        } else {
            (0..rows.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        let c = to_f64(&rows[pick]);
        for (n, r) in nearest.iter_mut().zip(rows) {
            *n = n.min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Ties in assignment keep the current cluster, otherwise go to the lowest
/// index. A cluster that empties is re-seeded at the point farthest from its
/// assigned centroid. At a Lloyd fixed point, single-point moves that still
/// lower the objective once both centroids shift (Hartigan's rule) are
/// applied and Lloyd resumes. Stops at a fixed point of both or after
/// `max_iters` steps.
pub fn kmeans_cluster(features: &[Vec<f32>], k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || features.len() < k {
        return Err(Error::invalid(format!("need rows >= k >= 1, got {} rows and k = {k}", features.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("feature rows have different widths"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let mut assignments = vec![usize::MAX; features.len()];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        let mut dists = vec![0.0; features.len()];
        for (i, row) in features.iter().enumerate() {
            let current = assignments[i];
            let mut best = current;
            let mut best_d = if current == usize::MAX { f64::INFINITY } else { sq_dist(row, &centroids[current]) };
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(row, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            changed |= best != current;
            assignments[i] = best;
            dists[i] = best_d;
            objective += best_d;
        }
        history.push(objective);
        if !changed {
            if hartigan_moves(features, &mut assignments, &mut centroids, k) {
                centroids = cluster_means(features, &assignments, k, &centroids);
                history.push(features.iter().zip(&assignments).map(|(r, a)| sq_dist(r, &centroids[*a])).sum());
                continue;
            }
            converged = true;
            break;
        }
        centroids = cluster_means(features, &assignments, k, &centroids);
        // Re-seed empty clusters at the farthest points.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|a| counts[*a] += 1);
        let mut used = BTreeSet::new();
        for c in (0..k).filter(|c| counts[*c] == 0) {
            let far = (0..features.len())
                .filter(|i| !used.contains(i))
                .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)));
            if let Some(far) = far {
                used.insert(far);
                centroids[c] = features[far].iter().map(|v| *v as f64).collect();
            }
        }
    }
    if !converged {
        centroids = cluster_means(features, &assignments, k, &centroids);
    }
    let objective = features.iter().zip(&assignments).map(|(r, a)| sq_dist(r, &centroids[*a])).sum();
    Ok(KMeansResult { assignments, centroids, objective, history })
}

/// Moves single points to the cluster where the objective drops most once
/// both centroids are updated; returns whether anything moved.
fn hartigan_moves(features: &[Vec<f32>], assignments: &mut [usize], centroids: &mut [Vec<f64>], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    assignments.iter().for_each(|a| counts[*a] += 1);
    let mut moved = false;
    loop {
        let mut any = false;
        for (i, row) in features.iter().enumerate() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let leave = counts[a] as f64 / (counts[a] - 1) as f64 * sq_dist(row, &centroids[a]);
            let mut best = None;
            let mut best_join = leave;
            for b in (0..k).filter(|b| *b != a) {
                let join = counts[b] as f64 / (counts[b] + 1) as f64 * sq_dist(row, &centroids[b]);
                if join < best_join {
                    best = Some(b);
                    best_join = join;
                }
            }
            let Some(b) = best else { continue };
            if leave - best_join <= 1e-12 * (leave + best_join) {
                continue;
            }
            let (na, nb) = (counts[a] as f64, counts[b] as f64);
            for (d, v) in row.iter().enumerate() {
                let v = *v as f64;
                centroids[a][d] = (centroids[a][d] * na - v) / (na - 1.0);
                centroids[b][d] = (centroids[b][d] * nb + v) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignments[i] = b;
            any = true;
        }
        if !any {
            return moved;
        }
        moved = true;
    }
}

fn cluster_means(features: &[Vec<f32>], assignments: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = features[0].len();
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (row, a) in features.iter().zip(assignments) {
        counts[*a] += 1;
        for (s, v) in sums[*a].iter_mut().zip(row) {
            *s += *v as f64;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| if n == 0 { previous[c].clone() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

/// Best of `restarts` runs (seeds `seed, seed+1, …`) by objective; ties keep the earliest.
pub fn kmeans_restarts(features: &[Vec<f32>], k: usize, max_iters: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let runs: Vec<KMeansResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| kmeans_cluster(features, k, max_iters, seed.wrapping_add(r)))
        .collect::<Result<_>>()?;
    Ok(runs
        .into_iter()
        .reduce(|best, run| if run.objective < best.objective { run } else { best })
        .expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub class: usize,
    pub id: usize,
    pub members: Vec<SegmentRef>,
    pub centroid: Vec<f32>,
    pub n_videos: usize,
}

/// One concept per cluster that has at least `min_size` members drawn from at
/// least `min_videos` distinct videos.
///
/// Surviving clusters get ids 0.. in order of decreasing centroid norm (ties
/// keep cluster order), so ids do not depend on the label permutation that
/// clustering happened to produce.
pub fn build_concepts(
    class: usize,
    segments: &[SegmentRef],
    assignments: &[usize],
    centroids: &[Vec<f64>],
    min_size: usize,
    min_videos: usize,
) -> Result<Vec<Concept>> {
    if segments.len() != assignments.len() {
        return Err(Error::invalid(format!(
            "{} segments but {} assignments",
            segments.len(),
            assignments.len()
        )));
    }
    let mut survivors = Vec::new();
    for (cluster, centroid) in centroids.iter().enumerate() {
        let members: Vec<SegmentRef> =
            segments.iter().zip(assignments).filter(|(_, a)| **a == cluster).map(|(s, _)| *s).collect();
        let n_videos = members.iter().map(|m| m.video).collect::<BTreeSet<_>>().len();
        if members.is_empty() || members.len() < min_size || n_videos < min_videos {
            continue;
        }
        let norm = centroid.iter().map(|v| v * v).sum::<f64>();
        survivors.push((norm, members, centroid, n_videos));
    }
    survivors.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(survivors
        .into_iter()
        .enumerate()
        .map(|(id, (_, members, centroid, n_videos))| Concept {
            class,
            id,
            members,
            centroid: centroid.iter().map(|v| *v as f32).collect(),
            n_videos,
        })
        .collect())
}
