//! Supervoxel segmentation at three resolutions and near-duplicate removal.
//!
//! Segmentation is SLIC extended to three dimensions: a localized k-means over
//! the joint (color, t, h, w) space. Color is unscaled, positions are scaled
//! by `compactness / S` where `S` is the cube root of voxels per segment.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::tensor::{BBox, Dims3, VideoTensor, VoxelMask};

pub const LABELS_MAGIC: &[u8; 4] = b"STL1";
pub const DESCRIPTOR_LEN: usize = 7;

/// Per-voxel segment labels with compacted ids `0..n_segments`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims3,
    labels: Vec<u32>,
    n_segments: u32,
}

impl LabelVolume {
    /// Builds a volume from raw labels, compacting them in first-occurrence order.
    pub fn from_raw(dims: Dims3, raw: &[u32]) -> Result<Self> {
        if raw.len() != dims.voxels() || raw.is_empty() {
            return Err(Error::invalid(format!("label count {} does not match {dims}", raw.len())));
        }
        let mut remap = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = remap.len() as u32;
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        Ok(Self { dims, labels, n_segments: remap.len() as u32 })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_segments(&self) -> u32 {
        self.n_segments
    }

    /// Voxel count per label.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_segments as usize];
        for l in &self.labels {
            sizes[*l as usize] += 1;
        }
        sizes
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.labels.len());
        out.extend_from_slice(LABELS_MAGIC);
        for d in [self.dims.t, self.dims.h, self.dims.w, self.n_segments as usize] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != LABELS_MAGIC {
            return Err(ParseError::BadMagic {
                expected: "STL1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            }
            .into());
        }
        if bytes.len() < 20 {
            return Err(ParseError::Truncated { expected: 20, found: bytes.len() }.into());
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let raw = [word(4), word(8), word(12)];
        let n_segments = word(16);
        let count = raw
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
            .filter(|n| n.checked_mul(4).and_then(|b| b.checked_add(20)).is_some())
            .ok_or_else(|| ParseError::DimOverflow(raw.to_vec()))?;
        let expected = 20 + 4 * count;
        if bytes.len() < expected {
            return Err(ParseError::Truncated { expected, found: bytes.len() }.into());
        }
        if bytes.len() > expected || count == 0 {
            return Err(ParseError::Shape(format!("label volume {raw:?} with {} bytes", bytes.len())).into());
        }
        let labels: Vec<u32> = (0..count).map(|i| word(20 + 4 * i)).collect();
        let dims = Dims3::new(raw[0] as usize, raw[1] as usize, raw[2] as usize);
        let vol = Self { dims, labels, n_segments };
        vol.check_compact().map_err(ParseError::Value)?;
        Ok(vol)
    }

    fn check_compact(&self) -> std::result::Result<(), String> {
        let mut seen = vec![false; self.n_segments as usize];
        for l in &self.labels {
            match seen.get_mut(*l as usize) {
                Some(s) => *s = true,
                None => return Err(format!("label {l} >= n_segments {}", self.n_segments)),
            }
        }
        match seen.iter().position(|s| !s) {
            Some(missing) => Err(format!("label {missing} never occurs")),
            None => Ok(()),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Small,
    Middle,
    Large,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Small, Level::Middle, Level::Large];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Small => "small",
            Level::Middle => "middle",
            Level::Large => "large",
        })
    }
}

impl FromStr for Level {
    type Err = ParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "small" => Ok(Level::Small),
            "middle" => Ok(Level::Middle),
            "large" => Ok(Level::Large),
            other => Err(ParseError::Value(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationLevels {
    pub small: LabelVolume,
    pub middle: LabelVolume,
    pub large: LabelVolume,
}

impl SegmentationLevels {
    pub fn get(&self, level: Level) -> &LabelVolume {
        match level {
            Level::Small => &self.small,
            Level::Middle => &self.middle,
            Level::Large => &self.large,
        }
    }
}

/// Result of a SLIC run: labels plus the objective after every assignment step.
#[derive(Debug, Clone)]
pub struct SlicOutput {
    pub labels: LabelVolume,
    pub objective: Vec<f64>,
}

/// Number of initial centers per axis: product ≤ `n_segments`, roughly cubic cells.
pub fn seed_grid(dims: Dims3, n_segments: usize) -> [usize; 3] {
    let extents = dims.as_array();
    let step = (dims.voxels() as f64 / n_segments as f64).cbrt();
    let mut grid = extents.map(|d| ((d as f64 / step).floor() as usize).clamp(1, d));
    let product = |g: &[usize; 3]| g.iter().product::<usize>();
    // Shrink the axis with the finest cells until the budget holds.
    while product(&grid) > n_segments {
        let axis = (0..3)
            .filter(|&a| grid[a] > 1)
            .min_by(|&a, &b| cell(extents[a], grid[a]).total_cmp(&cell(extents[b], grid[b])))
            .expect("grid of ones fits any budget");
        grid[axis] -= 1;
    }
    // Grow the axis with the coarsest cells while the budget allows; ties favor w, then h.
    loop {
        let mut order = [2usize, 1, 0];
        order.sort_by(|&a, &b| cell(extents[b], grid[b]).total_cmp(&cell(extents[a], grid[a])));
        let grown = order.iter().find(|&&a| {
            let mut g = grid;
            g[a] += 1;
            g[a] <= extents[a] && product(&g) <= n_segments
        });
        match grown {
            Some(&a) => grid[a] += 1,
            None => break,
        }
    }
    grid
}

fn cell(extent: usize, count: usize) -> f64 {
    extent as f64 / count as f64
}

/// Initial center positions (t, h, w): the centers of a regular grid of cells.
pub fn seed_centers(dims: Dims3, n_segments: usize) -> Vec<[f64; 3]> {
    let grid = seed_grid(dims, n_segments);
    let extents = dims.as_array();
    let axis = |a: usize| -> Vec<f64> {
        let step = cell(extents[a], grid[a]);
        (0..grid[a]).map(|k| (k as f64 + 0.5) * step - 0.5).collect()
    };
    let (ts, hs, ws) = (axis(0), axis(1), axis(2));
    let mut centers = Vec::with_capacity(grid.iter().product());
    for &t in &ts {
        for &h in &hs {
            for &w in &ws {
                centers.push([t, h, w]);
            }
        }
    }
    centers
}

/// 3-D SLIC. The seed is accepted for interface stability; seeding is a
/// deterministic grid, so the output depends only on the other arguments.
pub fn slic3d(
    video: &VideoTensor,
    n_segments: usize,
    compactness: f64,
    max_iters: usize,
    seed: u64,
) -> Result<LabelVolume> {
    Ok(slic3d_traced(video, n_segments, compactness, max_iters, seed)?.labels)
}

pub fn slic3d_traced(
    video: &VideoTensor,
    n_segments: usize,
    compactness: f64,
    max_iters: usize,
    _seed: u64,
) -> Result<SlicOutput> {
    let dims = video.dims();
    let n = dims.voxels();
    if n_segments == 0 || n_segments > n {
        return Err(Error::invalid(format!("n_segments {n_segments} outside [1, {n}]")));
    }
    if !(compactness > 0.0 && compactness.is_finite()) {
        return Err(Error::invalid(format!("compactness must be > 0, got {compactness}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    let c = video.channels();
    let step = (n as f64 / n_segments as f64).cbrt();
    let spatial = (compactness / step).powi(2);
    let extents = dims.as_array();
    let grid = seed_grid(dims, n_segments);
    let reach: [f64; 3] = std::array::from_fn(|a| cell(extents[a], grid[a]));

    let positions = seed_centers(dims, n_segments);
    let k = positions.len();
    let mut colors = vec![0.0f64; k * c];
    let mut pos = positions;
    for (i, p) in pos.iter().enumerate() {
        let at = p.map(|v| v.round().max(0.0) as usize);
        let idx = dims.index(at[0].min(dims.t - 1), at[1].min(dims.h - 1), at[2].min(dims.w - 1));
        for (dst, src) in colors[i * c..(i + 1) * c].iter_mut().zip(video.voxel(idx)) {
            *dst = *src as f64;
        }
    }

    let data = video.data();
    let distance = |center: usize, color_c: &[f64], p: &[f64; 3], idx: usize, t: usize, h: usize, w: usize| {
        let px = &data[idx * c..idx * c + c];
        let mut d = 0.0;
        for (a, b) in px.iter().zip(&color_c[center * c..center * c + c]) {
            let diff = *a as f64 - b;
            d += diff * diff;
        }
        let dt = t as f64 - p[0];
        let dh = h as f64 - p[1];
        let dw = w as f64 - p[2];
        d + spatial * (dt * dt + dh * dh + dw * dw)
    };

    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut objective = Vec::new();
    for _ in 0..max_iters {
        let previous = labels.clone();
        // Incumbent assignment is always a candidate, so the objective cannot rise.
        for idx in 0..n {
            let l = labels[idx];
            dist[idx] = if l == u32::MAX {
                f64::INFINITY
            } else {
                let (t, h, w) = dims.coords(idx);
                distance(l as usize, &colors, &pos[l as usize], idx, t, h, w)
            };
        }
        for (ci, p) in pos.iter().enumerate() {
            let range = |a: usize| {
                let lo = (p[a] - reach[a]).ceil().max(0.0) as usize;
                let hi = ((p[a] + reach[a]).floor().max(0.0) as usize).min(extents[a] - 1);
                lo..=hi
            };
            for t in range(0) {
                for h in range(1) {
                    for w in range(2) {
                        let idx = dims.index(t, h, w);
                        let d = distance(ci, &colors, p, idx, t, h, w);
                        if d < dist[idx] {
                            dist[idx] = d;
                            labels[idx] = ci as u32;
                        }
                    }
                }
            }
        }
        debug_assert!(labels.iter().all(|l| *l != u32::MAX));
        objective.push(dist.iter().sum());
        if labels == previous {
            break;
        }
        // Update centers to the mean of their members; empty centers stay put.
        let mut sums = vec![0.0f64; k * (c + 3)];
        let mut counts = vec![0usize; k];
        for (idx, l) in labels.iter().enumerate() {
            let l = *l as usize;
            let (t, h, w) = dims.coords(idx);
            let s = &mut sums[l * (c + 3)..(l + 1) * (c + 3)];
            for (acc, v) in s.iter_mut().zip(&data[idx * c..idx * c + c]) {
                *acc += *v as f64;
            }
            s[c] += t as f64;
            s[c + 1] += h as f64;
            s[c + 2] += w as f64;
            counts[l] += 1;
        }
        for l in 0..k {
            if counts[l] == 0 {
                continue;
            }
            let inv = 1.0 / counts[l] as f64;
            let s = &sums[l * (c + 3)..(l + 1) * (c + 3)];
            for ch in 0..c {
                colors[l * c + ch] = s[ch] * inv;
            }
            pos[l] = [s[c] * inv, s[c + 1] * inv, s[c + 2] * inv];
        }
    }
    Ok(SlicOutput { labels: LabelVolume::from_raw(dims, &labels)?, objective })
}

/// Segment counts (small, middle, large) for the three resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub small: usize,
    pub middle: usize,
    pub large: usize,
}

impl Default for LevelCounts {
    fn default() -> Self {
        Self { small: 64, middle: 16, large: 4 }
    }
}

pub const DEFAULT_SLIC_ITERS: usize = 10;

pub fn multilevel_segment(
    video: &VideoTensor,
    counts: LevelCounts,
    compactness: f64,
    seed: u64,
) -> Result<SegmentationLevels> {
    if !(counts.small > counts.middle && counts.middle > counts.large && counts.large >= 1) {
        return Err(Error::invalid(format!("level counts must satisfy small > middle > large >= 1, got {counts:?}")));
    }
    let run = |n, offset| slic3d(video, n, compactness, DEFAULT_SLIC_ITERS, seed.wrapping_add(offset));
    Ok(SegmentationLevels {
        small: run(counts.small, 0)?,
        middle: run(counts.middle, 1)?,
        large: run(counts.large, 2)?,
    })
}

/// Identifies a segment: source video index, resolution level and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub video: usize,
    pub level: Level,
    pub label: u32,
}

/// One supervoxel. Membership is kept as sorted linear voxel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video: usize,
    pub level: Level,
    pub label: u32,
    pub dims: Dims3,
    pub voxels: Vec<u32>,
    pub bbox: BBox,
    /// Mean color (first three channels, zero-padded), normalized centroid
    /// (t, h, w) and relative volume.
    pub descriptor: [f32; DESCRIPTOR_LEN],
}

impl Segment {
    pub fn id(&self) -> SegmentRef {
        SegmentRef { video: self.video, level: self.level, label: self.label }
    }

    pub fn volume(&self) -> usize {
        self.voxels.len()
    }

    pub fn mask(&self) -> VoxelMask {
        VoxelMask::from_indices(self.dims, &self.voxels)
    }
}

pub fn extract_segments(video_id: usize, video: &VideoTensor, levels: &SegmentationLevels) -> Result<Vec<Segment>> {
    let dims = video.dims();
    let c = video.channels();
    let mut out = Vec::new();
    for level in Level::ALL {
        let vol = levels.get(level);
        if vol.dims() != dims {
            return Err(Error::invalid(format!("{level} labels {} do not match video {}", vol.dims(), dims)));
        }
        let k = vol.n_segments() as usize;
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); k];
        for (idx, l) in vol.labels().iter().enumerate() {
            members[*l as usize].push(idx as u32);
        }
        for (label, voxels) in members.into_iter().enumerate() {
            let mut bbox = BBox { t0: usize::MAX, t1: 0, h0: usize::MAX, h1: 0, w0: usize::MAX, w1: 0 };
            let mut color = [0.0f64; 3];
            let mut centroid = [0.0f64; 3];
            for &idx in &voxels {
                let (t, h, w) = dims.coords(idx as usize);
                bbox.t0 = bbox.t0.min(t);
                bbox.t1 = bbox.t1.max(t + 1);
                bbox.h0 = bbox.h0.min(h);
                bbox.h1 = bbox.h1.max(h + 1);
                bbox.w0 = bbox.w0.min(w);
                bbox.w1 = bbox.w1.max(w + 1);
                for (acc, v) in color.iter_mut().zip(video.voxel(idx as usize)) {
                    *acc += *v as f64;
                }
                centroid[0] += t as f64;
                centroid[1] += h as f64;
                centroid[2] += w as f64;
            }
            let count = voxels.len() as f64;
            let extents = dims.as_array();
            let mut descriptor = [0.0f32; DESCRIPTOR_LEN];
            for ch in 0..c.min(3) {
                descriptor[ch] = (color[ch] / count) as f32;
            }
            for a in 0..3 {
                descriptor[3 + a] = ((centroid[a] / count + 0.5) / extents[a] as f64) as f32;
            }
            descriptor[6] = (count / dims.voxels() as f64) as f32;
            out.push(Segment { video: video_id, level, label: label as u32, dims, voxels, bbox, descriptor });
        }
    }
    Ok(out)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Greedy near-duplicate removal within each video.
///
/// Pairs are visited in descending descriptor cosine similarity; whenever a
/// pair's similarity exceeds `threshold` and both members are still alive,
/// the smaller one is dropped (equal volume: the higher label id, then the
/// later input position). Survivors keep their input order.
pub fn dedupe_segments(segments: &[Segment], threshold: f64) -> Result<Vec<Segment>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("similarity threshold must be in (0, 1], got {threshold}")));
    }
    let mut alive = vec![true; segments.len()];
    let mut by_video: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in segments.iter().enumerate() {
        by_video.entry(s.video).or_default().push(i);
    }
    for members in by_video.values() {
        let mut pairs = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let sim = cosine_similarity(&segments[i].descriptor, &segments[j].descriptor);
                if sim > threshold {
                    pairs.push((sim, i, j));
                }
            }
        }
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        for (_, i, j) in pairs {
            if !(alive[i] && alive[j]) {
                continue;
            }
            let (a, b) = (&segments[i], &segments[j]);
            let drop_j = (b.volume(), std::cmp::Reverse(b.label), std::cmp::Reverse(j))
                < (a.volume(), std::cmp::Reverse(a.label), std::cmp::Reverse(i));
            if drop_j {
                alive[j] = false;
            } else {
                alive[i] = false;
            }
        }
    }
    Ok(segments.iter().zip(alive).filter(|(_, keep)| *keep).map(|(s, _)| s.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(video: usize, label: u32, volume: usize, descriptor: [f32; 7]) -> Segment {
        let dims = Dims3::new(1, 1, 64);
        Segment {
            video,
            level: Level::Small,
            label,
            dims,
            voxels: (0..volume as u32).collect(),
            bbox: BBox { t0: 0, t1: 1, h0: 0, h1: 1, w0: 0, w1: volume },
            descriptor,
        }
    }

    #[test]
    fn seed_grid_budget() {
        assert_eq!(seed_grid(Dims3::new(8, 8, 8), 8), [2, 2, 2]);
        assert_eq!(seed_grid(Dims3::new(16, 32, 32), 1), [1, 1, 1]);
        for n in [1, 2, 3, 4, 7, 16, 64, 100] {
            let g = seed_grid(Dims3::new(16, 32, 32), n);
            assert!(g.iter().product::<usize>() <= n, "{n}: {g:?}");
        }
        assert!(seed_grid(Dims3::new(1, 1, 100), 2).iter().product::<usize>() <= 2);
        // Two centers split along w first.
        assert_eq!(seed_grid(Dims3::new(8, 16, 16), 2), [1, 1, 2]);
    }

    #[test]
    fn single_segment() {
        let v = VideoTensor::filled(Dims3::new(4, 6, 6), &[0.3, 0.2, 0.1]);
        let l = slic3d(&v, 1, 0.1, 5, 0).unwrap();
        assert_eq!(l.n_segments(), 1);
        assert!(l.labels().iter().all(|x| *x == 0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let v = VideoTensor::zeros(Dims3::new(2, 2, 2), 1);
        assert!(slic3d(&v, 9, 0.1, 5, 0).is_err());
        assert!(slic3d(&v, 0, 0.1, 5, 0).is_err());
        assert!(slic3d(&v, 2, 0.0, 5, 0).is_err());
        assert!(slic3d(&v, 2, 0.1, 0, 0).is_err());
    }

    #[test]
    fn labels_file_round_trip_and_errors() {
        let v = VideoTensor::filled(Dims3::new(4, 8, 8), &[0.5]);
        let l = slic3d(&v, 8, 0.1, 5, 0).unwrap();
        let bytes = l.to_bytes();
        assert_eq!(&bytes[..4], b"STL1");
        assert_eq!(LabelVolume::from_bytes(&bytes).unwrap(), l);
        assert!(matches!(
            LabelVolume::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Parse(ParseError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[16] = 200;
        assert!(LabelVolume::from_bytes(&bad).is_err());
    }

    #[test]
    fn descriptors_and_bbox() {
        let dims = Dims3::new(2, 3, 4);
        let v = VideoTensor::filled(dims, &[0.25, 0.5, 0.75]);
        let mut raw = vec![0u32; dims.voxels()];
        raw[dims.index(1, 2, 3)] = 1;
        let vol = LabelVolume::from_raw(dims, &raw).unwrap();
        let levels = SegmentationLevels { small: vol.clone(), middle: vol.clone(), large: vol };
        let segs = extract_segments(0, &v, &levels).unwrap();
        assert_eq!(segs.len(), 6);
        let single = segs.iter().find(|s| s.volume() == 1).unwrap();
        assert_eq!(single.bbox, BBox { t0: 1, t1: 2, h0: 2, h1: 3, w0: 3, w1: 4 });
        assert!(segs.iter().all(|s| s.descriptor[..3] == [0.25, 0.5, 0.75]));
        for s in &segs {
            assert!(s.descriptor[3..].iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn dedupe_identical_pair() {
        let d = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.1];
        let out = dedupe_segments(&[seg(0, 0, 5, d), seg(0, 1, 5, d)], 0.99).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, 0);
    }

    #[test]
    fn dedupe_threshold_one_keeps_distinct() {
        let segs = vec![
            seg(0, 0, 5, [1.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.1]),
            seg(0, 1, 6, [0.0, 1.0, 0.0, 0.1, 0.2, 0.3, 0.1]),
            seg(0, 2, 7, [0.0, 0.0, 1.0, 0.4, 0.2, 0.3, 0.1]),
        ];
        assert_eq!(dedupe_segments(&segs, 1.0).unwrap(), segs);
        assert!(dedupe_segments(&segs, 0.0).is_err());
    }

    #[test]
    fn dedupe_keeps_largest_of_similar_triple() {
        let segs = vec![
            seg(0, 0, 10, [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.10]),
            seg(0, 1, 20, [0.5, 0.5, 0.5, 0.5, 0.5, 0.51, 0.10]),
            seg(0, 2, 30, [0.5, 0.5, 0.5, 0.5, 0.52, 0.5, 0.10]),
        ];
        let out = dedupe_segments(&segs, 0.99).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].volume(), 30);
    }

    #[test]
    fn dedupe_never_crosses_videos() {
        let d = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.1];
        let out = dedupe_segments(&[seg(0, 0, 5, d), seg(1, 0, 5, d)], 0.9).unwrap();
        assert_eq!(out.len(), 2);
    }
}
