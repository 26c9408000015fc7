//! Labeled video datasets: the synthetic generator and the plain-text manifest.
//!
//! Synthetic classes follow a (shape × motion direction) factorial design. Each
//! video shows one bright object moving in a straight line over a static,
//! low-amplitude textured background, and the object's voxels are exported as
//! the ground-truth mask of the class-defining content.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::tensor::{Dims3, VideoTensor, VoxelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = ParseError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(ParseError::Value(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    pub video: VideoTensor,
    pub label: usize,
    pub split: Split,
    pub ground_truth: Option<VoxelMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<LabeledVideo>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<LabeledVideo>, n_classes: usize) -> Result<Self> {
        let ds = Self { items, n_classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if let Some(bad) = self.items.iter().find(|v| v.label >= self.n_classes) {
            return Err(Error::invalid(format!(
                "video {} has label {} outside [0,{})",
                bad.id, bad.label, self.n_classes
            )));
        }
        for split in [Split::Train, Split::Test] {
            if !self.items.iter().any(|v| v.split == split) {
                return Err(Error::invalid(format!("{split} split is empty")));
            }
        }
        let dims = self.items[0].video.dims();
        let channels = self.items[0].video.channels();
        for item in &self.items {
            if item.video.dims() != dims || item.video.channels() != channels {
                return Err(Error::invalid(format!("video {} has inconsistent dims", item.id)));
            }
            if let Some(m) = &item.ground_truth {
                if m.dims() != dims {
                    return Err(Error::invalid(format!("mask of {} has wrong dims", item.id)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &LabeledVideo)> {
        self.items.iter().enumerate().filter(move |(_, v)| v.split == split)
    }

    pub fn video_dims(&self) -> Dims3 {
        self.items[0].video.dims()
    }

    pub fn channels(&self) -> usize {
        self.items[0].video.channels()
    }

    /// Per-channel mean intensity over the training split.
    pub fn train_mean(&self) -> Vec<f32> {
        let c = self.channels();
        let mut sums = vec![0.0f64; c];
        let mut count = 0usize;
        for (_, item) in self.split(Split::Train) {
            for px in item.video.data().chunks_exact(c) {
                for (s, v) in sums.iter_mut().zip(px) {
                    *s += *v as f64;
                }
            }
            count += item.video.dims().voxels();
        }
        sums.iter().map(|s| (s / count as f64) as f32).collect()
    }

    /// Writes every tensor (and mask, when present) under `dir` plus
    /// `dir/manifest.txt` with one `<path> <label> <split>` line per video.
    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("videos"))?;
        let mut manifest = String::new();
        for item in &self.items {
            let rel = format!("videos/{}.stv1", item.id);
            item.video.write(dir.join(&rel))?;
            if let Some(mask) = &item.ground_truth {
                mask.write(dir.join(format!("videos/{}.stm0", item.id)))?;
            }
            manifest.push_str(&format!("{} {} {}\n", rel, item.label, item.split));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest)?;
        Ok(path)
    }

    /// Loads a manifest. Tensor paths are relative to the manifest's directory;
    /// a sibling file with the `.stm0` extension is read as the ground-truth mask.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        let text = fs::read_to_string(path)?;
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(ParseError::Value(format!(
                    "manifest line {}: expected 3 fields, found {}",
                    lineno + 1,
                    fields.len()
                ))
                .into());
            }
            let label: usize = fields[1].parse().map_err(|_| {
                ParseError::Value(format!("manifest line {}: bad label {:?}", lineno + 1, fields[1]))
            })?;
            let split: Split = fields[2].parse()?;
            let tensor_path = root.join(fields[0]);
            let video = VideoTensor::read(&tensor_path)?;
            let mask_path = tensor_path.with_extension("stm0");
            let ground_truth = if mask_path.exists() { Some(VoxelMask::read(&mask_path)?) } else { None };
            let id = Path::new(fields[0])
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("video{lineno}"));
            items.push(LabeledVideo { id, video, label, split, ground_truth });
        }
        if items.is_empty() {
            return Err(Error::invalid("manifest lists no videos"));
        }
        let n_classes = items.iter().map(|v| v.label).max().unwrap_or(0) + 1;
        Self::new(items, n_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Cross,
    Diamond,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Square, Shape::Disk, Shape::Cross, Shape::Diamond];

    fn contains(&self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Disk => dy * dy + dx * dx <= (r + 0.5) * (r + 0.5),
            Shape::Cross => {
                let arm = (r / 3.0).max(1.0);
                (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
            }
            Shape::Diamond => dy.abs() + dx.abs() <= r + 0.5,
        }
    }
}

/// Unit steps (dy, dx) of the eight compass directions.
const DIRECTIONS: [(f64, f64); 8] = [
    (0.0, 1.0),
    (1.0, 0.0),
    (0.0, -1.0),
    (-1.0, 0.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (1.0, 1.0),
    (-1.0, -1.0),
];

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.25, 0.2],
    [0.2, 0.95, 0.3],
    [0.25, 0.45, 1.0],
    [1.0, 0.95, 0.2],
    [0.95, 0.3, 0.95],
    [0.2, 0.95, 0.95],
    [1.0, 0.6, 0.15],
    [0.95, 0.95, 0.95],
];

pub const MAX_SYNTH_CLASSES: usize = 32;
pub const BACKGROUND_BASE: f32 = 0.3;
pub const BACKGROUND_AMPLITUDE: f32 = 0.2;

/// (shape, direction index) of synthetic class `class`; unique for `class < 32`.
pub fn class_design(class: usize) -> (Shape, usize) {
    (Shape::ALL[class % 4], (class + class / 4) % 8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub dims: Dims3,
    pub seed: u64,
    pub test_fraction: f64,
}

impl SynthParams {
    pub fn new(n_classes: usize, videos_per_class: usize, dims: Dims3, seed: u64) -> Self {
        Self { n_classes, videos_per_class, dims, seed, test_fraction: 0.25 }
    }
}

/// Generates a dataset as a pure function of `params`.
pub fn synth_dataset(params: &SynthParams) -> Result<LabeledDataset> {
    let SynthParams { n_classes, videos_per_class, dims, seed, test_fraction } = *params;
    if !(2..=MAX_SYNTH_CLASSES).contains(&n_classes) {
        return Err(Error::invalid(format!("n_classes must be in [2,{MAX_SYNTH_CLASSES}], got {n_classes}")));
    }
    if dims.t < 8 || dims.h < 16 || dims.w < 16 {
        return Err(Error::invalid(format!("dims must be at least 8x16x16, got {dims}")));
    }
    if videos_per_class < 2 {
        return Err(Error::invalid("need at least 2 videos per class"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!("test_fraction {test_fraction} outside [0,1)")));
    }
    let n_test = ((videos_per_class as f64 * test_fraction).round() as usize).clamp(1, videos_per_class - 1);
    let mut items = Vec::with_capacity(n_classes * videos_per_class);
    for class in 0..n_classes {
        for idx in 0..videos_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((class as u64) << 32) | idx as u64);
            let (video, mask) = render_video(class, dims, &mut rng);
            let split = if idx + n_test >= videos_per_class { Split::Test } else { Split::Train };
            items.push(LabeledVideo {
                id: format!("c{class:02}_v{idx:03}"),
                video,
                label: class,
                split,
                ground_truth: Some(mask),
            });
        }
    }
    LabeledDataset::new(items, n_classes)
}

fn render_video(class: usize, dims: Dims3, rng: &mut ChaCha8Rng) -> (VideoTensor, VoxelMask) {
    let (shape, dir) = class_design(class);
    let (dy, dx) = DIRECTIONS[dir];
    let color = PALETTE[class % PALETTE.len()];

    // Static background: coarse blotches plus per-pixel grain.
    let cell = 8usize;
    let gh = dims.h / cell + 2;
    let gw = dims.w / cell + 2;
    let coarse: Vec<f32> = (0..gh * gw * 3).map(|_| rng.gen::<f32>()).collect();
    let mut background = vec![0.0f32; dims.h * dims.w * 3];
    for h in 0..dims.h {
        for w in 0..dims.w {
            let fy = h as f32 / cell as f32;
            let fx = w as f32 / cell as f32;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            for c in 0..3 {
                let at = |y: usize, x: usize| coarse[(y * gw + x) * 3 + c];
                let smooth = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                    + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                let grain = rng.gen::<f32>();
                background[(h * dims.w + w) * 3 + c] =
                    BACKGROUND_BASE + BACKGROUND_AMPLITUDE * (0.5 * smooth + 0.5 * grain);
            }
        }
    }

    let radius = ((dims.h.min(dims.w) as f64 / 6.0).round() + rng.gen_range(0..=1) as f64).max(2.0);
    let frames = (dims.t - 1).max(1) as f64;
    // Travel distance along each moving axis, leaving a one-pixel margin.
    let room = |extent: usize| extent as f64 - 2.0 * radius - 3.0;
    let travel = rng.gen_range(0.6..=0.9) * room(dims.h).min(room(dims.w)).max(0.0);
    let start_axis = |extent: usize, step: f64, rng: &mut ChaCha8Rng| {
        let lo = radius + 1.0;
        let hi = extent as f64 - radius - 2.0;
        let span = if step == 0.0 { hi - lo } else { hi - lo - travel };
        let offset = if span > 0.0 { rng.gen_range(0.0..=span) } else { 0.0 };
        if step < 0.0 {
            hi - offset
        } else {
            lo + offset
        }
    };
    let y0 = start_axis(dims.h, dy, rng);
    let x0 = start_axis(dims.w, dx, rng);
    let brightness = rng.gen_range(0.92f32..=1.0);

    let mut data = Vec::with_capacity(dims.voxels() * 3);
    let mut mask = VoxelMask::new(dims, false);
    for t in 0..dims.t {
        let progress = t as f64 / frames * travel;
        let cy = y0 + dy * progress;
        let cx = x0 + dx * progress;
        for h in 0..dims.h {
            for w in 0..dims.w {
                if shape.contains(h as f64 - cy, w as f64 - cx, radius) {
                    data.extend(color.iter().map(|v| (v * brightness).clamp(0.0, 1.0)));
                    mask.data_mut()[dims.index(t, h, w)] = true;
                } else {
                    data.extend_from_slice(&background[(h * dims.w + w) * 3..(h * dims.w + w) * 3 + 3]);
                }
            }
        }
    }
    let video = VideoTensor::from_vec(dims, 3, data).expect("generator produces consistent dims");
    (video, mask)
}
