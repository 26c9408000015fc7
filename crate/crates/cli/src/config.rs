//! Plain-text workspace configuration: one `key = value` per line, `#`
//! starts a comment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stace_core::supervoxel::LevelCounts;
use stace_core::tensor::Dims3;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negatives {
    Segments,
    Whole,
}

impl FromStr for Negatives {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "segments" => Ok(Negatives::Segments),
            "whole" => Ok(Negatives::Whole),
            _ => Err(CliError::Config(format!("negatives must be `segments` or `whole`, got {s:?}"))),
        }
    }
}

impl fmt::Display for Negatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Negatives::Segments => "segments",
            Negatives::Whole => "whole",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synth,
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub synth_classes: usize,
    pub synth_videos_per_class: usize,
    pub synth_dims: Dims3,
    pub synth_test_fraction: f64,
    pub input_dims: Dims3,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub momentum: f32,
    pub clip_norm: f32,
    pub segments: LevelCounts,
    pub compactness: f64,
    pub dedupe_tau: f64,
    pub concepts: usize,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    pub min_size: usize,
    pub min_videos: usize,
    pub layer: String,
    pub cav_l2: f64,
    pub cav_epochs: usize,
    pub cav_lr: f64,
    pub negatives: Negatives,
    /// 0 scores every test video of the class.
    pub score_k: usize,
    pub k_max: usize,
    pub model_id: String,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("stace_out"),
            dataset: DatasetSource::Synth,
            synth_classes: 4,
            synth_videos_per_class: 20,
            synth_dims: Dims3::new(16, 32, 32),
            synth_test_fraction: 0.25,
            input_dims: Dims3::new(16, 32, 32),
            epochs: 20,
            lr: 0.01,
            batch: 8,
            momentum: 0.9,
            clip_norm: 1.0,
            segments: LevelCounts::default(),
            compactness: 0.2,
            dedupe_tau: 0.95,
            concepts: 5,
            kmeans_iters: 100,
            kmeans_restarts: 10,
            min_size: 5,
            min_videos: 2,
            layer: "gap".to_string(),
            cav_l2: 1e-3,
            cav_epochs: 500,
            cav_lr: 0.1,
            negatives: Negatives::Segments,
            score_k: 0,
            k_max: 5,
            model_id: "builtin".to_string(),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_dims(key: &str, value: &str) -> Result<Dims3, CliError> {
    let parts: Vec<&str> = value.split('x').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::Config(format!("`{key}` must look like TxHxW, got {value:?}")));
    }
    Ok(Dims3::new(parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?))
}

impl Config {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), CliError> {
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        match key {
            "out_dir" => self.out_dir = resolve(value),
            "dataset" => {
                self.dataset = if value == "synth" { DatasetSource::Synth } else { DatasetSource::Manifest(resolve(value)) }
            }
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "synth_videos_per_class" => self.synth_videos_per_class = parse(key, value)?,
            "synth_dims" => self.synth_dims = parse_dims(key, value)?,
            "synth_test_fraction" => self.synth_test_fraction = parse(key, value)?,
            "input_dims" => self.input_dims = parse_dims(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "segments_small" => self.segments.small = parse(key, value)?,
            "segments_middle" => self.segments.middle = parse(key, value)?,
            "segments_large" => self.segments.large = parse(key, value)?,
            "compactness" => self.compactness = parse(key, value)?,
            "dedupe_tau" => self.dedupe_tau = parse(key, value)?,
            "concepts" => self.concepts = parse(key, value)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "kmeans_restarts" => self.kmeans_restarts = parse(key, value)?,
            "min_size" => self.min_size = parse(key, value)?,
            "min_videos" => self.min_videos = parse(key, value)?,
            "layer" => self.layer = value.to_string(),
            "cav_l2" => self.cav_l2 = parse(key, value)?,
            "cav_epochs" => self.cav_epochs = parse(key, value)?,
            "cav_lr" => self.cav_lr = parse(key, value)?,
            "negatives" => self.negatives = value.parse()?,
            "score_k" => self.score_k = parse(key, value)?,
            "k_max" => self.k_max = parse(key, value)?,
            "model_id" => self.model_id = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: &str| Err(CliError::Config(m.to_string()));
        if self.concepts == 0 || self.kmeans_restarts == 0 || self.kmeans_iters == 0 {
            return fail("concepts, kmeans_iters and kmeans_restarts must be >= 1");
        }
        if !(self.dedupe_tau > 0.0 && self.dedupe_tau <= 1.0) {
            return fail("dedupe_tau must be in (0,1]");
        }
        if self.epochs == 0 || self.batch == 0 || self.k_max == 0 {
            return fail("epochs, batch and k_max must be >= 1");
        }
        if self.model_id.contains(',') {
            return fail("model_id must not contain commas");
        }
        Ok(())
    }

    /// Every value that can influence an output, as (key, text) pairs.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let dims = |d: Dims3| format!("{}x{}x{}", d.t, d.h, d.w);
        let dataset = match &self.dataset {
            DatasetSource::Synth => "synth".to_string(),
            DatasetSource::Manifest(p) => p.display().to_string(),
        };
        let pairs: Vec<(&'static str, String)> = vec![
            ("dataset", dataset),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_videos_per_class", self.synth_videos_per_class.to_string()),
            ("synth_dims", dims(self.synth_dims)),
            ("synth_test_fraction", self.synth_test_fraction.to_string()),
            ("input_dims", dims(self.input_dims)),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("momentum", self.momentum.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("segments_small", self.segments.small.to_string()),
            ("segments_middle", self.segments.middle.to_string()),
            ("segments_large", self.segments.large.to_string()),
            ("compactness", self.compactness.to_string()),
            ("dedupe_tau", self.dedupe_tau.to_string()),
            ("concepts", self.concepts.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("kmeans_restarts", self.kmeans_restarts.to_string()),
            ("min_size", self.min_size.to_string()),
            ("min_videos", self.min_videos.to_string()),
            ("layer", self.layer.clone()),
            ("cav_l2", self.cav_l2.to_string()),
            ("cav_epochs", self.cav_epochs.to_string()),
            ("cav_lr", self.cav_lr.to_string()),
            ("negatives", self.negatives.to_string()),
            ("score_k", self.score_k.to_string()),
            ("k_max", self.k_max.to_string()),
            ("model_id", self.model_id.clone()),
            ("seed", self.seed.to_string()),
        ];
        pairs
    }

    /// Canonical text form of the values whose keys pass `keep`.
    pub fn canonical_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        self.pairs().iter().filter(|(k, _)| keep(k)).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn canonical(&self) -> String {
        self.canonical_filtered(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_paths() {
        let cfg = Config::parse(
            "# workspace\nseed = 7   # master\nout_dir = runs/a\ninput_dims = 8x16x16\nnegatives = whole\n\n",
            Path::new("/tmp/base"),
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/base/runs/a"));
        assert_eq!(cfg.input_dims, Dims3::new(8, 16, 16));
        assert_eq!(cfg.negatives, Negatives::Whole);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let base = Path::new(".");
        assert!(Config::parse("colour = red", base).is_err());
        assert!(Config::parse("seed = 1\nseed = 2", base).is_err());
        assert!(Config::parse("seed 1", base).is_err());
        assert!(Config::parse("seed = x", base).is_err());
        assert!(Config::parse("input_dims = 8x8", base).is_err());
        assert!(Config::parse("dedupe_tau = 0", base).is_err());
    }

    #[test]
    fn canonical_round_trips() {
        let cfg = Config::parse("seed = 3\ncompactness = 0.5", Path::new("/w")).unwrap();
        let again = Config::parse(&cfg.canonical(), Path::new("/w")).unwrap();
        assert_eq!(again.canonical(), cfg.canonical());
    }
}
