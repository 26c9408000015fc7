//! Pipeline orchestration for the `stace` command.
//!
//! Every stage writes into its own directory under the configured output
//! directory together with a `stage.json` manifest holding the checksums of
//! its inputs and outputs. A stage whose manifest still matches is skipped.

pub mod config;
pub mod error;
pub mod render;
pub mod stages;
pub mod workspace;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;

pub use config::Config;
pub use error::CliError;
use stages::StageContext;
use workspace::{sha256_hex, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Train,
    Segment,
    Cluster,
    Cav,
    Score,
    Eval,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Train,
        Stage::Segment,
        Stage::Cluster,
        Stage::Cav,
        Stage::Score,
        Stage::Eval,
        Stage::Render,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Segment => "segment",
            Stage::Cluster => "cluster",
            Stage::Cav => "cav",
            Stage::Score => "score",
            Stage::Eval => "eval",
            Stage::Render => "render",
        }
    }

    /// Output directory relative to the workspace root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Synth => "data",
            Stage::Train => "model",
            Stage::Segment => "segments",
            Stage::Cluster => "concepts",
            Stage::Cav => "cavs",
            Stage::Score => "reports",
            Stage::Eval => "eval",
            Stage::Render => "render",
        }
    }

    pub fn index(self) -> u64 {
        Stage::ALL.iter().position(|s| *s == self).unwrap() as u64
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Train | Stage::Segment => &[Stage::Synth],
            Stage::Cluster => &[Stage::Synth, Stage::Train, Stage::Segment],
            Stage::Cav => &[Stage::Synth, Stage::Train, Stage::Cluster],
            Stage::Score => &[Stage::Synth, Stage::Train, Stage::Cav],
            Stage::Eval => &[Stage::Synth, Stage::Train, Stage::Segment, Stage::Cluster, Stage::Score],
            Stage::Render => &[Stage::Synth, Stage::Segment, Stage::Score, Stage::Eval],
        }
    }

    /// Config keys read by this stage, besides `seed`.
    pub fn config_keys(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["dataset", "synth_classes", "synth_videos_per_class", "synth_dims", "synth_test_fraction"],
            Stage::Train => &["input_dims", "epochs", "lr", "batch", "momentum", "clip_norm"],
            Stage::Segment => &["segments_small", "segments_middle", "segments_large", "compactness"],
            Stage::Cluster => &["dedupe_tau", "concepts", "kmeans_iters", "kmeans_restarts", "min_size", "min_videos", "layer"],
            Stage::Cav => &["cav_l2", "cav_epochs", "cav_lr", "negatives"],
            Stage::Score => &["score_k"],
            Stage::Eval => &["dedupe_tau", "k_max", "model_id"],
            Stage::Render => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Runs one stage unless its recorded outputs are still current.
pub fn run_stage(stage: Stage, cfg: &Config) -> Result<StageStatus, CliError> {
    let ws = Workspace::new(&cfg.out_dir);
    let keys = stage.config_keys();
    let config_sha = sha256_hex(cfg.canonical_filtered(|k| k == "seed" || keys.contains(&k)).as_bytes());
    let inputs = ws.inputs_for(stage)?;
    if ws.is_up_to_date(stage, &config_sha, &inputs)? {
        info!("{stage}: up to date");
        return Ok(StageStatus::UpToDate);
    }
    let seed = cfg.seed.wrapping_add(stage.index());
    let start = Instant::now();
    ws.reset_stage(stage)?;
    let ctx = StageContext { cfg, ws: &ws, seed };
    match stage {
        Stage::Synth => stages::run_synth(&ctx),
        Stage::Train => stages::run_train(&ctx),
        Stage::Segment => stages::run_segment(&ctx),
        Stage::Cluster => stages::run_cluster(&ctx),
        Stage::Cav => stages::run_cav(&ctx),
        Stage::Score => stages::run_score(&ctx),
        Stage::Eval => stages::run_eval(&ctx),
        Stage::Render => stages::run_render(&ctx),
    }?;
    ws.finish_stage(stage, seed, &config_sha, inputs)?;
    info!("{stage}: done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(StageStatus::Ran)
}

pub fn run_all(cfg: &Config) -> Result<(), CliError> {
    for stage in Stage::ALL {
        run_stage(stage, cfg)?;
    }
    Ok(())
}
