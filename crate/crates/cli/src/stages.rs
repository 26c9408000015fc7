//! Stage implementations. Each stage reads the artifacts of its
//! prerequisites from the workspace and writes its own into its directory.

use std::collections::BTreeMap;
use std::fs;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use stace_core::cav::{sample_negatives, train_cav, Cav, CavParams};
use stace_core::concepts::{build_concepts, featurize, kmeans_restarts, segment_to_input, Concept};
use stace_core::convnet::{to_model_input, train_model, BuiltinNet, ModelBackend, NetConfig, TrainParams};
use stace_core::dataset::{synth_dataset, LabeledDataset, Split, SynthParams};
use stace_core::evalharness::{
    baseline_accuracy, curves_to_csv, eval_curves, eval_remove, index_video_concepts, ClampWarning, EvalSet,
    Selection, VideoConceptIndex,
};
use stace_core::scoring::{tcav_scores, ImportanceReport};
use stace_core::supervoxel::{
    dedupe_segments, extract_segments, multilevel_segment, LabelVolume, Level, Segment, SegmentRef,
    SegmentationLevels,
};
use stace_core::tensor::VideoTensor;

use crate::config::{Config, DatasetSource, Negatives};
use crate::error::CliError;
use crate::render::render_overlay;
use crate::workspace::{read_json, write_json, Workspace};
use crate::Stage;

pub const DATASET_MANIFEST: &str = "data/manifest.txt";
pub const MODEL_FILE: &str = "model/model.stn1";
pub const CONCEPTS_FILE: &str = "concepts/concepts.json";
pub const POOL_FILE: &str = "concepts/pool.json";
pub const CAVS_FILE: &str = "cavs/cavs.json";
pub const CURVES_FILE: &str = "eval/curves.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval/summary.json";
pub const INDEX_FILE: &str = "eval/index.json";

pub fn report_file(class: usize) -> String {
    format!("reports/class_{class:02}.json")
}

pub fn labels_file(video_id: &str, level: Level) -> String {
    format!("segments/{video_id}.{level}.stl1")
}

/// Mixes a stage seed with per-item coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for p in parts {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(*p);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub video_id: String,
    pub video: usize,
    pub level: Level,
    pub label: u32,
}

impl MemberRecord {
    pub fn segment_ref(&self) -> SegmentRef {
        SegmentRef { video: self.video, level: self.level, label: self.label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub class: usize,
    pub id: usize,
    pub n_videos: usize,
    pub members: Vec<MemberRecord>,
    pub centroid: Vec<f32>,
}

impl ConceptRecord {
    pub fn to_concept(&self) -> Concept {
        Concept {
            class: self.class,
            id: self.id,
            members: self.members.iter().map(MemberRecord::segment_ref).collect(),
            centroid: self.centroid.clone(),
            n_videos: self.n_videos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptInventory {
    pub layer: String,
    pub n_classes: usize,
    pub concepts: Vec<ConceptRecord>,
}

impl ConceptInventory {
    pub fn of_class(&self, class: usize) -> Vec<Concept> {
        self.concepts.iter().filter(|c| c.class == class).map(ConceptRecord::to_concept).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub class: usize,
    pub segment: MemberRecord,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePool {
    pub layer: String,
    pub rows: Vec<PoolRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCav {
    pub class: usize,
    pub concept: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavStore {
    pub layer: String,
    pub negatives: String,
    pub cavs: Vec<Cav>,
    pub skipped: Vec<SkippedCav>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub level: Level,
    pub label: u32,
    pub concept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub video_id: String,
    pub video: usize,
    pub class: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub baseline: f64,
    pub remove_k0: f64,
    pub warnings: Vec<ClampWarning>,
}

pub struct StageContext<'a> {
    pub cfg: &'a Config,
    pub ws: &'a Workspace,
    pub seed: u64,
}

pub fn load_dataset(ws: &Workspace) -> Result<LabeledDataset, CliError> {
    Ok(LabeledDataset::read_manifest(&ws.path(DATASET_MANIFEST))?)
}

pub fn load_model(ws: &Workspace) -> Result<BuiltinNet, CliError> {
    Ok(BuiltinNet::load(ws.path(MODEL_FILE))?)
}

pub fn load_levels(ws: &Workspace, video_id: &str) -> Result<SegmentationLevels, CliError> {
    let read = |level| LabelVolume::read(ws.path(&labels_file(video_id, level)));
    Ok(SegmentationLevels { small: read(Level::Small)?, middle: read(Level::Middle)?, large: read(Level::Large)? })
}

/// Deduplicated segments of one dataset video.
pub fn load_segments(ws: &Workspace, dataset: &LabeledDataset, idx: usize, tau: f64) -> Result<Vec<Segment>, CliError> {
    let item = &dataset.items[idx];
    let levels = load_levels(ws, &item.id)?;
    let segments = extract_segments(idx, &item.video, &levels)?;
    Ok(dedupe_segments(&segments, tau)?)
}

fn check_model_fits(net: &BuiltinNet, dataset: &LabeledDataset) -> Result<(), CliError> {
    if net.num_classes() != dataset.n_classes || net.input_shape().1 != dataset.channels() {
        return Err(CliError::Precondition(format!(
            "model ({} classes, {} channels) does not match the dataset ({} classes, {} channels); rerun `stace train`",
            net.num_classes(),
            net.input_shape().1,
            dataset.n_classes,
            dataset.channels()
        )));
    }
    Ok(())
}

pub fn run_synth(ctx: &StageContext) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let dataset = match &cfg.dataset {
        DatasetSource::Synth => {
            let mut params =
                SynthParams::new(cfg.synth_classes, cfg.synth_videos_per_class, cfg.synth_dims, ctx.seed);
            params.test_fraction = cfg.synth_test_fraction;
            synth_dataset(&params)?
        }
        DatasetSource::Manifest(path) => LabeledDataset::read_manifest(path)?,
    };
    dataset.write_manifest(&ctx.ws.stage_dir(Stage::Synth))?;
    info!("dataset: {} videos, {} classes", dataset.items.len(), dataset.n_classes);
    Ok(())
}

pub fn run_train(ctx: &StageContext) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let dataset = load_dataset(ctx.ws)?;
    let config = NetConfig::new(dataset.n_classes).with_input(cfg.input_dims, dataset.channels());
    let params = TrainParams {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        seed: ctx.seed,
        momentum: cfg.momentum,
        clip_norm: cfg.clip_norm,
    };
    let (net, log) = train_model(&dataset, config, &params)?;
    net.save(ctx.ws.path(MODEL_FILE))?;
    write_json(&ctx.ws.path("model/training_log.json"), &log.epoch_loss)?;
    info!("training loss {:?} -> {:?}", log.epoch_loss.first(), log.epoch_loss.last());
    Ok(())
}

pub fn run_segment(ctx: &StageContext) -> Result<(), CliError> {
    let dataset = load_dataset(ctx.ws)?;
    for item in &dataset.items {
        let levels = multilevel_segment(&item.video, ctx.cfg.segments, ctx.cfg.compactness, ctx.seed)?;
        for level in Level::ALL {
            levels.get(level).write(ctx.ws.path(&labels_file(&item.id, level)))?;
        }
    }
    info!("segmented {} videos", dataset.items.len());
    Ok(())
}

pub fn run_cluster(ctx: &StageContext) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let dataset = load_dataset(ctx.ws)?;
    let net = load_model(ctx.ws)?;
    check_model_fits(&net, &dataset)?;
    let mean = dataset.train_mean();
    let (input_dims, _) = net.input_shape();
    let mut rows = Vec::new();
    for (idx, item) in dataset.split(Split::Train) {
        let segments = load_segments(ctx.ws, &dataset, idx, cfg.dedupe_tau)?;
        let inputs = segments
            .iter()
            .map(|s| segment_to_input(&item.video, s, &mean, input_dims))
            .collect::<Result<Vec<_>, _>>()?;
        let features = featurize(&net, &inputs, &cfg.layer)?;
        for (s, feature) in segments.iter().zip(features) {
            let segment = MemberRecord { video_id: item.id.clone(), video: idx, level: s.level, label: s.label };
            rows.push(PoolRow { class: item.label, segment, feature });
        }
    }
    let mut concepts = Vec::new();
    for class in 0..dataset.n_classes {
        let members: Vec<&PoolRow> = rows.iter().filter(|r| r.class == class).collect();
        if members.is_empty() {
            warn!("class {class} has no training segments");
            continue;
        }
        let features: Vec<Vec<f32>> = members.iter().map(|r| r.feature.clone()).collect();
        let k = cfg.concepts.min(features.len());
        let seed = derive_seed(ctx.seed, &[class as u64]);
        let km = kmeans_restarts(&features, k, cfg.kmeans_iters, seed, cfg.kmeans_restarts)?;
        let refs: Vec<SegmentRef> = members.iter().map(|r| r.segment.segment_ref()).collect();
        let built = build_concepts(class, &refs, &km.assignments, &km.centroids, cfg.min_size, cfg.min_videos)?;
        info!("class {class}: {} segments, {} concepts", members.len(), built.len());
        for c in built {
            let members = c
                .members
                .iter()
                .map(|m| MemberRecord {
                    video_id: dataset.items[m.video].id.clone(),
                    video: m.video,
                    level: m.level,
                    label: m.label,
                })
                .collect();
            concepts.push(ConceptRecord { class, id: c.id, n_videos: c.n_videos, members, centroid: c.centroid });
        }
    }
    let inventory = ConceptInventory { layer: cfg.layer.clone(), n_classes: dataset.n_classes, concepts };
    write_json(&ctx.ws.path(CONCEPTS_FILE), &inventory)?;
    write_json(&ctx.ws.path(POOL_FILE), &FeaturePool { layer: cfg.layer.clone(), rows })?;
    Ok(())
}

pub fn run_cav(ctx: &StageContext) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let inventory: ConceptInventory = read_json(&ctx.ws.path(CONCEPTS_FILE))?;
    let pool: FeaturePool = read_json(&ctx.ws.path(POOL_FILE))?;
    let features: BTreeMap<SegmentRef, &PoolRow> = pool.rows.iter().map(|r| (r.segment.segment_ref(), r)).collect();
    let n_classes = inventory.n_classes;
    let negatives_by_class: Vec<Vec<Vec<f32>>> = match cfg.negatives {
        Negatives::Segments => (0..n_classes)
            .map(|c| pool.rows.iter().filter(|r| r.class == c).map(|r| r.feature.clone()).collect())
            .collect(),
        Negatives::Whole => {
            let dataset = load_dataset(ctx.ws)?;
            let net = load_model(ctx.ws)?;
            check_model_fits(&net, &dataset)?;
            let (dims, _) = net.input_shape();
            let mut by_class = vec![Vec::new(); n_classes];
            for (_, item) in dataset.split(Split::Train) {
                let input = to_model_input(&item.video, dims)?;
                by_class[item.label].push(net.activations(&input, &cfg.layer)?);
            }
            by_class
        }
    };
    let mut cavs = Vec::new();
    let mut skipped = Vec::new();
    for concept in &inventory.concepts {
        let positives = concept
            .members
            .iter()
            .map(|m| {
                features.get(&m.segment_ref()).map(|r| r.feature.clone()).ok_or_else(|| {
                    CliError::Precondition(format!("concept member {m:?} missing from the feature pool; rerun `stace cluster`"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let seed = derive_seed(ctx.seed, &[concept.class as u64, concept.id as u64]);
        let fit = sample_negatives(&negatives_by_class, concept.class, positives.len(), seed).and_then(|neg| {
            let params = CavParams { l2: cfg.cav_l2, epochs: cfg.cav_epochs, lr: cfg.cav_lr, seed };
            train_cav(&positives, &neg, &params)
        });
        match fit {
            Ok(fit) => cavs.push(Cav::from_fit(concept.class, concept.id, &inventory.layer, fit)),
            Err(e) => {
                warn!("class {} concept {}: no CAV ({e})", concept.class, concept.id);
                skipped.push(SkippedCav { class: concept.class, concept: concept.id, reason: e.to_string() });
            }
        }
    }
    info!("trained {} CAVs, skipped {}", cavs.len(), skipped.len());
    let store = CavStore { layer: inventory.layer, negatives: cfg.negatives.to_string(), cavs, skipped };
    write_json(&ctx.ws.path(CAVS_FILE), &store)
}

/// Test videos of `class` resized to the model input, truncated to `k` when
/// `k > 0`.
pub fn scoring_videos(dataset: &LabeledDataset, net: &BuiltinNet, class: usize, k: usize) -> Result<Vec<VideoTensor>, CliError> {
    let (dims, _) = net.input_shape();
    let mut videos = dataset
        .split(Split::Test)
        .filter(|(_, it)| it.label == class)
        .map(|(_, it)| to_model_input(&it.video, dims))
        .collect::<Result<Vec<_>, _>>()?;
    if k > 0 {
        videos.truncate(k);
    }
    Ok(videos)
}

pub fn run_score(ctx: &StageContext) -> Result<(), CliError> {
    let dataset = load_dataset(ctx.ws)?;
    let net = load_model(ctx.ws)?;
    check_model_fits(&net, &dataset)?;
    let store: CavStore = read_json(&ctx.ws.path(CAVS_FILE))?;
    for class in 0..dataset.n_classes {
        let cavs: Vec<Cav> = store.cavs.iter().filter(|c| c.class == class).cloned().collect();
        if cavs.is_empty() {
            warn!("class {class} has no CAVs; no report written");
            continue;
        }
        let videos = scoring_videos(&dataset, &net, class, ctx.cfg.score_k)?;
        if videos.is_empty() {
            return Err(CliError::Precondition(format!("class {class} has no test videos to score")));
        }
        let report = tcav_scores(&net, &videos, &cavs, class, &store.layer)?;
        info!("class {class}: ranking {:?}", report.ranking);
        write_json(&ctx.ws.path(&report_file(class)), &report)?;
    }
    Ok(())
}

pub fn load_reports(ws: &Workspace, n_classes: usize) -> Result<Vec<ImportanceReport>, CliError> {
    let mut reports = Vec::new();
    for class in 0..n_classes {
        let path = ws.path(&report_file(class));
        if path.exists() {
            reports.push(read_json(&path)?);
        }
    }
    Ok(reports)
}

pub fn run_eval(ctx: &StageContext) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let dataset = load_dataset(ctx.ws)?;
    let net = load_model(ctx.ws)?;
    check_model_fits(&net, &dataset)?;
    let inventory: ConceptInventory = read_json(&ctx.ws.path(CONCEPTS_FILE))?;
    let reports = load_reports(ctx.ws, dataset.n_classes)?;
    let mean = dataset.train_mean();
    let mut indexes = Vec::new();
    let mut records = Vec::new();
    for (idx, item) in dataset.split(Split::Test) {
        let concepts = inventory.of_class(item.label);
        let index = if concepts.is_empty() {
            VideoConceptIndex { video: idx, class: item.label, entries: Vec::new() }
        } else {
            let segments = load_segments(ctx.ws, &dataset, idx, cfg.dedupe_tau)?;
            index_video_concepts(&net, idx, item.label, &item.video, &segments, &concepts, &mean, &inventory.layer)?
        };
        records.push(IndexRecord {
            video_id: item.id.clone(),
            video: idx,
            class: item.label,
            entries: index
                .entries
                .iter()
                .map(|e| IndexEntry { level: e.segment.level, label: e.segment.label, concept: e.concept })
                .collect(),
        });
        indexes.push(index);
    }
    let set = EvalSet::new(&dataset, indexes, &reports)?;
    let baseline = baseline_accuracy(&net, &dataset)?;
    let remove_k0 = eval_remove(&net, &set, Selection::Top, 0, ctx.seed)?.accuracy;
    let (curves, warnings) = eval_curves(&net, &cfg.model_id, &set, baseline, cfg.k_max, ctx.seed)?;
    for w in &warnings {
        warn!("class {}: requested {} concepts, only {} available", w.class, w.requested, w.available);
    }
    let csv = curves_to_csv(&curves);
    let path = ctx.ws.path(CURVES_FILE);
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    write_json(&ctx.ws.path(INDEX_FILE), &records)?;
    let summary = EvalSummary { model: cfg.model_id.clone(), baseline, remove_k0, warnings };
    write_json(&ctx.ws.path(EVAL_SUMMARY_FILE), &summary)?;
    info!("baseline accuracy {baseline:.2}%");
    Ok(())
}

/// Voxels of the entries of `record` mapped to `concept`.
fn concept_voxels(ws: &Workspace, record: &IndexRecord, concept: usize) -> Result<Vec<Vec<u32>>, CliError> {
    let levels = load_levels(ws, &record.video_id)?;
    Ok(record
        .entries
        .iter()
        .filter(|e| e.concept == concept)
        .map(|e| {
            let labels = levels.get(e.level).labels();
            (0..labels.len() as u32).filter(|i| labels[*i as usize] == e.label).collect()
        })
        .collect())
}

/// Overlays of the top- and bottom-ranked concept on the first test video of
/// every scored class.
pub fn run_render(ctx: &StageContext) -> Result<(), CliError> {
    let dataset = load_dataset(ctx.ws)?;
    let reports = load_reports(ctx.ws, dataset.n_classes)?;
    let records: Vec<IndexRecord> = read_json(&ctx.ws.path(INDEX_FILE))?;
    for report in &reports {
        let Some(record) = records.iter().find(|r| r.class == report.class) else { continue };
        let video = &dataset.items[record.video].video;
        let (Some(top), Some(least)) = (report.ranking.first(), report.ranking.last()) else { continue };
        for (name, concept) in [("top", *top), ("least", *least)] {
            let voxels = concept_voxels(ctx.ws, record, concept)?;
            let refs: Vec<&[u32]> = voxels.iter().map(Vec::as_slice).collect();
            let dir = ctx.ws.stage_dir(Stage::Render).join(format!("class_{:02}", report.class)).join(name);
            render_overlay(video, &refs, &dir)?;
        }
    }
    Ok(())
}
