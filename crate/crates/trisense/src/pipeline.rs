//! End-to-end orchestration: dataset → per-modality features → memory banks
//! → scores and localization maps → decision gating → evaluation report.
//!
//! Every stage reads its inputs from files and writes its outputs to files
//! under one output directory, so stages can be run separately, rerun
//! idempotently, and audited. All artifacts are deterministic in the
//! configuration and seed — reruns produce byte-identical banks, scores,
//! models, and reports at any worker count. Only `run_manifest.json`, which
//! records wall-clock timings, differs between runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{mix_seed, ModalityId, SampleRef, Split};
use crate::features::image::{extract_patch_features, DEFAULT_GRID, WORKING_SIZE};
use crate::features::pointcloud::{compute_fpfh, DEFAULT_K_FPFH, DEFAULT_K_NORMALS};
use crate::features::{FeatureError, PatchFeatureMap};
use crate::fusion::{
    assemble_score_vectors, fit_gating, gate_score, load_gating, rule_fuse, save_gating,
    FusionError, FusionRule, GatingConfig, KernelKind, ScoreVector, DEFAULT_NU,
};
use crate::ingest::feature_file::{read_feature_matrix, write_feature_matrix};
use crate::ingest::image::{load_image, load_mask};
use crate::ingest::pointcloud::{load_point_cloud, load_point_labels};
use crate::ingest::{scan_dataset, DatasetIndex, IngestError};
use crate::memory_bank::{
    build_bank, compute_training_scores, load_bank, read_point_scores, read_score_map,
    render_score_map, save_bank, score_sample, write_point_scores, write_score_map, BankConfig,
    BankError, DEFAULT_CORESET_RATIO, DEFAULT_SMOOTH_SIGMA,
};
use crate::metrics::{evaluate, CategoryScores, EvalReport, LabeledScores, MetricsError};
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Invalid configuration or usage; maps to exit code 1 in the CLI.
    #[error("configuration error: {0}")]
    Config(String),
    /// A required upstream artifact is absent.
    #[error("missing artifact: {path} ({hint})")]
    MissingArtifact { path: String, hint: String },
    /// Inconsistent or unusable data encountered mid-run.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }

    /// True for errors that indicate wrong invocation rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

/// How features for a modality are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Computed here from the raw data.
    #[default]
    Handcrafted,
    /// Read from pre-existing feature-matrix files in the output layout,
    /// e.g. exported by an external deep feature extractor.
    Import,
}

/// How per-modality scores are combined into the final object score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// One-class-SVM decision gating fit on normal training score vectors.
    #[default]
    Gate,
    /// Maximum of the normalized per-modality scores.
    Max,
    /// Mean of the normalized per-modality scores.
    Mean,
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gate" => Ok(FusionMode::Gate),
            "max" => Ok(FusionMode::Max),
            "mean" => Ok(FusionMode::Mean),
            other => Err(format!("unknown fusion mode {other:?} (expected gate, max, or mean)")),
        }
    }
}

/// Full description of one pipeline run. Serialized as TOML for the
/// configuration file and embedded as JSON in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root in the on-disk layout `scan_dataset` reads.
    pub dataset: PathBuf,
    /// Output directory; all artifacts land under it.
    pub out: PathBuf,
    /// Modality subset to process, in canonical (RGB, infrared, cloud) order.
    pub modalities: Vec<ModalityId>,
    /// Per-modality feature source keyed by modality tag (`rgb`, `ir`, `pc`);
    /// unlisted modalities default to handcrafted.
    pub feature_mode: BTreeMap<String, FeatureMode>,
    /// Patch grid edge for image features (grid × grid patches).
    pub grid: u32,
    /// Images are resized to this square size before feature extraction.
    pub working_size: u32,
    /// Neighborhood size for cloud normal estimation.
    pub k_normals: usize,
    /// Neighborhood size for cloud descriptor pooling.
    pub k_fpfh: usize,
    /// Memory-bank coreset ratio in (0, 1].
    pub coreset_ratio: f64,
    pub seed: u64,
    pub fusion: FusionMode,
    /// Gating one-class-SVM ν parameter.
    pub nu: f64,
    /// Gating RBF bandwidth; derived from the data when absent.
    pub gamma: Option<f64>,
    pub kernel: KernelKind,
    /// Gaussian smoothing std (pixels) for rendered score maps.
    pub smooth_sigma: f64,
    /// Emit per-sample score maps and compute localization metrics. Turning
    /// this off keeps only object-level scores, which is much faster.
    pub write_maps: bool,
    /// Worker threads for the parallel stages; 0 means all available.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            out: PathBuf::new(),
            modalities: ModalityId::ALL.to_vec(),
            feature_mode: BTreeMap::new(),
            grid: DEFAULT_GRID,
            working_size: WORKING_SIZE,
            k_normals: DEFAULT_K_NORMALS,
            k_fpfh: DEFAULT_K_FPFH,
            coreset_ratio: DEFAULT_CORESET_RATIO,
            seed: 0,
            fusion: FusionMode::Gate,
            nu: DEFAULT_NU,
            gamma: None,
            kernel: KernelKind::Rbf,
            smooth_sigma: DEFAULT_SMOOTH_SIGMA,
            write_maps: true,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |msg: String| Err(PipelineError::Config(msg));
        if self.dataset.as_os_str().is_empty() {
            return err("dataset root is not set".into());
        }
        if self.out.as_os_str().is_empty() {
            return err("output directory is not set".into());
        }
        if self.modalities.is_empty() {
            return err("modality subset is empty".into());
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "modalities must be unique and in canonical order (RGB, infrared, cloud), got {:?}",
                self.modalities
            ));
        }
        for tag in self.feature_mode.keys() {
            if ModalityId::parse_tag(tag).is_none() {
                return err(format!("unknown modality tag {tag:?} in feature_mode"));
            }
        }
        if self.grid == 0 || self.working_size == 0 || self.grid > self.working_size {
            return err(format!(
                "patch grid {} must be positive and no finer than the working size {}",
                self.grid, self.working_size
            ));
        }
        if self.k_normals < 3 || self.k_fpfh < 1 {
            return err("cloud neighborhoods need k_normals >= 3 and k_fpfh >= 1".into());
        }
        if !self.coreset_ratio.is_finite() || self.coreset_ratio <= 0.0 || self.coreset_ratio > 1.0
        {
            return err(format!("coreset ratio must lie in (0, 1], got {}", self.coreset_ratio));
        }
        if !self.nu.is_finite() || self.nu <= 0.0 || self.nu > 1.0 {
            return err(format!("nu must lie in (0, 1], got {}", self.nu));
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() || g <= 0.0 {
                return err(format!("gamma must be positive and finite, got {g}"));
            }
        }
        if !self.smooth_sigma.is_finite() || self.smooth_sigma < 0.0 {
            return err(format!("smooth_sigma must be finite and >= 0, got {}", self.smooth_sigma));
        }
        Ok(())
    }

    pub fn mode_for(&self, m: ModalityId) -> FeatureMode {
        self.feature_mode.get(m.tag()).copied().unwrap_or_default()
    }
}

/// Parses a TOML run configuration.
pub fn load_run_config(path: &Path) -> Result<RunConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Stable hexadecimal digest of the configuration, used to detect stale
/// artifacts in the run manifest.
pub fn config_hash(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", mix_seed(0, &json))
}

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    /// `features/<category>/<tag>/train/<id>.fmx` or
    /// `features/<category>/<tag>/test/<defect>/<id>.fmx`.
    pub fn feature(&self, sample: &SampleRef, m: ModalityId) -> PathBuf {
        let base = self.root.join("features").join(&sample.category).join(m.tag());
        let dir = match sample.split {
            Split::Train => base.join(Split::Train.dir_name()),
            Split::Test => base.join(Split::Test.dir_name()).join(&sample.defect),
        };
        dir.join(format!("{}.fmx", sample.id))
    }

    pub fn bank(&self, category: &str, m: ModalityId) -> PathBuf {
        self.root.join("banks").join(category).join(format!("{}.msbk", m.tag()))
    }

    pub fn score_table(&self, category: &str, m: ModalityId, split: Split) -> PathBuf {
        self.root
            .join("scores")
            .join(category)
            .join(m.tag())
            .join(format!("{}.json", split.dir_name()))
    }

    /// Rendered score map for an image modality.
    pub fn image_map(&self, category: &str, m: ModalityId, defect: &str, id: &str) -> PathBuf {
        self.root
            .join("maps")
            .join(category)
            .join(m.tag())
            .join(defect)
            .join(format!("{id}.pgm"))
    }

    /// Per-point score file for the cloud modality.
    pub fn point_map(&self, category: &str, defect: &str, id: &str) -> PathBuf {
        self.root
            .join("maps")
            .join(category)
            .join(ModalityId::Pointcloud.tag())
            .join(defect)
            .join(format!("{id}.txt"))
    }

    pub fn gate(&self, category: &str) -> PathBuf {
        self.root.join("gates").join(format!("{category}.json"))
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

/// Per-stage record in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Number of items the stage processed (samples, banks, categories).
    pub items: usize,
    pub millis: u64,
}

/// Provenance of one output directory: the exact configuration, a digest to
/// detect mismatched reruns, and per-stage timings. Everything needed to
/// reproduce the artifacts bit for bit (timings aside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// Resolved worker count used by the parallel stages.
    pub workers: usize,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn load_run_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("{}: invalid run manifest: {e}", path.display())))
}

fn record_stage(config: &RunConfig, name: &str, items: usize, start: Instant) -> Result<(), PipelineError> {
    let paths = ArtifactPaths::new(&config.out);
    let hash = config_hash(config);
    let manifest_path = paths.run_manifest();
    let mut manifest = match load_run_manifest(&manifest_path) {
        Ok(m) if m.config_hash == hash => m,
        _ => RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash,
            config: config.clone(),
            workers: resolve_workers(config),
            stages: BTreeMap::new(),
        },
    };
    manifest.stages.insert(
        name.to_string(),
        StageRecord { items, millis: start.elapsed().as_millis() as u64 },
    );
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| PipelineError::Data(format!("run manifest serialization failed: {e}")))?;
    fs::create_dir_all(&config.out).map_err(|e| PipelineError::io(&config.out, e))?;
    fs::write(&manifest_path, json).map_err(|e| PipelineError::io(&manifest_path, e))
}

/// Worker threads the parallel stages will use.
pub fn resolve_workers(config: &RunConfig) -> usize {
    if config.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        config.workers
    }
}

/// Runs `f` inside a dedicated thread pool of the configured width. All
/// parallel reductions in the stages are order-independent, so the result
/// does not depend on the worker count.
fn in_pool<T: Send>(
    config: &RunConfig,
    f: impl FnOnce() -> Result<T, PipelineError> + Send,
) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_workers(config))
        .build()
        .map_err(|e| PipelineError::Data(format!("could not build worker pool: {e}")))?;
    pool.install(f)
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    Ok(())
}

fn scan(config: &RunConfig) -> Result<DatasetIndex, PipelineError> {
    if !config.dataset.is_dir() {
        return Err(PipelineError::MissingArtifact {
            path: config.dataset.display().to_string(),
            hint: "dataset root does not exist; generate or point `dataset` at one".into(),
        });
    }
    Ok(scan_dataset(&config.dataset)?)
}

fn sample_key(sample: &SampleRef) -> String {
    match sample.split {
        Split::Train => sample.id.clone(),
        Split::Test => format!("{}/{}", sample.defect, sample.id),
    }
}

/// Object scores of every sample of one category and modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub category: String,
    pub modality: ModalityId,
    /// Raw max–min object scores keyed by sample key (`<defect>/<id>` for
    /// test samples, the bare id for training ones).
    pub raw: BTreeMap<String, f64>,
    /// The same scores after robust normalization by the bank's scaler.
    pub normalized: BTreeMap<String, f64>,
}

pub fn save_score_table(table: &ScoreTable, path: &Path) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let json = serde_json::to_string_pretty(table)
        .map_err(|e| PipelineError::Data(format!("score table serialization failed: {e}")))?;
    fs::write(path, json).map_err(|e| PipelineError::io(path, e))
}

pub fn load_score_table(path: &Path) -> Result<ScoreTable, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: "score table not found; run the score stage first".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("{}: invalid score table: {e}", path.display())))
}

/// Computes (or, in import mode, verifies) the per-sample feature files for
/// every sample and modality in the subset. Returns the number of feature
/// files processed.
pub fn run_extract(config: &RunConfig) -> Result<usize, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let index = scan(config)?;
    let paths = ArtifactPaths::new(&config.out);

    let mut jobs: Vec<(&SampleRef, ModalityId)> = Vec::new();
    for cat in &index.categories {
        for sample in cat.train.iter().chain(cat.test.iter()) {
            for &m in &config.modalities {
                jobs.push((sample, m));
            }
        }
    }

    in_pool(config, || {
        jobs.par_iter()
            .map(|(sample, m)| extract_one(config, &paths, sample, *m))
            .collect::<Result<Vec<()>, _>>()
    })?;

    record_stage(config, "extract", jobs.len(), start)?;
    Ok(jobs.len())
}

fn extract_one(
    config: &RunConfig,
    paths: &ArtifactPaths,
    sample: &SampleRef,
    m: ModalityId,
) -> Result<(), PipelineError> {
    let out_path = paths.feature(sample, m);
    if config.mode_for(m) == FeatureMode::Import {
        if !out_path.is_file() {
            return Err(PipelineError::MissingArtifact {
                path: out_path.display().to_string(),
                hint: format!(
                    "feature_mode for {} is `import`, but no feature matrix was provided",
                    m.tag()
                ),
            });
        }
        let map = read_feature_matrix(&out_path)?;
        if map.modality != m {
            return Err(PipelineError::Data(format!(
                "{}: imported features are tagged {:?}, expected {:?}",
                out_path.display(),
                map.modality,
                m
            )));
        }
        return Ok(());
    }

    let src = sample.path(m).ok_or_else(|| {
        PipelineError::Data(format!(
            "sample {}/{} has no {} file in the dataset",
            sample.category,
            sample_key(sample),
            m.tag()
        ))
    })?;
    let map = match m {
        ModalityId::Rgb | ModalityId::Infrared => {
            let img = load_image(src)?;
            extract_patch_features(&img, m, config.grid, config.working_size)?
        }
        ModalityId::Pointcloud => {
            let cloud = load_point_cloud(src)?;
            compute_fpfh(&cloud.points, config.k_normals, config.k_fpfh)?
        }
    };
    ensure_parent(&out_path)?;
    write_feature_matrix(&map, &out_path)?;
    Ok(())
}

fn read_features_for(
    paths: &ArtifactPaths,
    sample: &SampleRef,
    m: ModalityId,
) -> Result<PatchFeatureMap, PipelineError> {
    let path = paths.feature(sample, m);
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: "feature matrix not found; run the extract stage first".into(),
        });
    }
    Ok(read_feature_matrix(&path)?)
}

/// Builds one memory bank per category and modality from the training
/// features, and writes the self-excluded training score tables used to fit
/// the scaler and the gating unit. Returns the number of banks built.
pub fn run_build_banks(config: &RunConfig) -> Result<usize, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let index = scan(config)?;
    let paths = ArtifactPaths::new(&config.out);
    let mut banks = 0usize;

    for cat in &index.categories {
        for &m in &config.modalities {
            let maps: Vec<PatchFeatureMap> = cat
                .train
                .iter()
                .map(|s| read_features_for(&paths, s, m))
                .collect::<Result<_, _>>()?;
            let bank_config = BankConfig {
                coreset_ratio: config.coreset_ratio,
                seed: mix_seed(config.seed, &format!("bank/{}/{}", cat.name, m.tag())),
            };
            let bank = in_pool(config, || Ok(build_bank(&maps, &bank_config)?))?;

            let mut table = ScoreTable {
                category: cat.name.clone(),
                modality: m,
                raw: BTreeMap::new(),
                normalized: BTreeMap::new(),
            };
            if maps.len() >= 2 {
                let scores = in_pool(config, || Ok(compute_training_scores(&bank, &maps)?))?;
                for (sample, score) in cat.train.iter().zip(&scores) {
                    table.raw.insert(sample_key(sample), *score);
                    table.normalized.insert(sample_key(sample), bank.scaler.normalize(*score));
                }
            } else {
                log::warn!(
                    "category {}: only one training sample; training scores (and gating) unavailable",
                    cat.name
                );
            }

            let bank_path = paths.bank(&cat.name, m);
            ensure_parent(&bank_path)?;
            save_bank(&bank, &bank_path)?;
            save_score_table(&table, &paths.score_table(&cat.name, m, Split::Train))?;
            banks += 1;
        }
    }

    record_stage(config, "build_banks", banks, start)?;
    Ok(banks)
}

fn load_bank_for(paths: &ArtifactPaths, category: &str, m: ModalityId) -> Result<crate::memory_bank::MemoryBank, PipelineError> {
    let path = paths.bank(category, m);
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            hint: "bank not found; run the build-bank stage first".into(),
        });
    }
    Ok(load_bank(&path)?)
}

/// Scores every test sample against its category/modality bank, writing the
/// object-score tables and the localization artifacts (smoothed score maps
/// for image modalities, per-point score files for clouds). Returns the
/// number of (sample, modality) scorings performed.
pub fn run_score(config: &RunConfig) -> Result<usize, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let index = scan(config)?;
    let paths = ArtifactPaths::new(&config.out);
    let mut scored = 0usize;

    for cat in &index.categories {
        for &m in &config.modalities {
            let bank = load_bank_for(&paths, &cat.name, m)?;
            let rows: Vec<(String, f64, f64)> = in_pool(config, || {
                cat.test
                    .par_iter()
                    .map(|sample| {
                        let features = read_features_for(&paths, sample, m)?;
                        let result = score_sample(&bank, &features)?;
                        if config.write_maps {
                            write_map_artifacts(config, &paths, sample, m, &features, &result.patch_scores)?;
                        }
                        Ok((sample_key(sample), result.object_raw, result.object_normalized))
                    })
                    .collect::<Result<_, PipelineError>>()
            })?;

            let mut table = ScoreTable {
                category: cat.name.clone(),
                modality: m,
                raw: BTreeMap::new(),
                normalized: BTreeMap::new(),
            };
            for (key, raw, normalized) in rows {
                table.raw.insert(key.clone(), raw);
                table.normalized.insert(key, normalized);
            }
            save_score_table(&table, &paths.score_table(&cat.name, m, Split::Test))?;
            scored += cat.test.len();
        }
    }

    record_stage(config, "score", scored, start)?;
    Ok(scored)
}

fn write_map_artifacts(
    config: &RunConfig,
    paths: &ArtifactPaths,
    sample: &SampleRef,
    m: ModalityId,
    features: &PatchFeatureMap,
    patch_scores: &[f64],
) -> Result<(), PipelineError> {
    match m {
        ModalityId::Rgb | ModalityId::Infrared => {
            // Render at the native resolution of the sample's image so the
            // map can be compared pixel-for-pixel with the annotation mask.
            let src = sample.path(m).ok_or_else(|| {
                PipelineError::Data(format!(
                    "sample {}/{} has no {} file in the dataset",
                    sample.category,
                    sample_key(sample),
                    m.tag()
                ))
            })?;
            let img = load_image(src)?;
            let map = render_score_map(
                patch_scores,
                features.grid,
                (img.height, img.width),
                config.smooth_sigma,
            )?;
            let path = paths.image_map(&sample.category, m, &sample.defect, &sample.id);
            ensure_parent(&path)?;
            write_score_map(&path, &map, img.width, img.height)?;
        }
        ModalityId::Pointcloud => {
            let path = paths.point_map(&sample.category, &sample.defect, &sample.id);
            ensure_parent(&path)?;
            write_point_scores(&path, patch_scores)?;
        }
    }
    Ok(())
}

/// Fits one decision gating model per category on the normalized training
/// score vectors of the configured modality subset. Returns the number of
/// models fit.
pub fn run_fit_gates(config: &RunConfig) -> Result<usize, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let index = scan(config)?;
    let paths = ArtifactPaths::new(&config.out);
    let mut fitted = 0usize;

    for cat in &index.categories {
        let mut tables: BTreeMap<ModalityId, BTreeMap<String, f64>> = BTreeMap::new();
        let mut scalers = BTreeMap::new();
        for &m in &config.modalities {
            let table = load_score_table(&paths.score_table(&cat.name, m, Split::Train))?;
            if table.normalized.is_empty() {
                return Err(PipelineError::Data(format!(
                    "category {}: training score table for {} is empty; gating needs >= 2 training samples",
                    cat.name,
                    m.tag()
                )));
            }
            tables.insert(m, table.normalized);
            scalers.insert(m.tag().to_string(), load_bank_for(&paths, &cat.name, m)?.scaler);
        }
        let vectors = assemble_score_vectors(&tables, &config.modalities)?;
        let values: Vec<ScoreVector> = vectors.into_iter().map(|(_, v)| v).collect();
        let gating_config = GatingConfig {
            nu: config.nu,
            gamma: config.gamma,
            kernel: config.kernel,
        };
        let mut model = fit_gating(&values, &gating_config)?;
        model.scalers = scalers;
        let path = paths.gate(&cat.name);
        ensure_parent(&path)?;
        save_gating(&model, &path)?;
        fitted += 1;
    }

    record_stage(config, "fit_gates", fitted, start)?;
    Ok(fitted)
}

/// Evaluates object-level detection (per modality and fused) and pixel/point
/// localization against the dataset's annotations, writing `report.json`,
/// `report.txt`, and `report.csv` under the output directory.
pub fn run_evaluate(config: &RunConfig) -> Result<EvalReport, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let index = scan(config)?;
    let paths = ArtifactPaths::new(&config.out);
    let mut inputs: Vec<CategoryScores> = Vec::new();

    for cat in &index.categories {
        if cat.test.is_empty() {
            return Err(PipelineError::Data(format!(
                "category {}: no test samples to evaluate",
                cat.name
            )));
        }
        let labels: Vec<bool> = cat.test.iter().map(|s| !s.is_normal()).collect();
        let mut object: BTreeMap<String, Vec<(f64, bool)>> = BTreeMap::new();

        // Per-modality object scores.
        let mut normalized: BTreeMap<ModalityId, Vec<f64>> = BTreeMap::new();
        for &m in &config.modalities {
            let table = load_score_table(&paths.score_table(&cat.name, m, Split::Test))?;
            let mut scores = Vec::with_capacity(cat.test.len());
            for sample in &cat.test {
                let key = sample_key(sample);
                let score = table.normalized.get(&key).ok_or_else(|| {
                    PipelineError::Data(format!(
                        "category {}: score table for {} lacks sample {key}",
                        cat.name,
                        m.tag()
                    ))
                })?;
                scores.push(*score);
            }
            object.insert(m.tag().to_string(), scores.iter().copied().zip(labels.iter().copied()).collect());
            normalized.insert(m, scores);
        }

        // Fused object scores.
        let fused = fused_scores(config, &paths, &cat.name, &normalized, cat.test.len())?;
        object.insert("fused".to_string(), fused.into_iter().zip(labels.iter().copied()).collect());

        // Pixel / point localization.
        let mut localization = BTreeMap::new();
        if config.write_maps {
            for &m in &config.modalities {
                if let Some(scores) = pooled_localization(&paths, cat, m)? {
                    localization.insert(m, scores);
                }
            }
        }

        inputs.push(CategoryScores { category: cat.name.clone(), object, localization });
    }

    let report = evaluate(&inputs)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| PipelineError::Data(format!("report serialization failed: {e}")))?;
    let json_path = paths.report("json");
    ensure_parent(&json_path)?;
    fs::write(&json_path, json).map_err(|e| PipelineError::io(&json_path, e))?;
    fs::write(paths.report("txt"), report.to_text())
        .map_err(|e| PipelineError::io(&paths.report("txt"), e))?;
    fs::write(paths.report("csv"), report.to_csv())
        .map_err(|e| PipelineError::io(&paths.report("csv"), e))?;

    record_stage(config, "evaluate", inputs.len(), start)?;
    Ok(report)
}

fn fused_scores(
    config: &RunConfig,
    paths: &ArtifactPaths,
    category: &str,
    normalized: &BTreeMap<ModalityId, Vec<f64>>,
    n_samples: usize,
) -> Result<Vec<f64>, PipelineError> {
    let gating = match config.fusion {
        FusionMode::Gate => {
            let path = paths.gate(category);
            if !path.is_file() {
                return Err(PipelineError::MissingArtifact {
                    path: path.display().to_string(),
                    hint: "gating model not found; run the fit-gate stage first".into(),
                });
            }
            Some(load_gating(&path)?)
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let values: Vec<f64> = config.modalities.iter().map(|m| normalized[m][i]).collect();
        let vector = ScoreVector::new(config.modalities.clone(), values)?;
        let fused = match (&gating, config.fusion) {
            (Some(model), _) => gate_score(model, &vector)?,
            (None, FusionMode::Max) => rule_fuse(&vector, FusionRule::Max)?,
            (None, FusionMode::Mean) => rule_fuse(&vector, FusionRule::Mean)?,
            (None, FusionMode::Gate) => unreachable!("gating model is loaded above"),
        };
        out.push(fused);
    }
    Ok(out)
}

/// Pools pixel (or point) scores and ground-truth labels over all test
/// samples of one category and modality. Returns `None` when the pooled
/// labels are single-class (e.g. no defect is visible in this modality), in
/// which case localization metrics are undefined and the modality is
/// skipped.
fn pooled_localization(
    paths: &ArtifactPaths,
    cat: &crate::ingest::CategoryIndex,
    m: ModalityId,
) -> Result<Option<LabeledScores>, PipelineError> {
    let mut scores: Vec<f64> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();

    for sample in &cat.test {
        match m {
            ModalityId::Rgb | ModalityId::Infrared => {
                let map_path = paths.image_map(&cat.name, m, &sample.defect, &sample.id);
                if !map_path.is_file() {
                    return Err(PipelineError::MissingArtifact {
                        path: map_path.display().to_string(),
                        hint: "score map not found; run the score stage first".into(),
                    });
                }
                let (map, w, h) = read_score_map(&map_path)?;
                scores.extend(map.iter().map(|&v| v as f64));
                match sample.annotation(m) {
                    Some(mask_path) => {
                        let mask = load_mask(mask_path, Some((w, h)))?;
                        labels.extend(mask.pixels.iter().map(|&p| p != 0));
                    }
                    None => labels.extend(std::iter::repeat(false).take(map.len())),
                }
            }
            ModalityId::Pointcloud => {
                let map_path = paths.point_map(&cat.name, &sample.defect, &sample.id);
                if !map_path.is_file() {
                    return Err(PipelineError::MissingArtifact {
                        path: map_path.display().to_string(),
                        hint: "point score file not found; run the score stage first".into(),
                    });
                }
                let point_scores = read_point_scores(&map_path)?;
                match sample.annotation(m) {
                    Some(label_path) => {
                        let flags = load_point_labels(label_path, point_scores.len())?;
                        labels.extend(flags.iter().map(|&f| f != 0));
                    }
                    None => labels.extend(std::iter::repeat(false).take(point_scores.len())),
                }
                scores.extend(point_scores);
            }
        }
    }

    let any_pos = labels.iter().any(|&l| l);
    let any_neg = labels.iter().any(|&l| !l);
    if !any_pos || !any_neg {
        log::warn!(
            "category {}: localization for {} skipped (pooled labels are single-class)",
            cat.name,
            m.tag()
        );
        return Ok(None);
    }
    Ok(Some(LabeledScores::new(scores, labels)?))
}

/// Runs the full chain: extract → build banks → score → fit gates (when the
/// fusion mode needs them) → evaluate.
pub fn run_all(config: &RunConfig) -> Result<EvalReport, PipelineError> {
    run_extract(config)?;
    run_build_banks(config)?;
    run_score(config)?;
    if config.fusion == FusionMode::Gate {
        run_fit_gates(config)?;
    }
    run_evaluate(config)
}
