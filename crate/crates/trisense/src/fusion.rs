//! Late fusion of per-modality anomaly scores: a one-class-SVM decision
//! gate fit on normal training score vectors, plus simple rule-based
//! combiners for ablation baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::ModalityId;
use crate::memory_bank::RobustScaler;

/// Default fraction of training vectors allowed outside the learned region.
pub const DEFAULT_NU: f64 = 0.5;
/// KKT tolerance the dual solver is guaranteed to reach.
pub const KKT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("no sample id is covered by every requested modality")]
    NoCommonSamples,
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Normalized per-modality scores for one sample, ordered by the canonical
/// modality order (rgb, infrared, pointcloud) restricted to a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub modalities: Vec<ModalityId>,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(modalities: Vec<ModalityId>, values: Vec<f64>) -> Result<Self, FusionError> {
        if modalities.is_empty() || modalities.len() > 3 {
            return Err(FusionError::Parameter(format!(
                "score vector must cover 1-3 modalities, got {}",
                modalities.len()
            )));
        }
        if modalities.len() != values.len() {
            return Err(FusionError::Mismatch(format!(
                "{} modalities but {} values",
                modalities.len(),
                values.len()
            )));
        }
        if !modalities.windows(2).all(|w| w[0] < w[1]) {
            return Err(FusionError::Parameter(
                "modalities must be unique and in canonical order (rgb, infrared, pointcloud)".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::Parameter("non-finite score entry".into()));
        }
        Ok(Self { modalities, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Linear,
}

impl std::str::FromStr for KernelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelKind::Rbf),
            "linear" => Ok(KernelKind::Linear),
            other => Err(format!("unknown kernel {other:?} (expected rbf or linear)")),
        }
    }
}

/// Knobs for [`fit_gating`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingConfig {
    pub nu: f64,
    /// RBF bandwidth; `None` chooses `1 / (d · var(training entries))`.
    pub gamma: Option<f64>,
    pub kernel: KernelKind,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self { nu: DEFAULT_NU, gamma: None, kernel: KernelKind::Rbf }
    }
}

/// A fitted one-class decision gate. Larger [`gate_score`] values are more
/// anomalous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingModel {
    pub kernel: KernelKind,
    pub gamma: f64,
    pub nu: f64,
    pub rho: f64,
    /// Row-major support vectors (only rows with nonzero dual weight).
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub subset: Vec<ModalityId>,
    pub training_count: usize,
    /// Per-modality normalization that produced the training scores, keyed
    /// by modality tag; recorded for provenance.
    #[serde(default)]
    pub scalers: BTreeMap<String, RobustScaler>,
}

fn kernel_eval(kind: KernelKind, gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        KernelKind::Rbf => {
            let mut d2 = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                d2 += d * d;
            }
            (-gamma * d2).exp()
        }
        KernelKind::Linear => a.iter().zip(b.iter()).map(|(x, y)| x * y).sum(),
    }
}

fn default_gamma(data: &[f64], dim: usize) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 && var.is_finite() {
        1.0 / (dim as f64 * var)
    } else {
        1.0
    }
}

/// Fits the one-class SVM dual
/// `min ½ ΣΣ α_i α_j k(x_i,x_j)` s.t. `0 ≤ α_i ≤ 1/(ν·n)`, `Σα_i = 1`
/// by maximal-violating-pair coordinate steps, converging well past the
/// guaranteed KKT tolerance. The offset ρ comes from margin support vectors
/// (bound midpoint if none exist).
pub fn fit_gating(
    vectors: &[ScoreVector],
    config: &GatingConfig,
) -> Result<GatingModel, FusionError> {
    let n = vectors.len();
    if n < 2 {
        return Err(FusionError::Parameter(format!(
            "gating needs at least 2 training vectors, got {n}"
        )));
    }
    if !(config.nu > 0.0 && config.nu <= 1.0) {
        return Err(FusionError::Parameter(format!("nu {} outside (0, 1]", config.nu)));
    }
    let subset = vectors[0].modalities.clone();
    let d = subset.len();
    for (i, v) in vectors.iter().enumerate() {
        if v.modalities != subset {
            return Err(FusionError::Mismatch(format!(
                "training vector {i} covers a different modality subset"
            )));
        }
    }
    if let Some(g) = config.gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(FusionError::Parameter(format!("gamma {g} must be finite and > 0")));
        }
    }

    let mut data = Vec::with_capacity(n * d);
    for v in vectors {
        data.extend_from_slice(&v.values);
    }
    let gamma = match config.kernel {
        KernelKind::Rbf => config.gamma.unwrap_or_else(|| default_gamma(&data, d)),
        KernelKind::Linear => config.gamma.unwrap_or(0.0),
    };

    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut k = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(config.kernel, gamma, row(i), row(j));
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }

    let c = 1.0 / (config.nu * n as f64);
    let mut alpha = vec![1.0 / n as f64; n];
    // Gradient of the objective: g = K·α.
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += k[i * n + j] * alpha[j];
        }
        grad[i] = s;
    }

    // Solve far tighter than the guaranteed tolerance so that equivalent
    // inputs (e.g. permuted training sets) give matching models.
    let solver_tol = 1e-12;
    let bound_eps = 1e-12 * c;
    let max_steps = 200_000usize;
    for _ in 0..max_steps {
        let mut up: Option<usize> = None; // can increase: alpha < C
        let mut down: Option<usize> = None; // can decrease: alpha > 0
        for i in 0..n {
            if alpha[i] < c - bound_eps && up.map_or(true, |u| grad[i] < grad[u]) {
                up = Some(i);
            }
            if alpha[i] > bound_eps && down.map_or(true, |v| grad[i] > grad[v]) {
                down = Some(i);
            }
        }
        let (Some(i), Some(j)) = (up, down) else { break };
        let violation = grad[j] - grad[i];
        if violation <= solver_tol || i == j {
            break;
        }
        let eta = k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j];
        let mut step = if eta > 1e-300 { violation / eta } else { f64::INFINITY };
        step = step.min(c - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        for t in 0..n {
            grad[t] += step * (k[t * n + i] - k[t * n + j]);
        }
    }

    // Offset from margin support vectors: at optimality their gradient
    // equals rho.
    let margin_eps = 1e-8 * c;
    let mut margin_sum = 0.0;
    let mut margin_count = 0usize;
    let mut upper_max = f64::NEG_INFINITY;
    let mut zero_min = f64::INFINITY;
    for i in 0..n {
        if alpha[i] > margin_eps && alpha[i] < c - margin_eps {
            margin_sum += grad[i];
            margin_count += 1;
        } else if alpha[i] >= c - margin_eps {
            upper_max = upper_max.max(grad[i]);
        } else {
            zero_min = zero_min.min(grad[i]);
        }
    }
    let rho = if margin_count > 0 {
        margin_sum / margin_count as f64
    } else if upper_max.is_finite() && zero_min.is_finite() {
        (upper_max + zero_min) / 2.0
    } else if upper_max.is_finite() {
        upper_max
    } else {
        zero_min
    };

    let mut support_vectors = Vec::new();
    let mut alphas = Vec::new();
    for i in 0..n {
        if alpha[i] > 0.0 {
            support_vectors.push(row(i).to_vec());
            alphas.push(alpha[i]);
        }
    }

    Ok(GatingModel {
        kernel: config.kernel,
        gamma,
        nu: config.nu,
        rho,
        support_vectors,
        alphas,
        subset,
        training_count: n,
        scalers: BTreeMap::new(),
    })
}

/// Final fused score `S = ρ − Σ α_i k(x_i, v)`; larger is more anomalous.
pub fn gate_score(model: &GatingModel, v: &ScoreVector) -> Result<f64, FusionError> {
    if v.modalities != model.subset {
        return Err(FusionError::Mismatch(format!(
            "score vector covers {:?}, model expects {:?}",
            v.modalities, model.subset
        )));
    }
    let mut sum = 0.0;
    for (a, x) in model.alphas.iter().zip(model.support_vectors.iter()) {
        sum += a * kernel_eval(model.kernel, model.gamma, x, &v.values);
    }
    Ok(model.rho - sum)
}

/// Rule-based fusion for ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    Max,
    Mean,
    Single,
}

impl std::str::FromStr for FusionRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(FusionRule::Max),
            "mean" => Ok(FusionRule::Mean),
            "single" => Ok(FusionRule::Single),
            other => Err(format!("unknown fusion rule {other:?} (expected max, mean, or single)")),
        }
    }
}

pub fn rule_fuse(v: &ScoreVector, rule: FusionRule) -> Result<f64, FusionError> {
    match rule {
        FusionRule::Max => Ok(v.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        FusionRule::Mean => Ok(v.values.iter().sum::<f64>() / v.values.len() as f64),
        FusionRule::Single => {
            if v.values.len() == 1 {
                Ok(v.values[0])
            } else {
                Err(FusionError::Parameter(format!(
                    "`single` fusion needs exactly one modality, got {}",
                    v.values.len()
                )))
            }
        }
    }
}

/// Aligns per-modality score tables (sample id → normalized score) into one
/// [`ScoreVector`] per sample, in sorted id order. Samples missing from any
/// requested modality are dropped with a warning; an empty intersection is
/// an error.
pub fn assemble_score_vectors(
    tables: &BTreeMap<ModalityId, BTreeMap<String, f64>>,
    subset: &[ModalityId],
) -> Result<Vec<(String, ScoreVector)>, FusionError> {
    let canonical: Vec<ModalityId> = ModalityId::ALL
        .iter()
        .copied()
        .filter(|m| subset.contains(m))
        .collect();
    if canonical.is_empty() {
        return Err(FusionError::Parameter("empty modality subset".into()));
    }
    if canonical.len() != subset.len() {
        return Err(FusionError::Parameter("duplicate modality in subset".into()));
    }
    for m in &canonical {
        if !tables.contains_key(m) {
            return Err(FusionError::Parameter(format!("no score table for modality {m}")));
        }
    }

    let mut union: BTreeSet<&String> = BTreeSet::new();
    for m in &canonical {
        union.extend(tables[m].keys());
    }
    let mut out = Vec::new();
    for id in union {
        let values: Vec<f64> = canonical
            .iter()
            .filter_map(|m| tables[m].get(id).copied())
            .collect();
        if values.len() != canonical.len() {
            log::warn!("sample {id} is missing a modality score; dropped from fusion");
            continue;
        }
        out.push((id.clone(), ScoreVector::new(canonical.clone(), values)?));
    }
    if out.is_empty() {
        return Err(FusionError::NoCommonSamples);
    }
    Ok(out)
}

fn validate_model(model: &GatingModel, path: &Path) -> Result<(), FusionError> {
    let err = |msg: String| FusionError::Format { path: path.display().to_string(), msg };
    if !(model.nu > 0.0 && model.nu <= 1.0) {
        return Err(err(format!("nu {} outside (0, 1]", model.nu)));
    }
    if model.support_vectors.is_empty() || model.support_vectors.len() != model.alphas.len() {
        return Err(err("support vector / alpha count mismatch".into()));
    }
    let d = model.subset.len();
    if d == 0 || d > 3 || !model.subset.windows(2).all(|w| w[0] < w[1]) {
        return Err(err("invalid modality subset".into()));
    }
    if model.training_count < 2 {
        return Err(err("training count below 2".into()));
    }
    let c = 1.0 / (model.nu * model.training_count as f64);
    let mut sum = 0.0;
    for &a in &model.alphas {
        if !(a > 0.0 && a <= c + 1e-9) {
            return Err(err(format!("alpha {a} outside (0, {c}]")));
        }
        sum += a;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(err(format!("alphas sum to {sum}, expected 1")));
    }
    for sv in &model.support_vectors {
        if sv.len() != d || sv.iter().any(|v| !v.is_finite()) {
            return Err(err("bad support vector row".into()));
        }
    }
    if !model.rho.is_finite() || !model.gamma.is_finite() {
        return Err(err("non-finite rho or gamma".into()));
    }
    Ok(())
}

/// Writes a gating model as a JSON document.
pub fn save_gating(model: &GatingModel, path: &Path) -> Result<(), FusionError> {
    let json = serde_json::to_string_pretty(model).expect("model serializes");
    fs::write(path, json).map_err(|e| FusionError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_gating(path: &Path) -> Result<GatingModel, FusionError> {
    let text = fs::read_to_string(path).map_err(|e| FusionError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let model: GatingModel = serde_json::from_str(&text).map_err(|e| FusionError::Format {
        path: path.display().to_string(),
        msg: format!("bad gating model JSON: {e}"),
    })?;
    validate_model(&model, path)?;
    Ok(model)
}
