//! Per-modality memory banks: greedy coreset selection over normal training
//! features, exact 1-NN max-min scoring, robust score normalization, and
//! dense localization maps.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::ModalityId;
use crate::features::PatchFeatureMap;
use crate::ingest::feature_file::{modality_code, modality_from_code};

/// Default fraction of candidate patch vectors kept by coreset selection.
pub const DEFAULT_CORESET_RATIO: f64 = 0.1;
/// Default Gaussian smoothing std (pixels) for rendered score maps.
pub const DEFAULT_SMOOTH_SIGMA: f64 = 4.0;
/// Magic bytes of the bank file format.
pub const BANK_MAGIC: &[u8; 4] = b"MSBK";

#[derive(Debug, Error)]
pub enum BankError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> BankError {
    BankError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> BankError {
    BankError::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Robust location/scale statistics of the normal training object scores,
/// used to bring per-modality scores onto a common scale before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustScaler {
    pub median: f64,
    pub iqr: f64,
    /// Set when the IQR is zero (constant training scores); normalization
    /// then only centers.
    pub degenerate: bool,
}

impl RobustScaler {
    /// Placeholder before any training scores exist: centers at zero and
    /// passes raw scores through.
    pub fn unfitted() -> Self {
        Self { median: 0.0, iqr: 0.0, degenerate: true }
    }

    /// Fits median and interquartile range with linearly interpolated
    /// quantiles (the `(n-1)·q` positioning most numeric libraries default
    /// to).
    pub fn fit(scores: &[f64]) -> Self {
        assert!(!scores.is_empty(), "cannot fit a scaler on no scores");
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = quantile_sorted(&sorted, 0.5);
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        Self { median, iqr, degenerate: !(iqr > 0.0) }
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        if self.degenerate {
            raw - self.median
        } else {
            (raw - self.median) / self.iqr
        }
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Knobs for bank construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub coreset_ratio: f64,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self { coreset_ratio: DEFAULT_CORESET_RATIO, seed: 0 }
    }
}

/// An immutable bank of normal patch features for one modality. Scoring
/// reads it concurrently without synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub modality: ModalityId,
    pub dim: usize,
    /// Row-major `M x dim` feature vectors.
    pub vectors: Vec<f32>,
    pub coreset_ratio: f64,
    pub seed: u64,
    /// Number of training samples the candidates came from.
    pub source_samples: u32,
    pub scaler: RobustScaler,
    /// Index of the training sample each vector came from; present only on
    /// freshly built banks (not persisted) and needed for training-score
    /// self-exclusion.
    pub provenance: Option<Vec<u32>>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    #[inline]
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }
}

/// Scores for one test sample against one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    /// Largest per-patch distance: the object-level anomaly score.
    pub object_raw: f64,
    /// Object score after robust normalization.
    pub object_normalized: f64,
    /// Per-patch (or per-point) minimum distance to the bank.
    pub patch_scores: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - *y as f64;
        sum += d * d;
    }
    sum
}

/// `sq_dist` that gives up once the partial sum exceeds `bound`. Terms are
/// nonnegative and accumulate in the same order as `sq_dist`, so a candidate
/// that survives to the end returns the identical sum, and one that aborts
/// could never have beaten `bound` anyway.
#[inline]
fn sq_dist_within(a: &[f32], b: &[f32], bound: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut sum = 0.0f64;
    let mut i = 0;
    while i < n {
        let end = (i + 16).min(n);
        while i < end {
            let d = a[i] as f64 - b[i] as f64;
            sum += d * d;
            i += 1;
        }
        if sum > bound {
            return f64::INFINITY;
        }
    }
    sum
}

/// Greedy k-center selection: starting from a seed-determined first pick,
/// repeatedly takes the candidate farthest from the selected set (ties to
/// the lower index) until `ceil(ratio·n)` rows are kept. Returns indices
/// into the row-major `n x dim` candidate matrix, in pick order.
pub fn coreset_select(
    data: &[f32],
    dim: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<usize>, BankError> {
    if dim == 0 {
        return Err(BankError::Parameter("feature dimension is zero".into()));
    }
    if data.is_empty() || data.len() % dim != 0 {
        return Err(BankError::Parameter(format!(
            "candidate matrix length {} is not a nonzero multiple of dimension {dim}",
            data.len()
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(BankError::Parameter(format!("coreset ratio {ratio} outside (0, 1]")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(BankError::Parameter("non-finite candidate feature".into()));
    }
    let n = data.len() / dim;
    let target = ((ratio * n as f64).ceil() as usize).clamp(1, n);

    let first = (seed % n as u64) as usize;
    let mut selected = Vec::with_capacity(target);
    let mut chosen = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    selected.push(first);
    chosen[first] = true;
    let mut current = first;

    while selected.len() < target {
        let cur = &data[current * dim..(current + 1) * dim];
        let chosen_ref = &chosen;
        min_d2
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, md)| {
                if !chosen_ref[i] {
                    let d = sq_dist_within(&data[i * dim..(i + 1) * dim], cur, *md);
                    if d < *md {
                        *md = d;
                    }
                }
            });
        let mut pick = usize::MAX;
        let mut best = -1.0f64;
        for i in 0..n {
            if !chosen[i] && min_d2[i] > best {
                best = min_d2[i];
                pick = i;
            }
        }
        selected.push(pick);
        chosen[pick] = true;
        current = pick;
    }
    Ok(selected)
}

/// Builds a bank from the training feature maps of one modality:
/// concatenates all patch vectors, keeps a coreset, and fits the robust
/// scaler on self-excluded training object scores. With a single training
/// sample the scaler stays unfitted (pass-through) because self-exclusion
/// would leave nothing to score against.
pub fn build_bank(
    samples: &[PatchFeatureMap],
    config: &BankConfig,
) -> Result<MemoryBank, BankError> {
    let first = samples
        .first()
        .ok_or_else(|| BankError::Parameter("no training samples".into()))?;
    let dim = first.dim;
    let modality = first.modality;
    for (i, s) in samples.iter().enumerate() {
        if s.dim != dim {
            return Err(BankError::Mismatch(format!(
                "training sample {i} has dimension {}, expected {dim}",
                s.dim
            )));
        }
        if s.modality != modality {
            return Err(BankError::Mismatch(format!(
                "training sample {i} is {}, expected {modality}",
                s.modality
            )));
        }
    }

    let total: usize = samples.iter().map(|s| s.count()).sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut candidate_source = Vec::with_capacity(total);
    for (i, s) in samples.iter().enumerate() {
        data.extend_from_slice(&s.values);
        candidate_source.extend(std::iter::repeat(i as u32).take(s.count()));
    }

    let picks = coreset_select(&data, dim, config.coreset_ratio, config.seed)?;
    let mut vectors = Vec::with_capacity(picks.len() * dim);
    let mut provenance = Vec::with_capacity(picks.len());
    for &i in &picks {
        vectors.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        provenance.push(candidate_source[i]);
    }

    let mut bank = MemoryBank {
        modality,
        dim,
        vectors,
        coreset_ratio: config.coreset_ratio,
        seed: config.seed,
        source_samples: samples.len() as u32,
        scaler: RobustScaler::unfitted(),
        provenance: Some(provenance),
    };
    if samples.len() >= 2 {
        let scores = compute_training_scores(&bank, samples)?;
        bank.scaler = RobustScaler::fit(&scores);
    }
    Ok(bank)
}

/// Object score of `sample` against the bank vectors whose index is in
/// `allowed`.
fn object_score_over(bank: &MemoryBank, allowed: &[usize], sample: &PatchFeatureMap) -> f64 {
    let scores: Vec<f64> = (0..sample.count())
        .into_par_iter()
        .map(|p| {
            let row = sample.row(p);
            let mut best = f64::INFINITY;
            for &j in allowed {
                let d = sq_dist_within(row, bank.vector(j), best);
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect();
    scores.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-training-sample object scores with self-exclusion: each sample is
/// scored only against bank vectors contributed by *other* samples, so
/// normal scores are not trivially zero. Needs the provenance tags a fresh
/// build carries and at least two training samples.
pub fn compute_training_scores(
    bank: &MemoryBank,
    samples: &[PatchFeatureMap],
) -> Result<Vec<f64>, BankError> {
    if samples.len() < 2 {
        return Err(BankError::Parameter(
            "self-excluded training scores need at least 2 training samples".into(),
        ));
    }
    let provenance = bank.provenance.as_ref().ok_or_else(|| {
        BankError::Parameter("bank carries no provenance tags (was it loaded from a file?)".into())
    })?;
    let mut out = Vec::with_capacity(samples.len());
    for (si, sample) in samples.iter().enumerate() {
        if sample.dim != bank.dim {
            return Err(BankError::Mismatch(format!(
                "training sample {si} has dimension {}, bank has {}",
                sample.dim, bank.dim
            )));
        }
        let allowed: Vec<usize> = (0..bank.len())
            .filter(|&j| provenance[j] != si as u32)
            .collect();
        if allowed.is_empty() {
            return Err(BankError::Parameter(format!(
                "self-exclusion leaves no bank vectors for training sample {si}"
            )));
        }
        out.push(object_score_over(bank, &allowed, sample));
    }
    Ok(out)
}

/// Scores one sample: per-patch minimum Euclidean distance to the bank,
/// object score as the maximum of those, and its normalized form. The patch
/// loop runs in parallel; min/max reductions make the result independent of
/// scheduling.
pub fn score_sample(bank: &MemoryBank, features: &PatchFeatureMap) -> Result<ScoreResult, BankError> {
    if bank.is_empty() {
        return Err(BankError::EmptyBank);
    }
    if features.dim != bank.dim {
        return Err(BankError::Mismatch(format!(
            "features have dimension {}, bank has {}",
            features.dim, bank.dim
        )));
    }
    if features.modality != bank.modality {
        return Err(BankError::Mismatch(format!(
            "features are {}, bank is {}",
            features.modality, bank.modality
        )));
    }
    let patch_scores: Vec<f64> = (0..features.count())
        .into_par_iter()
        .map(|p| {
            let row = features.row(p);
            let mut best = f64::INFINITY;
            for v in bank.iter_vectors() {
                let d = sq_dist_within(row, v, best);
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect();
    let object_raw = patch_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoreResult {
        object_raw,
        object_normalized: bank.scaler.normalize(object_raw),
        patch_scores,
    })
}

/// Exact nearest bank vector to `vector`: (index, Euclidean distance), ties
/// resolved to the lower index.
pub fn nearest_neighbor(bank: &MemoryBank, vector: &[f32]) -> Result<(usize, f64), BankError> {
    if bank.is_empty() {
        return Err(BankError::EmptyBank);
    }
    if vector.len() != bank.dim {
        return Err(BankError::Mismatch(format!(
            "query has dimension {}, bank has {}",
            vector.len(),
            bank.dim
        )));
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, v) in bank.iter_vectors().enumerate() {
        let d = sq_dist(vector, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// Renders a dense score image from a patch-score grid: bilinear upsampling
/// to `(height, width)` followed by Gaussian smoothing with std `sigma`
/// pixels (`sigma = 0` skips smoothing). The kernel is renormalized over the
/// in-bounds support at the borders. Point-cloud scores have no grid and are
/// reported per point instead; calling this without a grid is an error.
pub fn render_score_map(
    patch_scores: &[f64],
    grid: Option<(u32, u32)>,
    output: (u32, u32),
    sigma: f64,
) -> Result<Vec<f32>, BankError> {
    let (rows, cols) = grid.ok_or_else(|| {
        BankError::Parameter("score map rendering needs a patch grid (image modalities only)".into())
    })?;
    let (height, width) = output;
    if rows == 0 || cols == 0 || height == 0 || width == 0 {
        return Err(BankError::Parameter("zero-sized grid or output".into()));
    }
    if rows as usize * cols as usize != patch_scores.len() {
        return Err(BankError::Mismatch(format!(
            "grid {rows}x{cols} implies {} scores, got {}",
            rows as usize * cols as usize,
            patch_scores.len()
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(BankError::Parameter(format!("sigma {sigma} must be finite and >= 0")));
    }

    let (r, c) = (rows as usize, cols as usize);
    let (h, w) = (height as usize, width as usize);
    let at = |y: usize, x: usize| patch_scores[y * c + x];

    // Bilinear upsample with half-pixel-aligned centers.
    let mut up = vec![0.0f64; h * w];
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * r as f64 / h as f64) - 0.5).clamp(0.0, (r - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(r - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * c as f64 / w as f64) - 0.5).clamp(0.0, (c - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(c - 1);
            let fx = sx - x0 as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            up[y * w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }

    if sigma > 0.0 {
        let radius = (3.0 * sigma).ceil() as isize;
        let weights: Vec<f64> = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let pass = |src: &[f64], len_outer: usize, len_inner: usize, stride_outer: usize, stride_inner: usize| {
            let mut dst = vec![0.0f64; src.len()];
            for o in 0..len_outer {
                for i in 0..len_inner {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for (wi, k) in (-radius..=radius).enumerate() {
                        let j = i as isize + k;
                        if j >= 0 && (j as usize) < len_inner {
                            acc += weights[wi] * src[o * stride_outer + j as usize * stride_inner];
                            norm += weights[wi];
                        }
                    }
                    dst[o * stride_outer + i * stride_inner] = acc / norm;
                }
            }
            dst
        };
        let horizontal = pass(&up, h, w, w, 1);
        up = pass(&horizontal, w, h, 1, w);
    }

    Ok(up.into_iter().map(|v| v as f32).collect())
}

const BANK_HEADER_LEN: usize = 4 + 1 + 8 + 4 + 8 + 8 + 4 + 8 + 8 + 1;

/// Writes a bank: header (magic `MSBK`, modality, vector count, dimension,
/// coreset ratio, seed, source sample count, scaler) followed by row-major
/// little-endian f32 vectors. Provenance tags are build-time only and not
/// persisted.
pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<(), BankError> {
    if bank.is_empty() {
        return Err(BankError::EmptyBank);
    }
    let mut buf = Vec::with_capacity(BANK_HEADER_LEN + bank.vectors.len() * 4);
    buf.extend_from_slice(BANK_MAGIC);
    buf.push(modality_code(bank.modality));
    buf.extend_from_slice(&(bank.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    buf.extend_from_slice(&bank.coreset_ratio.to_le_bytes());
    buf.extend_from_slice(&bank.seed.to_le_bytes());
    buf.extend_from_slice(&bank.source_samples.to_le_bytes());
    buf.extend_from_slice(&bank.scaler.median.to_le_bytes());
    buf.extend_from_slice(&bank.scaler.iqr.to_le_bytes());
    buf.push(bank.scaler.degenerate as u8);
    for v in &bank.vectors {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn load_bank(path: &Path) -> Result<MemoryBank, BankError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < BANK_HEADER_LEN {
        return Err(format_err(path, "file shorter than the bank header"));
    }
    if &bytes[0..4] != BANK_MAGIC {
        return Err(format_err(path, "not a MSBK bank file"));
    }
    let modality = modality_from_code(bytes[4])
        .ok_or_else(|| format_err(path, format!("unknown modality code {}", bytes[4])))?;
    let count = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let ratio = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[25..33].try_into().unwrap());
    let source_samples = u32::from_le_bytes(bytes[33..37].try_into().unwrap());
    let median = f64::from_le_bytes(bytes[37..45].try_into().unwrap());
    let iqr = f64::from_le_bytes(bytes[45..53].try_into().unwrap());
    let degenerate = match bytes[53] {
        0 => false,
        1 => true,
        other => return Err(format_err(path, format!("bad degenerate flag {other}"))),
    };

    if count == 0 || dim == 0 {
        return Err(format_err(path, "empty bank"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(format_err(path, format!("coreset ratio {ratio} outside (0, 1]")));
    }
    if !median.is_finite() || !iqr.is_finite() || iqr < 0.0 {
        return Err(format_err(path, "invalid scaler statistics"));
    }
    if iqr == 0.0 && !degenerate {
        return Err(format_err(path, "zero IQR without the degenerate flag"));
    }
    let expected = BANK_HEADER_LEN + count * dim * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes for {count}x{dim} vectors, found {}", bytes.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(count * dim);
    for chunk in bytes[BANK_HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(path, "non-finite bank vector entry"));
        }
        vectors.push(v);
    }
    Ok(MemoryBank {
        modality,
        dim,
        vectors,
        coreset_ratio: ratio,
        seed,
        source_samples,
        scaler: RobustScaler { median, iqr, degenerate },
        provenance: None,
    })
}

/// Scale metadata stored next to a 16-bit score map so the quantized pixels
/// can be mapped back to raw scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMapScale {
    pub min: f64,
    pub max: f64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Writes a score map as a 16-bit binary PGM (big-endian samples, per the
/// format) plus a `<name>.json` sidecar holding the min/max used for
/// quantization.
pub fn write_score_map(path: &Path, map: &[f32], width: u32, height: u32) -> Result<(), BankError> {
    if width as usize * height as usize != map.len() {
        return Err(BankError::Mismatch(format!(
            "{width}x{height} implies {} pixels, got {}",
            width as usize * height as usize,
            map.len()
        )));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(BankError::Parameter("non-finite score map value".into()));
    }
    let min = map.iter().copied().fold(f64::INFINITY, |a, b| a.min(b as f64));
    let max = map.iter().copied().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
    let span = max - min;
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in map {
        let q = if span > 0.0 {
            (((v as f64 - min) / span) * 65535.0).round() as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))?;
    let scale = ScoreMapScale { min, max };
    let json = serde_json::to_string_pretty(&scale).expect("scale serializes");
    fs::write(sidecar_path(path), json).map_err(|e| io_err(&sidecar_path(path), e))
}

/// Reads a score map written by [`write_score_map`], reconstructing
/// approximate raw scores from the sidecar scale. Returns (map, width,
/// height).
pub fn read_score_map(path: &Path) -> Result<(Vec<f32>, u32, u32), BankError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            format_err(path, "non-UTF-8 PGM header")
        })?.to_string());
    }
    pos += 1; // single whitespace after maxval
    if tokens[0] != "P5" {
        return Err(format_err(path, "not a binary PGM file"));
    }
    let width: u32 = tokens[1].parse().map_err(|_| format_err(path, "bad width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| format_err(path, "bad height"))?;
    if tokens[3] != "65535" {
        return Err(format_err(path, format!("expected maxval 65535, found {}", tokens[3])));
    }
    let n = width as usize * height as usize;
    if bytes.len() != pos + 2 * n {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, found {}", 2 * n, bytes.len().saturating_sub(pos)),
        ));
    }
    let sidecar = sidecar_path(path);
    let scale_json = fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?;
    let scale: ScoreMapScale = serde_json::from_str(&scale_json)
        .map_err(|e| format_err(&sidecar, format!("bad scale sidecar: {e}")))?;
    let span = scale.max - scale.min;
    let map = bytes[pos..]
        .chunks_exact(2)
        .map(|c| {
            let q = u16::from_be_bytes(c.try_into().unwrap()) as f64;
            (scale.min + q / 65535.0 * span) as f32
        })
        .collect();
    Ok((map, width, height))
}

/// Writes per-point scores as `index score` text lines, one per point.
pub fn write_point_scores(path: &Path, scores: &[f64]) -> Result<(), BankError> {
    let mut out = String::new();
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(BankError::Parameter(format!("non-finite score at point {i}")));
        }
        out.push_str(&format!("{i} {s}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_point_scores(path: &Path) -> Result<Vec<f64>, BankError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut scores = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(idx), Some(score), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(path, format!("line {}: expected `index score`", lineno + 1)));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad index", lineno + 1)))?;
        if idx != scores.len() {
            return Err(format_err(
                path,
                format!("line {}: expected index {}, found {idx}", lineno + 1, scores.len()),
            ));
        }
        let score: f64 = score
            .parse()
            .map_err(|_| format_err(path, format!("line {}: bad score", lineno + 1)))?;
        scores.push(score);
    }
    Ok(scores)
}
