//! Rigid alignment of dual-scan point clouds: closed-form Procrustes
//! fitting, point-to-point ICP refinement, and scan merging with
//! deduplication.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::spatial::PointGrid;

/// Default ICP iteration cap.
pub const DEFAULT_MAX_ITER: usize = 50;
/// Default ICP convergence tolerance on the RMSE improvement, in mm.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default merge deduplication radius in mm (the scanner's resolution).
pub const DEFAULT_DEDUP_RADIUS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("point count mismatch: {src} source vs {dst} destination")]
    CountMismatch { src: usize, dst: usize },
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point configuration: {0}")]
    Degenerate(String),
    #[error("invalid transform: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A proper rigid motion: rotation (orthonormal, det +1) plus translation.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates orthonormality and a +1 determinant (both to 1e-9).
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, RegistrationError> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let gram = r.transpose() * r;
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - expect).abs());
            }
        }
        if max_dev > 1e-9 {
            return Err(RegistrationError::Invalid(format!(
                "rotation is not orthonormal (max deviation {max_dev:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(RegistrationError::Invalid(format!(
                "rotation determinant is {det}, not +1"
            )));
        }
        for v in translation.iter().chain(rotation.iter().flatten()) {
            if !v.is_finite() {
                return Err(RegistrationError::Invalid("non-finite entry".into()));
            }
        }
        Ok(Self { rotation, translation })
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn apply_all(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points.iter().map(|&p| self.apply(p)).collect()
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn compose(&self, inner: &RigidTransform) -> Self {
        let a = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let b = Matrix3::from_fn(|i, j| inner.rotation[i][j]);
        let r = a * b;
        let t = a * Vector3::from_column_slice(&inner.translation)
            + Vector3::from_column_slice(&self.translation);
        Self {
            rotation: to_array(&r),
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn inverse(&self) -> Self {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let rt = r.transpose();
        let t = -(rt * Vector3::from_column_slice(&self.translation));
        Self {
            rotation: to_array(&rt),
            translation: [t[0], t[1], t[2]],
        }
    }

    /// Rotation angle in radians, for comparing against a reference.
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation[0][0] + self.rotation[1][1] + self.rotation[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

fn to_array(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

/// Writes a transform as 12 plain-text numbers: three rows of the rotation
/// matrix, then the translation. The shortest-round-trip float formatting
/// makes save/load lossless.
pub fn save_transform(t: &RigidTransform, path: &Path) -> Result<(), RegistrationError> {
    let mut out = String::new();
    for row in &t.rotation {
        out.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
    }
    out.push_str(&format!(
        "{} {} {}\n",
        t.translation[0], t.translation[1], t.translation[2]
    ));
    fs::write(path, out).map_err(|e| RegistrationError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_transform(path: &Path) -> Result<RigidTransform, RegistrationError> {
    let text = fs::read_to_string(path).map_err(|e| RegistrationError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let parse = |msg: String| RegistrationError::Parse {
        path: path.display().to_string(),
        msg,
    };
    let mut nums = Vec::with_capacity(12);
    for tok in text.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| parse(format!("invalid number {tok:?}")))?;
        nums.push(v);
    }
    if nums.len() != 12 {
        return Err(parse(format!("expected 12 numbers, found {}", nums.len())));
    }
    let rotation = [
        [nums[0], nums[1], nums[2]],
        [nums[3], nums[4], nums[5]],
        [nums[6], nums[7], nums[8]],
    ];
    RigidTransform::new(rotation, [nums[9], nums[10], nums[11]])
}

/// Least-squares rigid fit of `src` onto `dst` (paired by index): the
/// minimizer of `Σ ‖R·src_i + t − dst_i‖²` via SVD of the cross-covariance,
/// with the reflection case corrected to a proper rotation.
pub fn best_rigid_transform(
    src: &[[f64; 3]],
    dst: &[[f64; 3]],
) -> Result<RigidTransform, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::CountMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(RegistrationError::TooFewPoints(src.len()));
    }
    let n = src.len() as f64;
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for (a, b) in src.iter().zip(dst.iter()) {
        cs += Vector3::from_column_slice(a);
        cd += Vector3::from_column_slice(b);
    }
    cs /= n;
    cd /= n;

    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst.iter()) {
        let da = Vector3::from_column_slice(a) - cs;
        let db = Vector3::from_column_slice(b) - cd;
        h += da * db.transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| RegistrationError::Degenerate("SVD failed".into()))?;
    let v = svd
        .v_t
        .ok_or_else(|| RegistrationError::Degenerate("SVD failed".into()))?
        .transpose();
    let mut sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // A rank-deficient cross-covariance means the rotation about the
    // deficient axis is unconstrained: collinear or coincident inputs.
    if sigma[1] <= 1e-9 * sigma[0].max(f64::MIN_POSITIVE) {
        return Err(RegistrationError::Degenerate(
            "point pairs are collinear or coincident".into(),
        ));
    }

    let d = (v * u.transpose()).determinant();
    let mut correction = Matrix3::identity();
    if d < 0.0 {
        // Flip the axis of the smallest singular value.
        let mut smallest = 0;
        for i in 1..3 {
            if svd.singular_values[i] < svd.singular_values[smallest] {
                smallest = i;
            }
        }
        correction[(smallest, smallest)] = -1.0;
    }
    let r = v * correction * u.transpose();
    let t = cd - r * cs;
    RigidTransform::new(to_array(&r), [t[0], t[1], t[2]])
}

/// Outcome of an ICP run.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Final root-mean-square correspondence distance in mm.
    pub rmse: f64,
    pub iterations: usize,
    /// Whether the RMSE improvement dropped below the tolerance (or hit
    /// exactly zero) before the iteration cap.
    pub converged: bool,
    /// Per-iteration RMSE, non-increasing.
    pub rmse_trace: Vec<f64>,
}

/// Point-to-point ICP: alternately matches each transformed source point to
/// its exact nearest destination point and refits the closed-form optimal
/// transform on those pairs. Every refit is absolute (original source →
/// matched destination), so the returned transform needs no composition
/// chain, and the RMSE sequence cannot increase: new correspondences can
/// only shorten distances, and the refit is the optimum for them.
pub fn icp_align(
    src: &[[f64; 3]],
    dst: &[[f64; 3]],
    init: &RigidTransform,
    max_iter: usize,
    tol: f64,
) -> IcpResult {
    assert!(!src.is_empty() && !dst.is_empty(), "ICP needs non-empty clouds");
    let grid = PointGrid::build(dst);
    let mut transform = init.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut prev = f64::INFINITY;

    for _ in 0..max_iter {
        let moved = transform.apply_all(src);
        let matched: Vec<[f64; 3]> = moved
            .par_iter()
            .map(|p| dst[grid.nearest(p, None).unwrap().0])
            .collect();

        // Already perfect: refitting cannot improve on zero.
        let pre = rmse_between(&moved, &matched);
        if pre == 0.0 {
            trace.push(0.0);
            converged = true;
            break;
        }

        match best_rigid_transform(src, &matched) {
            Ok(t) => transform = t,
            Err(_) => {
                // Pathological correspondence set (e.g. everything matched
                // one destination point); report the state and stop.
                trace.push(pre);
                break;
            }
        }
        let rmse = rmse_between(&transform.apply_all(src), &matched);
        trace.push(rmse);
        if prev - rmse < tol {
            converged = true;
            break;
        }
        prev = rmse;
    }

    IcpResult {
        transform,
        rmse: trace.last().copied().unwrap_or(0.0),
        iterations: trace.len(),
        converged,
        rmse_trace: trace,
    }
}

fn rmse_between(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut sum = 0.0f64;
    for (p, q) in a.iter().zip(b.iter()) {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dz = p[2] - q[2];
        sum += dx * dx + dy * dy + dz * dz;
    }
    (sum / a.len() as f64).sqrt()
}

/// Concatenates `a` with the transformed `b`, dropping transformed points
/// that lie within `dedup_radius` (inclusive) of any point of `a`. Points
/// of `a` come first and are never dropped.
pub fn merge_scans(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    t: &RigidTransform,
    dedup_radius: f64,
) -> Vec<[f64; 3]> {
    let mut out = a.to_vec();
    if b.is_empty() {
        return out;
    }
    if a.is_empty() {
        return t.apply_all(b);
    }
    let grid = PointGrid::build(a);
    let moved = t.apply_all(b);
    let keep: Vec<bool> = moved
        .par_iter()
        .map(|p| grid.nearest(p, None).unwrap().1 > dedup_radius)
        .collect();
    for (p, keep) in moved.into_iter().zip(keep) {
        if keep {
            out.push(p);
        }
    }
    out
}
