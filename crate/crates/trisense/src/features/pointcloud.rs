//! Per-point descriptors for point clouds: k-NN graph, PCA normal
//! estimation, and 33-dimensional fast point feature histograms built from
//! Darboux-frame angles, plus a trivial centered-xyz mode.

use rayon::prelude::*;

use crate::core::ModalityId;
use crate::spatial::PointGrid;

use super::{FeatureError, PatchFeatureMap};

/// Bins per angle; three angles give the 33-dimensional descriptor.
pub const ANGLE_BINS: usize = 11;
/// Descriptor width: alpha, phi, theta blocks of [`ANGLE_BINS`] each.
pub const FPFH_DIM: usize = 3 * ANGLE_BINS;
/// Default neighborhood size for normal estimation.
pub const DEFAULT_K_NORMALS: usize = 16;
/// Default neighborhood size for histogram aggregation.
pub const DEFAULT_K_FPFH: usize = 16;

/// Unit normals, one per cloud point.
#[derive(Debug, Clone)]
pub struct NormalField {
    pub normals: Vec<[f64; 3]>,
    /// Whether the vectors were sign-disambiguated against a viewpoint.
    pub oriented: bool,
}

/// The sign-disambiguation viewpoint used by default: the cloud centroid
/// raised along +z by ten bounding-box diagonals, i.e. far outside the
/// object on a fixed side.
pub fn default_viewpoint(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut c = [0.0f64; 3];
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let diag = ((max[0] - min[0]).powi(2)
        + (max[1] - min[1]).powi(2)
        + (max[2] - min[2]).powi(2))
    .sqrt();
    [c[0], c[1], c[2] + 10.0 * diag]
}

/// Exact k-nearest-neighbor lists (self excluded, ties by lower index).
pub fn knn_graph(points: &[[f64; 3]], k: usize) -> Result<Vec<Vec<usize>>, FeatureError> {
    let grid = PointGrid::build(points);
    Ok(knn_lists(&grid, k)?
        .into_iter()
        .map(|l| l.into_iter().map(|(i, _)| i).collect())
        .collect())
}

/// Neighbor lists with distances, shared by the public entry points.
fn knn_lists(grid: &PointGrid, k: usize) -> Result<Vec<Vec<(usize, f64)>>, FeatureError> {
    let n = grid.len();
    if k == 0 || k >= n {
        return Err(FeatureError::BadK { k, n });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| grid.knn(&grid.point(i), k, Some(i)))
        .collect())
}

/// PCA normals over `{point} ∪ kNN(point)` neighborhoods, oriented to have
/// non-negative dot product with (viewpoint − point). See
/// [`default_viewpoint`] for the default sign-disambiguation point.
pub fn estimate_normals(points: &[[f64; 3]], k: usize) -> Result<NormalField, FeatureError> {
    estimate_normals_from(points, k, default_viewpoint(points))
}

/// As [`estimate_normals`], with an explicit viewpoint. Useful when a cloud
/// has been rigidly moved and the viewpoint should travel with it.
pub fn estimate_normals_from(
    points: &[[f64; 3]],
    k: usize,
    viewpoint: [f64; 3],
) -> Result<NormalField, FeatureError> {
    let grid = PointGrid::build(points);
    normals_with(&grid, k, viewpoint)
}

fn normals_with(
    grid: &PointGrid,
    k: usize,
    viewpoint: [f64; 3],
) -> Result<NormalField, FeatureError> {
    if k < 3 {
        return Err(FeatureError::Parameter(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    let neighbors = knn_lists(grid, k)?;
    let normals: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.point(i);
            // Neighborhood centroid over {p} and its k neighbors.
            let mut c = p;
            for &(j, _) in &neighbors[i] {
                let q = grid.point(j);
                for a in 0..3 {
                    c[a] += q[a];
                }
            }
            let m = (neighbors[i].len() + 1) as f64;
            for v in &mut c {
                *v /= m;
            }

            let mut cov = nalgebra::Matrix3::<f64>::zeros();
            let mut max_dev_sq = 0.0f64;
            let mut accumulate = |q: [f64; 3]| {
                let d = nalgebra::Vector3::new(q[0] - c[0], q[1] - c[1], q[2] - c[2]);
                max_dev_sq = max_dev_sq.max(d.norm_squared());
                cov += d * d.transpose();
            };
            accumulate(p);
            for &(j, _) in &neighbors[i] {
                accumulate(grid.point(j));
            }
            cov /= m;

            let scale = 1.0 + c.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if max_dev_sq.sqrt() <= 1e-12 * scale {
                return Err(FeatureError::DegenerateNeighborhood(i));
            }

            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut smallest = 0;
            for a in 1..3 {
                if eig.eigenvalues[a] < eig.eigenvalues[smallest] {
                    smallest = a;
                }
            }
            let v = eig.eigenvectors.column(smallest);
            let mut n = [v[0], v[1], v[2]];
            // Canonical sign first (largest-magnitude component positive) so
            // the viewpoint flip starts from a solver-independent vector.
            let lead = (0..3).max_by(|&a, &b| n[a].abs().partial_cmp(&n[b].abs()).unwrap()).unwrap();
            if n[lead] < 0.0 {
                for v in &mut n {
                    *v = -*v;
                }
            }
            let to_vp =
                [viewpoint[0] - p[0], viewpoint[1] - p[1], viewpoint[2] - p[2]];
            if n[0] * to_vp[0] + n[1] * to_vp[1] + n[2] * to_vp[2] < 0.0 {
                for v in &mut n {
                    *v = -*v;
                }
            }
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            Ok([n[0] / norm, n[1] / norm, n[2] / norm])
        })
        .collect::<Result<_, _>>()?;
    Ok(NormalField { normals, oriented: true })
}

/// Source-selection tolerance: below this gap in |cos| the two endpoints
/// are treated as equally aligned with the connecting line.
const SOURCE_TIE_EPS: f64 = 1e-9;

/// The simple point feature histogram of one point against its neighbors:
/// three 11-bin Darboux-angle histograms, each normalized to percent.
///
/// For each pair, the source endpoint is the one whose normal makes the
/// smaller angle with the connecting line; with `u = n_s`, `d̂` the unit
/// source→target vector, `v = d̂ × u`, `w = u × v`, the binned angles are
/// `α = v·n_t`, `φ = u·d̂`, `θ = atan2(w·n_t, u·n_t)`.
///
/// When the two endpoints are equally aligned the choice is not decided by
/// the geometry at all — this happens for real, not just in theory, because
/// mutual nearest neighbors often share their entire neighborhood set and
/// therefore their estimated normal. Any index-based tie rule would make
/// the histogram depend on storage order, so tied pairs instead contribute
/// half a count under each orientation, which keeps the descriptor a
/// function of the unordered pair geometry alone.
pub fn compute_spfh(
    point_index: usize,
    points: &[[f64; 3]],
    normals: &NormalField,
    neighbors: &[usize],
) -> Result<[f64; FPFH_DIM], FeatureError> {
    if neighbors.is_empty() {
        return Err(FeatureError::Parameter(format!(
            "point {point_index} has no neighbors"
        )));
    }
    let mut hist = [0.0f64; FPFH_DIM];
    let mut deposit = |angles: (f64, f64, f64), weight: f64| {
        hist[bin_unit(angles.0)] += weight;
        hist[ANGLE_BINS + bin_unit(angles.1)] += weight;
        hist[2 * ANGLE_BINS + bin_angle(angles.2)] += weight;
    };
    for &j in neighbors {
        let i = point_index;
        let pi = points[i];
        let pj = points[j];
        let diff = [pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        if dist == 0.0 {
            return Err(FeatureError::ZeroLengthPair(i.min(j), i.max(j)));
        }
        let d_ij = [diff[0] / dist, diff[1] / dist, diff[2] / dist];
        let cos_i = dot(&normals.normals[i], &d_ij).abs();
        let cos_j = dot(&normals.normals[j], &d_ij).abs();
        if (cos_i - cos_j).abs() <= SOURCE_TIE_EPS {
            deposit(angles_with_source(&normals.normals[i], &normals.normals[j], d_ij), 0.5);
            deposit(
                angles_with_source(
                    &normals.normals[j],
                    &normals.normals[i],
                    [-d_ij[0], -d_ij[1], -d_ij[2]],
                ),
                0.5,
            );
        } else if cos_i > cos_j {
            deposit(angles_with_source(&normals.normals[i], &normals.normals[j], d_ij), 1.0);
        } else {
            deposit(
                angles_with_source(
                    &normals.normals[j],
                    &normals.normals[i],
                    [-d_ij[0], -d_ij[1], -d_ij[2]],
                ),
                1.0,
            );
        }
    }
    let scale = 100.0 / neighbors.len() as f64;
    for h in &mut hist {
        *h *= scale;
    }
    Ok(hist)
}

/// Darboux angles for a directed pair: `ns` is the source normal, `nt` the
/// target normal, `d` the unit vector from source to target.
fn angles_with_source(ns: &[f64; 3], nt: &[f64; 3], d: [f64; 3]) -> (f64, f64, f64) {
    let u = *ns;
    let v = cross(&d, &u);
    let w = cross(&u, &v);
    let alpha = dot(&v, nt);
    let phi = dot(&u, &d);
    let theta = dot(&w, nt).atan2(dot(&u, nt));
    (alpha, phi, theta)
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Bin for a value in [-1, 1].
#[inline]
fn bin_unit(x: f64) -> usize {
    (((x + 1.0) / 2.0 * ANGLE_BINS as f64).floor() as isize)
        .clamp(0, ANGLE_BINS as isize - 1) as usize
}

/// Bin for a value in [-pi, pi].
#[inline]
fn bin_angle(x: f64) -> usize {
    ((((x + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * ANGLE_BINS as f64).floor()
        as isize)
        .clamp(0, ANGLE_BINS as isize - 1) as usize
}

/// Full 33-dimensional descriptors for every point, using the default
/// viewpoint for normal orientation.
pub fn compute_fpfh(
    points: &[[f64; 3]],
    k_normals: usize,
    k_fpfh: usize,
) -> Result<PatchFeatureMap, FeatureError> {
    compute_fpfh_from(points, k_normals, k_fpfh, default_viewpoint(points))
}

/// As [`compute_fpfh`], with an explicit normal-orientation viewpoint.
pub fn compute_fpfh_from(
    points: &[[f64; 3]],
    k_normals: usize,
    k_fpfh: usize,
    viewpoint: [f64; 3],
) -> Result<PatchFeatureMap, FeatureError> {
    let desc = fpfh_descriptors(points, k_normals, k_fpfh, viewpoint)?;
    let mut values = Vec::with_capacity(desc.len() * FPFH_DIM);
    for row in &desc {
        values.extend(row.iter().map(|&v| v as f32));
    }
    PatchFeatureMap::new(ModalityId::Pointcloud, None, FPFH_DIM, values)
}

/// Double-precision descriptor rows; the f32 map is quantized from these.
///
/// Each point's descriptor is its own histogram plus the distance-weighted
/// mean of its neighbors' histograms, `SPFH(p) + (1/k)·Σ SPFH(p_i)/ω_i`
/// with `ω_i = ‖p − p_i‖`, then rescaled so every 11-bin block sums to 100.
pub fn fpfh_descriptors(
    points: &[[f64; 3]],
    k_normals: usize,
    k_fpfh: usize,
    viewpoint: [f64; 3],
) -> Result<Vec<[f64; FPFH_DIM]>, FeatureError> {
    let grid = PointGrid::build(points);
    let normals = normals_with(&grid, k_normals, viewpoint)?;
    let neighbors = knn_lists(&grid, k_fpfh)?;

    let spfh: Vec<[f64; FPFH_DIM]> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let idx: Vec<usize> = neighbors[i].iter().map(|&(j, _)| j).collect();
            compute_spfh(i, points, &normals, &idx)
        })
        .collect::<Result<_, _>>()?;

    Ok((0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = spfh[i];
            let k = neighbors[i].len() as f64;
            for &(j, dist) in &neighbors[i] {
                // dist > 0: a coincident neighbor would have failed SPFH.
                let w = 1.0 / (k * dist);
                for (a, s) in acc.iter_mut().zip(spfh[j].iter()) {
                    *a += w * s;
                }
            }
            for block in 0..3 {
                let range = block * ANGLE_BINS..(block + 1) * ANGLE_BINS;
                let sum: f64 = acc[range.clone()].iter().sum();
                if sum > 0.0 {
                    for v in &mut acc[range] {
                        *v *= 100.0 / sum;
                    }
                }
            }
            acc
        })
        .collect())
}

/// Centered-coordinate features: each point's xyz relative to the cloud
/// centroid, as a 3-wide ungridded map.
pub fn raw_point_features(points: &[[f64; 3]]) -> Result<PatchFeatureMap, FeatureError> {
    if points.is_empty() {
        return Err(FeatureError::Shape("empty cloud".into()));
    }
    let n = points.len() as f64;
    let mut c = [0.0f64; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut values = Vec::with_capacity(points.len() * 3);
    for p in points {
        for a in 0..3 {
            values.push((p[a] - c[a]) as f32);
        }
    }
    PatchFeatureMap::new(ModalityId::Pointcloud, None, 3, values)
}
