//! Uniform-grid spatial index for exact nearest-neighbor queries on 3-D
//! point sets.
//!
//! The index hashes points into cubic cells sized so the grid never holds
//! more than O(n) cells, then answers queries by scanning cells in
//! expanding Chebyshev rings around the query. Results are exact: a ring is
//! only skipped once its geometric lower bound strictly exceeds the current
//! best distance, and ties in distance are broken by the lower point index,
//! so every query returns precisely what a brute-force scan with the same
//! `(distance^2, index)` ordering would.

/// Spatial index over a fixed set of points.
pub struct PointGrid {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    cell_size: f64,
    dims: [i64; 3],
    /// `dims[0] * dims[1] * dims[2]` buckets of ascending point indices.
    cells: Vec<Vec<u32>>,
}

impl PointGrid {
    /// Builds the index. Points must be finite.
    pub fn build(points: &[[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "cannot index an empty point set");
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                debug_assert!(p[a].is_finite());
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let diag = ((max[0] - min[0]).powi(2)
            + (max[1] - min[1]).powi(2)
            + (max[2] - min[2]).powi(2))
        .sqrt();
        // Aim for roughly cbrt(n) cells along the diagonal; each axis then
        // holds at most cbrt(n) + 1 cells, bounding the table at O(n).
        let cell_size = if diag > 0.0 {
            diag / (points.len() as f64).cbrt().max(1.0)
        } else {
            1.0
        };
        let mut dims = [1i64; 3];
        for a in 0..3 {
            let extent = max[a] - min[a];
            dims[a] = ((extent / cell_size).floor() as i64 + 1).max(1);
        }
        let total = (dims[0] * dims[1] * dims[2]) as usize;
        let mut grid = Self {
            points: points.to_vec(),
            origin: min,
            cell_size,
            dims,
            cells: vec![Vec::new(); total],
        };
        for i in 0..grid.points.len() {
            let c = grid.cell_of(&grid.points[i]);
            let flat = grid.flat(c);
            grid.cells[flat].push(i as u32);
        }
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    fn cell_of(&self, p: &[f64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            let raw = ((p[a] - self.origin[a]) / self.cell_size).floor() as i64;
            c[a] = raw.clamp(0, self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])) as usize
    }

    /// Largest Chebyshev ring that can contain any cell, from the given
    /// center; scanning up to this ring covers the whole grid.
    fn max_ring(&self, center: [i64; 3]) -> i64 {
        (0..3)
            .map(|a| center[a].max(self.dims[a] - 1 - center[a]))
            .max()
            .unwrap()
    }

    /// Visits every in-bounds cell at exactly Chebyshev distance `s` from
    /// `center`, in ascending flat order within each face sweep.
    fn for_ring(&self, center: [i64; 3], s: i64, mut visit: impl FnMut(&[u32])) {
        if s == 0 {
            visit(&self.cells[self.flat(center)]);
            return;
        }
        let lo = |a: usize| (center[a] - s).max(0);
        let hi = |a: usize| (center[a] + s).min(self.dims[a] - 1);
        for z in lo(2)..=hi(2) {
            let z_on_face = (z - center[2]).abs() == s;
            for y in lo(1)..=hi(1) {
                let y_on_face = (y - center[1]).abs() == s;
                if z_on_face || y_on_face {
                    for x in lo(0)..=hi(0) {
                        visit(&self.cells[self.flat([x, y, z])]);
                    }
                } else {
                    // Interior row: only the two x faces belong to the ring.
                    for x in [center[0] - s, center[0] + s] {
                        if (0..self.dims[0]).contains(&x) {
                            visit(&self.cells[self.flat([x, y, z])]);
                        }
                    }
                }
            }
        }
    }

    fn dist_sq(&self, q: &[f64; 3], i: u32) -> f64 {
        let p = &self.points[i as usize];
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dz = p[2] - q[2];
        dx * dx + dy * dy + dz * dz
    }

    /// The single nearest point to `q` (ties by lower index), optionally
    /// excluding one index. Returns `(index, distance)`; `None` only when
    /// the exclusion empties the set.
    pub fn nearest(&self, q: &[f64; 3], exclude: Option<usize>) -> Option<(usize, f64)> {
        // Ring arithmetic runs around the query's clamped cell; distances to
        // out-of-box queries only grow, so the ring lower bound stays valid.
        let center = self.cell_of(q);
        let max_ring = self.max_ring(center);
        let mut best: Option<(f64, u32)> = None;
        for s in 0..=max_ring {
            if let Some((bd, _)) = best {
                // Every point in ring s lies at distance >= (s - 1) * cell
                // from q; strict inequality keeps equal-distance candidates
                // in later rings reachable for the index tie-break.
                let bound = (s - 1).max(0) as f64 * self.cell_size;
                if bound * bound > bd {
                    break;
                }
            }
            self.for_ring(center, s, |bucket| {
                for &i in bucket {
                    if exclude == Some(i as usize) {
                        continue;
                    }
                    let d = self.dist_sq(q, i);
                    if best.map_or(true, |(bd, bi)| (d, i) < (bd, bi)) {
                        best = Some((d, i));
                    }
                }
            });
        }
        best.map(|(d, i)| (i as usize, d.sqrt()))
    }

    /// The `k` nearest points to `q` ordered by `(distance^2, index)`,
    /// optionally excluding one index. Returns fewer than `k` entries when
    /// the set is too small.
    pub fn knn(&self, q: &[f64; 3], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let center = self.cell_of(q);
        let max_ring = self.max_ring(center);
        // Small k in practice: a sorted vector beats a heap.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        for s in 0..=max_ring {
            if best.len() == k {
                let bound = (s - 1).max(0) as f64 * self.cell_size;
                if bound * bound > best[k - 1].0 {
                    break;
                }
            }
            self.for_ring(center, s, |bucket| {
                for &i in bucket {
                    if exclude == Some(i as usize) {
                        continue;
                    }
                    let d = self.dist_sq(q, i);
                    if best.len() == k && (d, i) >= best[k - 1] {
                        continue;
                    }
                    let pos = best.partition_point(|&(bd, bi)| (bd, bi) < (d, i));
                    best.insert(pos, (d, i));
                    if best.len() > k {
                        best.pop();
                    }
                }
            });
        }
        best.into_iter().map(|(d, i)| (i as usize, d.sqrt())).collect()
    }

    /// All points within `radius` of `q` (inclusive), ordered by
    /// `(distance^2, index)`.
    pub fn within_radius(&self, q: &[f64; 3], radius: f64) -> Vec<(usize, f64)> {
        let center = self.cell_of(q);
        let max_ring = self.max_ring(center);
        let r_sq = radius * radius;
        let mut hits: Vec<(f64, u32)> = Vec::new();
        for s in 0..=max_ring {
            let bound = (s - 1).max(0) as f64 * self.cell_size;
            if bound > radius {
                break;
            }
            self.for_ring(center, s, |bucket| {
                for &i in bucket {
                    let d = self.dist_sq(q, i);
                    if d <= r_sq {
                        hits.push((d, i));
                    }
                }
            });
        }
        hits.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hits.into_iter().map(|(d, i)| (i as usize, d.sqrt())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(
        points: &[[f64; 3]],
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| exclude != Some(*i))
            .map(|(i, p)| {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                (d, i)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(k);
        all.into_iter().map(|(d, i)| (i, d.sqrt())).collect()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, quantize: bool) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for v in &mut p {
                    *v = if quantize {
                        // Coarse lattice produces many exact distance ties.
                        rng.gen_range(-2i32..=2) as f64
                    } else {
                        rng.gen_range(-10.0..10.0)
                    };
                }
                p
            })
            .collect()
    }

    #[test]
    fn nearest_on_singleton() {
        let grid = PointGrid::build(&[[1.0, 2.0, 3.0]]);
        let (i, d) = grid.nearest(&[1.0, 2.0, 7.0], None).unwrap();
        assert_eq!(i, 0);
        assert!((d - 4.0).abs() < 1e-12);
        assert!(grid.nearest(&[0.0; 3], Some(0)).is_none());
    }

    #[test]
    fn duplicate_points_tie_to_the_lower_index() {
        let pts = vec![[5.0, 5.0, 5.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let grid = PointGrid::build(&pts);
        let (i, _) = grid.nearest(&[0.1, 0.0, 0.0], None).unwrap();
        assert_eq!(i, 1);
        let knn = grid.knn(&[0.1, 0.0, 0.0], 2, None);
        assert_eq!(knn.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn far_away_query_still_finds_the_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_cloud(&mut rng, 50, false);
        let grid = PointGrid::build(&pts);
        let q = [1e6, -1e6, 1e6];
        assert_eq!(grid.nearest(&q, None), brute_knn(&pts, &q, 1, None).first().copied());
    }

    #[test]
    fn coincident_cloud_is_handled() {
        let pts = vec![[3.0, 3.0, 3.0]; 4];
        let grid = PointGrid::build(&pts);
        let knn = grid.knn(&[3.0, 3.0, 3.0], 3, Some(0));
        assert_eq!(knn.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(knn.iter().all(|&(_, d)| d == 0.0));
    }

    #[test]
    fn radius_is_inclusive() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let grid = PointGrid::build(&pts);
        let hits = grid.within_radius(&[0.0, 0.0, 0.0], 1.0);
        assert_eq!(hits.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(seed in 0u64..300, n in 1usize..120, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let quantize = seed % 3 == 0;
            let pts = random_cloud(&mut rng, n, quantize);
            let grid = PointGrid::build(&pts);
            let q = if seed % 2 == 0 {
                pts[seed as usize % n]
            } else {
                [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0)]
            };
            let exclude = if seed % 5 == 0 { Some(seed as usize % n) } else { None };
            let got = grid.knn(&q, k, exclude);
            let want = brute_knn(&pts, &q, k, exclude);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn nearest_matches_knn1(seed in 0u64..200, n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let pts = random_cloud(&mut rng, n, seed % 2 == 0);
            let grid = PointGrid::build(&pts);
            let q = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let nearest = grid.nearest(&q, None);
            let knn = grid.knn(&q, 1, None);
            prop_assert_eq!(nearest, knn.first().copied());
        }

        #[test]
        fn radius_matches_brute_force(seed in 0u64..200, n in 1usize..100, r in 0.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let pts = random_cloud(&mut rng, n, seed % 4 == 0);
            let grid = PointGrid::build(&pts);
            let q = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)];
            let got: Vec<usize> = grid.within_radius(&q, r).iter().map(|&(i, _)| i).collect();
            let r_sq = r * r;
            let mut want: Vec<(f64, usize)> = pts.iter().enumerate()
                .map(|(i, p)| ((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2), i))
                .filter(|&(d, _)| d <= r_sq)
                .collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(got, want.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
        }
    }
}
