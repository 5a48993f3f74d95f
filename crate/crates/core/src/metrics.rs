//! Geometry distortion metrics: point-to-point (D1) and point-to-plane (D2)
//! PSNR with the 3*peak^2 numerator convention, plus a combined quality
//! report.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ply::PointCloud;
use crate::tensor::Coord3;

#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub d1_psnr: f64,
    pub d2_psnr: Option<f64>,
    pub bpp: f64,
    pub points_reference: usize,
    pub points_reconstruction: usize,
    /// True when the two sets are identical (PSNR reported as infinity).
    pub identical: bool,
}

fn sq_dist(a: Coord3, b: Coord3) -> f64 {
    let dx = (a.x - b.x) as f64;
    let dy = (a.y - b.y) as f64;
    let dz = (a.z - b.z) as f64;
    dx * dx + dy * dy + dz * dz
}

/// Grid-bucket nearest-neighbor index. Cell size targets a handful of
/// points per cell; lookup walks Chebyshev rings outward until the ring's
/// distance lower bound exceeds the best hit.
pub struct NnIndex<'a> {
    points: &'a [Coord3],
    cell: i32,
    buckets: HashMap<(i32, i32, i32), Vec<u32>>,
}

impl<'a> NnIndex<'a> {
    pub fn build(points: &'a [Coord3]) -> NnIndex<'a> {
        assert!(!points.is_empty());
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = Coord3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Coord3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        let span = ((hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z) + 1) as f64;
        let target_cells = (points.len() as f64 / 4.0).cbrt().ceil().max(1.0);
        let cell = (span / target_cells).ceil().max(1.0) as i32;
        let mut buckets: HashMap<(i32, i32, i32), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets
                .entry((p.x.div_euclid(cell), p.y.div_euclid(cell), p.z.div_euclid(cell)))
                .or_default()
                .push(i as u32);
        }
        NnIndex {
            points,
            cell,
            buckets,
        }
    }

    /// Index and squared distance of the nearest point; `skip` excludes one
    /// index (for in-cloud neighbor queries).
    pub fn nearest(&self, q: Coord3, skip: Option<u32>) -> (u32, f64) {
        let (cx, cy, cz) = (
            q.x.div_euclid(self.cell),
            q.y.div_euclid(self.cell),
            q.z.div_euclid(self.cell),
        );
        let mut best = (u32::MAX, f64::INFINITY);
        let mut ring = 0i32;
        loop {
            let lb = ((ring - 1).max(0) as f64) * self.cell as f64;
            if best.1.is_finite() && lb * lb > best.1 {
                return best;
            }
            let mut any_cell = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                            any_cell = true;
                            for &i in ids {
                                if Some(i) == skip {
                                    continue;
                                }
                                let d = sq_dist(q, self.points[i as usize]);
                                if d < best.1 {
                                    best = (i, d);
                                }
                            }
                        }
                    }
                }
            }
            // Expand until a hit exists and the bound closes; a cloud is
            // finite so rings eventually run dry only after a hit was found.
            if !any_cell && best.1.is_finite() {
                return best;
            }
            ring += 1;
        }
    }

    /// Up to `k` nearest neighbors (excluding `skip`), closest first.
    pub fn k_nearest(&self, q: Coord3, k: usize, skip: Option<u32>) -> Vec<(u32, f64)> {
        // Small k: collect candidates from growing rings, then verify with
        // the distance bound.
        let (cx, cy, cz) = (
            q.x.div_euclid(self.cell),
            q.y.div_euclid(self.cell),
            q.z.div_euclid(self.cell),
        );
        let mut found: Vec<(u32, f64)> = Vec::new();
        let mut ring = 0i32;
        loop {
            let lb = ((ring - 1).max(0) as f64) * self.cell as f64;
            if found.len() >= k && lb * lb > found[k - 1].1 {
                found.truncate(k);
                return found;
            }
            if ring as f64 * (self.cell as f64) > 4.0 * self.span_bound() {
                found.truncate(k.min(found.len()));
                return found;
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in ids {
                                if Some(i) == skip {
                                    continue;
                                }
                                found.push((i, sq_dist(q, self.points[i as usize])));
                            }
                        }
                    }
                }
            }
            found.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            found.dedup_by_key(|e| e.0);
            ring += 1;
        }
    }

    fn span_bound(&self) -> f64 {
        // Coarse upper bound on any inter-point distance.
        self.buckets.len() as f64 * self.cell as f64 + self.cell as f64
    }
}

fn mean_sq_nn(from: &[Coord3], to_index: &NnIndex) -> f64 {
    let total: f64 = from.iter().map(|&a| to_index.nearest(a, None).1).sum();
    total / from.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    10.0 * (3.0 * peak * peak / mse).log10()
}

/// Symmetric point-to-point PSNR. Identical sets yield +infinity.
pub fn d1_psnr(a: &[Coord3], b: &[Coord3], peak: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metrics("d1 needs two non-empty clouds".into()));
    }
    let ia = NnIndex::build(a);
    let ib = NnIndex::build(b);
    let mse = mean_sq_nn(a, &ib).max(mean_sq_nn(b, &ia));
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(psnr_from_mse(mse, peak))
}

/// Eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix, by
/// cyclic Jacobi rotations.
pub fn smallest_eigenvector(m: [[f64; 3]; 3]) -> [f64; 3] {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..32 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-24 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-30 {
                continue;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let rot = |mat: &mut [[f64; 3]; 3], left: bool| {
                for i in 0..3 {
                    let (x, y) = if left {
                        (mat[p][i], mat[q][i])
                    } else {
                        (mat[i][p], mat[i][q])
                    };
                    let (nx, ny) = (c * x - s * y, s * x + c * y);
                    if left {
                        mat[p][i] = nx;
                        mat[q][i] = ny;
                    } else {
                        mat[i][p] = nx;
                        mat[i][q] = ny;
                    }
                }
            };
            rot(&mut a, true);
            rot(&mut a, false);
            rot(&mut v, false);
        }
    }
    let eigs = [a[0][0], a[1][1], a[2][2]];
    let k = (0..3).min_by(|&i, &j| eigs[i].partial_cmp(&eigs[j]).unwrap()).unwrap();
    let n = [v[0][k], v[1][k], v[2][k]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [n[0] / len, n[1] / len, n[2] / len]
    }
}

/// Unit surface normals estimated per point by PCA over the 8 nearest
/// neighbors.
pub fn estimate_normals(points: &[Coord3]) -> Result<Vec<[f64; 3]>> {
    if points.len() < 8 {
        return Err(Error::Metrics(
            "normal estimation needs at least 8 points".into(),
        ));
    }
    let index = NnIndex::build(points);
    let mut normals = Vec::with_capacity(points.len());
    for (i, &p) in points.iter().enumerate() {
        let nbrs = index.k_nearest(p, 8, Some(i as u32));
        let pts: Vec<[f64; 3]> = nbrs
            .iter()
            .map(|&(j, _)| {
                let q = points[j as usize];
                [q.x as f64, q.y as f64, q.z as f64]
            })
            .collect();
        let n = pts.len() as f64;
        let mut mean = [0.0; 3];
        for q in &pts {
            for a in 0..3 {
                mean[a] += q[a] / n;
            }
        }
        let mut cov = [[0.0; 3]; 3];
        for q in &pts {
            for r in 0..3 {
                for c in 0..3 {
                    cov[r][c] += (q[r] - mean[r]) * (q[c] - mean[c]) / n;
                }
            }
        }
        normals.push(smallest_eigenvector(cov));
    }
    Ok(normals)
}

fn mean_sq_plane(from: &[Coord3], to: &[Coord3], to_index: &NnIndex, to_normals: &[[f64; 3]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&a| {
            let (j, _) = to_index.nearest(a, None);
            let b = to[j as usize];
            let e = [
                (a.x - b.x) as f64,
                (a.y - b.y) as f64,
                (a.z - b.z) as f64,
            ];
            let n = to_normals[j as usize];
            let proj = e[0] * n[0] + e[1] * n[1] + e[2] * n[2];
            proj * proj
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric point-to-plane PSNR.
pub fn d2_psnr(a: &[Coord3], b: &[Coord3], peak: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metrics("d2 needs two non-empty clouds".into()));
    }
    let na = estimate_normals(a)?;
    let nb = estimate_normals(b)?;
    let ia = NnIndex::build(a);
    let ib = NnIndex::build(b);
    let mse = mean_sq_plane(a, b, &ib, &nb).max(mean_sq_plane(b, a, &ia, &na));
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(psnr_from_mse(mse, peak))
}

/// Brute-force D1 for small clouds; doubles as the test oracle.
pub fn d1_psnr_exhaustive(a: &[Coord3], b: &[Coord3], peak: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metrics("d1 needs two non-empty clouds".into()));
    }
    let dir = |from: &[Coord3], to: &[Coord3]| -> f64 {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| sq_dist(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let mse = dir(a, b).max(dir(b, a));
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(psnr_from_mse(mse, peak))
}

/// Full report for a reconstruction against its reference.
pub fn quality_report(
    reference: &PointCloud,
    reconstruction: &PointCloud,
    total_bits: u64,
) -> Result<QualityReport> {
    let peak = ((1u32 << reference.n_bits) - 1) as f64;
    let d1 = d1_psnr(&reference.points, &reconstruction.points, peak)?;
    let d2 = if reference.points.len() >= 8 && reconstruction.points.len() >= 8 {
        Some(d2_psnr(&reference.points, &reconstruction.points, peak)?)
    } else {
        None
    };
    Ok(QualityReport {
        d1_psnr: d1,
        d2_psnr: d2,
        bpp: total_bits as f64 / reference.original_count.max(1) as f64,
        points_reference: reference.points.len(),
        points_reconstruction: reconstruction.points.len(),
        identical: d1.is_infinite(),
    })
}
