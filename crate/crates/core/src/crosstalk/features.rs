//! Feature extraction: resonator dips in 1D traces, symmetry points in 2D
//! coupler maps, and the lattice spanned by those points.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::CrosstalkError;
use crate::fitters::lm::{levenberg_marquardt, CurveModel, LmConfig};

/// Minimum feature contrast in units of the estimated noise.
pub const MIN_SNR: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dip {
    pub position: f64,
    pub width: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub position: [f64; 2],
    pub depth: f64,
}

/// Lattice `origin + basis n` for integer vectors `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub origin: Vector2<f64>,
    /// Columns are the two primitive vectors.
    pub basis: Matrix2<f64>,
    pub rms_residual: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust noise estimate from first differences.
fn noise_level(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    let d: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let m = median(&d);
    let mad = median(&d.iter().map(|x| (x - m).abs()).collect::<Vec<_>>());
    mad / 0.6745 / std::f64::consts::SQRT_2
}

struct Lorentz1d;

impl CurveModel for Lorentz1d {
    fn n_params(&self) -> usize {
        4
    }

    fn value(&self, p: &[f64], x: f64) -> f64 {
        let z = (x - p[0]) / p[1];
        p[3] - p[2] / (1.0 + z * z)
    }

    fn gradient(&self, p: &[f64], x: f64, g: &mut [f64]) {
        let z = (x - p[0]) / p[1];
        let den = 1.0 + z * z;
        let dz = p[2] / (den * den) * 2.0 * z;
        g[0] = -dz / p[1];
        g[1] = -dz * z / p[1];
        g[2] = -1.0 / den;
        g[3] = 1.0;
    }
}

/// Dips in a trace, ordered by position, each refined by a local Lorentzian fit.
/// Dips whose fitting window would leave the trace are dropped.
pub fn find_dips(xs: &[f64], ys: &[f64]) -> Result<Vec<Dip>, CrosstalkError> {
    let n = xs.len();
    if n < 5 || ys.len() != n {
        return Err(CrosstalkError::NoFeatureFound("trace too short".into()));
    }
    let base = median(ys);
    let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let contrast = base - min;
    let sigma = noise_level(ys);
    if !(contrast > MIN_SNR * sigma) || contrast <= 0.0 {
        return Err(CrosstalkError::NoFeatureFound(format!("contrast {contrast:.3e} below {MIN_SNR} x noise {sigma:.3e}")));
    }
    let threshold = base - 0.5 * contrast;

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if ys[i] < threshold {
            let start = i;
            while i < n && ys[i] < threshold {
                i += 1;
            }
            runs.push((start, i - 1));
        } else {
            i += 1;
        }
    }
    // noise can split one dip into several runs
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for r in runs {
        if let Some(last) = merged.last_mut() {
            let gap = r.0 - last.1;
            if gap <= 2.max((last.1 - last.0 + 1).max(r.1 - r.0 + 1) / 2) {
                last.1 = r.1;
                continue;
            }
        }
        merged.push(r);
    }

    let h = (xs[n - 1] - xs[0]) / (n - 1) as f64;
    let mut dips = Vec::new();
    for (a, b) in merged {
        if a == 0 || b == n - 1 {
            continue;
        }
        let imin = (a..=b).min_by(|&p, &q| ys[p].total_cmp(&ys[q])).unwrap();
        let w_est = ((b - a + 1) as f64 * h / 2.0).max(h);
        let half = ((3.0 * w_est / h).round() as usize).max(4);
        if imin < half || imin + half >= n {
            continue;
        }
        let (lo, hi) = (imin - half, imin + half);
        let (y0, y1, y2) = (ys[imin - 1], ys[imin], ys[imin + 1]);
        let denom = y0 - 2.0 * y1 + y2;
        let x_par = if denom > 0.0 { xs[imin] + 0.5 * h * (y0 - y2) / denom } else { xs[imin] };
        let p0 = [x_par, w_est, contrast, base];
        let out = levenberg_marquardt(&Lorentz1d, &xs[lo..=hi], &ys[lo..=hi], &p0, &LmConfig::default());
        let p = &out.params;
        let ok = p.iter().all(|v| v.is_finite()) && (p[0] - x_par).abs() < 2.0 * w_est && p[2] > 0.0;
        let (position, width, depth) = if ok { (p[0], p[1].abs(), p[2]) } else { (x_par, w_est, contrast) };
        dips.push(Dip { position, width, depth });
    }
    if dips.is_empty() {
        return Err(CrosstalkError::NoFeatureFound("no complete dip inside the trace".into()));
    }
    dips.sort_by(|a, b| a.position.total_cmp(&b.position));
    Ok(dips)
}

/// `base - depth / (1 + d^T S d)` with `d = x - x0`, evaluated at stored points.
struct Spot2d<'a> {
    points: &'a [[f64; 2]],
}

impl CurveModel for Spot2d<'_> {
    fn n_params(&self) -> usize {
        7
    }

    fn value(&self, p: &[f64], x: f64) -> f64 {
        let [u, v] = self.points[x as usize];
        let (d1, d2) = (u - p[0], v - p[1]);
        let q = p[2] * d1 * d1 + 2.0 * p[3] * d1 * d2 + p[4] * d2 * d2;
        p[6] - p[5] / (1.0 + q)
    }

    fn gradient(&self, p: &[f64], x: f64, g: &mut [f64]) {
        let [u, v] = self.points[x as usize];
        let (d1, d2) = (u - p[0], v - p[1]);
        let q = p[2] * d1 * d1 + 2.0 * p[3] * d1 * d2 + p[4] * d2 * d2;
        let den = 1.0 + q;
        let dq = p[5] / (den * den);
        g[0] = dq * -2.0 * (p[2] * d1 + p[3] * d2);
        g[1] = dq * -2.0 * (p[3] * d1 + p[4] * d2);
        g[2] = dq * d1 * d1;
        g[3] = dq * 2.0 * d1 * d2;
        g[4] = dq * d2 * d2;
        g[5] = -1.0 / den;
        g[6] = 1.0;
    }
}

/// Symmetry points of a coupler map: deep local minima refined by a 2D
/// Lorentzian fit. `map[(i, j)]` is the signal at `(grid1[i], grid2[j])`.
pub fn find_spots(grid1: &[f64], grid2: &[f64], map: &DMatrix<f64>) -> Result<Vec<Spot>, CrosstalkError> {
    let (n1, n2) = (grid1.len(), grid2.len());
    if n1 < 5 || n2 < 5 || map.shape() != (n1, n2) {
        return Err(CrosstalkError::NoFeatureFound("map too small".into()));
    }
    let values: Vec<f64> = map.iter().copied().collect();
    let base = median(&values);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let contrast = base - min;
    let col_noise: Vec<f64> = (0..n2).map(|j| noise_level(map.column(j).as_slice())).collect();
    let sigma = median(&col_noise);
    if !(contrast > MIN_SNR * sigma) || contrast <= 0.0 {
        return Err(CrosstalkError::NoFeatureFound(format!("map contrast {contrast:.3e} below {MIN_SNR} x noise {sigma:.3e}")));
    }
    let threshold = base - 0.65 * contrast;
    let h1 = (grid1[n1 - 1] - grid1[0]) / (n1 - 1) as f64;
    let h2 = (grid2[n2 - 1] - grid2[0]) / (n2 - 1) as f64;

    let mut seen = DMatrix::from_element(n1, n2, false);
    let mut spots = Vec::new();
    for i0 in 0..n1 {
        for j0 in 0..n2 {
            if seen[(i0, j0)] || map[(i0, j0)] >= threshold {
                continue;
            }
            // flood fill one below-threshold component
            let mut queue = VecDeque::from([(i0, j0)]);
            seen[(i0, j0)] = true;
            let mut area = 0usize;
            let mut touches_edge = false;
            let mut best = (i0, j0);
            while let Some((i, j)) = queue.pop_front() {
                area += 1;
                if i == 0 || j == 0 || i == n1 - 1 || j == n2 - 1 {
                    touches_edge = true;
                }
                if map[(i, j)] < map[best] {
                    best = (i, j);
                }
                let nbrs = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
                for (a, b) in nbrs {
                    if a < n1 && b < n2 && !seen[(a, b)] && map[(a, b)] < threshold {
                        seen[(a, b)] = true;
                        queue.push_back((a, b));
                    }
                }
            }
            if touches_edge || area < 3 {
                continue;
            }
            let radius = ((area as f64 / std::f64::consts::PI).sqrt() / 0.73 * 2.0).ceil().max(3.0) as usize;
            let (bi, bj) = best;
            if bi < radius || bj < radius || bi + radius >= n1 || bj + radius >= n2 {
                continue;
            }
            if let Some(spot) = refine_spot(grid1, grid2, map, best, radius, base, contrast, (h1, h2)) {
                spots.push(spot);
            }
        }
    }
    if spots.is_empty() {
        return Err(CrosstalkError::NoFeatureFound("no complete symmetry point inside the map".into()));
    }
    Ok(spots)
}

#[allow(clippy::too_many_arguments)]
fn refine_spot(
    grid1: &[f64],
    grid2: &[f64],
    map: &DMatrix<f64>,
    (bi, bj): (usize, usize),
    radius: usize,
    base: f64,
    contrast: f64,
    (h1, h2): (f64, f64),
) -> Option<Spot> {
    // quadric through the 5x5 neighbourhood for the starting point and curvature
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for di in -2i64..=2 {
        for dj in -2i64..=2 {
            let (i, j) = ((bi as i64 + di) as usize, (bj as i64 + dj) as usize);
            let (x, y) = (grid1[i] - grid1[bi], grid2[j] - grid2[bj]);
            rows.extend_from_slice(&[1.0, x, y, x * x, x * y, y * y]);
            rhs.push(map[(i, j)]);
        }
    }
    let a = DMatrix::from_row_slice(25, 6, &rows);
    let c = a.svd(true, true).solve(&DVector::from_vec(rhs), 1e-14).ok()?;
    let hess = Matrix2::new(2.0 * c[3], c[4], c[4], 2.0 * c[5]);
    let grad = Vector2::new(c[1], c[2]);
    let depth0 = contrast.max(1e-12);
    let (start, s0) = match hess.try_inverse() {
        Some(inv) if hess.determinant() > 0.0 && hess[(0, 0)] > 0.0 => {
            let d = -inv * grad;
            let d = if d[0].abs() <= h1 && d[1].abs() <= h2 { d } else { Vector2::zeros() };
            (d, hess / (2.0 * depth0))
        }
        _ => (Vector2::zeros(), Matrix2::new(1.0 / (4.0 * h1 * h1), 0.0, 0.0, 1.0 / (4.0 * h2 * h2))),
    };
    let center = [grid1[bi] + start[0], grid2[bj] + start[1]];

    let mut points = Vec::new();
    let mut ys = Vec::new();
    for i in bi - radius..=bi + radius {
        for j in bj - radius..=bj + radius {
            points.push([grid1[i], grid2[j]]);
            ys.push(map[(i, j)]);
        }
    }
    let xs: Vec<f64> = (0..points.len()).map(|k| k as f64).collect();
    let model = Spot2d { points: &points };
    let p0 = [center[0], center[1], s0[(0, 0)], s0[(0, 1)], s0[(1, 1)], depth0, base];
    let out = levenberg_marquardt(&model, &xs, &ys, &p0, &LmConfig::default());
    let p = &out.params;
    let inside = (p[0] - center[0]).abs() <= radius as f64 * h1 && (p[1] - center[1]).abs() <= radius as f64 * h2;
    if p.iter().all(|v| v.is_finite()) && inside && p[5] > 0.0 {
        Some(Spot { position: [p[0], p[1]], depth: p[5] })
    } else {
        Some(Spot { position: center, depth: depth0 })
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Fits a 2D lattice to `points`. The primitive vectors are chosen as the
/// short lattice vectors closest to the +x and +y directions.
pub fn fit_lattice(points: &[[f64; 2]]) -> Result<Lattice, CrosstalkError> {
    if points.len() < 3 {
        return Err(CrosstalkError::NoFeatureFound(format!("{} lattice points, need at least 3", points.len())));
    }
    let pts: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p[0], p[1])).collect();
    let centroid = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let origin = *pts.iter().min_by(|a, b| (*a - centroid).norm().total_cmp(&(*b - centroid).norm())).unwrap();
    let mut diffs: Vec<Vector2<f64>> = pts.iter().map(|p| p - origin).filter(|d| d.norm() > 0.0).collect();
    diffs.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let v1 = diffs[0];
    let v2 = *diffs
        .iter()
        .find(|d| cross(v1, **d).abs() > 0.3 * v1.norm() * d.norm())
        .ok_or_else(|| CrosstalkError::NoFeatureFound("lattice points are collinear".into()))?;
    // Lagrange-Gauss reduction
    let (mut a, mut b) = if v1.norm() <= v2.norm() { (v1, v2) } else { (v2, v1) };
    loop {
        let mu = (a.dot(&b) / a.dot(&a)).round();
        b -= a * mu;
        if b.norm() >= a.norm() {
            break;
        }
        std::mem::swap(&mut a, &mut b);
    }
    let cell = cross(a, b).abs();
    let limit = 2.0 * a.norm().max(b.norm());
    let mut candidates = Vec::new();
    for m in -2i32..=2 {
        for k in -2i32..=2 {
            let v = a * m as f64 + b * k as f64;
            if gcd(m.unsigned_abs(), k.unsigned_abs()) == 1 && v.norm() <= limit {
                candidates.push(v);
            }
        }
    }
    let best_along = |axis: usize| {
        *candidates.iter().max_by(|p, q| (p[axis] / p.norm()).total_cmp(&(q[axis] / q.norm()))).unwrap()
    };
    let (b1, b2) = (best_along(0), best_along(1));
    if (cross(b1, b2).abs() - cell).abs() > 1e-6 * cell {
        return Err(CrosstalkError::NoFeatureFound("could not pick an axis-aligned primitive cell".into()));
    }
    let basis = Matrix2::from_columns(&[b1, b2]);
    let inv = basis.try_inverse().ok_or_else(|| CrosstalkError::NoFeatureFound("degenerate lattice basis".into()))?;

    // least squares over all points with their integer coordinates
    let n = pts.len();
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let idx = (inv * (pts[i] - origin)).map(f64::round);
        match j {
            0 => 1.0,
            1 => idx[0],
            _ => idx[1],
        }
    });
    let svd = design.clone().svd(true, true);
    let mut coef = [DVector::zeros(3), DVector::zeros(3)];
    for (axis, c) in coef.iter_mut().enumerate() {
        let y = DVector::from_iterator(n, pts.iter().map(|p| p[axis]));
        *c = svd.solve(&y, 1e-12).map_err(|e| CrosstalkError::NoFeatureFound(e.to_string()))?;
    }
    let rank = svd.rank(1e-9);
    if rank < 3 {
        return Err(CrosstalkError::NoFeatureFound("lattice points do not span two directions".into()));
    }
    let fitted_origin = Vector2::new(coef[0][0], coef[1][0]);
    let basis = Matrix2::new(coef[0][1], coef[0][2], coef[1][1], coef[1][2]);
    let mut ss = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let r = p - (fitted_origin + basis * Vector2::new(design[(i, 1)], design[(i, 2)]));
        ss += r.norm_squared();
    }
    Ok(Lattice { origin: fitted_origin, basis, rms_residual: (ss / n as f64).sqrt() })
}
