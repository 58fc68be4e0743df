use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::features::{find_dips, find_spots, fit_lattice, Dip};
use super::{residual_metrics, serde_rows, serde_vec, CrosstalkError, ResidualMetrics, SweepDirection, VirtualDevice};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub iterations: usize,
    /// Expected diagonal crosstalk (flux quanta per volt) for the first raw-voltage sweeps.
    pub initial_diagonal_guess: f64,
    /// Span of each 1D trace in estimated flux quanta.
    pub trace_span: f64,
    pub trace_points: usize,
    /// Span of the coupler map along each axis in estimated flux quanta.
    pub map_span: f64,
    pub map_points: usize,
    /// Half width of the local window around one symmetry point.
    pub window_half_span: f64,
    pub window_points: usize,
    /// Step applied to a non-primary loop, in flux quanta.
    pub step_quanta: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            iterations: 6,
            initial_diagonal_guess: 1.0,
            trace_span: 2.5,
            trace_points: 1001,
            map_span: 3.0,
            map_points: 121,
            window_half_span: 0.3,
            window_points: 41,
            step_quanta: 1.0,
        }
    }
}

impl CalibrationConfig {
    fn validate(&self) -> Result<(), CrosstalkError> {
        let bad = |m: &str| Err(CrosstalkError::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.initial_diagonal_guess > 0.0) {
            return bad("initial diagonal guess must be positive");
        }
        if !(self.trace_span >= 1.2 && self.map_span >= 1.2) {
            return bad("sweeps must cover at least 1.2 flux quanta");
        }
        if self.trace_points < 50 || self.map_points < 20 || self.window_points < 11 {
            return bad("too few sweep points");
        }
        if !(self.window_half_span > 0.0 && self.window_half_span < 0.5) {
            return bad("window half span must lie in (0, 0.5)");
        }
        if !(self.step_quanta > 0.0) {
            return bad("step must be positive");
        }
        Ok(())
    }
}

/// Correction after one iteration together with what was measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub iteration: usize,
    /// `M` in `V = M u`; virtual coordinate `u_j` moves loop `j` only.
    #[serde(with = "serde_rows")]
    pub correction: DMatrix<f64>,
    /// Measured effective response `C M_prev` that this iteration inverted.
    #[serde(with = "serde_rows")]
    pub estimated_response: DMatrix<f64>,
    /// Flux offsets modulo one flux quantum.
    #[serde(with = "serde_vec")]
    pub f0_estimate: DVector<f64>,
    pub metrics: ResidualMetrics,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn centered(half: f64, n: usize) -> Vec<f64> {
    linspace(-half, half, n)
}

fn unit(n: usize, k: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| if i == k { 1.0 } else { 0.0 })
}

/// Slope of dip position against dip index: one period in sweep units.
fn dip_period(dips: &[Dip], guess: f64) -> Result<f64, CrosstalkError> {
    if dips.len() < 2 {
        return Err(CrosstalkError::NoFeatureFound(format!("{} dips, need two to measure a period", dips.len())));
    }
    let x0 = dips[0].position;
    let spacing = dips.windows(2).map(|w| w[1].position - w[0].position).fold(f64::INFINITY, f64::min);
    let spacing = if spacing > 0.3 * guess { spacing } else { guess };
    let ks: Vec<f64> = dips.iter().map(|d| ((d.position - x0) / spacing).round()).collect();
    let n = ks.len() as f64;
    let (mk, mx) = (ks.iter().sum::<f64>() / n, dips.iter().map(|d| d.position).sum::<f64>() / n);
    let sxy: f64 = ks.iter().zip(dips).map(|(k, d)| (k - mk) * (d.position - mx)).sum();
    let sxx: f64 = ks.iter().map(|k| (k - mk).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CrosstalkError::NoFeatureFound("dips are not separated".into()));
    }
    Ok(sxy / sxx)
}

/// Mean displacement of the dips in `after` relative to `before`, reduced to
/// within half a period.
fn dip_shift(before: &[Dip], after: &[Dip], period: f64) -> f64 {
    let wrap = |x: f64| x - (x / period).round() * period;
    let s0 = wrap(after[0].position - before[0].position);
    let mut acc = 0.0;
    let mut count = 0;
    for a in after {
        let b = before
            .iter()
            .min_by(|p, q| (a.position - s0 - p.position).abs().total_cmp(&(a.position - s0 - q.position).abs()))
            .unwrap();
        let d = a.position - b.position;
        if (d - s0).abs() < 0.25 * period {
            acc += d;
            count += 1;
        }
    }
    if count == 0 {
        s0
    } else {
        acc / count as f64
    }
}

struct Workspace<'a> {
    device: &'a mut VirtualDevice,
    correction: DMatrix<f64>,
    config: CalibrationConfig,
    n: usize,
}

impl Workspace<'_> {
    fn direction(&self, k: usize) -> DVector<f64> {
        &self.correction * unit(self.n, k)
    }

    fn base(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.correction * u
    }

    fn trace(&mut self, loop_idx: usize, u_base: &DVector<f64>, scale: f64) -> Result<(Vec<Dip>, Vec<f64>), CrosstalkError> {
        let half = 0.5 * self.config.trace_span / scale;
        let ts: Vec<f64> = centered(half, self.config.trace_points).iter().map(|t| t + u_base[loop_idx]).collect();
        let mut base = u_base.clone();
        base[loop_idx] = 0.0;
        let (vb, dir) = (self.base(&base), self.direction(loop_idx));
        let ys = self.device.measure_trace_along(loop_idx, &vb, &dir, &ts);
        Ok((find_dips(&ts, &ys)?, ts))
    }

    fn map(
        &mut self,
        [a, b]: [usize; 2],
        u_base: &DVector<f64>,
        center: Vector2<f64>,
        half: [f64; 2],
        points: usize,
    ) -> Result<Vec<[f64; 2]>, CrosstalkError> {
        let g1: Vec<f64> = centered(half[0], points).iter().map(|t| t + center[0]).collect();
        let g2: Vec<f64> = centered(half[1], points).iter().map(|t| t + center[1]).collect();
        let mut base = u_base.clone();
        base[a] = 0.0;
        base[b] = 0.0;
        let (vb, d1, d2) = (self.base(&base), self.direction(a), self.direction(b));
        let m = self.device.measure_coupler_map(&vb, &d1, &d2, &g1, &g2, SweepDirection::Forward)?;
        Ok(find_spots(&g1, &g2, &m)?.into_iter().map(|s| s.position).collect())
    }

    /// Symmetry point nearest `center` inside a small window.
    fn window_spot(&mut self, pair: [usize; 2], u_base: &DVector<f64>, center: Vector2<f64>, scale: [f64; 2]) -> Result<Vector2<f64>, CrosstalkError> {
        let half = [self.config.window_half_span / scale[0], self.config.window_half_span / scale[1]];
        let spots = self.map(pair, u_base, center, half, self.config.window_points)?;
        spots
            .iter()
            .map(|p| Vector2::new(p[0], p[1]))
            .min_by(|p, q| (p - center).norm().total_cmp(&(q - center).norm()))
            .ok_or_else(|| CrosstalkError::NoFeatureFound("no symmetry point in window".into()))
    }
}

/// Runs the calibration loop and returns the state after every iteration.
///
/// Each iteration measures the full effective response `P = C M` in the
/// current virtual coordinates and composes `M <- M P^-1`:
/// trace periods give the trace-loop diagonals, the coupler map lattice gives
/// the coupler block, full-quantum steps of every other loop shift the trace
/// dips (trace-loop rows), and the same steps of the trace loops shift one
/// coupler symmetry point (coupler rows). The coupler block is measured
/// before the steps so every step is a full flux quantum.
pub fn calibrate(device: &mut VirtualDevice, config: &CalibrationConfig) -> Result<Vec<CalibrationState>, CrosstalkError> {
    config.validate()?;
    let truth = device.truth().clone();
    let n = truth.n_loops();
    let trace_loops = truth.trace_loops();
    let mut ws = Workspace { device, correction: DMatrix::identity(n, n), config: *config, n };
    let mut scale = vec![config.initial_diagonal_guess; n];
    let mut history = Vec::with_capacity(config.iterations);
    let zero = DVector::zeros(n);

    for iteration in 1..=config.iterations {
        let mut p = DMatrix::zeros(n, n);
        let mut f0 = DVector::zeros(n);
        let mut base_dips = vec![Vec::new(); n];

        // diagonal periodicities of the trace loops
        for &i in &trace_loops {
            let (dips, _) = ws.trace(i, &zero, scale[i])?;
            let period = dip_period(&dips, 1.0 / scale[i])?;
            p[(i, i)] = 1.0 / period;
            f0[i] = (0.5 - p[(i, i)] * dips[0].position).rem_euclid(1.0);
            base_dips[i] = dips;
        }

        // coupler block from the symmetry-point lattice
        let mut anchor = None;
        if let Some(pair @ [a, b]) = truth.coupler {
            let half = [0.5 * config.map_span / scale[a], 0.5 * config.map_span / scale[b]];
            let spots = ws.map(pair, &zero, Vector2::zeros(), half, config.map_points)?;
            let lattice = fit_lattice(&spots)?;
            let block = lattice
                .basis
                .try_inverse()
                .ok_or(CrosstalkError::SingularCorrection { iteration })?;
            p[(a, a)] = block[(0, 0)];
            p[(a, b)] = block[(0, 1)];
            p[(b, a)] = block[(1, 0)];
            p[(b, b)] = block[(1, 1)];
            let center = spots
                .iter()
                .map(|s| Vector2::new(s[0], s[1]))
                .min_by(|x, y| x.norm().total_cmp(&y.norm()))
                .unwrap();
            let phi = Vector2::new(0.5, 0.5) - block * center;
            f0[a] = phi[0].rem_euclid(1.0);
            f0[b] = phi[1].rem_euclid(1.0);
            anchor = Some((pair, block, center));
        }

        // off-diagonals of the trace-loop rows from full-quantum steps
        let step = |p: &DMatrix<f64>, j: usize| config.step_quanta / p[(j, j)];
        for &i in &trace_loops {
            let period = 1.0 / p[(i, i)];
            for j in (0..n).filter(|&j| j != i) {
                let delta = step(&p, j);
                let u = unit(n, j) * delta;
                let (dips, _) = ws.trace(i, &u, p[(i, i)])?;
                let shift = dip_shift(&base_dips[i], &dips, period);
                p[(i, j)] = -p[(i, i)] * shift / delta;
            }
        }

        // coupler rows against the trace loops from a symmetry-point shift
        if let Some((pair @ [a, b], block, center)) = anchor {
            let sc = [block[(0, 0)], block[(1, 1)]];
            let start = ws.window_spot(pair, &zero, center, sc)?;
            for &j in &trace_loops {
                let delta = step(&p, j);
                let u = unit(n, j) * delta;
                let moved = ws.window_spot(pair, &u, start, sc)?;
                let col: Vector2<f64> = -(block * (moved - start)) / delta;
                p[(a, j)] = col[0];
                p[(b, j)] = col[1];
            }
        }

        let inv = invert(&p).ok_or(CrosstalkError::SingularCorrection { iteration })?;
        ws.correction = &ws.correction * inv;
        // the composed correction makes the estimated response the identity
        scale.fill(1.0);
        history.push(CalibrationState {
            iteration,
            correction: ws.correction.clone(),
            estimated_response: p,
            f0_estimate: f0,
            metrics: residual_metrics(&truth, &ws.correction),
        });
    }
    Ok(history)
}

fn invert(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if p.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sv = p.singular_values();
    if sv.min() <= 1e-10 * sv.max() {
        return None;
    }
    p.clone().try_inverse()
}
