use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CrosstalkError, CrosstalkModel};
use crate::rng::{derive_seed, rng_from_seed};

/// Feature shapes and readout imperfections of a [`VirtualDevice`]. Widths are
/// in flux quanta; signals are normalized transmission with baseline 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub dip_width: f64,
    pub dip_depth: f64,
    pub spot_width: f64,
    pub spot_depth: f64,
    pub stripe_width: f64,
    pub stripe_depth: f64,
    pub noise_sigma: f64,
    /// Total shift of the coupler map between the two sweep directions,
    /// applied along the first coupler flux.
    pub hysteresis: f64,
    pub seed: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            dip_width: 0.02,
            dip_depth: 0.8,
            spot_width: 0.08,
            spot_depth: 0.9,
            stripe_width: 0.05,
            stripe_depth: 0.4,
            noise_sigma: 0.0,
            hysteresis: 0.0,
            seed: 0,
        }
    }
}

impl DeviceConfig {
    /// Noisy readout with a hysteretic coupler feature.
    pub fn realistic(seed: u64) -> Self {
        Self { noise_sigma: 0.08, hysteresis: 0.03, seed, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepDirection {
    Forward,
    Reverse,
}

/// Distance to the nearest integer.
fn wrap(x: f64) -> f64 {
    x - x.round()
}

fn lorentzian(x: f64, w: f64) -> f64 {
    1.0 / (1.0 + (x / w).powi(2))
}

/// A flux-tunable device that reports feature-level signals: resonator dips
/// at half-integer loop flux and a coupler map with a lattice of symmetry
/// points plus diagonal stripes.
#[derive(Debug, Clone)]
pub struct VirtualDevice {
    truth: CrosstalkModel,
    config: DeviceConfig,
    counter: u64,
}

impl VirtualDevice {
    pub fn new(truth: CrosstalkModel, config: DeviceConfig) -> Self {
        Self { truth, config, counter: 0 }
    }

    pub fn truth(&self) -> &CrosstalkModel {
        &self.truth
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    /// Number of measurements taken so far.
    pub fn measurements(&self) -> u64 {
        self.counter
    }

    pub fn flux(&self, v: &DVector<f64>) -> DVector<f64> {
        self.truth.flux(v)
    }

    /// Fractional flux of each loop, which fixes its persistent-current state.
    pub fn persistent_current_phase(&self, v: &DVector<f64>) -> DVector<f64> {
        self.flux(v).map(|f| f.rem_euclid(1.0))
    }

    fn noise(&mut self) -> impl FnMut() -> f64 {
        let mut rng = rng_from_seed(derive_seed(self.config.seed, self.counter));
        self.counter += 1;
        let normal = (self.config.noise_sigma > 0.0).then(|| Normal::new(0.0, self.config.noise_sigma).expect("finite sigma"));
        move || normal.map_or(0.0, |n| n.sample(&mut rng))
    }

    /// Noise-free resonator signal of one loop at the given flux.
    pub fn trace_signal(&self, flux: f64) -> f64 {
        1.0 - self.config.dip_depth * lorentzian(wrap(flux - 0.5), self.config.dip_width)
    }

    /// Noise-free coupler map signal at coupler fluxes `(a, b)`.
    pub fn map_signal(&self, a: f64, b: f64) -> f64 {
        let c = &self.config;
        let da = wrap(a - 0.5);
        let db = wrap(b - 0.5);
        let spot = lorentzian((da * da + db * db).sqrt(), c.spot_width);
        let s = (std::f64::consts::PI * (a - b - 0.5)).sin() / (std::f64::consts::PI * c.stripe_width);
        let stripe = 1.0 / (1.0 + s * s);
        1.0 - c.spot_depth * spot - c.stripe_depth * stripe
    }

    /// Resonator trace of `loop_idx` at each voltage vector.
    pub fn measure_trace(&mut self, loop_idx: usize, voltages: &[DVector<f64>]) -> Vec<f64> {
        let mut noise = self.noise();
        let out: Vec<f64> = voltages
            .iter()
            .map(|v| {
                let f = (self.truth.c.row(loop_idx) * v)[0] + self.truth.f0[loop_idx];
                self.trace_signal(f) + noise()
            })
            .collect();
        out
    }

    /// Trace of `loop_idx` along `base + t dir` for each `t`.
    pub fn measure_trace_along(
        &mut self,
        loop_idx: usize,
        base: &DVector<f64>,
        dir: &DVector<f64>,
        ts: &[f64],
    ) -> Vec<f64> {
        let vs: Vec<DVector<f64>> = ts.iter().map(|&t| base + dir * t).collect();
        self.measure_trace(loop_idx, &vs)
    }

    /// Coupler map over `base + s dir1 + t dir2`; entry `(i, j)` is at
    /// `(grid1[i], grid2[j])`. `grid1` is the fast axis.
    #[allow(clippy::too_many_arguments)]
    pub fn measure_coupler_map(
        &mut self,
        base: &DVector<f64>,
        dir1: &DVector<f64>,
        dir2: &DVector<f64>,
        grid1: &[f64],
        grid2: &[f64],
        direction: SweepDirection,
    ) -> Result<DMatrix<f64>, CrosstalkError> {
        let [ca, cb] = self.truth.coupler.ok_or(CrosstalkError::NoCoupler)?;
        let shift = match direction {
            SweepDirection::Forward => 0.5 * self.config.hysteresis,
            SweepDirection::Reverse => -0.5 * self.config.hysteresis,
        };
        let f_base = self.flux(base);
        let d1 = &self.truth.c * dir1;
        let d2 = &self.truth.c * dir2;
        let mut noise = self.noise();
        let mut map = DMatrix::zeros(grid1.len(), grid2.len());
        for (j, &t) in grid2.iter().enumerate() {
            for (i, &s) in grid1.iter().enumerate() {
                let a = f_base[ca] + s * d1[ca] + t * d2[ca] + shift;
                let b = f_base[cb] + s * d1[cb] + t * d2[cb];
                map[(i, j)] = self.map_signal(a, b) + noise();
            }
        }
        Ok(map)
    }

    /// Coupler map over raw coupler voltages with the other loops at `others`.
    pub fn measure_coupler_map_raw(
        &mut self,
        others: &DVector<f64>,
        v1_grid: &[f64],
        v2_grid: &[f64],
        direction: SweepDirection,
    ) -> Result<DMatrix<f64>, CrosstalkError> {
        let [ca, cb] = self.truth.coupler.ok_or(CrosstalkError::NoCoupler)?;
        let n = self.truth.n_loops();
        let mut base = others.clone();
        base[ca] = 0.0;
        base[cb] = 0.0;
        let e = |k: usize| DVector::from_fn(n, |i, _| if i == k { 1.0 } else { 0.0 });
        self.measure_coupler_map(&base, &e(ca), &e(cb), v1_grid, v2_grid, direction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosstalk::features::{find_dips, find_spots, fit_lattice};

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn identity_trace_dips_at_half_integers() {
        let mut dev = VirtualDevice::new(CrosstalkModel::identity(5), DeviceConfig::default());
        let xs = linspace(0.0, 2.0, 2001);
        let ys = dev.measure_trace_along(0, &DVector::zeros(5), &DVector::from_fn(5, |i, _| (i == 0) as u8 as f64), &xs);
        let dips = find_dips(&xs, &ys).unwrap();
        let pos: Vec<f64> = dips.iter().map(|d| d.position).collect();
        assert_eq!(pos.len(), 2);
        assert!((pos[0] - 0.5).abs() < 1e-3 * 1e-3);
        assert!((pos[1] - 1.5).abs() < 1e-3 * 1e-3);
    }

    #[test]
    fn off_diagonal_step_shifts_dips() {
        let mut c = DMatrix::identity(5, 5);
        c[(0, 2)] = 0.07;
        let model = CrosstalkModel::new(c, DVector::zeros(5), CrosstalkModel::identity(5).labels, Some([3, 4])).unwrap();
        let mut dev = VirtualDevice::new(model, DeviceConfig::default());
        let xs = linspace(0.0, 2.0, 2001);
        let e0 = DVector::from_fn(5, |i, _| (i == 0) as u8 as f64);
        let before = find_dips(&xs, &dev.measure_trace_along(0, &DVector::zeros(5), &e0, &xs)).unwrap();
        let stepped = DVector::from_fn(5, |i, _| (i == 2) as u8 as f64);
        let after = find_dips(&xs, &dev.measure_trace_along(0, &stepped, &e0, &xs)).unwrap();
        assert!((before[0].position - after[0].position - 0.07).abs() < 1e-9);
    }

    #[test]
    fn flux_model_is_exact_and_reproducible() {
        let model = CrosstalkModel::device_preset();
        let mut dev = VirtualDevice::new(model.clone(), DeviceConfig { noise_sigma: 0.05, seed: 9, ..Default::default() });
        let v = DVector::from_vec(vec![0.3, -1.2, 0.8, 2.0, -0.4]);
        assert_eq!(dev.flux(&v), &model.c * &v + &model.f0);
        let xs = linspace(0.0, 1.0, 50);
        let e = DVector::from_fn(5, |i, _| (i == 1) as u8 as f64);
        let a = dev.measure_trace_along(1, &v, &e, &xs);
        let b = dev.measure_trace_along(1, &v, &e, &xs);
        assert_ne!(a, b);
        let mut fresh = VirtualDevice::new(model.clone(), *dev.config());
        assert_eq!(fresh.measure_trace_along(1, &v, &e, &xs), a);
        let mut quiet = VirtualDevice::new(model, DeviceConfig::default());
        let q1 = quiet.measure_trace_along(1, &v, &e, &xs);
        let q2 = quiet.measure_trace_along(1, &v, &e, &xs);
        assert_eq!(q1, q2);
    }

    #[test]
    fn full_quantum_step_preserves_persistent_current_state() {
        let model = CrosstalkModel::device_preset();
        let m = model.c.clone().try_inverse().unwrap();
        let dev = VirtualDevice::new(model, DeviceConfig::default());
        let u = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.45]);
        let before = dev.persistent_current_phase(&(&m * &u));
        for j in 0..5 {
            let mut stepped = u.clone();
            stepped[j] += 1.0;
            let after = dev.persistent_current_phase(&(&m * &stepped));
            for i in 0..5 {
                let d = wrap(after[i] - before[i]);
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_lattice_follows_coupler_block() {
        let grid = linspace(-1.5, 1.5, 151);
        let mut dev = VirtualDevice::new(CrosstalkModel::identity(5), DeviceConfig::default());
        let map = dev.measure_coupler_map_raw(&DVector::zeros(5), &grid, &grid, SweepDirection::Forward).unwrap();
        let spots = find_spots(&grid, &grid, &map).unwrap();
        let lat = fit_lattice(&spots.iter().map(|s| s.position).collect::<Vec<_>>()).unwrap();
        assert!((lat.basis - nalgebra::Matrix2::identity()).amax() < 1e-6);
        for s in &spots {
            assert!((wrap(s.position[0] - 0.5)).abs() < 1e-6 && (wrap(s.position[1] - 0.5)).abs() < 1e-6);
        }

        let shear = 0.12;
        let mut c = DMatrix::identity(5, 5);
        c[(3, 4)] = shear;
        let model = CrosstalkModel::new(c, DVector::zeros(5), CrosstalkModel::identity(5).labels, Some([3, 4])).unwrap();
        let mut dev = VirtualDevice::new(model, DeviceConfig::default());
        let map = dev.measure_coupler_map_raw(&DVector::zeros(5), &grid, &grid, SweepDirection::Forward).unwrap();
        let spots = find_spots(&grid, &grid, &map).unwrap();
        let lat = fit_lattice(&spots.iter().map(|s| s.position).collect::<Vec<_>>()).unwrap();
        let p = lat.basis.try_inverse().unwrap();
        let got = p[(0, 1)] / p[(1, 1)];
        assert!((got - shear).abs() < 0.005 * shear, "{got}");
    }

    #[test]
    fn hysteresis_depends_on_sweep_direction() {
        let h = 0.04;
        let grid = linspace(0.0, 1.0, 101);
        let mut dev = VirtualDevice::new(CrosstalkModel::identity(5), DeviceConfig { hysteresis: h, ..Default::default() });
        let fwd = dev.measure_coupler_map_raw(&DVector::zeros(5), &grid, &grid, SweepDirection::Forward).unwrap();
        let rev = dev.measure_coupler_map_raw(&DVector::zeros(5), &grid, &grid, SweepDirection::Reverse).unwrap();
        let pf = find_spots(&grid, &grid, &fwd).unwrap()[0].position;
        let pr = find_spots(&grid, &grid, &rev).unwrap()[0].position;
        assert!((pr[0] - pf[0] - h).abs() < 1e-6);
        assert!((pr[1] - pf[1]).abs() < 1e-6);
        let mut none = VirtualDevice::new(CrosstalkModel::identity(5), DeviceConfig::default());
        let a = none.measure_coupler_map_raw(&DVector::zeros(5), &grid, &grid, SweepDirection::Forward).unwrap();
        let b = none.measure_coupler_map_raw(&DVector::zeros(5), &grid, &grid, SweepDirection::Reverse).unwrap();
        assert_eq!(a, b);
    }
}
