//! The limiting slow SDE: simulation, Ornstein-Uhlenbeck analytics and
//! distributional comparison against the full fast-slow system.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{FastSlowSystem, FastSpace};
use crate::error::{Error, Result};
use crate::homogenize::HomogenizedCoefficients;
use crate::integrate::{mean_and_stderr, run_ensemble, EnsembleResult, EnsembleTask, InitialFast, TimeGrid, Trajectory};
use crate::rng::{NoiseStream, SeedSpec};

/// `out = f(x)`
pub type SlowFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// `dX = F(X) dt + A(X) dW` with `A` a row-major `d×d` matrix.
#[derive(Clone)]
pub struct HomogenizedSDE {
    d: usize,
    drift: SlowFn,
    diffusion: SlowFn,
    label: String,
}

impl std::fmt::Debug for HomogenizedSDE {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HomogenizedSDE").field("d", &self.d).field("label", &self.label).finish()
    }
}

impl HomogenizedSDE {
    pub fn new<F, A>(d: usize, drift: F, diffusion: A) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        A: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { d, drift: Arc::new(drift), diffusion: Arc::new(diffusion), label: "closure".into() }
    }

    /// `dX = −X dt + σ dW` in one dimension.
    pub fn ornstein_uhlenbeck(sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::invalid(format!("sigma2 must be nonnegative, got {sigma2}")));
        }
        let sigma = sigma2.sqrt();
        let mut model = Self::new(1, |x, out| out[0] = -x[0], move |_, out| out[0] = sigma);
        model.label = format!("ou(sigma2={sigma2})");
        Ok(model)
    }

    /// Piecewise-linear interpolation of tabulated coefficients.
    pub fn from_table(table: HomogenizedCoefficients) -> Result<Self> {
        let d = table.d;
        let valid: Vec<usize> = (0..table.len()).filter(|&i| table.failures[i].is_none()).collect();
        if valid.is_empty() {
            return Err(Error::InsufficientData("no valid tabulated points".into()));
        }
        for &i in &valid {
            if table.f_values[i].iter().chain(&table.a_values[i]).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "tabulated coefficient", time: 0.0 });
            }
        }
        let table = Arc::new(table);
        let (tf, ta) = (table.clone(), table);
        let mut model = Self::new(
            d,
            move |x, out| match tf.drift_at(x) {
                Ok(v) => out.copy_from_slice(&v),
                Err(_) => out.fill(f64::NAN),
            },
            move |x, out| match ta.diffusion_at(x) {
                Ok(v) => out.copy_from_slice(&v),
                Err(_) => out.fill(f64::NAN),
            },
        );
        model.label = "tabulated".into();
        Ok(model)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
}

/// Euler-Maruyama ensemble of the limiting SDE; member `i` uses `seed.member(i)`.
pub fn simulate_homogenized(
    model: &HomogenizedSDE,
    xi: &[f64],
    grid: &TimeGrid,
    n: usize,
    seed: SeedSpec,
) -> Result<EnsembleResult> {
    let d = model.d;
    if xi.len() != d {
        return Err(Error::DimensionMismatch { field: "xi", expected: d, found: xi.len() });
    }
    if n == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    if grid.dt > grid.duration {
        return Err(Error::invalid("step exceeds the horizon"));
    }
    let steps = grid.steps()?;
    let sqrt_dt = grid.dt.sqrt();
    let members: Vec<Result<Trajectory>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let member_seed = seed.member(i as u64);
            let mut noise = NoiseStream::new(member_seed, d);
            let mut traj = Trajectory::with_capacity(d, 0, steps / grid.record_every + 1, grid, member_seed, FastSpace::Unbounded, 0);
            let mut x = xi.to_vec();
            let mut f = vec![0.0; d];
            let mut a = vec![0.0; d * d];
            let mut z = vec![0.0; d];
            traj.push(0, &x, &[]);
            for step in 1..=steps {
                model.drift(&x, &mut f);
                model.diffusion(&x, &mut a);
                noise.fill(&mut z);
                for r in 0..d {
                    let kick: f64 = (0..d).map(|c| a[r * d + c] * z[c]).sum();
                    x[r] += grid.dt * f[r] + sqrt_dt * kick;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Member {
                        index: i,
                        source: Box::new(Error::NonFinite { what: "limit state", time: step as f64 * grid.dt }),
                    });
                }
                if step % grid.record_every == 0 {
                    traj.push(step, &x, &[]);
                }
            }
            Ok(traj)
        })
        .collect();
    Ok(EnsembleResult { members: members.into_iter().collect::<Result<Vec<_>>>()?, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OUAnalytic {
    pub sigma2: f64,
    pub xi: f64,
}

/// Mean `e^{−t}ξ` and variance `(σ²/2)(1 − e^{−2t})` of `dX = −X dt + σ dW`.
pub fn ou_moments(ou: &OUAnalytic, t: f64) -> Result<(f64, f64)> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    if !(ou.sigma2 >= 0.0) {
        return Err(Error::invalid("sigma2 must be nonnegative"));
    }
    Ok(((-t).exp() * ou.xi, 0.5 * ou.sigma2 * (-(-2.0 * t).exp_m1())))
}

pub const MIN_SAMPLE: usize = 30;

/// What a sample is compared against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Sample(&'a [f64]),
    Normal { mean: f64, variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub t: f64,
    pub ks: f64,
    /// `mean(sample) − mean(reference)`
    pub mean_error: f64,
    /// `var(sample) − var(reference)`
    pub variance_error: f64,
    pub sample_size: usize,
    /// `None` for an analytic reference.
    pub reference_size: Option<usize>,
    /// KS critical value at the 5% level.
    pub ks_critical: f64,
}

fn sample_moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("sample contains NaN"));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample KS statistic against `N(mean, variance)`; a zero variance is a point mass.
pub fn ks_normal(sample: &[f64], mean: f64, variance: f64) -> Result<f64> {
    let s = sorted(sample)?;
    let n = s.len() as f64;
    // CDF at x and its left limit
    let cdf: Box<dyn Fn(f64) -> (f64, f64)> = if variance > 0.0 {
        let dist = Normal::new(mean, variance.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        Box::new(move |x| {
            let f = dist.cdf(x);
            (f, f)
        })
    } else {
        Box::new(move |x| (if x >= mean { 1.0 } else { 0.0 }, if x > mean { 1.0 } else { 0.0 }))
    };
    let mut d = 0.0f64;
    let mut k = 0;
    while k < s.len() {
        let x = s[k];
        let below = k as f64 / n;
        while k < s.len() && s[k] == x {
            k += 1;
        }
        let (f, f_left) = cdf(x);
        d = d.max((k as f64 / n - f).abs()).max((below - f_left).abs());
    }
    Ok(d)
}

/// KS statistic and moment discrepancies of `sample` against `reference`.
pub fn compare_distributions(sample: &[f64], reference: Reference<'_>, t: f64) -> Result<DistributionReport> {
    if sample.len() < MIN_SAMPLE {
        return Err(Error::UndersizedSample { found: sample.len(), min: MIN_SAMPLE });
    }
    let (mean, var) = sample_moments(sample);
    let n = sample.len() as f64;
    match reference {
        Reference::Sample(other) => {
            if other.len() < MIN_SAMPLE {
                return Err(Error::UndersizedSample { found: other.len(), min: MIN_SAMPLE });
            }
            let (rm, rv) = sample_moments(other);
            let m = other.len() as f64;
            Ok(DistributionReport {
                t,
                ks: ks_two_sample(sample, other)?,
                mean_error: mean - rm,
                variance_error: var - rv,
                sample_size: sample.len(),
                reference_size: Some(other.len()),
                ks_critical: 1.36 * ((n + m) / (n * m)).sqrt(),
            })
        }
        Reference::Normal { mean: rm, variance: rv } => Ok(DistributionReport {
            t,
            ks: ks_normal(sample, rm, rv)?,
            mean_error: mean - rm,
            variance_error: var - rv,
            sample_size: sample.len(),
            reference_size: None,
            ks_critical: 1.36 / n.sqrt(),
        }),
    }
}

/// `f(x) = amplitude · exp(−|x − center|²)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub center: Vec<f64>,
    pub amplitude: f64,
}

impl GaussianBump {
    pub fn new(center: Vec<f64>) -> Self {
        Self { center, amplitude: 1.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum();
        self.amplitude * (-r2).exp()
    }
}

/// Full-system ensemble settings for a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSetup {
    pub xi: Vec<f64>,
    pub initial: InitialFast,
    /// Full-system step in fast time; the slow-time step is `dt_fast·ε²`.
    pub dt_fast: f64,
    /// Step of the limiting SDE.
    pub dt_limit: f64,
    /// Spacing of recorded states; every time in the grid must lie on it.
    pub record_spacing: f64,
    pub members: usize,
}

/// Slow-time grid for the full system at `epsilon`: the largest step not above
/// `dt_fast·ε²` that divides `record_spacing`.
pub fn full_system_grid(epsilon: f64, dt_fast: f64, record_spacing: f64, horizon: f64) -> TimeGrid {
    let target = dt_fast * epsilon * epsilon;
    let k = (record_spacing / target - 1e-9).ceil().max(1.0) as usize;
    TimeGrid::new(horizon, record_spacing / k as f64).recording_every(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub t: f64,
    pub observable: usize,
    pub full_mean: f64,
    pub full_stderr: f64,
    pub limit_mean: f64,
    pub limit_stderr: f64,
    /// `|full_mean − limit_mean|`
    pub error: f64,
    pub error_stderr: f64,
    pub failure: Option<String>,
}

fn record_index(times: &[f64], t: f64) -> Result<usize> {
    let spacing = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    let k = (t / spacing).round() as usize;
    if k >= times.len() || (times[k] - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(Error::invalid(format!("time {t} is not on the record grid")));
    }
    Ok(k)
}

fn observable_means(ens: &EnsembleResult, f: &GaussianBump, idx: usize) -> (f64, f64) {
    let v: Vec<f64> = ens.members.iter().map(|m| f.eval(m.x(idx))).collect();
    mean_and_stderr(&v)
}

/// Weak error `|𝔼f(X^ε(t)) − 𝔼f(X(t))|` over `ε × t × f`. An ensemble that fails at
/// some `ε` marks all of its cells as failed; the table is still returned.
pub fn semigroup_convergence(
    system: &FastSlowSystem,
    model: &HomogenizedSDE,
    observables: &[GaussianBump],
    epsilons: &[f64],
    t_grid: &[f64],
    setup: &ConvergenceSetup,
    seed: SeedSpec,
) -> Result<Vec<ConvergenceRow>> {
    if observables.is_empty() {
        return Err(Error::invalid("at least one observable is required"));
    }
    if observables.iter().any(|f| f.amplitude == 0.0 || f.center.len() != system.d()) {
        return Err(Error::invalid("observables must be nonzero bumps of the slow dimension"));
    }
    if epsilons.is_empty() || t_grid.is_empty() || t_grid.iter().any(|t| *t < 0.0) {
        return Err(Error::invalid("epsilon and time grids must be nonempty, times nonnegative"));
    }
    let horizon = t_grid.iter().copied().fold(0.0, f64::max);
    if !(horizon > 0.0) {
        return Err(Error::invalid("time grid needs a positive horizon"));
    }
    let limit = simulate_limit(model, setup, horizon, seed.child(0))?;
    let mut rows = Vec::new();
    for (k, &eps) in epsilons.iter().enumerate() {
        let full = system.with_epsilon(eps).and_then(|sys| {
            run_full_ensemble(&sys, setup, horizon, seed.child(k as u64 + 1))
        });
        rows.extend(weak_error_rows(eps, full.as_ref().map_err(|e| e.to_string()), &limit, observables, t_grid)?);
    }
    Ok(rows)
}

/// The limit ensemble used by [`semigroup_convergence`], recorded on `setup.record_spacing`.
pub fn simulate_limit(model: &HomogenizedSDE, setup: &ConvergenceSetup, horizon: f64, seed: SeedSpec) -> Result<EnsembleResult> {
    let every = ((setup.record_spacing / setup.dt_limit).round() as usize).max(1);
    let grid = TimeGrid::new(horizon, setup.record_spacing / every as f64).recording_every(every);
    simulate_homogenized(model, &setup.xi, &grid, setup.members, seed)
}

/// The full-system ensemble used by [`semigroup_convergence`] at the system's ε.
pub fn run_full_ensemble(system: &FastSlowSystem, setup: &ConvergenceSetup, horizon: f64, seed: SeedSpec) -> Result<EnsembleResult> {
    let task = EnsembleTask {
        system: system.clone(),
        xi: setup.xi.clone(),
        initial: setup.initial.clone(),
        grid: full_system_grid(system.epsilon(), setup.dt_fast, setup.record_spacing, horizon),
    };
    run_ensemble(&task, setup.members, seed)
}

/// Error rows at one ε from precomputed ensembles. A failed full ensemble yields
/// rows that carry the failure message and NaN errors.
pub fn weak_error_rows(
    epsilon: f64,
    full: std::result::Result<&EnsembleResult, String>,
    limit: &EnsembleResult,
    observables: &[GaussianBump],
    t_grid: &[f64],
) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::new();
    for &t in t_grid {
        for (o, f) in observables.iter().enumerate() {
            let li = record_index(limit.times(), t)?;
            let (limit_mean, limit_stderr) = observable_means(limit, f, li);
            let mut row = ConvergenceRow {
                epsilon,
                t,
                observable: o,
                full_mean: f64::NAN,
                full_stderr: f64::NAN,
                limit_mean,
                limit_stderr,
                error: f64::NAN,
                error_stderr: f64::NAN,
                failure: None,
            };
            match &full {
                Ok(ens) => {
                    let fi = record_index(ens.times(), t)?;
                    let (m, s) = observable_means(ens, f, fi);
                    row.full_mean = m;
                    row.full_stderr = s;
                    row.error = (m - limit_mean).abs();
                    row.error_stderr = s.hypot(limit_stderr);
                }
                Err(e) => row.failure = Some(e.clone()),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSpec;

    #[test]
    fn zero_dynamics_stay_put() {
        let model = HomogenizedSDE::new(2, |_, o| o.fill(0.0), |_, o| o.fill(0.0));
        let ens = simulate_homogenized(&model, &[1.0, -2.0], &TimeGrid::new(1.0, 0.01), 3, SeedSpec::new(0)).unwrap();
        for m in &ens.members {
            assert!(m.x_path.chunks(2).all(|x| x == [1.0, -2.0]));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let model = HomogenizedSDE::ornstein_uhlenbeck(0.5).unwrap();
        let grid = TimeGrid::new(1.0, 0.01);
        let a = simulate_homogenized(&model, &[0.0], &grid, 4, SeedSpec::new(9)).unwrap();
        let b = simulate_homogenized(&model, &[0.0], &grid, 4, SeedSpec::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ou_moments_examples() {
        let ou = OUAnalytic { sigma2: 0.126, xi: 0.0 };
        assert_eq!(ou_moments(&OUAnalytic { sigma2: 0.126, xi: 2.0 }, 0.0).unwrap(), (2.0, 0.0));
        let (m, v) = ou_moments(&ou, 10.0).unwrap();
        assert_eq!(m, 0.0);
        assert!((v - 0.063).abs() < 1e-9);
        let (_, v) = ou_moments(&ou, 1e3).unwrap();
        assert!((v - 0.063).abs() < 1e-15);
        assert!(matches!(ou_moments(&ou, -1.0), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn ou_simulation_matches_moments() {
        let model = HomogenizedSDE::ornstein_uhlenbeck(0.126).unwrap();
        let ens = simulate_homogenized(&model, &[1.0], &TimeGrid::new(1.0, 1e-3).recording_every(100), 4096, SeedSpec::new(4)).unwrap();
        let ou = OUAnalytic { sigma2: 0.126, xi: 1.0 };
        for (i, &t) in ens.times().iter().enumerate().skip(1) {
            let v = ens.slow_values(i, 0);
            let (m, se) = mean_and_stderr(&v);
            let (em, ev) = ou_moments(&ou, t).unwrap();
            // Euler bias at dt = 1e-3 is far below the Monte-Carlo error
            assert!((m - em).abs() < 3.0 * se, "t={t}: mean {m} vs {em}");
            let n = v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            let var_se = ev * (2.0 / (n - 1.0)).sqrt();
            assert!((var - ev).abs() < 3.0 * var_se, "t={t}: var {var} vs {ev}");
        }
    }

    #[test]
    fn identical_samples() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let r = compare_distributions(&v, Reference::Sample(&v), 1.0).unwrap();
        assert_eq!(r.ks, 0.0);
        assert_eq!(r.mean_error, 0.0);
    }

    #[test]
    fn undersized_samples_rejected() {
        let v = vec![0.0; 10];
        assert!(matches!(
            compare_distributions(&v, Reference::Normal { mean: 0.0, variance: 1.0 }, 0.0),
            Err(Error::UndersizedSample { found: 10, min: 30 })
        ));
    }

    fn normals(seed: SeedSpec, n: usize) -> Vec<f64> {
        let mut s = NoiseStream::new(seed, 1);
        let mut z = [0.0];
        (0..n)
            .map(|_| {
                s.fill(&mut z);
                z[0]
            })
            .collect()
    }

    #[test]
    fn shifted_normal_mean_error() {
        let v = normals(SeedSpec::new(1), 5000);
        let r = compare_distributions(&v, Reference::Normal { mean: 1.0, variance: 1.0 }, 0.0).unwrap();
        assert!((r.mean_error + 1.0).abs() < 0.06);
        assert!(r.ks > 0.3);
        let same = compare_distributions(&v, Reference::Normal { mean: 0.0, variance: 1.0 }, 0.0).unwrap();
        assert!(same.ks < same.ks_critical * 1.5);
    }

    #[test]
    fn two_sample_ks_calibration() {
        let trials = 40;
        let n = 10_000;
        let passes = (0..trials)
            .filter(|&k| {
                let a = normals(SeedSpec::with_stream(3, 2 * k), n);
                let b = normals(SeedSpec::with_stream(3, 2 * k + 1), n);
                let r = compare_distributions(&a, Reference::Sample(&b), 0.0).unwrap();
                r.ks < 1.36 * (2.0 / n as f64).sqrt()
            })
            .count();
        assert!(passes as f64 >= 0.9 * trials as f64, "{passes}/{trials}");
    }

    #[test]
    fn ks_handles_ties_and_point_masses() {
        let a = vec![1.0; 40];
        let b: Vec<f64> = (0..40).map(|i| if i < 20 { 1.0 } else { 2.0 }).collect();
        assert_eq!(ks_two_sample(&a, &b).unwrap(), 0.5);
        assert_eq!(ks_normal(&a, 1.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn full_system_grid_divides_record_spacing() {
        let g = full_system_grid(0.2, 1e-3, 0.01, 10.0);
        assert!(g.dt <= 1e-3 * 0.04 + 1e-18);
        assert_eq!(g.record_every as f64 * g.dt, 0.01);
        assert_eq!(g.steps().unwrap(), 1000 * g.record_every);
    }

    #[test]
    fn tabulated_model_interpolates() {
        let table = HomogenizedCoefficients {
            d: 1,
            x_grid: vec![vec![-1.0], vec![1.0]],
            f_values: vec![vec![1.0], vec![-1.0]],
            f_stderr: vec![vec![0.0]; 2],
            a0_values: vec![vec![0.25]; 2],
            a0_stderr: vec![vec![0.0]; 2],
            a_values: vec![vec![0.5]; 2],
            tail_flags: vec![false; 2],
            failures: vec![None; 2],
            diagnostics: vec![None; 2],
        };
        let model = HomogenizedSDE::from_table(table).unwrap();
        let mut out = [0.0];
        model.drift(&[0.5], &mut out);
        assert!((out[0] + 0.5).abs() < 1e-15);
        model.diffusion(&[3.0], &mut out);
        assert_eq!(out[0], 0.5);
    }
}
