//! Coefficients of the homogenized slow SDE `dX = F(X) dt + A(X) dW`.
//!
//! The Monte-Carlo route evaluates the ergodic (Green-Kubo) formulas along a
//! frozen fast path; the cell-problem route in [`cell`] is an independent
//! quadrature oracle for one-dimensional fast variables on the circle.

pub mod cell;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CouplingClass, FastSlowSystem};
use crate::ergodic::{
    batch_means, birkhoff_average_vector, correlation_matrices, fit_decay_points, trapezoid,
    Average, CorrelationOptions, CorrelationSeries, DecayFit, DecayModel, FrozenFlow, LagGrid, BATCHES,
};
use crate::error::{Error, Result};
use crate::integrate::{integrate_frozen_fast, Scheme, TimeGrid, Track, Trajectory, VariationalStepper};
use crate::rng::SeedSpec;

pub use cell::{coefficients_from_cell, solve_cell_problem_1d, CellCoefficients, CellSolution, CELL_X_STEP};

/// Tail mass, relative to the accumulated integral, above which truncation is flagged.
pub const TAIL_TOLERANCE: f64 = 0.01;
/// Centering residuals beyond this many standard errors are reported.
pub const CENTERING_WARN_SE: f64 = 3.0;
/// Centering residuals beyond this many standard errors are fatal.
pub const CENTERING_FAIL_SE: f64 = 10.0;

/// Controls for the ergodic estimators. Times are fast time (ε = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorParams {
    /// Length of the averaging window after burn-in.
    pub t_birkhoff: f64,
    pub burn_in: f64,
    pub dt: f64,
    /// Spacing of the recorded base path; restart points are drawn from it.
    pub record_spacing: f64,
    /// Green-Kubo truncation horizon.
    pub t_max: f64,
    pub lag_spacing: f64,
    /// Independent noise restarts per sample point when δ > 0.
    pub noise_replicas: usize,
    /// Use every `s_stride`-th recorded point as a correlation sample.
    pub s_stride: usize,
    /// Restart the tangent flow at every `jacobian_stride`-th sample point.
    pub jacobian_stride: usize,
    /// Initial fast state of the base path.
    pub y0: Vec<f64>,
    pub seed: SeedSpec,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            t_birkhoff: 1000.0,
            burn_in: 10.0,
            dt: 1e-3,
            record_spacing: 0.1,
            t_max: 1.0,
            lag_spacing: 0.01,
            noise_replicas: 16,
            s_stride: 1,
            jacobian_stride: 10,
            y0: Vec::new(),
            seed: SeedSpec::new(0),
        }
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    let r = a / b;
    r.round() >= 1.0 && (r - r.round()).abs() < 1e-6
}

impl EstimatorParams {
    pub fn new(y0: Vec<f64>, seed: SeedSpec) -> Self {
        Self { y0, seed, ..Self::default() }
    }

    pub fn validate(&self, system: &FastSlowSystem) -> Result<()> {
        for (name, v) in [
            ("t_birkhoff", self.t_birkhoff),
            ("dt", self.dt),
            ("record_spacing", self.record_spacing),
            ("t_max", self.t_max),
            ("lag_spacing", self.lag_spacing),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.burn_in >= 0.0) {
            return Err(Error::invalid("burn_in must be nonnegative"));
        }
        if self.t_max > self.t_birkhoff / 10.0 * (1.0 + 1e-9) {
            return Err(Error::MaxLagTooLarge { max_lag: self.t_max, duration: self.t_birkhoff });
        }
        if self.y0.len() != system.m() {
            return Err(Error::DimensionMismatch { field: "y0", expected: system.m(), found: self.y0.len() });
        }
        if !is_multiple(self.record_spacing, self.dt) || !is_multiple(self.lag_spacing, self.dt) {
            return Err(Error::invalid("record_spacing and lag_spacing must be multiples of dt"));
        }
        if !is_multiple(self.t_max, self.lag_spacing) {
            return Err(Error::invalid("t_max must be a multiple of lag_spacing"));
        }
        if self.s_stride == 0 || self.jacobian_stride == 0 {
            return Err(Error::invalid("strides must be at least 1"));
        }
        Ok(())
    }

    fn lag_grid(&self) -> LagGrid {
        LagGrid::new(self.lag_spacing, self.t_max)
    }

    fn base_grid(&self) -> TimeGrid {
        let every = (self.record_spacing / self.dt).round() as usize;
        TimeGrid::new(self.burn_in + self.t_birkhoff, self.dt).recording_every(every)
    }

    fn correlation_options(&self) -> CorrelationOptions {
        CorrelationOptions {
            lags: self.lag_grid(),
            replicas: self.noise_replicas,
            burn_in: self.burn_in,
            s_stride: self.s_stride,
            seed: self.seed.child(1),
        }
    }
}

/// Base path and estimator settings at one slow point.
struct Point<'a> {
    system: &'a FastSlowSystem,
    x: &'a [f64],
    delta: f64,
    params: &'a EstimatorParams,
    base: Trajectory,
}

impl<'a> Point<'a> {
    fn new(system: &'a FastSlowSystem, x: &'a [f64], delta: f64, params: &'a EstimatorParams) -> Result<Self> {
        if x.len() != system.d() {
            return Err(Error::DimensionMismatch { field: "x", expected: system.d(), found: x.len() });
        }
        params.validate(system)?;
        let base = integrate_frozen_fast(system, x, &params.y0, delta, &params.base_grid(), params.seed)?;
        Ok(Self { system, x, delta, params, base })
    }

    fn flow(&self) -> FrozenFlow<'_> {
        FrozenFlow { system: self.system, x: self.x, delta: self.delta, dt: self.params.dt }
    }
}

/// Truncation accounting for one Green-Kubo-type integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub fit: Option<DecayFit>,
    /// Why no fit is available.
    pub fit_error: Option<String>,
    /// Fitted mass of the integral beyond `t_max` (already scaled like the value).
    pub tail: Option<f64>,
    pub tail_fraction: Option<f64>,
    /// Tail above the tolerance, or no usable fit of a summable decay.
    pub flagged: bool,
    pub non_summable: bool,
    /// Horizon at which the fitted tail falls below the tolerance.
    pub suggested_t_max: Option<f64>,
}

fn tail_report(lags: &[f64], values: &[f64], stderr: &[f64], scale: f64, integral: f64) -> TailReport {
    let t_max = *lags.last().unwrap_or(&0.0);
    // Fit |values| so that negative-signed integrands are handled the same way.
    let sign = if values.first().copied().unwrap_or(0.0) < 0.0 { -1.0 } else { 1.0 };
    let signed: Vec<f64> = values.iter().map(|v| sign * v).collect();
    match fit_decay_points(lags, &signed, stderr) {
        Err(e) => TailReport {
            fit: None,
            fit_error: Some(e.to_string()),
            tail: None,
            tail_fraction: None,
            flagged: false,
            non_summable: false,
            suggested_t_max: None,
        },
        Ok(fit) => {
            let non_summable = !fit.summable();
            let tail = fit.model.tail_beyond(t_max).map(|t| sign * scale * t);
            let tail_fraction = tail.map(|t| if integral != 0.0 { (t / integral).abs() } else { 0.0 });
            let target = TAIL_TOLERANCE * (integral / scale).abs();
            let suggested_t_max = match fit.model {
                _ if fit.degenerate || target == 0.0 => None,
                DecayModel::Exponential { amplitude, rate } if rate > 0.0 => {
                    Some(((amplitude.abs() / (rate * target)).ln() / rate).max(0.0))
                }
                DecayModel::Power { amplitude, exponent } if exponent > 1.0 => {
                    Some((target * (exponent - 1.0) / amplitude.abs()).powf(1.0 / (1.0 - exponent)))
                }
                _ => None,
            };
            TailReport {
                flagged: non_summable || tail_fraction.is_some_and(|f| f > TAIL_TOLERANCE),
                fit: Some(fit),
                fit_error: None,
                tail,
                tail_fraction,
                non_summable,
                suggested_t_max,
            }
        }
    }
}

/// Symmetric square root of `½(A₀ + A₀ᵀ)` with negative eigenvalues clipped to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSqrt {
    /// Row-major `d×d`.
    pub sqrt: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues below `−1e-8` that were clipped.
    pub clipped: usize,
}

pub fn symmetric_sqrt(a0: &[f64], d: usize) -> Result<MatrixSqrt> {
    if a0.len() != d * d {
        return Err(Error::DimensionMismatch { field: "A0", expected: d * d, found: a0.len() });
    }
    if a0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "diffusion matrix", time: 0.0 });
    }
    let m = DMatrix::from_row_slice(d, d, a0);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.iter().filter(|l| **l < -1e-8).count();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    let mut sqrt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            // exact symmetry
            sqrt[i * d + j] = 0.5 * (s[(i, j)] + s[(j, i)]);
        }
    }
    Ok(MatrixSqrt { sqrt, eigenvalues: eig.eigenvalues.iter().copied().collect(), clipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenKuboDiagnostics {
    /// Row-major `d×d` standard errors of `A₀`.
    pub a0_stderr: Vec<f64>,
    pub centering: Vec<Average>,
    /// Some centering residual exceeds three standard errors.
    pub centering_warning: bool,
    /// Truncation accounting for each diagonal entry.
    pub tails: Vec<TailReport>,
    pub tail_flag: bool,
    pub clipped_eigenvalues: usize,
    pub samples: usize,
    /// Correlation of `b_i` with itself, per diagonal entry.
    pub correlations: Vec<CorrelationSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenKubo {
    /// Raw Green-Kubo matrix, row-major.
    pub a0: Vec<f64>,
    /// Symmetric factor with `A·Aᵀ = ½(A₀ + A₀ᵀ)`.
    pub a: Vec<f64>,
    pub diagnostics: GreenKuboDiagnostics,
}

fn check_centering(centering: &[Average]) -> Result<bool> {
    let mut warn = false;
    for c in centering {
        let limit = CENTERING_FAIL_SE * c.stderr;
        if c.value.abs() > limit {
            return Err(Error::CenteringViolated { residual: c.value, limit });
        }
        warn |= c.value.abs() > CENTERING_WARN_SE * c.stderr;
    }
    Ok(warn)
}

/// `A₀ = 2∫₀^{t_max} C(t) dt` with `C_ij(t)` the time-averaged covariance of
/// `b_i(x, φ^s)` and `𝔼 b_j(x, φ^{t+s})`.
pub fn green_kubo_diffusion(
    system: &FastSlowSystem,
    x: &[f64],
    delta: f64,
    params: &EstimatorParams,
) -> Result<GreenKubo> {
    green_kubo_at(&Point::new(system, x, delta, params)?)
}

fn green_kubo_at(pt: &Point<'_>) -> Result<GreenKubo> {
    let (system, x, d) = (pt.system, pt.x, pt.system.d());
    let b = system.b();
    let centering = birkhoff_average_vector(|y, out| b.eval(x, y, out), d, &pt.base, pt.params.burn_in)?;
    let centering_warning = check_centering(&centering)?;

    let eval_b = |y: &[f64], out: &mut [f64]| b.eval(x, y, out);
    let opts = pt.params.correlation_options();
    let mats = correlation_matrices(&eval_b, d, &eval_b, d, &pt.base, &pt.flow(), &opts, true)?;

    let mut a0 = vec![0.0; d * d];
    let mut a0_stderr = vec![0.0; d * d];
    let mut tails = Vec::with_capacity(d);
    let mut correlations = Vec::with_capacity(d);
    for i in 0..d {
        for j in 0..d {
            let (series, stderr, integral) = mats.contract(&[(i, j)]);
            a0[i * d + j] = 2.0 * integral.value;
            a0_stderr[i * d + j] = 2.0 * integral.stderr;
            if i == j {
                tails.push(tail_report(&mats.lags, &series, &stderr, 2.0, a0[i * d + j]));
                correlations.push(CorrelationSeries {
                    lags: mats.lags.clone(),
                    values: series,
                    stderr,
                    observables: (format!("b{i}"), format!("b{i}")),
                    base_hash: pt.base.system_hash,
                    samples: mats.samples,
                });
            }
        }
    }
    let root = symmetric_sqrt(&a0, d)?;
    Ok(GreenKubo {
        a0,
        a: root.sqrt,
        diagnostics: GreenKuboDiagnostics {
            a0_stderr,
            centering,
            centering_warning,
            tail_flag: tails.iter().any(|t| t.flagged),
            tails,
            clipped_eigenvalues: root.clipped,
            samples: mats.samples,
            correlations,
        },
    })
}

/// `F₁ = ⟨a(x, ·)⟩`, the time average of the slow drift along the frozen path.
#[allow(non_snake_case)]
pub fn drift_F1(system: &FastSlowSystem, x: &[f64], delta: f64, params: &EstimatorParams) -> Result<Vec<Average>> {
    drift_f1_at(&Point::new(system, x, delta, params)?)
}

fn drift_f1_at(pt: &Point<'_>) -> Result<Vec<Average>> {
    let a = pt.system.a();
    birkhoff_average_vector(|y, out| a.eval(pt.x, y, out), pt.system.d(), &pt.base, pt.params.burn_in)
}

/// A drift integral with its truncation accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Integrand per lag, component-major: `series[k][lag]`.
    pub lags: Vec<f64>,
    pub series: Vec<Vec<f64>>,
    pub tails: Vec<TailReport>,
    pub tail_flag: bool,
    pub samples: usize,
    /// Restarted tangent flows were integrated (as opposed to path correlations).
    pub variational: bool,
    pub used_finite_differences: bool,
}

impl DriftEstimate {
    fn from_integrand(
        lags: Vec<f64>,
        series: Vec<Vec<f64>>,
        stderr_series: Vec<Vec<f64>>,
        integrals: Vec<Average>,
        samples: usize,
        variational: bool,
        used_finite_differences: bool,
    ) -> Self {
        let tails: Vec<TailReport> = series
            .iter()
            .zip(&stderr_series)
            .zip(&integrals)
            .map(|((s, e), i)| tail_report(&lags, s, e, 1.0, i.value))
            .collect();
        Self {
            value: integrals.iter().map(|a| a.value).collect(),
            stderr: integrals.iter().map(|a| a.stderr).collect(),
            lags,
            series,
            tail_flag: tails.iter().any(|t| t.flagged),
            tails,
            samples,
            variational,
            used_finite_differences,
        }
    }

    fn zero(d: usize) -> Self {
        Self {
            value: vec![0.0; d],
            stderr: vec![0.0; d],
            lags: Vec::new(),
            series: vec![Vec::new(); d],
            tails: Vec::new(),
            tail_flag: false,
            samples: 0,
            variational: false,
            used_finite_differences: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DriftKind {
    /// `(∇ₓb(φ^{t+s}) + ∇_y b(φ^{t+s}) J_x(t)) · b(φ^s)`
    Coupled,
    /// `∇ₓb(φ^{t+s}) · b(φ^s) + ∇_y b(φ^{t+s}) J_y(t) h(φ^s)`
    Weak,
}

/// `F₀(x) = ∫₀^{t_max} ⟨(∇ₓb + ∇_y b·J_x)(φ^{t+s}) · b(φ^s)⟩ dt` for coupled systems.
///
/// When the fast drift does not depend on `x` the tangent flow `J_x` vanishes and
/// the integral is a lagged correlation of `b` with `∇ₓb`; otherwise `J_x` is
/// integrated from restarts at every `jacobian_stride`-th sample point.
#[allow(non_snake_case)]
pub fn drift_F0_coupled(
    system: &FastSlowSystem,
    x: &[f64],
    delta: f64,
    params: &EstimatorParams,
) -> Result<DriftEstimate> {
    let pt = Point::new(system, x, delta, params)?;
    let variational = system.coupling_class() == CouplingClass::General;
    drift_integral(&pt, DriftKind::Coupled, variational)
}

/// Drift of a weakly-coupled system: `F̃₀ = F₁ + ∫₀^{t_max} ⟨∇ₓb·b + ∇_y b·J_y·h⟩ dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakDrift {
    pub total: Vec<f64>,
    pub f1: Vec<Average>,
    pub second: DriftEstimate,
    /// `⟨∇_y b⟩` row-major `d×m`; required to vanish when `h ≠ 0`.
    pub grad_centering: Vec<Average>,
    pub grad_centering_warning: bool,
}

pub fn drift_weakly_coupled(
    system: &FastSlowSystem,
    x: &[f64],
    delta: f64,
    params: &EstimatorParams,
) -> Result<WeakDrift> {
    let pt = Point::new(system, x, delta, params)?;
    weak_drift_at(&pt, false)
}

fn weak_drift_at(pt: &Point<'_>, force_variational: bool) -> Result<WeakDrift> {
    let system = pt.system;
    if system.coupling_class() != CouplingClass::WeaklyCoupled {
        return Err(Error::WrongCouplingClass {
            expected: CouplingClass::WeaklyCoupled.as_str(),
            found: system.coupling_class().as_str(),
        });
    }
    let (d, m) = (system.d(), system.m());
    let f1 = drift_f1_at(pt)?;
    let has_h = system.h().is_some_and(|h| !h.is_zero());
    let (grad_centering, grad_centering_warning) = if has_h {
        let b = system.b();
        let x = pt.x;
        let g = birkhoff_average_vector(|y, out| { b.jacobian_y(x, y, out); }, d * m, &pt.base, pt.params.burn_in)?;
        let warn = g.iter().any(|c| c.value.abs() > CENTERING_WARN_SE * c.stderr);
        (g, warn)
    } else {
        (Vec::new(), false)
    };
    // J_y = I exactly when g ≡ 0; the h-term then needs no tangent flow.
    let variational = force_variational || (has_h && !system.g().is_zero());
    let second = drift_integral(pt, DriftKind::Weak, variational)?;
    let total = f1.iter().zip(&second.value).map(|(a, b)| a.value + b).collect();
    Ok(WeakDrift { total, f1, second, grad_centering, grad_centering_warning })
}

fn drift_integral(pt: &Point<'_>, kind: DriftKind, variational: bool) -> Result<DriftEstimate> {
    let system = pt.system;
    let d = system.d();
    if system.b().is_zero() {
        return Ok(DriftEstimate::zero(d));
    }
    if variational {
        restart_drift(pt, kind)
    } else {
        correlation_drift(pt, kind)
    }
}

/// Drift integral as lagged raw products along the path.
fn correlation_drift(pt: &Point<'_>, kind: DriftKind) -> Result<DriftEstimate> {
    let (system, x) = (pt.system, pt.x);
    let (d, m) = (system.d(), system.m());
    let b = system.b();
    let h = system.h().filter(|h| !h.is_zero() && kind == DriftKind::Weak);
    let mut used_fd = false;
    // v = [b; h], w = [∇ₓb; ∇_y b] flattened row-major.
    let p = d + h.map_or(0, |_| m);
    let q = d * d + h.map_or(0, |_| d * m);
    let v = |y: &[f64], out: &mut [f64]| {
        b.eval(x, y, &mut out[..d]);
        if let Some(h) = h {
            h.eval(x, y, &mut out[d..]);
        }
    };
    let w = |y: &[f64], out: &mut [f64]| {
        b.jacobian_x(x, y, &mut out[..d * d]);
        if h.is_some() {
            b.jacobian_y(x, y, &mut out[d * d..]);
        }
    };
    {
        let probe_y: Vec<f64> = pt.base.y_read(0, &mut vec![0.0; m]).to_vec();
        let mut jx = vec![0.0; d * d];
        used_fd |= b.jacobian_x(x, &probe_y, &mut jx);
        if h.is_some() {
            let mut jy = vec![0.0; d * m];
            used_fd |= b.jacobian_y(x, &probe_y, &mut jy);
        }
    }
    let opts = pt.params.correlation_options();
    let mats = correlation_matrices(&v, p, &w, q, &pt.base, &pt.flow(), &opts, false)?;
    let mut series = Vec::with_capacity(d);
    let mut stderr_series = Vec::with_capacity(d);
    let mut integrals = Vec::with_capacity(d);
    for i in 0..d {
        // Σ_j ∂ₓⱼb_i(t)·b_j(s) + Σ_k ∂_{y_k}b_i(t)·h_k(s)
        let mut terms: Vec<(usize, usize)> = (0..d).map(|j| (j, i * d + j)).collect();
        if h.is_some() {
            terms.extend((0..m).map(|k| (d + k, d * d + i * m + k)));
        }
        let (s, e, integral) = mats.contract(&terms);
        series.push(s);
        stderr_series.push(e);
        integrals.push(integral);
    }
    Ok(DriftEstimate::from_integrand(mats.lags, series, stderr_series, integrals, mats.samples, false, used_fd))
}

/// Drift integral from tangent flows restarted along the base path.
fn restart_drift(pt: &Point<'_>, kind: DriftKind) -> Result<DriftEstimate> {
    let (system, x, params) = (pt.system, pt.x, pt.params);
    let (d, m) = (system.d(), system.m());
    let base = &pt.base;
    let start = base.index_at(base.times[0] + params.burn_in);
    let stride = params.s_stride * params.jacobian_stride;
    let points: Vec<usize> = (start..base.len()).step_by(stride).collect();
    if points.len() < BATCHES {
        return Err(Error::InsufficientData(format!("{} tangent-flow restart points", points.len())));
    }
    let lags = params.lag_grid();
    let n_lags = lags.count;
    let lag_steps = (params.lag_spacing / params.dt).round() as usize;
    let replicas = if pt.delta > 0.0 { params.noise_replicas.max(1) } else { 1 };
    let track = match kind {
        DriftKind::Coupled => Track { x: true, y: false },
        DriftKind::Weak => Track { x: false, y: true },
    };
    let b = system.b();
    let h = system.h().filter(|h| !h.is_zero());
    let restart_seed = params.seed.child(2);

    // per point: integrand series (n_lags × d) and whether finite differences were used
    let per_point: Vec<Result<(Vec<f64>, bool)>> = points
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut stepper = VariationalStepper::new(system, x, pt.delta, params.dt, Scheme::Auto, restart_seed, track)?;
            let mut wrap = vec![0.0; m];
            let y_s = base.y_read(i, &mut wrap).to_vec();
            let mut b_s = vec![0.0; d];
            let mut h_s = vec![0.0; m];
            b.eval(x, &y_s, &mut b_s);
            if let Some(h) = h {
                h.eval(x, &y_s, &mut h_s);
            }
            let mut bx = vec![0.0; d * d];
            let mut by = vec![0.0; d * m];
            let mut series = vec![0.0; n_lags * d];
            let mut fd = false;
            for r in 0..replicas {
                stepper.reseed(restart_seed.child(k as u64).member(r as u64));
                stepper.reset(base.y(i));
                for lag in 0..n_lags {
                    if lag > 0 {
                        for _ in 0..lag_steps {
                            if !stepper.step() {
                                return Err(Error::NonFinite { what: "tangent flow", time: lag as f64 * params.lag_spacing });
                            }
                        }
                    }
                    let y_t = system.read_fast(stepper.y(), &mut wrap);
                    fd |= b.jacobian_x(x, y_t, &mut bx);
                    fd |= b.jacobian_y(x, y_t, &mut by);
                    for c in 0..d {
                        let mut acc = 0.0;
                        match kind {
                            DriftKind::Coupled => {
                                let jx = stepper.j_x().expect("tracked");
                                for j in 0..d {
                                    let mut mij = bx[c * d + j];
                                    for kk in 0..m {
                                        mij += by[c * m + kk] * jx[kk * d + j];
                                    }
                                    acc += mij * b_s[j];
                                }
                            }
                            DriftKind::Weak => {
                                for j in 0..d {
                                    acc += bx[c * d + j] * b_s[j];
                                }
                                if h.is_some() {
                                    let jy = stepper.j_y().expect("tracked");
                                    for kk in 0..m {
                                        for l in 0..m {
                                            acc += by[c * m + kk] * jy[kk * m + l] * h_s[l];
                                        }
                                    }
                                }
                            }
                        }
                        series[lag * d + c] += acc / replicas as f64;
                    }
                }
            }
            Ok((series, fd || stepper.used_finite_differences))
        })
        .collect();
    let per_point = per_point.into_iter().collect::<Result<Vec<_>>>()?;
    let used_fd = per_point.iter().any(|(_, fd)| *fd);
    let lag_values = lags.lags();
    let n = per_point.len();

    let mut series = Vec::with_capacity(d);
    let mut stderr_series = Vec::with_capacity(d);
    let mut integrals = Vec::with_capacity(d);
    for c in 0..d {
        let component = |p: &Vec<f64>| -> Vec<f64> { (0..n_lags).map(|l| p[l * d + c]).collect() };
        let per_sample: Vec<Vec<f64>> = per_point.iter().map(|(s, _)| component(s)).collect();
        let mean: Vec<f64> = (0..n_lags).map(|l| per_sample.iter().map(|s| s[l]).sum::<f64>() / n as f64).collect();
        let err: Vec<f64> = (0..n_lags)
            .map(|l| batch_means(&per_sample.iter().map(|s| s[l]).collect::<Vec<_>>()).stderr)
            .collect();
        let sample_integrals: Vec<f64> = per_sample.iter().map(|s| trapezoid(&lag_values, s)).collect();
        integrals.push(batch_means(&sample_integrals));
        series.push(mean);
        stderr_series.push(err);
    }
    Ok(DriftEstimate::from_integrand(lag_values, series, stderr_series, integrals, n, true, used_fd))
}

/// Drift and diffusion tabulated over slow grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedCoefficients {
    pub d: usize,
    pub x_grid: Vec<Vec<f64>>,
    pub f_values: Vec<Vec<f64>>,
    pub f_stderr: Vec<Vec<f64>>,
    /// Raw Green-Kubo matrices, row-major.
    pub a0_values: Vec<Vec<f64>>,
    pub a0_stderr: Vec<Vec<f64>>,
    /// Symmetric square roots of `½(A₀ + A₀ᵀ)`.
    pub a_values: Vec<Vec<f64>>,
    pub tail_flags: Vec<bool>,
    /// Estimator failure at a grid point; such points are skipped by interpolation.
    pub failures: Vec<Option<String>>,
    pub diagnostics: Vec<Option<PointDiagnostics>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    pub green_kubo: GreenKuboDiagnostics,
    pub drift_tails: Vec<TailReport>,
    pub centering_warning: bool,
}

impl HomogenizedCoefficients {
    pub fn len(&self) -> usize {
        self.x_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_grid.is_empty()
    }

    fn valid_points(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.failures[i].is_none()).collect();
        idx.sort_by(|&a, &b| self.x_grid[a][0].total_cmp(&self.x_grid[b][0]));
        idx
    }

    /// Piecewise-linear interpolation of a tabulated quantity, held constant beyond
    /// the end points. Only one-dimensional grids interpolate; a single valid point
    /// gives a constant.
    fn interpolate(&self, values: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
        let idx = self.valid_points();
        let Some(&first) = idx.first() else {
            return Err(Error::InsufficientData("no valid tabulated points".into()));
        };
        if idx.len() == 1 {
            return Ok(values[first].clone());
        }
        if self.d != 1 {
            return Err(Error::invalid("interpolation is implemented for one slow dimension"));
        }
        let t = x[0];
        let xs: Vec<f64> = idx.iter().map(|&i| self.x_grid[i][0]).collect();
        let last = *idx.last().unwrap();
        if t <= xs[0] {
            return Ok(values[first].clone());
        }
        if t >= xs[xs.len() - 1] {
            return Ok(values[last].clone());
        }
        let k = xs.partition_point(|v| *v <= t).max(1) - 1;
        let (i0, i1) = (idx[k], idx[k + 1]);
        let w = (t - xs[k]) / (xs[k + 1] - xs[k]);
        Ok(values[i0].iter().zip(&values[i1]).map(|(a, b)| (1.0 - w) * a + w * b).collect())
    }

    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.interpolate(&self.f_values, x)
    }

    pub fn diffusion_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.interpolate(&self.a_values, x)
    }
}

/// Per-point drift (coupled or weakly-coupled formula by class) and diffusion.
/// Grid points share the seed, so neighbouring estimates use common noise.
pub fn tabulate_model(
    system: &FastSlowSystem,
    x_grid: &[Vec<f64>],
    delta: f64,
    params: &EstimatorParams,
) -> Result<HomogenizedCoefficients> {
    if x_grid.is_empty() {
        return Err(Error::invalid("x grid is empty"));
    }
    let d = system.d();
    for x in x_grid {
        if x.len() != d {
            return Err(Error::DimensionMismatch { field: "x_grid", expected: d, found: x.len() });
        }
    }
    params.validate(system)?;
    type PointResult = (Vec<f64>, Vec<f64>, GreenKubo, Vec<TailReport>);
    let results: Vec<Result<PointResult>> = x_grid
        .par_iter()
        .map(|x| -> Result<PointResult> {
            let pt = Point::new(system, x, delta, params)?;
            let gk = green_kubo_at(&pt)?;
            let (f, se, tails) = if system.coupling_class() == CouplingClass::WeaklyCoupled {
                let w = weak_drift_at(&pt, false)?;
                let se = w.f1.iter().zip(&w.second.stderr).map(|(a, b)| a.stderr.hypot(*b)).collect();
                (w.total, se, w.second.tails)
            } else {
                let f1 = drift_f1_at(&pt)?;
                let f0 = drift_integral(&pt, DriftKind::Coupled, system.coupling_class() == CouplingClass::General)?;
                let f = f1.iter().zip(&f0.value).map(|(a, b)| a.value + b).collect();
                let se = f1.iter().zip(&f0.stderr).map(|(a, b)| a.stderr.hypot(*b)).collect();
                (f, se, f0.tails)
            };
            Ok((f, se, gk, tails))
        })
        .collect();

    let mut out = HomogenizedCoefficients {
        d,
        x_grid: x_grid.to_vec(),
        f_values: Vec::new(),
        f_stderr: Vec::new(),
        a0_values: Vec::new(),
        a0_stderr: Vec::new(),
        a_values: Vec::new(),
        tail_flags: Vec::new(),
        failures: Vec::new(),
        diagnostics: Vec::new(),
    };
    for r in results {
        match r {
            Ok((f, se, gk, drift_tails)) => {
                out.f_values.push(f);
                out.f_stderr.push(se);
                out.tail_flags.push(gk.diagnostics.tail_flag || drift_tails.iter().any(|t| t.flagged));
                out.a0_values.push(gk.a0);
                out.a0_stderr.push(gk.diagnostics.a0_stderr.clone());
                out.a_values.push(gk.a);
                out.failures.push(None);
                out.diagnostics.push(Some(PointDiagnostics {
                    centering_warning: gk.diagnostics.centering_warning,
                    green_kubo: gk.diagnostics,
                    drift_tails,
                }));
            }
            Err(e) => {
                out.f_values.push(vec![f64::NAN; d]);
                out.f_stderr.push(vec![f64::NAN; d]);
                out.a0_values.push(vec![f64::NAN; d * d]);
                out.a0_stderr.push(vec![f64::NAN; d * d]);
                out.a_values.push(vec![f64::NAN; d * d]);
                out.tail_flags.push(false);
                out.failures.push(Some(e.to_string()));
                out.diagnostics.push(None);
            }
        }
    }
    Ok(out)
}
