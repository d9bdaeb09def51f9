//! Ergodic estimators along frozen fast-flow paths.
//!
//! Standard errors come from batch means over [`BATCHES`] contiguous batches,
//! since consecutive samples along a path are correlated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FastSlowSystem, FastSpace};
use crate::error::{Error, Result};
use crate::integrate::{integrate_frozen_fast, FrozenStepper, Scheme, TimeGrid, Trajectory};
use crate::rng::SeedSpec;

pub const BATCHES: usize = 16;

/// Estimate with batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub value: f64,
    pub stderr: f64,
}

impl Average {
    /// `|value| ≤ k·stderr`.
    pub fn within(&self, k: f64) -> bool {
        self.value.abs() <= k * self.stderr
    }
}

/// Mean of `samples` with a batch-means standard error.
pub fn batch_means(samples: &[f64]) -> Average {
    let n = samples.len();
    if n == 0 {
        return Average { value: f64::NAN, stderr: f64::NAN };
    }
    let value = samples.iter().sum::<f64>() / n as f64;
    let batches = BATCHES.min(n);
    if batches < 2 {
        return Average { value, stderr: 0.0 };
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| {
            let lo = b * n / batches;
            let hi = (b + 1) * n / batches;
            samples[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    Average { value, stderr: stderr_of(&means) }
}

/// Standard error of the mean of independent batch values.
pub(crate) fn stderr_of(batch_values: &[f64]) -> f64 {
    let k = batch_values.len() as f64;
    if batch_values.len() < 2 {
        return 0.0;
    }
    let mean = batch_values.iter().sum::<f64>() / k;
    let var = batch_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (var / k).sqrt()
}

fn first_index_after_burn_in(traj: &Trajectory, burn_in: f64) -> Result<usize> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let duration = traj.duration();
    if !(burn_in >= 0.0) || burn_in >= duration {
        return Err(Error::BurnInTooLong { burn_in, duration });
    }
    Ok(traj.index_at(traj.times[0] + burn_in))
}

/// Time average of a fast-state observable over `[burn_in, T]`.
pub fn birkhoff_average<F>(observable: F, traj: &Trajectory, burn_in: f64) -> Result<Average>
where
    F: Fn(&[f64]) -> f64,
{
    let start = first_index_after_burn_in(traj, burn_in)?;
    let mut buf = vec![0.0; traj.m];
    let samples: Vec<f64> = (start..traj.len()).map(|i| observable(traj.y_read(i, &mut buf))).collect();
    Ok(batch_means(&samples))
}

/// Componentwise time averages of a vector observable `f(y, out)`.
pub fn birkhoff_average_vector<F>(f: F, dim: usize, traj: &Trajectory, burn_in: f64) -> Result<Vec<Average>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let start = first_index_after_burn_in(traj, burn_in)?;
    let mut buf = vec![0.0; traj.m];
    let mut out = vec![0.0; dim];
    let mut columns = vec![Vec::with_capacity(traj.len() - start); dim];
    for i in start..traj.len() {
        f(traj.y_read(i, &mut buf), &mut out);
        for (c, v) in columns.iter_mut().zip(&out) {
            c.push(*v);
        }
    }
    Ok(columns.iter().map(|c| batch_means(c)).collect())
}

/// Time average of `b(x, φₓ^{δ,·})`; vanishes when the centering condition holds.
pub fn centering_residual(
    system: &FastSlowSystem,
    x: &[f64],
    y0: &[f64],
    delta: f64,
    grid: &TimeGrid,
    burn_in: f64,
    seed: SeedSpec,
) -> Result<Vec<Average>> {
    let traj = integrate_frozen_fast(system, x, y0, delta, grid, seed)?;
    let b = system.b();
    birkhoff_average_vector(|y, out| b.eval(x, y, out), system.d(), &traj, burn_in)
}

/// The frozen fast flow `φₓ^δ` used for restarted inner expectations.
#[derive(Debug, Clone, Copy)]
pub struct FrozenFlow<'a> {
    pub system: &'a FastSlowSystem,
    pub x: &'a [f64],
    pub delta: f64,
    pub dt: f64,
}

/// Lags `0, h, 2h, …, n·h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagGrid {
    pub spacing: f64,
    pub count: usize,
}

impl LagGrid {
    pub fn new(spacing: f64, max_lag: f64) -> Self {
        Self { spacing, count: (max_lag / spacing).round() as usize + 1 }
    }

    pub fn max_lag(&self) -> f64 {
        self.spacing * (self.count.saturating_sub(1)) as f64
    }

    pub fn lags(&self) -> Vec<f64> {
        (0..self.count).map(|k| k as f64 * self.spacing).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    pub lags: LagGrid,
    /// Independent noise restarts per sample point (ignored when δ = 0).
    pub replicas: usize,
    pub burn_in: f64,
    /// Use every `s_stride`-th record of the base path as a sample point.
    pub s_stride: usize,
    pub seed: SeedSpec,
}

/// Lagged correlation `C(t) = ⟨v(z) 𝔼w(φ^t z)⟩ − ⟨v⟩⟨w⟩` with per-lag standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub observables: (String, String),
    pub base_hash: u64,
    pub samples: usize,
}

impl CorrelationSeries {
    /// A series from raw samples (no trajectory provenance).
    pub fn from_samples(lags: Vec<f64>, values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            lags,
            values,
            stderr: vec![0.0; n],
            observables: ("v".into(), "w".into()),
            base_hash: 0,
            samples: 0,
        }
    }

    /// Trapezoid integral of the values over the lag grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.lags, &self.values)
    }
}

pub(crate) fn trapezoid(t: &[f64], v: &[f64]) -> f64 {
    t.windows(2).zip(v.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Matrix-valued correlation `C_{ac}(t)` between `v: ℝᵐ→ℝᵖ` and `w: ℝᵐ→ℝ^q`.
#[derive(Debug, Clone)]
pub(crate) struct CorrelationMatrices {
    pub lags: Vec<f64>,
    pub p: usize,
    pub q: usize,
    /// `n_lags × p × q`
    pub values: Vec<f64>,
    /// Per-batch estimates, same layout as `values`.
    pub batches: Vec<Vec<f64>>,
    pub samples: usize,
}

impl CorrelationMatrices {
    pub(crate) fn at(&self, lag: usize, a: usize, c: usize) -> f64 {
        self.values[(lag * self.p + a) * self.q + c]
    }

    pub(crate) fn stderr(&self, lag: usize, a: usize, c: usize) -> f64 {
        let idx = (lag * self.p + a) * self.q + c;
        let vals: Vec<f64> = self.batches.iter().map(|b| b[idx]).collect();
        stderr_of(&vals)
    }

    /// Sum of the entries `terms` as a series over lags, its per-lag standard
    /// errors, and its trapezoid integral with batch standard error.
    pub(crate) fn contract(&self, terms: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>, Average) {
        let series = |src: &[f64]| -> Vec<f64> {
            (0..self.lags.len())
                .map(|l| terms.iter().map(|&(a, c)| src[(l * self.p + a) * self.q + c]).sum())
                .collect()
        };
        let mean = series(&self.values);
        let per_batch: Vec<Vec<f64>> = self.batches.iter().map(|b| series(b)).collect();
        let stderr = (0..self.lags.len())
            .map(|l| stderr_of(&per_batch.iter().map(|b| b[l]).collect::<Vec<_>>()))
            .collect();
        let value = trapezoid(&self.lags, &mean);
        let integrals: Vec<f64> = per_batch.iter().map(|b| trapezoid(&self.lags, b)).collect();
        (mean, stderr, Average { value, stderr: stderr_of(&integrals) })
    }
}

type VecObs<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Sync);

struct BatchSums {
    count: usize,
    /// `n_lags × p × q`
    prod: Vec<f64>,
    v: Vec<f64>,
    /// `n_lags × q`
    w: Vec<f64>,
}

/// Shared engine for scalar and matrix correlations. With `center` the product of
/// means is subtracted; otherwise raw lagged products are averaged.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlation_matrices(
    v: VecObs<'_>,
    p: usize,
    w: VecObs<'_>,
    q: usize,
    base: &Trajectory,
    flow: &FrozenFlow<'_>,
    opts: &CorrelationOptions,
    center: bool,
) -> Result<CorrelationMatrices> {
    let start = first_index_after_burn_in(base, opts.burn_in)?;
    let available = base.times[base.len() - 1] - base.times[start];
    let max_lag = opts.lags.max_lag();
    if opts.lags.count < 1 || !(opts.lags.spacing > 0.0) {
        return Err(Error::invalid("lag grid needs a positive spacing"));
    }
    if max_lag > available / 10.0 * (1.0 + 1e-9) {
        return Err(Error::MaxLagTooLarge { max_lag, duration: available });
    }
    if flow.delta > 0.0 && opts.replicas == 0 {
        return Err(Error::ZeroReplicas);
    }
    let stride = opts.s_stride.max(1);
    let n_lags = opts.lags.count;
    let m = base.m;

    let wrapped = |i: usize, buf: &mut [f64]| {
        let y = base.y(i);
        match base.fast_space {
            FastSpace::Unbounded => buf.copy_from_slice(y),
            FastSpace::TorusUnit => {
                for (b, v) in buf.iter_mut().zip(y) {
                    *b = v.rem_euclid(1.0);
                }
            }
        }
    };

    let noisy = flow.delta > 0.0;
    let (lag_stride, samples): (usize, Vec<usize>) = if noisy {
        (0, (start..base.len()).step_by(stride).collect())
    } else {
        let ratio = opts.lags.spacing / base.sample_spacing();
        let lag_stride = ratio.round() as usize;
        if lag_stride == 0 || (ratio - lag_stride as f64).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "lag spacing {} is not a multiple of the path sample spacing {}",
                opts.lags.spacing,
                base.sample_spacing()
            )));
        }
        let last = base.len() - 1 - lag_stride * (n_lags - 1);
        (lag_stride, (start..=last).step_by(stride).collect())
    };
    let n_s = samples.len();
    if n_s < BATCHES {
        return Err(Error::InsufficientData(format!("{n_s} correlation sample points")));
    }

    let lag_steps = if noisy {
        let ratio = opts.lags.spacing / flow.dt;
        let k = ratio.round() as usize;
        if k == 0 || (ratio - k as f64).abs() > 1e-6 {
            return Err(Error::invalid("lag spacing must be a multiple of the integration step"));
        }
        k
    } else {
        0
    };

    // Deterministic: precompute observables along the whole path.
    let (v_path, w_path) = if noisy {
        (Vec::new(), Vec::new())
    } else {
        let mut buf = vec![0.0; m];
        let mut vp = vec![0.0; base.len() * p];
        let mut wp = vec![0.0; base.len() * q];
        for i in start..base.len() {
            wrapped(i, &mut buf);
            v(&buf, &mut vp[i * p..(i + 1) * p]);
            w(&buf, &mut wp[i * q..(i + 1) * q]);
        }
        (vp, wp)
    };

    let batch_results: Vec<Result<BatchSums>> = (0..BATCHES)
        .into_par_iter()
        .map(|b| -> Result<BatchSums> {
            let lo = b * n_s / BATCHES;
            let hi = (b + 1) * n_s / BATCHES;
            let mut sums = BatchSums {
                count: hi - lo,
                prod: vec![0.0; n_lags * p * q],
                v: vec![0.0; p],
                w: vec![0.0; n_lags * q],
            };
            let mut vbuf = vec![0.0; p];
            let mut wbuf = vec![0.0; q];
            let mut what = vec![0.0; n_lags * q];
            let mut ybuf = vec![0.0; m];
            let mut yread = vec![0.0; m];
            for (k, &i) in samples.iter().enumerate().take(hi).skip(lo) {
                if noisy {
                    wrapped(i, &mut ybuf);
                    v(&ybuf, &mut vbuf);
                    what.fill(0.0);
                    for r in 0..opts.replicas {
                        let seed = opts.seed.child(k as u64).member(r as u64);
                        let mut stepper = FrozenStepper::new(flow.system, flow.x, flow.delta, flow.dt, Scheme::Auto, seed)?;
                        let mut y = base.y(i).to_vec();
                        for lag in 0..n_lags {
                            if lag > 0 {
                                for _ in 0..lag_steps {
                                    if !stepper.step(&mut y) {
                                        return Err(Error::NonFinite { what: "restarted fast state", time: lag as f64 * opts.lags.spacing });
                                    }
                                }
                            }
                            let yr = flow.system.read_fast(&y, &mut yread);
                            w(yr, &mut wbuf);
                            for c in 0..q {
                                what[lag * q + c] += wbuf[c];
                            }
                        }
                    }
                    let inv = 1.0 / opts.replicas as f64;
                    what.iter_mut().for_each(|x| *x *= inv);
                } else {
                    vbuf.copy_from_slice(&v_path[i * p..(i + 1) * p]);
                    for lag in 0..n_lags {
                        let j = i + lag * lag_stride;
                        what[lag * q..(lag + 1) * q].copy_from_slice(&w_path[j * q..(j + 1) * q]);
                    }
                }
                for a in 0..p {
                    sums.v[a] += vbuf[a];
                }
                for lag in 0..n_lags {
                    for c in 0..q {
                        let wv = what[lag * q + c];
                        sums.w[lag * q + c] += wv;
                        for a in 0..p {
                            sums.prod[(lag * p + a) * q + c] += vbuf[a] * wv;
                        }
                    }
                }
            }
            Ok(sums)
        })
        .collect();
    let batch_sums = batch_results.into_iter().collect::<Result<Vec<_>>>()?;

    let total = n_s as f64;
    let mut v_mean = vec![0.0; p];
    let mut w_mean = vec![0.0; n_lags * q];
    let mut prod = vec![0.0; n_lags * p * q];
    for s in &batch_sums {
        v_mean.iter_mut().zip(&s.v).for_each(|(a, b)| *a += b);
        w_mean.iter_mut().zip(&s.w).for_each(|(a, b)| *a += b);
        prod.iter_mut().zip(&s.prod).for_each(|(a, b)| *a += b);
    }
    v_mean.iter_mut().for_each(|x| *x /= total);
    w_mean.iter_mut().for_each(|x| *x /= total);

    let centered = |prod_sum: &[f64], count: f64| -> Vec<f64> {
        let mut out = vec![0.0; n_lags * p * q];
        for lag in 0..n_lags {
            for a in 0..p {
                for c in 0..q {
                    let idx = (lag * p + a) * q + c;
                    let shift = if center { v_mean[a] * w_mean[lag * q + c] } else { 0.0 };
                    out[idx] = prod_sum[idx] / count - shift;
                }
            }
        }
        out
    };
    let values = centered(&prod, total);
    let batches = batch_sums.iter().map(|s| centered(&s.prod, s.count as f64)).collect();
    Ok(CorrelationMatrices { lags: opts.lags.lags(), p, q, values, batches, samples: n_s })
}

/// Scalar lagged correlation of `v` and `w` along `base`.
///
/// For δ = 0 the lagged values are read off the base path; for δ > 0 each sample
/// point is restarted `replicas` times with independent noise.
pub fn estimate_correlation<V, W>(
    v: V,
    w: W,
    base: &Trajectory,
    flow: &FrozenFlow<'_>,
    opts: &CorrelationOptions,
) -> Result<CorrelationSeries>
where
    V: Fn(&[f64]) -> f64 + Sync,
    W: Fn(&[f64]) -> f64 + Sync,
{
    let vv = move |y: &[f64], out: &mut [f64]| out[0] = v(y);
    let ww = move |y: &[f64], out: &mut [f64]| out[0] = w(y);
    let mats = correlation_matrices(&vv, 1, &ww, 1, base, flow, opts, true)?;
    let n = mats.lags.len();
    Ok(CorrelationSeries {
        values: (0..n).map(|l| mats.at(l, 0, 0)).collect(),
        stderr: (0..n).map(|l| mats.stderr(l, 0, 0)).collect(),
        lags: mats.lags,
        observables: ("v".into(), "w".into()),
        base_hash: base.system_hash,
        samples: mats.samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DecayModel {
    /// `C·e^{−ρt}`
    Exponential { amplitude: f64, rate: f64 },
    /// `C·t^{−β}`
    Power { amplitude: f64, exponent: f64 },
}

impl DecayModel {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            DecayModel::Exponential { amplitude, rate } => amplitude * (-rate * t).exp(),
            DecayModel::Power { amplitude, exponent } => amplitude * t.powf(-exponent),
        }
    }

    /// `∫_t^∞` of the model, `None` when divergent.
    pub fn tail_beyond(&self, t: f64) -> Option<f64> {
        match *self {
            DecayModel::Exponential { amplitude, rate } => {
                (rate > 0.0).then(|| amplitude * (-rate * t).exp() / rate)
            }
            DecayModel::Power { amplitude, exponent } => {
                (exponent > 1.0 && t > 0.0).then(|| amplitude * t.powf(1.0 - exponent) / (exponent - 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    /// `∫₀^∞` of the fit; `None` when not summable.
    pub summability_integral: Option<f64>,
    /// Weighted RMS residual in log space of the selected model.
    pub residual: f64,
    pub exponential_residual: f64,
    pub power_residual: f64,
    pub points: usize,
    /// Set for an all-zero series.
    pub degenerate: bool,
}

impl DecayFit {
    pub fn summable(&self) -> bool {
        self.summability_integral.is_some()
    }
}

pub const MIN_FIT_POINTS: usize = 8;

pub fn fit_decay(series: &CorrelationSeries) -> Result<DecayFit> {
    fit_decay_points(&series.lags, &series.values, &series.stderr)
}

/// Weighted least squares `ln v ≈ α + β·u`; returns `(α, β, weighted rms)`.
fn log_linear_fit(u: &[f64], lv: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mu = u.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mv = lv.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let suu: f64 = u.iter().zip(w).map(|(a, b)| b * (a - mu).powi(2)).sum();
    let suv: f64 = u.iter().zip(lv).zip(w).map(|((a, c), b)| b * (a - mu) * (c - mv)).sum();
    let slope = suv / suu;
    let intercept = mv - slope * mu;
    let rss: f64 = u
        .iter()
        .zip(lv)
        .zip(w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    (intercept, slope, (rss / sw).sqrt())
}

/// Fit exponential and power-law decay to the leading run of significantly positive values.
pub fn fit_decay_points(lags: &[f64], values: &[f64], stderr: &[f64]) -> Result<DecayFit> {
    if lags.len() != values.len() || stderr.len() != values.len() {
        return Err(Error::invalid("lags, values and standard errors must have equal length"));
    }
    if values.iter().all(|v| *v == 0.0) {
        return Ok(DecayFit {
            model: DecayModel::Exponential { amplitude: 0.0, rate: 0.0 },
            summability_integral: Some(0.0),
            residual: 0.0,
            exponential_residual: 0.0,
            power_residual: 0.0,
            points: 0,
            degenerate: true,
        });
    }
    let run = values
        .iter()
        .zip(stderr)
        .take_while(|(v, s)| **v > 0.0 && (**s == 0.0 || **v > 2.0 * **s))
        .count();
    if run < MIN_FIT_POINTS {
        return Err(Error::InsufficientData(format!(
            "{run} leading significantly positive lags, need {MIN_FIT_POINTS}"
        )));
    }
    let (t, v, s) = (&lags[..run], &values[..run], &stderr[..run]);
    let weighted = s.iter().all(|x| *x > 0.0);
    let weights: Vec<f64> = if weighted {
        v.iter().zip(s).map(|(v, s)| (v / s).powi(2)).collect()
    } else {
        vec![1.0; run]
    };
    let lv: Vec<f64> = v.iter().map(|x| x.ln()).collect();

    let (ia, sa, exp_res) = log_linear_fit(t, &lv, &weights);
    let exponential = DecayModel::Exponential { amplitude: ia.exp(), rate: -sa };

    let pos: Vec<usize> = (0..run).filter(|&i| t[i] > 0.0).collect();
    let (power, pow_res) = if pos.len() >= 2 {
        let lt: Vec<f64> = pos.iter().map(|&i| t[i].ln()).collect();
        let lvp: Vec<f64> = pos.iter().map(|&i| lv[i]).collect();
        let wp: Vec<f64> = pos.iter().map(|&i| weights[i]).collect();
        let (ib, sb, res) = log_linear_fit(&lt, &lvp, &wp);
        (Some(DecayModel::Power { amplitude: ib.exp(), exponent: -sb }), res)
    } else {
        (None, f64::INFINITY)
    };

    let (model, residual) = match power {
        Some(p) if pow_res < exp_res => (p, pow_res),
        _ => (exponential, exp_res),
    };
    let summability_integral = match model {
        DecayModel::Exponential { .. } => model.tail_beyond(0.0),
        DecayModel::Power { .. } => {
            // data trapezoid on [lags[0], t0], model tail on [t0, ∞)
            let first_pos = pos[0];
            let t0 = t[first_pos];
            let head = trapezoid(&t[..=first_pos], &v[..=first_pos]);
            model.tail_beyond(t0).map(|tail| head + tail)
        }
    };
    Ok(DecayFit {
        model,
        summability_integral,
        residual,
        exponential_residual: exp_res,
        power_residual: pow_res,
        points: run,
        degenerate: false,
    })
}

/// Regression of `ln sup_{t≤T} |φ^δ − φ⁰|∞` on `ln δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftExponent {
    pub slope: f64,
    pub intercept: f64,
    pub deltas: Vec<f64>,
    /// Seed-averaged sup-norm shift per δ.
    pub shifts: Vec<f64>,
}

/// Fitted exponent of the noise-induced displacement of the frozen flow.
///
/// Both the perturbed and the unperturbed path use the Euler-Maruyama update with
/// the same step, so the displacement isolates the noise rather than the
/// discretization.
pub fn delta_shift_exponent(
    system: &FastSlowSystem,
    x: &[f64],
    y0: &[f64],
    duration: f64,
    dt: f64,
    deltas: &[f64],
    seeds: &[SeedSpec],
) -> Result<ShiftExponent> {
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::DeltasMustBePositive);
    }
    let lo = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = deltas.iter().copied().fold(0.0, f64::max);
    if hi / lo < 1e3 * (1.0 - 1e-9) {
        return Err(Error::invalid("deltas must span at least three decades"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let steps = TimeGrid::new(duration, dt).steps()?;

    let runs: Vec<Result<f64>> = deltas
        .par_iter()
        .flat_map_iter(|&delta| seeds.iter().map(move |&seed| (delta, seed)))
        .map(|(delta, seed)| {
            let mut clean = FrozenStepper::new(system, x, 0.0, dt, Scheme::EulerMaruyama, seed)?;
            let mut noisy = FrozenStepper::new(system, x, delta, dt, Scheme::EulerMaruyama, seed)?;
            let (mut y0c, mut y0n) = (y0.to_vec(), y0.to_vec());
            let mut sup = 0.0f64;
            for step in 1..=steps {
                if !clean.step(&mut y0c) || !noisy.step(&mut y0n) {
                    return Err(Error::NonFinite { what: "fast state", time: step as f64 * dt });
                }
                for (a, b) in y0c.iter().zip(&y0n) {
                    sup = sup.max((a - b).abs());
                }
            }
            Ok(sup)
        })
        .collect();
    let sups = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let shifts: Vec<f64> = sups
        .chunks(seeds.len())
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let lx: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = shifts.iter().map(|s| s.ln()).collect();
    let (intercept, slope, _) = log_linear_fit(&lx, &ly, &vec![1.0; lx.len()]);
    Ok(ShiftExponent { slope, intercept, deltas: deltas.to_vec(), shifts })
}

/// Normalized histogram of the fast path; row-major over axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub edges: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
    /// Samples that fell inside the box.
    pub count: usize,
    pub outside: usize,
}

impl DensityHistogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// `Σ|mass − 1/bins|`.
    pub fn l1_to_uniform(&self) -> f64 {
        let u = 1.0 / self.bins() as f64;
        self.masses.iter().map(|m| (m - u).abs()).sum()
    }
}

/// Histogram of `traj` after `burn_in`. Torus paths are wrapped onto [0,1)ᵐ; unbounded
/// paths need an explicit box.
pub fn estimate_density(
    traj: &Trajectory,
    bins: &[usize],
    bounds: Option<&[(f64, f64)]>,
    burn_in: f64,
) -> Result<DensityHistogram> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let m = traj.m;
    if bins.len() != m || bins.iter().any(|b| *b == 0) {
        return Err(Error::invalid(format!("need one positive bin count per fast axis ({m})")));
    }
    let boxes: Vec<(f64, f64)> = match (bounds, traj.fast_space) {
        (Some(b), _) => {
            if b.len() != m || b.iter().any(|(lo, hi)| !(hi > lo)) {
                return Err(Error::invalid("bounding box must have one increasing interval per axis"));
            }
            b.to_vec()
        }
        (None, FastSpace::TorusUnit) => vec![(0.0, 1.0); m],
        (None, FastSpace::Unbounded) => {
            return Err(Error::invalid("unbounded fast space requires an explicit bounding box"))
        }
    };
    let start = if burn_in > 0.0 { first_index_after_burn_in(traj, burn_in)? } else { 0 };
    let total_bins: usize = bins.iter().product();
    let mut counts = vec![0usize; total_bins];
    let mut outside = 0;
    let mut buf = vec![0.0; m];
    'samples: for i in start..traj.len() {
        let y = traj.y_read(i, &mut buf);
        let mut flat = 0;
        for axis in 0..m {
            let (lo, hi) = boxes[axis];
            let u = (y[axis] - lo) / (hi - lo);
            if !(0.0..=1.0).contains(&u) {
                outside += 1;
                continue 'samples;
            }
            let k = ((u * bins[axis] as f64) as usize).min(bins[axis] - 1);
            flat = flat * bins[axis] + k;
        }
        counts[flat] += 1;
    }
    let count: usize = counts.iter().sum();
    if count == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let edges = boxes
        .iter()
        .zip(bins)
        .map(|(&(lo, hi), &n)| (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect())
        .collect();
    Ok(DensityHistogram {
        edges,
        masses: counts.iter().map(|&c| c as f64 / count as f64).collect(),
        count,
        outside,
    })
}

/// Per-δ check that `C̃e^{−ρt}` stays below the δ = 0 decay fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayStability {
    pub delta: f64,
    /// `C̃` and `ρ`; `None` when the δ > 0 fit did not select an exponential.
    pub amplitude: Option<f64>,
    pub rate: Option<f64>,
    /// Lags where the bound exceeds the reference fit.
    pub violations: Vec<f64>,
}

impl DecayStability {
    pub fn stable(&self) -> bool {
        self.rate.is_some() && self.violations.is_empty()
    }
}

pub fn decay_stability(reference: &DecayFit, perturbed: &[(f64, DecayFit)], lags: &[f64]) -> Vec<DecayStability> {
    perturbed
        .iter()
        .map(|&(delta, fit)| match fit.model {
            DecayModel::Exponential { amplitude, rate } => {
                let bound = DecayModel::Exponential { amplitude, rate };
                let violations = lags
                    .iter()
                    .copied()
                    .filter(|&t| bound.eval(t) > reference.model.eval(t) * (1.0 + 1e-12))
                    .collect();
                DecayStability { delta, amplitude: Some(amplitude), rate: Some(rate), violations }
            }
            DecayModel::Power { .. } => {
                DecayStability { delta, amplitude: None, rate: None, violations: lags.to_vec() }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{heat_torus_system, make_system, FieldRole, SystemSpec, VectorField};
    use std::f64::consts::{PI, TAU};

    fn heat_path(duration: f64, dt: f64, seed: u64) -> (FastSlowSystem, Trajectory) {
        let sys = heat_torus_system(1.0).unwrap();
        let traj = integrate_frozen_fast(&sys, &[0.0], &[0.1], 1.0, &TimeGrid::new(duration, dt), SeedSpec::new(seed)).unwrap();
        (sys, traj)
    }

    #[test]
    fn constant_observable() {
        let (_, traj) = heat_path(10.0, 0.01, 1);
        let avg = birkhoff_average(|_| 3.7, &traj, 1.0).unwrap();
        assert!((avg.value - 3.7).abs() < 1e-12);
        assert!(avg.stderr.abs() < 1e-12);
    }

    #[test]
    fn burn_in_must_be_shorter_than_run() {
        let (_, traj) = heat_path(1.0, 0.01, 1);
        assert!(matches!(birkhoff_average(|_| 1.0, &traj, 1.0), Err(Error::BurnInTooLong { .. })));
    }

    #[test]
    fn heat_sine_average_vanishes() {
        let (_, traj) = heat_path(500.0, 0.01, 2);
        let avg = birkhoff_average(|y| (TAU * y[0]).sin(), &traj, 1.0).unwrap();
        assert!(avg.within(3.0), "{avg:?}");
        assert!(avg.stderr > 0.0);
    }

    #[test]
    fn centering_residuals() {
        let sys = heat_torus_system(1.0).unwrap();
        let grid = TimeGrid::new(500.0, 0.01);
        let res = centering_residual(&sys, &[0.7], &[0.1], 1.0, &grid, 1.0, SeedSpec::new(3)).unwrap();
        assert!(res[0].within(3.0), "{:?}", res[0]);

        let a = VectorField::zero(FieldRole::SlowDrift, 1);
        let mut spec = SystemSpec::new("const-b", 1, 1, a);
        spec.b = VectorField::new(FieldRole::FastCoupling, 1, |_, _, out| out[0] = 1.0);
        let sys = make_system(spec).unwrap();
        let res = centering_residual(&sys, &[0.0], &[0.1], 1.0, &TimeGrid::new(5.0, 0.01), 1.0, SeedSpec::new(3)).unwrap();
        assert!((res[0].value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centering_residual_decays_like_inverse_sqrt_t() {
        let sys = heat_torus_system(1.0).unwrap();
        // RMS residual over independent seeds at each horizon
        let rms = |t: f64| {
            let seeds = 12;
            let ss: f64 = (0..seeds)
                .map(|s| {
                    let grid = TimeGrid::new(t, 0.01).recording_every(5);
                    centering_residual(&sys, &[0.0], &[0.1], 1.0, &grid, 0.0, SeedSpec::new(100).member(s)).unwrap()[0]
                        .value
                        .powi(2)
                })
                .sum();
            (ss / seeds as f64).sqrt()
        };
        let ts = [1e2, 1e3, 1e4];
        let r: Vec<f64> = ts.iter().map(|&t| rms(t)).collect();
        let lx: Vec<f64> = ts.iter().map(|t: &f64| t.ln()).collect();
        let ly: Vec<f64> = r.iter().map(|v| v.ln()).collect();
        let (_, slope, _) = log_linear_fit(&lx, &ly, &[1.0; 3]);
        assert!((-0.7..=-0.3).contains(&slope), "slope {slope}, rms {r:?}");
    }

    fn heat_correlation(duration: f64, replicas: usize, seed: u64) -> CorrelationSeries {
        let sys = heat_torus_system(1.0).unwrap();
        let base = integrate_frozen_fast(&sys, &[0.0], &[0.1], 1.0, &TimeGrid::new(duration, 1e-3).recording_every(100), SeedSpec::new(seed)).unwrap();
        let flow = FrozenFlow { system: &sys, x: &[0.0], delta: 1.0, dt: 1e-3 };
        let opts = CorrelationOptions {
            lags: LagGrid::new(0.01, 0.3),
            replicas,
            burn_in: 1.0,
            s_stride: 1,
            seed: SeedSpec::new(seed + 1),
        };
        estimate_correlation(|y| (TAU * y[0]).sin(), |y| (TAU * y[0]).sin(), &base, &flow, &opts).unwrap()
    }

    #[test]
    fn heat_correlation_is_a_decaying_eigenmode() {
        let c = heat_correlation(400.0, 8, 5);
        assert!((c.values[0] - 0.5).abs() < 0.05, "C(0) = {}", c.values[0]);
        let fit = fit_decay(&c).unwrap();
        match fit.model {
            DecayModel::Exponential { rate, .. } => {
                assert!((rate - 2.0 * PI * PI).abs() < 0.1 * 2.0 * PI * PI, "rate {rate}")
            }
            m => panic!("expected exponential, got {m:?}"),
        }
        // spot check against ½e^{-2π²t}
        let l = 5;
        let exact = 0.5 * (-2.0 * PI * PI * c.lags[l]).exp();
        assert!((c.values[l] - exact).abs() < 4.0 * c.stderr[l] + 0.01, "{} vs {exact}", c.values[l]);
    }

    #[test]
    fn lag_zero_is_the_path_covariance() {
        let c = heat_correlation(50.0, 2, 9);
        // covariance of sin over the same sample points
        let base = integrate_frozen_fast(&heat_torus_system(1.0).unwrap(), &[0.0], &[0.1], 1.0, &TimeGrid::new(50.0, 1e-3).recording_every(100), SeedSpec::new(9)).unwrap();
        let start = base.index_at(1.0);
        let vals: Vec<f64> = (start..base.len()).map(|i| (TAU * base.y(i)[0]).sin()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let cov = vals.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!((c.values[0] - cov).abs() < 1e-12, "{} vs {cov}", c.values[0]);
    }

    #[test]
    fn correlation_with_constant_is_zero_and_bilinear() {
        let (sys, base) = {
            let sys = heat_torus_system(1.0).unwrap();
            let base = integrate_frozen_fast(&sys, &[0.0], &[0.1], 1.0, &TimeGrid::new(20.0, 1e-3).recording_every(10), SeedSpec::new(4)).unwrap();
            (sys, base)
        };
        let flow = FrozenFlow { system: &sys, x: &[0.0], delta: 1.0, dt: 1e-3 };
        let opts = CorrelationOptions { lags: LagGrid::new(0.01, 0.1), replicas: 2, burn_in: 0.5, s_stride: 10, seed: SeedSpec::new(8) };
        let c = estimate_correlation(|_| 2.5, |y| (TAU * y[0]).sin(), &base, &flow, &opts).unwrap();
        assert!(c.values.iter().all(|v| v.abs() < 1e-12), "{:?}", c.values);

        let one = estimate_correlation(|y| (TAU * y[0]).cos(), |y| (TAU * y[0]).sin(), &base, &flow, &opts).unwrap();
        let two = estimate_correlation(|y| 2.0 * (TAU * y[0]).cos(), |y| (TAU * y[0]).sin(), &base, &flow, &opts).unwrap();
        for (a, b) in one.values.iter().zip(&two.values) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn correlation_errors() {
        let (sys, base) = heat_path(10.0, 0.01, 1);
        let flow = FrozenFlow { system: &sys, x: &[0.0], delta: 1.0, dt: 0.01 };
        let mut opts = CorrelationOptions { lags: LagGrid::new(0.01, 2.0), replicas: 1, burn_in: 0.0, s_stride: 1, seed: SeedSpec::new(0) };
        assert!(matches!(
            estimate_correlation(|y| y[0], |y| y[0], &base, &flow, &opts),
            Err(Error::MaxLagTooLarge { .. })
        ));
        opts.lags = LagGrid::new(0.01, 0.5);
        opts.replicas = 0;
        assert!(matches!(estimate_correlation(|y| y[0], |y| y[0], &base, &flow, &opts), Err(Error::ZeroReplicas)));
    }

    #[test]
    fn fit_recovers_exact_exponential() {
        let lags: Vec<f64> = (0..40).map(|k| k as f64 * 0.05).collect();
        let values: Vec<f64> = lags.iter().map(|t| 2.0 * (-3.0 * t).exp()).collect();
        let fit = fit_decay(&CorrelationSeries::from_samples(lags, values)).unwrap();
        match fit.model {
            DecayModel::Exponential { amplitude, rate } => {
                assert!((amplitude - 2.0).abs() < 1e-10);
                assert!((rate - 3.0).abs() < 1e-10);
            }
            m => panic!("{m:?}"),
        }
        assert!(fit.residual <= 1e-10);
        assert!((fit.summability_integral.unwrap() - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn fit_recovers_power_law_and_tail_integral() {
        let lags: Vec<f64> = (0..100).map(|k| 1.0 + k as f64).collect();
        let values: Vec<f64> = lags.iter().map(|t| t.powi(-2)).collect();
        let fit = fit_decay(&CorrelationSeries::from_samples(lags, values)).unwrap();
        match fit.model {
            DecayModel::Power { exponent, .. } => assert!((exponent - 2.0).abs() < 1e-10),
            m => panic!("{m:?}"),
        }
        assert!((fit.summability_integral.unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_summable_power_law_is_flagged() {
        let lags: Vec<f64> = (0..50).map(|k| 1.0 + k as f64).collect();
        let values: Vec<f64> = lags.iter().map(|t| t.powf(-0.5)).collect();
        let fit = fit_decay(&CorrelationSeries::from_samples(lags, values)).unwrap();
        assert!(!fit.summable());
    }

    #[test]
    fn fit_degenerate_and_short_series() {
        let fit = fit_decay(&CorrelationSeries::from_samples(vec![0.0, 1.0, 2.0], vec![0.0; 3])).unwrap();
        assert!(fit.degenerate && fit.summability_integral == Some(0.0));
        let short = CorrelationSeries::from_samples((0..5).map(f64::from).collect(), vec![1.0; 5]);
        assert!(matches!(fit_decay(&short), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn shift_exponent_is_exactly_half_without_drift() {
        let sys = heat_torus_system(1.0).unwrap();
        let deltas = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
        let seeds: Vec<SeedSpec> = (0..4).map(|i| SeedSpec::new(31).member(i)).collect();
        let fit = delta_shift_exponent(&sys, &[0.0], &[0.0], 1.0, 1e-3, &deltas, &seeds).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-10, "slope {}", fit.slope);
    }

    #[test]
    fn shift_exponent_validation() {
        let sys = heat_torus_system(1.0).unwrap();
        let seeds = [SeedSpec::new(0)];
        let err = delta_shift_exponent(&sys, &[0.0], &[0.0], 1.0, 1e-2, &[0.0, 1e-3, 1e-2], &seeds).unwrap_err();
        assert_eq!(err.to_string(), "deltas must be positive");
        assert!(delta_shift_exponent(&sys, &[0.0], &[0.0], 1.0, 1e-2, &[1e-3, 1e-2], &seeds).is_err());
    }

    #[test]
    fn shift_exponent_on_lipschitz_drift() {
        // g(y) = -sin(2πy)/(2π): globally Lipschitz
        let mut spec = SystemSpec::new("lip", 1, 1, VectorField::zero(FieldRole::SlowDrift, 1));
        spec.g = VectorField::new(FieldRole::FastDrift, 1, |_, y, out| out[0] = -(TAU * y[0]).sin() / TAU);
        let sys = make_system(spec).unwrap();
        let deltas = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
        let seeds: Vec<SeedSpec> = (0..4).map(|i| SeedSpec::new(2).member(i)).collect();
        let fit = delta_shift_exponent(&sys, &[0.0], &[0.3], 1.0, 1e-3, &deltas, &seeds).unwrap();
        assert!((0.35..=0.65).contains(&fit.slope), "slope {}", fit.slope);
    }

    #[test]
    fn density_of_heat_fixture_is_uniform() {
        let (_, traj) = heat_path(1000.0, 0.01, 12);
        let hist = estimate_density(&traj, &[64], None, 1.0).unwrap();
        assert!((hist.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let per_bin = hist.count as f64 / 64.0;
        let band = 4.0 / per_bin.sqrt();
        let sup = hist.masses.iter().map(|m| (m - 1.0 / 64.0).abs()).fold(0.0, f64::max);
        assert!(sup < band, "sup {sup} band {band}");
    }

    #[test]
    fn density_single_point_and_unbounded() {
        let sys = heat_torus_system(1.0).unwrap();
        let traj = integrate_frozen_fast(&sys, &[0.0], &[1.3], 0.0, &TimeGrid::new(0.01, 0.01).recording_every(5), SeedSpec::new(0)).unwrap();
        assert_eq!(traj.len(), 1);
        let hist = estimate_density(&traj, &[10], None, 0.0).unwrap();
        assert_eq!(hist.masses.iter().filter(|m| **m == 1.0).count(), 1);
        assert!((hist.masses[3] - 1.0).abs() < 1e-15);

        let lorenz = crate::dynamics::lorenz_system(1.0, 0.0).unwrap();
        let path = integrate_frozen_fast(&lorenz, &[0.0], &crate::dynamics::LORENZ_REFERENCE_POINT, 0.0, &TimeGrid::new(1.0, 1e-3), SeedSpec::new(0)).unwrap();
        assert!(estimate_density(&path, &[4, 4, 4], None, 0.0).is_err());
        let boxed = estimate_density(&path, &[4, 4, 4], Some(&[(-30.0, 30.0), (-30.0, 30.0), (0.0, 60.0)]), 0.0).unwrap();
        assert_eq!(boxed.bins(), 64);
        assert!((boxed.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_l1_distance_follows_monte_carlo_rate() {
        let sys = heat_torus_system(1.0).unwrap();
        let mean_l1 = |t: f64| {
            (0..8)
                .map(|s| {
                    let traj = integrate_frozen_fast(&sys, &[0.0], &[0.1], 1.0, &TimeGrid::new(t, 0.01), SeedSpec::new(50).member(s)).unwrap();
                    estimate_density(&traj, &[16], None, 0.0).unwrap().l1_to_uniform()
                })
                .sum::<f64>()
                / 8.0
        };
        let ratio = mean_l1(1000.0) / mean_l1(2000.0);
        assert!((1.2..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn decay_stability_flags_slow_bounds() {
        let fit = |amplitude, rate| DecayFit {
            model: DecayModel::Exponential { amplitude, rate },
            summability_integral: Some(amplitude / rate),
            residual: 0.0,
            exponential_residual: 0.0,
            power_residual: 1.0,
            points: 20,
            degenerate: false,
        };
        let lags: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let reference = fit(1.0, 2.0);
        let checks = decay_stability(&reference, &[(0.5, fit(0.5, 3.0)), (0.1, fit(0.5, 1.0))], &lags);
        assert!(checks[0].stable());
        // 0.5e^{-t} crosses e^{-2t} at t = ln 2
        assert!(!checks[1].stable());
        assert!(checks[1].violations.iter().all(|&t| t > 2f64.ln()));
        assert_eq!(checks[1].violations.len(), 4);
    }
}
