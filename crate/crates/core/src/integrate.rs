//! Fixed-step integrators for the full fast-slow system, the frozen fast flow
//! and its tangent (variational) flow, plus ensembles of full-system runs.
//!
//! With δ = 0 the classical fourth-order Runge-Kutta step is used; with δ > 0 the
//! Euler-Maruyama step. The full system is integrated in slow time and the step
//! must satisfy `dt ≤ ε²/10`. Frozen flows run in fast time (ε = 1):
//!
//! ```text
//! dφ = g(x, φ) dt + √δ dV
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{FastSlowSystem, FastSpace, NoiseScaling, RhsScratch};
use crate::error::{Error, Result};
use crate::rng::{NoiseStream, SeedSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Runge-Kutta 4 when noise-free, Euler-Maruyama otherwise.
    #[default]
    Auto,
    EulerMaruyama,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Resolved {
    Euler,
    Rk4,
}

impl Scheme {
    pub(crate) fn resolve(self, noisy: bool) -> Result<Resolved> {
        match (self, noisy) {
            (Scheme::Auto, false) | (Scheme::Rk4, false) => Ok(Resolved::Rk4),
            (Scheme::Auto, true) | (Scheme::EulerMaruyama, _) => Ok(Resolved::Euler),
            (Scheme::Rk4, true) => Err(Error::invalid("the Runge-Kutta scheme is noise-free; use Euler-Maruyama for delta > 0")),
        }
    }
}

/// Duration, step, recording stride and scheme of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub duration: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

fn one() -> usize {
    1
}

impl TimeGrid {
    pub fn new(duration: f64, dt: f64) -> Self {
        Self { duration, dt, record_every: 1, scheme: Scheme::Auto }
    }

    pub fn recording_every(mut self, k: usize) -> Self {
        self.record_every = k.max(1);
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Number of steps `round(duration/dt)`.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("step must be positive, got {}", self.dt)));
        }
        if !(self.duration >= self.dt * (1.0 - 1e-9)) || !self.duration.is_finite() {
            return Err(Error::invalid(format!(
                "duration {} shorter than one step {}",
                self.duration, self.dt
            )));
        }
        Ok((self.duration / self.dt).round() as usize)
    }

    pub fn sample_spacing(&self) -> f64 {
        self.dt * self.record_every as f64
    }
}

/// Recorded path. Fast states are stored unwrapped; fast-only runs have `d = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x_path: Vec<f64>,
    pub y_path: Vec<f64>,
    pub d: usize,
    pub m: usize,
    pub seed: SeedSpec,
    /// Integration step.
    pub dt: f64,
    pub record_every: usize,
    pub fast_space: FastSpace,
    pub system_hash: u64,
}

impl Trajectory {
    pub(crate) fn with_capacity(d: usize, m: usize, records: usize, grid: &TimeGrid, seed: SeedSpec, space: FastSpace, hash: u64) -> Self {
        Self {
            times: Vec::with_capacity(records),
            x_path: Vec::with_capacity(records * d),
            y_path: Vec::with_capacity(records * m),
            d,
            m,
            seed,
            dt: grid.dt,
            record_every: grid.record_every,
            fast_space: space,
            system_hash: hash,
        }
    }

    pub(crate) fn push(&mut self, step: usize, x: &[f64], y: &[f64]) {
        self.times.push(step as f64 * self.dt);
        self.x_path.extend_from_slice(x);
        self.y_path.extend_from_slice(y);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x_path[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.y_path[i * self.m..(i + 1) * self.m]
    }

    /// Fast state as read by observables (wrapped onto the torus when applicable).
    pub fn y_read<'a>(&'a self, i: usize, buf: &'a mut [f64]) -> &'a [f64] {
        let y = self.y(i);
        match self.fast_space {
            FastSpace::Unbounded => y,
            FastSpace::TorusUnit => {
                for (b, v) in buf.iter_mut().zip(y) {
                    *b = v.rem_euclid(1.0);
                }
                buf
            }
        }
    }

    pub fn sample_spacing(&self) -> f64 {
        self.dt * self.record_every as f64
    }

    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Index of the first record at or after time `t`.
    pub fn index_at(&self, t: f64) -> usize {
        let first = self.times.first().copied().unwrap_or(0.0);
        let k = ((t - first) / self.sample_spacing() - 1e-9).ceil().max(0.0) as usize;
        k.min(self.len())
    }

    pub fn last_x(&self) -> &[f64] {
        self.x(self.len() - 1)
    }

    pub fn last_y(&self) -> &[f64] {
        self.y(self.len() - 1)
    }
}

/// Classical RK4 on a flat state. `rhs` returns `false` on non-finite output.
#[derive(Debug, Clone)]
pub(crate) struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }

    pub(crate) fn step<F>(&mut self, state: &mut [f64], dt: f64, mut rhs: F) -> bool
    where
        F: FnMut(&[f64], &mut [f64]) -> bool,
    {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        let mut ok = rhs(state, k1);
        for i in 0..state.len() {
            tmp[i] = state[i] + 0.5 * dt * k1[i];
        }
        ok &= rhs(tmp, k2);
        for i in 0..state.len() {
            tmp[i] = state[i] + 0.5 * dt * k2[i];
        }
        ok &= rhs(tmp, k3);
        for i in 0..state.len() {
            tmp[i] = state[i] + dt * k3[i];
        }
        ok &= rhs(tmp, k4);
        for i in 0..state.len() {
            state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        ok && state.iter().all(|v| v.is_finite())
    }
}

fn check_len(field: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { field, expected, found: v.len() });
    }
    if v.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid(format!("{field} must be finite")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidDelta { value: delta, reason: "must be finite and nonnegative" });
    }
    Ok(())
}

/// Integrate the full fast-slow system from `(xi, eta)` on `grid`.
pub fn integrate_fast_slow(
    system: &FastSlowSystem,
    xi: &[f64],
    eta: &[f64],
    grid: &TimeGrid,
    seed: SeedSpec,
) -> Result<Trajectory> {
    let (d, m) = (system.d(), system.m());
    check_len("xi", xi, d)?;
    check_len("eta", eta, m)?;
    let steps = grid.steps()?;
    let eps = system.epsilon();
    let limit = eps * eps / 10.0;
    if grid.dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt: grid.dt, limit });
    }
    let delta = system.delta();
    let scheme = grid.scheme.resolve(delta > 0.0)?;
    let amplitude = match system.noise_scaling() {
        NoiseScaling::Regularized => delta.sqrt() / eps,
        NoiseScaling::OrderOne => delta,
    };

    let dt = grid.dt;
    let records = steps / grid.record_every + 1;
    let mut traj = Trajectory::with_capacity(d, m, records, grid, seed, system.fast_space(), system.hash());
    let mut state: Vec<f64> = xi.iter().chain(eta).copied().collect();
    traj.push(0, xi, eta);

    let mut scratch = RhsScratch::new(system);
    let mut rhs = |s: &[f64], out: &mut [f64]| {
        let (x, y) = s.split_at(d);
        let (slow, fast) = out.split_at_mut(d);
        system.rhs_into(x, y, slow, fast, &mut scratch)
    };

    match scheme {
        Resolved::Rk4 => {
            let mut rk = Rk4::new(d + m);
            for step in 1..=steps {
                if !rk.step(&mut state, dt, &mut rhs) {
                    return Err(Error::NonFinite { what: "state", time: step as f64 * dt });
                }
                if step % grid.record_every == 0 {
                    traj.push(step, &state[..d], &state[d..]);
                }
            }
        }
        Resolved::Euler => {
            let mut noise = NoiseStream::new(seed, m);
            let mut z = vec![0.0; m];
            let mut rate = vec![0.0; d + m];
            let scale = amplitude * dt.sqrt();
            for step in 1..=steps {
                let ok = rhs(&state, &mut rate);
                noise.fill(&mut z);
                for i in 0..d + m {
                    state[i] += dt * rate[i];
                }
                for j in 0..m {
                    state[d + j] += scale * z[j];
                }
                if !ok || state.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "state", time: step as f64 * dt });
                }
                if step % grid.record_every == 0 {
                    traj.push(step, &state[..d], &state[d..]);
                }
            }
        }
    }
    Ok(traj)
}

/// Single-path stepper for the frozen fast flow `dφ = g(x,φ)dt + √δ dV`.
pub(crate) struct FrozenStepper<'a> {
    system: &'a FastSlowSystem,
    x: &'a [f64],
    dt: f64,
    scheme: Resolved,
    noise_scale: f64,
    noise: Option<NoiseStream>,
    z: Vec<f64>,
    rate: Vec<f64>,
    wrap: Vec<f64>,
    rk: Rk4,
}

impl<'a> FrozenStepper<'a> {
    pub(crate) fn new(
        system: &'a FastSlowSystem,
        x: &'a [f64],
        delta: f64,
        dt: f64,
        scheme: Scheme,
        seed: SeedSpec,
    ) -> Result<Self> {
        let m = system.m();
        let scheme = scheme.resolve(delta > 0.0)?;
        Ok(Self {
            system,
            x,
            dt,
            scheme,
            noise_scale: (delta * dt).sqrt(),
            noise: (delta > 0.0).then(|| NoiseStream::new(seed, m)),
            z: vec![0.0; m],
            rate: vec![0.0; m],
            wrap: vec![0.0; m],
            rk: Rk4::new(m),
        })
    }

    /// Advance `y` by one step; `false` if the state became non-finite.
    #[inline]
    pub(crate) fn step(&mut self, y: &mut [f64]) -> bool {
        let (sys, x) = (self.system, self.x);
        let wrap = &mut self.wrap;
        let mut g = |s: &[f64], out: &mut [f64]| {
            let yr = sys.read_fast(s, wrap);
            sys.g().eval(x, yr, out);
            true
        };
        match self.scheme {
            Resolved::Rk4 => {
                self.rk.step(y, self.dt, g);
            }
            Resolved::Euler => {
                g(y, &mut self.rate);
                for (v, r) in y.iter_mut().zip(&self.rate) {
                    *v += self.dt * r;
                }
                if let Some(noise) = &mut self.noise {
                    noise.fill(&mut self.z);
                    for (v, z) in y.iter_mut().zip(&self.z) {
                        *v += self.noise_scale * z;
                    }
                }
            }
        }
        y.iter().all(|v| v.is_finite())
    }
}

/// Path of the frozen fast flow `φₓ^{δ,t}(y0)` (fast time, ε = 1).
pub fn integrate_frozen_fast(
    system: &FastSlowSystem,
    x: &[f64],
    y0: &[f64],
    delta: f64,
    grid: &TimeGrid,
    seed: SeedSpec,
) -> Result<Trajectory> {
    check_len("x", x, system.d())?;
    check_len("y0", y0, system.m())?;
    check_delta(delta)?;
    let steps = grid.steps()?;
    let mut stepper = FrozenStepper::new(system, x, delta, grid.dt, grid.scheme, seed)?;
    let mut traj = Trajectory::with_capacity(0, system.m(), steps / grid.record_every + 1, grid, seed, system.fast_space(), system.hash());
    let mut y = y0.to_vec();
    traj.push(0, &[], &y);
    for step in 1..=steps {
        if !stepper.step(&mut y) {
            return Err(Error::NonFinite { what: "fast state", time: step as f64 * grid.dt });
        }
        if step % grid.record_every == 0 {
            traj.push(step, &[], &y);
        }
    }
    Ok(traj)
}

/// Fast state with sensitivities `J_x = ∇ₓφ` (m×d) and `J_y = ∇_yφ` (m×m), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentFlowState {
    pub t: f64,
    pub y: Vec<f64>,
    pub j_x: Vec<f64>,
    pub j_y: Vec<f64>,
}

/// Which sensitivities a variational run carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Track {
    pub x: bool,
    pub y: bool,
}

impl Track {
    pub(crate) const BOTH: Track = Track { x: true, y: true };
}

/// Stepper for `(φ, J_x, J_y)`:
///
/// ```text
/// dJ_x/dt = ∇ₓg + ∇_y g · J_x,   J_x(0) = 0
/// dJ_y/dt = ∇_y g · J_y,         J_y(0) = I
/// ```
///
/// driven by the same noise as `φ`. The flat state is `[y | J_x | J_y]`.
pub(crate) struct VariationalStepper<'a> {
    system: &'a FastSlowSystem,
    x: &'a [f64],
    dt: f64,
    scheme: Resolved,
    noise_scale: f64,
    noise: Option<NoiseStream>,
    track: Track,
    pub(crate) state: Vec<f64>,
    rate: Vec<f64>,
    z: Vec<f64>,
    work: VariationalWork,
    rk: Rk4,
    pub(crate) used_finite_differences: bool,
}

struct VariationalWork {
    wrap: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl<'a> VariationalStepper<'a> {
    pub(crate) fn new(
        system: &'a FastSlowSystem,
        x: &'a [f64],
        delta: f64,
        dt: f64,
        scheme: Scheme,
        seed: SeedSpec,
        track: Track,
    ) -> Result<Self> {
        let (d, m) = (system.d(), system.m());
        let scheme = scheme.resolve(delta > 0.0)?;
        let n = m + if track.x { m * d } else { 0 } + if track.y { m * m } else { 0 };
        Ok(Self {
            system,
            x,
            dt,
            scheme,
            noise_scale: (delta * dt).sqrt(),
            noise: (delta > 0.0).then(|| NoiseStream::new(seed, m)),
            track,
            state: vec![0.0; n],
            rate: vec![0.0; n],
            z: vec![0.0; m],
            work: VariationalWork { wrap: vec![0.0; m], gx: vec![0.0; m * d], gy: vec![0.0; m * m] },
            rk: Rk4::new(n),
            used_finite_differences: false,
        })
    }

    /// Reset to `(y0, 0, I)`.
    pub(crate) fn reset(&mut self, y0: &[f64]) {
        let (d, m) = (self.system.d(), self.system.m());
        self.state.fill(0.0);
        self.state[..m].copy_from_slice(y0);
        if self.track.y {
            let off = self.jy_offset();
            for i in 0..m {
                self.state[off + i * m + i] = 1.0;
            }
        }
        let _ = d;
    }

    /// Replace the noise stream (for restarts along a single stepper).
    pub(crate) fn reseed(&mut self, seed: SeedSpec) {
        if self.noise.is_some() {
            self.noise = Some(NoiseStream::new(seed, self.system.m()));
        }
    }

    fn jy_offset(&self) -> usize {
        let (d, m) = (self.system.d(), self.system.m());
        m + if self.track.x { m * d } else { 0 }
    }

    pub(crate) fn y(&self) -> &[f64] {
        &self.state[..self.system.m()]
    }

    pub(crate) fn j_x(&self) -> Option<&[f64]> {
        let (d, m) = (self.system.d(), self.system.m());
        self.track.x.then(|| &self.state[m..m + m * d])
    }

    pub(crate) fn j_y(&self) -> Option<&[f64]> {
        let m = self.system.m();
        let off = self.jy_offset();
        self.track.y.then(|| &self.state[off..off + m * m])
    }

    fn derivative(
        system: &FastSlowSystem,
        x: &[f64],
        track: Track,
        work: &mut VariationalWork,
        s: &[f64],
        out: &mut [f64],
    ) -> bool {
        let (d, m) = (system.d(), system.m());
        let (y, rest) = s.split_at(m);
        let yr = system.read_fast(y, &mut work.wrap);
        system.g().eval(x, yr, &mut out[..m]);
        let mut fd = system.g().jacobian_y(x, yr, &mut work.gy);
        let mut off = m;
        let mut rest_off = 0;
        if track.x {
            fd |= system.g().jacobian_x(x, yr, &mut work.gx);
            let jx = &rest[rest_off..rest_off + m * d];
            for i in 0..m {
                for j in 0..d {
                    let mut acc = work.gx[i * d + j];
                    for k in 0..m {
                        acc += work.gy[i * m + k] * jx[k * d + j];
                    }
                    out[off + i * d + j] = acc;
                }
            }
            off += m * d;
            rest_off += m * d;
        }
        if track.y {
            let jy = &rest[rest_off..rest_off + m * m];
            for i in 0..m {
                for j in 0..m {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += work.gy[i * m + k] * jy[k * m + j];
                    }
                    out[off + i * m + j] = acc;
                }
            }
        }
        fd
    }

    pub(crate) fn step(&mut self) -> bool {
        let (sys, x, track) = (self.system, self.x, self.track);
        let work = &mut self.work;
        let mut fd = false;
        match self.scheme {
            Resolved::Rk4 => {
                self.rk.step(&mut self.state, self.dt, |s, out| {
                    fd |= Self::derivative(sys, x, track, work, s, out);
                    true
                });
            }
            Resolved::Euler => {
                fd = Self::derivative(sys, x, track, work, &self.state, &mut self.rate);
                for (v, r) in self.state.iter_mut().zip(&self.rate) {
                    *v += self.dt * r;
                }
                if let Some(noise) = &mut self.noise {
                    noise.fill(&mut self.z);
                    for (v, z) in self.state.iter_mut().zip(&self.z) {
                        *v += self.noise_scale * z;
                    }
                }
            }
        }
        self.used_finite_differences |= fd;
        self.state.iter().all(|v| v.is_finite())
    }

    fn snapshot(&self, t: f64) -> TangentFlowState {
        TangentFlowState {
            t,
            y: self.y().to_vec(),
            j_x: self.j_x().map(<[f64]>::to_vec).unwrap_or_default(),
            j_y: self.j_y().map(<[f64]>::to_vec).unwrap_or_default(),
        }
    }
}

/// Frozen fast flow together with its Jacobians, recorded on `grid`.
pub fn integrate_variational(
    system: &FastSlowSystem,
    x: &[f64],
    y0: &[f64],
    delta: f64,
    grid: &TimeGrid,
    seed: SeedSpec,
) -> Result<Vec<TangentFlowState>> {
    check_len("x", x, system.d())?;
    check_len("y0", y0, system.m())?;
    check_delta(delta)?;
    let steps = grid.steps()?;
    let mut stepper = VariationalStepper::new(system, x, delta, grid.dt, grid.scheme, seed, Track::BOTH)?;
    stepper.reset(y0);
    let mut out = Vec::with_capacity(steps / grid.record_every + 1);
    out.push(stepper.snapshot(0.0));
    for step in 1..=steps {
        if !stepper.step() {
            return Err(Error::NonFinite { what: "tangent flow", time: step as f64 * grid.dt });
        }
        if step % grid.record_every == 0 {
            out.push(stepper.snapshot(step as f64 * grid.dt));
        }
    }
    Ok(out)
}

/// How ensemble members obtain their fast initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialFast {
    /// Every member starts at the same η.
    Fixed(Vec<f64>),
    /// Member `i` starts at `φ^{burn_in + i·spacing}(from)` of the frozen flow at `x = ξ`.
    Attractor {
        from: Vec<f64>,
        burn_in: f64,
        spacing: f64,
        dt: f64,
    },
}

impl InitialFast {
    /// Attractor sampling with 10 time units of burn-in.
    pub fn attractor(from: Vec<f64>, spacing: f64, dt: f64) -> Self {
        InitialFast::Attractor { from, burn_in: 10.0, spacing, dt }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleTask {
    pub system: FastSlowSystem,
    pub xi: Vec<f64>,
    pub initial: InitialFast,
    pub grid: TimeGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub members: Vec<Trajectory>,
    pub seed: SeedSpec,
}

impl EnsembleResult {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Component `comp` of the slow state at record `i` across members.
    pub fn slow_values(&self, i: usize, comp: usize) -> Vec<f64> {
        self.members.iter().map(|t| t.x(i)[comp]).collect()
    }

    /// Record times (shared by all members).
    pub fn times(&self) -> &[f64] {
        &self.members[0].times
    }

    /// Ensemble mean and its standard error of slow component `comp` at record `i`.
    pub fn slow_mean(&self, i: usize, comp: usize) -> (f64, f64) {
        mean_and_stderr(&self.slow_values(i, comp))
    }
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Fast states sampled along one frozen-flow path at `x`, after burn-in.
pub fn sample_attractor(
    system: &FastSlowSystem,
    x: &[f64],
    from: &[f64],
    count: usize,
    burn_in: f64,
    spacing: f64,
    dt: f64,
    seed: SeedSpec,
) -> Result<Vec<Vec<f64>>> {
    check_len("x", x, system.d())?;
    check_len("from", from, system.m())?;
    if !(spacing > 0.0) || !(burn_in >= 0.0) || !(dt > 0.0) {
        return Err(Error::invalid("attractor sampling needs positive spacing and step, nonnegative burn-in"));
    }
    let burn_steps = (burn_in / dt).round() as usize;
    let gap = ((spacing / dt).round() as usize).max(1);
    let mut stepper = FrozenStepper::new(system, x, system.delta(), dt, Scheme::Auto, seed)?;
    let mut y = from.to_vec();
    for step in 0..burn_steps {
        if !stepper.step(&mut y) {
            return Err(Error::NonFinite { what: "burn-in state", time: (step + 1) as f64 * dt });
        }
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i > 0 {
            for _ in 0..gap {
                if !stepper.step(&mut y) {
                    return Err(Error::NonFinite { what: "attractor sample", time: burn_in + i as f64 * spacing });
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// `n` independent runs; member `i` uses noise stream `seed.stream + i`.
pub fn run_ensemble(task: &EnsembleTask, n: usize, seed: SeedSpec) -> Result<EnsembleResult> {
    if n == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let starts: Vec<Vec<f64>> = match &task.initial {
        InitialFast::Fixed(eta) => vec![eta.clone(); n],
        InitialFast::Attractor { from, burn_in, spacing, dt } => sample_attractor(
            &task.system,
            &task.xi,
            from,
            n,
            *burn_in,
            *spacing,
            *dt,
            seed.child(u64::MAX),
        )?,
    };
    let members: Vec<Result<Trajectory>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, eta)| integrate_fast_slow(&task.system, &task.xi, eta, &task.grid, seed.member(i as u64)))
        .collect();
    let members = members
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Member { index, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleResult { members, seed })
}
