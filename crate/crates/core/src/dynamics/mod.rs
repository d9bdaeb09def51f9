//! Fast-slow system model.
//!
//! A system on ℝᵈ × (𝕋ᵐ or ℝᵐ) evolves as
//!
//! ```text
//! dx/dt = a(x,y) + ε⁻¹ b(x,y)
//! dy/dt = ε⁻² g(x,y) + ε⁻¹ h(x,y) + r(x,y)   (+ noise, added by the integrators)
//! ```
//!
//! with `h` and `r` optional. Vector fields are plain closures so new systems
//! can be added at compile time; see [`fixtures`] for the built-in ones.

pub mod fixtures;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use fixtures::{
    build_fixture, heat_averaging_system, heat_coupled_system, heat_torus_system,
    heat_weak_system, linear_decay_system, lorenz_case_study, lorenz_system, heat_case_study,
    CaseStudy, FixtureSpec, LORENZ_COUPLING, LORENZ_REFERENCE_POINT, LORENZ_SIGMA2,
};

/// Evaluator signature: `(x, y, out)`. Jacobians use the same signature and fill
/// `out` row-major with shape `out_dim × len(x)` or `out_dim × len(y)`.
pub type FieldFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRole {
    SlowDrift,
    FastCoupling,
    FastDrift,
    Intermediate,
    SlowScaleFast,
}

impl FieldRole {
    fn symbol(self) -> &'static str {
        match self {
            FieldRole::SlowDrift => "a",
            FieldRole::FastCoupling => "b",
            FieldRole::FastDrift => "g",
            FieldRole::Intermediate => "h",
            FieldRole::SlowScaleFast => "r",
        }
    }

    fn is_slow(self) -> bool {
        matches!(self, FieldRole::SlowDrift | FieldRole::FastCoupling)
    }
}

/// Which argument a Jacobian is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Slow,
    Fast,
}

/// Relative step of the fallback central differences: `h = 1e-6·(1 + |z|)`.
pub const FD_RELATIVE_STEP: f64 = 1e-6;

#[derive(Clone)]
pub struct VectorField {
    role: FieldRole,
    out_dim: usize,
    eval: FieldFn,
    jac_x: Option<FieldFn>,
    jac_y: Option<FieldFn>,
    zero: bool,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("role", &self.role)
            .field("out_dim", &self.out_dim)
            .field("analytic_jacobians", &self.has_analytic_jacobians())
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(role: FieldRole, out_dim: usize, eval: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            role,
            out_dim,
            eval: Arc::new(eval),
            jac_x: None,
            jac_y: None,
            zero: false,
        }
    }

    /// The identically zero field, with exact (zero) Jacobians.
    pub fn zero(role: FieldRole, out_dim: usize) -> Self {
        let z: FieldFn = Arc::new(|_, _, out: &mut [f64]| out.fill(0.0));
        Self {
            role,
            out_dim,
            eval: z.clone(),
            jac_x: Some(z.clone()),
            jac_y: Some(z),
            zero: true,
        }
    }

    pub fn with_jacobians<JX, JY>(mut self, jac_x: JX, jac_y: JY) -> Self
    where
        JX: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        JY: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.jac_x = Some(Arc::new(jac_x));
        self.jac_y = Some(Arc::new(jac_y));
        self
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_x.is_some() && self.jac_y.is_some()
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.eval)(x, y, out)
    }

    /// Jacobian with respect to `x` (row-major `out_dim × d`). Returns `true`
    /// when the value came from finite differences.
    pub fn jacobian_x(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        match &self.jac_x {
            Some(j) => {
                j(x, y, out);
                false
            }
            None => {
                self.finite_difference_jacobian(Wrt::Slow, x, y, FD_RELATIVE_STEP, out);
                true
            }
        }
    }

    /// Jacobian with respect to `y` (row-major `out_dim × m`).
    pub fn jacobian_y(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        match &self.jac_y {
            Some(j) => {
                j(x, y, out);
                false
            }
            None => {
                self.finite_difference_jacobian(Wrt::Fast, x, y, FD_RELATIVE_STEP, out);
                true
            }
        }
    }

    /// Analytic Jacobian if one was supplied.
    pub fn analytic_jacobian(&self, wrt: Wrt, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        let j = match wrt {
            Wrt::Slow => &self.jac_x,
            Wrt::Fast => &self.jac_y,
        };
        match j {
            Some(j) => {
                j(x, y, out);
                true
            }
            None => false,
        }
    }

    /// Central differences with step `relative_step·(1 + |z_j|)` per coordinate.
    pub fn finite_difference_jacobian(
        &self,
        wrt: Wrt,
        x: &[f64],
        y: &[f64],
        relative_step: f64,
        out: &mut [f64],
    ) {
        let (n_in, base) = match wrt {
            Wrt::Slow => (x.len(), x),
            Wrt::Fast => (y.len(), y),
        };
        let mut shifted = base.to_vec();
        let mut plus = vec![0.0; self.out_dim];
        let mut minus = vec![0.0; self.out_dim];
        for j in 0..n_in {
            let step = relative_step * (1.0 + base[j].abs());
            shifted[j] = base[j] + step;
            match wrt {
                Wrt::Slow => self.eval(&shifted, y, &mut plus),
                Wrt::Fast => self.eval(x, &shifted, &mut plus),
            }
            shifted[j] = base[j] - step;
            match wrt {
                Wrt::Slow => self.eval(&shifted, y, &mut minus),
                Wrt::Fast => self.eval(x, &shifted, &mut minus),
            }
            shifted[j] = base[j];
            for i in 0..self.out_dim {
                out[i * n_in + j] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingClass {
    General,
    WeaklyCoupled,
    SkewProduct,
}

impl CouplingClass {
    pub fn as_str(self) -> &'static str {
        match self {
            CouplingClass::General => "general",
            CouplingClass::WeaklyCoupled => "weakly_coupled",
            CouplingClass::SkewProduct => "skew_product",
        }
    }

    /// Classes whose fast drift `g` may not depend on `x`.
    pub fn fast_drift_is_x_free(self) -> bool {
        !matches!(self, CouplingClass::General)
    }
}

/// `TorusUnit` is [0,1)ᵐ, wrapped when read; states are stored unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastSpace {
    TorusUnit,
    Unbounded,
}

/// How noise enters the fast equation of the full system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    /// `ε⁻¹ √δ dV`, the regularized fast SDE.
    Regularized,
    /// `δ dV` at order one, as in the Lorenz case study.
    OrderOne,
}

/// Structured description handed to [`make_system`].
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub name: String,
    pub d: usize,
    pub m: usize,
    pub a: VectorField,
    pub b: VectorField,
    pub g: VectorField,
    pub h: Option<VectorField>,
    pub r: Option<VectorField>,
    pub epsilon: f64,
    pub delta: f64,
    pub coupling_class: CouplingClass,
    pub fast_space: FastSpace,
    pub noise_scaling: NoiseScaling,
    /// Descriptive parameters folded into the system hash.
    pub params: Vec<(String, f64)>,
}

impl SystemSpec {
    /// A spec with `b = g = 0`, no `h`/`r`, ε = 1, δ = 0, skew-product class.
    pub fn new(name: impl Into<String>, d: usize, m: usize, a: VectorField) -> Self {
        Self {
            name: name.into(),
            d,
            m,
            a,
            b: VectorField::zero(FieldRole::FastCoupling, d),
            g: VectorField::zero(FieldRole::FastDrift, m),
            h: None,
            r: None,
            epsilon: 1.0,
            delta: 0.0,
            coupling_class: CouplingClass::SkewProduct,
            fast_space: FastSpace::TorusUnit,
            noise_scaling: NoiseScaling::Regularized,
            params: Vec::new(),
        }
    }
}

/// A validated fast-slow system. Immutable; cheap to clone and share.
#[derive(Debug, Clone)]
pub struct FastSlowSystem {
    name: String,
    d: usize,
    m: usize,
    a: VectorField,
    b: VectorField,
    g: VectorField,
    h: Option<VectorField>,
    r: Option<VectorField>,
    epsilon: f64,
    delta: f64,
    coupling_class: CouplingClass,
    fast_space: FastSpace,
    noise_scaling: NoiseScaling,
    params: Vec<(String, f64)>,
    hash: u64,
}

const X_PROBE_TOL: f64 = 1e-12;

pub fn make_system(spec: SystemSpec) -> Result<FastSlowSystem> {
    let SystemSpec {
        name,
        d,
        m,
        a,
        b,
        g,
        h,
        r,
        epsilon,
        delta,
        coupling_class,
        fast_space,
        noise_scaling,
        params,
    } = spec;

    if d == 0 {
        return Err(Error::DimensionMismatch { field: "d", expected: 1, found: 0 });
    }
    if m == 0 {
        return Err(Error::DimensionMismatch { field: "m", expected: 1, found: 0 });
    }
    let check = |field: &VectorField| -> Result<()> {
        let expected = if field.role().is_slow() { d } else { m };
        if field.out_dim() != expected {
            return Err(Error::DimensionMismatch {
                field: field.role().symbol(),
                expected,
                found: field.out_dim(),
            });
        }
        Ok(())
    };
    for field in [&a, &b, &g].into_iter().chain(h.iter()).chain(r.iter()) {
        check(field)?;
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidDelta { value: delta, reason: "must be finite and nonnegative" });
    }
    if coupling_class.fast_drift_is_x_free() && depends_on_x(&g, d, m) {
        return Err(Error::XDependentFastDrift(coupling_class.as_str()));
    }

    let mut sys = FastSlowSystem {
        name,
        d,
        m,
        a,
        b,
        g,
        h,
        r,
        epsilon,
        delta,
        coupling_class,
        fast_space,
        noise_scaling,
        params,
        hash: 0,
    };
    sys.hash = sys.compute_hash();
    Ok(sys)
}

/// Probe `g` at x = 0 and x = 1 for two fast states.
fn depends_on_x(g: &VectorField, d: usize, m: usize) -> bool {
    let x0 = vec![0.0; d];
    let x1 = vec![1.0; d];
    let probes: [Vec<f64>; 2] = [
        (0..m).map(|i| 0.3 + 0.1 * i as f64).collect(),
        (0..m).map(|i| 0.71 - 0.23 * i as f64).collect(),
    ];
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; m];
    probes.iter().any(|y| {
        g.eval(&x0, y, &mut u);
        g.eval(&x1, y, &mut v);
        u.iter().zip(&v).any(|(p, q)| (p - q).abs() > X_PROBE_TOL)
    })
}

impl FastSlowSystem {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn coupling_class(&self) -> CouplingClass {
        self.coupling_class
    }
    pub fn fast_space(&self) -> FastSpace {
        self.fast_space
    }
    pub fn noise_scaling(&self) -> NoiseScaling {
        self.noise_scaling
    }
    pub fn a(&self) -> &VectorField {
        &self.a
    }
    pub fn b(&self) -> &VectorField {
        &self.b
    }
    pub fn g(&self) -> &VectorField {
        &self.g
    }
    pub fn h(&self) -> Option<&VectorField> {
        self.h.as_ref()
    }
    pub fn r(&self) -> Option<&VectorField> {
        self.r.as_ref()
    }
    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }
    /// Stable content hash of the system description.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    /// Fields whose Jacobians fall back to finite differences.
    pub fn finite_difference_fields(&self) -> Vec<&'static str> {
        [Some(&self.a), Some(&self.b), Some(&self.g), self.h.as_ref(), self.r.as_ref()]
            .into_iter()
            .flatten()
            .filter(|f| !f.has_analytic_jacobians())
            .map(|f| f.role().symbol())
            .collect()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::NonPositiveEpsilon(epsilon));
        }
        let mut s = self.clone();
        s.epsilon = epsilon;
        s.hash = s.compute_hash();
        Ok(s)
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidDelta { value: delta, reason: "must be finite and nonnegative" });
        }
        let mut s = self.clone();
        s.delta = delta;
        s.hash = s.compute_hash();
        Ok(s)
    }

    fn compute_hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        let descr = format!(
            "{}|d={}|m={}|eps={:e}|delta={:e}|{}|{:?}|{:?}|h={}|r={}",
            self.name,
            self.d,
            self.m,
            self.epsilon,
            self.delta,
            self.coupling_class.as_str(),
            self.fast_space,
            self.noise_scaling,
            self.h.is_some(),
            self.r.is_some(),
        );
        hasher.update(descr.as_bytes());
        for (k, v) in &self.params {
            hasher.update(format!("|{k}={v:e}").as_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    /// The fast state as seen by the vector fields: wrapped onto [0,1)ᵐ on the torus.
    #[inline]
    pub fn read_fast<'a>(&self, y: &'a [f64], buf: &'a mut [f64]) -> &'a [f64] {
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

    /// Deterministic right-hand side into caller buffers. `scratch` must hold `m`
    /// values; returns `false` if any output is non-finite.
    pub fn rhs_into(
        &self,
        x: &[f64],
        y: &[f64],
        slow: &mut [f64],
        fast: &mut [f64],
        scratch: &mut RhsScratch,
    ) -> bool {
        let eps = self.epsilon;
        let yr = self.read_fast(y, &mut scratch.wrapped);
        self.a.eval(x, yr, slow);
        if !self.b.is_zero() {
            self.b.eval(x, yr, &mut scratch.slow);
            for (s, v) in slow.iter_mut().zip(&scratch.slow) {
                *s += v / eps;
            }
        }
        self.g.eval(x, yr, fast);
        let inv_eps2 = 1.0 / (eps * eps);
        for f in fast.iter_mut() {
            *f *= inv_eps2;
        }
        if let Some(h) = &self.h {
            h.eval(x, yr, &mut scratch.fast);
            for (f, v) in fast.iter_mut().zip(&scratch.fast) {
                *f += v / eps;
            }
        }
        if let Some(r) = &self.r {
            r.eval(x, yr, &mut scratch.fast);
            for (f, v) in fast.iter_mut().zip(&scratch.fast) {
                *f += v;
            }
        }
        slow.iter().chain(fast.iter()).all(|v| v.is_finite())
    }
}

/// Reusable buffers for [`FastSlowSystem::rhs_into`].
#[derive(Debug, Clone)]
pub struct RhsScratch {
    wrapped: Vec<f64>,
    slow: Vec<f64>,
    fast: Vec<f64>,
}

impl RhsScratch {
    pub fn new(system: &FastSlowSystem) -> Self {
        Self {
            wrapped: vec![0.0; system.m],
            slow: vec![0.0; system.d],
            fast: vec![0.0; system.m],
        }
    }
}

/// Deterministic slow and fast rates `(a + ε⁻¹b, ε⁻²g + ε⁻¹h + r)`.
pub fn evaluate_rhs(system: &FastSlowSystem, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != system.d {
        return Err(Error::DimensionMismatch { field: "x", expected: system.d, found: x.len() });
    }
    if y.len() != system.m {
        return Err(Error::DimensionMismatch { field: "y", expected: system.m, found: y.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("evaluate_rhs requires finite inputs"));
    }
    let mut slow = vec![0.0; system.d];
    let mut fast = vec![0.0; system.m];
    let mut scratch = RhsScratch::new(system);
    if !system.rhs_into(x, y, &mut slow, &mut fast, &mut scratch) {
        return Err(Error::NonFinite { what: "vector field evaluation", time: 0.0 });
    }
    Ok((slow, fast))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn heat_like_spec() -> SystemSpec {
        let a = VectorField::new(FieldRole::SlowDrift, 1, |x, _, out| out[0] = -x[0]);
        let mut spec = SystemSpec::new("test", 1, 1, a);
        spec.b = VectorField::new(FieldRole::FastCoupling, 1, |_, y, out| {
            out[0] = (2.0 * PI * y[0]).sin()
        });
        spec.delta = 1.0;
        spec
    }

    #[test]
    fn valid_skew_product() {
        let sys = make_system(heat_like_spec()).unwrap();
        assert_eq!(sys.coupling_class(), CouplingClass::SkewProduct);
        assert_eq!((sys.d(), sys.m()), (1, 1));
    }

    #[test]
    fn rejects_zero_epsilon() {
        let mut spec = heat_like_spec();
        spec.epsilon = 0.0;
        let err = make_system(spec).unwrap_err();
        assert!(err.to_string().contains("nonpositive epsilon"), "{err}");
    }

    #[test]
    fn rejects_x_dependent_g_for_skew_product() {
        let mut spec = heat_like_spec();
        spec.g = VectorField::new(FieldRole::FastDrift, 1, |x, y, out| out[0] = x[0] * y[0]);
        let err = make_system(spec).unwrap_err();
        assert!(err.to_string().contains("x-dependent fast drift"), "{err}");

        let mut spec = heat_like_spec();
        spec.g = VectorField::new(FieldRole::FastDrift, 1, |x, y, out| out[0] = x[0] * y[0]);
        spec.coupling_class = CouplingClass::General;
        assert!(make_system(spec).is_ok());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut spec = heat_like_spec();
        spec.b = VectorField::zero(FieldRole::FastCoupling, 2);
        assert!(matches!(
            make_system(spec),
            Err(Error::DimensionMismatch { field: "b", expected: 1, found: 2 })
        ));
    }

    #[test]
    fn rhs_scale_arithmetic() {
        let a = VectorField::new(FieldRole::SlowDrift, 1, |x, y, out| out[0] = x[0] + y[0]);
        let mut spec = SystemSpec::new("scale", 1, 1, a);
        spec.g = VectorField::new(FieldRole::FastDrift, 1, |_, y, out| out[0] = 1.0 + y[0]);
        spec.epsilon = 0.5;
        spec.fast_space = FastSpace::Unbounded;
        let sys = make_system(spec).unwrap();
        let (slow, fast) = evaluate_rhs(&sys, &[0.3], &[2.0]).unwrap();
        assert_eq!(slow, vec![2.3]);
        assert_eq!(fast, vec![4.0 * 3.0]);
    }

    #[test]
    fn rhs_rejects_non_finite_input() {
        let sys = make_system(heat_like_spec()).unwrap();
        assert!(evaluate_rhs(&sys, &[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn hash_tracks_parameters() {
        let sys = make_system(heat_like_spec()).unwrap();
        let same = make_system(heat_like_spec()).unwrap();
        assert_eq!(sys.hash(), same.hash());
        assert_ne!(sys.hash(), sys.with_epsilon(0.2).unwrap().hash());
    }

    #[test]
    fn finite_difference_fallback_is_flagged() {
        let f = VectorField::new(FieldRole::FastDrift, 1, |x, y, out| out[0] = x[0] * y[0] * y[0]);
        let mut j = [0.0];
        assert!(f.jacobian_y(&[2.0], &[3.0], &mut j));
        assert!((j[0] - 12.0).abs() < 1e-6);
        assert!(f.jacobian_x(&[2.0], &[3.0], &mut j));
        assert!((j[0] - 9.0).abs() < 1e-6);
    }
}
