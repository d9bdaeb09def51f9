//! Built-in systems: the Lorenz-driven case study and analytic heat-torus fixtures.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::{
    make_system, CouplingClass, FastSlowSystem, FastSpace, FieldRole, NoiseScaling, SystemSpec,
    VectorField,
};
use crate::error::{Error, Result};

/// Coefficient of `y₂` in the slow equation of the Lorenz case study.
pub const LORENZ_COUPLING: f64 = 4.0 / 90.0;
/// Reference fast initial condition on the attractor.
pub const LORENZ_REFERENCE_POINT: [f64; 3] = [13.93, 20.06, 26.87];
/// Literature value of the limiting variance parameter σ².
pub const LORENZ_SIGMA2: f64 = 0.126;

const LORENZ_S: f64 = 10.0;
const LORENZ_RHO: f64 = 28.0;
const LORENZ_BETA: f64 = 8.0 / 3.0;

fn check_delta_positive(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidDelta { value: delta, reason: "must be positive" });
    }
    Ok(())
}

fn slow_linear_decay() -> VectorField {
    VectorField::new(FieldRole::SlowDrift, 1, |x, _, out| out[0] = -x[0]).with_jacobians(
        |_, _, out| out[0] = -1.0,
        |_, _, out| out[0] = 0.0,
    )
}

/// `coupling·sin(2πy)` on 𝕋¹.
fn sine_coupling(coupling: f64) -> VectorField {
    VectorField::new(FieldRole::FastCoupling, 1, move |_, y, out| {
        out[0] = coupling * (TAU * y[0]).sin()
    })
    .with_jacobians(
        |_, _, out| out[0] = 0.0,
        move |_, y, out| out[0] = coupling * TAU * (TAU * y[0]).cos(),
    )
}

/// Lorenz-driven weakly-coupled system on ℝ × ℝ³:
///
/// ```text
/// dx/dt  = -x + ε⁻¹ (4/90) y₂
/// dy₁/dt = ε⁻² 10(y₂ - y₁)          + x y₃
/// dy₂/dt = ε⁻² (28y₁ - y₂ - y₁y₃)    - x
/// dy₃/dt = ε⁻² (y₁y₂ - (8/3)y₃)      + x y₁ y₂
/// ```
///
/// Noise enters at order one (`δ dV`).
pub fn lorenz_system(epsilon: f64, delta: f64) -> Result<FastSlowSystem> {
    lorenz_system_with_coupling(epsilon, delta, LORENZ_COUPLING)
}

pub fn lorenz_system_with_coupling(epsilon: f64, delta: f64, coupling: f64) -> Result<FastSlowSystem> {
    let b = VectorField::new(FieldRole::FastCoupling, 1, move |_, y, out| out[0] = coupling * y[1])
        .with_jacobians(
            |_, _, out| out[0] = 0.0,
            move |_, _, out| {
                out[0] = 0.0;
                out[1] = coupling;
                out[2] = 0.0;
            },
        );
    let g = VectorField::new(FieldRole::FastDrift, 3, |_, y, out| {
        out[0] = LORENZ_S * (y[1] - y[0]);
        out[1] = LORENZ_RHO * y[0] - y[1] - y[0] * y[2];
        out[2] = y[0] * y[1] - LORENZ_BETA * y[2];
    })
    .with_jacobians(
        |_, _, out| out[..3].fill(0.0),
        |_, y, out| {
            out.copy_from_slice(&[
                -LORENZ_S,
                LORENZ_S,
                0.0,
                LORENZ_RHO - y[2],
                -1.0,
                -y[0],
                y[1],
                y[0],
                -LORENZ_BETA,
            ])
        },
    );
    let r = VectorField::new(FieldRole::SlowScaleFast, 3, |x, y, out| {
        out[0] = x[0] * y[2];
        out[1] = -x[0];
        out[2] = x[0] * y[0] * y[1];
    })
    .with_jacobians(
        |_, y, out| {
            out[0] = y[2];
            out[1] = -1.0;
            out[2] = y[0] * y[1];
        },
        |x, y, out| {
            out.copy_from_slice(&[
                0.0,
                0.0,
                x[0],
                0.0,
                0.0,
                0.0,
                x[0] * y[1],
                x[0] * y[0],
                0.0,
            ])
        },
    );
    let mut spec = SystemSpec::new("lorenz", 1, 3, slow_linear_decay());
    spec.b = b;
    spec.g = g;
    spec.r = Some(r);
    spec.epsilon = epsilon;
    spec.delta = delta;
    spec.coupling_class = CouplingClass::WeaklyCoupled;
    spec.fast_space = FastSpace::Unbounded;
    spec.noise_scaling = NoiseScaling::OrderOne;
    spec.params = vec![
        ("s".into(), LORENZ_S),
        ("rho".into(), LORENZ_RHO),
        ("beta".into(), LORENZ_BETA),
        ("coupling".into(), coupling),
    ];
    make_system(spec)
}

/// Skew product on ℝ × 𝕋¹ with pure-noise fast dynamics:
/// `a = -x`, `b = sin(2πy)`, `g = 0`. The fast invariant density is uniform.
pub fn heat_torus_system(delta: f64) -> Result<FastSlowSystem> {
    heat_with_coupling(delta, 1.0)
}

fn heat_with_coupling(delta: f64, coupling: f64) -> Result<FastSlowSystem> {
    check_delta_positive(delta)?;
    let mut spec = SystemSpec::new("heat", 1, 1, slow_linear_decay());
    spec.b = sine_coupling(coupling);
    spec.delta = delta;
    spec.params = vec![("coupling".into(), coupling)];
    make_system(spec)
}

/// Heat fixture with `b = x·sin(2πy)`, used for the coupled drift formula.
pub fn heat_coupled_system(delta: f64) -> Result<FastSlowSystem> {
    check_delta_positive(delta)?;
    let mut spec = SystemSpec::new("heat-coupled", 1, 1, slow_linear_decay());
    spec.b = VectorField::new(FieldRole::FastCoupling, 1, |x, y, out| {
        out[0] = x[0] * (TAU * y[0]).sin()
    })
    .with_jacobians(
        |_, y, out| out[0] = (TAU * y[0]).sin(),
        |x, y, out| out[0] = x[0] * TAU * (TAU * y[0]).cos(),
    );
    spec.delta = delta;
    make_system(spec)
}

/// Weakly-coupled heat fixture: `b = sin(2πy)`, `h = cos(2πy)`, `g = 0`.
pub fn heat_weak_system(delta: f64) -> Result<FastSlowSystem> {
    check_delta_positive(delta)?;
    let mut spec = SystemSpec::new("heat-weak", 1, 1, slow_linear_decay());
    spec.b = sine_coupling(1.0);
    spec.h = Some(
        VectorField::new(FieldRole::Intermediate, 1, |_, y, out| out[0] = (TAU * y[0]).cos())
            .with_jacobians(
                |_, _, out| out[0] = 0.0,
                |_, y, out| out[0] = -TAU * (TAU * y[0]).sin(),
            ),
    );
    spec.delta = delta;
    spec.coupling_class = CouplingClass::WeaklyCoupled;
    make_system(spec)
}

/// Pure averaging: `b = 0`, `a = -x + sin(2πy)`, noise-driven fast variable.
/// The averaged slow equation is `dx/dt = -x`.
pub fn heat_averaging_system(delta: f64) -> Result<FastSlowSystem> {
    check_delta_positive(delta)?;
    let a = VectorField::new(FieldRole::SlowDrift, 1, |x, y, out| {
        out[0] = -x[0] + (TAU * y[0]).sin()
    })
    .with_jacobians(
        |_, _, out| out[0] = -1.0,
        |_, y, out| out[0] = TAU * (TAU * y[0]).cos(),
    );
    let mut spec = SystemSpec::new("heat-averaging", 1, 1, a);
    spec.delta = delta;
    make_system(spec)
}

/// `a = -x` and nothing else; exact solution `x(t) = ξ e^{-t}`.
pub fn linear_decay_system() -> Result<FastSlowSystem> {
    make_system(SystemSpec::new("linear-decay", 1, 1, slow_linear_decay()))
}

/// Named fixture plus parameter overrides, as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub fixture: String,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta: f64,
    /// Overrides the fixture's coupling constant (Lorenz: coefficient of y₂;
    /// heat: amplitude of b).
    #[serde(default)]
    pub coupling: Option<f64>,
}

fn default_epsilon() -> f64 {
    1.0
}

pub const FIXTURE_NAMES: &[&str] =
    &["lorenz", "heat", "heat-coupled", "heat-weak", "heat-averaging", "linear-decay"];

pub fn build_fixture(spec: &FixtureSpec) -> Result<FastSlowSystem> {
    let sys = match spec.fixture.as_str() {
        "lorenz" => {
            return lorenz_system_with_coupling(
                spec.epsilon,
                spec.delta,
                spec.coupling.unwrap_or(LORENZ_COUPLING),
            )
        }
        "heat" => heat_with_coupling(spec.delta, spec.coupling.unwrap_or(1.0))?,
        "heat-coupled" => heat_coupled_system(spec.delta)?,
        "heat-weak" => heat_weak_system(spec.delta)?,
        "heat-averaging" => heat_averaging_system(spec.delta)?,
        "linear-decay" => linear_decay_system()?.with_delta(spec.delta)?,
        other => return Err(Error::UnknownFixture(other.to_string())),
    };
    if spec.coupling.is_some() && spec.fixture != "heat" {
        return Err(Error::invalid(format!(
            "fixture {:?} has no coupling constant to override",
            spec.fixture
        )));
    }
    sys.with_epsilon(spec.epsilon)
}

/// A fixture together with its reference initial condition and constants.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub system: FastSlowSystem,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub constants: Vec<(String, f64)>,
    pub description: String,
}

impl CaseStudy {
    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    fn validated(self) -> Result<Self> {
        let in_space = match self.system.fast_space() {
            FastSpace::TorusUnit => self.eta.iter().all(|v| (0.0..1.0).contains(v)),
            FastSpace::Unbounded => self.eta.iter().all(|v| v.is_finite()),
        };
        if !in_space || self.eta.len() != self.system.m() {
            return Err(Error::invalid("reference initial condition outside the fast space"));
        }
        Ok(self)
    }
}

pub fn lorenz_case_study(epsilon: f64, delta: f64) -> Result<CaseStudy> {
    CaseStudy {
        system: lorenz_system(epsilon, delta)?,
        xi: vec![0.0],
        eta: LORENZ_REFERENCE_POINT.to_vec(),
        constants: vec![("sigma2".into(), LORENZ_SIGMA2)],
        description: "Lorenz-63 fast dynamics driving a linearly damped slow variable through \
                      (4/90) y2; the homogenized limit is an Ornstein-Uhlenbeck process."
            .into(),
    }
    .validated()
}

pub fn heat_case_study(delta: f64) -> Result<CaseStudy> {
    CaseStudy {
        system: heat_torus_system(delta)?,
        xi: vec![0.0],
        eta: vec![0.1],
        constants: vec![
            ("A0".into(), 1.0 / (2.0 * PI * PI * delta)),
            ("decay_rate".into(), 2.0 * PI * PI * delta),
        ],
        description: "Brownian motion on the unit circle driving a damped slow variable through \
                      sin(2 pi y); every coefficient is known in closed form."
            .into(),
    }
    .validated()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{evaluate_rhs, Wrt};

    #[test]
    fn lorenz_fast_drift_at_reference_point() {
        let sys = lorenz_system(1.0, 0.0).unwrap();
        let mut out = [0.0; 3];
        sys.g().eval(&[0.0], &LORENZ_REFERENCE_POINT, &mut out);
        assert!((out[0] - 61.3).abs() < 1e-12);
        let (_, fast) = evaluate_rhs(&sys, &[0.0], &LORENZ_REFERENCE_POINT).unwrap();
        assert!((fast[0] - 61.3).abs() < 1e-12);
        assert_eq!(sys.coupling_class(), CouplingClass::WeaklyCoupled);
        assert_eq!(sys.fast_space(), FastSpace::Unbounded);
    }

    #[test]
    fn lorenz_embeds_standard_parameters() {
        let sys = lorenz_system(1.0, 0.0).unwrap();
        let p = |k: &str| sys.params().iter().find(|(n, _)| n == k).unwrap().1;
        assert_eq!(p("s"), 10.0);
        assert_eq!(p("rho"), 28.0);
        assert_eq!(p("beta"), 8.0 / 3.0);
        assert_eq!(p("coupling"), 4.0 / 90.0);
        let mut out = [0.0];
        sys.b().eval(&[0.0], &[0.0, 1.0, 0.0], &mut out);
        assert_eq!(out[0], 4.0 / 90.0);
    }

    #[test]
    fn heat_values() {
        let sys = heat_torus_system(1.0).unwrap();
        let mut out = [0.0];
        sys.b().eval(&[0.0], &[0.25], &mut out);
        assert_eq!(out[0], 1.0);
        let eps = sys.with_epsilon(0.1).unwrap();
        let (slow, fast) = evaluate_rhs(&eps, &[0.0], &[0.25]).unwrap();
        assert!((slow[0] - 10.0).abs() < 1e-12);
        assert_eq!(fast[0], 0.0);
        assert!(heat_torus_system(0.0).is_err());
    }

    #[test]
    fn heat_centering_integral_vanishes() {
        let sys = heat_torus_system(1.0).unwrap();
        let n = 1000;
        let mut out = [0.0];
        let sum: f64 = (0..n)
            .map(|i| {
                sys.b().eval(&[0.0], &[i as f64 / n as f64], &mut out);
                out[0]
            })
            .sum();
        assert!(sum.abs() / (n as f64) < 1e-14);
    }

    fn step_halving_ratio(field: &VectorField, wrt: Wrt, x: &[f64], y: &[f64]) -> f64 {
        let n_in = match wrt {
            Wrt::Slow => x.len(),
            Wrt::Fast => y.len(),
        };
        let len = field.out_dim() * n_in;
        let mut exact = vec![0.0; len];
        assert!(field.analytic_jacobian(wrt, x, y, &mut exact));
        let err = |step: f64| {
            let mut fd = vec![0.0; len];
            field.finite_difference_jacobian(wrt, x, y, step, &mut fd);
            fd.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        err(1e-2) / err(5e-3)
    }

    #[test]
    fn analytic_jacobians_match_second_order_differences() {
        let heat = heat_coupled_system(1.0).unwrap();
        let r = step_halving_ratio(heat.b(), Wrt::Fast, &[0.7], &[0.123]);
        assert!((3.5..=4.5).contains(&r), "ratio {r}");
        let r = step_halving_ratio(heat.b(), Wrt::Slow, &[0.7], &[0.123]);
        // b is linear in x: differences are exact up to rounding
        assert!(r.is_nan() || r.is_finite());

        let weak = heat_weak_system(1.0).unwrap();
        let r = step_halving_ratio(weak.h().unwrap(), Wrt::Fast, &[0.0], &[0.31]);
        assert!((3.5..=4.5).contains(&r), "ratio {r}");

        let avg = heat_averaging_system(1.0).unwrap();
        let r = step_halving_ratio(avg.a(), Wrt::Fast, &[0.2], &[0.41]);
        assert!((3.5..=4.5).contains(&r), "ratio {r}");
    }

    #[test]
    fn fixture_spec_overrides() {
        let spec = FixtureSpec {
            fixture: "lorenz".into(),
            epsilon: 0.2,
            delta: 0.0,
            coupling: None,
        };
        let sys = build_fixture(&spec).unwrap();
        assert_eq!(sys.epsilon(), 0.2);
        let bad = FixtureSpec { fixture: "nope".into(), ..spec.clone() };
        assert!(matches!(build_fixture(&bad), Err(Error::UnknownFixture(_))));
        let zero = FixtureSpec { epsilon: 0.0, ..spec };
        assert!(matches!(build_fixture(&zero), Err(Error::NonPositiveEpsilon(_))));
    }

    #[test]
    fn case_studies_validate_initial_conditions() {
        let lorenz = lorenz_case_study(0.2, 0.0).unwrap();
        assert_eq!(lorenz.eta, LORENZ_REFERENCE_POINT.to_vec());
        assert_eq!(lorenz.constant("sigma2"), Some(0.126));
        let heat = heat_case_study(1.0).unwrap();
        assert!((heat.constant("A0").unwrap() - 0.050660).abs() < 1e-6);
    }
}
