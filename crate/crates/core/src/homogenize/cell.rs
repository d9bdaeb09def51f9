//! Finite-difference cell problem on the circle (m = 1).
//!
//! The generator `L = g ∂_y + (δ/2) ∂_yy` is discretized by central differences
//! on a periodic grid. The discrete invariant density solves `Lᵀρ = 0` with
//! `∫ρ = 1`, and `Φ` solves `−LΦ = b − ∫bρ` with `∫Φρ = 0`. Both one-dimensional null
//! spaces are removed by a rank-one augmentation, and each augmented system is a
//! cyclic tridiagonal matrix plus a rank-one term, solved by the Thomas algorithm
//! with a rank-3 Woodbury correction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{FastSlowSystem, FastSpace};
use crate::error::{Error, Result};

/// Step used for the central difference in `x` of the cell solution.
pub const CELL_X_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSolution {
    /// Grid points `i/n` on [0, 1).
    pub grid: Vec<f64>,
    /// `Φ` at each grid point, `d` components per point (row-major).
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub x: Vec<f64>,
    pub delta: f64,
    /// Discrete `∫bρ` per component; the solvability residual of the cell problem.
    pub centering_residual: Vec<f64>,
}

impl CellSolution {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn d(&self) -> usize {
        self.x.len()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.grid.len() as f64
    }

    /// Component `k` of `Φ` over the grid.
    pub fn phi_component(&self, k: usize) -> Vec<f64> {
        self.phi.iter().skip(k).step_by(self.d()).copied().collect()
    }

    /// `∫ Φ_k ρ dy` for each component (periodic trapezoid).
    pub fn centering(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.d())
            .map(|k| h * self.phi_component(k).iter().zip(&self.rho).map(|(p, r)| p * r).sum::<f64>())
            .collect()
    }

    pub fn rho_mass(&self) -> f64 {
        self.spacing() * self.rho.iter().sum::<f64>()
    }
}

/// Periodic tridiagonal matrix: row `i` holds `sub[i]` at column `i−1`, `diag[i]`
/// at `i` and `sup[i]` at `i+1` (indices mod n).
struct Cyclic {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl Cyclic {
    fn transpose(&self) -> Self {
        let n = self.diag.len();
        Self {
            sub: (0..n).map(|i| self.sup[(i + n - 1) % n]).collect(),
            diag: self.diag.clone(),
            sup: (0..n).map(|i| self.sub[(i + 1) % n]).collect(),
        }
    }

    /// Solve `(C + u vᵀ) z = r`.
    fn solve_with_rank_one(&self, u: &[f64], v: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let n = self.diag.len();
        let factor = Thomas::factor(&self.sub, &self.diag, &self.sup)?;
        // C = T + e₀·sub[0]·e_{n−1}ᵀ + e_{n−1}·sup[n−1]·e₀ᵀ
        let mut e0 = vec![0.0; n];
        e0[0] = 1.0;
        let mut en = vec![0.0; n];
        en[n - 1] = 1.0;
        let cols = [e0, en, u.to_vec()];
        let tinv_cols: Vec<Vec<f64>> = cols.iter().map(|c| factor.solve(c)).collect();
        let tinv_r = factor.solve(r);
        // rows of Vᵀ applied to a vector
        let vt = |z: &[f64]| Vector3::new(self.sub[0] * z[n - 1], self.sup[n - 1] * z[0], dot(v, z));
        let mut cap = Matrix3::identity();
        for (j, col) in tinv_cols.iter().enumerate() {
            let vc = vt(col);
            for i in 0..3 {
                cap[(i, j)] += vc[i];
            }
        }
        let coef = cap
            .lu()
            .solve(&vt(&tinv_r))
            .ok_or_else(|| Error::Singular("cell-problem capacitance matrix".into()))?;
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Singular("cell-problem capacitance matrix".into()));
        }
        let mut z = tinv_r;
        for (j, col) in tinv_cols.iter().enumerate() {
            for (zi, ci) in z.iter_mut().zip(col) {
                *zi -= coef[j] * ci;
            }
        }
        Ok(z)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// LU factors of the non-periodic tridiagonal part.
struct Thomas<'a> {
    sub: &'a [f64],
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl<'a> Thomas<'a> {
    fn factor(sub: &'a [f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut c_prime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        let scale = diag.iter().map(|d| d.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for i in 0..n {
            let den = if i == 0 { diag[0] } else { diag[i] - sub[i] * c_prime[i - 1] };
            if den.abs() <= 1e-14 * scale || !den.is_finite() {
                return Err(Error::Singular(format!("zero pivot in row {i} of the cell-problem matrix")));
            }
            denom[i] = den;
            c_prime[i] = sup[i] / den;
        }
        Ok(Self { sub, c_prime, denom })
    }

    fn solve(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let mut z = vec![0.0; n];
        for i in 0..n {
            let prev = if i == 0 { 0.0 } else { self.sub[i] * z[i - 1] };
            z[i] = (r[i] - prev) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            z[i] -= self.c_prime[i] * z[i + 1];
        }
        z
    }
}

fn generator(system: &FastSlowSystem, x: &[f64], delta: f64, n: usize) -> Cyclic {
    let h = 1.0 / n as f64;
    let diffusion = delta / (2.0 * h * h);
    let mut g = [0.0];
    let mut sub = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for i in 0..n {
        system.g().eval(x, &[i as f64 * h], &mut g);
        let adv = g[0] / (2.0 * h);
        sub[i] = diffusion - adv;
        sup[i] = diffusion + adv;
    }
    Cyclic { sub, diag: vec![-2.0 * diffusion; n], sup }
}

/// Solve the cell problem for `Φ^δ(·; x)` and the invariant density `ρ^δ_∞(·; x)`.
pub fn solve_cell_problem_1d(
    system: &FastSlowSystem,
    x: &[f64],
    delta: f64,
    grid_size: usize,
) -> Result<CellSolution> {
    if system.m() != 1 {
        return Err(Error::CellProblem(format!("fast dimension is {}, the solver needs 1", system.m())));
    }
    if system.fast_space() != FastSpace::TorusUnit {
        return Err(Error::CellProblem("fast space must be the unit circle".into()));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::CellProblem(format!("noise intensity must be positive, got {delta}")));
    }
    if x.len() != system.d() {
        return Err(Error::DimensionMismatch { field: "x", expected: system.d(), found: x.len() });
    }
    if grid_size < 8 {
        return Err(Error::CellProblem(format!("grid of {grid_size} points is too coarse")));
    }
    let n = grid_size;
    let d = system.d();
    let h = 1.0 / n as f64;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let op = generator(system, x, delta, n);
    let ones = vec![1.0; n];

    // (Lᵀ + 1·(h1)ᵀ) ρ = 1
    let mut rho = op.transpose().solve_with_rank_one(&ones, &vec![h; n], &ones)?;
    let mass = h * rho.iter().sum::<f64>();
    rho.iter_mut().for_each(|r| *r /= mass);
    // (L + 1·(hρ)ᵀ) Φ = −b; the multiplier cᵀΦ equals −∫bρ
    let c: Vec<f64> = rho.iter().map(|r| h * r).collect();
    let mut b_vals = vec![0.0; n * d];
    for (i, y) in grid.iter().enumerate() {
        system.b().eval(x, &[*y], &mut b_vals[i * d..(i + 1) * d]);
    }
    let mut phi = vec![0.0; n * d];
    let mut centering_residual = Vec::with_capacity(d);
    for k in 0..d {
        let rhs: Vec<f64> = (0..n).map(|i| -b_vals[i * d + k]).collect();
        let sol = op.solve_with_rank_one(&ones, &c, &rhs)?;
        // Without discrete centering of b the multiplier is nonzero; shift onto ∫Φρ = 0.
        let shift = dot(&c, &sol);
        for i in 0..n {
            phi[i * d + k] = sol[i] - shift;
        }
        centering_residual.push(h * (0..n).map(|i| b_vals[i * d + k] * rho[i]).sum::<f64>());
    }
    if phi.iter().chain(&rho).any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite cell solution".into()));
    }
    Ok(CellSolution { grid, phi, rho, x: x.to_vec(), delta, centering_residual })
}

/// Oracle coefficients from a cell solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCoefficients {
    /// `F^δ = ∫(a + ∇ₓΦ·b)ρ dy`
    pub drift: Vec<f64>,
    /// `A₀^δ = 2∫ b⊗Φ ρ dy`, row-major `d×d`.
    pub a0: Vec<f64>,
}

/// Quadrature of the drift and diffusion from `cell`. `∇ₓΦ` comes from central
/// differences of re-solves at `x ± CELL_X_STEP` on the same grid.
pub fn coefficients_from_cell(system: &FastSlowSystem, x: &[f64], cell: &CellSolution) -> Result<CellCoefficients> {
    let d = system.d();
    if x.len() != d || cell.x.len() != d || cell.phi.len() != cell.len() * d || cell.rho.len() != cell.len() {
        return Err(Error::CellProblem("cell solution does not match the system dimensions".into()));
    }
    if x.iter().zip(&cell.x).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::CellProblem("cell solution was computed at a different x".into()));
    }
    let n = cell.len();
    let h = cell.spacing();
    // grad[i][k][j] = ∂Φ_k/∂x_j at grid point i
    let mut grad = vec![0.0; n * d * d];
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += CELL_X_STEP;
        xm[j] -= CELL_X_STEP;
        let plus = solve_cell_problem_1d(system, &xp, cell.delta, n)?;
        let minus = solve_cell_problem_1d(system, &xm, cell.delta, n)?;
        for i in 0..n {
            for k in 0..d {
                grad[(i * d + k) * d + j] = (plus.phi[i * d + k] - minus.phi[i * d + k]) / (2.0 * CELL_X_STEP);
            }
        }
    }
    let mut drift = vec![0.0; d];
    let mut a0 = vec![0.0; d * d];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for i in 0..n {
        let y = [cell.grid[i]];
        system.a().eval(x, &y, &mut a);
        system.b().eval(x, &y, &mut b);
        let w = h * cell.rho[i];
        for k in 0..d {
            let cross: f64 = (0..d).map(|j| grad[(i * d + k) * d + j] * b[j]).sum();
            drift[k] += w * (a[k] + cross);
            for l in 0..d {
                a0[k * d + l] += 2.0 * w * b[k] * cell.phi[i * d + l];
            }
        }
    }
    Ok(CellCoefficients { drift, a0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{
        heat_coupled_system, heat_torus_system, lorenz_system, make_system, FieldRole, SystemSpec, VectorField,
    };
    use std::f64::consts::{PI, TAU};

    fn sup_err(a: &[f64], b: impl Fn(usize) -> f64) -> f64 {
        a.iter().enumerate().map(|(i, v)| (v - b(i)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn heat_cell_solution_matches_closed_form() {
        let sys = heat_torus_system(1.0).unwrap();
        let cell = solve_cell_problem_1d(&sys, &[0.0], 1.0, 2048).unwrap();
        let err = sup_err(&cell.phi, |i| (TAU * cell.grid[i]).sin() / (2.0 * PI * PI));
        assert!(err <= 1e-6, "phi error {err}");
        assert!(sup_err(&cell.rho, |_| 1.0) <= 1e-8);
        assert!(cell.centering()[0].abs() <= 1e-8);
        assert!((cell.rho_mass() - 1.0).abs() <= 1e-12, "mass {}", cell.rho_mass() - 1.0);
    }

    #[test]
    fn heat_cell_coefficients() {
        let sys = heat_torus_system(1.0).unwrap();
        let cell = solve_cell_problem_1d(&sys, &[0.5], 1.0, 2048).unwrap();
        let c = coefficients_from_cell(&sys, &[0.5], &cell).unwrap();
        assert!((c.a0[0] - 1.0 / (2.0 * PI * PI)).abs() < 1e-6, "{}", c.a0[0]);
        assert!((c.drift[0] + 0.5).abs() < 1e-9, "{}", c.drift[0]);

        let half = solve_cell_problem_1d(&sys, &[0.0], 0.5, 1024).unwrap();
        let c = coefficients_from_cell(&sys, &[0.0], &half).unwrap();
        assert!((c.a0[0] - 1.0 / (PI * PI)).abs() < 1e-5);
    }

    #[test]
    fn coupled_cell_drift() {
        let sys = heat_coupled_system(1.0).unwrap();
        let cell = solve_cell_problem_1d(&sys, &[1.0], 1.0, 1024).unwrap();
        let c = coefficients_from_cell(&sys, &[1.0], &cell).unwrap();
        // a = −x contributes −1; the cross term is x/(4π²)
        assert!((c.drift[0] - (-1.0 + 1.0 / (4.0 * PI * PI))).abs() < 1e-5, "{}", c.drift[0]);
    }

    #[test]
    fn zero_b_gives_zero_phi() {
        let mut spec = SystemSpec::new("zero", 1, 1, VectorField::zero(FieldRole::SlowDrift, 1));
        spec.delta = 1.0;
        let sys = make_system(spec).unwrap();
        let cell = solve_cell_problem_1d(&sys, &[0.0], 1.0, 64).unwrap();
        assert!(cell.phi.iter().all(|p| p.abs() < 1e-14));
    }

    #[test]
    fn drifted_density_is_stationary_and_normalized() {
        // g = 1 + ½sin(2πy): non-uniform stationary density
        let mut spec = SystemSpec::new("drift", 1, 1, VectorField::zero(FieldRole::SlowDrift, 1));
        spec.g = VectorField::new(FieldRole::FastDrift, 1, |_, y, out| out[0] = 1.0 + 0.5 * (TAU * y[0]).sin());
        spec.b = VectorField::new(FieldRole::FastCoupling, 1, |_, y, out| out[0] = (TAU * y[0]).cos());
        let sys = make_system(spec).unwrap();
        let cell = solve_cell_problem_1d(&sys, &[0.0], 0.5, 512).unwrap();
        assert!(cell.rho.iter().all(|r| *r > 0.0));
        assert!((cell.rho_mass() - 1.0).abs() < 1e-12);
        assert!(cell.centering()[0].abs() < 1e-10, "centering {:?}", cell.centering());
        // −LΦ = b − ∫bρ holds at every node
        let op = generator(&sys, &[0.0], 0.5, 512);
        let n = 512;
        let lam = cell.centering_residual[0];
        for i in 0..n {
            let lphi = op.sub[i] * cell.phi[(i + n - 1) % n] + op.diag[i] * cell.phi[i] + op.sup[i] * cell.phi[(i + 1) % n];
            let b = (TAU * cell.grid[i]).cos();
            assert!((-lphi - (b - lam)).abs() < 1e-8, "row {i}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let sys = heat_torus_system(1.0).unwrap();
        assert!(matches!(solve_cell_problem_1d(&sys, &[0.0], 0.0, 64), Err(Error::CellProblem(_))));
        let lorenz = lorenz_system(1.0, 0.0).unwrap();
        assert!(matches!(solve_cell_problem_1d(&lorenz, &[0.0], 1.0, 64), Err(Error::CellProblem(_))));
        let cell = solve_cell_problem_1d(&sys, &[0.0], 1.0, 64).unwrap();
        assert!(coefficients_from_cell(&sys, &[1.0], &cell).is_err());
    }
}
