//! Command dispatch. Each command writes its artifacts and then the manifest,
//! also when it fails part way.

use std::f64::consts::PI;

use fastslow::dynamics::{build_fixture, FastSlowSystem, FixtureSpec, LORENZ_SIGMA2};
use fastslow::ergodic::{birkhoff_average_vector, decay_stability, DecayFit, DecayStability};
use fastslow::homogenize::{
    coefficients_from_cell, solve_cell_problem_1d, tabulate_model, HomogenizedCoefficients,
};
use fastslow::integrate::{
    integrate_fast_slow, integrate_frozen_fast, mean_and_stderr, EnsembleResult, InitialFast, TimeGrid,
};
use fastslow::io::{
    csv_text, fmt_f64, write_coefficients_csv, write_correlation_csv, write_trajectory_binary,
    write_trajectory_csv,
};
use fastslow::limitsde::{
    compare_distributions, full_system_grid, ou_moments, run_full_ensemble, semigroup_convergence,
    simulate_limit, weak_error_rows, ConvergenceRow, ConvergenceSetup, DistributionReport, GaussianBump,
    HomogenizedSDE, OUAnalytic, Reference,
};
use fastslow::SeedSpec;
use serde::Serialize;

use crate::artifacts::{Artifacts, Manifest};
use crate::config::{Command, InitialMode, RunConfig};
use crate::CliError;

/// Execute `config`, writing artifacts and `manifest.json` into `config.out`.
pub fn run(config: &RunConfig) -> Result<Manifest, CliError> {
    let mut arts = Artifacts::create(&config.out)?;
    let outcome = match config.command {
        Command::Simulate => simulate(config, &mut arts),
        Command::Frozen => frozen(config, &mut arts),
        Command::EstimateCoefficients => estimate_coefficients(config, &mut arts),
        Command::CellOracle => cell_oracle(config, &mut arts),
        Command::LorenzStudy => lorenz_study(config, &mut arts),
        Command::HeatStudy => heat_study(config, &mut arts),
        Command::Convergence => convergence(config, &mut arts),
    };
    let error = outcome.as_ref().err().map(|e| e.to_string());
    let manifest = arts.finish(config.command.as_str(), config.seed, error)?;
    outcome.map(|()| manifest)
}

fn points(config: &RunConfig, d: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let grid = &config.study.x_grid;
    if grid.len() % d != 0 {
        return Err(CliError::Config(format!("study.x_grid: length must be a multiple of d = {d}")));
    }
    Ok(grid.chunks(d).map(|c| c.to_vec()).collect())
}

fn bumps(config: &RunConfig, d: usize) -> Result<Vec<GaussianBump>, CliError> {
    let c = &config.study.bump_centers;
    if c.len() % d != 0 {
        return Err(CliError::Config(format!("study.bump_centers: length must be a multiple of d = {d}")));
    }
    Ok(c.chunks(d).map(|c| GaussianBump::new(c.to_vec())).collect())
}

fn system_at(config: &RunConfig, epsilon: f64, delta: f64) -> Result<FastSlowSystem, CliError> {
    let spec = FixtureSpec { epsilon, delta, ..config.system.clone() };
    Ok(build_fixture(&spec)?)
}

fn convergence_setup(config: &RunConfig, system: &FastSlowSystem) -> ConvergenceSetup {
    let s = &config.study;
    let eta = config.eta(system);
    let initial = match s.initial {
        InitialMode::Fixed => InitialFast::Fixed(eta),
        InitialMode::Attractor => InitialFast::Attractor {
            from: eta,
            burn_in: s.attractor_burn_in,
            spacing: s.attractor_spacing,
            dt: s.dt_fast,
        },
    };
    ConvergenceSetup {
        xi: s.xi.clone(),
        initial,
        dt_fast: s.dt_fast,
        dt_limit: s.dt_limit,
        record_spacing: s.record_spacing,
        members: s.members,
    }
}

fn simulate(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let system = config.build_system()?;
    let s = &config.study;
    let grid = full_system_grid(system.epsilon(), s.dt_fast, s.record_spacing, s.horizon);
    let traj = integrate_fast_slow(&system, &s.xi, &config.eta(&system), &grid, SeedSpec::new(config.seed))?;
    write_trajectory_csv(&traj, &arts.path("trajectory.csv"))?;
    write_trajectory_binary(&traj, &arts.path("trajectory.bin"))?;
    Ok(())
}

#[derive(Serialize)]
struct CenteringSummary {
    x: Vec<f64>,
    delta: f64,
    burn_in: f64,
    b_average: Vec<f64>,
    b_stderr: Vec<f64>,
}

fn frozen(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let system = config.build_system()?;
    let s = &config.study;
    let grid = TimeGrid::new(s.horizon, s.dt).recording_every(s.record_every);
    let traj = integrate_frozen_fast(&system, &s.xi, &config.eta(&system), system.delta(), &grid, SeedSpec::new(config.seed))?;
    write_trajectory_csv(&traj, &arts.path("frozen.csv"))?;
    let burn_in = if config.estimator.burn_in < s.horizon { config.estimator.burn_in } else { 0.0 };
    let b = system.b();
    let avg = birkhoff_average_vector(|y, out| b.eval(&s.xi, y, out), system.d(), &traj, burn_in)?;
    arts.json(
        "centering.json",
        &CenteringSummary {
            x: s.xi.clone(),
            delta: system.delta(),
            burn_in,
            b_average: avg.iter().map(|a| a.value).collect(),
            b_stderr: avg.iter().map(|a| a.stderr).collect(),
        },
    )
}

fn table_failures(table: &HomogenizedCoefficients) -> Result<(), CliError> {
    let failed: Vec<String> = table
        .failures
        .iter()
        .zip(&table.x_grid)
        .filter_map(|(f, x)| f.as_ref().map(|f| format!("x = {x:?}: {f}")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(failed.join("; ")))
    }
}

fn estimate_coefficients(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let system = config.build_system()?;
    let grid = points(config, system.d())?;
    let table = tabulate_model(&system, &grid, system.delta(), &config.estimator)?;
    write_coefficients_csv(&table, &arts.path("coefficients.csv"))?;
    arts.json("diagnostics.json", &table.diagnostics)?;
    if !config.study.stability_deltas.is_empty() {
        let reference = if system.delta() == 0.0 {
            table.clone()
        } else {
            tabulate_model(&system, &grid, 0.0, &config.estimator)?
        };
        let mut perturbed = Vec::new();
        for &delta in &config.study.stability_deltas {
            perturbed.push((delta, tabulate_model(&system, &grid, delta, &config.estimator)?));
        }
        arts.json("decay_stability.json", &stability_report(&reference, &perturbed))?;
    }
    table_failures(&table)
}

#[derive(Serialize)]
struct StabilityPoint {
    x: Vec<f64>,
    entry: usize,
    reference: Option<DecayFit>,
    checks: Vec<DecayStability>,
}

/// Compares the decay fit of every diagonal Green-Kubo entry at each `δ > 0`
/// with the one at `δ = 0`, over the reference lag grid.
fn stability_report(
    reference: &HomogenizedCoefficients,
    perturbed: &[(f64, HomogenizedCoefficients)],
) -> Vec<StabilityPoint> {
    let mut out = Vec::new();
    for (k, x) in reference.x_grid.iter().enumerate() {
        let Some(base) = &reference.diagnostics[k] else { continue };
        for (entry, tail) in base.green_kubo.tails.iter().enumerate() {
            let fits: Vec<(f64, DecayFit)> = perturbed
                .iter()
                .filter_map(|(delta, table)| {
                    let d = table.diagnostics[k].as_ref()?;
                    Some((*delta, d.green_kubo.tails.get(entry)?.fit?))
                })
                .collect();
            let checks = match &tail.fit {
                Some(fit) => decay_stability(fit, &fits, &base.green_kubo.correlations[entry].lags),
                None => Vec::new(),
            };
            out.push(StabilityPoint { x: x.clone(), entry, reference: tail.fit, checks });
        }
    }
    out
}

fn cell_oracle(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let system = config.build_system()?;
    let grid = points(config, system.d())?;
    let mut sol = arts.csv("cell_solution.csv", &["x", "y", "phi", "rho"])?;
    let mut coef = arts.csv("cell_coefficients.csv", &["x", "F", "A0", "centering_residual"])?;
    for x in &grid {
        let cell = solve_cell_problem_1d(&system, x, system.delta(), config.study.cell_grid)?;
        for k in 0..cell.len() {
            sol.numbers(&[x[0], cell.grid[k], cell.phi[k], cell.rho[k]])?;
        }
        let c = coefficients_from_cell(&system, x, &cell)?;
        coef.numbers(&[x[0], c.drift[0], c.a0[0], cell.centering_residual[0]])?;
    }
    sol.finish()?;
    coef.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct HeatSummary {
    delta: f64,
    a0_exact: f64,
    decay_rate_exact: f64,
    tails: Option<fastslow::homogenize::TailReport>,
}

fn heat_study(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let system = config.build_system()?;
    let delta = system.delta();
    let grid = points(config, 1)?;
    let table = tabulate_model(&system, &grid, delta, &config.estimator)?;
    let a0_exact = 1.0 / (2.0 * PI * PI * delta);

    let mut w = arts.csv(
        "heat_coefficients.csv",
        &["x", "F", "F_stderr", "A0", "A0_stderr", "A", "tail_flag", "F_oracle", "A0_oracle", "A0_exact", "failure"],
    )?;
    let mut first_cell = None;
    for (k, x) in grid.iter().enumerate() {
        let cell = solve_cell_problem_1d(&system, x, delta, config.study.cell_grid)?;
        let oracle = coefficients_from_cell(&system, x, &cell)?;
        let mut row: Vec<String> = [
            x[0],
            table.f_values[k][0],
            table.f_stderr[k][0],
            table.a0_values[k][0],
            table.a0_stderr[k][0],
            table.a_values[k][0],
        ]
        .iter()
        .map(|v| fmt_f64(*v))
        .collect();
        row.push(if table.tail_flags[k] { "1".into() } else { "0".into() });
        row.extend([oracle.drift[0], oracle.a0[0], a0_exact].iter().map(|v| fmt_f64(*v)));
        row.push(csv_text(table.failures[k].as_deref().unwrap_or("")));
        w.row(&row)?;
        first_cell.get_or_insert(cell);
    }
    w.finish()?;

    if let Some(cell) = first_cell {
        let mut w = arts.csv("cell_solution.csv", &["y", "phi", "rho"])?;
        for k in 0..cell.len() {
            w.numbers(&[cell.grid[k], cell.phi[k], cell.rho[k]])?;
        }
        w.finish()?;
    }

    let diag = table.diagnostics.iter().flatten().next();
    if let Some(d) = diag {
        write_correlation_csv(&d.green_kubo.correlations[0], &arts.path("correlation.csv"))?;
    }
    arts.json(
        "decay_fit.json",
        &HeatSummary {
            delta,
            a0_exact,
            decay_rate_exact: 2.0 * PI * PI * delta,
            tails: diag.map(|d| d.green_kubo.tails[0].clone()),
        },
    )?;
    arts.json("diagnostics.json", &table.diagnostics)?;
    table_failures(&table)
}

fn write_convergence_rows(arts: &mut Artifacts, rows: &[ConvergenceRow]) -> Result<(), CliError> {
    let mut w = arts.csv(
        "convergence.csv",
        &[
            "epsilon", "t", "observable", "full_mean", "full_stderr", "limit_mean", "limit_stderr", "error",
            "error_stderr", "failure",
        ],
    )?;
    for r in rows {
        let mut cells: Vec<String> = vec![fmt_f64(r.epsilon), fmt_f64(r.t), r.observable.to_string()];
        cells.extend(
            [r.full_mean, r.full_stderr, r.limit_mean, r.limit_stderr, r.error, r.error_stderr]
                .iter()
                .map(|v| fmt_f64(*v)),
        );
        cells.push(csv_text(r.failure.as_deref().unwrap_or("")));
        w.row(&cells)?;
    }
    w.finish()?;
    let failed: Vec<&str> = rows.iter().filter_map(|r| r.failure.as_deref()).collect();
    match failed.first() {
        None => Ok(()),
        Some(f) => Err(CliError::Failed(format!("{} convergence cells failed, first: {f}", failed.len()))),
    }
}

fn convergence(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let system = config.build_system()?;
    let s = &config.study;
    let model = match s.sigma2 {
        Some(sigma2) if system.d() == 1 => HomogenizedSDE::ornstein_uhlenbeck(sigma2)?,
        Some(_) => return Err(CliError::Config("study.sigma2: the Ornstein-Uhlenbeck limit is one-dimensional".into())),
        None => {
            let grid = points(config, system.d())?;
            let table = tabulate_model(&system, &grid, system.delta(), &config.estimator)?;
            write_coefficients_csv(&table, &arts.path("coefficients.csv"))?;
            table_failures(&table)?;
            HomogenizedSDE::from_table(table)?
        }
    };
    let rows = semigroup_convergence(
        &system,
        &model,
        &bumps(config, system.d())?,
        &s.epsilons,
        &s.convergence_times,
        &convergence_setup(config, &system),
        SeedSpec::new(config.seed),
    )?;
    write_convergence_rows(arts, &rows)
}

#[derive(Serialize)]
struct EpsilonSummary {
    epsilon: f64,
    /// `max_t |mean(t) − theory(t)| / stderr(t)` over records with nonzero stderr.
    max_abs_z: f64,
    t_of_max: f64,
    final_mean: f64,
    final_stderr: f64,
    distribution: DistributionReport,
}

#[derive(Serialize)]
struct LorenzSummary {
    sigma2: f64,
    horizon: f64,
    limit_mean: f64,
    limit_variance: f64,
    members: usize,
    epsilons: Vec<EpsilonSummary>,
    limit: EpsilonSummary,
    failures: Vec<String>,
}

/// Sample paths, ensemble means, terminal histograms and weak errors for the
/// Lorenz-driven system against its Ornstein-Uhlenbeck limit.
fn lorenz_study(config: &RunConfig, arts: &mut Artifacts) -> Result<(), CliError> {
    let s = &config.study;
    let base = config.build_system()?;
    let seed = SeedSpec::new(config.seed);
    let eta = config.eta(&base);
    let xi = s.xi[0];
    let sigma2 = s.sigma2.unwrap_or(LORENZ_SIGMA2);
    let ou = OUAnalytic { sigma2, xi };

    let mut w = arts.csv("samplepaths.csv", &["epsilon", "delta", "run", "t", "x"])?;
    let mut path_index = 0u64;
    for &eps in &s.epsilons {
        for &delta in &s.path_deltas {
            let sys = system_at(config, eps, delta)?;
            let grid = full_system_grid(eps, s.dt_fast, s.record_spacing, s.horizon);
            for run in 0..s.path_runs {
                let traj = integrate_fast_slow(&sys, &s.xi, &eta, &grid, seed.child(1000).member(path_index))?;
                path_index += 1;
                for i in 0..traj.len() {
                    w.numbers(&[eps, delta, run as f64, traj.times[i], traj.x(i)[0]])?;
                }
            }
        }
    }
    w.finish()?;

    // Convergence ensembles follow semigroup_convergence's seeding, so the
    // error table equals a direct call with the same seed.
    let setup = convergence_setup(config, &base);
    let model = HomogenizedSDE::ornstein_uhlenbeck(sigma2)?;
    let limit = simulate_limit(&model, &setup, s.horizon, seed.child(0))?;
    let mut ensembles: Vec<(f64, Result<EnsembleResult, String>)> = Vec::new();
    for (k, &eps) in s.epsilons.iter().enumerate() {
        let full = system_at(config, eps, base.delta())
            .and_then(|sys| Ok(run_full_ensemble(&sys, &setup, s.horizon, seed.child(k as u64 + 1))?))
            .map_err(|e| e.to_string());
        ensembles.push((eps, full));
    }
    let ok: Vec<(f64, &EnsembleResult)> =
        ensembles.iter().filter_map(|(e, r)| r.as_ref().ok().map(|r| (*e, r))).collect();
    let failures: Vec<String> = ensembles
        .iter()
        .filter_map(|(e, r)| r.as_ref().err().map(|m| format!("epsilon {e}: {m}")))
        .collect();

    let theory = |t: f64| ou_moments(&ou, t);
    let mut w = arts.csv("ensemble_mean.csv", &["epsilon", "t", "mean", "stderr", "theory"])?;
    for (eps, ens) in ok.iter().copied().chain(std::iter::once((0.0, &limit))) {
        for (i, &t) in ens.times().iter().enumerate() {
            let (m, se) = ens.slow_mean(i, 0);
            w.numbers(&[eps, t, m, se, theory(t)?.0])?;
        }
    }
    w.finish()?;

    let (mean_t, var_t) = theory(s.horizon)?;
    let terminal = |ens: &EnsembleResult| ens.slow_values(ens.times().len() - 1, 0);
    let samples: Vec<(f64, Vec<f64>)> = ok
        .iter()
        .map(|(e, ens)| (*e, terminal(ens)))
        .chain(std::iter::once((0.0, terminal(&limit))))
        .collect();
    let (lo, hi) = samples.iter().flat_map(|(_, v)| v.iter()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    let pad = 1e-6 * (hi - lo).max(1e-12);
    let (lo, hi) = (lo - pad, hi + pad);
    let bins = s.histogram_bins;
    let width = (hi - lo) / bins as f64;
    let normal_pdf = |x: f64| {
        if var_t > 0.0 {
            (-(x - mean_t).powi(2) / (2.0 * var_t)).exp() / (2.0 * PI * var_t).sqrt()
        } else {
            0.0
        }
    };
    let name = format!("histogram_t{}.csv", s.horizon);
    let mut w = arts.csv(&name, &["epsilon", "bin_left", "bin_right", "mass", "analytic_pdf"])?;
    for (eps, v) in &samples {
        let mut counts = vec![0usize; bins];
        for x in v {
            counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let left = lo + b as f64 * width;
            let right = if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width };
            w.numbers(&[*eps, left, right, *c as f64 / v.len() as f64, normal_pdf(0.5 * (left + right))])?;
        }
    }
    w.finish()?;

    let observables = bumps(config, 1)?;
    let mut rows = Vec::new();
    for (eps, full) in &ensembles {
        rows.extend(weak_error_rows(*eps, full.as_ref().map_err(|e| e.clone()), &limit, &observables, &s.convergence_times)?);
    }

    let summarize = |eps: f64, ens: &EnsembleResult| -> Result<EpsilonSummary, CliError> {
        let mut max_abs_z = 0.0f64;
        let mut t_of_max = 0.0;
        for (i, &t) in ens.times().iter().enumerate() {
            let (m, se) = mean_and_stderr(&ens.slow_values(i, 0));
            if se > 0.0 {
                let z = (m - theory(t)?.0).abs() / se;
                if z > max_abs_z {
                    max_abs_z = z;
                    t_of_max = t;
                }
            }
        }
        let last = ens.times().len() - 1;
        let (final_mean, final_stderr) = ens.slow_mean(last, 0);
        let distribution = compare_distributions(
            &ens.slow_values(last, 0),
            Reference::Normal { mean: mean_t, variance: var_t },
            ens.times()[last],
        )?;
        Ok(EpsilonSummary { epsilon: eps, max_abs_z, t_of_max, final_mean, final_stderr, distribution })
    };
    let mut w = arts.csv(
        "distribution.csv",
        &["epsilon", "t", "ks", "ks_critical", "mean_error", "variance_error", "sample_size"],
    )?;
    let mut per_eps = Vec::new();
    for (eps, ens) in &ok {
        per_eps.push(summarize(*eps, ens)?);
    }
    let limit_summary = summarize(0.0, &limit)?;
    for e in per_eps.iter().chain(std::iter::once(&limit_summary)) {
        let d = &e.distribution;
        w.numbers(&[e.epsilon, d.t, d.ks, d.ks_critical, d.mean_error, d.variance_error, d.sample_size as f64])?;
    }
    w.finish()?;
    arts.json(
        "summary.json",
        &LorenzSummary {
            sigma2,
            horizon: s.horizon,
            limit_mean: mean_t,
            limit_variance: var_t,
            members: s.members,
            epsilons: per_eps,
            limit: limit_summary,
            failures,
        },
    )?;
    write_convergence_rows(arts, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config_str, CliOverrides};

    fn config(text: &str, dir: &std::path::Path) -> RunConfig {
        let o = CliOverrides { out: Some(dir.to_path_buf()), ..Default::default() };
        parse_config_str(text, &o).unwrap()
    }

    #[test]
    fn simulate_writes_both_trajectory_forms() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("command = \"simulate\"\nseed = 5\n[system]\nepsilon = 0.5\n[study]\nhorizon = 0.2\nrecord_spacing = 0.05\n", dir.path());
        let m = run(&c).unwrap();
        let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["trajectory.csv", "trajectory.bin"]);
        let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn cell_oracle_on_heat() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("command = \"cell-oracle\"\nseed = 1\n[system]\ndelta = 1.0\n[study]\ncell_grid = 256\nx_grid = [0.0, 1.0]\n", dir.path());
        run(&c).unwrap();
        let text = std::fs::read_to_string(dir.path().join("cell_coefficients.csv")).unwrap();
        let row: Vec<f64> = text.lines().nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[0], 1.0);
        assert!((row[1] + 1.0).abs() < 1e-9);
        assert!((row[2] - 1.0 / (2.0 * PI * PI)).abs() < 1e-4);
    }

    #[test]
    fn numerical_failure_leaves_incomplete_manifest() {
        let dir = tempfile::tempdir().unwrap();
        // the cell solver needs a single fast variable on the torus
        let c = config("command = \"cell-oracle\"\nseed = 1\n[system]\nfixture = \"lorenz\"\n", dir.path());
        let err = run(&c).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let m = Manifest::read(dir.path()).unwrap();
        assert!(!m.complete);
        assert!(m.error.is_some());
    }

    #[test]
    fn decay_stability_report_per_delta() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(
            "command = \"estimate-coefficients\"\nseed = 3\n[system]\nfixture = \"lorenz\"\ndelta = 0.0\n\
             [estimator]\nt_birkhoff = 300.0\nburn_in = 5.0\ndt = 1e-3\nrecord_spacing = 0.01\nt_max = 2.0\nlag_spacing = 0.02\nnoise_replicas = 1\n\
             [study]\nstability_deltas = [0.5]\n",
            dir.path(),
        );
        let m = run(&c).unwrap();
        assert!(m.entry("decay_stability.json").is_some());
        let text = std::fs::read_to_string(dir.path().join("decay_stability.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let points = v.as_array().unwrap();
        assert_eq!(points.len(), 1);
        assert!(!points[0]["reference"].is_null());
        let checks = points[0]["checks"].as_array().unwrap();
        assert_eq!(checks.len(), 1);
        assert_eq!(checks[0]["delta"], 0.5);
    }
}
