//! One test per acceptance criterion, at the stated sizes and tolerances.

use std::collections::BTreeMap;
use std::process::Command as Process;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mfbsde::coefficients::{builtin_problem, CoefficientSet};
use mfbsde::control::{ControlPath, ControlPolicy};
use mfbsde::grid::{make_time_grid, TimeGrid};
use mfbsde::noise::{simulate_noise, NoiseEnsemble};
use mfbsde::smp::evaluate;
use mfbsde::solver::{picard_solve, SolvedState, SolverParams};
use mfbsde::variational::{solve_variational, LinearParams};
use mfbsde_harness::config::ExperimentConfig;
use mfbsde_harness::{run, Command, ResultManifest, Status};
use serde_json::Value;

fn problem(name: &str) -> Arc<dyn CoefficientSet> {
    builtin_problem(name, &BTreeMap::new()).unwrap()
}

fn setup(t: f64, n: usize, m: usize, seed: u64) -> (TimeGrid, Arc<NoiseEnsemble>) {
    let g = make_time_grid(t, n).unwrap();
    let noise = Arc::new(simulate_noise(&g, m, seed).unwrap());
    (g, noise)
}

fn solve(coeffs: &dyn CoefficientSet, u: &ControlPath, noise: &Arc<NoiseEnsemble>, x0: f64) -> SolvedState {
    let params = SolverParams {
        tolerance: 1e-12,
        ..SolverParams::default()
    };
    picard_solve(coeffs, &ControlPolicy::OpenLoop(u.clone()), noise, x0, &params).unwrap()
}

fn execute(command: Command, toml: &str) -> ResultManifest {
    let cfg = ExperimentConfig::from_toml(toml).unwrap();
    let m = run(&cfg, command, false).unwrap();
    assert_ne!(m.status, Status::Failed, "{:?}", m.error);
    m
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

fn within(started: Instant, budget: Duration) {
    let took = started.elapsed();
    assert!(took < budget, "took {took:?}, budget {budget:?}");
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn terminal_condition_is_exact_after_every_backward_pass() {
    for name in ["coupled_sigma", "example_i"] {
        let started = Instant::now();
        let (g, noise) = setup(1.0, 32, 1024, 11);
        let coeffs = problem(name);
        let s = solve(&*coeffs, &ControlPath::from_fn(&g, |t| 0.5 + t), &noise, 1.0);
        within(started, Duration::from_secs(1));
        assert!(!s.terminal_exact.is_empty());
        assert!(s.terminal_exact.iter().all(|&e| e), "{name}: {:?}", s.terminal_exact);
    }
}

#[test]
fn unit_volatility_gives_brownian_terminal_law() {
    let started = Instant::now();
    let (g, noise) = setup(1.0, 64, 10_000, 12);
    let s = solve(&*problem("quadratic_control"), &ControlPath::zeros(&g, 1), &noise, 0.0);
    within(started, Duration::from_secs(10));
    let (mean, var) = mean_var(&s.ensemble.x_column(64));
    assert!(mean.abs() <= 0.04, "mean {mean}");
    assert!((var - 1.0).abs() <= 0.05, "var {var}");
}

#[test]
fn driverless_identity_terminal_gives_martingale() {
    let started = Instant::now();
    let (g, noise) = setup(1.0, 32, 8192, 13);
    let s = solve(&*problem("quadratic_control"), &ControlPath::constant(&g, &[0.5]), &noise, 0.0);
    within(started, Duration::from_secs(30));
    let worst = (0..=32)
        .map(|i| {
            let (x, y) = (s.ensemble.x_column(i), s.ensemble.y_column(i));
            let se = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (se / x.len() as f64).sqrt()
        })
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-2, "max RMSE(Y − X) = {worst}");
}

#[test]
fn picard_iteration_decouples_contracts_and_forgets_its_start() {
    let started = Instant::now();
    let grid = "[grid]\nsteps = 64\n[ensemble]\nparticles = 4096\nx0 = 1.0\n[control]\nvalue = [0.5]\nslope = [1.0]\n";

    let m = execute(Command::PicardDiagnose, &format!("[problem]\nname = \"quadratic_control\"\n{grid}"));
    let history = m.outputs["picard"]["history"].as_array().unwrap();
    assert!(history.len() >= 2);
    assert_eq!(f(&history[1]), 0.0, "{history:?}");

    for damping in [1.0, 0.5] {
        let toml = format!("[problem]\nname = \"coupled_sigma\"\nparams = {{ eps = 0.1 }}\n[picard]\ndamping = {damping}\n{grid}");
        let m = execute(Command::PicardDiagnose, &toml);
        assert_eq!(m.status, Status::Ok, "{:?}", m.warnings);
        let p = &m.outputs["picard"];
        assert!(p["longest_contracting_run"].as_u64().unwrap() >= 4, "{p}");
        let tol = ExperimentConfig::from_toml(&toml).unwrap().picard.tolerance;
        assert!(f(&p["init_gap"]) <= 10.0 * tol, "{p}");
    }
    within(started, Duration::from_secs(120));
}

#[test]
fn variation_is_linear_in_the_direction() {
    let started = Instant::now();
    let (g, noise) = setup(1.0, 32, 2048, 15);
    let coeffs = problem("coupled_sigma");
    let base = solve(&*coeffs, &ControlPath::from_fn(&g, |t| 0.5 + t), &noise, 1.0);
    let v = ControlPath::from_fn(&g, |t| (3.0 * t).sin() + 0.2);
    let linear = LinearParams::default();
    let a = solve_variational(&*coeffs, &base, &v, &linear).unwrap();
    let b = solve_variational(&*coeffs, &base, &v.scaled(2.0), &linear).unwrap();
    within(started, Duration::from_secs(60));
    let mut worst = 0.0f64;
    for j in 0..a.particles() {
        let pairs = a.x1(j).iter().zip(b.x1(j)).chain(a.y1(j).iter().zip(b.y1(j))).chain(a.z1(j).iter().zip(b.z1(j)));
        for (p, q) in pairs {
            worst = worst.max((2.0 * p - q).abs() / q.abs().max(f64::MIN_POSITIVE));
        }
    }
    assert!(worst <= 1e-10, "relative deviation {worst}");
}

#[test]
fn difference_quotients_converge_at_first_order() {
    let started = Instant::now();
    for name in ["example_i", "example_ii"] {
        let toml = format!(
            "[problem]\nname = \"{name}\"\n[grid]\nsteps = 32\n[ensemble]\nparticles = 4096\n[picard]\ntolerance = 1e-13\n\
             [control]\nvalue = [0.5]\nslope = [1.0]\n[diff_quotient]\nrhos = [0.1, 0.01, 0.001]\n"
        );
        let m = execute(Command::DiffQuotient, &toml);
        let r = &m.outputs["diff_quotient"];
        for key in ["slope_x", "slope_y", "slope_z"] {
            let slope = f(&r[key]);
            assert!((0.8..=1.2).contains(&slope), "{name} {key} = {slope}");
        }
    }
    within(started, Duration::from_secs(300));
}

#[test]
fn duality_identity_holds() {
    let started = Instant::now();
    let residual = |toml: &str| f(&execute(Command::DualityCheck, toml).outputs["duality"]["residual"]);
    let coupled = "[problem]\nname = \"coupled_sigma\"\n[grid]\nsteps = 64\n[ensemble]\nparticles = 8192\nx0 = 1.0\n\
                   [control]\nvalue = [0.5]\nslope = [1.0]\n";
    let r = residual(&format!("{coupled}[direction]\nvalue = [1.0]\nslope = [-0.5]\n"));
    assert!(r <= 0.05, "coupled_sigma residual {r}");
    assert_eq!(residual(&format!("{coupled}[direction]\nvalue = [0.0]\n")), 0.0);
    let quadratic = "[problem]\nname = \"quadratic_control\"\n[grid]\nsteps = 64\n[ensemble]\nparticles = 8192\n\
                     [control]\nvalue = [0.5]\nslope = [1.0]\n[direction]\nvalue = [1.0]\nslope = [-0.5]\n";
    assert_eq!(residual(quadratic), 0.0);
    within(started, Duration::from_secs(300));
}

#[test]
fn adjoint_gradient_matches_analytic_and_finite_differences() {
    let started = Instant::now();
    let (g, noise) = setup(1.0, 32, 1024, 18);
    let u = ControlPath::from_fn(&g, |t| 0.5 + t);
    let solver = SolverParams::default();
    let (_, _, grad) = evaluate(&*problem("quadratic_control"), &u, &noise, 0.0, &solver, &LinearParams::default()).unwrap();
    for i in 0..g.steps() {
        let (got, want) = (grad.values.get(i, 0), 2.0 * u.get(i, 0));
        assert!((got - want).abs() <= 1e-8, "node {i}: {got} vs {want}");
    }

    let m = execute(
        Command::GradientCheck,
        "[problem]\nname = \"coupled_sigma\"\n[grid]\nsteps = 32\n[ensemble]\nparticles = 8192\nx0 = 1.0\n\
         [picard]\ntolerance = 1e-13\n[control]\nvalue = [0.5]\nslope = [1.0]\n\
         [gradient_check]\nrho = 1e-3\ndirections = [\"ones\", \"direction\", \"node:3\", \"node:20\"]\n\
         [direction]\nvalue = [1.0]\nslope = [-0.5]\n",
    );
    let worst = f(&m.outputs["gradient_check"]["max_rel_error"]);
    assert!(worst <= 0.05, "max relative error {worst}: {}", m.outputs["gradient_check"]);
    within(started, Duration::from_secs(600));
}

#[test]
fn projected_gradient_recovers_the_clamped_tracking_control() {
    let started = Instant::now();
    let horizon = 3.0;
    let toml = format!(
        "[problem]\nname = \"tracking_control\"\nparams = {{ c = 1.0 }}\n[grid]\nhorizon = {horizon}\nsteps = 48\n\
         [ensemble]\nparticles = 2048\n[bounds]\nlower = [0.0]\nupper = [2.0]\n[control]\nvalue = [1.0]\n\
         [optimizer]\niterations = 200\ntolerance = 1e-8\nstationarity_tolerance = 1e-6\nprobe = true\n[sufficiency]\nsamples = 20\n"
    );
    let m = execute(Command::Optimize, &toml);
    let o = &m.outputs["optimizer"];
    assert_eq!(o["converged"], Value::Bool(true), "{o}");
    assert!(o["iterations"].as_u64().unwrap() <= 200);
    assert_eq!(o["stationary"], Value::Bool(true), "{o}");

    let grid = make_time_grid(horizon, 48).unwrap();
    let control = &m.series["control"];
    assert_eq!(control.rows.len(), 48);
    let worst = control
        .rows
        .iter()
        .map(|r| (r[2] - grid.time(r[0] as usize).clamp(0.0, 2.0)).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-3, "L∞ error {worst}");

    let probe = &m.outputs["sufficiency"];
    assert_eq!(probe["samples"].as_array().unwrap().len(), 20);
    assert_eq!(probe["violations"].as_u64(), Some(0), "{probe}");
    within(started, Duration::from_secs(900));
}

#[test]
fn reference_mode_manifests_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "[problem]\nname = \"coupled_sigma\"\n[grid]\nsteps = 16\n[ensemble]\nparticles = 512\nseed = 99\nx0 = 1.0\n\
         [control]\nvalue = [0.5]\nslope = [1.0]\n[optimizer]\niterations = 5\n",
    )
    .unwrap();
    let mut manifests = Vec::new();
    for (k, workers) in ["1", "4"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let status = Process::new(env!("CARGO_BIN_EXE_mfbsde"))
            .args(["optimize", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .args(["--reference-mode", "--workers", workers])
            .env("RUST_LOG", "off")
            .status()
            .unwrap();
        assert!(matches!(status.code(), Some(0 | 1)), "{status}");
        manifests.push(std::fs::read(out.join("manifest.json")).unwrap());
    }
    assert!(!manifests[0].is_empty());
    assert!(manifests[0] == manifests[1], "reference-mode manifests differ");
}
