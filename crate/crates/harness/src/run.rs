use std::sync::Arc;
use std::time::Instant;

use mfbsde::adjoint::{duality_check, solve_adjoint};
use mfbsde::coefficients::{partial_report, CoefficientSet, ProbePoint};
use mfbsde::control::{ControlBox, ControlPath, ControlPolicy};
use mfbsde::ensemble::coupled_path_distance;
use mfbsde::grid::TimeGrid;
use mfbsde::noise::{simulate_noise, NoiseEnsemble};
use mfbsde::smp::{
    evaluate, gradient_check, node_direction, optimize, smp_stationarity_check, sufficiency_probe, GradientPath,
    Verdict,
};
use mfbsde::solver::{particle_costs, picard_solve, PicardInit, SolvedState, SolverParams};
use mfbsde::variational::{difference_quotient_check, solve_variational, LinearParams};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_direction, Direction, ExperimentConfig};
use crate::manifest::{ResultManifest, Status, Table};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Solve,
    GradientCheck,
    DualityCheck,
    PicardDiagnose,
    Optimize,
    ValidateCoeffs,
    DiffQuotient,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::GradientCheck => "gradient-check",
            Command::DualityCheck => "duality-check",
            Command::PicardDiagnose => "picard-diagnose",
            Command::Optimize => "optimize",
            Command::ValidateCoeffs => "validate-coeffs",
            Command::DiffQuotient => "diff-quotient",
        }
    }
}

/// Everything a command needs, built once from a validated config.
struct Setup {
    coeffs: Arc<dyn CoefficientSet>,
    grid: TimeGrid,
    noise: Arc<NoiseEnsemble>,
    control: ControlPath,
    direction: ControlPath,
    bounds: ControlBox,
    solver: SolverParams,
    linear: LinearParams,
    x0: f64,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let coeffs = cfg.coefficients()?;
        let grid = cfg.time_grid()?;
        let dim = coeffs.control_dim();
        let noise = simulate_noise(&grid, cfg.ensemble.particles, cfg.ensemble.seed)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Self {
            control: cfg.control.build(&grid, dim, "control")?,
            direction: cfg.direction.build(&grid, dim, "direction")?,
            bounds: cfg.bounds.build(dim)?,
            coeffs,
            grid,
            noise: Arc::new(noise),
            solver: cfg.solver_params(),
            linear: cfg.linear_params(),
            x0: cfg.ensemble.x0,
        })
    }

    fn solve(&self, u: &ControlPath, solver: &SolverParams) -> mfbsde::Result<SolvedState> {
        picard_solve(
            &*self.coeffs,
            &ControlPolicy::OpenLoop(u.clone()),
            &self.noise,
            self.x0,
            solver,
        )
    }
}

/// Runs one command. Configuration errors are returned before any compute;
/// compute failures are recorded in the manifest with status `failed`.
pub fn run(cfg: &ExperimentConfig, command: Command, reference_mode: bool) -> Result<ResultManifest, HarnessError> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let mut m = ResultManifest::new(command.name(), cfg.to_toml());
    if !setup.coeffs.bounded() {
        m.warn(format!(
            "coefficients `{}` are unbounded; boundedness assumptions of the theory do not hold",
            setup.coeffs.name()
        ));
    }
    let started = Instant::now();
    let result = match command {
        Command::Solve => solve(&setup, &mut m),
        Command::PicardDiagnose => picard_diagnose(&setup, &mut m),
        Command::GradientCheck => gradient(&setup, cfg, &mut m),
        Command::DualityCheck => duality(&setup, &mut m),
        Command::Optimize => optimizer(&setup, cfg, &mut m),
        Command::ValidateCoeffs => validate(&setup, cfg, &mut m),
        Command::DiffQuotient => quotient(&setup, cfg, &mut m),
    };
    if let Err(e) = result {
        log::error!("{e}");
        m.status = Status::Failed;
        m.error = Some(e.to_string());
    }
    m.wall_seconds = started.elapsed().as_secs_f64();
    if reference_mode {
        m.normalize();
    }
    Ok(m)
}

/// Exit status for a finished manifest.
pub fn exit_code(m: &ResultManifest) -> i32 {
    match m.status {
        Status::Ok => 0,
        Status::Flagged | Status::Failed => 1,
    }
}

fn record_state(m: &mut ResultManifest, key: &str, s: &SolvedState) {
    for w in &s.warnings {
        m.warn(w.clone());
    }
    if !s.converged {
        m.flag(format!("{key}: Picard iteration did not converge in {} iterations", s.iterations()));
    }
    if !s.terminal_exact.iter().all(|&t| t) {
        m.flag(format!("{key}: terminal condition not reproduced exactly"));
    }
}

fn picard_table(history: &[f64]) -> Table {
    let mut t = Table::new(&["iteration", "distance"]);
    for (k, d) in history.iter().enumerate() {
        t.push(vec![(k + 1) as f64, *d]);
    }
    t
}

fn gradient_table(grid: &TimeGrid, g: &GradientPath) -> Table {
    let mut t = Table::new(&["node", "t", "component", "gradient", "stderr"]);
    for i in 0..g.values.steps() {
        for c in 0..g.values.dim() {
            t.push(vec![i as f64, grid.time(i), c as f64, g.values.get(i, c), g.stderr.get(i, c)]);
        }
    }
    t
}

fn control_table(grid: &TimeGrid, u: &ControlPath) -> Table {
    let mut names = vec!["node".to_string(), "t".to_string()];
    names.extend((0..u.dim()).map(|c| format!("u{c}")));
    let mut t = Table {
        columns: names,
        rows: Vec::new(),
    };
    for i in 0..u.steps() {
        let mut row = vec![i as f64, grid.time(i)];
        row.extend(u.at(i));
        t.push(row);
    }
    t
}

#[derive(Serialize)]
struct SolveSummary {
    cost: f64,
    cost_stderr: f64,
    iterations: usize,
    converged: bool,
    decoupled: bool,
    terminal_exact: bool,
    z_sup: f64,
    mean_x_terminal: f64,
    mean_y_initial: f64,
}

fn summarize(coeffs: &dyn CoefficientSet, s: &SolvedState) -> mfbsde::Result<SolveSummary> {
    let costs = particle_costs(coeffs, &s.ensemble)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cost = mean(&costs);
    let var = costs.iter().map(|c| (c - cost).powi(2)).sum::<f64>() / (costs.len() - 1).max(1) as f64;
    let n = s.ensemble.grid().steps();
    Ok(SolveSummary {
        cost,
        cost_stderr: (var / costs.len() as f64).sqrt(),
        iterations: s.iterations(),
        converged: s.converged,
        decoupled: s.decoupled,
        terminal_exact: s.terminal_exact.iter().all(|&t| t),
        z_sup: s.z_sup,
        mean_x_terminal: mean(&s.ensemble.x_column(n)),
        mean_y_initial: mean(&s.ensemble.y_column(0)),
    })
}

fn solve(s: &Setup, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let state = s.solve(&s.control, &s.solver)?;
    m.output("solve", summarize(&*s.coeffs, &state)?);
    m.output("compactness", state.compactness());
    m.series.insert("picard".into(), picard_table(&state.history));
    let mut means = Table::new(&["t", "mean_x", "mean_y"]);
    for i in 0..=s.grid.steps() {
        let (x, y) = (state.ensemble.x_column(i), state.ensemble.y_column(i));
        let k = x.len() as f64;
        means.push(vec![s.grid.time(i), x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k]);
    }
    m.series.insert("means".into(), means);
    record_state(m, "solve", &state);
    Ok(())
}

fn picard_diagnose(s: &Setup, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let main = s.solve(&s.control, &s.solver)?;
    let other_init = match s.solver.init {
        PicardInit::Frozen => PicardInit::Bootstrap,
        PicardInit::Bootstrap => PicardInit::Frozen,
    };
    let alt = s.solve(
        &s.control,
        &SolverParams {
            init: other_init,
            ..s.solver
        },
    )?;
    let ratios: Vec<f64> = main
        .history
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    let (mut run, mut longest) = (0usize, 0usize);
    for &r in &ratios {
        run = if r < 0.9 { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    let gap = coupled_path_distance(&main.ensemble, &alt.ensemble)?;
    m.output(
        "picard",
        json!({
            "history": main.history,
            "ratios": ratios,
            "longest_contracting_run": longest,
            "converged": main.converged,
            "decoupled": main.decoupled,
            "alternate_init": format!("{other_init:?}").to_lowercase(),
            "alternate_converged": alt.converged,
            "init_gap": gap,
            "init_gap_within_10_tol": gap <= 10.0 * s.solver.tolerance,
        }),
    );
    m.output("compactness", main.compactness());
    m.series.insert("picard".into(), picard_table(&main.history));
    let mut rt = Table::new(&["iteration", "ratio"]);
    for (k, r) in ratios.iter().enumerate() {
        rt.push(vec![(k + 2) as f64, *r]);
    }
    m.series.insert("picard_ratio".into(), rt);
    record_state(m, "picard", &main);
    record_state(m, "picard (alternate init)", &alt);
    Ok(())
}

fn gradient(s: &Setup, cfg: &ExperimentConfig, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let dim = s.coeffs.control_dim();
    let mut dirs = Vec::new();
    for d in &cfg.gradient_check.directions {
        match parse_direction(d, s.grid.steps(), dim).map_err(|e| mfbsde::Error::InvalidArgument(e.to_string()))? {
            Direction::Ones => dirs.push(("ones".to_string(), ControlPath::constant(&s.grid, &vec![1.0; dim]))),
            Direction::Configured => dirs.push(("direction".to_string(), s.direction.clone())),
            Direction::Node(i, c) => dirs.push((format!("node:{i}:{c}"), node_direction(&s.grid, dim, i, c)?)),
            Direction::Nodes => {
                for i in 0..s.grid.steps() {
                    for c in 0..dim {
                        dirs.push((format!("node:{i}:{c}"), node_direction(&s.grid, dim, i, c)?));
                    }
                }
            }
        }
    }
    let (base, _, g) = evaluate(&*s.coeffs, &s.control, &s.noise, s.x0, &s.solver, &s.linear)?;
    record_state(m, "base", &base);
    let report = gradient_check(
        &*s.coeffs,
        &s.control,
        &dirs,
        cfg.gradient_check.rho,
        &s.noise,
        s.x0,
        &s.solver,
        &s.linear,
    )?;
    let mut t = Table::new(&["index", "adjoint", "finite_difference", "fd_stderr", "rel_error"]);
    for (k, r) in report.rows.iter().enumerate() {
        t.push(vec![k as f64, r.adjoint, r.finite_difference, r.fd_stderr, r.rel_error]);
    }
    m.series.insert("gradient_check".into(), t);
    m.series.insert("gradient".into(), gradient_table(&s.grid, &g));
    m.output("gradient_check", &report);
    Ok(())
}

fn duality(s: &Setup, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let base = s.solve(&s.control, &s.solver)?;
    record_state(m, "base", &base);
    let var = solve_variational(&*s.coeffs, &base, &s.direction, &s.linear)?;
    let adj = solve_adjoint(&*s.coeffs, &base, &s.linear)?;
    let report = duality_check(&*s.coeffs, &base, &var, &adj)?;
    if !adj.terminal_exact {
        m.flag("adjoint terminal condition not reproduced exactly");
    }
    m.output("duality", report);
    m.output(
        "linearization",
        json!({
            "variational_sweeps": var.sweep_history.len(),
            "adjoint_sweeps": adj.sweeps,
            "adjoint_terminal_exact": adj.terminal_exact,
        }),
    );
    Ok(())
}

fn optimizer(s: &Setup, cfg: &ExperimentConfig, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let report = optimize(
        &*s.coeffs,
        &s.control,
        &s.bounds,
        &s.noise,
        s.x0,
        &s.solver,
        &s.linear,
        &cfg.optimizer_params(),
    )?;
    let tol = cfg.optimizer.stationarity_tolerance;
    let verdict = smp_stationarity_check(&report.control, &report.gradient, &s.bounds, tol)?;
    for w in &report.warnings {
        m.warn(w.clone());
    }
    if !report.converged {
        m.flag(format!("optimizer stopped after {} evaluations without converging", report.history.len()));
    }
    let mut hist = Table::new(&["iteration", "cost", "cost_stderr", "gradient_norm", "residual", "step"]);
    for (k, it) in report.history.iter().enumerate() {
        hist.push(vec![k as f64, it.cost, it.cost_stderr, it.gradient_norm, it.residual, it.step]);
    }
    m.series.insert("optimizer".into(), hist);
    m.series.insert("control".into(), control_table(&s.grid, &report.control));
    m.series.insert("gradient".into(), gradient_table(&s.grid, &report.gradient));
    m.output(
        "optimizer",
        json!({
            "converged": report.converged,
            "iterations": report.history.len() - 1,
            "final_cost": report.history.last().map(|h| h.cost),
            "wall_seconds": report.wall_seconds,
            "stationarity": verdict,
            "stationary": verdict.verdict == Verdict::Stationary,
        }),
    );
    if cfg.optimizer.probe {
        let probe = sufficiency_probe(
            &*s.coeffs,
            &report.control,
            &s.bounds,
            &s.noise,
            s.x0,
            &s.solver,
            &cfg.sufficiency_params(),
        )?;
        if !probe.convex_hamiltonian {
            m.warn("sufficiency probe run without a convex-Hamiltonian assertion");
        }
        m.output("sufficiency", probe);
    }
    Ok(())
}

fn validate(s: &Setup, cfg: &ExperimentConfig, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let base = s.solve(&s.control, &s.solver)?;
    let v = &cfg.validate;
    let probe = ProbePoint {
        node: v.node.unwrap_or(s.grid.steps() / 2),
        x: v.x,
        y: v.y,
        z: v.z,
        particle: v.particle,
    };
    let report = partial_report(&*s.coeffs, &base.ensemble, &probe, v.h)?;
    let mut t = Table::new(&["index", "declared", "numerical", "rel_error"]);
    for (k, c) in report.checks.iter().enumerate() {
        t.push(vec![k as f64, c.declared, c.numerical, c.rel_error]);
    }
    m.series.insert("partials".into(), t);
    m.output("validation", &report);
    m.output("threshold", v.threshold);
    report.enforce(v.threshold)
}

fn quotient(s: &Setup, cfg: &ExperimentConfig, m: &mut ResultManifest) -> mfbsde::Result<()> {
    let report = difference_quotient_check(
        &*s.coeffs,
        &s.control,
        &s.direction,
        &cfg.diff_quotient.rhos,
        &s.noise,
        s.x0,
        &s.solver,
        &s.linear,
    )?;
    let mut t = Table::new(&["rho", "x_error", "y_error", "z_error"]);
    for r in &report.rows {
        t.push(vec![r.rho, r.x_error, r.y_error, r.z_error]);
    }
    m.series.insert("rho".into(), t);
    m.output("diff_quotient", &report);
    Ok(())
}
