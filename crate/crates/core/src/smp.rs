//! Hamiltonian gradient, stationarity test, projected descent over open-loop
//! controls, and the finite-difference and sampling oracles around them.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointState};
use crate::coefficients::{terminal_stats, CoefficientSet, Family, LawStats, Node, Point, Var};
use crate::control::{project_control, ControlBox, ControlPath, ControlPolicy};
use crate::ensemble::ParticleEnsemble;
use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseEnsemble;
use crate::pairing::Pairing;
use crate::solver::{mean_stderr, particle_costs, picard_solve, SolvedState, SolverParams};
use crate::variational::{pair_all, shared_control, solve_variational, LinearParams, VariationalState};

/// `(−f, σ, L, −Φ, φ)` at one state point with co-state weights `(p, k, 1, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSample {
    pub values: [f64; 5],
    pub weights: [f64; 5],
}

impl HamiltonianSample {
    /// `Σ values·weights`, the scalar Hamiltonian.
    pub fn contract(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }
}

/// Law summaries the Hamiltonian needs at one node.
#[derive(Debug, Clone, Default)]
pub struct HamiltonianStats {
    pub sigma: LawStats,
    pub driver: LawStats,
    pub running: LawStats,
    pub terminal: LawStats,
    pub terminal_cost: LawStats,
}

impl HamiltonianStats {
    /// Summaries of `ens` at node `i < N`.
    pub fn at(coeffs: &dyn CoefficientSet, ens: &ParticleEnsemble, i: usize) -> Self {
        let node = Node {
            i,
            t: ens.grid().time(i),
        };
        let stats = |f: Family| coeffs.law_stats(f, node, &f.law_view(ens, i));
        Self {
            sigma: stats(Family::Sigma),
            driver: stats(Family::Driver),
            running: stats(Family::RunningCost),
            terminal: terminal_stats(coeffs, Family::Terminal, ens),
            terminal_cost: terminal_stats(coeffs, Family::TerminalCost, ens),
        }
    }
}

/// The literal five-component Hamiltonian at `at`; no contraction applied.
pub fn hamiltonian_vector(
    coeffs: &dyn CoefficientSet,
    at: &Point,
    stats: &HamiltonianStats,
    p: f64,
    k: f64,
) -> HamiltonianSample {
    let x_only = Point::at_x(at.node, at.x);
    HamiltonianSample {
        values: [
            -coeffs.value(Family::Driver, at, &stats.driver),
            coeffs.value(Family::Sigma, &x_only, &stats.sigma),
            coeffs.value(Family::RunningCost, at, &stats.running),
            -coeffs.value(Family::Terminal, &x_only, &stats.terminal),
            coeffs.value(Family::TerminalCost, &x_only, &stats.terminal_cost),
        ],
        weights: [p, k, 1.0, 0.0, 0.0],
    }
}

/// `E[D_vH]` per node and component with its Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPath {
    pub values: ControlPath,
    pub stderr: ControlPath,
}

impl GradientPath {
    pub fn max_stderr(&self) -> f64 {
        self.stderr.values().iter().fold(0.0, |a, &s| a.max(s))
    }

    /// `Σ_i Σ_c g(i, c)·v(i, c)·Δt`.
    pub fn inner(&self, v: &ControlPath, dt: f64) -> f64 {
        self.values.values().iter().zip(v.values()).map(|(g, v)| g * v).sum::<f64>() * dt
    }
}

/// `g(t_i) = E[−f*₃[p] + σ*₂[k] + L*₃ − Φ*₂[p_N] + φ*₃](t_i)`.
pub fn gradient_dvh(coeffs: &dyn CoefficientSet, base: &SolvedState, adj: &AdjointState) -> Result<GradientPath> {
    let ens = &base.ensemble;
    let (m, n, dim) = (ens.particles(), ens.grid().steps(), coeffs.control_dim());
    if adj.particles() != m || adj.steps() != n {
        return Err(invalid("adjoint does not belong to this base solve"));
    }
    let st = &adj.starred;
    let mut values = vec![0.0; n * dim];
    let mut stderr = vec![0.0; n * dim];
    let mut sample = vec![0.0; m];
    for c in 0..dim {
        for i in 0..n {
            for (j, s) in sample.iter_mut().enumerate() {
                let b = j * n + i;
                *s = -st.driver_u[c][b] + st.sigma_u[c][b] + st.running_u[c][b] - st.terminal_u[c][b]
                    + st.terminal_cost_u[c][b];
            }
            let (mean, se) = mean_stderr(&sample);
            if !mean.is_finite() {
                return Err(Error::NumericalFailure {
                    what: "gradient",
                    particle: 0,
                    step: i,
                    value: mean,
                });
            }
            values[i * dim + c] = mean;
            stderr[i * dim + c] = se;
        }
    }
    Ok(GradientPath {
        values: ControlPath::new(dim, n, values)?,
        stderr: ControlPath::new(dim, n, stderr)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stationary,
    NotStationary,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub verdict: Verdict,
    /// Most-violating node and component.
    pub worst_node: usize,
    pub worst_component: usize,
    pub violation: f64,
    pub tolerance: f64,
}

fn at_bound(u: f64, b: f64) -> bool {
    b.is_finite() && (u - b).abs() <= 1e-12 * (1.0 + b.abs())
}

/// Componentwise KKT test of `g·(v − u) ≥ −tol` for all `v` in the box.
///
/// Violations within `tol` are stationary, beyond `tol + 3·stderr` not
/// stationary, and inconclusive in between.
pub fn smp_stationarity_check(
    u: &ControlPath,
    g: &GradientPath,
    bounds: &ControlBox,
    tol: f64,
) -> Result<StationarityReport> {
    u.check_same_shape(&g.values)?;
    if bounds.dim() != u.dim() {
        return Err(invalid("control box dimension does not match the control"));
    }
    if !(tol >= 0.0) {
        return Err(invalid("tolerance must be non-negative"));
    }
    let mut worst = (0, 0, 0.0, 0.0);
    for i in 0..u.steps() {
        for c in 0..u.dim() {
            let (ui, gi) = (u.get(i, c), g.values.get(i, c));
            let lower = at_bound(ui, bounds.lower(c));
            let upper = at_bound(ui, bounds.upper(c));
            let violation = match (lower, upper) {
                (true, true) => 0.0,
                (true, false) => (-gi).max(0.0),
                (false, true) => gi.max(0.0),
                (false, false) => gi.abs(),
            };
            if violation > worst.2 {
                worst = (i, c, violation, g.stderr.get(i, c));
            }
        }
    }
    let (worst_node, worst_component, violation, se) = worst;
    let verdict = if violation <= tol {
        Verdict::Stationary
    } else if violation > tol + 3.0 * se {
        Verdict::NotStationary
    } else {
        Verdict::Inconclusive
    };
    Ok(StationarityReport {
        verdict,
        worst_node,
        worst_component,
        violation,
        tolerance: tol,
    })
}

/// `‖u − Π(u − g)‖∞`, zero exactly at box-stationary points.
pub fn projected_residual(u: &ControlPath, g: &ControlPath, bounds: &ControlBox) -> f64 {
    let mut r = 0.0f64;
    for i in 0..u.steps() {
        for c in 0..u.dim() {
            let ui = u.get(i, c);
            r = r.max((ui - bounds.clamp(c, ui - g.get(i, c))).abs());
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    /// Descent step `η`.
    pub step: f64,
    pub iterations: usize,
    /// Projected-residual tolerance; `None` uses `max(10⁻⁶, 3·max stderr)`.
    pub tolerance: Option<f64>,
    /// Halve `η` when the cost rises beyond its noise band.
    pub halve_on_ascent: bool,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            step: 0.25,
            iterations: 200,
            tolerance: None,
            halve_on_ascent: false,
        }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(invalid("step size must be finite and non-negative"));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0) {
                return Err(invalid("tolerance must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub cost: f64,
    pub cost_stderr: f64,
    pub gradient_norm: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub history: Vec<Iterate>,
    pub control: ControlPath,
    pub gradient: GradientPath,
    pub stationarity: StationarityReport,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

fn tag(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

/// Solves, linearizes and differentiates at an open-loop control.
pub fn evaluate(
    coeffs: &dyn CoefficientSet,
    u: &ControlPath,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    solver: &SolverParams,
    linear: &LinearParams,
) -> Result<(SolvedState, AdjointState, GradientPath)> {
    let base = picard_solve(coeffs, &ControlPolicy::OpenLoop(u.clone()), noise, x0, solver)?;
    let adj = solve_adjoint(coeffs, &base, linear)?;
    let g = gradient_dvh(coeffs, &base, &adj)?;
    Ok((base, adj, g))
}

/// Projected gradient descent `u ← Π(u − ηg)` under common noise.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    coeffs: &dyn CoefficientSet,
    u0: &ControlPath,
    bounds: &ControlBox,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    solver: &SolverParams,
    linear: &LinearParams,
    params: &OptimizerParams,
) -> Result<OptimizerReport> {
    params.validate()?;
    u0.check_grid(noise.grid())?;
    if bounds.dim() != u0.dim() || !bounds.contains(u0) {
        return Err(invalid("initial control must be admissible"));
    }
    let started = Instant::now();
    let dt = noise.grid().dt();
    let mut u = u0.clone();
    let mut eta = params.step;
    let mut history: Vec<Iterate> = Vec::new();
    let mut warnings = Vec::new();
    let mut iteration = 0;
    loop {
        let (base, _, g) = evaluate(coeffs, &u, noise, x0, solver, linear).map_err(tag(iteration))?;
        let costs = particle_costs(coeffs, &base.ensemble).map_err(tag(iteration))?;
        let (cost, cost_stderr) = mean_stderr(&costs);
        let residual = projected_residual(&u, &g.values, bounds);
        let tol = params.tolerance.unwrap_or_else(|| (3.0 * g.max_stderr()).max(1e-6));
        if let Some(prev) = history.last() {
            if cost > prev.cost + 3.0 * (cost_stderr + prev.cost_stderr) {
                let msg = format!("cost rose from {} to {} at iteration {iteration}", prev.cost, cost);
                log::warn!("{msg}");
                warnings.push(msg);
                if params.halve_on_ascent {
                    eta *= 0.5;
                }
            }
        }
        history.push(Iterate {
            cost,
            cost_stderr,
            gradient_norm: (g.inner(&g.values, dt)).sqrt(),
            residual,
            step: eta,
        });
        let converged = residual <= tol;
        if converged || iteration >= params.iterations || eta == 0.0 {
            let stationarity = smp_stationarity_check(&u, &g, bounds, tol)?;
            if !converged && eta == 0.0 {
                warnings.push("step size is zero; control left unchanged".into());
            }
            return Ok(OptimizerReport {
                history,
                control: u,
                gradient: g,
                stationarity,
                converged,
                warnings,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
        }
        u = project_control(&u.axpy(-eta, &g.values)?, bounds)?;
        iteration += 1;
    }
}

/// `E[Σ_i Δt(L_x X¹ + L_y Y¹ + L_z Z¹ + ∂_μL·(X¹, Y¹, v)) + φ_x X¹_N + ∂_μφ·(X¹, v)]`,
/// the first variation of the cost in the direction `v`.
pub fn variational_inequality_eval(
    coeffs: &dyn CoefficientSet,
    base: &SolvedState,
    var: &VariationalState,
) -> Result<f64> {
    let ens = &base.ensemble;
    shared_control(ens)?;
    let grid = *ens.grid();
    let (m, n, nodes, dt) = (ens.particles(), grid.steps(), grid.nodes(), grid.dt());
    if var.particles() != m || var.steps() != n {
        return Err(invalid("variational state does not belong to this base solve"));
    }
    let running = Pairing::new(coeffs, ens, Family::RunningCost, 0);
    let tcost = Pairing::new(coeffs, ens, Family::TerminalCost, 0);
    let v = &var.direction;
    let mut per = vec![0.0; m];
    let mut pl = vec![0.0; m];
    for i in 0..n {
        pl.fill(0.0);
        pair_all(&running, i, &var.x1, Some(&var.y1), v, nodes, &mut pl);
        for (j, acc) in per.iter_mut().enumerate() {
            let l = running.partial(Var::X, j, i) * var.x1_at(j, i)
                + running.partial(Var::Y, j, i) * var.y1_at(j, i)
                + running.partial(Var::Z, j, i) * var.z1_at(j, i)
                + pl[j];
            *acc += l * dt;
        }
    }
    let mut pphi = vec![0.0; m];
    pair_all(&tcost, n, &var.x1, None, v, nodes, &mut pphi);
    for (j, acc) in per.iter_mut().enumerate() {
        *acc += tcost.partial(Var::X, j, n) * var.x1_at(j, n) + pphi[j];
    }
    let (mean, _) = mean_stderr(&per);
    if !mean.is_finite() {
        return Err(invalid("variational inequality is not finite"));
    }
    Ok(mean)
}

/// Solves the variational state for `v` and evaluates the variational inequality.
pub fn variational_inequality(
    coeffs: &dyn CoefficientSet,
    base: &SolvedState,
    v: &ControlPath,
    linear: &LinearParams,
) -> Result<f64> {
    let var = solve_variational(coeffs, base, v, linear)?;
    variational_inequality_eval(coeffs, base, &var)
}

/// Unit direction `e_i` in component `c`.
pub fn node_direction(grid: &TimeGrid, dim: usize, i: usize, c: usize) -> Result<ControlPath> {
    if i >= grid.steps() || c >= dim {
        return Err(invalid("node direction out of range"));
    }
    let mut v = ControlPath::zeros(grid, dim);
    v.values_mut()[i * dim + c] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckRow {
    pub label: String,
    /// `Σ g·vΔt / ∫v` (unnormalized when `∫v = 0`).
    pub adjoint: f64,
    /// `(J(u+ρv) − J(u−ρv)) / (2ρ·∫v)` under common noise.
    pub finite_difference: f64,
    /// Standard error of the finite difference from per-particle differences.
    pub fd_stderr: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub rho: f64,
    pub rows: Vec<GradientCheckRow>,
    pub max_rel_error: f64,
}

/// Compares the adjoint directional derivative with a central finite difference
/// of the cost for each labelled direction.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    coeffs: &dyn CoefficientSet,
    u: &ControlPath,
    directions: &[(String, ControlPath)],
    rho: f64,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    solver: &SolverParams,
    linear: &LinearParams,
) -> Result<GradientCheckReport> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid("ρ must be positive"));
    }
    if directions.is_empty() {
        return Err(invalid("gradient check needs at least one direction"));
    }
    let dt = noise.grid().dt();
    let (_, _, g) = evaluate(coeffs, u, noise, x0, solver, linear)?;
    let costs_at = |w: &ControlPath| -> Result<Vec<f64>> {
        let s = picard_solve(coeffs, &ControlPolicy::OpenLoop(w.clone()), noise, x0, solver)?;
        particle_costs(coeffs, &s.ensemble)
    };
    let mut rows = Vec::with_capacity(directions.len());
    for (label, v) in directions {
        v.check_same_shape(u)?;
        let area: f64 = v.values().iter().sum::<f64>() * dt;
        let norm = if area != 0.0 { area } else { 1.0 };
        let plus = costs_at(&u.axpy(rho, v)?)?;
        let minus = costs_at(&u.axpy(-rho, v)?)?;
        let diffs: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * rho * norm)).collect();
        let (fd, fd_stderr) = mean_stderr(&diffs);
        let adjoint = g.inner(v, dt) / norm;
        let rel_error = (adjoint - fd).abs() / fd.abs().max(1e-12);
        rows.push(GradientCheckRow {
            label: label.clone(),
            adjoint,
            finite_difference: fd,
            fd_stderr,
            rel_error,
        });
    }
    let max_rel_error = rows.iter().fold(0.0f64, |a, r| a.max(r.rel_error));
    Ok(GradientCheckReport {
        rho,
        rows,
        max_rel_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyParams {
    pub samples: usize,
    pub seed: u64,
    /// Extra absolute slack on top of `3·stderr`.
    pub band: f64,
}

impl Default for SufficiencyParams {
    fn default() -> Self {
        Self {
            samples: 16,
            seed: 7,
            band: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencySample {
    /// `J(w) − J(u*)` under common noise.
    pub difference: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub cost: f64,
    pub samples: Vec<SufficiencySample>,
    /// `J(w) < J(u*) − (3·stderr + band)`.
    pub violations: usize,
    /// Differences inside the noise band.
    pub inconclusive: usize,
    /// User-asserted; convexity is not verified.
    pub convex_hamiltonian: bool,
}

/// Draws admissible controls uniformly from the box (unbounded components:
/// `u* ± 1`) and checks `J(w) ≥ J(u*)` up to the Monte Carlo band.
#[allow(clippy::too_many_arguments)]
pub fn sufficiency_probe(
    coeffs: &dyn CoefficientSet,
    u_star: &ControlPath,
    bounds: &ControlBox,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    solver: &SolverParams,
    params: &SufficiencyParams,
) -> Result<SufficiencyReport> {
    if bounds.dim() != u_star.dim() || !bounds.contains(u_star) {
        return Err(invalid("u* must be admissible"));
    }
    if !(params.band >= 0.0) {
        return Err(invalid("band must be non-negative"));
    }
    let costs_at = |w: &ControlPath| -> Result<Vec<f64>> {
        let s = picard_solve(coeffs, &ControlPolicy::OpenLoop(w.clone()), noise, x0, solver)?;
        particle_costs(coeffs, &s.ensemble)
    };
    let base = costs_at(u_star)?;
    let (cost, _) = mean_stderr(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (mut samples, mut violations, mut inconclusive) = (Vec::new(), 0, 0);
    for _ in 0..params.samples {
        let mut w = u_star.clone();
        let dim = w.dim();
        for (k, x) in w.values_mut().iter_mut().enumerate() {
            let c = k % dim;
            let (lo, hi) = (bounds.lower(c), bounds.upper(c));
            *x = if lo.is_finite() && hi.is_finite() {
                rng.gen_range(lo..=hi)
            } else {
                bounds.clamp(c, *x + rng.gen_range(-1.0..=1.0))
            };
        }
        let costs = costs_at(&w)?;
        let diffs: Vec<f64> = costs.iter().zip(&base).map(|(a, b)| a - b).collect();
        let (difference, stderr) = mean_stderr(&diffs);
        let band = 3.0 * stderr + params.band;
        if difference < -band {
            violations += 1;
        } else if difference.abs() <= band {
            inconclusive += 1;
        }
        samples.push(SufficiencySample { difference, stderr });
    }
    Ok(SufficiencyReport {
        cost,
        samples,
        violations,
        inconclusive,
        convex_hamiltonian: coeffs.convex_hamiltonian(),
    })
}
