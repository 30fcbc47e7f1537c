//! Particle solver for the controlled mean-field FBSDE.
//!
//! One Picard sweep freezes the law at the previous iterate, simulates X by
//! explicit Euler, and recovers (Y, Z) by a least-squares Monte Carlo
//! backward recursion. Sweeps repeat with path-value relaxation until two
//! successive solves are within tolerance in the common-noise distance.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{node_stats, terminal_stats, CoefficientSet, Family, Node, Point};
use crate::control::ControlPolicy;
use crate::ensemble::{
    compactness_diagnostics, coupled_path_distance, CompactnessReport, ControlValues,
    ParticleEnsemble,
};
use crate::error::{finite, invalid, Result};
use crate::noise::NoiseEnsemble;
use crate::regression::{BasisSpec, NodeProjectors};

/// Initial law for the Picard iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardInit {
    /// `X ≡ x₀`, `Y ≡ 0`.
    #[default]
    Frozen,
    /// `X = x₀ + σ₀·B` with σ₀ evaluated at `(0, x₀)` under the frozen law; `Y ≡ 0`.
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub basis: BasisSpec,
    /// Relaxation weight λ ∈ (0, 1] on path values.
    pub damping: f64,
    /// Stop once successive solves are closer than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub init: PicardInit,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            damping: 1.0,
            tolerance: 1e-10,
            max_iterations: 50,
            init: PicardInit::Frozen,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid("damping must lie in (0, 1]"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("Picard tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Output of [`picard_solve`].
#[derive(Debug, Clone)]
pub struct SolvedState {
    /// Last fresh solve (the best one if the iteration did not converge).
    pub ensemble: ParticleEnsemble,
    /// Law paths the returned ensemble was solved against.
    pub law: ParticleEnsemble,
    /// Projectors on the returned ensemble's state.
    pub projectors: NodeProjectors,
    /// Distance of each fresh solve to the previous one (the first to the initial law).
    pub history: Vec<f64>,
    /// Terminal exactness of each backward pass.
    pub terminal_exact: Vec<bool>,
    pub converged: bool,
    pub decoupled: bool,
    /// `max |Z|` over particles and steps.
    pub z_sup: f64,
    pub warnings: Vec<String>,
}

impl SolvedState {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn compactness(&self) -> CompactnessReport {
        compactness_diagnostics(&self.ensemble)
    }
}

static UNBOUNDED_WARNED: AtomicBool = AtomicBool::new(false);

fn unbounded_warning(coeffs: &dyn CoefficientSet) -> Option<String> {
    if coeffs.bounded() {
        return None;
    }
    let msg = format!(
        "coefficients `{}` are unbounded; boundedness assumptions of the theory do not hold",
        coeffs.name()
    );
    if !UNBOUNDED_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("{msg}");
    }
    Some(msg)
}

/// Euler simulation of X with σ evaluated against `law` (truncated at each node).
///
/// Returns an ensemble with X filled, `Y = Z = 0`, and the realized controls.
pub fn solve_forward(
    coeffs: &dyn CoefficientSet,
    control: &ControlPolicy,
    law: &ParticleEnsemble,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
) -> Result<ParticleEnsemble> {
    let grid = *noise.grid();
    if law.grid() != &grid || law.particles() != noise.particles() {
        return Err(invalid("law ensemble does not match the noise grid"));
    }
    if control.dim() != coeffs.control_dim() {
        return Err(invalid(format!(
            "control has dimension {}, coefficients expect {}",
            control.dim(),
            coeffs.control_dim()
        )));
    }
    let (m, n, nodes) = (noise.particles(), grid.steps(), grid.nodes());
    let stats = node_stats(coeffs, Family::Sigma, law);
    let mut x = vec![0.0; m * nodes];
    let controls = match control {
        ControlPolicy::OpenLoop(u) => {
            u.check_grid(&grid)?;
            x.par_chunks_mut(nodes)
                .enumerate()
                .try_for_each(|(j, path)| -> Result<()> {
                    path[0] = x0;
                    for i in 0..n {
                        let at = Point::at_x(Node { i, t: grid.time(i) }, path[i]);
                        let s = finite("sigma", j, i, coeffs.value(Family::Sigma, &at, &stats[i]))?;
                        path[i + 1] = path[i] + s * noise.increment(j, i);
                    }
                    Ok(())
                })?;
            ControlValues::Shared(u.clone())
        }
        ControlPolicy::Feedback { rule, bounds } => {
            let dim = rule.dim();
            let mut values = vec![0.0; m * n * dim];
            x.par_chunks_mut(nodes)
                .zip(values.par_chunks_mut(n * dim))
                .enumerate()
                .try_for_each(|(j, (path, us))| -> Result<()> {
                    path[0] = x0;
                    for i in 0..n {
                        let t = grid.time(i);
                        let u = &mut us[i * dim..(i + 1) * dim];
                        rule.control(t, path[i], u);
                        for (c, v) in u.iter_mut().enumerate() {
                            *v = bounds.clamp(c, *v);
                        }
                        let at = Point::at_x(Node { i, t }, path[i]);
                        let s = finite("sigma", j, i, coeffs.value(Family::Sigma, &at, &stats[i]))?;
                        path[i + 1] = path[i] + s * noise.increment(j, i);
                    }
                    Ok(())
                })?;
            ControlValues::PerParticle { dim, values }
        }
    };
    ParticleEnsemble::from_parts(
        Arc::clone(noise),
        x0,
        x,
        vec![0.0; m * nodes],
        vec![0.0; m * n],
        controls,
    )
}

/// One explicit LSMC step on column vectors:
/// `Z = Π[(y' − Π y')ΔB]/Δt`, `Ŷ = Π[y' − Z ΔB]`, with `Π` the node projection.
pub(crate) fn lsmc_step(
    proj: &crate::regression::Projector,
    next: &[f64],
    dbs: &[f64],
    dt: f64,
    z: &mut [f64],
    yhat: &mut [f64],
) {
    let m = next.len();
    let mut buf = vec![0.0; m];
    proj.project_into(next, yhat);
    for j in 0..m {
        buf[j] = (next[j] - yhat[j]) * dbs[j];
    }
    proj.project_into(&buf, z);
    for zj in z.iter_mut() {
        *zj /= dt;
    }
    for j in 0..m {
        buf[j] = next[j] - z[j] * dbs[j];
    }
    proj.project_into(&buf, yhat);
}

/// Backward recursion for (Y, Z) on a forward-simulated ensemble, with f and Φ
/// evaluated against `law`. Returns `max |Z|`.
pub fn solve_backward_lsmc(
    coeffs: &dyn CoefficientSet,
    ens: &mut ParticleEnsemble,
    law: &ParticleEnsemble,
    projectors: &NodeProjectors,
) -> Result<f64> {
    let grid = *ens.grid();
    let (m, n, nodes) = (ens.particles(), grid.steps(), grid.nodes());
    if law.grid() != &grid || law.particles() != m {
        return Err(invalid("law ensemble does not match the solved ensemble"));
    }
    if projectors.len() != n {
        return Err(invalid("projectors do not match the grid"));
    }
    let dt = grid.dt();
    let phi_stats = terminal_stats(coeffs, Family::Terminal, law);
    let f_stats = node_stats(coeffs, Family::Driver, law);
    let node_n = Node { i: n, t: grid.time(n) };
    let mut next: Vec<f64> = (0..m)
        .map(|j| {
            let at = Point::at_x(node_n, ens.x_at(j, n));
            finite("terminal", j, n, coeffs.value(Family::Terminal, &at, &phi_stats))
        })
        .collect::<Result<_>>()?;
    for j in 0..m {
        ens.y[j * nodes + n] = next[j];
    }
    let mut z = vec![0.0; m];
    let mut yhat = vec![0.0; m];
    let mut dbs = vec![0.0; m];
    let mut z_sup: f64 = 0.0;
    for i in (0..n).rev() {
        let node = Node { i, t: grid.time(i) };
        for (j, d) in dbs.iter_mut().enumerate() {
            *d = ens.noise().increment(j, i);
        }
        lsmc_step(projectors.at(i), &next, &dbs, dt, &mut z, &mut yhat);
        for j in 0..m {
            let at = Point::new(node, ens.x_at(j, i), yhat[j], z[j]);
            let f = finite("driver", j, i, coeffs.value(Family::Driver, &at, &f_stats[i]))?;
            next[j] = yhat[j] + f * dt;
            ens.y[j * nodes + i] = next[j];
            ens.z[j * n + i] = z[j];
            z_sup = z_sup.max(z[j].abs());
        }
    }
    Ok(z_sup)
}

fn terminal_exact(coeffs: &dyn CoefficientSet, ens: &ParticleEnsemble, law: &ParticleEnsemble) -> bool {
    let grid = ens.grid();
    let n = grid.steps();
    let stats = terminal_stats(coeffs, Family::Terminal, law);
    let node = Node { i: n, t: grid.time(n) };
    (0..ens.particles()).all(|j| {
        let want = coeffs.value(Family::Terminal, &Point::at_x(node, ens.x_at(j, n)), &stats);
        ens.y_at(j, n).to_bits() == want.to_bits()
    })
}

fn initial_law(
    coeffs: &dyn CoefficientSet,
    control: &ControlPolicy,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    init: PicardInit,
) -> Result<ParticleEnsemble> {
    let grid = *noise.grid();
    let u = match control {
        ControlPolicy::OpenLoop(u) => u.clone(),
        ControlPolicy::Feedback { rule, .. } => crate::control::ControlPath::zeros(&grid, rule.dim()),
    };
    let frozen = ParticleEnsemble::constant(Arc::clone(noise), x0, u)?;
    match init {
        PicardInit::Frozen => Ok(frozen),
        PicardInit::Bootstrap => {
            let node = Node { i: 0, t: 0.0 };
            let st = coeffs.law_stats(Family::Sigma, node, &Family::Sigma.law_view(&frozen, 0));
            let s0 = finite("sigma", 0, 0, coeffs.value(Family::Sigma, &Point::at_x(node, x0), &st))?;
            let m = noise.particles();
            let x: Vec<f64> = (0..m)
                .flat_map(|j| noise.brownian_path(j).into_iter().map(move |b| x0 + s0 * b))
                .collect();
            ParticleEnsemble::from_parts(
                Arc::clone(noise),
                x0,
                x,
                frozen.y.clone(),
                frozen.z.clone(),
                frozen.controls.clone(),
            )
        }
    }
}

/// Solves the coupled system by damped Picard iteration on the empirical path law.
///
/// Non-convergence is not an error: the closest pair of successive solves is
/// returned with `converged = false`.
pub fn picard_solve(
    coeffs: &dyn CoefficientSet,
    control: &ControlPolicy,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    params: &SolverParams,
) -> Result<SolvedState> {
    picard_solve_with(coeffs, control, noise, x0, params, None)
}

/// [`picard_solve`], optionally regressing on a fixed set of projectors
/// instead of refitting the basis on each fresh ensemble.
pub(crate) fn picard_solve_with(
    coeffs: &dyn CoefficientSet,
    control: &ControlPolicy,
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    params: &SolverParams,
    fixed: Option<&NodeProjectors>,
) -> Result<SolvedState> {
    params.validate()?;
    let mut warnings: Vec<String> = unbounded_warning(coeffs).into_iter().collect();
    let mut law = initial_law(coeffs, control, noise, x0, params.init)?;
    let mut previous: Option<ParticleEnsemble> = None;
    let mut history = Vec::new();
    let mut exact = Vec::new();
    let mut best: Option<(f64, ParticleEnsemble, ParticleEnsemble, NodeProjectors, f64)> = None;
    let mut converged = false;
    for _ in 0..params.max_iterations {
        let mut fresh = solve_forward(coeffs, control, &law, noise, x0)?;
        let projectors = match fixed {
            Some(p) => p.clone(),
            None => NodeProjectors::build(&fresh, &params.basis)?,
        };
        let z_sup = solve_backward_lsmc(coeffs, &mut fresh, &law, &projectors)?;
        exact.push(terminal_exact(coeffs, &fresh, &law));
        let d = coupled_path_distance(&fresh, previous.as_ref().unwrap_or(&law))?;
        history.push(d);
        let next_law = law.relax(&fresh, params.damping);
        let improved = best.as_ref().is_none_or(|b| d <= b.0);
        if d < params.tolerance {
            best = Some((d, fresh, law, projectors, z_sup));
            converged = true;
            break;
        }
        if improved {
            best = Some((d, fresh.clone(), law, projectors, z_sup));
        }
        law = next_law;
        previous = Some(fresh);
    }
    let (last, ensemble, law, projectors, z_sup) = best.expect("at least one iteration");
    if !converged {
        let msg = format!(
            "Picard iteration did not reach {:e} in {} iterations (best {:e})",
            params.tolerance, params.max_iterations, last
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for (i, r) in projectors.ridge_nodes() {
        warnings.push(format!("ridge regularizer {r:e} used at node {i}"));
    }
    Ok(SolvedState {
        ensemble,
        law,
        projectors,
        history,
        terminal_exact: exact,
        converged,
        decoupled: !coeffs.dynamics_law_dependent(),
        z_sup,
        warnings,
    })
}

/// Per-particle cost `Σ_i L(t_i, X_i, Y_i, Z_i, μ)Δt + φ(X_N, μ)` with `μ` the
/// ensemble's own path law.
pub fn particle_costs(coeffs: &dyn CoefficientSet, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
    let grid = *ens.grid();
    let (n, dt) = (grid.steps(), grid.dt());
    let l_stats = node_stats(coeffs, Family::RunningCost, ens);
    let phi_stats = terminal_stats(coeffs, Family::TerminalCost, ens);
    let node_n = Node { i: n, t: grid.time(n) };
    (0..ens.particles())
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                let at = Point::new(Node { i, t: grid.time(i) }, ens.x_at(j, i), ens.y_at(j, i), ens.z_at(j, i));
                acc += finite("running cost", j, i, coeffs.value(Family::RunningCost, &at, &l_stats[i]))? * dt;
            }
            let at = Point::at_x(node_n, ens.x_at(j, n));
            acc += finite("terminal cost", j, n, coeffs.value(Family::TerminalCost, &at, &phi_stats))?;
            Ok(acc)
        })
        .collect()
}

/// Monte Carlo cost functional `J = mean_j[particle cost]`.
pub fn cost_functional(coeffs: &dyn CoefficientSet, state: &SolvedState) -> Result<f64> {
    let costs = particle_costs(coeffs, &state.ensemble)?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Mean and standard error of a sample; a bitwise-constant sample returns its value exactly.
pub(crate) fn mean_stderr(v: &[f64]) -> (f64, f64) {
    if let Some(&first) = v.first() {
        if v.iter().all(|x| x.to_bits() == first.to_bits()) {
            return (first, 0.0);
        }
    }
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}
