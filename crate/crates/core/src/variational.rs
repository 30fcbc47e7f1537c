//! Linearized state `(X¹, Y¹, Z¹)` along an open-loop control direction `v`,
//! and the difference-quotient check against perturbed solves.
//!
//! ```text
//! X¹_{i+1} = X¹_i + (σ_x X¹_i + P_σ(i)) ΔB_i,              X¹_0 = 0
//! Y¹_N     = Φ_x X¹_N + P_Φ
//! Y¹_i     = Ŷ¹_i + (f_x X¹_i + f_y Ŷ¹_i + f_z Z¹_i + P_f(i)) Δt
//! ```
//!
//! where `P_c = Ẽ⟨∂_μ c, (X̃¹, Ỹ¹, ṽ)⟩` pairs the measure kernels of `c` with the
//! tilde copy of the linearized state. `P_f` reads `Ỹ¹_{·∨t_i}`, which includes
//! the node being computed; that self-reference is resolved by sweeping
//! backward repeatedly (later nodes are always current) until the relative
//! change drops below tolerance.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, Family, Slot, Var};
use crate::control::{ControlPath, ControlPolicy};
use crate::ensemble::{ControlValues, ParticleEnsemble};
use crate::error::{invalid, Error, Result};
use crate::noise::NoiseEnsemble;
use crate::pairing::Pairing;
use crate::solver::{lsmc_step, picard_solve, picard_solve_with, SolvedState, SolverParams};

/// Settings shared by the variational and adjoint solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// Size `M̃` of the stride subsample for double particle averages
    /// (unused for point-free kernels; `0` means all particles).
    pub tilde_particles: usize,
    /// Relative tolerance of the inner fixed-point sweeps.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self {
            tilde_particles: 128,
            tolerance: 1e-12,
            max_iterations: 50,
        }
    }
}

impl LinearParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("linear-solve tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Solution of the variational equation; particle-major arrays.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub direction: ControlPath,
    pub(crate) x1: Vec<f64>,
    pub(crate) y1: Vec<f64>,
    pub(crate) z1: Vec<f64>,
    particles: usize,
    steps: usize,
    /// Relative change of `Y¹` per backward sweep.
    pub sweep_history: Vec<f64>,
}

impl VariationalState {
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn x1(&self, j: usize) -> &[f64] {
        let n = self.steps + 1;
        &self.x1[j * n..(j + 1) * n]
    }

    pub fn y1(&self, j: usize) -> &[f64] {
        let n = self.steps + 1;
        &self.y1[j * n..(j + 1) * n]
    }

    pub fn z1(&self, j: usize) -> &[f64] {
        &self.z1[j * self.steps..(j + 1) * self.steps]
    }

    pub fn x1_at(&self, j: usize, i: usize) -> f64 {
        self.x1[j * (self.steps + 1) + i]
    }

    pub fn y1_at(&self, j: usize, i: usize) -> f64 {
        self.y1[j * (self.steps + 1) + i]
    }

    pub fn z1_at(&self, j: usize, i: usize) -> f64 {
        self.z1[j * self.steps + i]
    }

    pub fn is_zero(&self) -> bool {
        self.x1.iter().chain(&self.y1).chain(&self.z1).all(|&v| v == 0.0)
    }
}

pub(crate) fn shared_control(ens: &ParticleEnsemble) -> Result<&ControlPath> {
    match ens.controls() {
        ControlValues::Shared(u) => Ok(u),
        ControlValues::PerParticle { .. } => Err(invalid(
            "linearization needs an open-loop base control; feedback rules are simulation-only",
        )),
    }
}

fn check_direction(coeffs: &dyn CoefficientSet, base: &SolvedState, v: &ControlPath) -> Result<()> {
    shared_control(&base.ensemble)?;
    v.check_grid(base.ensemble.grid())?;
    if v.dim() != coeffs.control_dim() {
        return Err(invalid(format!(
            "direction has dimension {}, coefficients expect {}",
            v.dim(),
            coeffs.control_dim()
        )));
    }
    Ok(())
}

/// Adds the kernel pairings of every active slot of `pairing` at node `r`.
pub(crate) fn pair_all(
    pairing: &Pairing<'_>,
    r: usize,
    x1: &[f64],
    y1: Option<&[f64]>,
    v: &ControlPath,
    nodes: usize,
    out: &mut [f64],
) {
    for slot in pairing.slots() {
        match slot {
            Slot::X => pairing.directional(r, slot, &|m, s| x1[m * nodes + s], out),
            Slot::Y => {
                if let Some(y1) = y1 {
                    pairing.directional(r, slot, &|m, s| y1[m * nodes + s], out)
                }
            }
            Slot::U(c) => pairing.directional(r, slot, &|_, s| v.get(s, c), out),
        }
    }
}

/// Fails on the first non-finite entry of a particle-major array with row length `stride`.
pub(crate) fn check_finite(what: &'static str, data: &[f64], stride: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(k) => Err(Error::NumericalFailure {
            what,
            particle: k / stride,
            step: k % stride,
            value: data[k],
        }),
    }
}

fn sup_rel_change(new: &[f64], old: &[f64]) -> f64 {
    let scale = new.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = new.iter().zip(old).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    diff / scale
}

/// Solves the variational equation around `base` in the direction `v`.
///
/// The scheme is linear in `v` and exactly homogeneous: doubling `v` doubles
/// every output bitwise.
pub fn solve_variational(
    coeffs: &dyn CoefficientSet,
    base: &SolvedState,
    v: &ControlPath,
    params: &LinearParams,
) -> Result<VariationalState> {
    params.validate()?;
    check_direction(coeffs, base, v)?;
    let ens = &base.ensemble;
    let grid = *ens.grid();
    let (m, n, nodes, dt) = (ens.particles(), grid.steps(), grid.nodes(), grid.dt());
    let noise = ens.noise();

    let sigma = Pairing::new(coeffs, ens, Family::Sigma, params.tilde_particles);
    let mut x1 = vec![0.0; m * nodes];
    let mut p = vec![0.0; m];
    for i in 0..n {
        p.fill(0.0);
        pair_all(&sigma, i, &x1, None, v, nodes, &mut p);
        let sx: Vec<f64> = (0..m).map(|j| sigma.partial(Var::X, j, i)).collect();
        for j in 0..m {
            let cur = x1[j * nodes + i];
            x1[j * nodes + i + 1] = cur + (sx[j] * cur + p[j]) * noise.increment(j, i);
        }
    }

    let terminal = Pairing::new(coeffs, ens, Family::Terminal, params.tilde_particles);
    let mut y1 = vec![0.0; m * nodes];
    p.fill(0.0);
    pair_all(&terminal, n, &x1, None, v, nodes, &mut p);
    for j in 0..m {
        y1[j * nodes + n] = terminal.partial(Var::X, j, n) * x1[j * nodes + n] + p[j];
    }

    let driver = Pairing::new(coeffs, ens, Family::Driver, params.tilde_particles);
    let mut fixed = vec![0.0; m * n];
    let mut fxyz = vec![[0.0; 3]; m * n];
    fixed
        .par_chunks_mut(m)
        .zip(fxyz.par_chunks_mut(m))
        .enumerate()
        .for_each(|(i, (pf, d))| {
            for slot in driver.slots() {
                match slot {
                    Slot::X => driver.directional(i, slot, &|mm, s| x1[mm * nodes + s], pf),
                    Slot::U(c) => driver.directional(i, slot, &|_, s| v.get(s, c), pf),
                    Slot::Y => {}
                }
            }
            for (j, dj) in d.iter_mut().enumerate() {
                *dj = [
                    driver.partial(Var::X, j, i),
                    driver.partial(Var::Y, j, i),
                    driver.partial(Var::Z, j, i),
                ];
            }
        });
    let anticipating = driver.active(Slot::Y);

    let mut z1 = vec![0.0; m * n];
    let mut history = Vec::new();
    let (mut next, mut zc, mut yhat, mut dbs, mut py) =
        (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for _ in 0..params.max_iterations {
        let previous = anticipating.then(|| y1.clone());
        for i in (0..n).rev() {
            for j in 0..m {
                next[j] = y1[j * nodes + i + 1];
                dbs[j] = noise.increment(j, i);
            }
            lsmc_step(base.projectors.at(i), &next, &dbs, dt, &mut zc, &mut yhat);
            py.fill(0.0);
            if anticipating {
                driver.directional(i, Slot::Y, &|mm, s| y1[mm * nodes + s], &mut py);
            }
            for j in 0..m {
                let [fx, fy, fz] = fxyz[i * m + j];
                let drive = fx * x1[j * nodes + i] + fy * yhat[j] + fz * zc[j] + fixed[i * m + j] + py[j];
                y1[j * nodes + i] = yhat[j] + drive * dt;
                z1[j * n + i] = zc[j];
            }
        }
        let Some(previous) = previous else {
            history.push(0.0);
            break;
        };
        let d = sup_rel_change(&y1, &previous);
        history.push(d);
        if d <= params.tolerance {
            break;
        }
    }
    let last = *history.last().expect("at least one sweep");
    if !(last <= params.tolerance) {
        return Err(Error::ConvergenceFailure {
            what: "variational backward sweeps",
            iterations: history.len(),
            last,
            history,
        });
    }
    check_finite("X1", &x1, nodes)?;
    check_finite("Y1", &y1, nodes)?;
    check_finite("Z1", &z1, n)?;
    Ok(VariationalState {
        direction: v.clone(),
        x1,
        y1,
        z1,
        particles: m,
        steps: n,
        sweep_history: history,
    })
}

/// Errors of the difference quotients `(S^{u+ρv} − S^u)/ρ` against the variational state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuotientRow {
    pub rho: f64,
    /// `(mean_j sup_i |ΔX/ρ − X¹|²)^{1/2}`.
    pub x_error: f64,
    pub y_error: f64,
    /// `(mean_j Σ_i |ΔZ/ρ − Z¹|² Δt)^{1/2}`.
    pub z_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotientReport {
    pub rows: Vec<QuotientRow>,
    /// Least-squares slopes of `ln error` against `ln ρ`; `None` when fewer
    /// than two errors are positive.
    pub slope_x: Option<f64>,
    pub slope_y: Option<f64>,
    pub slope_z: Option<f64>,
}

/// Least-squares slope of `ln y` on `ln x` over the pairs with `y > 0`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn quotient_errors(base: &ParticleEnsemble, bumped: &ParticleEnsemble, var: &VariationalState, rho: f64) -> QuotientRow {
    let grid = base.grid();
    let (m, dt) = (base.particles(), grid.dt());
    let sup_err = |a: &[f64], b: &[f64], d: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(d)
            .map(|((p, q), r)| ((q - p) / rho - r).abs())
            .fold(0.0, f64::max)
    };
    let (mut ex, mut ey, mut ez) = (0.0, 0.0, 0.0);
    for j in 0..m {
        ex += sup_err(base.x(j), bumped.x(j), var.x1(j)).powi(2);
        ey += sup_err(base.y(j), bumped.y(j), var.y1(j)).powi(2);
        ez += base
            .z(j)
            .iter()
            .zip(bumped.z(j))
            .zip(var.z1(j))
            .map(|((p, q), r)| ((q - p) / rho - r).powi(2))
            .sum::<f64>()
            * dt;
    }
    let m = m as f64;
    QuotientRow {
        rho,
        x_error: (ex / m).sqrt(),
        y_error: (ey / m).sqrt(),
        z_error: (ez / m).sqrt(),
    }
}

/// Solves at `u` and at each `u + ρv` under common noise and compares the
/// difference quotients with the variational state.
///
/// The bumped solves regress on the base solve's projectors, so the quotients
/// differentiate the same discrete scheme the variational state linearizes.
/// Refitting the basis at `u + ρv` would add the basis's own sensitivity,
/// an `O(1)` term the linearization does not carry.
///
/// The quotients resolve the Picard fixed point only to `solver.tolerance/ρ`,
/// so the solver tolerance should sit well below the smallest expected error.
#[allow(clippy::too_many_arguments)]
pub fn difference_quotient_check(
    coeffs: &dyn CoefficientSet,
    u: &ControlPath,
    v: &ControlPath,
    rhos: &[f64],
    noise: &Arc<NoiseEnsemble>,
    x0: f64,
    solver: &SolverParams,
    linear: &LinearParams,
) -> Result<QuotientReport> {
    if rhos.is_empty() || rhos.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(invalid("ρ values must lie in (0, 1]"));
    }
    let base = picard_solve(coeffs, &ControlPolicy::OpenLoop(u.clone()), noise, x0, solver)?;
    let var = solve_variational(coeffs, &base, v, linear)?;
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let bumped_u = u.axpy(rho, v)?;
        let bumped = picard_solve_with(
            coeffs,
            &ControlPolicy::OpenLoop(bumped_u),
            noise,
            x0,
            solver,
            Some(&base.projectors),
        )?;
        rows.push(quotient_errors(&base.ensemble, &bumped.ensemble, &var, rho));
    }
    let r: Vec<f64> = rows.iter().map(|q| q.rho).collect();
    let col = |f: fn(&QuotientRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    Ok(QuotientReport {
        slope_x: log_log_slope(&r, &col(|q| q.x_error)),
        slope_y: log_log_slope(&r, &col(|q| q.y_error)),
        slope_z: log_log_slope(&r, &col(|q| q.z_error)),
        rows,
    })
}
