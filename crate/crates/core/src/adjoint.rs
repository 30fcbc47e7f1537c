//! Starred operators, the adjoint pair `p` (forward, with delay) and `(q, k)`
//! (backward, anticipated), and the duality identity linking them to the
//! variational state.
//!
//! A starred operator contracts a measure kernel with co-state weights of the
//! law samples and reads the result at the path time it perturbs:
//!
//! ```text
//! c*_m(b) = Σ_r Σ_{s : read_r(s) = b} mean_j κ_c(t_r, θ_j(t_r); path_m)(s)·w_j(r)·Δt
//! ```
//!
//! followed by a regression on the state at `t_b` (the conditional expectation).
//! Terminal families have a single row at `t_N` and no `Δt` factor.
//!
//! ```text
//! p_{i+1} = p_i + (f_y p_i + f*₂[p](i) − L_y − L*₂ − φ*₂) Δt + (f_z p_i − L_z) ΔB_i,   p_0 = 0
//! q_N     = φ_x − Φ_x p_N
//! q_i     = q̂_i + (σ_x k_i + σ*₁[k](i) − f_x p_i − f*₁[p] + L_x + L*₁ + φ*₁ − Φ*₁[p_N]) Δt
//! ```
//!
//! `f*₂[p](i)` needs `p` only up to node `i`, and `σ*₁[k](i)` needs `k` only
//! from node `i` on. In the explicit scheme `k_i` is regressed before `q_i`, so
//! the anticipated term is available exactly and one backward sweep solves the
//! `(q, k)` equation.

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, Family, Slot, Var};
use crate::error::{invalid, Result};
use crate::pairing::Pairing;
use crate::regression::NodeProjectors;
use crate::solver::{lsmc_step, mean_stderr, SolvedState};
use crate::variational::{check_finite, shared_control, LinearParams, VariationalState};

/// Starred paths of one adjoint solve.
///
/// State-slot operators are regressed, particle-major `M × N`. Control-slot
/// operators are kept raw (one `M × N` array per control component) since only
/// their expectations enter the gradient.
#[derive(Debug, Clone, Default)]
pub struct StarredPaths {
    /// `(∂_μσ)*₁[k]`
    pub sigma_x: Vec<f64>,
    /// `(∂_μf)*₁[p]`
    pub driver_x: Vec<f64>,
    /// `(∂_μf)*₂[p]`
    pub driver_y: Vec<f64>,
    /// `(∂_μΦ)*₁[p_N]`
    pub terminal_x: Vec<f64>,
    /// `(∂_μL)*₁`
    pub running_x: Vec<f64>,
    /// `(∂_μL)*₂`
    pub running_y: Vec<f64>,
    /// `(∂_μφ)*₁`
    pub terminal_cost_x: Vec<f64>,
    /// `(∂_μφ)*₂`
    pub terminal_cost_y: Vec<f64>,
    /// `(∂_μσ)*₂[k]`
    pub sigma_u: Vec<Vec<f64>>,
    /// `(∂_μf)*₃[p]`
    pub driver_u: Vec<Vec<f64>>,
    /// `(∂_μΦ)*₂[p_N]`
    pub terminal_u: Vec<Vec<f64>>,
    /// `(∂_μL)*₃`
    pub running_u: Vec<Vec<f64>>,
    /// `(∂_μφ)*₃`
    pub terminal_cost_u: Vec<Vec<f64>>,
}

/// Adjoint processes on the base ensemble's particles.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub(crate) p: Vec<f64>,
    pub(crate) q: Vec<f64>,
    pub(crate) k: Vec<f64>,
    particles: usize,
    steps: usize,
    pub starred: StarredPaths,
    /// Backward sweeps used for `(q, k)`; the explicit scheme needs one.
    pub sweeps: usize,
    /// `q_N = φ_x − Φ_x p_N` re-verified bitwise after the sweep.
    pub terminal_exact: bool,
}

impl AdjointState {
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn p(&self, j: usize) -> &[f64] {
        let n = self.steps + 1;
        &self.p[j * n..(j + 1) * n]
    }

    pub fn q(&self, j: usize) -> &[f64] {
        let n = self.steps + 1;
        &self.q[j * n..(j + 1) * n]
    }

    pub fn k(&self, j: usize) -> &[f64] {
        &self.k[j * self.steps..(j + 1) * self.steps]
    }
}

fn is_terminal(family: Family) -> bool {
    matches!(family, Family::Terminal | Family::TerminalCost)
}

/// Weight column `r` of a particle-major array whose rows have length `len/M`.
fn column(weights: &[f64], m: usize, r: usize) -> Vec<f64> {
    let stride = weights.len() / m;
    (0..m).map(|j| weights[j * stride + r.min(stride - 1)]).collect()
}

fn check_weights(family: Family, weights: Option<&[f64]>, m: usize, n: usize) -> Result<()> {
    let ok = match (family, weights) {
        (Family::RunningCost | Family::TerminalCost, None) => true,
        (Family::Sigma | Family::Driver, Some(w)) => w.len() == m * n || w.len() == m * (n + 1),
        (Family::Terminal, Some(w)) => w.len() == m || w.len() == m * (n + 1),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(invalid(format!(
            "weights for the {} kernels: σ takes k (M×N), f takes p (M×(N+1)), Φ takes p_N (M) \
             or p, L and φ take none",
            family.name()
        )))
    }
}

/// Unregressed starred operator, `M × N`. Rows are accumulated in the order the
/// adjoint sweeps produce them (backward for σ, forward otherwise).
fn starred_raw(pairing: &Pairing<'_>, family: Family, slot: Slot, weights: Option<&[f64]>, m: usize, n: usize, dt: f64) -> Vec<f64> {
    let mut acc = vec![0.0; m * n];
    if !pairing.active(slot) {
        return acc;
    }
    if is_terminal(family) {
        let w = weights.map(|w| column(w, m, n));
        pairing.accumulate(n, slot, w.as_deref(), 1.0, &mut acc);
        return acc;
    }
    let mut row = |r: usize| {
        let w = weights.map(|w| column(w, m, r));
        pairing.accumulate(r, slot, w.as_deref(), dt, &mut acc);
    };
    if family == Family::Sigma {
        (0..n).rev().for_each(&mut row);
    } else {
        (0..n).for_each(&mut row);
    }
    acc
}

fn regress_node(projectors: &NodeProjectors, raw: &[f64], m: usize, n: usize, i: usize) -> Vec<f64> {
    let col: Vec<f64> = (0..m).map(|j| raw[j * n + i]).collect();
    projectors.at(i).project(&col)
}

fn regress_bins(projectors: &NodeProjectors, raw: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..n {
        for (j, v) in regress_node(projectors, raw, m, n, i).into_iter().enumerate() {
            out[j * n + i] = v;
        }
    }
    out
}

/// One starred operator on the base ensemble, regressed on the state at each node.
///
/// Weights by family: σ takes `k` (`M×N`), f takes `p` (`M×(N+1)`), Φ takes
/// `p_N` (`M`, or the full `p`), L and φ take none. Returns `M × N`, particle-major.
pub fn compute_starred(
    coeffs: &dyn CoefficientSet,
    base: &SolvedState,
    family: Family,
    slot: Slot,
    weights: Option<&[f64]>,
    params: &LinearParams,
) -> Result<Vec<f64>> {
    let ens = &base.ensemble;
    let (m, n, dt) = (ens.particles(), ens.grid().steps(), ens.grid().dt());
    check_weights(family, weights, m, n)?;
    if !family.slots(coeffs.control_dim()).contains(&slot) {
        return Err(invalid(format!("{} has no kernel slot {}", family.name(), slot.label())));
    }
    let pairing = Pairing::new(coeffs, ens, family, params.tilde_particles);
    let raw = starred_raw(&pairing, family, slot, weights, m, n, dt);
    Ok(regress_bins(&base.projectors, &raw, m, n))
}

/// The delay SDE for `p`, by explicit Euler. Returns `M × (N+1)`.
pub fn solve_adjoint_p(coeffs: &dyn CoefficientSet, base: &SolvedState, params: &LinearParams) -> Result<Vec<f64>> {
    params.validate()?;
    shared_control(&base.ensemble)?;
    let ens = &base.ensemble;
    let grid = *ens.grid();
    let (m, n, nodes, dt) = (ens.particles(), grid.steps(), grid.nodes(), grid.dt());
    let tilde = params.tilde_particles;
    let running = Pairing::new(coeffs, ens, Family::RunningCost, tilde);
    let tcost = Pairing::new(coeffs, ens, Family::TerminalCost, tilde);
    let driver = Pairing::new(coeffs, ens, Family::Driver, tilde);
    let l2 = regress_bins(
        &base.projectors,
        &starred_raw(&running, Family::RunningCost, Slot::Y, None, m, n, dt),
        m,
        n,
    );
    let phi2 = regress_bins(
        &base.projectors,
        &starred_raw(&tcost, Family::TerminalCost, Slot::Y, None, m, n, dt),
        m,
        n,
    );
    let delay = driver.active(Slot::Y);
    let mut acc = vec![0.0; m * n];
    let mut p = vec![0.0; m * nodes];
    for i in 0..n {
        let pi: Vec<f64> = (0..m).map(|j| p[j * nodes + i]).collect();
        let f2 = if delay {
            driver.accumulate(i, Slot::Y, Some(&pi), dt, &mut acc);
            regress_node(&base.projectors, &acc, m, n, i)
        } else {
            vec![0.0; m]
        };
        for j in 0..m {
            let (fy, fz) = (driver.partial(Var::Y, j, i), driver.partial(Var::Z, j, i));
            let (ly, lz) = (running.partial(Var::Y, j, i), running.partial(Var::Z, j, i));
            let drift = fy * pi[j] + f2[j] - ly - l2[j * n + i] - phi2[j * n + i];
            let diffusion = fz * pi[j] - lz;
            p[j * nodes + i + 1] = pi[j] + drift * dt + diffusion * ens.noise().increment(j, i);
        }
    }
    check_finite("adjoint p", &p, nodes)?;
    Ok(p)
}

/// The anticipated BSDE for `(q, k)` by one backward LSMC sweep.
/// Returns `(q: M × (N+1), k: M × N)`.
pub fn solve_adjoint_qk(
    coeffs: &dyn CoefficientSet,
    base: &SolvedState,
    p: &[f64],
    params: &LinearParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    shared_control(&base.ensemble)?;
    let ens = &base.ensemble;
    let grid = *ens.grid();
    let (m, n, nodes, dt) = (ens.particles(), grid.steps(), grid.nodes(), grid.dt());
    if p.len() != m * nodes {
        return Err(invalid("p must hold M × (N+1) values"));
    }
    let tilde = params.tilde_particles;
    let proj = &base.projectors;
    let sigma = Pairing::new(coeffs, ens, Family::Sigma, tilde);
    let driver = Pairing::new(coeffs, ens, Family::Driver, tilde);
    let terminal = Pairing::new(coeffs, ens, Family::Terminal, tilde);
    let running = Pairing::new(coeffs, ens, Family::RunningCost, tilde);
    let tcost = Pairing::new(coeffs, ens, Family::TerminalCost, tilde);

    let f1 = regress_bins(proj, &starred_raw(&driver, Family::Driver, Slot::X, Some(p), m, n, dt), m, n);
    let l1 = regress_bins(proj, &starred_raw(&running, Family::RunningCost, Slot::X, None, m, n, dt), m, n);
    let phi1 = regress_bins(proj, &starred_raw(&tcost, Family::TerminalCost, Slot::X, None, m, n, dt), m, n);
    let cap1 = regress_bins(proj, &starred_raw(&terminal, Family::Terminal, Slot::X, Some(p), m, n, dt), m, n);

    let mut q = vec![0.0; m * nodes];
    let mut k = vec![0.0; m * n];
    for j in 0..m {
        let (px, cx) = (tcost.partial(Var::X, j, n), terminal.partial(Var::X, j, n));
        q[j * nodes + n] = px - cx * p[j * nodes + n];
    }
    let anticipated = sigma.active(Slot::X);
    let mut acc = vec![0.0; m * n];
    let (mut next, mut kc, mut qhat, mut dbs) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for i in (0..n).rev() {
        for j in 0..m {
            next[j] = q[j * nodes + i + 1];
            dbs[j] = ens.noise().increment(j, i);
        }
        lsmc_step(proj.at(i), &next, &dbs, dt, &mut kc, &mut qhat);
        let s1 = if anticipated {
            sigma.accumulate(i, Slot::X, Some(&kc), dt, &mut acc);
            regress_node(proj, &acc, m, n, i)
        } else {
            vec![0.0; m]
        };
        for j in 0..m {
            let b = j * n + i;
            let pi = p[j * nodes + i];
            let d = sigma.partial(Var::X, j, i) * kc[j] + s1[j] - driver.partial(Var::X, j, i) * pi - f1[b]
                + running.partial(Var::X, j, i)
                + l1[b]
                + phi1[b]
                - cap1[b];
            q[j * nodes + i] = qhat[j] + d * dt;
            k[b] = kc[j];
        }
    }
    check_finite("adjoint q", &q, nodes)?;
    check_finite("adjoint k", &k, n)?;
    Ok((q, k))
}

/// Solves `p`, then `(q, k)`, and caches every starred path.
pub fn solve_adjoint(coeffs: &dyn CoefficientSet, base: &SolvedState, params: &LinearParams) -> Result<AdjointState> {
    let p = solve_adjoint_p(coeffs, base, params)?;
    let (q, k) = solve_adjoint_qk(coeffs, base, &p, params)?;
    let ens = &base.ensemble;
    let (m, n, dt) = (ens.particles(), ens.grid().steps(), ens.grid().dt());
    let proj = &base.projectors;
    let tilde = params.tilde_particles;
    let pairing = |f| Pairing::new(coeffs, ens, f, tilde);
    let (sigma, driver, terminal) = (pairing(Family::Sigma), pairing(Family::Driver), pairing(Family::Terminal));
    let (running, tcost) = (pairing(Family::RunningCost), pairing(Family::TerminalCost));
    let reg = |pr: &Pairing<'_>, f, s, w: Option<&[f64]>| regress_bins(proj, &starred_raw(pr, f, s, w, m, n, dt), m, n);
    let raw_u = |pr: &Pairing<'_>, f, w: Option<&[f64]>| -> Vec<Vec<f64>> {
        (0..coeffs.control_dim())
            .map(|c| starred_raw(pr, f, Slot::U(c), w, m, n, dt))
            .collect()
    };
    let starred = StarredPaths {
        sigma_x: reg(&sigma, Family::Sigma, Slot::X, Some(&k)),
        driver_x: reg(&driver, Family::Driver, Slot::X, Some(&p)),
        driver_y: reg(&driver, Family::Driver, Slot::Y, Some(&p)),
        terminal_x: reg(&terminal, Family::Terminal, Slot::X, Some(&p)),
        running_x: reg(&running, Family::RunningCost, Slot::X, None),
        running_y: reg(&running, Family::RunningCost, Slot::Y, None),
        terminal_cost_x: reg(&tcost, Family::TerminalCost, Slot::X, None),
        terminal_cost_y: reg(&tcost, Family::TerminalCost, Slot::Y, None),
        sigma_u: raw_u(&sigma, Family::Sigma, Some(&k)),
        driver_u: raw_u(&driver, Family::Driver, Some(&p)),
        terminal_u: raw_u(&terminal, Family::Terminal, Some(&p)),
        running_u: raw_u(&running, Family::RunningCost, None),
        terminal_cost_u: raw_u(&tcost, Family::TerminalCost, None),
    };
    let nodes = n + 1;
    let terminal_exact = (0..m).all(|j| {
        let want = tcost.partial(Var::X, j, n) - terminal.partial(Var::X, j, n) * p[j * nodes + n];
        q[j * nodes + n].to_bits() == want.to_bits()
    });
    Ok(AdjointState {
        p,
        q,
        k,
        particles: m,
        steps: n,
        starred,
        sweeps: 1,
        terminal_exact,
    })
}

/// Both sides of the duality identity and `|lhs − rhs| / (1 + |lhs|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// `E[X¹_N q_N + Y¹_N p_N]`
    pub lhs: f64,
    /// `E Σ_i Δt [X¹(Φ*₁ − L_x − L*₁ − φ*₁) − Y¹(L_y + L*₂ + φ*₂) − Z¹ L_z + v·(σ*₂ − f*₃)]`
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluates the duality identity on a base solve, its variational state and its adjoint.
pub fn duality_check(
    coeffs: &dyn CoefficientSet,
    base: &SolvedState,
    var: &VariationalState,
    adj: &AdjointState,
) -> Result<DualityReport> {
    let ens = &base.ensemble;
    let grid = *ens.grid();
    let (m, n, dt) = (ens.particles(), grid.steps(), grid.dt());
    if var.particles() != m || adj.particles() != m || var.steps() != n || adj.steps() != n {
        return Err(invalid("variational and adjoint states must come from the same base solve"));
    }
    let running = Pairing::new(coeffs, ens, Family::RunningCost, 0);
    let st = &adj.starred;
    let mut lhs_terms = vec![0.0; m];
    let mut rhs_terms = vec![0.0; m];
    for j in 0..m {
        lhs_terms[j] = var.x1_at(j, n) * adj.q(j)[n] + var.y1_at(j, n) * adj.p(j)[n];
        let mut acc = 0.0;
        for i in 0..n {
            let b = j * n + i;
            let lx = running.partial(Var::X, j, i);
            let ly = running.partial(Var::Y, j, i);
            let lz = running.partial(Var::Z, j, i);
            acc += (var.x1_at(j, i) * (st.terminal_x[b] - lx - st.running_x[b] - st.terminal_cost_x[b])
                - var.y1_at(j, i) * (ly + st.running_y[b] + st.terminal_cost_y[b])
                - var.z1_at(j, i) * lz)
                * dt;
        }
        rhs_terms[j] = acc;
    }
    let lhs = mean_stderr(&lhs_terms).0;
    let mut rhs = mean_stderr(&rhs_terms).0;
    let v = &var.direction;
    let column_mean = |a: &[f64], i: usize| mean_stderr(&(0..m).map(|j| a[j * n + i]).collect::<Vec<_>>()).0;
    for c in 0..v.dim() {
        for i in 0..n {
            let vi = v.get(i, c);
            if vi != 0.0 {
                rhs += vi * (column_mean(&st.sigma_u[c], i) - column_mean(&st.driver_u[c], i)) * dt;
            }
        }
    }
    Ok(DualityReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / (1.0 + lhs.abs()),
    })
}
