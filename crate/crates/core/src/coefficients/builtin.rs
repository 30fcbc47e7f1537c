use std::collections::BTreeMap;
use std::sync::Arc;

use super::{CoefficientSet, Family, LawStats, Node, Point, Slot, Var};
use crate::error::{invalid, Result};
use crate::law::{LawHandle, PathView};

/// Names accepted by [`builtin_problem`].
pub fn builtin_names() -> &'static [&'static str] {
    &[
        "quadratic_control",
        "tracking_control",
        "coupled_sigma",
        "example_i",
        "example_ii",
    ]
}

/// Builds a built-in coefficient set from a name and a parameter table.
///
/// Missing parameters take their defaults; unknown parameters are rejected.
pub fn builtin_problem(name: &str, params: &BTreeMap<String, f64>) -> Result<Arc<dyn CoefficientSet>> {
    let mut p = Params::new(params);
    let out: Arc<dyn CoefficientSet> = match name {
        "quadratic_control" => Arc::new(QuadraticControl {
            dim: p.count("dim", 1)?,
        }),
        "tracking_control" => Arc::new(TrackingControl {
            c: p.get("c", 1.0),
            dim: p.count("dim", 1)?,
        }),
        "coupled_sigma" => Arc::new(CoupledSigma {
            eps: p.get("eps", 0.1),
            kappa: p.get("kappa", 0.1),
            a: p.get("a", 0.1),
            gamma: p.get("gamma", 1.0),
            ell: p.get("ell", 1.0),
        }),
        "example_i" => Arc::new(ExampleI {
            sigma0: p.get("sigma0", 1.0),
            sigma1: p.get("sigma1", 0.2),
            sigma2: p.get("sigma2", 0.5),
            hx: p.get("hx", 0.5),
            hu: p.get("hu", 0.5),
            companion: Companion::from_params(&mut p),
        }),
        "example_ii" => Arc::new(ExampleII {
            sigma0: p.get("sigma0", 1.0),
            sigma1: p.get("sigma1", 0.2),
            sigma2: p.get("sigma2", 0.5),
            gx: p.get("gx", 0.5),
            gu: p.get("gu", 0.5),
            x_lag: p.count("x_lag", 0)?,
            u_lag: p.count("u_lag", 0)?,
            companion: Companion::from_params(&mut p),
        }),
        other => {
            return Err(invalid(format!(
                "unknown problem `{other}` (expected one of {})",
                builtin_names().join(", ")
            )))
        }
    };
    p.finish(name)?;
    Ok(out)
}

struct Params<'a> {
    table: &'a BTreeMap<String, f64>,
    used: Vec<&'static str>,
}

impl<'a> Params<'a> {
    fn new(table: &'a BTreeMap<String, f64>) -> Self {
        Self {
            table,
            used: Vec::new(),
        }
    }

    fn get(&mut self, key: &'static str, default: f64) -> f64 {
        self.used.push(key);
        self.table.get(key).copied().unwrap_or(default)
    }

    fn count(&mut self, key: &'static str, default: usize) -> Result<usize> {
        let v = self.get(key, default as f64);
        if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
            return Err(invalid(format!("parameter `{key}` must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    fn finish(self, name: &str) -> Result<()> {
        for key in self.table.keys() {
            if !self.used.contains(&key.as_str()) {
                return Err(invalid(format!("unknown parameter `{key}` for problem `{name}`")));
            }
            if !self.table[key].is_finite() {
                return Err(invalid(format!("parameter `{key}` must be finite")));
            }
        }
        Ok(())
    }
}

fn sech2(m: f64) -> f64 {
    let c = m.cosh();
    1.0 / (c * c)
}

/// `Ẽ[Σ_s |ũ_s|² Δt]`.
fn mean_control_energy(law: &LawHandle<'_>, dim: usize) -> f64 {
    law.mean(|p| {
        (0..p.steps())
            .map(|s| (0..dim).map(|c| p.u(s, c).powi(2)).sum::<f64>())
            .sum::<f64>()
            * p.dt()
    })
}

/// `σ ≡ 1`, `f ≡ 0`, `Φ(x) = x`, `L ≡ 0`, `φ = Ẽ[∫|ũ_r|² dr]`.
///
/// The cost is the control energy, so the adjoint gradient is exactly `2u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticControl {
    pub dim: usize,
}

impl CoefficientSet for QuadraticControl {
    fn name(&self) -> &str {
        "quadratic_control"
    }

    fn control_dim(&self) -> usize {
        self.dim
    }

    fn law_stats(&self, family: Family, _node: Node, law: &LawHandle<'_>) -> LawStats {
        match family {
            Family::TerminalCost => vec![mean_control_energy(law, self.dim)],
            _ => Vec::new(),
        }
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        match family {
            Family::Sigma => 1.0,
            Family::Driver | Family::RunningCost => 0.0,
            Family::Terminal => at.x,
            Family::TerminalCost => stats[0],
        }
    }

    fn partial(&self, family: Family, var: Var, _at: &Point, _stats: &[f64]) -> f64 {
        match (family, var) {
            (Family::Terminal, Var::X) => 1.0,
            _ => 0.0,
        }
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        family == Family::TerminalCost && matches!(slot, Slot::U(_))
    }

    fn kernel(&self, family: Family, slot: Slot, _at: &Point, _stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
        match (family, slot) {
            (Family::TerminalCost, Slot::U(c)) => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = 2.0 * path.u(s, c);
                }
            }
            _ => out.fill(0.0),
        }
    }

    fn kernel_point_free(&self, _family: Family) -> bool {
        true
    }

    fn dynamics_law_dependent(&self) -> bool {
        false
    }

    fn bounded(&self) -> bool {
        false
    }

    fn convex_hamiltonian(&self) -> bool {
        true
    }
}

/// Like [`QuadraticControl`] with cost `φ = Ẽ[∫|ũ_r − c·r|² dr]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingControl {
    pub c: f64,
    pub dim: usize,
}

impl CoefficientSet for TrackingControl {
    fn name(&self) -> &str {
        "tracking_control"
    }

    fn control_dim(&self) -> usize {
        self.dim
    }

    fn law_stats(&self, family: Family, _node: Node, law: &LawHandle<'_>) -> LawStats {
        match family {
            Family::TerminalCost => vec![law.mean(|p| {
                (0..p.steps())
                    .map(|s| {
                        let target = self.c * p.time(s);
                        (0..self.dim).map(|c| (p.u(s, c) - target).powi(2)).sum::<f64>()
                    })
                    .sum::<f64>()
                    * p.dt()
            })],
            _ => Vec::new(),
        }
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        QuadraticControl { dim: self.dim }.value(family, at, stats)
    }

    fn partial(&self, family: Family, var: Var, at: &Point, stats: &[f64]) -> f64 {
        QuadraticControl { dim: self.dim }.partial(family, var, at, stats)
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        family == Family::TerminalCost && matches!(slot, Slot::U(_))
    }

    fn kernel(&self, family: Family, slot: Slot, _at: &Point, _stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
        match (family, slot) {
            (Family::TerminalCost, Slot::U(c)) => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = 2.0 * (path.u(s, c) - self.c * path.time(s));
                }
            }
            _ => out.fill(0.0),
        }
    }

    fn kernel_point_free(&self, _family: Family) -> bool {
        true
    }

    fn dynamics_law_dependent(&self) -> bool {
        false
    }

    fn bounded(&self) -> bool {
        false
    }

    fn convex_hamiltonian(&self) -> bool {
        true
    }
}

/// Law-coupled test family:
///
/// - `σ(t, ν) = 1 + ε·Ẽ[∫_0^t ũ_s ds] + κ·Ẽ[∫_0^t X̃_s ds]`
/// - `f(t, μ) = a·Ẽ[(1/T)∫_0^T Ỹ_{s∨t} ds]`
/// - `Φ(x) = x`, `L(y) = ½ℓy²`, `φ(x, μ) = ½x² + ½γ·Ẽ[∫ũ_s² ds]`
///
/// With `κ = a = 0` only the control law enters σ and Picard is decoupled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledSigma {
    pub eps: f64,
    pub kappa: f64,
    pub a: f64,
    pub gamma: f64,
    pub ell: f64,
}

impl CoefficientSet for CoupledSigma {
    fn name(&self) -> &str {
        "coupled_sigma"
    }

    fn law_stats(&self, family: Family, node: Node, law: &LawHandle<'_>) -> LawStats {
        match family {
            Family::Sigma => {
                let i = node.i;
                vec![
                    law.mean(|p| p.integral_u(i, 0)),
                    law.mean(|p| p.integral_x(i)),
                ]
            }
            Family::Driver => vec![law.mean(|p| {
                let n = p.steps();
                (0..n).map(|s| p.y(s)).sum::<f64>() / n as f64
            })],
            Family::TerminalCost => vec![mean_control_energy(law, 1)],
            _ => Vec::new(),
        }
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        match family {
            Family::Sigma => 1.0 + self.eps * stats[0] + self.kappa * stats[1],
            Family::Driver => self.a * stats[0],
            Family::Terminal => at.x,
            Family::RunningCost => 0.5 * self.ell * at.y * at.y,
            Family::TerminalCost => 0.5 * at.x * at.x + 0.5 * self.gamma * stats[0],
        }
    }

    fn partial(&self, family: Family, var: Var, at: &Point, _stats: &[f64]) -> f64 {
        match (family, var) {
            (Family::Terminal, Var::X) => 1.0,
            (Family::RunningCost, Var::Y) => self.ell * at.y,
            (Family::TerminalCost, Var::X) => at.x,
            _ => 0.0,
        }
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        match (family, slot) {
            (Family::Sigma, Slot::X) => self.kappa != 0.0,
            (Family::Sigma, Slot::U(0)) => self.eps != 0.0,
            (Family::Driver, Slot::Y) => self.a != 0.0,
            (Family::TerminalCost, Slot::U(0)) => self.gamma != 0.0,
            _ => false,
        }
    }

    fn kernel(&self, family: Family, slot: Slot, at: &Point, _stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
        let i = at.node.i;
        match (family, slot) {
            (Family::Sigma, Slot::X) => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = if s < i { self.kappa } else { 0.0 };
                }
            }
            (Family::Sigma, Slot::U(0)) => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = if s < i { self.eps } else { 0.0 };
                }
            }
            (Family::Driver, Slot::Y) => {
                let horizon = path.steps() as f64 * path.dt();
                out.fill(self.a / horizon);
            }
            (Family::TerminalCost, Slot::U(0)) => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = self.gamma * path.u(s, 0);
                }
            }
            _ => out.fill(0.0),
        }
    }

    fn kernel_point_free(&self, _family: Family) -> bool {
        true
    }

    fn dynamics_law_dependent(&self) -> bool {
        self.eps != 0.0 || self.kappa != 0.0 || self.a != 0.0
    }

    fn bounded(&self) -> bool {
        false
    }
}

/// Backward driver and costs shared by the two example families:
/// `f = −a·y + b·z`, `Φ = x + θ·Ẽ[∫X̃_s ds]`, `L = ½ℓ(y² + z²)`,
/// `φ = ½x² + ½γ·Ẽ[∫ũ_s² ds]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Companion {
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub ell: f64,
    pub gamma: f64,
}

impl Companion {
    fn from_params(p: &mut Params<'_>) -> Self {
        Self {
            a: p.get("a", 0.2),
            b: p.get("b", 0.1),
            theta: p.get("theta", 0.2),
            ell: p.get("ell", 1.0),
            gamma: p.get("gamma", 1.0),
        }
    }

    fn law_stats(&self, family: Family, law: &LawHandle<'_>) -> LawStats {
        match family {
            Family::Terminal => vec![law.mean(|p| p.integral_x(p.steps()))],
            Family::TerminalCost => vec![mean_control_energy(law, 1)],
            _ => Vec::new(),
        }
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        match family {
            Family::Driver => -self.a * at.y + self.b * at.z,
            Family::Terminal => at.x + self.theta * stats[0],
            Family::RunningCost => 0.5 * self.ell * (at.y * at.y + at.z * at.z),
            Family::TerminalCost => 0.5 * at.x * at.x + 0.5 * self.gamma * stats[0],
            Family::Sigma => unreachable!("σ is family-specific"),
        }
    }

    fn partial(&self, family: Family, var: Var, at: &Point) -> f64 {
        match (family, var) {
            (Family::Driver, Var::Y) => -self.a,
            (Family::Driver, Var::Z) => self.b,
            (Family::Terminal, Var::X) => 1.0,
            (Family::RunningCost, Var::Y) => self.ell * at.y,
            (Family::RunningCost, Var::Z) => self.ell * at.z,
            (Family::TerminalCost, Var::X) => at.x,
            _ => 0.0,
        }
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        match (family, slot) {
            (Family::Terminal, Slot::X) => self.theta != 0.0,
            (Family::TerminalCost, Slot::U(0)) => self.gamma != 0.0,
            _ => false,
        }
    }

    fn kernel(&self, family: Family, slot: Slot, path: &PathView<'_>, out: &mut [f64]) {
        match (family, slot) {
            (Family::Terminal, Slot::X) => out.fill(self.theta),
            (Family::TerminalCost, Slot::U(0)) => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = self.gamma * path.u(s, 0);
                }
            }
            _ => out.fill(0.0),
        }
    }
}

/// `σ(t, x, ν) = σ₀ + σ₁·sin x + σ₂·tanh(Ẽ[∫_0^T h(X̃_{s∧t}, ũ_s) ds])`
/// with `h(x, u) = h_x·sin x + h_u·u`, plus the [`Companion`] coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleI {
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub hx: f64,
    pub hu: f64,
    pub companion: Companion,
}

impl CoefficientSet for ExampleI {
    fn name(&self) -> &str {
        "example_i"
    }

    fn law_stats(&self, family: Family, _node: Node, law: &LawHandle<'_>) -> LawStats {
        match family {
            Family::Sigma => vec![law.mean(|p| {
                (0..p.steps())
                    .map(|s| self.hx * p.x(s).sin() + self.hu * p.u(s, 0))
                    .sum::<f64>()
                    * p.dt()
            })],
            _ => self.companion.law_stats(family, law),
        }
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        match family {
            Family::Sigma => self.sigma0 + self.sigma1 * at.x.sin() + self.sigma2 * stats[0].tanh(),
            _ => self.companion.value(family, at, stats),
        }
    }

    fn partial(&self, family: Family, var: Var, at: &Point, _stats: &[f64]) -> f64 {
        match (family, var) {
            (Family::Sigma, Var::X) => self.sigma1 * at.x.cos(),
            (Family::Sigma, _) => 0.0,
            _ => self.companion.partial(family, var, at),
        }
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        match (family, slot) {
            (Family::Sigma, Slot::X) => self.sigma2 != 0.0 && self.hx != 0.0,
            (Family::Sigma, Slot::U(0)) => self.sigma2 != 0.0 && self.hu != 0.0,
            (Family::Sigma, _) => false,
            _ => self.companion.has_kernel(family, slot),
        }
    }

    fn kernel(&self, family: Family, slot: Slot, _at: &Point, stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
        match (family, slot) {
            (Family::Sigma, Slot::X) => {
                let w = self.sigma2 * sech2(stats[0]) * self.hx;
                for (s, o) in out.iter_mut().enumerate() {
                    *o = w * path.x(s).cos();
                }
            }
            (Family::Sigma, Slot::U(0)) => out.fill(self.sigma2 * sech2(stats[0]) * self.hu),
            (Family::Sigma, _) => out.fill(0.0),
            _ => self.companion.kernel(family, slot, path, out),
        }
    }

    fn kernel_point_free(&self, _family: Family) -> bool {
        true
    }

    fn dynamics_law_dependent(&self) -> bool {
        (self.sigma2 != 0.0 && (self.hx != 0.0 || self.hu != 0.0)) || self.companion.theta != 0.0
    }

    fn bounded(&self) -> bool {
        false
    }
}

/// `σ(t, x, ν) = σ₀ + σ₁·sin x + σ₂·tanh(Ẽ[g(X̃_{φ(t)}, ũ_{ψ(t)})])` with
/// `g(x, u) = g_x·x + g_u·u` and node delays `φ(t_i) = t_{i−x_lag}`,
/// `ψ(t_i) = t_{i−u_lag}` (clamped at 0), plus the [`Companion`] coefficients.
///
/// Point evaluations are Dirac kernels, represented as `1/Δt` at a single node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleII {
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub gx: f64,
    pub gu: f64,
    pub x_lag: usize,
    pub u_lag: usize,
    pub companion: Companion,
}

impl CoefficientSet for ExampleII {
    fn name(&self) -> &str {
        "example_ii"
    }

    fn law_stats(&self, family: Family, node: Node, law: &LawHandle<'_>) -> LawStats {
        match family {
            Family::Sigma => {
                let (sx, su) = (node.i.saturating_sub(self.x_lag), node.i.saturating_sub(self.u_lag));
                vec![law.mean(|p| self.gx * p.x(sx) + self.gu * p.u(su, 0))]
            }
            _ => self.companion.law_stats(family, law),
        }
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        match family {
            Family::Sigma => self.sigma0 + self.sigma1 * at.x.sin() + self.sigma2 * stats[0].tanh(),
            _ => self.companion.value(family, at, stats),
        }
    }

    fn partial(&self, family: Family, var: Var, at: &Point, _stats: &[f64]) -> f64 {
        match (family, var) {
            (Family::Sigma, Var::X) => self.sigma1 * at.x.cos(),
            (Family::Sigma, _) => 0.0,
            _ => self.companion.partial(family, var, at),
        }
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        match (family, slot) {
            (Family::Sigma, Slot::X) => self.sigma2 != 0.0 && self.gx != 0.0,
            (Family::Sigma, Slot::U(0)) => self.sigma2 != 0.0 && self.gu != 0.0,
            (Family::Sigma, _) => false,
            _ => self.companion.has_kernel(family, slot),
        }
    }

    fn kernel(&self, family: Family, slot: Slot, at: &Point, stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
        let i = at.node.i;
        match (family, slot) {
            (Family::Sigma, Slot::X) => {
                out.fill(0.0);
                out[i.saturating_sub(self.x_lag)] = self.sigma2 * sech2(stats[0]) * self.gx / path.dt();
            }
            (Family::Sigma, Slot::U(0)) => {
                out.fill(0.0);
                out[i.saturating_sub(self.u_lag)] = self.sigma2 * sech2(stats[0]) * self.gu / path.dt();
            }
            (Family::Sigma, _) => out.fill(0.0),
            _ => self.companion.kernel(family, slot, path, out),
        }
    }

    fn kernel_point_free(&self, _family: Family) -> bool {
        true
    }

    fn dynamics_law_dependent(&self) -> bool {
        (self.sigma2 != 0.0 && (self.gx != 0.0 || self.gu != 0.0)) || self.companion.theta != 0.0
    }

    fn bounded(&self) -> bool {
        false
    }
}
