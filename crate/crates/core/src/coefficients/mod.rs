//! Coefficient bundles `(σ, f, Φ, L, φ)` with classical partials and
//! measure-derivative kernels.
//!
//! A kernel is a density in the path-time argument: for a coefficient `c`
//! depending on a law `μ` of paths, the directional derivative along a
//! perturbation `ξ` of one law sample is `Ẽ[Σ_s κ(s) ξ̃(s) Δt]`, where
//! `κ = kernel(slot, point, stats, path)` is evaluated on the tilde sample
//! path and `ξ̃` is read through the same truncation as the law itself.

mod builtin;
mod validate;

pub use builtin::{
    builtin_names, builtin_problem, CoupledSigma, ExampleI, ExampleII, QuadraticControl,
    TrackingControl,
};
pub use validate::{partial_report, validate_partials, PartialCheck, ProbePoint, ValidationReport};

use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::law::{Components, Cut, EmpiricalPathLaw, LawHandle, PathView};

/// The five coefficients of the controlled system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Diffusion `σ(t, x, P_{(X_{·∧t}, u)})`.
    Sigma,
    /// Backward driver `f(t, x, y, z, P_{(X, Y_{·∨t}, u)})`.
    Driver,
    /// Terminal condition `Φ(x, P_{(X, u)})`.
    Terminal,
    /// Running cost `L(t, x, y, z, P_{(X, Y, u)})`.
    RunningCost,
    /// Terminal cost `φ(x, P_{(X, Y, u)})`.
    TerminalCost,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Sigma,
        Family::Driver,
        Family::Terminal,
        Family::RunningCost,
        Family::TerminalCost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sigma => "sigma",
            Family::Driver => "f",
            Family::Terminal => "Phi",
            Family::RunningCost => "L",
            Family::TerminalCost => "phi",
        }
    }

    /// The law a coefficient of this family sees at node `i`.
    pub fn law_view(self, ens: &ParticleEnsemble, i: usize) -> LawHandle<'_> {
        let (components, cut) = self.convention(i);
        EmpiricalPathLaw::new(ens, components, cut)
    }

    pub fn convention(self, i: usize) -> (Components, Cut) {
        match self {
            Family::Sigma => (Components::XU, Cut::Wedge(i)),
            Family::Driver => (Components::XYU, Cut::Vee(i)),
            Family::Terminal => (Components::XU, Cut::Full),
            Family::RunningCost | Family::TerminalCost => (Components::XYU, Cut::Full),
        }
    }

    /// Pointwise arguments the family depends on.
    pub fn vars(self) -> &'static [Var] {
        match self {
            Family::Sigma | Family::Terminal | Family::TerminalCost => &[Var::X],
            Family::Driver | Family::RunningCost => &[Var::X, Var::Y, Var::Z],
        }
    }

    /// Kernel slots: `X` and `U(c)` for every family, plus `Y` where the law has a Y component.
    pub fn slots(self, control_dim: usize) -> Vec<Slot> {
        let mut out = vec![Slot::X];
        if matches!(self, Family::Driver | Family::RunningCost | Family::TerminalCost) {
            out.push(Slot::Y);
        }
        out.extend((0..control_dim).map(Slot::U));
        out
    }
}

/// Pointwise argument of a classical partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    X,
    Y,
    Z,
}

/// Component of a law sample a measure kernel pairs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    X,
    Y,
    U(usize),
}

impl Slot {
    pub fn label(self) -> String {
        match self {
            Slot::X => "x".into(),
            Slot::Y => "y".into(),
            Slot::U(c) => format!("u{c}"),
        }
    }
}

/// Grid node index and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub i: usize,
    pub t: f64,
}

/// Pointwise arguments `(t, x, y, z)`; unused entries are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub node: Node,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub fn new(node: Node, x: f64, y: f64, z: f64) -> Self {
        Self { node, x, y, z }
    }

    pub fn at_x(node: Node, x: f64) -> Self {
        Self::new(node, x, 0.0, 0.0)
    }

    pub fn get(&self, var: Var) -> f64 {
        match var {
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
        }
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        match var {
            Var::X => self.x = value,
            Var::Y => self.y = value,
            Var::Z => self.z = value,
        }
        self
    }
}

/// Law summaries a coefficient extracts once per node and reuses for every particle.
pub type LawStats = Vec<f64>;

/// A coefficient bundle.
///
/// Evaluators must be pure. Law access goes through [`law_stats`](Self::law_stats):
/// the engine calls it once per family and node with the view given by
/// [`Family::law_view`], and hands the result to every pointwise and kernel call.
pub trait CoefficientSet: Send + Sync {
    fn name(&self) -> &str;

    fn control_dim(&self) -> usize {
        1
    }

    fn law_stats(&self, _family: Family, _node: Node, _law: &LawHandle<'_>) -> LawStats {
        LawStats::new()
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64;

    fn partial(&self, family: Family, var: Var, at: &Point, stats: &[f64]) -> f64;

    /// Whether `kernel(family, slot, ..)` can be nonzero. Zero kernels are skipped.
    fn has_kernel(&self, _family: Family, _slot: Slot) -> bool {
        false
    }

    /// Writes `κ(s)` for `s < N` into `out`.
    fn kernel(
        &self,
        _family: Family,
        _slot: Slot,
        _at: &Point,
        _stats: &[f64],
        _path: &PathView<'_>,
        out: &mut [f64],
    ) {
        out.fill(0.0);
    }

    /// Declares that the family's kernels ignore the pointwise arguments `(x, y, z)`.
    /// Double particle averages then factorize and are computed exactly over all `M`.
    fn kernel_point_free(&self, _family: Family) -> bool {
        false
    }

    /// Whether σ, f or Φ depend on the law (otherwise Picard is decoupled).
    fn dynamics_law_dependent(&self) -> bool {
        true
    }

    /// Whether the coefficients are bounded as the theory assumes.
    fn bounded(&self) -> bool {
        true
    }

    /// User-asserted convexity of the Hamiltonian, enabling the sufficiency probe.
    fn convex_hamiltonian(&self) -> bool {
        false
    }

    fn any_kernel(&self, family: Family) -> bool {
        family
            .slots(self.control_dim())
            .into_iter()
            .any(|s| self.has_kernel(family, s))
    }
}

impl<T: CoefficientSet + ?Sized> CoefficientSet for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn law_stats(&self, family: Family, node: Node, law: &LawHandle<'_>) -> LawStats {
        (**self).law_stats(family, node, law)
    }
    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        (**self).value(family, at, stats)
    }
    fn partial(&self, family: Family, var: Var, at: &Point, stats: &[f64]) -> f64 {
        (**self).partial(family, var, at, stats)
    }
    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        (**self).has_kernel(family, slot)
    }
    fn kernel(
        &self,
        family: Family,
        slot: Slot,
        at: &Point,
        stats: &[f64],
        path: &PathView<'_>,
        out: &mut [f64],
    ) {
        (**self).kernel(family, slot, at, stats, path, out)
    }
    fn kernel_point_free(&self, family: Family) -> bool {
        (**self).kernel_point_free(family)
    }
    fn dynamics_law_dependent(&self) -> bool {
        (**self).dynamics_law_dependent()
    }
    fn bounded(&self) -> bool {
        (**self).bounded()
    }
    fn convex_hamiltonian(&self) -> bool {
        (**self).convex_hamiltonian()
    }
}

/// Node of the perturbation that kernel entry `s` multiplies: the law sample
/// is read through the same truncation as the law itself.
pub(crate) fn read_node(cut: Cut, slot: Slot, s: usize) -> usize {
    match (cut, slot) {
        (Cut::Wedge(t), Slot::X) => s.min(t),
        (Cut::Vee(t), Slot::Y) => s.max(t),
        _ => s,
    }
}

/// Law statistics of a running family (σ, f, L) at every step node `i < N`.
pub(crate) fn node_stats(
    coeffs: &dyn CoefficientSet,
    family: Family,
    ens: &ParticleEnsemble,
) -> Vec<LawStats> {
    let grid = ens.grid();
    (0..grid.steps())
        .map(|i| {
            let node = Node { i, t: grid.time(i) };
            coeffs.law_stats(family, node, &family.law_view(ens, i))
        })
        .collect()
}

/// Law statistics of a terminal family (Φ, φ).
pub(crate) fn terminal_stats(
    coeffs: &dyn CoefficientSet,
    family: Family,
    ens: &ParticleEnsemble,
) -> LawStats {
    let grid = ens.grid();
    let n = grid.steps();
    let node = Node { i: n, t: grid.time(n) };
    coeffs.law_stats(family, node, &family.law_view(ens, n))
}
