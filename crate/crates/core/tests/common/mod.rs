#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use mfbsde::coefficients::{CoefficientSet, Family, LawStats, Node, Point, Slot, Var};
use mfbsde::control::{ControlPath, ControlPolicy};
use mfbsde::grid::{make_time_grid, TimeGrid};
use mfbsde::law::{LawHandle, PathView};
use mfbsde::noise::{simulate_noise, NoiseEnsemble};

pub type Scalar = Arc<dyn Fn(&Point, &[f64]) -> f64 + Send + Sync>;
pub type StatsFn = Arc<dyn for<'a> Fn(Node, &LawHandle<'a>) -> LawStats + Send + Sync>;
pub type KernelFn = Arc<dyn for<'a> Fn(&Point, &[f64], &PathView<'a>, &mut [f64]) + Send + Sync>;

/// Coefficient set assembled from closures; anything not set is zero.
#[derive(Clone, Default)]
pub struct Toy {
    values: HashMap<Family, Scalar>,
    partials: HashMap<(Family, Var), Scalar>,
    stats: HashMap<Family, StatsFn>,
    kernels: HashMap<(Family, Slot), KernelFn>,
    point_free: bool,
}

impl Toy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(mut self, f: Family, v: impl Fn(&Point, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.values.insert(f, Arc::new(v));
        self
    }

    pub fn constant(self, f: Family, c: f64) -> Self {
        self.value(f, move |_, _| c)
    }

    pub fn partial(
        mut self,
        f: Family,
        var: Var,
        v: impl Fn(&Point, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.partials.insert((f, var), Arc::new(v));
        self
    }

    pub fn stats(
        mut self,
        f: Family,
        s: impl for<'a> Fn(Node, &LawHandle<'a>) -> LawStats + Send + Sync + 'static,
    ) -> Self {
        self.stats.insert(f, Arc::new(s));
        self
    }

    pub fn kernel(
        mut self,
        f: Family,
        slot: Slot,
        k: impl for<'a> Fn(&Point, &[f64], &PathView<'a>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.kernels.insert((f, slot), Arc::new(k));
        self
    }

    pub fn point_free(mut self) -> Self {
        self.point_free = true;
        self
    }
}

impl CoefficientSet for Toy {
    fn name(&self) -> &str {
        "toy"
    }

    fn law_stats(&self, family: Family, node: Node, law: &LawHandle<'_>) -> LawStats {
        self.stats.get(&family).map_or_else(Vec::new, |s| s(node, law))
    }

    fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
        self.values.get(&family).map_or(0.0, |v| v(at, stats))
    }

    fn partial(&self, family: Family, var: Var, at: &Point, stats: &[f64]) -> f64 {
        self.partials.get(&(family, var)).map_or(0.0, |v| v(at, stats))
    }

    fn has_kernel(&self, family: Family, slot: Slot) -> bool {
        self.kernels.contains_key(&(family, slot))
    }

    fn kernel(&self, family: Family, slot: Slot, at: &Point, stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
        match self.kernels.get(&(family, slot)) {
            Some(k) => k(at, stats, path, out),
            None => out.fill(0.0),
        }
    }

    fn kernel_point_free(&self, _family: Family) -> bool {
        self.point_free
    }

    fn dynamics_law_dependent(&self) -> bool {
        [Family::Sigma, Family::Driver, Family::Terminal]
            .iter()
            .any(|f| self.stats.contains_key(f))
    }

    fn bounded(&self) -> bool {
        true
    }
}

pub fn setup(t: f64, n: usize, m: usize, seed: u64) -> (TimeGrid, Arc<NoiseEnsemble>) {
    let g = make_time_grid(t, n).unwrap();
    let noise = Arc::new(simulate_noise(&g, m, seed).unwrap());
    (g, noise)
}

pub fn zero_control(g: &TimeGrid) -> ControlPolicy {
    ControlPolicy::OpenLoop(ControlPath::zeros(g, 1))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}
