//! Experiment configuration: one TOML file per experiment.
//!
//! ```toml
//! [problem]
//! name = "coupled_sigma"
//! params = { eps = 0.1 }
//!
//! [grid]
//! horizon = 1.0
//! steps = 32
//!
//! [ensemble]
//! particles = 4096
//! seed = 7
//! x0 = 1.0
//!
//! [control]
//! value = [0.5]
//! slope = [1.0]
//! ```
//!
//! Every section except `[problem]` has defaults. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use mfbsde::coefficients::{builtin_problem, CoefficientSet};
use mfbsde::control::{ControlBox, ControlPath};
use mfbsde::grid::{make_time_grid, TimeGrid};
use mfbsde::regression::BasisSpec;
use mfbsde::smp::{OptimizerParams, SufficiencyParams};
use mfbsde::solver::{PicardInit, SolverParams};
use mfbsde::variational::LinearParams;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub linear: LinearConfig,
    #[serde(default)]
    pub control: PathSpec,
    /// Perturbation direction for duality-check and diff-quotient; defaults to `v ≡ 1`.
    #[serde(default = "PathSpec::ones")]
    pub direction: PathSpec,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub gradient_check: GradientCheckConfig,
    #[serde(default)]
    pub diff_quotient: DiffQuotientConfig,
    #[serde(default)]
    pub sufficiency: SufficiencyConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    /// Worker threads for the inner parallel loops; `--workers` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub particles: usize,
    /// TOML integers are signed, so seeds are limited to `[0, 2⁶³)`.
    pub seed: u64,
    pub x0: f64,
    /// `M̃`, the subsample for kernels that depend on the point.
    pub tilde_particles: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            particles: 1024,
            seed: 1,
            x0: 0.0,
            tilde_particles: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub degree: Option<usize>,
    pub running_integral: bool,
    pub running_max: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub init: PicardInit,
}

impl Default for PicardConfig {
    fn default() -> Self {
        let d = SolverParams::default();
        Self {
            damping: d.damping,
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
            init: d.init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        let d = LinearParams::default();
        Self {
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
        }
    }
}

/// A deterministic grid function: either `value + slope·t` per component, or
/// explicit `values` (node-major, `N × dim`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl PathSpec {
    fn ones() -> Self {
        Self {
            value: Some(vec![1.0]),
            ..Self::default()
        }
    }

    pub fn build(&self, grid: &TimeGrid, dim: usize, what: &str) -> Result<ControlPath, HarnessError> {
        let bad = |msg: String| HarnessError::Config(format!("[{what}] {msg}"));
        if let Some(values) = &self.values {
            if self.value.is_some() || self.slope.is_some() {
                return Err(bad("`values` excludes `value` and `slope`".into()));
            }
            return ControlPath::new(dim, grid.steps(), values.clone()).map_err(|e| bad(e.to_string()));
        }
        let component = |v: &Option<Vec<f64>>, name: &str| -> Result<Vec<f64>, HarnessError> {
            match v {
                None => Ok(vec![0.0; dim]),
                Some(v) if v.len() == 1 => Ok(vec![v[0]; dim]),
                Some(v) if v.len() == dim => Ok(v.clone()),
                Some(v) => Err(bad(format!("`{name}` has {} entries, control dimension is {dim}", v.len()))),
            }
        };
        let (a, b) = (component(&self.value, "value")?, component(&self.slope, "slope")?);
        let mut values = Vec::with_capacity(grid.steps() * dim);
        for i in 0..grid.steps() {
            let t = grid.time(i);
            values.extend((0..dim).map(|c| a[c] + b[c] * t));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("values must be finite".into()));
        }
        ControlPath::new(dim, grid.steps(), values).map_err(|e| bad(e.to_string()))
    }
}

/// Control box; omitted bounds are infinite.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

impl BoundsConfig {
    pub fn build(&self, dim: usize) -> Result<ControlBox, HarnessError> {
        let side = |v: &Option<Vec<f64>>, fill: f64, name: &str| match v {
            None => Ok(vec![fill; dim]),
            Some(v) if v.len() == 1 => Ok(vec![v[0]; dim]),
            Some(v) if v.len() == dim => Ok(v.clone()),
            Some(v) => Err(HarnessError::Config(format!(
                "[bounds] `{name}` has {} entries, control dimension is {dim}",
                v.len()
            ))),
        };
        let lower = side(&self.lower, f64::NEG_INFINITY, "lower")?;
        let upper = side(&self.upper, f64::INFINITY, "upper")?;
        ControlBox::new(lower, upper).map_err(|e| HarnessError::Config(format!("[bounds] {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step: f64,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub halve_on_ascent: bool,
    /// Tolerance of the final stationarity verdict.
    pub stationarity_tolerance: f64,
    /// Run the sufficiency probe at the final control.
    pub probe: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = OptimizerParams::default();
        Self {
            step: d.step,
            iterations: d.iterations,
            tolerance: d.tolerance,
            halve_on_ascent: d.halve_on_ascent,
            stationarity_tolerance: 1e-6,
            probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientCheckConfig {
    pub rho: f64,
    /// `ones`, `direction` (the `[direction]` path), `nodes` (every unit bump),
    /// or `node:<i>` / `node:<i>:<c>`.
    pub directions: Vec<String>,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            rho: 1e-3,
            directions: vec!["ones".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffQuotientConfig {
    pub rhos: Vec<f64>,
}

impl Default for DiffQuotientConfig {
    fn default() -> Self {
        Self {
            rhos: vec![1e-1, 1e-2, 1e-3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SufficiencyConfig {
    pub samples: usize,
    pub seed: u64,
    pub band: f64,
}

impl Default for SufficiencyConfig {
    fn default() -> Self {
        let d = SufficiencyParams::default();
        Self {
            samples: d.samples,
            seed: d.seed,
            band: d.band,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub node: Option<usize>,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub particle: usize,
    pub h: f64,
    pub threshold: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            node: None,
            x: 0.3,
            y: 0.2,
            z: 0.1,
            particle: 0,
            h: 1e-5,
            threshold: 1e-4,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field against the solver preconditions.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let coeffs = self.coefficients()?;
        let grid = self.time_grid()?;
        let e = &self.ensemble;
        if e.particles < 2 {
            return Err(HarnessError::Config("ensemble.particles must be at least 2".into()));
        }
        if !e.x0.is_finite() {
            return Err(HarnessError::Config("ensemble.x0 must be finite".into()));
        }
        self.solver_params().validate().map_err(config_error)?;
        self.linear_params().validate().map_err(config_error)?;
        self.optimizer_params().validate().map_err(config_error)?;
        let dim = coeffs.control_dim();
        let u = self.control.build(&grid, dim, "control")?;
        self.direction.build(&grid, dim, "direction")?;
        let bounds = self.bounds.build(dim)?;
        if !bounds.contains(&u) {
            return Err(HarnessError::Config("initial control lies outside [bounds]".into()));
        }
        positive("gradient_check.rho", self.gradient_check.rho)?;
        if self.gradient_check.directions.is_empty() {
            return Err(HarnessError::Config("gradient_check.directions is empty".into()));
        }
        for d in &self.gradient_check.directions {
            parse_direction(d, grid.steps(), dim)?;
        }
        if self.diff_quotient.rhos.is_empty() || self.diff_quotient.rhos.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(HarnessError::Config("diff_quotient.rhos must be non-empty and in (0, 1]".into()));
        }
        if !(self.optimizer.stationarity_tolerance >= 0.0) {
            return Err(HarnessError::Config("optimizer.stationarity_tolerance must be non-negative".into()));
        }
        if !(self.sufficiency.band >= 0.0) {
            return Err(HarnessError::Config("sufficiency.band must be non-negative".into()));
        }
        let v = &self.validate;
        positive("validate.h", v.h)?;
        positive("validate.threshold", v.threshold)?;
        if v.node.is_some_and(|n| n >= grid.steps()) || v.particle >= e.particles {
            return Err(HarnessError::Config("validate.node or validate.particle out of range".into()));
        }
        if self.workers == Some(0) {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Result<Arc<dyn CoefficientSet>, HarnessError> {
        builtin_problem(&self.problem.name, &self.problem.params).map_err(config_error)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, HarnessError> {
        make_time_grid(self.grid.horizon, self.grid.steps).map_err(config_error)
    }

    pub fn solver_params(&self) -> SolverParams {
        let p = &self.picard;
        SolverParams {
            basis: BasisSpec {
                degree: self.basis.degree.unwrap_or(BasisSpec::default().degree),
                running_integral: self.basis.running_integral,
                running_max: self.basis.running_max,
            },
            damping: p.damping,
            tolerance: p.tolerance,
            max_iterations: p.max_iterations,
            init: p.init,
        }
    }

    pub fn linear_params(&self) -> LinearParams {
        LinearParams {
            tilde_particles: self.ensemble.tilde_particles,
            tolerance: self.linear.tolerance,
            max_iterations: self.linear.max_iterations,
        }
    }

    pub fn optimizer_params(&self) -> OptimizerParams {
        let o = &self.optimizer;
        OptimizerParams {
            step: o.step,
            iterations: o.iterations,
            tolerance: o.tolerance,
            halve_on_ascent: o.halve_on_ascent,
        }
    }

    pub fn sufficiency_params(&self) -> SufficiencyParams {
        let s = &self.sufficiency;
        SufficiencyParams {
            samples: s.samples,
            seed: s.seed,
            band: s.band,
        }
    }
}

fn config_error(e: mfbsde::Error) -> HarnessError {
    HarnessError::Config(e.to_string())
}

/// A gradient-check direction.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    Ones,
    Configured,
    Nodes,
    Node(usize, usize),
}

pub fn parse_direction(s: &str, steps: usize, dim: usize) -> Result<Direction, HarnessError> {
    let bad = || HarnessError::Config(format!("unknown gradient-check direction `{s}`"));
    match s {
        "ones" => return Ok(Direction::Ones),
        "direction" => return Ok(Direction::Configured),
        "nodes" => return Ok(Direction::Nodes),
        _ => {}
    }
    let rest = s.strip_prefix("node:").ok_or_else(bad)?;
    let mut parts = rest.split(':');
    let i: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    let c: usize = match parts.next() {
        None => 0,
        Some(p) => p.parse().map_err(|_| bad())?,
    };
    if parts.next().is_some() || i >= steps || c >= dim {
        return Err(bad());
    }
    Ok(Direction::Node(i, c))
}
