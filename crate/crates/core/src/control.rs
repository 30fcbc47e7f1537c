use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;

/// Deterministic control on the grid: one value per step and component,
/// held constant on `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    dim: usize,
    steps: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn new(dim: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("control dimension must be at least 1"));
        }
        if values.len() != dim * steps {
            return Err(invalid(format!(
                "control has {} values, expected {} steps x {} components",
                values.len(),
                steps,
                dim
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("control value {v} is not finite")));
        }
        Ok(Self { dim, steps, values })
    }

    pub fn constant(grid: &TimeGrid, value: &[f64]) -> Self {
        let values = (0..grid.steps()).flat_map(|_| value.iter().copied()).collect();
        Self {
            dim: value.len(),
            steps: grid.steps(),
            values,
        }
    }

    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self::constant(grid, &vec![0.0; dim])
    }

    /// Scalar control sampled from `f(t_i)` at the left node of each step.
    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.steps()).map(|i| f(grid.time(i))).collect();
        Self {
            dim: 1,
            steps: grid.steps(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.dim + c]
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dim: self.dim,
            steps: self.steps,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &ControlPath) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            dim: self.dim,
            steps: self.steps,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| u + a * v)
                .collect(),
        })
    }

    pub fn sup_distance(&self, other: &ControlPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn check_same_shape(&self, other: &ControlPath) -> Result<()> {
        if self.dim != other.dim || self.steps != other.steps {
            return Err(invalid(format!(
                "control shapes differ: {}x{} vs {}x{}",
                self.steps, self.dim, other.steps, other.dim
            )));
        }
        Ok(())
    }

    pub(crate) fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.steps != grid.steps() {
            return Err(invalid(format!(
                "control has {} steps but the grid has {}",
                self.steps,
                grid.steps()
            )));
        }
        Ok(())
    }
}

/// Per-component box `U = [lo_1, hi_1] x ... x [lo_k, hi_k]`; infinite
/// bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(invalid("box bounds must be non-empty and of equal length"));
        }
        for (c, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(invalid(format!(
                    "box component {c}: lower bound {lo} exceeds upper bound {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    /// The whole of `R^k`.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self, c: usize) -> f64 {
        self.lower[c]
    }

    pub fn upper(&self, c: usize) -> f64 {
        self.upper[c]
    }

    #[inline]
    pub fn clamp(&self, c: usize, v: f64) -> f64 {
        v.max(self.lower[c]).min(self.upper[c])
    }

    pub fn contains(&self, u: &ControlPath) -> bool {
        u.dim() == self.dim()
            && (0..u.steps()).all(|i| {
                (0..self.dim()).all(|c| {
                    let v = u.get(i, c);
                    v >= self.lower[c] && v <= self.upper[c]
                })
            })
    }
}

/// Componentwise projection onto the box.
pub fn project_control(u: &ControlPath, bounds: &ControlBox) -> Result<ControlPath> {
    if u.dim() != bounds.dim() {
        return Err(invalid(format!(
            "control dimension {} does not match box dimension {}",
            u.dim(),
            bounds.dim()
        )));
    }
    let k = u.dim();
    let values = u
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &v)| bounds.clamp(idx % k, v))
        .collect();
    ControlPath::new(k, u.steps(), values)
}

/// Feedback law `(t, x) -> u` used for simulation only.
pub trait FeedbackRule: Send + Sync {
    fn dim(&self) -> usize;
    fn control(&self, t: f64, x: f64, out: &mut [f64]);
}

impl<F> FeedbackRule for (usize, F)
where
    F: Fn(f64, f64, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn control(&self, t: f64, x: f64, out: &mut [f64]) {
        (self.1)(t, x, out)
    }
}

/// How the control is produced during a forward solve.
#[derive(Clone)]
pub enum ControlPolicy {
    OpenLoop(ControlPath),
    /// Feedback values are clamped into the box before use.
    Feedback {
        rule: Arc<dyn FeedbackRule>,
        bounds: ControlBox,
    },
}

impl ControlPolicy {
    pub fn dim(&self) -> usize {
        match self {
            ControlPolicy::OpenLoop(u) => u.dim(),
            ControlPolicy::Feedback { rule, .. } => rule.dim(),
        }
    }

    pub fn open_loop(&self) -> Option<&ControlPath> {
        match self {
            ControlPolicy::OpenLoop(u) => Some(u),
            ControlPolicy::Feedback { .. } => None,
        }
    }
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::OpenLoop(u) => f.debug_tuple("OpenLoop").field(u).finish(),
            ControlPolicy::Feedback { bounds, .. } => f
                .debug_struct("Feedback")
                .field("bounds", bounds)
                .finish_non_exhaustive(),
        }
    }
}

impl From<ControlPath> for ControlPolicy {
    fn from(u: ControlPath) -> Self {
        ControlPolicy::OpenLoop(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_time_grid;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        make_time_grid(1.0, 4).unwrap()
    }

    #[test]
    fn clamps_above_box() {
        let u = ControlPath::constant(&grid(), &[1.5]);
        let b = ControlBox::interval(0.0, 1.0).unwrap();
        let p = project_control(&u, &b).unwrap();
        assert!(p.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inside_box_unchanged() {
        let u = ControlPath::from_fn(&grid(), |t| 0.2 + 0.5 * t);
        let b = ControlBox::interval(0.0, 1.0).unwrap();
        assert_eq!(project_control(&u, &b).unwrap(), u);
    }

    #[test]
    fn unbounded_is_identity() {
        let u = ControlPath::from_fn(&grid(), |t| -1e6 + 3e7 * t);
        assert_eq!(project_control(&u, &ControlBox::unbounded(1)).unwrap(), u);
    }

    #[test]
    fn inverted_bounds_rejected() {
        assert!(ControlBox::interval(1.0, 0.0).is_err());
        assert!(ControlBox::new(vec![0.0, 2.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let u = ControlPath::zeros(&grid(), 2);
        assert!(project_control(&u, &ControlBox::unbounded(1)).is_err());
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_nonexpansive(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            lo in -2.0f64..0.0,
            width in 0.0f64..3.0,
        ) {
            let g = make_time_grid(1.0, 4).unwrap();
            let bx = ControlBox::new(vec![lo, lo - 1.0], vec![lo + width, lo + 2.0 * width]).unwrap();
            let ua = ControlPath::new(2, g.steps(), a).unwrap();
            let ub = ControlPath::new(2, g.steps(), b).unwrap();
            let pa = project_control(&ua, &bx).unwrap();
            let pb = project_control(&ub, &bx).unwrap();
            prop_assert_eq!(project_control(&pa, &bx).unwrap(), pa.clone());
            prop_assert!(bx.contains(&pa));
            let d = |x: &ControlPath, y: &ControlPath| -> f64 {
                x.values().iter().zip(y.values()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
            };
            prop_assert!(d(&pa, &pb) <= d(&ua, &ub) + 1e-12);
        }
    }
}
