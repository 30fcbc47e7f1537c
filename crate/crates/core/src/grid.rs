use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform partition of `[0, T]` into `N` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("step count must be at least 1"));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`; there are `N + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Node time `t_i`. The last node is pinned to the horizon exactly.
    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// Builds the uniform grid with `steps` intervals on `[0, horizon]`.
pub fn make_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}
