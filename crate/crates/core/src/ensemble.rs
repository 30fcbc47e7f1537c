use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::ControlPath;
use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::noise::NoiseEnsemble;

/// Control values carried by an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlValues {
    /// Open-loop control, identical for every particle.
    Shared(ControlPath),
    /// One control path per particle (feedback rules, perturbation probes).
    PerParticle { dim: usize, values: Vec<f64> },
}

impl ControlValues {
    pub fn dim(&self) -> usize {
        match self {
            ControlValues::Shared(u) => u.dim(),
            ControlValues::PerParticle { dim, .. } => *dim,
        }
    }
}

/// `M` sample paths of `(X, Y, Z)` on a grid, driven by a shared noise ensemble.
///
/// Storage is particle-major so that a single path is a contiguous slice.
/// `Z` lives on left endpoints only (`N` values per particle).
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    grid: TimeGrid,
    x0: f64,
    particles: usize,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) controls: ControlValues,
    noise: Arc<NoiseEnsemble>,
}

impl ParticleEnsemble {
    /// Every path frozen at `x0`, `Y = Z = 0`.
    pub fn constant(noise: Arc<NoiseEnsemble>, x0: f64, control: ControlPath) -> Result<Self> {
        control.check_grid(noise.grid())?;
        let grid = *noise.grid();
        let m = noise.particles();
        Ok(Self {
            grid,
            x0,
            particles: m,
            x: vec![x0; m * grid.nodes()],
            y: vec![0.0; m * grid.nodes()],
            z: vec![0.0; m * grid.steps()],
            controls: ControlValues::Shared(control),
            noise,
        })
    }

    /// Assembles an ensemble from raw particle-major arrays.
    pub fn from_parts(
        noise: Arc<NoiseEnsemble>,
        x0: f64,
        x: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        controls: ControlValues,
    ) -> Result<Self> {
        let grid = *noise.grid();
        let m = noise.particles();
        let (nodes, steps) = (grid.nodes(), grid.steps());
        if x.len() != m * nodes || y.len() != m * nodes || z.len() != m * steps {
            return Err(invalid("ensemble arrays do not match grid and particle count"));
        }
        match &controls {
            ControlValues::Shared(u) => u.check_grid(&grid)?,
            ControlValues::PerParticle { dim, values } => {
                if *dim == 0 || values.len() != m * steps * dim {
                    return Err(invalid("per-particle controls do not match grid"));
                }
            }
        }
        if (0..m).any(|j| x[j * nodes] != x0) {
            return Err(invalid("every X path must start at x0"));
        }
        Ok(Self {
            grid,
            x0,
            particles: m,
            x,
            y,
            z,
            controls,
            noise,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn noise(&self) -> &Arc<NoiseEnsemble> {
        &self.noise
    }

    pub fn controls(&self) -> &ControlValues {
        &self.controls
    }

    pub fn control_dim(&self) -> usize {
        self.controls.dim()
    }

    pub fn x(&self, j: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.x[j * n..(j + 1) * n]
    }

    pub fn y(&self, j: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.y[j * n..(j + 1) * n]
    }

    pub fn z(&self, j: usize) -> &[f64] {
        let n = self.grid.steps();
        &self.z[j * n..(j + 1) * n]
    }

    #[inline]
    pub fn x_at(&self, j: usize, i: usize) -> f64 {
        self.x[j * self.grid.nodes() + i]
    }

    #[inline]
    pub fn y_at(&self, j: usize, i: usize) -> f64 {
        self.y[j * self.grid.nodes() + i]
    }

    #[inline]
    pub fn z_at(&self, j: usize, i: usize) -> f64 {
        self.z[j * self.grid.steps() + i]
    }

    #[inline]
    pub fn u_at(&self, j: usize, i: usize, c: usize) -> f64 {
        match &self.controls {
            ControlValues::Shared(u) => u.get(i, c),
            ControlValues::PerParticle { dim, values } => {
                values[(j * self.grid.steps() + i) * dim + c]
            }
        }
    }

    /// `X[·][i]` across particles.
    pub fn x_column(&self, i: usize) -> Vec<f64> {
        (0..self.particles).map(|j| self.x_at(j, i)).collect()
    }

    pub fn y_column(&self, i: usize) -> Vec<f64> {
        (0..self.particles).map(|j| self.y_at(j, i)).collect()
    }

    pub fn z_column(&self, i: usize) -> Vec<f64> {
        (0..self.particles).map(|j| self.z_at(j, i)).collect()
    }

    /// Path-value relaxation `(1 - λ)·self + λ·next`; controls are taken from `next`.
    pub fn relax(&self, next: &ParticleEnsemble, lambda: f64) -> ParticleEnsemble {
        if lambda == 1.0 {
            return next.clone();
        }
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(&p, &q)| (1.0 - lambda) * p + lambda * q)
                .collect()
        };
        ParticleEnsemble {
            grid: self.grid,
            x0: self.x0,
            particles: self.particles,
            x: mix(&self.x, &next.x),
            y: mix(&self.y, &next.y),
            z: mix(&self.z, &next.z),
            controls: next.controls.clone(),
            noise: Arc::clone(&next.noise),
        }
    }

    fn check_coupled(&self, other: &ParticleEnsemble) -> Result<()> {
        if self.grid != other.grid || self.particles != other.particles {
            return Err(invalid("ensembles differ in grid or particle count"));
        }
        let (a, b) = (&self.noise, &other.noise);
        if !Arc::ptr_eq(a, b) && !a.same_noise(b) {
            return Err(invalid("ensembles are not driven by the same noise"));
        }
        Ok(())
    }
}

/// Common-noise coupling distance
/// `( (1/M) Σ_j [ sup_i |ΔX_j(t_i)|² + sup_i |ΔY_j(t_i)|² ] )^{1/2}`,
/// an upper bound for the W₂ distance of the two empirical path laws.
pub fn coupled_path_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    a.check_coupled(b)?;
    let mut acc = 0.0;
    for j in 0..a.particles {
        let sup = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| (s - t).abs()).fold(0.0, f64::max);
        let dx = sup(a.x(j), b.x(j));
        let dy = sup(a.y(j), b.y(j));
        acc += dx * dx + dy * dy;
    }
    Ok((acc / a.particles as f64).sqrt())
}

/// Empirical analogues of the moment bounds defining the compact set of path laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    /// `sup_i mean_j |(X, Y)_j(t_i)|⁴`.
    pub fourth_moment_sup: f64,
    /// `max_{s<t} mean_j |(X,Y)_j(t) - (X,Y)_j(s)|⁴ / |t - s|²`.
    pub worst_increment_ratio: f64,
    pub worst_pair: (usize, usize),
}

pub fn compactness_diagnostics(e: &ParticleEnsemble) -> CompactnessReport {
    let grid = e.grid();
    let m = e.particles() as f64;
    let nodes = grid.nodes();
    let mut fourth_moment_sup: f64 = 0.0;
    for i in 0..nodes {
        let s: f64 = (0..e.particles())
            .map(|j| {
                let r2 = e.x_at(j, i).powi(2) + e.y_at(j, i).powi(2);
                r2 * r2
            })
            .sum();
        fourth_moment_sup = fourth_moment_sup.max(s / m);
    }
    let mut worst_increment_ratio: f64 = 0.0;
    let mut worst_pair = (0, 0);
    for s in 0..nodes {
        for t in s + 1..nodes {
            let gap = grid.time(t) - grid.time(s);
            let sum: f64 = (0..e.particles())
                .map(|j| {
                    let dx = e.x_at(j, t) - e.x_at(j, s);
                    let dy = e.y_at(j, t) - e.y_at(j, s);
                    let r2 = dx * dx + dy * dy;
                    r2 * r2
                })
                .sum();
            let ratio = sum / m / (gap * gap);
            if ratio > worst_increment_ratio {
                worst_increment_ratio = ratio;
                worst_pair = (s, t);
            }
        }
    }
    CompactnessReport {
        fourth_moment_sup,
        worst_increment_ratio,
        worst_pair,
    }
}
