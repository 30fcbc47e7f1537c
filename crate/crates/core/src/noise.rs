use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::TimeGrid;

/// Identifier of the stream layout: one ChaCha8 stream per particle index,
/// increments drawn in step order.
pub const STREAM_LAYOUT: &str = "chacha8-stream-per-particle-v1";

/// Layout of ensembles built from caller-supplied increments.
pub const EXPLICIT_LAYOUT: &str = "explicit";

/// Brownian increments for `M` particles on a grid.
///
/// Particle `j` draws from ChaCha8 stream `j` of the seed, so its increments do
/// not depend on how many particles are simulated alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEnsemble {
    grid: TimeGrid,
    particles: usize,
    seed: u64,
    layout: String,
    increments: Vec<f64>,
}

impl NoiseEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &str {
        &self.layout
    }

    /// Increments of particle `j`, one per step.
    pub fn path(&self, j: usize) -> &[f64] {
        let n = self.grid.steps();
        &self.increments[j * n..(j + 1) * n]
    }

    #[inline]
    pub fn increment(&self, j: usize, i: usize) -> f64 {
        self.increments[j * self.grid.steps() + i]
    }

    /// Noise from caller-supplied increments, particle-major (`M·N` values).
    pub fn from_increments(grid: &TimeGrid, particles: usize, increments: Vec<f64>) -> Result<Self> {
        if particles == 0 || increments.len() != particles * grid.steps() {
            return Err(invalid("increment array must hold M·N values with M ≥ 1"));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(invalid("increments must be finite"));
        }
        Ok(NoiseEnsemble {
            grid: *grid,
            particles,
            seed: 0,
            layout: EXPLICIT_LAYOUT.to_string(),
            increments,
        })
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Whether two ensembles carry the same increments.
    pub fn same_noise(&self, other: &NoiseEnsemble) -> bool {
        if self.grid != other.grid || self.particles != other.particles {
            return false;
        }
        if self.layout == STREAM_LAYOUT && other.layout == STREAM_LAYOUT {
            return self.seed == other.seed;
        }
        self.increments == other.increments
    }

    /// Brownian path `B_j(t_i)` at every node, starting from zero.
    pub fn brownian_path(&self, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.nodes());
        let mut b = 0.0;
        out.push(b);
        for &db in self.path(j) {
            b += db;
            out.push(b);
        }
        out
    }
}

fn particle_increments(seed: u64, j: usize, steps: usize, scale: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    for slot in out.iter_mut().take(steps) {
        let g: f64 = StandardNormal.sample(&mut rng);
        *slot = scale * g;
    }
}

/// Draws `M` independent Gaussian increment paths with variance `dt` per step.
pub fn simulate_noise(grid: &TimeGrid, particles: usize, seed: u64) -> Result<NoiseEnsemble> {
    if particles == 0 {
        return Err(invalid("particle count must be at least 1"));
    }
    let n = grid.steps();
    let scale = grid.dt().sqrt();
    let mut increments = vec![0.0; particles * n];
    for (j, chunk) in increments.chunks_mut(n).enumerate() {
        particle_increments(seed, j, n, scale, chunk);
    }
    Ok(NoiseEnsemble {
        grid: *grid,
        particles,
        seed,
        layout: STREAM_LAYOUT.to_string(),
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_time_grid;

    #[test]
    fn reproducible() {
        let g = make_time_grid(1.0, 16).unwrap();
        let a = simulate_noise(&g, 64, 7).unwrap();
        let b = simulate_noise(&g, 64, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_noise(&g, 64, 8).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn particle_stream_independent_of_count() {
        let g = make_time_grid(1.0, 8).unwrap();
        let small = simulate_noise(&g, 3, 11).unwrap();
        let big = simulate_noise(&g, 40, 11).unwrap();
        for j in 0..3 {
            assert_eq!(small.path(j), big.path(j));
        }
    }

    #[test]
    fn mean_within_clt_band() {
        let g = make_time_grid(1.0, 1).unwrap();
        let m = 100_000;
        let e = simulate_noise(&g, m, 2024).unwrap();
        let mean = e.increments.iter().sum::<f64>() / m as f64;
        assert!(mean.abs() <= 4.0 / (m as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn variance_within_five_percent() {
        // chi-square with 1e5 dof: relative sd of the sample variance is
        // sqrt(2/1e5) = 0.45%, so the 5% band is ~11 sd wide.
        let g = make_time_grid(0.5, 1).unwrap();
        let m = 100_000;
        let e = simulate_noise(&g, m, 2024).unwrap();
        let mean = e.increments.iter().sum::<f64>() / m as f64;
        let var = e.increments.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((var / 0.5 - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn rejects_zero_particles() {
        let g = make_time_grid(1.0, 4).unwrap();
        assert!(simulate_noise(&g, 0, 1).is_err());
    }
}
