//! Kernel pairings against the empirical path law.
//!
//! Two contractions cover every measure-derivative term:
//!
//! - [`Pairing::directional`]: for each point particle `j`,
//!   `mean_m Σ_s κ(θ_j; path_m)(s)·ξ_m(s)·Δt`, the derivative of a
//!   coefficient along a perturbation `ξ` of the law samples;
//! - [`Pairing::accumulate`]: for each path particle `m`,
//!   `mean_j κ(θ_j; path_m)(s)·w_j`, distributed to the node that `ξ_m(s)`
//!   would be read from. Summed over coefficient nodes these are the
//!   starred operators of the adjoint equations.
//!
//! Kernels declared point-free factor through the particle average and are
//! computed over all `M` particles. Otherwise the inner average runs over a
//! fixed-stride subsample of `M̃` particles.

use rayon::prelude::*;

use crate::coefficients::{
    node_stats, read_node, terminal_stats, CoefficientSet, Family, LawStats, Node, Point, Slot,
};
use crate::ensemble::ParticleEnsemble;
use crate::law::path_view;

/// `M̃` indices `0, s, 2s, …` with stride `s = ⌊M/M̃⌋`; all particles when `M̃ ≥ M` or `M̃ = 0`.
pub(crate) fn stride_sample(particles: usize, tilde: usize) -> Vec<usize> {
    if tilde == 0 || tilde >= particles {
        return (0..particles).collect();
    }
    let stride = particles / tilde;
    (0..tilde).map(|k| k * stride).collect()
}

pub(crate) struct Pairing<'a> {
    coeffs: &'a dyn CoefficientSet,
    ens: &'a ParticleEnsemble,
    family: Family,
    running: Vec<LawStats>,
    terminal: LawStats,
    sample: Vec<usize>,
    point_free: bool,
}

impl<'a> Pairing<'a> {
    pub fn new(coeffs: &'a dyn CoefficientSet, ens: &'a ParticleEnsemble, family: Family, tilde: usize) -> Self {
        let terminal_family = matches!(family, Family::Terminal | Family::TerminalCost);
        let (running, terminal) = if terminal_family {
            (Vec::new(), terminal_stats(coeffs, family, ens))
        } else {
            (node_stats(coeffs, family, ens), LawStats::new())
        };
        Self {
            coeffs,
            ens,
            family,
            running,
            terminal,
            sample: stride_sample(ens.particles(), tilde),
            point_free: coeffs.kernel_point_free(family),
        }
    }

    pub fn stats(&self, r: usize) -> &[f64] {
        match self.family {
            Family::Terminal | Family::TerminalCost => &self.terminal,
            _ => &self.running[r],
        }
    }

    pub fn node(&self, r: usize) -> Node {
        Node {
            i: r,
            t: self.ens.grid().time(r),
        }
    }

    /// Pointwise arguments of particle `j` at node `r`.
    pub fn point(&self, j: usize, r: usize) -> Point {
        let e = self.ens;
        let node = self.node(r);
        match self.family {
            Family::Sigma | Family::Terminal | Family::TerminalCost => Point::at_x(node, e.x_at(j, r)),
            Family::Driver | Family::RunningCost => Point::new(node, e.x_at(j, r), e.y_at(j, r), e.z_at(j, r)),
        }
    }

    pub fn partial(&self, var: crate::coefficients::Var, j: usize, r: usize) -> f64 {
        self.coeffs.partial(self.family, var, &self.point(j, r), self.stats(r))
    }

    pub fn active(&self, slot: Slot) -> bool {
        self.coeffs.has_kernel(self.family, slot)
    }

    pub fn slots(&self) -> Vec<Slot> {
        self.family
            .slots(self.coeffs.control_dim())
            .into_iter()
            .filter(|&s| self.active(s))
            .collect()
    }

    fn kernel(&self, slot: Slot, point: &Point, m: usize, r: usize, out: &mut [f64]) {
        let (components, cut) = self.family.convention(r);
        let path = path_view(self.ens, m, cut, components);
        self.coeffs.kernel(self.family, slot, point, self.stats(r), &path, out);
    }

    /// Adds `scale·mean_j κ(r, θ_j(r); path_m)(s)·w_j` into `acc[m·N + read_node(s)]`
    /// for every path particle `m`. `weights = None` means `w ≡ 1`.
    pub fn accumulate(&self, r: usize, slot: Slot, weights: Option<&[f64]>, scale: f64, acc: &mut [f64]) {
        if !self.active(slot) {
            return;
        }
        let n = self.ens.grid().steps();
        let (_, cut) = self.family.convention(r);
        let w = |j: usize| weights.map_or(1.0, |w| w[j]);
        if self.point_free {
            let m = self.ens.particles();
            let wbar = match weights {
                None => 1.0,
                Some(ws) => ws.iter().sum::<f64>() / m as f64,
            };
            if wbar == 0.0 {
                return;
            }
            let point = Point::new(self.node(r), 0.0, 0.0, 0.0);
            let c = scale * wbar;
            acc.par_chunks_mut(n).enumerate().for_each_init(
                || vec![0.0; n],
                |buf, (mi, row)| {
                    self.kernel(slot, &point, mi, r, buf);
                    for (s, k) in buf.iter().enumerate() {
                        row[read_node(cut, slot, s)] += c * k;
                    }
                },
            );
        } else {
            let size = self.sample.len() as f64;
            let points: Vec<(Point, f64)> = self.sample.iter().map(|&j| (self.point(j, r), w(j))).collect();
            acc.par_chunks_mut(n).enumerate().for_each_init(
                || (vec![0.0; n], vec![0.0; n]),
                |(buf, sum), (mi, row)| {
                    sum.fill(0.0);
                    for (p, wj) in &points {
                        if *wj == 0.0 {
                            continue;
                        }
                        self.kernel(slot, p, mi, r, buf);
                        for (a, k) in sum.iter_mut().zip(buf.iter()) {
                            *a += k * wj;
                        }
                    }
                    for (s, a) in sum.iter().enumerate() {
                        row[read_node(cut, slot, s)] += scale * a / size;
                    }
                },
            );
        }
    }

    /// Adds `mean_m Σ_s κ(r, θ_j(r); path_m)(s)·ξ(m, read_node(s))·Δt` to `out[j]`
    /// for every point particle `j`.
    pub fn directional(&self, r: usize, slot: Slot, xi: &(dyn Fn(usize, usize) -> f64 + Sync), out: &mut [f64]) {
        if !self.active(slot) {
            return;
        }
        let grid = self.ens.grid();
        let (n, dt) = (grid.steps(), grid.dt());
        let (_, cut) = self.family.convention(r);
        let pair = |buf: &[f64], m: usize| -> f64 {
            buf.iter()
                .enumerate()
                .map(|(s, k)| k * xi(m, read_node(cut, slot, s)))
                .sum::<f64>()
                * dt
        };
        if self.point_free {
            let m = self.ens.particles();
            let point = Point::new(self.node(r), 0.0, 0.0, 0.0);
            let per: Vec<f64> = (0..m)
                .into_par_iter()
                .map_init(
                    || vec![0.0; n],
                    |buf, mi| {
                        self.kernel(slot, &point, mi, r, buf);
                        pair(buf, mi)
                    },
                )
                .collect();
            let value = per.iter().sum::<f64>() / m as f64;
            for o in out.iter_mut() {
                *o += value;
            }
        } else {
            let size = self.sample.len() as f64;
            out.par_iter_mut().enumerate().for_each_init(
                || vec![0.0; n],
                |buf, (j, o)| {
                    let p = self.point(j, r);
                    let mut acc = 0.0;
                    for &mi in &self.sample {
                        self.kernel(slot, &p, mi, r, buf);
                        acc += pair(buf, mi);
                    }
                    *o += acc / size;
                },
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_sample_shapes() {
        assert_eq!(stride_sample(10, 0), (0..10).collect::<Vec<_>>());
        assert_eq!(stride_sample(10, 20), (0..10).collect::<Vec<_>>());
        assert_eq!(stride_sample(10, 3), vec![0, 3, 6]);
        assert_eq!(stride_sample(8, 4), vec![0, 2, 4, 6]);
    }
}
