//! Read-only views of an ensemble as an empirical law of paths.
//!
//! Coefficients never see particle arrays directly: they receive an
//! [`EmpiricalPathLaw`] carrying a truncation marker, and kernels receive a
//! single [`PathView`] from it. Both borrow the ensemble and never copy paths.

use serde::{Deserialize, Serialize};

use crate::control::ControlPath;
use crate::ensemble::{ControlValues, ParticleEnsemble};

/// Sub-path convention applied when reading a path at node `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cut {
    Full,
    /// `X_{· ∧ t_i}`: X is frozen after node `i`.
    Wedge(usize),
    /// `Y_{· ∨ t_i}`: Y is frozen before node `i`.
    Vee(usize),
}

/// Which path components the law is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Components {
    X,
    XU,
    XYU,
}

#[derive(Debug, Clone, Copy)]
enum ControlRef<'a> {
    Shared(&'a ControlPath),
    Row { dim: usize, values: &'a [f64] },
}

/// One sample path `(X, Y, u)` read through a truncation.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    x: &'a [f64],
    y: &'a [f64],
    u: ControlRef<'a>,
    cut: Cut,
    components: Components,
    dt: f64,
}

impl<'a> PathView<'a> {
    pub fn steps(&self) -> usize {
        self.x.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn cut(&self) -> Cut {
        self.cut
    }

    /// Time of node `s` (exact for interior nodes).
    #[inline]
    pub fn time(&self, s: usize) -> f64 {
        s as f64 * self.dt
    }

    /// `X` at node `s` (frozen after the wedge node, if any).
    #[inline]
    pub fn x(&self, s: usize) -> f64 {
        match self.cut {
            Cut::Wedge(i) => self.x[s.min(i)],
            _ => self.x[s],
        }
    }

    /// `Y` at node `s` (frozen before the vee node, if any).
    #[inline]
    pub fn y(&self, s: usize) -> f64 {
        debug_assert!(self.components == Components::XYU, "law has no Y component");
        match self.cut {
            Cut::Vee(i) => self.y[s.max(i)],
            _ => self.y[s],
        }
    }

    /// Control component `c` on step `s`.
    #[inline]
    pub fn u(&self, s: usize, c: usize) -> f64 {
        match self.u {
            ControlRef::Shared(u) => u.get(s, c),
            ControlRef::Row { dim, values } => values[s * dim + c],
        }
    }

    /// Left-rule `∫_0^{t_upto} X_{s} ds` along the (truncated) path.
    pub fn integral_x(&self, upto: usize) -> f64 {
        (0..upto).map(|s| self.x(s)).sum::<f64>() * self.dt
    }

    /// Left-rule `∫_0^{t_upto} u_s^c ds`.
    pub fn integral_u(&self, upto: usize, c: usize) -> f64 {
        (0..upto).map(|s| self.u(s, c)).sum::<f64>() * self.dt
    }
}

/// Uniform-weight empirical law of the paths stored in an ensemble.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalPathLaw<'a> {
    ens: &'a ParticleEnsemble,
    components: Components,
    cut: Cut,
}

/// A law view handed to coefficient evaluators.
pub type LawHandle<'a> = EmpiricalPathLaw<'a>;

impl<'a> EmpiricalPathLaw<'a> {
    pub fn new(ens: &'a ParticleEnsemble, components: Components, cut: Cut) -> Self {
        Self {
            ens,
            components,
            cut,
        }
    }

    pub fn ensemble(&self) -> &'a ParticleEnsemble {
        self.ens
    }

    pub fn particles(&self) -> usize {
        self.ens.particles()
    }

    pub fn cut(&self) -> Cut {
        self.cut
    }

    pub fn components(&self) -> Components {
        self.components
    }

    pub fn path(&self, j: usize) -> PathView<'a> {
        path_view(self.ens, j, self.cut, self.components)
    }

    /// Mean of a path functional over all particles, summed in particle order.
    pub fn mean(&self, f: impl Fn(&PathView<'a>) -> f64) -> f64 {
        let m = self.ens.particles();
        let mut acc = 0.0;
        for j in 0..m {
            acc += f(&self.path(j));
        }
        acc / m as f64
    }
}

pub(crate) fn path_view<'a>(
    ens: &'a ParticleEnsemble,
    j: usize,
    cut: Cut,
    components: Components,
) -> PathView<'a> {
    let u = match ens.controls() {
        ControlValues::Shared(u) => ControlRef::Shared(u),
        ControlValues::PerParticle { dim, values } => {
            let n = ens.grid().steps() * dim;
            ControlRef::Row {
                dim: *dim,
                values: &values[j * n..(j + 1) * n],
            }
        }
    };
    PathView {
        x: ens.x(j),
        y: ens.y(j),
        u,
        cut,
        components,
        dt: ens.grid().dt(),
    }
}

/// `Ẽ[F(path)]` under the empirical law.
pub fn eval_law_functional<'a>(law: &LawHandle<'a>, functional: impl Fn(&PathView<'a>) -> f64) -> f64 {
    law.mean(functional)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlPath;
    use crate::grid::make_time_grid;
    use crate::noise::simulate_noise;
    use std::sync::Arc;

    fn toy() -> ParticleEnsemble {
        let g = make_time_grid(1.0, 2).unwrap();
        let nz = Arc::new(simulate_noise(&g, 3, 1).unwrap());
        let x = vec![0.0, 1.0, -2.0, 0.0, -0.5, 0.25, 0.0, 3.0, 1.0];
        let y = vec![5.0, 6.0, 7.0, 1.0, 2.0, 3.0, -1.0, -2.0, -3.0];
        ParticleEnsemble::from_parts(
            nz,
            0.0,
            x,
            y,
            vec![0.0; 6],
            ControlValues::Shared(ControlPath::constant(&g, &[0.5])),
        )
        .unwrap()
    }

    #[test]
    fn constant_functional() {
        let e = toy();
        let law = EmpiricalPathLaw::new(&e, Components::XYU, Cut::Full);
        assert_eq!(eval_law_functional(&law, |_| 1.0), 1.0);
    }

    #[test]
    fn terminal_value_of_frozen_ensemble() {
        let g = make_time_grid(1.0, 5).unwrap();
        let nz = Arc::new(simulate_noise(&g, 4, 1).unwrap());
        let e = ParticleEnsemble::constant(nz, 0.7, ControlPath::zeros(&g, 1)).unwrap();
        let law = EmpiricalPathLaw::new(&e, Components::X, Cut::Full);
        assert_eq!(eval_law_functional(&law, |p| p.x(5)), 0.7);
    }

    #[test]
    fn sup_functional_on_three_particles() {
        // sup |X| per particle: 2, 0.5, 3 -> mean 11/6.
        let e = toy();
        let law = EmpiricalPathLaw::new(&e, Components::X, Cut::Full);
        let v = eval_law_functional(&law, |p| (0..=2).map(|s| p.x(s).abs()).fold(0.0, f64::max));
        assert!((v - 11.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn truncations() {
        let e = toy();
        let wedge = EmpiricalPathLaw::new(&e, Components::XU, Cut::Wedge(1));
        assert_eq!(wedge.path(0).x(2), 1.0);
        assert_eq!(wedge.path(0).x(0), 0.0);
        let vee = EmpiricalPathLaw::new(&e, Components::XYU, Cut::Vee(1));
        for r in 0..=1 {
            assert_eq!(vee.path(1).y(r), 2.0);
        }
        assert_eq!(vee.path(1).y(2), 3.0);
        assert_eq!(vee.path(1).x(2), 0.25);
    }

    #[test]
    fn linearity() {
        let e = toy();
        let law = EmpiricalPathLaw::new(&e, Components::XYU, Cut::Full);
        let f = |p: &PathView| p.x(1) * p.y(2);
        let g = |p: &PathView| p.integral_x(2) + p.u(1, 0);
        let (a, b) = (1.7, -0.3);
        let lhs = eval_law_functional(&law, |p| a * f(p) + b * g(p));
        let rhs = a * eval_law_functional(&law, f) + b * eval_law_functional(&law, g);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn view_moments_match_raw_arrays() {
        let e = toy();
        let law = EmpiricalPathLaw::new(&e, Components::XYU, Cut::Full);
        for i in 0..=2 {
            let raw: f64 = e.x_column(i).iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert_eq!(law.mean(|p| p.x(i) * p.x(i)), raw);
        }
    }
}
