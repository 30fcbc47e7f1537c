//! Least-squares projections onto functions of the current state.
//!
//! Conditional expectations `E[· | F_{t_i}]` are approximated by the
//! empirical L² projection onto `span{1, z, …, z^d}` with `z` the
//! standardized state `X_{t_i}`, optionally extended by the standardized
//! running integral and running maximum of the path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub running_integral: bool,
    pub running_max: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 1,
            running_integral: false,
            running_max: false,
        }
    }
}

/// Projection onto the basis evaluated at one node.
#[derive(Debug, Clone)]
pub struct Projector {
    rows: usize,
    cols: usize,
    phi: Vec<f64>,
    factor: DMatrix<f64>,
    ridge: Option<f64>,
}

fn standardize(col: &[f64]) -> Option<Vec<f64>> {
    let m = col.len() as f64;
    let mean = col.iter().sum::<f64>() / m;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return None;
    }
    Some(col.iter().map(|v| (v - mean) / sd).collect())
}

impl Projector {
    /// Builds the design matrix from raw feature columns: monomials up to
    /// `degree` of the first column, linear terms of the others.
    /// Degenerate (constant) columns are dropped.
    pub fn fit(state: &[f64], extra: &[Vec<f64>], degree: usize) -> Result<Self> {
        let rows = state.len();
        if rows == 0 {
            return Err(invalid("regression needs at least one sample"));
        }
        let mut columns: Vec<Vec<f64>> = vec![vec![1.0; rows]];
        if degree > 0 {
            if let Some(z) = standardize(state) {
                let mut pow = z.clone();
                columns.push(z.clone());
                for _ in 1..degree {
                    pow = pow.iter().zip(&z).map(|(a, b)| a * b).collect();
                    columns.push(pow.clone());
                }
            }
        }
        for col in extra {
            if let Some(z) = standardize(col) {
                columns.push(z);
            }
        }
        let cols = columns.len();
        let mut phi = vec![0.0; rows * cols];
        for (c, col) in columns.iter().enumerate() {
            for (j, v) in col.iter().enumerate() {
                phi[j * cols + c] = *v;
            }
        }
        let mut gram = DMatrix::<f64>::zeros(cols, cols);
        for j in 0..rows {
            let row = &phi[j * cols..(j + 1) * cols];
            for a in 0..cols {
                for b in 0..=a {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..cols {
            for b in 0..=a {
                let v = gram[(a, b)] / rows as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let (factor, ridge) = match cholesky_well_posed(&gram) {
            Some(l) => (l, None),
            None => {
                let lambda = 1e-10 * gram.trace() / cols as f64;
                log::warn!("rank-deficient regression ({cols} columns, {rows} samples); ridge {lambda:e}");
                let mut g = gram.clone();
                for a in 0..cols {
                    g[(a, a)] += lambda;
                }
                let l = nalgebra::Cholesky::new(g)
                    .ok_or_else(|| invalid("regression matrix not positive definite after ridge"))?
                    .unpack();
                (l, Some(lambda))
            }
        };
        Ok(Self {
            rows,
            cols,
            phi,
            factor,
            ridge,
        })
    }

    pub fn columns(&self) -> usize {
        self.cols
    }

    /// Regularizer used when the design was rank deficient.
    pub fn ridge(&self) -> Option<f64> {
        self.ridge
    }

    /// Least-squares coefficients for the target `y`.
    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut b = DVector::<f64>::zeros(self.cols);
        for (j, yj) in y.iter().enumerate() {
            let row = &self.phi[j * self.cols..(j + 1) * self.cols];
            for c in 0..self.cols {
                b[c] += row[c] * yj;
            }
        }
        b /= self.rows as f64;
        let l = &self.factor;
        let w = l.solve_lower_triangular(&b).expect("nonsingular factor");
        let c = l.tr_solve_lower_triangular(&w).expect("nonsingular factor");
        c.iter().copied().collect()
    }

    /// Fitted values of the projection of `y`, written to `out`.
    ///
    /// Constant targets are reproduced exactly (the basis holds an intercept).
    pub fn project_into(&self, y: &[f64], out: &mut [f64]) {
        if let Some(&first) = y.first() {
            if y.iter().all(|&v| v.to_bits() == first.to_bits()) {
                out.fill(first);
                return;
            }
        }
        let c = self.coefficients(y);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.phi[j * self.cols..(j + 1) * self.cols];
            *o = row.iter().zip(&c).map(|(a, b)| a * b).sum();
        }
    }

    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.project_into(y, &mut out);
        out
    }
}

fn cholesky_well_posed(gram: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = nalgebra::Cholesky::new(gram.clone())?.unpack();
    let diag: Vec<f64> = (0..l.nrows()).map(|a| l[(a, a)] * l[(a, a)]).collect();
    let hi = diag.iter().copied().fold(0.0, f64::max);
    let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
    (lo > 1e-13 * hi).then_some(l)
}

/// One projector per step node `i < N`, built from an ensemble's X paths.
#[derive(Debug, Clone)]
pub struct NodeProjectors {
    nodes: Vec<Projector>,
}

impl NodeProjectors {
    pub fn build(ens: &ParticleEnsemble, spec: &BasisSpec) -> Result<Self> {
        let grid = ens.grid();
        let m = ens.particles();
        let dt = grid.dt();
        let mut integral = vec![0.0; m];
        let mut running_max = vec![f64::NEG_INFINITY; m];
        let mut nodes = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() {
            let x = ens.x_column(i);
            for j in 0..m {
                running_max[j] = running_max[j].max(x[j]);
            }
            let mut extra = Vec::new();
            if spec.running_integral {
                extra.push(integral.clone());
            }
            if spec.running_max {
                extra.push(running_max.clone());
            }
            nodes.push(Projector::fit(&x, &extra, spec.degree)?);
            for j in 0..m {
                integral[j] += x[j] * dt;
            }
        }
        Ok(Self { nodes })
    }

    pub fn at(&self, i: usize) -> &Projector {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes whose design needed a ridge regularizer.
    pub fn ridge_nodes(&self) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.ridge().map(|r| (i, r)))
            .collect()
    }
}
