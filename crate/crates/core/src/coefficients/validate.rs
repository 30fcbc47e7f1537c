use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{read_node, CoefficientSet, Family, Node, Point, Slot, Var};
use crate::ensemble::{ControlValues, ParticleEnsemble};
use crate::error::{invalid, Error, Result};
use crate::law::path_view;

/// Where the partials are probed: a node `i < N` for the running families
/// (terminal families use node `N`), pointwise arguments, and the particle
/// whose path is perturbed for the measure kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub node: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub particle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCheck {
    pub name: String,
    pub declared: f64,
    pub numerical: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<PartialCheck>,
    pub max_rel_error: f64,
}

impl ValidationReport {
    /// Fails with the names of every check above `threshold`.
    pub fn enforce(&self, threshold: f64) -> Result<()> {
        let offending: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !(c.rel_error <= threshold))
            .map(|c| c.name.clone())
            .collect();
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::ValidationFailure { offending })
        }
    }
}

fn rel_error(declared: f64, numerical: f64) -> f64 {
    (declared - numerical).abs() / declared.abs().max(numerical.abs()).max(1.0)
}

/// Smooth perturbation direction in path time; zero at node 0 so X keeps its initial value.
fn direction(s: usize, steps: usize) -> f64 {
    if s == 0 {
        0.0
    } else {
        1.0 + 0.5 * (3.0 * s as f64 / steps as f64).sin()
    }
}

/// Compares declared partials and kernels with finite differences and
/// one-particle Gâteaux quotients, returning the full report.
pub fn partial_report(
    coeffs: &dyn CoefficientSet,
    ens: &ParticleEnsemble,
    probe: &ProbePoint,
    h: f64,
) -> Result<ValidationReport> {
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let grid = *ens.grid();
    let n = grid.steps();
    if probe.node >= n || probe.particle >= ens.particles() {
        return Err(invalid("probe node must be < N and probe particle < M"));
    }
    let mut checks = Vec::new();
    for family in Family::ALL {
        let i = match family {
            Family::Terminal | Family::TerminalCost => n,
            _ => probe.node,
        };
        let node = Node { i, t: grid.time(i) };
        let at = Point::new(node, probe.x, probe.y, probe.z);
        let stats = coeffs.law_stats(family, node, &family.law_view(ens, i));

        for &var in family.vars() {
            let declared = coeffs.partial(family, var, &at, &stats);
            let c = at.get(var);
            let up = coeffs.value(family, &at.with(var, c + h), &stats);
            let down = coeffs.value(family, &at.with(var, c - h), &stats);
            let numerical = (up - down) / (2.0 * h);
            checks.push(PartialCheck {
                name: format!("{}_{}", family.name(), var_label(var)),
                declared,
                numerical,
                rel_error: rel_error(declared, numerical),
            });
        }

        for slot in family.slots(coeffs.control_dim()) {
            let (_, cut) = family.convention(i);
            let mut kernel = vec![0.0; n];
            let path = path_view(ens, probe.particle, cut, family.convention(i).0);
            coeffs.kernel(family, slot, &at, &stats, &path, &mut kernel);
            let declared: f64 = (0..n)
                .map(|s| kernel[s] * direction(read_node(cut, slot, s), n))
                .sum::<f64>()
                * grid.dt();
            let eval = |delta: f64| -> Result<f64> {
                let bumped = perturb(ens, probe.particle, slot, delta)?;
                let st = coeffs.law_stats(family, node, &family.law_view(&bumped, i));
                Ok(coeffs.value(family, &at, &st))
            };
            let m = ens.particles() as f64;
            let numerical = (eval(h)? - eval(-h)?) / (2.0 * h / m);
            checks.push(PartialCheck {
                name: format!("dmu_{}[{}]", family.name(), slot.label()),
                declared,
                numerical,
                rel_error: rel_error(declared, numerical),
            });
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(ValidationReport {
        checks,
        max_rel_error,
    })
}

/// [`partial_report`] followed by [`ValidationReport::enforce`].
pub fn validate_partials(
    coeffs: &dyn CoefficientSet,
    ens: &ParticleEnsemble,
    probe: &ProbePoint,
    h: f64,
    threshold: f64,
) -> Result<ValidationReport> {
    let report = partial_report(coeffs, ens, probe, h)?;
    report.enforce(threshold)?;
    Ok(report)
}

fn var_label(v: Var) -> &'static str {
    match v {
        Var::X => "x",
        Var::Y => "y",
        Var::Z => "z",
    }
}

/// Copy of `ens` with one particle's slot component shifted by `delta·direction`.
fn perturb(ens: &ParticleEnsemble, j: usize, slot: Slot, delta: f64) -> Result<ParticleEnsemble> {
    let grid = *ens.grid();
    let (nodes, steps) = (grid.nodes(), grid.steps());
    let mut x = ens.x.clone();
    let mut y = ens.y.clone();
    let mut controls = ens.controls.clone();
    match slot {
        Slot::X => {
            for s in 0..nodes {
                x[j * nodes + s] += delta * direction(s, steps);
            }
        }
        Slot::Y => {
            for s in 0..nodes {
                y[j * nodes + s] += delta * direction(s, steps);
            }
        }
        Slot::U(c) => {
            let dim = ens.control_dim();
            let mut values = Vec::with_capacity(ens.particles() * steps * dim);
            for jj in 0..ens.particles() {
                for s in 0..steps {
                    for cc in 0..dim {
                        values.push(ens.u_at(jj, s, cc));
                    }
                }
            }
            for s in 0..steps {
                values[(j * steps + s) * dim + c] += delta * direction(s, steps);
            }
            controls = ControlValues::PerParticle { dim, values };
        }
    }
    ParticleEnsemble::from_parts(Arc::clone(ens.noise()), ens.x0(), x, y, ens.z.clone(), controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::builtin_problem;
    use crate::control::ControlPath;
    use crate::grid::make_time_grid;
    use crate::law::{LawHandle, PathView};
    use crate::noise::simulate_noise;
    use crate::coefficients::LawStats;
    use std::collections::BTreeMap;

    fn ensemble(m: usize, n: usize) -> ParticleEnsemble {
        let g = make_time_grid(1.0, n).unwrap();
        let nz = Arc::new(simulate_noise(&g, m, 5).unwrap());
        let x: Vec<f64> = (0..m)
            .flat_map(|j| nz.brownian_path(j).into_iter().map(|b| 0.2 + b))
            .collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.5).collect();
        let z = vec![0.3; m * n];
        ParticleEnsemble::from_parts(
            Arc::clone(&nz),
            0.2,
            x,
            y,
            z,
            ControlValues::Shared(ControlPath::from_fn(&g, |t| 0.3 - t)),
        )
        .unwrap()
    }

    fn probe() -> ProbePoint {
        ProbePoint {
            node: 5,
            x: 0.4,
            y: -0.7,
            z: 0.25,
            particle: 3,
        }
    }

    #[test]
    fn quadratic_all_errors_tiny() {
        let q = builtin_problem("quadratic_control", &BTreeMap::new()).unwrap();
        let r = validate_partials(q.as_ref(), &ensemble(16, 8), &probe(), 1e-5, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn builtins_consistent() {
        let e = ensemble(64, 12);
        for name in crate::coefficients::builtin_names() {
            let c = builtin_problem(name, &BTreeMap::new()).unwrap();
            let r = partial_report(c.as_ref(), &e, &probe(), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn coupled_sigma_u_kernel_matches_gateaux_quotient() {
        let c = builtin_problem("coupled_sigma", &BTreeMap::new()).unwrap();
        let r = partial_report(c.as_ref(), &ensemble(64, 16), &probe(), 1e-5).unwrap();
        let check = r.checks.iter().find(|c| c.name == "dmu_sigma[u0]").unwrap();
        assert!(check.declared != 0.0);
        assert!(check.rel_error < 1e-4, "{check:?}");
    }

    struct WrongFy<C>(C);

    impl<C: CoefficientSet> CoefficientSet for WrongFy<C> {
        fn name(&self) -> &str {
            "wrong"
        }
        fn law_stats(&self, family: Family, node: Node, law: &LawHandle<'_>) -> LawStats {
            self.0.law_stats(family, node, law)
        }
        fn value(&self, family: Family, at: &Point, stats: &[f64]) -> f64 {
            self.0.value(family, at, stats)
        }
        fn partial(&self, family: Family, var: Var, at: &Point, stats: &[f64]) -> f64 {
            let p = self.0.partial(family, var, at, stats);
            if (family, var) == (Family::Driver, Var::Y) {
                p + 0.5
            } else {
                p
            }
        }
        fn has_kernel(&self, family: Family, slot: Slot) -> bool {
            self.0.has_kernel(family, slot)
        }
        fn kernel(&self, family: Family, slot: Slot, at: &Point, stats: &[f64], path: &PathView<'_>, out: &mut [f64]) {
            self.0.kernel(family, slot, at, stats, path, out)
        }
    }

    #[test]
    fn wrong_driver_partial_is_flagged() {
        let base = builtin_problem("example_i", &BTreeMap::new()).unwrap();
        let err = validate_partials(&WrongFy(base), &ensemble(16, 8), &probe(), 1e-5, 1e-4).unwrap_err();
        assert_eq!(
            err,
            Error::ValidationFailure {
                offending: vec!["f_y".to_string()]
            }
        );
    }

    #[test]
    fn rejects_bad_step() {
        let q = builtin_problem("quadratic_control", &BTreeMap::new()).unwrap();
        assert!(partial_report(q.as_ref(), &ensemble(4, 8), &probe(), 0.0).is_err());
    }
}
