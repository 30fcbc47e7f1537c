mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::{setup, Toy};
use mfbsde::adjoint::{compute_starred, duality_check, solve_adjoint, solve_adjoint_p, solve_adjoint_qk};
use mfbsde::coefficients::{builtin_problem, CoefficientSet, Family, Point, Slot, Var};
use mfbsde::control::{ControlBox, ControlPath, ControlPolicy};
use mfbsde::grid::TimeGrid;
use mfbsde::noise::NoiseEnsemble;
use mfbsde::smp::{
    gradient_check, gradient_dvh, hamiltonian_vector, node_direction, optimize, sufficiency_probe,
    variational_inequality, variational_inequality_eval, HamiltonianStats, OptimizerParams, SufficiencyParams,
    Verdict,
};
use mfbsde::solver::{picard_solve, SolvedState, SolverParams};
use mfbsde::variational::{difference_quotient_check, solve_variational, LinearParams};

fn problem(name: &str, params: &[(&str, f64)]) -> Arc<dyn CoefficientSet> {
    let p: BTreeMap<String, f64> = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    builtin_problem(name, &p).unwrap()
}

fn solve(coeffs: &dyn CoefficientSet, u: &ControlPath, noise: &Arc<NoiseEnsemble>, x0: f64) -> SolvedState {
    let params = SolverParams {
        tolerance: 1e-12,
        ..SolverParams::default()
    };
    picard_solve(coeffs, &ControlPolicy::OpenLoop(u.clone()), noise, x0, &params).unwrap()
}

fn linear() -> LinearParams {
    LinearParams {
        tolerance: 1e-14,
        ..LinearParams::default()
    }
}

fn ramp(g: &TimeGrid) -> ControlPath {
    ControlPath::from_fn(g, |t| 0.5 + t)
}

#[test]
fn zero_direction_gives_zero_variation() {
    let (g, noise) = setup(1.0, 16, 256, 1);
    let coeffs = problem("coupled_sigma", &[]);
    let base = solve(&*coeffs, &ramp(&g), &noise, 1.0);
    let var = solve_variational(&*coeffs, &base, &ControlPath::zeros(&g, 1), &linear()).unwrap();
    assert!(var.is_zero());
    assert_eq!(variational_inequality_eval(&*coeffs, &base, &var).unwrap(), 0.0);
    let adj = solve_adjoint(&*coeffs, &base, &linear()).unwrap();
    let d = duality_check(&*coeffs, &base, &var, &adj).unwrap();
    assert_eq!(d.residual, 0.0);
}

#[test]
fn doubling_the_direction_doubles_the_variation_exactly() {
    let (g, noise) = setup(1.0, 16, 512, 2);
    let coeffs = problem("coupled_sigma", &[]);
    let base = solve(&*coeffs, &ramp(&g), &noise, 1.0);
    let v = ControlPath::from_fn(&g, |t| (3.0 * t).sin());
    let a = solve_variational(&*coeffs, &base, &v, &linear()).unwrap();
    let b = solve_variational(&*coeffs, &base, &v.scaled(2.0), &linear()).unwrap();
    for j in 0..512 {
        for (p, q) in a.x1(j).iter().zip(b.x1(j)).chain(a.y1(j).iter().zip(b.y1(j))) {
            assert_eq!(2.0 * p, *q);
        }
        for (p, q) in a.z1(j).iter().zip(b.z1(j)) {
            assert_eq!(2.0 * p, *q);
        }
    }
}

#[test]
fn variation_is_additive() {
    let (g, noise) = setup(1.0, 16, 512, 3);
    let coeffs = problem("coupled_sigma", &[]);
    let base = solve(&*coeffs, &ramp(&g), &noise, 1.0);
    let v1 = ControlPath::from_fn(&g, |t| t);
    let v2 = ControlPath::from_fn(&g, |t| 1.0 - t * t);
    let a = solve_variational(&*coeffs, &base, &v1, &linear()).unwrap();
    let b = solve_variational(&*coeffs, &base, &v2, &linear()).unwrap();
    let c = solve_variational(&*coeffs, &base, &v1.axpy(1.0, &v2).unwrap(), &linear()).unwrap();
    let scale = (0..512).flat_map(|j| c.y1(j).to_vec()).fold(0.0f64, |a, v| a.max(v.abs()));
    for j in 0..512 {
        for i in 0..=16 {
            assert!((a.x1_at(j, i) + b.x1_at(j, i) - c.x1_at(j, i)).abs() <= 1e-10 * scale.max(1.0));
            assert!((a.y1_at(j, i) + b.y1_at(j, i) - c.y1_at(j, i)).abs() <= 1e-10 * scale.max(1.0));
        }
    }
}

#[test]
fn control_free_dynamics_have_no_variation() {
    let (g, noise) = setup(1.0, 8, 64, 4);
    let coeffs = problem("quadratic_control", &[]);
    let base = solve(&*coeffs, &ControlPath::constant(&g, &[1.0]), &noise, 0.0);
    let var = solve_variational(&*coeffs, &base, &ControlPath::constant(&g, &[1.0]), &linear()).unwrap();
    assert!(var.is_zero());
}

/// Triple-loop starred operator: for each coefficient node `r`, path particle
/// `m` and kernel entry `s`, average over point particles and bin by the read node.
#[test]
fn starred_operator_matches_brute_force() {
    let (g, noise) = setup(1.0, 4, 16, 5);
    let kernel = |at: &Point, path: &mfbsde::law::PathView<'_>, out: &mut [f64]| {
        for (s, o) in out.iter_mut().enumerate() {
            *o = at.x * path.x(s) + (s as f64 + 1.0) * at.y - at.z * path.y(s);
        }
    };
    let coeffs = Toy::new()
        .constant(Family::Sigma, 1.0)
        .value(Family::Terminal, |p, _| p.x)
        .partial(Family::Terminal, Var::X, |_, _| 1.0)
        .kernel(Family::Driver, Slot::X, move |at, _, path, out| kernel(at, path, out))
        .kernel(Family::Driver, Slot::Y, move |at, _, path, out| kernel(at, path, out));
    let base = solve(&coeffs, &ControlPath::zeros(&g, 1), &noise, 0.3);
    let ens = &base.ensemble;
    let (m, n, dt) = (16, 4, g.dt());
    let w: Vec<f64> = (0..m * (n + 1)).map(|k| ((k * 7) % 11) as f64 / 11.0 - 0.4).collect();
    let params = LinearParams {
        tilde_particles: m,
        ..LinearParams::default()
    };
    for slot in [Slot::X, Slot::Y] {
        let got = compute_starred(&coeffs, &base, Family::Driver, slot, Some(&w), &params).unwrap();
        let mut raw = vec![0.0; m * n];
        for r in 0..n {
            for pm in 0..m {
                for s in 0..n {
                    let bin = if slot == Slot::Y { s.max(r) } else { s };
                    let mut acc = 0.0;
                    for j in 0..m {
                        // driver kernel: x·X_m(s) + (s+1)·y − z·Y_m(s ∨ r)
                        let k = ens.x_at(j, r) * ens.x_at(pm, s) + (s as f64 + 1.0) * ens.y_at(j, r)
                            - ens.z_at(j, r) * ens.y_at(pm, s.max(r));
                        acc += k * w[j * (n + 1) + r];
                    }
                    raw[pm * n + bin] += acc / m as f64 * dt;
                }
            }
        }
        for i in 0..n {
            let col: Vec<f64> = (0..m).map(|j| raw[j * n + i]).collect();
            let want = base.projectors.at(i).project(&col);
            for j in 0..m {
                let (a, b) = (got[j * n + i], want[j]);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{slot:?} node {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn point_free_hint_agrees_with_full_average() {
    let (g, noise) = setup(1.0, 8, 64, 6);
    let build = || {
        Toy::new()
            .constant(Family::Sigma, 1.0)
            .value(Family::Terminal, |p, _| p.x)
            .partial(Family::Terminal, Var::X, |_, _| 1.0)
            .partial(Family::RunningCost, Var::Y, |p, _| p.y)
            .kernel(Family::Driver, Slot::X, |_, _, path, out| {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = path.x(s).sin();
                }
            })
    };
    let (hinted, plain) = (build().point_free(), build());
    let base = solve(&plain, &ControlPath::zeros(&g, 1), &noise, 0.2);
    let params = LinearParams {
        tilde_particles: 64,
        ..LinearParams::default()
    };
    let p = solve_adjoint_p(&plain, &base, &params).unwrap();
    let a = compute_starred(&hinted, &base, Family::Driver, Slot::X, Some(&p), &params).unwrap();
    let b = compute_starred(&plain, &base, Family::Driver, Slot::X, Some(&p), &params).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}

#[test]
fn constant_running_costs_give_closed_form_p() {
    let c = 0.7;
    let (g, noise) = setup(1.0, 16, 64, 7);
    let ly = Toy::new().constant(Family::Sigma, 1.0).partial(Family::RunningCost, Var::Y, move |_, _| c);
    let base = solve(&ly, &ControlPath::zeros(&g, 1), &noise, 0.0);
    let p = solve_adjoint_p(&ly, &base, &LinearParams::default()).unwrap();
    for j in 0..64 {
        for i in 0..=16 {
            assert!((p[j * 17 + i] + c * g.time(i)).abs() <= 1e-12);
        }
    }
    let lz = Toy::new().constant(Family::Sigma, 1.0).partial(Family::RunningCost, Var::Z, move |_, _| c);
    let p = solve_adjoint_p(&lz, &base, &LinearParams::default()).unwrap();
    for j in 0..64 {
        let mut b = 0.0;
        for i in 0..=16 {
            assert!((p[j * 17 + i] + c * b).abs() <= 1e-12);
            if i < 16 {
                b += noise.increment(j, i);
            }
        }
    }
}

#[test]
fn terminal_only_costs_give_constant_q() {
    let (g, noise) = setup(1.0, 16, 64, 8);
    let phi = Toy::new().constant(Family::Sigma, 1.0).partial(Family::TerminalCost, Var::X, |_, _| 1.0);
    let base = solve(&phi, &ControlPath::zeros(&g, 1), &noise, 0.0);
    let adj = solve_adjoint(&phi, &base, &LinearParams::default()).unwrap();
    assert!(adj.terminal_exact);
    assert_eq!(adj.sweeps, 1);
    for j in 0..64 {
        assert!(adj.q(j).iter().all(|&q| (q - 1.0).abs() <= 1e-12));
        assert!(adj.k(j).iter().all(|&k| k.abs() <= 1e-12));
    }

    let c = 0.4;
    let coupled = Toy::new()
        .constant(Family::Sigma, 1.0)
        .partial(Family::Terminal, Var::X, |_, _| 1.0)
        .partial(Family::RunningCost, Var::Y, move |_, _| c);
    let p = solve_adjoint_p(&coupled, &base, &LinearParams::default()).unwrap();
    let (q, _) = solve_adjoint_qk(&coupled, &base, &p, &LinearParams::default()).unwrap();
    for v in q {
        assert!((v - c).abs() <= 1e-12);
    }
}

#[test]
fn duality_vanishes_for_the_quadratic_cost() {
    let (g, noise) = setup(1.0, 16, 256, 9);
    let coeffs = problem("quadratic_control", &[]);
    let base = solve(&*coeffs, &ramp(&g), &noise, 0.0);
    let var = solve_variational(&*coeffs, &base, &ControlPath::constant(&g, &[1.0]), &linear()).unwrap();
    let adj = solve_adjoint(&*coeffs, &base, &linear()).unwrap();
    let d = duality_check(&*coeffs, &base, &var, &adj).unwrap();
    assert_eq!((d.lhs, d.rhs, d.residual), (0.0, 0.0, 0.0));
}

#[test]
fn duality_holds_on_coupled_sigma() {
    let (g, noise) = setup(1.0, 32, 4096, 10);
    let coeffs = problem("coupled_sigma", &[]);
    let base = solve(&*coeffs, &ramp(&g), &noise, 1.0);
    let v = ControlPath::from_fn(&g, |t| 1.0 + t);
    let var = solve_variational(&*coeffs, &base, &v, &linear()).unwrap();
    let adj = solve_adjoint(&*coeffs, &base, &linear()).unwrap();
    let d = duality_check(&*coeffs, &base, &var, &adj).unwrap();
    assert!(d.residual <= 0.05, "{d:?}");
}

#[test]
fn quadratic_gradient_is_twice_the_control() {
    let (g, noise) = setup(1.0, 16, 128, 11);
    let coeffs = problem("quadratic_control", &[]);
    let u = ramp(&g);
    let base = solve(&*coeffs, &u, &noise, 0.0);
    let adj = solve_adjoint(&*coeffs, &base, &linear()).unwrap();
    let grad = gradient_dvh(&*coeffs, &base, &adj).unwrap();
    for i in 0..16 {
        assert!((grad.values.get(i, 0) - 2.0 * u.get(i, 0)).abs() <= 1e-12);
        assert_eq!(grad.stderr.get(i, 0), 0.0);
    }
    let vi = variational_inequality(&*coeffs, &base, &ControlPath::constant(&g, &[1.0]), &linear()).unwrap();
    let expect = grad.inner(&ControlPath::constant(&g, &[1.0]), g.dt());
    assert!((vi - expect).abs() <= 1e-12);
}

#[test]
fn variational_inequality_at_unit_control() {
    let (g, noise) = setup(2.0, 16, 64, 12);
    let coeffs = problem("quadratic_control", &[]);
    let u = ControlPath::constant(&g, &[1.0]);
    let base = solve(&*coeffs, &u, &noise, 0.0);
    let vi = variational_inequality(&*coeffs, &base, &u, &linear()).unwrap();
    assert!((vi - 4.0).abs() <= 1e-12);
}

#[test]
fn variational_inequality_matches_gradient_on_coupled_sigma() {
    let (g, noise) = setup(1.0, 32, 2048, 13);
    let coeffs = problem("coupled_sigma", &[]);
    let base = solve(&*coeffs, &ramp(&g), &noise, 1.0);
    let adj = solve_adjoint(&*coeffs, &base, &linear()).unwrap();
    let grad = gradient_dvh(&*coeffs, &base, &adj).unwrap();
    let v = ControlPath::from_fn(&g, |t| 1.0 - t);
    let vi = variational_inequality(&*coeffs, &base, &v, &linear()).unwrap();
    let inner = grad.inner(&v, g.dt());
    assert!((vi - inner).abs() <= 0.05 * inner.abs(), "{vi} vs {inner}");
}

#[test]
fn coupled_sigma_gradient_matches_finite_differences() {
    let (g, noise) = setup(1.0, 16, 4096, 14);
    let coeffs = problem("coupled_sigma", &[]);
    let solver = SolverParams {
        tolerance: 1e-13,
        ..SolverParams::default()
    };
    let dirs = vec![
        ("ones".to_string(), ControlPath::constant(&g, &[1.0])),
        ("node 3".to_string(), node_direction(&g, 1, 3, 0).unwrap()),
    ];
    let r = gradient_check(&*coeffs, &ramp(&g), &dirs, 1e-3, &noise, 1.0, &solver, &linear()).unwrap();
    assert!(r.max_rel_error <= 0.05, "{r:?}");
}

#[test]
fn difference_quotients_converge_at_first_order() {
    let (g, noise) = setup(1.0, 16, 1024, 15);
    let coeffs = problem("example_i", &[]);
    let solver = SolverParams {
        tolerance: 1e-13,
        ..SolverParams::default()
    };
    let v = ControlPath::from_fn(&g, |t| 1.0 + t);
    let r = difference_quotient_check(&*coeffs, &ramp(&g), &v, &[1e-1, 1e-2, 1e-3], &noise, 1.0, &solver, &linear())
        .unwrap();
    for slope in [r.slope_x, r.slope_y, r.slope_z] {
        assert!((0.8..=1.2).contains(&slope.unwrap()), "{r:?}");
    }
}

#[test]
fn hamiltonian_vector_is_componentwise() {
    let (g, noise) = setup(1.0, 4, 8, 16);
    let coeffs = Toy::new()
        .constant(Family::Driver, 2.0)
        .constant(Family::Sigma, 1.0)
        .constant(Family::RunningCost, 3.0)
        .constant(Family::Terminal, 4.0)
        .constant(Family::TerminalCost, 5.0);
    let base = solve(&coeffs, &ControlPath::zeros(&g, 1), &noise, 0.0);
    let stats = HamiltonianStats::at(&coeffs, &base.ensemble, 1);
    let at = Point::new(mfbsde::coefficients::Node { i: 1, t: g.time(1) }, 0.1, 0.2, 0.3);
    let h = hamiltonian_vector(&coeffs, &at, &stats, 0.5, 2.0);
    assert_eq!(h.values, [-2.0, 1.0, 3.0, -4.0, 5.0]);
    assert_eq!(h.weights, [0.5, 2.0, 1.0, 0.0, 0.0]);
    assert_eq!(h.contract(), -1.0 + 2.0 + 3.0);
    let zero = hamiltonian_vector(&Toy::new(), &at, &HamiltonianStats::default(), 1.0, 1.0);
    assert_eq!(zero.values, [0.0; 5]);
}

#[test]
fn optimizer_clamps_quadratic_to_lower_bound() {
    let (g, noise) = setup(1.0, 8, 32, 17);
    let coeffs = problem("quadratic_control", &[]);
    let bounds = ControlBox::interval(1.0, 2.0).unwrap();
    let r = optimize(
        &*coeffs,
        &ControlPath::constant(&g, &[1.5]),
        &bounds,
        &noise,
        0.0,
        &SolverParams::default(),
        &linear(),
        &OptimizerParams::default(),
    )
    .unwrap();
    assert!(r.converged);
    assert!(r.control.values().iter().all(|&u| (u - 1.0).abs() <= 1e-3));
    assert_eq!(r.stationarity.verdict, Verdict::Stationary);
    assert!(r.history.windows(2).all(|w| w[1].cost <= w[0].cost));
}

#[test]
fn optimizer_tracks_clamped_target() {
    let (g, noise) = setup(1.5, 24, 64, 18);
    let coeffs = problem("tracking_control", &[("c", 1.0)]);
    let bounds = ControlBox::interval(0.0, 1.0).unwrap();
    let params = OptimizerParams {
        tolerance: Some(1e-8),
        ..OptimizerParams::default()
    };
    let u0 = ControlPath::constant(&g, &[0.5]);
    let r = optimize(&*coeffs, &u0, &bounds, &noise, 0.0, &SolverParams::default(), &linear(), &params).unwrap();
    assert!(r.converged && r.history.len() <= 200);
    for i in 0..24 {
        assert!((r.control.get(i, 0) - g.time(i).min(1.0)).abs() <= 1e-3);
    }
    let check = mfbsde::smp::smp_stationarity_check(&r.control, &r.gradient, &bounds, 1e-6).unwrap();
    assert_eq!(check.verdict, Verdict::Stationary);
    let probe = sufficiency_probe(
        &*coeffs,
        &r.control,
        &bounds,
        &noise,
        0.0,
        &SolverParams::default(),
        &SufficiencyParams {
            samples: 8,
            ..SufficiencyParams::default()
        },
    )
    .unwrap();
    assert_eq!(probe.violations, 0);
    assert!(probe.convex_hamiltonian);
}

#[test]
fn zero_step_returns_initial_control() {
    let (g, noise) = setup(1.0, 8, 32, 19);
    let coeffs = problem("quadratic_control", &[]);
    let u0 = ControlPath::constant(&g, &[0.5]);
    let params = OptimizerParams {
        step: 0.0,
        ..OptimizerParams::default()
    };
    let r = optimize(
        &*coeffs,
        &u0,
        &ControlBox::unbounded(1),
        &noise,
        0.0,
        &SolverParams::default(),
        &linear(),
        &params,
    )
    .unwrap();
    assert_eq!(r.control, u0);
    assert!(!r.converged);
    assert_eq!(r.stationarity.verdict, Verdict::NotStationary);
}
