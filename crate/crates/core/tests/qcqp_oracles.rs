mod common;

use common::{projected_gradient, random_model, random_problem, Regime, TestRng};
use smpc_core::error::Error;
use smpc_core::linalg::{dot, solve_linear, symmetric_eigen, vadd, vsub, Lu, Mat};
use smpc_core::model::{lq_gain, precompute};
use smpc_core::qcqp::{kkt_residuals, min_constraint_value, solve, solve_mpc};
use smpc_core::SystemModel;

#[test]
fn random_instances_are_kkt_certified() {
    let mut rng = TestRng::new(100);
    let mut active = 0;
    for _ in 0..1000 {
        let n = 1 + rng.index(12);
        let full = rng.index(2) == 0;
        let p = random_problem(&mut rng, n, full, Regime::Any);
        let sol = solve(&p).unwrap();
        let kkt = kkt_residuals(&p, &sol.m, sol.lambda);
        assert!(kkt.certified(&p), "n = {n}: {kkt:?}");
        assert!(sol.constraint_value <= p.eps + 1e-9);
        if sol.active {
            active += 1;
            assert!(sol.lambda > 0.0);
        } else {
            assert_eq!(sol.lambda, 0.0);
        }
    }
    assert!(active > 300, "only {active} active instances");
}

#[test]
fn small_instances_match_projected_gradient() {
    let mut rng = TestRng::new(200);
    for i in 0..200 {
        let n = 1 + rng.index(4);
        let regime = if i % 4 == 0 {
            Regime::Inactive
        } else {
            Regime::Active
        };
        let p = random_problem(&mut rng, n, i % 3 != 0, regime);
        let sol = solve(&p).unwrap();
        let oracle = projected_gradient(&p);
        let j_oracle = p.objective(&oracle);
        assert!(
            (sol.objective - j_oracle).abs() <= 1e-5 * j_oracle.abs().max(1.0),
            "{} vs {j_oracle}",
            sol.objective
        );
        assert!(sol.objective <= j_oracle + 1e-9);
    }
}

#[test]
fn tightening_budget_raises_multiplier_and_cost() {
    let mut rng = TestRng::new(300);
    for _ in 0..50 {
        let n = 1 + rng.index(8);
        let base = random_problem(&mut rng, n, true, Regime::Active);
        let min_c = min_constraint_value(&base).unwrap();
        let m_u: Vec<f64> = solve_linear(&base.h, &base.h_lin)
            .unwrap()
            .iter()
            .map(|x| -x)
            .collect();
        let c_u = base.constraint(&m_u);
        let mut last = (0.0, f64::NEG_INFINITY);
        for j in 1..=10 {
            let mut p = base.clone();
            p.eps = c_u - (j as f64 / 10.5) * (c_u - min_c);
            let sol = solve(&p).unwrap();
            assert!(sol.active);
            assert!(sol.lambda >= last.0 - 1e-12);
            assert!(sol.objective >= last.1 - 1e-10);
            assert!((sol.constraint_value - p.eps).abs() <= 1e-8 * p.eps.abs().max(1.0));
            last = (sol.lambda, sol.objective);
        }
    }
}

#[test]
fn dual_function_is_monotone_along_path() {
    let mut rng = TestRng::new(301);
    for _ in 0..50 {
        let n = 1 + rng.index(8);
        let p = random_problem(&mut rng, n, false, Regime::Active);
        let m_at = |lambda: f64| {
            let k = &p.h + &p.g.scale(lambda);
            let rhs: Vec<f64> = p
                .h_lin
                .iter()
                .zip(&p.g_lin)
                .map(|(a, b)| a + lambda * b)
                .collect();
            Lu::new(&k)
                .unwrap()
                .solve(&rhs)
                .iter()
                .map(|v| -v)
                .collect::<Vec<f64>>()
        };
        let mut prev_c = f64::INFINITY;
        let mut prev_j = f64::NEG_INFINITY;
        for j in 0..40 {
            let m = m_at(0.01 * 1.5f64.powi(j));
            let (c, obj) = (p.constraint(&m), p.objective(&m));
            assert!(c <= prev_c + 1e-10 * c.abs().max(1.0));
            assert!(obj >= prev_j - 1e-10 * obj.abs().max(1.0));
            prev_c = c;
            prev_j = obj;
        }
    }
}

#[test]
fn infeasible_budget_is_reported() {
    let mut rng = TestRng::new(400);
    for _ in 0..100 {
        let n = 1 + rng.index(6);
        let full = rng.index(2) == 0;
        let mut p = random_problem(&mut rng, n, full, Regime::Any);
        let min_c = min_constraint_value(&p).unwrap();
        p.eps = min_c - 1e-3 - rng.uniform(0.0, 1.0);
        match solve(&p) {
            Err(Error::Infeasible { min_value, .. }) => {
                assert!((min_value - min_c).abs() <= 1e-12 * min_c.abs().max(1.0))
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}

#[test]
fn minimum_constraint_value_matches_grid_search() {
    let mut rng = TestRng::new(500);
    for case in 0..20 {
        let p = random_problem(&mut rng, 2, case % 2 == 0, Regime::Any);
        let min_c = min_constraint_value(&p).unwrap();
        // Centre the grid on an exact minimiser from the normal equations of
        // the full-rank part, then scan a fine grid around it.
        let (vals, vecs) = symmetric_eigen(&p.g).unwrap();
        let mut centre = vec![0.0; 2];
        for j in 0..2 {
            if vals[j] > 1e-9 * vals[1] {
                let v = [vecs[(0, j)], vecs[(1, j)]];
                let coef = -dot(&v, &p.g_lin) / vals[j];
                centre = vadd(&centre, &[coef * v[0], coef * v[1]]);
            }
        }
        let mut best = f64::INFINITY;
        let steps = 400;
        for a in 0..=steps {
            for b in 0..=steps {
                let m = [
                    centre[0] + 2.0 * (a as f64 / steps as f64 - 0.5),
                    centre[1] + 2.0 * (b as f64 / steps as f64 - 0.5),
                ];
                best = best.min(p.constraint(&m));
            }
        }
        assert!(best >= min_c - 1e-10, "grid {best} below {min_c}");
        let curvature = vals[1];
        assert!(best - min_c <= curvature * 2.0 * (1.0 / steps as f64).powi(2) + 1e-10);
    }
}

/// Finite-horizon Riccati recursion from the terminal weight; returns the
/// first-stage gain.
fn finite_horizon_gain(model: &SystemModel, terminal: &Mat) -> Mat {
    let mut p = terminal.clone();
    let mut gain = Mat::zeros(model.nu(), model.nx());
    let bt = model.b.transpose();
    for _ in 0..model.horizon {
        let s = &model.r + &(&bt * &(&p * &model.b));
        gain = -&Lu::new(&s).unwrap().solve_mat(&(&bt * &(&p * &model.a)));
        let closed = &model.a + &(&model.b * &gain);
        p = &(&(&closed.transpose() * &p) * &closed)
            + &(&(&(&gain.transpose() * &model.r) * &gain) + &model.q);
    }
    gain
}

#[test]
fn unconstrained_first_input_follows_riccati_recursion() {
    let mut rng = TestRng::new(600);
    let mut models = vec![SystemModel::example_system()];
    models.extend((0..10).map(|_| random_model(&mut rng)));
    for model in models {
        let pre = precompute(&model).unwrap();
        let gain = finite_horizon_gain(&model, &pre.p);
        for _ in 0..5 {
            let x = rng.vec(model.nx(), 1.0);
            let sol = solve_mpc(&x, 1e12, &pre, &model).unwrap();
            assert!(!sol.active);
            let expect = vadd(&model.u_ref, &gain.matvec(&vsub(&x, &model.x_ref)));
            for (a, b) in sol.first_input().iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn unconstrained_first_input_is_lq_law_at_lq_gain() {
    let mut model = SystemModel::example_system();
    let (k_lq, _) = lq_gain(&model).unwrap();
    model.k = k_lq.clone();
    let pre = precompute(&model).unwrap();
    let mut rng = TestRng::new(601);
    for _ in 0..20 {
        let x = rng.vec(2, 1.0);
        let sol = solve_mpc(&x, 1e12, &pre, &model).unwrap();
        let expect = model.u_ref[0] + k_lq.matvec(&vsub(&x, &model.x_ref))[0];
        assert!((sol.first_input()[0] - expect).abs() <= 1e-8);
    }
}
