use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use weakode::basis::{make_sine_basis, uniform_bspline_testfuncs, BSplineBasis, BoundaryFlags, KnotVector, Order};
use weakode::baselines::{nls_estimate, ts_estimate_curve, NlsInitial, NlsSettings, WeightFunction};
use weakode::conditions::{eval_conditions, BoundaryData, ConditionSet};
use weakode::lm::LmSettings;
use weakode::mc::{generate_data, Sampling};
use weakode::models::{model_by_name, ModelSpec};
use weakode::oc_estimator::{
    condition_covariance, estimate, estimate_on_curve, estimator_covariance, iterative_solve, linear_solve, OcSettings, WeightMatrix,
};
use weakode::odesim::{DenseSolution, SolverSettings};
use weakode::quadrature::{QuadratureRule, QuadratureSettings};
use weakode::smoother::{fit, hat_matrix};

fn exact_curve(m: &ModelSpec, theta: &[f64]) -> DenseSolution {
    let settings = SolverSettings {
        max_step: Some(1e-3),
        ..SolverSettings::default()
    };
    m.solve_dense(theta, &m.initial, m.interval.1, &settings).unwrap()
}

fn orthogonal(values: &[f64], n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::from_column_slice(n, n, &values[..n * n]);
    for i in 0..n {
        a[(i, i)] += 3.0;
    }
    a.qr().q()
}

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cfg(24))]

    #[test]
    fn sine_family_orthonormal_and_vanishing(l in 1usize..=30, a in -5.0f64..5.0, w in 0.1f64..20.0) {
        let basis = make_sine_basis(l, (a, a + w)).unwrap();
        let rule = QuadratureRule::composite(a, a + w, 64, 6).unwrap();
        let vals: Vec<Vec<f64>> = rule.nodes().iter().map(|&t| basis.eval(t, Order::Value).unwrap()).collect();
        for i in 0..l {
            for j in 0..l {
                let g: f64 = vals.iter().zip(rule.weights()).map(|(v, wt)| wt * v[i] * v[j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((g - target).abs() < 1e-10, "G[{i},{j}] = {g}");
            }
        }
        let scale = (2.0 / w).sqrt();
        for v in basis.eval(a, Order::Value).unwrap().into_iter().chain(basis.eval(a + w, Order::Value).unwrap()) {
            prop_assert!(v.abs() < 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn derivatives_match_finite_differences(l in 2usize..=12, s in 0.05f64..0.95, spline in any::<bool>()) {
        let domain = (0.5, 3.0);
        let basis = if spline {
            uniform_bspline_testfuncs(domain, l, 3, BoundaryFlags::NONE).unwrap()
        } else {
            make_sine_basis(l, domain).unwrap()
        };
        let t = domain.0 + s * (domain.1 - domain.0);
        let h = 1e-6;
        let value = basis.eval(t, Order::Value).unwrap();
        let deriv = basis.eval(t, Order::Derivative).unwrap();
        let (vp, vm) = (basis.eval(t + h, Order::Value).unwrap(), basis.eval(t - h, Order::Value).unwrap());
        let (ap, am) = (basis.eval(t + h, Order::Antiderivative).unwrap(), basis.eval(t - h, Order::Antiderivative).unwrap());
        let scale = deriv.iter().chain(&value).fold(1.0f64, |m, v| m.max(v.abs()));
        for k in 0..l {
            let fd = (vp[k] - vm[k]) / (2.0 * h);
            prop_assert!((fd - deriv[k]).abs() < 1e-5 * scale, "member {k}: derivative {} vs {fd}", deriv[k]);
            let fa = (ap[k] - am[k]) / (2.0 * h);
            prop_assert!((fa - value[k]).abs() < 1e-5 * scale, "member {k}: antiderivative slope {fa} vs {}", value[k]);
        }
    }

    #[test]
    fn integration_by_parts(l in 2usize..=10, coefs in prop::collection::vec(-2.0f64..2.0, 10), spline in any::<bool>()) {
        let domain = (0.0, 2.0);
        let phi = if spline {
            uniform_bspline_testfuncs(domain, l, 3, BoundaryFlags::NONE).unwrap()
        } else {
            make_sine_basis(l, domain).unwrap()
        };
        let g = BSplineBasis::new(KnotVector::uniform(domain.0, domain.1, 6, 3).unwrap());
        let c = &coefs[..g.len()];
        let mut breaks = g.knots().breakpoints();
        breaks.extend(phi.breakpoints());
        let rule = QuadratureRule::with_breaks(domain.0, domain.1, 40, 6, &breaks).unwrap();
        for k in 0..l {
            let mut total = 0.0;
            for (&t, &wt) in rule.nodes().iter().zip(rule.weights()) {
                let gv: f64 = g.eval(t, Order::Value).unwrap().iter().zip(c).map(|(b, c)| b * c).sum();
                let gd: f64 = g.eval(t, Order::Derivative).unwrap().iter().zip(c).map(|(b, c)| b * c).sum();
                total += wt * (gd * phi.eval_member(k, t, Order::Value).unwrap() + gv * phi.eval_member(k, t, Order::Derivative).unwrap());
            }
            prop_assert!(total.abs() < 1e-10, "member {k}: {total}");
        }
    }

    #[test]
    fn hat_matrix_is_symmetric_projection(knots in 1usize..10, n in 30usize..80, seed in 0u64..1000) {
        let m = model_by_name("fitzhugh_nagumo").unwrap();
        let obs = generate_data(&m, &m.true_params, n, 0.3, false, Sampling::Equispaced, seed, 0, &SolverSettings::default()).unwrap();
        let kv = KnotVector::uniform(m.interval.0, m.interval.1, knots, 3).unwrap();
        let sfit = fit(&obs, &kv, None).unwrap();
        let h = hat_matrix(&sfit);
        prop_assert!((&h - h.transpose()).amax() < 1e-10);
        prop_assert!((&h * &h - &h).amax() < 1e-9);
        prop_assert!((h.trace() - sfit.coefficient_count() as f64).abs() < 1e-8);
    }

    #[test]
    fn covariance_scales_quadratically(k in 0.1f64..10.0, seed in 0u64..1000) {
        let m = model_by_name("linear2d").unwrap();
        let obs = generate_data(&m, &m.true_params, 120, 0.1, false, Sampling::Equispaced, seed, 0, &SolverSettings::default()).unwrap();
        let sfit = fit(&obs, &KnotVector::uniform(m.interval.0, m.interval.1, 8, 3).unwrap(), None).unwrap();
        let scaled = sfit.clone().with_sigma2(sfit.sigma2().iter().map(|s| s * k * k).collect());
        let set = ConditionSet::new(m.clone(), make_sine_basis(6, m.interval).unwrap()).unwrap();
        let v1 = condition_covariance(&set.bind_fit(&sfit).unwrap(), &sfit, &m.true_params, None).unwrap();
        let v2 = condition_covariance(&set.bind_fit(&scaled).unwrap(), &scaled, &m.true_params, None).unwrap();
        prop_assert!((&v2 - &v1 * (k * k)).amax() <= 1e-10 * v2.amax());
    }

    #[test]
    fn raising_blow_up_bound_never_shortens(lo in 1.0f64..1e3, factor in 1.0f64..1e3, a in 0.3f64..1.0) {
        let m = model_by_name("ricatti").unwrap();
        let mut theta = m.true_params.clone();
        theta[0] = a;
        theta[1] = 0.09;
        let grid: Vec<f64> = (0..=200).map(|i| m.interval.0 + (m.interval.1 - m.interval.0) * i as f64 / 200.0).collect();
        let run = |bound: f64| {
            let settings = SolverSettings { blow_up_bound: bound, ..SolverSettings::default() };
            m.simulate(&theta, &m.initial, &grid, &settings).unwrap().blow_up
        };
        match (run(lo), run(lo * factor)) {
            (Some(t1), Some(t2)) => prop_assert!(t2 >= t1, "{t2} < {t1}"),
            (None, Some(t2)) => prop_assert!(false, "blow-up at {t2} only with the higher bound"),
            _ => {}
        }
    }

    #[test]
    fn rotated_test_basis_preserves_norm_and_trace(l in 3usize..9, q in prop::collection::vec(-1.0f64..1.0, 81), scale in 0.6f64..1.4) {
        let m = model_by_name("fitzhugh_nagumo").unwrap();
        let basis = uniform_bspline_testfuncs(m.interval, l, 3, BoundaryFlags::NONE).unwrap();
        let rot = orthogonal(&q, l);
        let set = ConditionSet::new(m.clone(), basis.clone()).unwrap();
        let set_r = ConditionSet::new(m.clone(), basis.rotated(&rot).unwrap()).unwrap();
        let obs = generate_data(&m, &m.true_params, 100, 0.1, false, Sampling::Equispaced, 5, 0, &SolverSettings::default()).unwrap();
        let sfit = fit(&obs, &KnotVector::uniform(m.interval.0, m.interval.1, 10, 3).unwrap(), None).unwrap();
        let (b, br) = (set.bind_fit(&sfit).unwrap(), set_r.bind_fit(&sfit).unwrap());
        let theta: Vec<f64> = m.true_params.iter().map(|v| v * scale).collect();
        let (e, er) = (b.eval(&theta).unwrap(), br.eval(&theta).unwrap());
        prop_assert!((e.norm() - er.norm()).abs() < 1e-8);
        // e stacks d blocks of L members, each block rotated the same way
        let d = m.dim();
        let mut big = DMatrix::zeros(d * l, d * l);
        for i in 0..d {
            big.view_mut((i * l, i * l), (l, l)).copy_from(&rot.transpose());
        }
        prop_assert!((&big * &e - &er).amax() < 1e-8);

        let v = condition_covariance(&b, &sfit, &theta, None).unwrap();
        let vr = condition_covariance(&br, &sfit, &theta, None).unwrap();
        let w = WeightMatrix::identity(e.len());
        let c = estimator_covariance(&theta, &b.jacobian(&theta).unwrap(), &v, &w, 0.95).covariance;
        let cr = estimator_covariance(&theta, &br.jacobian(&theta).unwrap(), &vr, &w, 0.95).covariance;
        prop_assert!((c.trace() - cr.trace()).abs() <= 1e-8 * c.trace().abs().max(1e-12));
        prop_assert!(c.symmetric_eigenvalues().min() >= -1e-12 * c.amax());
    }

    #[test]
    fn known_state_member_moves_linearly(delta in -0.5f64..0.5) {
        let m = model_by_name("fitzhugh_nagumo").unwrap();
        let curve = exact_curve(&m, &m.true_params);
        let x0 = m.initial.values().to_vec();
        let flags = BoundaryFlags { left: true, right: false };
        let basis = uniform_bspline_testfuncs(m.interval, 6, 3, flags).unwrap();
        let left = basis.left_member().unwrap();
        let eval = |shift: f64| {
            let mut supplied = x0.clone();
            supplied[0] += shift;
            let set = ConditionSet::with_data(m.clone(), basis.clone(), BoundaryData { left: Some(supplied), right: None }).unwrap();
            eval_conditions(&set, &curve, &[], &m.true_params).unwrap()
        };
        let (e0, e1, e2) = (eval(0.0), eval(delta), eval(2.0 * delta));
        prop_assert!(e0.amax() < 1e-6);
        // the first equation's left member is the only entry that moves
        let moved: Vec<usize> = (0..e1.len()).filter(|&i| (e1[i] - e0[i]).abs() > 1e-10).collect();
        if delta.abs() > 1e-6 {
            prop_assert_eq!(moved, vec![left]);
        }
        prop_assert!((e2[left] - e0[left] - 2.0 * (e1[left] - e0[left])).abs() < 1e-9);
    }

    #[test]
    fn linear_and_iterative_solutions_agree(seed in 0u64..1000, l in 4usize..12) {
        let m = model_by_name("linear2d").unwrap();
        let obs = generate_data(&m, &m.true_params, 150, 0.05, false, Sampling::Equispaced, seed, 0, &SolverSettings::default()).unwrap();
        let sfit = fit(&obs, &KnotVector::uniform(m.interval.0, m.interval.1, 10, 3).unwrap(), None).unwrap();
        let set = ConditionSet::new(m.clone(), make_sine_basis(l, m.interval).unwrap()).unwrap();
        prop_assert!(set.is_affine());
        let bound = set.bind_fit(&sfit).unwrap();
        let w = WeightMatrix::identity(bound.len());
        let closed = linear_solve(&bound, &m.true_params, &w).unwrap();
        let start: Vec<f64> = m.true_params.iter().map(|v| 0.8 * v).collect();
        let iter = iterative_solve(&bound, &start, &w, &LmSettings::default()).unwrap();
        for (a, b) in closed.iter().zip(&iter.theta) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn first_order_condition_at_optimum(seed in 0u64..1000, l in 3usize..10) {
        let m = model_by_name("ricatti").unwrap();
        let obs = generate_data(&m, &m.true_params, 200, 0.1, false, Sampling::Equispaced, seed, 0, &SolverSettings::default()).unwrap();
        let mut knots = KnotVector::uniform(m.interval.0, m.interval.1, 6, 3).unwrap();
        if let Some(tr) = m.field.discontinuities(&m.true_params).first() {
            knots = knots.with_extra_knots(&[*tr, *tr, *tr]).unwrap();
        }
        let sfit = fit(&obs, &knots, None).unwrap();
        let set = ConditionSet::new(m.clone(), make_sine_basis(l, m.interval).unwrap()).unwrap();
        let est = estimate(&set, &sfit, None, &OcSettings::default()).unwrap();
        let bound = set.bind_fit(&sfit).unwrap();
        let e = bound.eval(&est.theta).unwrap();
        let interior = est.theta.iter().enumerate().all(|(i, &v)| v > m.lower[i] + 1e-6 && v < m.upper[i] - 1e-6);
        if interior {
            let g = bound.jacobian(&est.theta).unwrap().transpose() * &e;
            prop_assert!(g.norm() <= 1e-8 * (1.0 + e.norm()), "‖Jᵀe‖ = {:.3e}", g.norm());
        }
    }

    #[test]
    fn affine_bias_vanishes(l in 2usize..=20, rate in -2.0f64..2.0) {
        let m = model_by_name("exponential").unwrap().with_true_params(vec![rate]).unwrap();
        let curve = exact_curve(&m, &m.true_params);
        let set = ConditionSet::new(m.clone(), make_sine_basis(l, m.interval).unwrap()).unwrap();
        let est = estimate_on_curve(&set, &curve, &[], None, &OcSettings::default()).unwrap();
        prop_assert!((est.theta[0] - rate).abs() <= 1e-6);
    }

    #[test]
    fn two_step_and_oc_agree_on_exact_curve(rate in -1.5f64..1.5) {
        let m = model_by_name("exponential").unwrap().with_true_params(vec![rate]).unwrap();
        let curve = exact_curve(&m, &m.true_params);
        let set = ConditionSet::new(m.clone(), make_sine_basis(5, m.interval).unwrap()).unwrap();
        let oc = estimate_on_curve(&set, &curve, &[], None, &OcSettings::default()).unwrap();
        let weight = WeightFunction::ramps(m.interval, 0.5).unwrap();
        let ts = ts_estimate_curve(&curve, &[], &m, &weight, &[0.0], QuadratureSettings::default(), &LmSettings::default()).unwrap();
        prop_assert!((oc.theta[0] - ts.theta[0]).abs() < 1e-5, "OC {} TS {}", oc.theta[0], ts.theta[0]);
    }
}

proptest! {
    #![proptest_config(cfg(8))]

    #[test]
    fn nls_objective_never_exceeds_a_start(seed in 0u64..1000) {
        let m = model_by_name("fitzhugh_nagumo").unwrap();
        let obs = generate_data(&m, &m.true_params, 60, 0.2, false, Sampling::Equispaced, seed, 0, &SolverSettings::default()).unwrap();
        let settings = NlsSettings { starts: 3, seed, ..NlsSettings::default() };
        let initial = NlsInitial::Known(m.initial.values().to_vec());
        let est = nls_estimate(&obs, &m, &initial, &m.true_params, &settings).unwrap();
        prop_assert_eq!(est.starts.len(), 3);
        for s in &est.starts {
            prop_assert!(est.objective <= s.objective * (1.0 + 1e-12), "{} > {}", est.objective, s.objective);
        }
        let again = nls_estimate(&obs, &m, &initial, &m.true_params, &settings).unwrap();
        prop_assert_eq!(
            est.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn oc_multistart_is_deterministic(seed in 0u64..1000) {
        let m = model_by_name("fitzhugh_nagumo").unwrap();
        let obs = generate_data(&m, &m.true_params, 100, 0.2, false, Sampling::Equispaced, seed, 0, &SolverSettings::default()).unwrap();
        let sfit = fit(&obs, &KnotVector::uniform(m.interval.0, m.interval.1, 10, 3).unwrap(), None).unwrap();
        let set = ConditionSet::new(m.clone(), make_sine_basis(6, m.interval).unwrap()).unwrap();
        let settings = OcSettings { extra_starts: 3, seed, ..OcSettings::default() };
        let a = estimate(&set, &sfit, None, &settings).unwrap();
        let b = estimate(&set, &sfit, None, &settings).unwrap();
        prop_assert_eq!(
            a.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn noiseless_intervals_cover(rate in -1.5f64..1.5) {
        let m = model_by_name("exponential").unwrap().with_true_params(vec![rate]).unwrap();
        let obs = generate_data(&m, &m.true_params, 100, 0.0, false, Sampling::Equispaced, 0, 0, &SolverSettings::default()).unwrap();
        let sfit = fit(&obs, &KnotVector::uniform(m.interval.0, m.interval.1, 6, 3).unwrap(), None).unwrap();
        let set = ConditionSet::new(m.clone(), make_sine_basis(5, m.interval).unwrap()).unwrap();
        let est = estimate(&set, &sfit, None, &OcSettings::default()).unwrap();
        prop_assert!(est.interval_covers(0, rate) || (est.theta[0] - rate).abs() < 1e-6);
    }
}

#[test]
fn rotation_rejects_sine_and_boundary_members() {
    let q = DMatrix::<f64>::identity(4, 4);
    assert!(make_sine_basis(4, (0.0, 1.0)).unwrap().rotated(&q).is_err());
    let flags = BoundaryFlags { left: true, right: false };
    assert!(uniform_bspline_testfuncs((0.0, 1.0), 4, 3, flags).unwrap().rotated(&q).is_err());
    let plain = uniform_bspline_testfuncs((0.0, 1.0), 4, 3, BoundaryFlags::NONE).unwrap();
    assert!(plain.rotated(&DMatrix::identity(3, 3)).is_err());
    let same = plain.rotated(&q).unwrap();
    let (a, b) = (plain.eval(0.3, Order::Value).unwrap(), same.eval(0.3, Order::Value).unwrap());
    assert_eq!(DVector::from_vec(a), DVector::from_vec(b));
}
