use morinkit::realroots::is_simple_root;
use morinkit::whitney::{
    construct_full_spread, rho_bound, witness_max_multiplicity, AxisBox, PointK, WhitneyMap,
};
use proptest::prelude::*;

const SOLVE_TOL: f64 = 1e-12;

proptest! {
    #[test]
    fn solve_honors_the_solution_budget(
        k in 1usize..=6,
        seed_t in -2.0f64..2.0,
        seed_params in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let map = WhitneyMap::new(k);
        let s = PointK::new(seed_t, seed_params[..k - 1].to_vec());
        let result = map.solve(&s, SOLVE_TOL).unwrap();
        prop_assert!(result.solutions.len() <= k + 1);

        for (sol, &resid) in result.solutions.iter().zip(&result.residuals) {
            // parameters pass through untouched, so the whole residual is in
            // the first coordinate
            let image = map.eval(sol).unwrap();
            let err = (image.t - s.t).abs();
            prop_assert!(err <= 1e-6 * s.t.abs().max(1.0), "residual {}", err);
            prop_assert!(resid <= 1e-6 * s.t.abs().max(1.0));
            prop_assert_eq!(&image.params, &s.params);
        }
    }

    #[test]
    fn regular_flags_agree_with_both_independent_checks(
        k in 1usize..=6,
        seed_t in -2.0f64..2.0,
        seed_params in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let map = WhitneyMap::new(k);
        let s = PointK::new(seed_t, seed_params[..k - 1].to_vec());
        let result = map.solve(&s, SOLVE_TOL).unwrap();
        let poly = map.reduced_polynomial(&s);
        for (sol, &flag) in result.solutions.iter().zip(&result.regular) {
            let slope = map.d_first_dt(sol).unwrap();
            // decide only outside the numerical gray zone; targets that land
            // a root exactly on a fold are legitimate ties
            if slope.abs() > 1e-5 {
                prop_assert!(flag, "slope {} but flagged critical", slope);
                prop_assert!(is_simple_root(&poly, sol.t, SOLVE_TOL).unwrap());
            } else if slope.abs() < 1e-10 {
                prop_assert!(!flag, "slope {} but flagged regular", slope);
            }
        }
    }

    #[test]
    fn perturbation_constructor_meets_its_contract(
        k in 1usize..=6,
        log_eps in -5.0f64..-1.0,
    ) {
        let eps = 10f64.powf(log_eps);
        let built = construct_full_spread(k, eps).unwrap();
        prop_assert_eq!(built.alphas.len(), k);
        for &a in &built.alphas {
            prop_assert!(a != 0.0 && a.abs() < eps, "alpha {} outside (0, {})", a, eps);
        }
        prop_assert_eq!(built.roots.len(), k + 1);
        let bound = (k as f64) * eps.sqrt();
        for w in built.roots.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        for &r in &built.roots {
            prop_assert!(r.abs() < bound);
            prop_assert!(r != 0.0);
        }
    }

    #[test]
    fn rho_dominates_roots_of_small_perturbations(
        k in 1usize..=5,
        log_eps in -4.0f64..-0.5,
        raw in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let eps = 10f64.powf(log_eps);
        let map = WhitneyMap::new(k);
        let bound = rho_bound(k, eps);
        prop_assert!(bound.rho <= bound.rough + 1e-15);

        // perturbation target with every coefficient under eps
        let s = PointK::new(raw[0] * eps, raw[1..k].iter().map(|&x| x * eps).collect());
        let result = map.solve(&s, SOLVE_TOL).unwrap();
        for sol in &result.solutions {
            prop_assert!(
                sol.t.abs() <= bound.rho + 1e-9,
                "root {} escapes rho {} (rough {})",
                sol.t, bound.rho, bound.rough
            );
        }
    }

    #[test]
    fn witness_points_survive_independent_reverification(
        k in 1usize..=4,
        log_du in -2.0f64..0.0,
        log_dv in -2.0f64..0.0,
    ) {
        let delta_u = 10f64.powf(log_du);
        let delta_v = 10f64.powf(log_dv);
        let map = WhitneyMap::new(k);
        let (s_hat, _) = witness_max_multiplicity(k, delta_u, delta_v).unwrap();
        prop_assert!(s_hat.sup_norm() < delta_v);
        let result = map.solve(&s_hat, SOLVE_TOL).unwrap();
        prop_assert_eq!(result.solutions.len(), k + 1);
        prop_assert!(result.certified_distinct);
        for (sol, &flag) in result.solutions.iter().zip(&result.regular) {
            prop_assert!(flag);
            prop_assert!(sol.sup_norm() < delta_u);
        }
    }

    #[test]
    fn fold_region_counts_flip_at_zero(
        s in -1.0f64..1.0,
    ) {
        // the order-1 map squares the line, so targets split by sign
        let map = WhitneyMap::new(1);
        let verdict = map.classify_region(&PointK::new(s, vec![]), SOLVE_TOL).unwrap();
        if s < -1e-12 {
            prop_assert_eq!(verdict.count, 0);
        } else if s > 1e-12 {
            prop_assert_eq!(verdict.count, 2);
            prop_assert_eq!(verdict.regular_count, 2);
        }
    }
}

#[test]
fn region_grid_is_deterministic_and_ordered() {
    let map = WhitneyMap::new(2);
    let bounds = AxisBox::cube(2, -1.0, 1.0);
    let a = map.region_grid(&bounds, 7, SOLVE_TOL).unwrap();
    let b = map.region_grid(&bounds, 7, SOLVE_TOL).unwrap();
    assert_eq!(a.len(), 49);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.count, y.count);
        assert_eq!(x.regular_count, y.regular_count);
        assert_eq!(x.s.t, y.s.t);
        assert_eq!(x.s.params, y.s.params);
    }
    // row-major: the first axis moves slowest
    assert_eq!(a[0].s.t, a[6].s.t);
    assert!(a[0].s.t < a[7].s.t);
}
