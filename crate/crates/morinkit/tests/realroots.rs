//! Property tests for the root-counting kernel, checked against polynomials
//! assembled from known integer roots so every expectation has an
//! independent construction.

use morinkit::realroots::{real_roots, sturm_count, Polynomial};
use proptest::prelude::*;

fn distinct_roots() -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(-8i32..=8, 1..=6).prop_map(|mut v| {
        v.sort_unstable();
        v.dedup();
        v
    })
}

proptest! {
    #[test]
    fn recovers_products_of_linear_factors(roots in distinct_roots()) {
        let vals: Vec<f64> = roots.iter().map(|&r| r as f64).collect();
        let p = Polynomial::from_roots(&vals);
        let rs = real_roots(&p, 1e-10).unwrap();
        prop_assert_eq!(rs.roots.len(), vals.len());
        prop_assert!(rs.certified_distinct);
        for (found, expect) in rs.roots.iter().zip(vals.iter()) {
            prop_assert!((found - expect).abs() < 1e-8, "{} vs {}", found, expect);
        }
        for &s in &rs.simple_flags {
            prop_assert!(s);
        }
    }

    #[test]
    fn count_matches_known_root_placement(roots in distinct_roots()) {
        let vals: Vec<f64> = roots.iter().map(|&r| r as f64).collect();
        let p = Polynomial::from_roots(&vals);
        // interval that encloses every root, right endpoint on the largest root
        let lo = vals[0] - 1.0;
        let hi = *vals.last().unwrap();
        prop_assert_eq!(sturm_count(&p, lo, hi).unwrap(), vals.len());
        // left endpoint sits on the smallest root, which (a, b] excludes
        if vals.len() > 1 {
            prop_assert_eq!(sturm_count(&p, vals[0], hi).unwrap(), vals.len() - 1);
        }
    }

    #[test]
    fn scaling_leaves_roots_unchanged(
        roots in distinct_roots(),
        c in prop_oneof![(-1000.0..-0.001f64), (0.001..1000.0f64)],
    ) {
        let vals: Vec<f64> = roots.iter().map(|&r| r as f64).collect();
        let p = Polynomial::from_roots(&vals);
        let base = real_roots(&p, 1e-10).unwrap();
        let scaled = real_roots(&p.scale(c), 1e-10).unwrap();
        prop_assert_eq!(base.roots.len(), scaled.roots.len());
        for (a, b) in base.roots.iter().zip(scaled.roots.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn random_coefficients_satisfy_rootset_contract(
        coeffs in prop::collection::vec(-10.0..10.0f64, 2..=9),
    ) {
        let p = Polynomial::new(coeffs);
        prop_assume!(!p.is_zero() && p.degree() >= 1);
        let rs = match real_roots(&p, 1e-9) {
            Ok(rs) => rs,
            // ill-conditioned shrinker output may stall; that is an explicit
            // error, not a wrong answer, so it does not refute the property
            Err(_) => return Ok(()),
        };
        let scale = p.max_abs_coeff().max(1.0);
        for (&r, &res) in rs.roots.iter().zip(rs.residuals.iter()) {
            prop_assert!(res <= 1e-9 * scale * r.abs().max(1.0).powi(p.degree() as i32));
            prop_assert!((p.eval(r).abs() - res).abs() == 0.0);
        }
        for pair in rs.roots.windows(2) {
            prop_assert!(pair[0] < pair[1]);
        }
        if rs.certified_distinct {
            let b = p.cauchy_root_bound() + 1.0;
            prop_assert_eq!(sturm_count(&p, -b, b).unwrap(), rs.roots.len());
        }
    }

    #[test]
    fn repeated_factors_lower_the_simple_flag(
        root in -5i32..=5,
        mult in 2usize..=4,
        other in -5i32..=5,
    ) {
        prop_assume!(root != other);
        let mut vals = vec![root as f64; mult];
        vals.push(other as f64);
        let p = Polynomial::from_roots(&vals);
        let rs = real_roots(&p, 1e-8).unwrap();
        prop_assert_eq!(rs.roots.len(), 2);
        for (r, s) in rs.roots.iter().zip(rs.simple_flags.iter()) {
            if (r - root as f64).abs() < 0.5 {
                prop_assert!(!s, "repeated root {} flagged simple", r);
            } else {
                prop_assert!(s, "simple root {} flagged repeated", r);
            }
        }
    }
}
