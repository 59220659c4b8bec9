use morinkit::classify::{
    classify_point, invariance_check, sigma_map, t_map, ClassifyOptions, Label, NChain, VChain,
};
use morinkit::opcore::{Monomial, MapOracle, PolySpec};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn poly_oracle_strategy(dim: usize) -> impl Strategy<Value = PolySpec> {
    let monomial = (
        proptest::collection::vec(0u32..=2, dim),
        -2.0f64..2.0,
    )
        .prop_map(|(exps, coeff)| Monomial { exps, coeff })
        .prop_filter("derivative order budget", |m| {
            m.exps.iter().sum::<u32>() <= 5
        });
    proptest::collection::vec(proptest::collection::vec(monomial, 1..5), dim)
        .prop_map(move |components| PolySpec { dim, components })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // the mixed combination with the test chain set to the defining chain
    // must collapse onto the plain combination at every level; this pins
    // the two coefficient tables against each other
    #[test]
    fn t_collapses_onto_sigma_when_the_chains_coincide(
        dim in 2usize..5,
        seed in 0u64..1_000,
    ) {
        let spec_strategy = poly_oracle_strategy(dim);
        let mut runner = proptest::test_runner::TestRunner::deterministic();
        let spec = spec_strategy.new_tree(&mut runner).unwrap().current();
        let f = MapOracle::poly(spec).unwrap();

        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let u0: Vec<f64> = (0..dim).map(|_| 0.5 * next()).collect();
        let vectors: Vec<Vec<f64>> =
            (0..4).map(|_| (0..dim).map(|_| next()).collect()).collect();
        let nchain = NChain { vectors: vectors.clone() };
        let vchain = VChain { vectors };

        for k in 1..=4usize {
            let s = sigma_map(&f, &u0, &nchain, k).unwrap();
            let t = t_map(&f, &u0, &nchain, &vchain, k).unwrap();
            let scale = s.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (a, b) in s.iter().zip(&t) {
                prop_assert!(
                    (a - b).abs() <= 1e-8 * scale,
                    "level {} mismatch: {} vs {}", k, a, b
                );
            }
        }
    }

    #[test]
    fn whitney_points_with_nonzero_slope_classify_regular(
        k in 1usize..=4,
        t in 0.3f64..1.0,
        sign in proptest::bool::ANY,
    ) {
        let f = MapOracle::whitney(k);
        let mut u0 = vec![0.0; k];
        u0[0] = if sign { t } else { -t };
        // slope (k+1) t^k dominates at the chosen points since the
        // parameter entries vanish
        let (v, _, _) = classify_point(&f, &u0, &ClassifyOptions::default()).unwrap();
        prop_assert_eq!(v.label, Label::Regular);
    }

    #[test]
    fn verdicts_survive_chain_reparametrization(
        k in 2usize..=4,
        seed in 0u64..10_000,
    ) {
        let f = MapOracle::whitney(k);
        let u0 = vec![0.0; k];
        let opts = ClassifyOptions { seed, ..ClassifyOptions::default() };
        let report = invariance_check(&f, &u0, 8, &opts).unwrap();
        prop_assert!(report.labels_stable);
        prop_assert!(report.flags_stable);
    }

    // with the stage-1 pairing exactly zero the stage-2 pairing picks up
    // only the cubic factor of the kernel rescaling
    #[test]
    fn stage_two_pairing_scales_cubically(
        k in 2usize..=3,
        seed in 0u64..10_000,
    ) {
        let f = MapOracle::whitney(k);
        let u0 = vec![0.0; k];
        let opts = ClassifyOptions { seed, ..ClassifyOptions::default() };
        let report = invariance_check(&f, &u0, 6, &opts).unwrap();
        prop_assert_eq!(report.base_sigma_psis[0], 0.0);
        for trial in &report.trials {
            let a0 = trial.alphas[0];
            let expected = a0.powi(3) * report.base_sigma_psis[1];
            let got = trial.sigma_psis[1];
            prop_assert!(
                (got - expected).abs() <= 1e-8 * expected.abs().max(1.0),
                "alphas {:?}: {} vs {}", trial.alphas, got, expected
            );
        }
    }
}
