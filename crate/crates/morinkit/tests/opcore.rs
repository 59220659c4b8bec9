use morinkit::opcore::{
    bordered_solve, bordered_solve_relaxed, dirderiv, kernel_cokernel, range_test, MapOracle,
    Monomial, PolySpec, KERNEL_TOL, RANGE_IN_TOL,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn monomial(dim: usize) -> impl Strategy<Value = Monomial> {
    (
        prop::collection::vec(0u32..=5, dim),
        -2.0f64..2.0,
    )
        .prop_map(|(mut exps, coeff)| {
            // clamp total degree to 5 by zeroing excess from the right
            let mut budget = 5u32;
            for e in exps.iter_mut() {
                if *e > budget {
                    *e = budget;
                }
                budget -= *e;
            }
            Monomial { exps, coeff }
        })
}

fn poly_spec() -> impl Strategy<Value = PolySpec> {
    (1usize..=6).prop_flat_map(|dim| {
        prop::collection::vec(
            prop::collection::vec(monomial(dim), 1..=6),
            dim,
        )
        .prop_map(move |components| PolySpec { dim, components })
    })
}

proptest! {
    #[test]
    fn fd_jets_match_exact_on_random_polynomials(
        spec in poly_spec(),
        m in 1usize..=5,
        seed in 0u64..1_000_000,
    ) {
        let dim = spec.dim;
        let exact = MapOracle::poly(spec.clone()).unwrap();
        let spec_eval = spec.clone();
        let blind = MapOracle::from_fn(dim, move |u: &[f64]| {
            MapOracle::poly(spec_eval.clone()).unwrap().eval(u).unwrap()
        });

        // cheap deterministic point and directions from the seed
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let u: Vec<f64> = (0..dim).map(|_| next()).collect();
        let dirs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..dim).map(|_| next()).collect())
            .collect();

        let ex = dirderiv(&exact, &u, m, &dirs).unwrap();
        let fd = dirderiv(&blind, &u, m, &dirs).unwrap();
        let scale = ex.iter().fold(1.0f64, |s, &x| s.max(x.abs()));
        for (a, b) in ex.iter().zip(&fd) {
            prop_assert!(
                (a - b).abs() <= 1e-5 * scale,
                "order {} disagreement: exact {} vs fd {} (scale {})",
                m, a, b, scale
            );
        }
    }

    #[test]
    fn bordered_solve_inverts_on_the_range(
        entries in prop::collection::vec(-1.0f64..1.0, 36),
        xfree in prop::collection::vec(-1.0f64..1.0, 6),
        lift in -2.0f64..2.0,
    ) {
        let n = 6;
        // random Jacobian with an exactly one-dimensional kernel: factor a
        // random matrix, then rebuild with its smallest singular value zeroed
        let raw = DMatrix::from_vec(n, n, entries);
        let svd = raw.svd(true, true);
        let mut sv = svd.singular_values.clone();
        prop_assume!(sv[n - 2] > 1e-3); // keep the kernel separation healthy
        sv[n - 1] = 0.0;
        let u = svd.u.as_ref().unwrap();
        let v_t = svd.v_t.as_ref().unwrap();
        let a = u * DMatrix::from_diagonal(&sv) * v_t;

        let a_eval = a.clone();
        let f = MapOracle::from_fn(n, move |x: &[f64]| {
            (&a_eval * DVector::from_column_slice(x)).iter().copied().collect()
        });
        let kd = kernel_cokernel(&f, &vec![0.0; n], KERNEL_TOL).unwrap();

        // b constructed inside the range
        let x0 = DVector::from_column_slice(&xfree);
        let b = &a * &x0;
        let bv: Vec<f64> = b.iter().copied().collect();
        let x = bordered_solve(&kd, &bv).unwrap();
        let xv = DVector::from_column_slice(&x);
        let resid = (&a * &xv - &b).norm();
        prop_assert!(resid <= 1e-7 * b.norm().max(1.0), "residual {resid}");
        prop_assert!(xv.dot(&kd.n0).abs() <= 1e-9 * xv.norm().max(1.0));

        // lifting b out of the range lands in lambda, not in x
        let shifted: Vec<f64> = b
            .iter()
            .zip(kd.psi0.iter())
            .map(|(&bi, &pi)| bi + lift * pi)
            .collect();
        let (_, lambda) = bordered_solve_relaxed(&kd, &shifted).unwrap();
        prop_assert!((lambda - lift).abs() <= 1e-7 * lift.abs().max(1.0));
    }

    #[test]
    fn range_margin_is_scale_invariant_and_raw_is_linear(
        w in prop::collection::vec(-1.0f64..1.0, 3),
        c in 1.0f64..100.0,
    ) {
        let f = MapOracle::from_fn(3, |u: &[f64]| vec![0.0, u[1], u[2]]);
        let kd = kernel_cokernel(&f, &[0.0; 3], KERNEL_TOL).unwrap();
        let base = range_test(&kd, &w, RANGE_IN_TOL);
        let scaled_w: Vec<f64> = w.iter().map(|&x| c * x).collect();
        let scaled = range_test(&kd, &scaled_w, RANGE_IN_TOL);
        prop_assert!((scaled.raw - c * base.raw).abs() <= 1e-9 * (c * base.raw).max(1.0));
        // once norms exceed 1 the margin stops growing with the scale
        let wn = DVector::from_column_slice(&w).norm();
        if wn * c > 1.0 && wn > 1.0 {
            prop_assert!((scaled.margin - base.margin).abs() <= 1e-9 * base.margin.max(1e-12));
        }
    }
}

#[test]
fn kernel_matches_whitney_axis_for_all_small_orders() {
    for k in 1..=6 {
        let f = MapOracle::whitney(k);
        let kd = kernel_cokernel(&f, &vec![0.0; k], KERNEL_TOL).unwrap();
        assert!((kd.n0[0].abs() - 1.0).abs() < 1e-10, "k={k}");
        for j in 1..k {
            assert!(kd.n0[j].abs() < 1e-10, "k={k} component {j}");
        }
    }
}
