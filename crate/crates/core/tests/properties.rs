use poisson_chaos::algebra::{g_hat_norm_bound, symmetrize, verify_contraction_identity};
use poisson_chaos::bounds::{pair_term_bound, CovMatrix};
use poisson_chaos::{DiscreteSpace, Kernel};
use proptest::prelude::*;

fn kernel_pair() -> impl Strategy<Value = (Kernel, Kernel)> {
    (2usize..=4, 1usize..=3, 1usize..=3).prop_flat_map(|(m, p, q)| {
        (
            prop::collection::vec(0.1f64..2.0, m),
            prop::collection::vec(-1.0f64..1.0, m.pow(p as u32)),
            prop::collection::vec(-1.0f64..1.0, m.pow(q as u32)),
        )
            .prop_map(move |(w, f, g)| {
                let s = DiscreteSpace::new(w).unwrap();
                let f = symmetrize(&Kernel::new(s.clone(), p, f).unwrap()).unwrap();
                let g = symmetrize(&Kernel::new(s, q, g).unwrap()).unwrap();
                (f, g)
            })
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetrize_is_idempotent_projection((f, _g) in kernel_pair()) {
        let s = symmetrize(&f).unwrap();
        prop_assert!(s.max_abs_diff(&f).unwrap() <= 1e-14);
        prop_assert!(s.norm() <= f.norm() + 1e-12);
    }

    #[test]
    fn contraction_identity_holds((f, g) in kernel_pair()) {
        let t = f.order().min(g.order());
        for s in 1..=t {
            let (a, b) = verify_contraction_identity(&f, &g, s, t).unwrap();
            prop_assert!(close(a, b), "s={s} t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn g_hat_estimate_and_levels_are_ordered((f, g) in kernel_pair(), a in -1.0f64..1.0) {
        let (p, q) = (f.order(), g.order());
        for k in p.abs_diff(q).max(1)..=(p + q).saturating_sub(2) {
            let (lhs, rhs) = g_hat_norm_bound(&f, &g, k).unwrap();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-14);
        }
        let l = pair_term_bound(&f, &g, a).unwrap();
        prop_assert!(l.level1 <= l.level2 * (1.0 + 1e-12) + 1e-14);
        prop_assert!(l.level2 <= l.level3 * (1.0 + 1e-12) + 1e-14);
    }

    #[test]
    fn jacobi_eigenvalues_reconstruct_trace_and_norm(v in prop::collection::vec(-2.0f64..2.0, 6)) {
        let c = CovMatrix::from_fn(3, |i, j| {
            let (a, b) = (i.min(j), i.max(j));
            v[a * 3 - a * (a + 1) / 2 + b]
        })
        .unwrap();
        let ev = c.eigenvalues();
        let trace: f64 = (0..3).map(|i| c.get(i, i)).sum();
        let fro: f64 = c.entries().iter().map(|x| x * x).sum();
        prop_assert!(close(ev.iter().sum(), trace));
        prop_assert!(close(ev.iter().map(|x| x * x).sum(), fro));
        prop_assert!(ev.windows(2).all(|w| w[0] <= w[1]));
    }
}
