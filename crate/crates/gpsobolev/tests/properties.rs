//! Property tests for the structural invariants: norm homogeneity, stencil
//! algebra, enumeration stability, kernel symmetry, moment-constant bounds.

use gpsobolev::finitediff::DifferenceStencil;
use gpsobolev::grid::{
    build_grid, enumerate_multi_indices, lp_norm, BoxDomain, GridFunction, MultiIndex,
    QuadratureRule,
};
use gpsobolev::kernels;
use gpsobolev::sampler::c_p;
use proptest::prelude::*;
use std::sync::Arc;

fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut v = 1usize;
    for j in 0..k.min(n - k) {
        v = v * (n - j) / (j + 1);
    }
    v
}

proptest! {
    #[test]
    fn lp_norm_is_absolutely_homogeneous(
        values in prop::collection::vec(-100.0f64..100.0, 16),
        c in -10.0f64..10.0,
        p in 1.0f64..4.0,
    ) {
        let grid = Arc::new(
            build_grid(BoxDomain::interval(0.0, 1.0).unwrap(), 16, QuadratureRule::Midpoint, 0.0)
                .unwrap(),
        );
        let u = GridFunction::new(grid.clone(), values.clone()).unwrap();
        let scaled = GridFunction::new(grid, values.iter().map(|v| c * v).collect()).unwrap();
        let lhs = lp_norm(&scaled, p).unwrap();
        let rhs = c.abs() * lp_norm(&u, p).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
    }

    #[test]
    fn stencils_annihilate_constants(
        a1 in 0usize..4,
        a2 in 0usize..4,
        h1 in 0.01f64..0.5,
        h2 in 0.01f64..0.5,
        level in -5.0f64..5.0,
    ) {
        prop_assume!(a1 + a2 >= 1);
        let alpha = MultiIndex::new(vec![a1, a2]);
        let s = DifferenceStencil::new(&alpha, &[h1, h2]).unwrap();
        let v = s.apply_to(&[0.3, -0.4], |_| Ok(level)).unwrap();
        let amp = level.abs().max(1.0) / (s.norm);
        prop_assert!(v.abs() <= 1e-10 * amp.max(1.0), "delta of constant = {v}");
    }

    #[test]
    fn multi_index_enumeration_counts(d in 1usize..=3, m in 0usize..=4) {
        let e = enumerate_multi_indices(d, m);
        prop_assert_eq!(e.len(), binom(d + m, m));
        // lexicographic, no duplicates, all orders bounded by m
        for w in e.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(e.iter().all(|a| a.order() <= m));
        // bit-stable across calls
        prop_assert_eq!(e, enumerate_multi_indices(d, m));
    }

    #[test]
    fn kernel_evaluations_are_symmetric(
        x in prop::collection::vec(-2.0f64..2.0, 2),
        y in prop::collection::vec(-2.0f64..2.0, 2),
        l in 0.3f64..2.0,
    ) {
        for k in [
            kernels::squared_exponential(2, l).unwrap(),
            kernels::matern(1.5, l, 2).unwrap(),
            kernels::matern(2.5, l, 2).unwrap(),
        ] {
            prop_assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
        }
    }

    #[test]
    fn gaussian_moments_satisfy_cauchy_schwarz(p in 1.0f64..16.0) {
        // E|X|^p <= sqrt(E|X|^(2p))
        let lhs = c_p(p).unwrap();
        let rhs = c_p(2.0 * p).unwrap().sqrt();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12), "C_p = {lhs}, sqrt(C_2p) = {rhs}");
    }

    #[test]
    fn counter_rng_is_a_pure_function(seed in any::<u64>(), path in 0u64..1000, mode in 0u64..64) {
        let a = gpsobolev::sampler::normal_variate(seed, path, mode);
        let b = gpsobolev::sampler::normal_variate(seed, path, mode);
        prop_assert_eq!(a, b);
        prop_assert!(a.is_finite());
    }
}
