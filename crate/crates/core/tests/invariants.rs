mod common;

use std::sync::{Arc, OnceLock};

use hyperlift::chain::ChainControlSet;
use hyperlift::entropy::{coverage_at, exact_cover, h_inv_formula, uniform_samples, AdmissiblePair};
use hyperlift::hyperbolic::SplittingParams;
use hyperlift::system::Saddle2d;
use hyperlift::{convex_combination, flow_point, ControlAffineSystem, ControlFunction, ControlRange, Domain};
use nalgebra::{dvector, DVector};
use proptest::prelude::*;

use common::{chain_sets, scalar};

fn scalar_q() -> &'static (ControlAffineSystem, ChainControlSet) {
    static Q: OnceLock<(ControlAffineSystem, ChainControlSet)> = OnceLock::new();
    Q.get_or_init(|| {
        let sys = scalar(1.0);
        let q = chain_sets(&sys, 0.02, 0.04, 0.5).remove(0);
        (sys, q)
    })
}

fn saddle_control() -> impl Strategy<Value = ControlFunction> {
    (prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..6), -3i32..3).prop_map(|(values, start)| {
        let values = values.into_iter().map(|(a, b)| dvector![a, b]).collect();
        ControlFunction::uniform_pieces(start as f64, 0.5, values).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_is_a_cocycle(u in saddle_control(), x in (-1.0..1.0f64, -1.0..1.0f64), s in 0u32..8, t in 0u32..8) {
        let sys = ControlAffineSystem::new(
            Arc::new(Saddle2d { a: 1.0, b: 1.0 }),
            Domain::new_box(vec![-1e4, -1e4], vec![1e4, 1e4]).unwrap(),
            ControlRange::symmetric(2, 1.0).unwrap(),
        )
        .unwrap();
        let (s, t) = (s as f64 * 0.25, t as f64 * 0.25);
        let x = dvector![x.0, x.1];
        let direct = flow_point(&sys, &x, &u, 0.0, s + t, 0.01).unwrap();
        let mid = flow_point(&sys, &x, &u, 0.0, s, 0.01).unwrap();
        let composed = flow_point(&sys, &mid, &u.shift(s), 0.0, t, 0.01).unwrap();
        prop_assert!((&direct - composed).norm() < 1e-9 * (1.0 + direct.norm()));
    }

    #[test]
    fn shifts_compose(u in saddle_control(), a in -16i32..16, b in -16i32..16) {
        let (a, b) = (a as f64 * 0.125, b as f64 * 0.125);
        prop_assert_eq!(u.shift(a).shift(b), u.shift(a + b));
    }

    #[test]
    fn homotopy_path_ends_at_both_controls(u in saddle_control(), v in saddle_control()) {
        prop_assert_eq!(convex_combination(&u, &v, 0.0).unwrap().sup_distance(&u), 0.0);
        prop_assert!(convex_combination(&u, &v, 1.0).unwrap().sup_distance(&v) < 1e-15);
        let mid = convex_combination(&u, &v, 0.5).unwrap();
        prop_assert!((mid.sup_distance(&u) - 0.5 * u.sup_distance(&v)).abs() < 1e-12);
    }

    #[test]
    fn invariance_count_never_drops_with_longer_horizons(
        pool in prop::collection::vec(-0.6..0.6f64, 1..12),
        tau in 0.2..2.0f64,
        extra in 0.1..1.5f64,
    ) {
        let (sys, q) = scalar_q();
        let k = uniform_samples(&[-0.4], &[0.4], 8).unwrap();
        let pair = AdmissiblePair::new(sys, k, q.clone(), &[], 10.0, 1.0, 0.05).unwrap();
        let pool: Vec<ControlFunction> = pool.into_iter().map(|c| ControlFunction::constant(dvector![c])).collect();
        let covers = coverage_at(sys, &pair, &[tau, tau + extra], &pool, 1.0, 0.05).unwrap();
        let short = exact_cover(&covers[0], 8).unwrap();
        let long = exact_cover(&covers[1], 8).unwrap();
        for (a, b) in covers[1].iter().flatten().zip(covers[0].iter().flatten()) {
            prop_assert!(!a || *b);
        }
        match (short, long) {
            (Some(s), Some(l)) => prop_assert!(s <= l),
            (_, None) => {}
            (None, Some(_)) => prop_assert!(false, "a longer horizon cannot cover more"),
        }
    }

    #[test]
    fn more_candidates_never_raise_the_exact_count(
        pool in prop::collection::vec(-0.6..0.6f64, 2..14),
        split in 1usize..13,
        tau in 0.2..2.0f64,
    ) {
        let (sys, q) = scalar_q();
        let k = uniform_samples(&[-0.4], &[0.4], 8).unwrap();
        let pair = AdmissiblePair::new(sys, k, q.clone(), &[], 10.0, 1.0, 0.05).unwrap();
        let pool: Vec<ControlFunction> = pool.into_iter().map(|c| ControlFunction::constant(dvector![c])).collect();
        let covers = coverage_at(sys, &pair, &[tau], &pool, 1.0, 0.05).unwrap().remove(0);
        let part = exact_cover(&covers[..split.min(covers.len())], 8).unwrap();
        let all = exact_cover(&covers, 8).unwrap();
        if let Some(p) = part {
            prop_assert!(all.unwrap() <= p);
        }
    }

    #[test]
    fn formula_minimum_never_rises_with_more_samples(
        a in 0.5..3.0f64,
        first in prop::collection::vec(-0.5..0.5f64, 1..3),
        more in prop::collection::vec(-0.5..0.5f64, 1..3),
    ) {
        let sys = scalar(a);
        let params = SplittingParams { window: 6.0, ..SplittingParams::default() };
        let lift = |cs: &[f64]| -> Vec<(ControlFunction, DVector<f64>)> {
            cs.iter().map(|&c| (ControlFunction::constant(dvector![c]), dvector![-c / a])).collect()
        };
        let mut both = first.clone();
        both.extend(&more);
        let few = h_inv_formula(&sys, &lift(&first), 1.0, &params).unwrap();
        let many = h_inv_formula(&sys, &lift(&both), 1.0, &params).unwrap();
        prop_assert!(many.value <= few.value);
        prop_assert!((many.value - a).abs() < 1e-3);
    }
}
