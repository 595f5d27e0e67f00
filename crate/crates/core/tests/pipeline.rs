mod common;

use std::sync::Arc;

use hyperlift::chain::{fiber, isolated_check, FiberParams, IsolationParams, StateGrid, build_transition_graph, ChainParams};
use hyperlift::entropy::{estimate_entropy, uniform_samples, AdmissiblePair};
use hyperlift::hyperbolic::{estimate_splitting, verify_rates, SplittingParams};
use hyperlift::metric::{FamilyConfig, TestFunctionFamily};
use hyperlift::shadow::{fiber_transport, homotopy_transport, TransportParams};
use hyperlift::system::BistableCubic;
use hyperlift::{ControlAffineSystem, ControlFunction, ControlRange, Domain};
use nalgebra::dvector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{chain_sets, interval_hausdorff, saddle, saddle_fiber_point, scalar};

const GRID_ROUNDING: f64 = 1e-12;

/// Root of `x - x^3 + u` in `[lo, hi]` by bisection.
fn cubic_root(u: f64, mut lo: f64, mut hi: f64) -> f64 {
    let f = |x: f64| x - x * x * x + u;
    assert!(f(lo) * f(hi) <= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn steeper_scalar_set_shrinks_to_one_over_a() {
    let sys = scalar(2.0);
    let sets = chain_sets(&sys, 0.01, 0.02, 0.5);
    assert_eq!(sets.len(), 1);
    let (lo, hi) = sets[0].hull();
    assert!(interval_hausdorff(lo[0], hi[0], -0.5, 0.5) <= 0.02 + GRID_ROUNDING, "{lo:?} {hi:?}");
}

#[test]
fn witnesses_replay_onto_their_edges() {
    let sys = saddle(1.0, 1.0);
    let grid = StateGrid::uniform(sys.domain(), 0.1).unwrap();
    let graph = build_transition_graph(&sys, &grid, &ChainParams { eps: 0.1, ..ChainParams::default() }).unwrap();
    let replay = graph.replay_witnesses(&sys).unwrap();
    assert!(replay.checked > 0);
    assert_eq!(replay.checked, replay.passed);
}

#[test]
fn bistable_sets_follow_equilibrium_branches() {
    let sys = ControlAffineSystem::new(
        Arc::new(BistableCubic),
        Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
        ControlRange::symmetric(1, 0.1).unwrap(),
    )
    .unwrap();
    let mut hulls: Vec<(f64, f64)> = chain_sets(&sys, 0.005, 0.01, 0.5)
        .iter()
        .map(|s| (s.hull().0[0], s.hull().1[0]))
        .collect();
    hulls.sort_by(|a, b| a.0.total_cmp(&b.0));
    let expected = [
        (cubic_root(-0.1, -1.5, -0.5), cubic_root(0.1, -1.5, -0.5)),
        (cubic_root(0.1, -0.5, 0.5), cubic_root(-0.1, -0.5, 0.5)),
        (cubic_root(-0.1, 0.5, 1.5), cubic_root(0.1, 0.5, 1.5)),
    ];
    assert_eq!(hulls.len(), 3, "{hulls:?}");
    for (got, want) in hulls.iter().zip(&expected) {
        assert!(interval_hausdorff(got.0, got.1, want.0, want.1) <= 0.02, "{got:?} vs {want:?}");
    }
}

#[test]
fn fiber_and_transport_agree_with_closed_form_for_unequal_rates() {
    let sys = saddle(1.0, 2.0);
    let q = chain_sets(&sys, 0.05, 0.05, 0.5).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v = ControlFunction::random(sys.range(), -5.0, 1.0, 10, &mut rng).unwrap();
    let want = saddle_fiber_point(&v, 1.0, 2.0);

    let f = fiber(&sys, &q, &v, &FiberParams::default()).unwrap();
    assert_eq!(f.points.len(), 1);
    assert!((&f.points[0] - &want).norm() < 1e-6, "{} vs {want}", f.points[0]);

    let family = TestFunctionFamily::new(2, FamilyConfig::default()).unwrap();
    let zero = ControlFunction::constant(dvector![0.0, 0.0]);
    let path = homotopy_transport(&sys, &q, &zero, &v, &dvector![0.0, 0.0], 0.5, &family, &TransportParams::default())
        .unwrap();
    assert!(path.completed, "{:?}", path.failure);
    assert!((path.endpoint().unwrap() - &want).norm() < 1e-6);
}

#[test]
fn nearby_control_transports_in_one_leg() {
    let sys = saddle(1.0, 1.0);
    let q = chain_sets(&sys, 0.05, 0.05, 0.5).remove(0);
    let u = ControlFunction::constant(dvector![0.1, 0.0]);
    let v = ControlFunction::constant(dvector![0.1, 0.05]);
    let x = saddle_fiber_point(&u, 1.0, 1.0);
    let t = fiber_transport(&sys, &q, &u, &v, &x, &TransportParams::default()).unwrap();
    assert!(t.contained);
    assert!((t.point - saddle_fiber_point(&v, 1.0, 1.0)).norm() < 1e-8);
}

#[test]
fn unequal_rates_give_exponents_and_minimal_rate() {
    let sys = saddle(2.0, 1.0);
    let u = ControlFunction::constant(dvector![0.4, -0.1]);
    let x = saddle_fiber_point(&u, 2.0, 1.0);
    let params = SplittingParams::default();
    let sp = estimate_splitting(&sys, &u, &x, &params).unwrap();
    assert_eq!((sp.dim_plus(), sp.dim_minus()), (1, 1));
    let offset = 1.0 / params.window;
    assert!((sp.exponents[0] - 2.0).abs() < offset && (sp.exponents[1] + 1.0).abs() < offset, "{:?}", sp.exponents);
    assert!((sp.lambda_est - 1.0).abs() < 1e-3);
    let times: Vec<f64> = (0..=10).map(|i| 0.5 * i as f64).collect();
    let fit = verify_rates(&sp, &sys, &times, 4, params.step).unwrap();
    assert!(fit.violations.is_empty(), "{:?}", fit.violations);
}

#[test]
fn saddle_set_looks_isolated() {
    let sys = saddle(1.0, 1.0);
    let q = chain_sets(&sys, 0.05, 0.05, 0.5).remove(0);
    let report = isolated_check(&sys, &q, &IsolationParams::default()).unwrap();
    assert!(report.heuristic);
    assert!(report.factors.iter().all(|f| f.counterexample.is_none()), "{:?}", report.factors);
}

#[test]
fn scalar_entropy_estimators_agree_roughly() {
    let sys = scalar(1.0);
    let q = chain_sets(&sys, 0.01, 0.02, 0.5).remove(0);
    let k = uniform_samples(&[-0.5], &[0.5], 201).unwrap();
    let pair = AdmissiblePair::new(&sys, k, q, &[], 10.0, 1.0, 0.05).unwrap();
    let pool: Vec<ControlFunction> =
        uniform_samples(&[-0.6], &[0.6], 2401).unwrap().into_iter().map(ControlFunction::constant).collect();
    let lift: Vec<_> = [-0.3, 0.3].iter().map(|&c| (ControlFunction::constant(dvector![c]), dvector![-c])).collect();
    let est = estimate_entropy(
        &sys,
        &pair,
        &[1.0, 2.0, 3.0, 4.0],
        &pool,
        1.0,
        0.05,
        &lift,
        1.0,
        &SplittingParams { window: 6.0, ..SplittingParams::default() },
    )
    .unwrap();
    let counts: Vec<usize> = est.r_counts.iter().map(|c| c.unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!((est.formula_value - 1.0).abs() < 1e-3);
    assert!((est.slope.unwrap() - 1.0).abs() < 0.3, "{counts:?}");
}
