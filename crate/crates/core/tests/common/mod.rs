#![allow(dead_code)]

use std::sync::Arc;

use hyperlift::chain::{build_transition_graph, chain_control_sets, ChainControlSet, ChainParams, StateGrid};
use hyperlift::system::{Integrator, Saddle2d, ScalarAffine};
use hyperlift::{ControlAffineSystem, ControlFunction, ControlRange, Domain};
use nalgebra::{dvector, DVector};

pub fn scalar(a: f64) -> ControlAffineSystem {
    ControlAffineSystem::new(
        Arc::new(ScalarAffine { a }),
        Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
        ControlRange::symmetric(1, 1.0).unwrap(),
    )
    .unwrap()
}

pub fn saddle(a: f64, b: f64) -> ControlAffineSystem {
    ControlAffineSystem::new(
        Arc::new(Saddle2d { a, b }),
        Domain::new_box(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(),
        ControlRange::symmetric(2, 1.0).unwrap(),
    )
    .unwrap()
}

pub fn integrator() -> ControlAffineSystem {
    ControlAffineSystem::new(
        Arc::new(Integrator { n: 1 }),
        Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
        ControlRange::symmetric(1, 1.0).unwrap(),
    )
    .unwrap()
}

/// Chain control sets of `sys` on a uniform grid, largest first.
pub fn chain_sets(sys: &ControlAffineSystem, h: f64, eps: f64, t: f64) -> Vec<ChainControlSet> {
    let grid = StateGrid::uniform(sys.domain(), h).unwrap();
    let params = ChainParams { eps, transition_time: t, ..ChainParams::default() };
    chain_control_sets(&build_transition_graph(sys, &grid, &params).unwrap())
}

/// Pieces of a control as `(from, to, value)` in seconds, ends unbounded.
fn pieces(u: &ControlFunction) -> Vec<(f64, f64, DVector<f64>)> {
    let knots = u.knots();
    let mut bounds = vec![f64::NEG_INFINITY];
    bounds.extend(knots);
    bounds.push(f64::INFINITY);
    u.values().iter().enumerate().map(|(i, v)| (bounds[i], bounds[i + 1], v.clone())).collect()
}

/// `int_lo^hi e^{k s} ds` for finite results.
fn exp_integral(k: f64, lo: f64, hi: f64) -> f64 {
    let at = |s: f64| if s.is_infinite() { 0.0 } else { (k * s).exp() / k };
    at(hi) - at(lo)
}

/// Bounded solution of `x' = a x + u_1, y' = -b y + u_2` at time 0:
/// `x = -int_0^inf e^{-a s} u_1(s) ds`, `y = int_{-inf}^0 e^{b s} u_2(s) ds`.
pub fn saddle_fiber_point(u: &ControlFunction, a: f64, b: f64) -> DVector<f64> {
    let mut x = 0.0;
    let mut y = 0.0;
    for (lo, hi, v) in pieces(u) {
        if hi > 0.0 {
            x -= v[0] * exp_integral(-a, lo.max(0.0), hi);
        }
        if lo < 0.0 {
            y += v[1] * exp_integral(b, lo, hi.min(0.0));
        }
    }
    dvector![x, y]
}

/// Hausdorff distance between intervals `[a0, a1]` and `[b0, b1]`.
pub fn interval_hausdorff(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a0 - b0).abs().max((a1 - b1).abs())
}
