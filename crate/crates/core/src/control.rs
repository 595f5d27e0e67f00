//! Admissible controls: box-shaped control ranges and piecewise-constant
//! control functions with exact time shifts.
//!
//! Breakpoints are stored as integer ticks of `2^-30` s. Every shift is
//! quantized to the same tick grid, so shifting is an exact integer
//! relabeling and `shift(shift(u, t), s) == shift(u, t + s)` holds bit for bit
//! whenever `t` and `s` are tick multiples (all dyadic rationals with
//! denominators up to `2^30`, in particular every integer).

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ticks per second of the breakpoint clock.
pub const TICKS_PER_SECOND: i64 = 1 << 30;

const CONTAINMENT_SLACK: f64 = 1e-12;

pub fn seconds_to_ticks(t: f64) -> i64 {
    (t * TICKS_PER_SECOND as f64).round() as i64
}

pub fn ticks_to_seconds(ticks: i64) -> f64 {
    ticks as f64 / TICKS_PER_SECOND as f64
}

/// Box control range `u0 + rho * [-hw, hw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRange {
    center: DVector<f64>,
    half_widths: DVector<f64>,
    rho: f64,
}

impl ControlRange {
    pub fn new(center: DVector<f64>, half_widths: DVector<f64>, rho: f64) -> Result<Self> {
        if center.len() != half_widths.len() {
            return Err(Error::invalid("control range center and half-widths differ in length"));
        }
        if center.is_empty() {
            return Err(Error::invalid("control range must have at least one component"));
        }
        if half_widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("control half-widths must be finite and strictly positive"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("control center must be finite"));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0, 1], got {rho}")));
        }
        Ok(Self { center, half_widths, rho })
    }

    /// Symmetric box `[-w, w]^m`.
    pub fn symmetric(m: usize, w: f64) -> Result<Self> {
        Self::new(DVector::zeros(m), DVector::from_element(m, w), 1.0)
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::invalid("control bounds differ in length"));
        }
        let center = DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)));
        let hw = DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)));
        Self::new(center, hw, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn half_widths(&self) -> &DVector<f64> {
        &self.half_widths
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Effective half-widths `rho * hw`.
    pub fn effective_half_widths(&self) -> DVector<f64> {
        &self.half_widths * self.rho
    }

    pub fn lower(&self) -> DVector<f64> {
        &self.center - self.effective_half_widths()
    }

    pub fn upper(&self) -> DVector<f64> {
        &self.center + self.effective_half_widths()
    }

    /// Euclidean diameter of the effective box.
    pub fn diameter(&self) -> f64 {
        2.0 * self.effective_half_widths().norm()
    }

    pub fn contains(&self, value: &[f64]) -> bool {
        if value.len() != self.dim() {
            return false;
        }
        value.iter().enumerate().all(|(i, v)| {
            let r = self.rho * self.half_widths[i];
            let slack = CONTAINMENT_SLACK * (1.0 + r + self.center[i].abs());
            (v - self.center[i]).abs() <= r + slack
        })
    }

    pub fn contains_function(&self, u: &ControlFunction) -> bool {
        u.dim() == self.dim() && u.values().iter().all(|v| self.contains(v.as_slice()))
    }

    /// The `2^m` corners of the effective box, in binary order.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let m = self.dim();
        let lo = self.lower();
        let hi = self.upper();
        (0..1usize << m)
            .map(|mask| {
                DVector::from_iterator(
                    m,
                    (0..m).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }),
                )
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let lo = self.lower();
        let hi = self.upper();
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| rng.gen_range(lo[i]..=hi[i])))
    }
}

/// Range scaled by `rho` about its center: `u0 + rho (U - u0)`.
pub fn shrink_control_range(range: &ControlRange, rho: f64) -> Result<ControlRange> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    ControlRange::new(range.center.clone(), range.half_widths.clone(), range.rho * rho)
}

/// Piecewise-constant control. `values[i]` holds on `[knot[i-1], knot[i])`,
/// with the first and last values extended to `-inf` and `+inf`.
///
/// Adjacent pieces never carry identical values, so structural equality is
/// equality of functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFunction {
    knots: Vec<i64>,
    values: Vec<DVector<f64>>,
}

impl ControlFunction {
    pub fn constant(value: DVector<f64>) -> Self {
        Self { knots: Vec::new(), values: vec![value] }
    }

    /// Builds a control from breakpoint times (seconds) and `knots.len() + 1` values.
    pub fn piecewise(knots: &[f64], values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != knots.len() + 1 {
            return Err(Error::invalid(format!(
                "a control with {} breakpoints needs {} values, got {}",
                knots.len(),
                knots.len() + 1,
                values.len()
            )));
        }
        let ticks: Vec<i64> = knots.iter().map(|&t| seconds_to_ticks(t)).collect();
        if knots.iter().any(|t| !t.is_finite()) || ticks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("control breakpoints must be finite and strictly increasing"));
        }
        Self::from_ticks(ticks, values)
    }

    fn from_ticks(knots: Vec<i64>, values: Vec<DVector<f64>>) -> Result<Self> {
        let m = values[0].len();
        if m == 0 || values.iter().any(|v| v.len() != m) {
            return Err(Error::invalid("control values must share one positive dimension"));
        }
        if values.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("control values must be finite"));
        }
        let mut out_knots = Vec::with_capacity(knots.len());
        let mut out_values = Vec::with_capacity(values.len());
        let mut values = values.into_iter();
        out_values.push(values.next().expect("at least one value"));
        for (k, v) in knots.into_iter().zip(values) {
            if out_values.last() != Some(&v) {
                out_knots.push(k);
                out_values.push(v);
            }
        }
        Ok(Self { knots: out_knots, values: out_values })
    }

    /// Equally spaced pieces of length `piece` covering `[start, start + piece * values.len())`.
    pub fn uniform_pieces(start: f64, piece: f64, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.is_empty() || !(piece > 0.0) {
            return Err(Error::invalid("uniform pieces need a positive length and at least one value"));
        }
        let knots: Vec<f64> = (1..values.len()).map(|i| start + piece * i as f64).collect();
        Self::piecewise(&knots, values)
    }

    /// Random piecewise-constant control with uniform values in `range`.
    pub fn random<R: Rng + ?Sized>(
        range: &ControlRange,
        start: f64,
        piece: f64,
        pieces: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let values = (0..pieces.max(1)).map(|_| range.sample(rng)).collect();
        Self::uniform_pieces(start, piece, values)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn knot_ticks(&self) -> &[i64] {
        &self.knots
    }

    pub fn knots(&self) -> Vec<f64> {
        self.knots.iter().map(|&k| ticks_to_seconds(k)).collect()
    }

    pub fn is_constant(&self) -> bool {
        self.knots.is_empty()
    }

    /// `[t_min, t_max]` outside of which the control is constant, if any.
    pub fn window(&self) -> Option<(f64, f64)> {
        match (self.knots.first(), self.knots.last()) {
            (Some(&a), Some(&b)) => Some((ticks_to_seconds(a), ticks_to_seconds(b))),
            _ => None,
        }
    }

    /// Piece index active at time `t` (right-continuous).
    pub fn piece_index(&self, t: f64) -> usize {
        self.knots.partition_point(|&k| ticks_to_seconds(k) <= t)
    }

    pub fn eval(&self, t: f64) -> &DVector<f64> {
        &self.values[self.piece_index(t)]
    }

    /// Breakpoints strictly inside `(a, b)` (in either order), as seconds, ascending.
    pub fn knots_between(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let start = self.knots.partition_point(|&k| ticks_to_seconds(k) <= lo);
        self.knots[start..]
            .iter()
            .map(|&k| ticks_to_seconds(k))
            .take_while(move |&k| k < hi)
    }

    /// Shift flow `(theta_t u)(s) = u(t + s)`; `t` is quantized to the tick grid.
    pub fn shift(&self, t: f64) -> Self {
        self.shift_ticks(seconds_to_ticks(t))
    }

    pub fn shift_ticks(&self, ticks: i64) -> Self {
        Self {
            knots: self.knots.iter().map(|&k| k - ticks).collect(),
            values: self.values.clone(),
        }
    }

    /// Time reversal `s -> u(-s)` used for backward integration.
    pub fn reversed(&self) -> Self {
        Self {
            knots: self.knots.iter().rev().map(|&k| -k).collect(),
            values: self.values.iter().rev().cloned().collect(),
        }
    }

    /// Union of breakpoints with `other` and the piece values of both on each
    /// resulting interval.
    fn merged_pieces<'a>(&'a self, other: &'a Self) -> (Vec<i64>, Vec<(&'a DVector<f64>, &'a DVector<f64>)>) {
        let mut knots: Vec<i64> = self.knots.iter().chain(other.knots.iter()).copied().collect();
        knots.sort_unstable();
        knots.dedup();
        let mut pieces = Vec::with_capacity(knots.len() + 1);
        let (mut i, mut j) = (0usize, 0usize);
        pieces.push((&self.values[0], &other.values[0]));
        for &k in &knots {
            while i < self.knots.len() && self.knots[i] <= k {
                i += 1;
            }
            while j < other.knots.len() && other.knots[j] <= k {
                j += 1;
            }
            pieces.push((&self.values[i], &other.values[j]));
        }
        (knots, pieces)
    }

    /// `ess sup_t |u(t) - v(t)|` (Euclidean norm in the control space).
    pub fn sup_distance(&self, other: &Self) -> f64 {
        let (_, pieces) = self.merged_pieces(other);
        pieces.iter().map(|(a, b)| (*a - *b).norm()).fold(0.0, f64::max)
    }

    /// Piecewise data of `u - v` on the union of breakpoints, as seconds.
    pub(crate) fn difference_pieces(&self, other: &Self) -> (Vec<f64>, Vec<DVector<f64>>) {
        let (knots, pieces) = self.merged_pieces(other);
        (
            knots.into_iter().map(ticks_to_seconds).collect(),
            pieces.into_iter().map(|(a, b)| a - b).collect(),
        )
    }
}

/// `w_tau = (1 - tau) u + tau v` on the union of breakpoints.
pub fn convex_combination(u: &ControlFunction, v: &ControlFunction, tau: f64) -> Result<ControlFunction> {
    if u.dim() != v.dim() {
        return Err(Error::invalid("controls differ in dimension"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    if tau == 0.0 {
        return Ok(u.clone());
    }
    if tau == 1.0 {
        return Ok(v.clone());
    }
    let (knots, pieces) = u.merged_pieces(v);
    let values = pieces.into_iter().map(|(a, b)| a * (1.0 - tau) + b * tau).collect();
    ControlFunction::from_ticks(knots, values)
}
