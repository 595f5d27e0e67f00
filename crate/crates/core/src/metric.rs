//! Series metric on control space compatible with the weak* topology,
//!
//! `d(u, v) = sum_n 2^-n |I_n| / (1 + |I_n|)`, `I_n = int <u(t) - v(t), x_n(t)> dt`,
//!
//! evaluated against an enumerated family of box test functions, together
//! with the uniform shift bound relating sup-norm closeness to closeness of
//! all time shifts.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nalgebra::DVector;
use rand::Rng;

use crate::control::{ControlFunction, ControlRange};
use crate::error::{Error, Result};

/// Box test function `1_[start, end](t) * e_direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestFunction {
    pub start: f64,
    pub end: f64,
    pub direction: usize,
    /// `||x_n||_1`, equal to the support length.
    pub l1_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    /// Finest dyadic level: supports have length `2^-level` for `level <= max_level`.
    pub max_level: u32,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self { max_level: 8 }
    }
}

/// Enumerated box functions with dyadic supports in every unit direction.
///
/// Shell `s` lists, for each level `l = 0..=min(s, max_level)`, the interval
/// `[k 2^-l, (k + 1) 2^-l]` where `k` is the `(s - l)`-th integer in the order
/// `0, -1, 1, -2, 2, ...`, and each interval once per direction. The first
/// member is the indicator of `[0, 1]` in direction 0.
#[derive(Debug, Clone)]
pub struct TestFunctionFamily {
    control_dim: usize,
    config: FamilyConfig,
    members: Vec<TestFunction>,
}

fn zigzag(rank: u64) -> i64 {
    if rank.is_multiple_of(2) {
        (rank / 2) as i64
    } else {
        -(rank.div_ceil(2) as i64)
    }
}

/// Members cached at construction; longer prefixes are generated on demand.
const CACHED_MEMBERS: usize = 256;

fn enumerate_members(control_dim: usize, max_level: u32, count: usize) -> Vec<TestFunction> {
    let mut members = Vec::with_capacity(count + control_dim * (max_level as usize + 1));
    let mut shell = 0u64;
    while members.len() < count {
        for level in 0..=shell.min(max_level as u64) {
            let k = zigzag(shell - level);
            let width = (-(level as f64)).exp2();
            for direction in 0..control_dim {
                members.push(TestFunction {
                    start: k as f64 * width,
                    end: (k + 1) as f64 * width,
                    direction,
                    l1_norm: width,
                });
            }
        }
        shell += 1;
    }
    members.truncate(count);
    members
}

impl TestFunctionFamily {
    pub fn new(control_dim: usize, config: FamilyConfig) -> Result<Self> {
        if control_dim == 0 {
            return Err(Error::invalid("test functions need a positive control dimension"));
        }
        if config.max_level > 30 {
            return Err(Error::invalid("max_level above 30 exceeds the breakpoint resolution"));
        }
        let members = enumerate_members(control_dim, config.max_level, CACHED_MEMBERS);
        Ok(Self { control_dim, config, members })
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn config(&self) -> FamilyConfig {
        self.config
    }

    /// First `count` members; the 1-based member `n` sits at position `n - 1`.
    pub fn members(&self, count: usize) -> Cow<'_, [TestFunction]> {
        if count <= self.members.len() {
            Cow::Borrowed(&self.members[..count])
        } else {
            Cow::Owned(enumerate_members(self.control_dim, self.config.max_level, count))
        }
    }

    /// Hex SHA-256 of the family description, for comparing runs.
    pub fn config_hash(&self) -> String {
        let desc = format!("box-dyadic/m={}/max_level={}", self.control_dim, self.config.max_level);
        hex::encode(Sha256::digest(desc.as_bytes()))
    }
}

/// A truncated series value and the bound `2^-N` on the omitted tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distance {
    pub value: f64,
    pub tail_bound: f64,
}

/// `int_a^b w_j(t) dt` for a piecewise-constant `w` given by knots and values.
fn integrate_component(knots: &[f64], values: &[nalgebra::DVector<f64>], j: usize, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    let mut left = f64::NEG_INFINITY;
    for (i, v) in values.iter().enumerate() {
        let right = knots.get(i).copied().unwrap_or(f64::INFINITY);
        let lo = left.max(a);
        let hi = right.min(b);
        if hi > lo && v[j] != 0.0 {
            total += v[j] * (hi - lo);
        }
        left = right;
    }
    total
}

/// Truncation of the series metric after `n_terms` terms.
pub fn du_distance(
    u: &ControlFunction,
    v: &ControlFunction,
    family: &TestFunctionFamily,
    n_terms: usize,
) -> Result<Distance> {
    if u.dim() != v.dim() || u.dim() != family.control_dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: controls {} and {}, test family {}",
            u.dim(),
            v.dim(),
            family.control_dim()
        )));
    }
    if n_terms == 0 {
        return Err(Error::invalid("truncation must keep at least one term"));
    }
    let (knots, diffs) = u.difference_pieces(v);
    let mut value = 0.0;
    let mut weight = 1.0;
    for x in family.members(n_terms).iter() {
        weight *= 0.5;
        let integral = integrate_component(&knots, &diffs, x.direction, x.start, x.end).abs();
        value += weight * integral / (1.0 + integral);
    }
    Ok(Distance { value, tail_bound: weight })
}

/// Smallest `N` with `2^-N < eps / 2`.
pub fn tail_n_for_epsilon(eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    let mut n = 1usize;
    while (-(n as f64)).exp2() >= eps / 2.0 {
        n += 1;
    }
    Ok(n)
}

/// `max_{n <= N(eps)} ||x_n||_1`.
pub fn l1_constant(eps: f64, family: &TestFunctionFamily) -> Result<f64> {
    let n = tail_n_for_epsilon(eps)?;
    Ok(family.members(n).iter().map(|x| x.l1_norm).fold(0.0, f64::max))
}

/// `delta = eps / (2 c(eps))`: sup-norm closeness below `delta` keeps every
/// pair of time shifts within `eps` in the series metric.
pub fn delta_for_epsilon(eps: f64, family: &TestFunctionFamily) -> Result<f64> {
    let c = l1_constant(eps, family)?;
    delta_from_l1_constant(eps, c)
}

pub fn delta_from_l1_constant(eps: f64, c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("L1 constant must be positive, got {c}")));
    }
    Ok(eps / (2.0 * c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftSample {
    pub t: f64,
    pub d: f64,
}

/// Sampled sup over `t` of `d(theta_t u, theta_t v)`. A lower bound for the
/// true supremum.
#[derive(Debug, Clone, Serialize)]
pub struct SampledSup {
    pub value: f64,
    pub tail_bound: f64,
    pub sampled: bool,
    pub records: Vec<ShiftSample>,
}

pub fn sup_shift_distance(
    u: &ControlFunction,
    v: &ControlFunction,
    family: &TestFunctionFamily,
    n_terms: usize,
    t_samples: &[f64],
) -> Result<SampledSup> {
    if t_samples.is_empty() {
        return Err(Error::invalid("at least one shift time is required"));
    }
    let mut records = Vec::with_capacity(t_samples.len());
    let mut value: f64 = 0.0;
    let mut tail_bound = 0.0;
    for &t in t_samples {
        let d = du_distance(&u.shift(t), &v.shift(t), family, n_terms)?;
        value = value.max(d.value);
        tail_bound = d.tail_bound;
        records.push(ShiftSample { t, d: d.value });
    }
    Ok(SampledSup { value, tail_bound, sampled: true, records })
}

/// Random control `u` on `pieces` pieces of length `piece` from `start`, and
/// `v = u + p` with a piecewise perturbation of Euclidean size below `delta`.
pub fn near_pair<R: Rng + ?Sized>(
    range: &ControlRange,
    start: f64,
    piece: f64,
    pieces: usize,
    delta: f64,
    rng: &mut R,
) -> Result<(ControlFunction, ControlFunction)> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let u = ControlFunction::random(range, start, piece, pieces, rng)?;
    let m = range.dim();
    let values = u
        .values()
        .iter()
        .map(|a| {
            let dir = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let scale = 0.999 * delta * rng.gen::<f64>();
            let n = dir.norm();
            if n > 0.0 {
                a + dir * (scale / n)
            } else {
                a.clone()
            }
        })
        .collect();
    let v = ControlFunction::piecewise(&u.knots(), values)?;
    Ok((u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn family(m: usize) -> TestFunctionFamily {
        TestFunctionFamily::new(m, FamilyConfig::default()).unwrap()
    }

    #[test]
    fn enumeration_starts_with_unit_interval() {
        let f = family(2);
        let xs = f.members(6).to_vec();
        assert_eq!((xs[0].start, xs[0].end, xs[0].direction), (0.0, 1.0, 0));
        assert_eq!((xs[1].start, xs[1].end, xs[1].direction), (0.0, 1.0, 1));
        assert_eq!((xs[2].start, xs[2].end), (-1.0, 0.0));
        assert_eq!((xs[4].start, xs[4].end), (0.0, 0.5));
        assert!(xs.iter().all(|x| x.l1_norm > 0.0 && x.l1_norm == x.end - x.start));
        // enumeration is independent of how it was materialized
        let g = family(2);
        assert_eq!(g.members(400)[..40], g.members(40)[..]);
        assert_eq!(g.members(400)[..256], g.members(256)[..]);
        assert_eq!(f.config_hash(), g.config_hash());
    }

    #[test]
    fn distance_examples() {
        let f = family(1);
        let u = ControlFunction::piecewise(&[0.5], vec![dvector![0.2], dvector![-0.4]]).unwrap();
        assert_eq!(du_distance(&u, &u, &f, 20).unwrap().value, 0.0);
        let zero = ControlFunction::constant(dvector![0.0]);
        let zero_pieces = ControlFunction::shift(&zero, 3.0);
        assert_eq!(du_distance(&zero, &zero_pieces, &f, 20).unwrap().value, 0.0);
        let one = ControlFunction::constant(dvector![1.0]);
        let d = du_distance(&one, &zero, &f, 1).unwrap();
        assert_eq!(d.value, 0.25);
        assert_eq!(d.tail_bound, 0.5);
        assert!(du_distance(&one, &ControlFunction::constant(dvector![0.0, 0.0]), &f, 3).is_err());
    }

    #[test]
    fn tail_examples() {
        assert_eq!(tail_n_for_epsilon(0.1).unwrap(), 5);
        assert_eq!(tail_n_for_epsilon(0.5).unwrap(), 3);
        assert_eq!(tail_n_for_epsilon(1.0 - 1e-9).unwrap(), 2);
        assert!(tail_n_for_epsilon(0.0).is_err());
        assert!(tail_n_for_epsilon(1.0).is_err());
    }

    #[test]
    fn delta_formula() {
        let f = family(1);
        // the first five members have supports of length 1
        assert_eq!(l1_constant(0.1, &f).unwrap(), 1.0);
        assert_eq!(delta_for_epsilon(0.1, &f).unwrap(), 0.05);
        assert_eq!(delta_from_l1_constant(0.1, 2.0).unwrap(), 0.025);
        assert_eq!(delta_from_l1_constant(0.1, 1.0).unwrap(), 0.05);
        assert_eq!(delta_from_l1_constant(0.1, 4.0).unwrap(), 0.5 * delta_from_l1_constant(0.1, 2.0).unwrap());
    }

    #[test]
    fn sup_shift_examples() {
        let f = family(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let range = ControlRange::symmetric(1, 1.0).unwrap();
        let u = ControlFunction::random(&range, -2.0, 0.5, 8, &mut rng).unwrap();
        let v = ControlFunction::random(&range, -2.0, 0.5, 8, &mut rng).unwrap();
        let ts: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
        assert_eq!(sup_shift_distance(&u, &u, &f, 12, &ts).unwrap().value, 0.0);
        let single = sup_shift_distance(&u, &v, &f, 12, &[0.0]).unwrap();
        assert_eq!(single.value, du_distance(&u, &v, &f, 12).unwrap().value);
        assert!(sup_shift_distance(&u, &v, &f, 12, &[]).is_err());
    }

    #[test]
    fn step_one_bound_on_random_pairs() {
        let f = family(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let range = ControlRange::symmetric(2, 1.0).unwrap();
        let ts: Vec<f64> = (-16..=16).map(|i| i as f64 * 0.25).collect();
        for eps in [0.5, 0.1, 0.02] {
            let delta = delta_for_epsilon(eps, &f).unwrap();
            for _ in 0..20 {
                let (u, v) = near_pair(&range, -2.0, 0.5, 8, delta, &mut rng).unwrap();
                assert!(u.sup_distance(&v) < delta);
                let sup = sup_shift_distance(&u, &v, &f, 30, &ts).unwrap();
                assert!(sup.value < eps, "eps {eps}: {}", sup.value);
            }
        }
    }

    fn arb_control() -> impl Strategy<Value = ControlFunction> {
        (prop::collection::vec(-1.0f64..1.0, 1..6), -6i32..6).prop_map(|(vals, start)| {
            let values = vals.into_iter().map(|v| dvector![v]).collect();
            ControlFunction::uniform_pieces(start as f64 * 0.25, 0.75, values).unwrap()
        })
    }

    proptest! {
        #[test]
        fn pseudometric_axioms(u in arb_control(), v in arb_control(), w in arb_control(), n in 1usize..40) {
            let f = family(1);
            let uv = du_distance(&u, &v, &f, n).unwrap().value;
            let vu = du_distance(&v, &u, &f, n).unwrap().value;
            let uw = du_distance(&u, &w, &f, n).unwrap().value;
            let wv = du_distance(&w, &v, &f, n).unwrap().value;
            prop_assert_eq!(uv, vu);
            prop_assert!(uv <= uw + wv + 1e-12);
            prop_assert!((0.0..1.0).contains(&uv));
        }

        #[test]
        fn truncation_is_consistent(u in arb_control(), v in arb_control(), n in 1usize..30, extra in 1usize..10) {
            let f = family(1);
            let short = du_distance(&u, &v, &f, n).unwrap();
            let long = du_distance(&u, &v, &f, n + extra).unwrap();
            prop_assert!(long.value >= short.value - 1e-15);
            prop_assert!(long.value <= short.value + short.tail_bound + 1e-15);
        }
    }
}
