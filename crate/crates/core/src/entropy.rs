//! Invariance entropy: spanning-set counts `r_inv(tau, K, Q)` by set cover,
//! their exponential growth rate, and the unstable-determinant formula.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::ChainControlSet;
use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::flow::{exit_time, Observe, Stepper};
use crate::hyperbolic::{estimate_splitting, unstable_log_determinant, SplittingParams};
use crate::system::ControlAffineSystem;

fn in_box(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
}

/// Uniform grid with `per_axis` points per axis on the box `[lo, hi]`,
/// first axis varying fastest.
pub fn uniform_samples(lo: &[f64], hi: &[f64], per_axis: usize) -> Result<Vec<DVector<f64>>> {
    if lo.len() != hi.len() || per_axis == 0 || lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
        return Err(Error::invalid("sample box needs lo <= hi per axis and at least one point per axis"));
    }
    let n = lo.len();
    let coord = |i: usize, k: usize| {
        if per_axis == 1 {
            0.5 * (lo[i] + hi[i])
        } else {
            lo[i] + (hi[i] - lo[i]) * k as f64 / (per_axis - 1) as f64
        }
    };
    let total = per_axis.pow(n as u32);
    Ok((0..total)
        .map(|mut idx| {
            DVector::from_fn(n, |i, _| {
                let k = idx % per_axis;
                if i + 1 < n || n == 1 {
                    idx /= per_axis;
                }
                coord(i, k)
            })
        })
        .collect())
}

/// Sampled compact set `K` together with `Q` and, per sample, a control
/// keeping it in the inflated hull of `Q` over the probe horizon.
#[derive(Debug, Clone, Serialize)]
pub struct AdmissiblePair {
    pub k_samples: Vec<DVector<f64>>,
    pub q: ChainControlSet,
    pub witnesses: Vec<ControlFunction>,
    pub probe_horizon: f64,
    pub inflate: f64,
}

/// Constant control making `x` an equilibrium, if one exists in the range.
fn holding_control(sys: &ControlAffineSystem, x: &DVector<f64>) -> Option<DVector<f64>> {
    let n = sys.dim_n();
    let m = sys.dim_m();
    let fields = sys.fields();
    let mut f0 = vec![0.0; n];
    fields.field(0, x.as_slice(), &mut f0);
    let mut g = DMatrix::zeros(n, m);
    let mut col = vec![0.0; n];
    for i in 0..m {
        fields.field(i + 1, x.as_slice(), &mut col);
        g.set_column(i, &DVector::from_column_slice(&col));
    }
    let f0 = DVector::from_vec(f0);
    let u = g.clone().svd(true, true).solve(&(-&f0), 1e-12).ok()?;
    let residual = (&f0 + &g * &u).norm();
    (residual <= 1e-12 * (1.0 + f0.norm()) && sys.range().contains(u.as_slice())).then_some(u)
}

impl AdmissiblePair {
    /// Finds a witness for every sample: the constant control holding it at
    /// rest if there is one, otherwise the first pool member that keeps it in
    /// the inflated hull over `probe_horizon`.
    pub fn new(
        sys: &ControlAffineSystem,
        k_samples: Vec<DVector<f64>>,
        q: ChainControlSet,
        pool: &[ControlFunction],
        probe_horizon: f64,
        inflate: f64,
        step: f64,
    ) -> Result<Self> {
        if k_samples.is_empty() {
            return Err(Error::invalid("K needs at least one sample"));
        }
        if !(probe_horizon >= 0.0 && inflate >= 1.0) {
            return Err(Error::invalid("probe horizon must be nonnegative and inflate at least 1"));
        }
        let (lo, hi) = q.inflated_hull(inflate);
        let witnesses: Vec<Result<ControlFunction>> = k_samples
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                if !in_box(x.as_slice(), &lo, &hi) {
                    return Err(Error::invalid(format!("K sample {i} lies outside Q")));
                }
                let mut candidates: Vec<ControlFunction> = Vec::new();
                if let Some(u) = holding_control(sys, x) {
                    candidates.push(ControlFunction::constant(u));
                }
                for c in candidates.iter().chain(pool) {
                    let exit = exit_time(sys, x.as_slice(), c, 0.0, probe_horizon, step, |s| in_box(s, &lo, &hi))?;
                    if exit.is_none() {
                        return Ok(c.clone());
                    }
                }
                Err(Error::invalid(format!("K sample {i} has no admissible control; (K, Q) is not admissible")))
            })
            .collect();
        let witnesses = witnesses.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self { k_samples, q, witnesses, probe_horizon, inflate })
    }
}

/// Which candidates keep which samples in the inflated hull on `[0, tau]`:
/// `covers[c][s]`.
pub fn coverage(
    sys: &ControlAffineSystem,
    pair: &AdmissiblePair,
    tau: f64,
    candidates: &[ControlFunction],
    inflate: f64,
    step: f64,
) -> Result<Vec<Vec<bool>>> {
    Ok(coverage_at(sys, pair, &[tau], candidates, inflate, step)?.remove(0))
}

/// [`coverage`] at several horizons, `out[k][c][s]` for `taus[k]`, from one
/// trajectory per candidate and sample integrated through the sorted horizons.
pub fn coverage_at(
    sys: &ControlAffineSystem,
    pair: &AdmissiblePair,
    taus: &[f64],
    candidates: &[ControlFunction],
    inflate: f64,
    step: f64,
) -> Result<Vec<Vec<Vec<bool>>>> {
    if taus.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::invalid("horizons must be finite and nonnegative"));
    }
    let mut order: Vec<usize> = (0..taus.len()).collect();
    order.sort_by(|&i, &j| taus[i].total_cmp(&taus[j]));
    let (lo, hi) = pair.q.inflated_hull(inflate);
    let per_candidate: Vec<Vec<Vec<bool>>> = candidates
        .par_iter()
        .map(|c| {
            let mut rows = vec![vec![false; pair.k_samples.len()]; taus.len()];
            let mut stepper = Stepper::new(sys, 0);
            for (s, x) in pair.k_samples.iter().enumerate() {
                let mut state = x.as_slice().to_vec();
                sys.domain().wrap(&mut state);
                let mut t = 0.0;
                for &k in &order {
                    let mut left = false;
                    match stepper.advance(&mut state, c, t, taus[k], step, |_, y| {
                        if in_box(y, &lo, &hi) {
                            Observe::Continue
                        } else {
                            left = true;
                            Observe::Stop
                        }
                    }) {
                        Ok(_) => {}
                        Err(Error::Escape { .. }) => left = true,
                        Err(e) => return Err(e),
                    }
                    if left {
                        break;
                    }
                    rows[k][s] = true;
                    t = taus[k];
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok((0..taus.len()).map(|k| per_candidate.iter().map(|rows| rows[k].clone()).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverResult {
    /// Cover size, `None` when some sample is not covered by any candidate.
    pub count: Option<usize>,
    /// Chosen candidate indices in selection order.
    pub chosen: Vec<usize>,
    pub uncovered: Vec<usize>,
}

/// Greedy set cover: repeatedly takes the candidate covering the most
/// uncovered samples, ties to the lowest index.
pub fn greedy_cover(covers: &[Vec<bool>], samples: usize) -> CoverResult {
    let mut by_sample: Vec<Vec<usize>> = vec![Vec::new(); samples];
    let mut gain = vec![0usize; covers.len()];
    for (c, row) in covers.iter().enumerate() {
        for (s, _) in row.iter().enumerate().filter(|(_, b)| **b) {
            by_sample[s].push(c);
            gain[c] += 1;
        }
    }
    let uncovered: Vec<usize> = (0..samples).filter(|&s| by_sample[s].is_empty()).collect();
    let mut covered = vec![false; samples];
    let mut chosen = Vec::new();
    loop {
        let (best, g) = gain.iter().enumerate().fold((0, 0), |acc, (i, &g)| if g > acc.1 { (i, g) } else { acc });
        if g == 0 {
            break;
        }
        chosen.push(best);
        for s in 0..samples {
            if covers[best][s] && !covered[s] {
                covered[s] = true;
                for &c in &by_sample[s] {
                    gain[c] -= 1;
                }
            }
        }
    }
    let count = uncovered.is_empty().then_some(chosen.len());
    CoverResult { count, chosen, uncovered }
}

/// Minimum cover by exhaustive search; at most 24 candidates and 64 samples.
pub fn exact_cover(covers: &[Vec<bool>], samples: usize) -> Result<Option<usize>> {
    if covers.len() > 24 || samples > 64 {
        return Err(Error::invalid("exact cover is limited to 24 candidates and 64 samples"));
    }
    let full: u64 = if samples == 64 { u64::MAX } else { (1u64 << samples) - 1 };
    if samples == 0 {
        return Ok(Some(0));
    }
    let masks: Vec<u64> = covers
        .iter()
        .map(|c| c.iter().enumerate().filter(|(_, b)| **b).fold(0u64, |m, (i, _)| m | 1 << i))
        .collect();
    let mut best: Option<usize> = None;
    for subset in 1u32..(1u32 << masks.len()) {
        let size = subset.count_ones() as usize;
        if best.is_some_and(|b| size >= b) {
            continue;
        }
        let union = masks.iter().enumerate().filter(|(i, _)| subset >> i & 1 == 1).fold(0u64, |u, (_, m)| u | m);
        if union == full {
            best = Some(size);
        }
    }
    Ok(best)
}

/// Greedy estimate of `r_inv(tau, K, Q)` over a candidate pool.
pub fn r_inv_estimate(
    sys: &ControlAffineSystem,
    pair: &AdmissiblePair,
    tau: f64,
    candidates: &[ControlFunction],
    inflate: f64,
    step: f64,
) -> Result<CoverResult> {
    let covers = coverage(sys, pair, tau, candidates, inflate, step)?;
    Ok(greedy_cover(&covers, pair.k_samples.len()))
}

/// [`r_inv_estimate`] at every horizon in `taus`, sharing trajectories.
pub fn r_inv_counts(
    sys: &ControlAffineSystem,
    pair: &AdmissiblePair,
    taus: &[f64],
    candidates: &[ControlFunction],
    inflate: f64,
    step: f64,
) -> Result<Vec<CoverResult>> {
    let covers = coverage_at(sys, pair, taus, candidates, inflate, step)?;
    Ok(covers.iter().map(|c| greedy_cover(c, pair.k_samples.len())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square residual of the fit.
    pub residual: f64,
}

/// Least-squares slope of `log r` against `tau`.
pub fn h_inv_direct(taus: &[f64], counts: &[Option<usize>]) -> Result<SlopeFit> {
    if taus.len() != counts.len() {
        return Err(Error::invalid("one count per horizon is required"));
    }
    if let Some(i) = counts.iter().position(|c| c.is_none()) {
        return Err(Error::invalid(format!("entropy undefined: r_inv is infinite at tau = {}", taus[i])));
    }
    if taus.len() < 3 {
        return Err(Error::invalid("at least three horizons are required"));
    }
    let ys: Vec<f64> = counts.iter().map(|c| (c.unwrap() as f64).ln()).collect();
    let n = taus.len() as f64;
    let mx = taus.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = taus.iter().map(|t| (t - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("horizons must not all coincide"));
    }
    let sxy: f64 = taus.iter().zip(&ys).map(|(t, y)| (t - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (taus.iter().zip(&ys).map(|(t, y)| (y - intercept - slope * t).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SlopeFit { slope, intercept, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormulaEstimate {
    /// Smallest sampled rate; an upper estimate of the infimum over the lift.
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub argmin: usize,
}

/// `min over samples of (1 / tau) log |det d phi_tau|` restricted to `E+`.
pub fn h_inv_formula(
    sys: &ControlAffineSystem,
    lift_samples: &[(ControlFunction, DVector<f64>)],
    tau: f64,
    splitting: &SplittingParams,
) -> Result<FormulaEstimate> {
    if lift_samples.is_empty() {
        return Err(Error::invalid("at least one lift sample is required"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let per_sample = lift_samples
        .par_iter()
        .map(|(u, x)| {
            let sp = estimate_splitting(sys, u, x, splitting)?;
            Ok(unstable_log_determinant(sys, u, x, &sp.e_plus, tau, splitting.step)? / tau)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (argmin, value) = per_sample
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    Ok(FormulaEstimate { value, per_sample, argmin })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyEstimate {
    pub taus: Vec<f64>,
    pub r_counts: Vec<Option<usize>>,
    pub slope: Option<f64>,
    pub residual: Option<f64>,
    pub formula_value: f64,
    pub samples_used: usize,
}

/// Runs the direct and the formula estimator side by side.
pub fn estimate_entropy(
    sys: &ControlAffineSystem,
    pair: &AdmissiblePair,
    taus: &[f64],
    candidates: &[ControlFunction],
    inflate: f64,
    step: f64,
    lift_samples: &[(ControlFunction, DVector<f64>)],
    formula_tau: f64,
    splitting: &SplittingParams,
) -> Result<EntropyEstimate> {
    let r_counts: Vec<Option<usize>> =
        r_inv_counts(sys, pair, taus, candidates, inflate, step)?.into_iter().map(|r| r.count).collect();
    let fit = h_inv_direct(taus, &r_counts).ok();
    let formula = h_inv_formula(sys, lift_samples, formula_tau, splitting)?;
    Ok(EntropyEstimate {
        taus: taus.to_vec(),
        r_counts,
        slope: fit.map(|f| f.slope),
        residual: fit.map(|f| f.residual),
        formula_value: formula.value,
        samples_used: lift_samples.len(),
    })
}
