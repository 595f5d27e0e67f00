//! Finite-window estimates of the splitting `E+ (+) E-` along lifted
//! trajectories, its projection, rate constants and unstable volume growth.
//!
//! `E+` at `(u, x)` is the dominant subspace of `d phi` pulled forward from
//! time `-W`; `E-` is the dominant subspace of the time-reversed flow pulled
//! back from `+W`. Frames are re-orthonormalized at a fixed interval, and the
//! diagonal of the triangular factors accumulates the finite-time exponents.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::flow::{flow_point, flow_with_derivative, Observe, Stepper};
use crate::system::ControlAffineSystem;
use crate::util::item_rng;

const RATE_STREAM: u64 = 0x7261_7465;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplittingParams {
    /// Half-length `W` of the window `[-W, W]` (s).
    pub window: f64,
    pub step: f64,
    /// Exponents with absolute value below this (1/s) signal a center direction.
    pub gap_tol: f64,
    /// Re-orthonormalization interval (s).
    pub reorth: f64,
    /// Sample times for the rate fit, evenly spaced on `[0, W / 2]`; beyond
    /// that, the error of the estimated `E-` grows back to the order of the
    /// signal.
    pub rate_times: usize,
    /// Unit vectors per side for the rate fit, besides the basis vectors.
    pub rate_vectors: usize,
}

impl Default for SplittingParams {
    fn default() -> Self {
        Self { window: 12.0, step: 0.01, gap_tol: 0.1, reorth: 1.0, rate_times: 20, rate_vectors: 4 }
    }
}

/// Splitting at the base point `(control, point)`.
///
/// `projection` maps onto `E-` along `E+`. The discrete constants for the
/// time-one map are `big_c_est = 1 / c_est` and `mu_est = exp(-lambda_est)`.
#[derive(Debug, Clone, Serialize)]
pub struct HyperbolicSplitting {
    pub control: ControlFunction,
    pub point: DVector<f64>,
    /// Orthonormal columns.
    pub e_plus: DMatrix<f64>,
    /// Orthonormal columns.
    pub e_minus: DMatrix<f64>,
    pub projection: DMatrix<f64>,
    /// Finite-time exponents over `[-W, 0]`, descending.
    pub exponents: Vec<f64>,
    pub c_est: f64,
    pub lambda_est: f64,
    pub big_c_est: f64,
    pub mu_est: f64,
}

impl HyperbolicSplitting {
    pub fn dim_plus(&self) -> usize {
        self.e_plus.ncols()
    }

    pub fn dim_minus(&self) -> usize {
        self.e_minus.ncols()
    }

    /// Projection onto `E+` along `E-`.
    pub fn projection_plus(&self) -> DMatrix<f64> {
        DMatrix::identity(self.point.len(), self.point.len()) - &self.projection
    }

    /// `||P^2 - P||` in the operator norm.
    pub fn idempotency_defect(&self) -> f64 {
        operator_norm(&(&self.projection * &self.projection - &self.projection))
    }
}

/// End state of a tangent frame carried along a trajectory.
#[derive(Debug, Clone)]
pub struct FrameTransport {
    pub point: DVector<f64>,
    /// Orthonormal frame spanning the image of the initial frame.
    pub frame: DMatrix<f64>,
    /// Accumulated `log |R_ii|`, i.e. log growth of the nested volumes.
    pub log_growth: Vec<f64>,
}

/// Carries the column space of `frame` from `(t0, x)` to `t1` under `u`,
/// re-orthonormalizing every `reorth` seconds.
pub fn propagate_frame(
    sys: &ControlAffineSystem,
    u: &ControlFunction,
    x: &DVector<f64>,
    frame: &DMatrix<f64>,
    t0: f64,
    t1: f64,
    step: f64,
    reorth: f64,
) -> Result<FrameTransport> {
    let n = sys.dim_n();
    let k = frame.ncols();
    if frame.nrows() != n || x.len() != n {
        return Err(Error::invalid("frame and point must match the state dimension"));
    }
    if !(reorth > 0.0) {
        return Err(Error::invalid("re-orthonormalization interval must be positive"));
    }
    let mut s = vec![0.0; n * (1 + k)];
    s[..n].copy_from_slice(x.as_slice());
    s[n..].copy_from_slice(frame.as_slice());
    let mut q = orthonormalize(frame);
    let mut log_growth = vec![0.0; k];
    if k > 0 {
        let (q0, r0) = signed_qr(frame);
        q = q0;
        for i in 0..k {
            log_growth[i] = r0[(i, i)].abs().ln();
        }
        s[n..].copy_from_slice(q.as_slice());
    }
    let mut stepper = Stepper::new(sys, k);
    let span = (t1 - t0).abs();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let chunks = ((span / reorth) - 1e-9).ceil().max(0.0) as usize;
    let mut a = t0;
    for j in 1..=chunks {
        let b = if j == chunks { t1 } else { t0 + dir * reorth * j as f64 };
        stepper.advance(&mut s, u, a, b, step, |_, _| Observe::Continue)?;
        a = b;
        if k > 0 {
            let v = DMatrix::from_column_slice(n, k, &s[n..]);
            let (qn, r) = signed_qr(&v);
            for i in 0..k {
                log_growth[i] += r[(i, i)].abs().ln();
            }
            s[n..].copy_from_slice(qn.as_slice());
            q = qn;
        }
    }
    Ok(FrameTransport { point: DVector::from_column_slice(&s[..n]), frame: q, log_growth })
}

/// Thin QR with a nonnegative diagonal in `R`.
fn signed_qr(v: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = v.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// A fixed orthonormal basis in general position, so no column starts
/// inside an invariant coordinate subspace.
fn generic_frame(n: usize) -> DMatrix<f64> {
    let mut rng = item_rng(0, RATE_STREAM, 1);
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.5..0.5));
    orthonormalize(&m)
}

fn orthonormalize(v: &DMatrix<f64>) -> DMatrix<f64> {
    if v.ncols() == 0 {
        return v.clone();
    }
    signed_qr(v).0
}

pub(crate) fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Largest principal angle between the column spaces of `a` and `b`, or
/// `pi / 2` if their dimensions differ.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    let residual = &qa - &qb * (qb.transpose() * &qa);
    operator_norm(&residual).min(1.0).asin()
}

/// Projection onto the columns of `e_minus` along those of `e_plus`.
pub fn projection_along(e_plus: &DMatrix<f64>, e_minus: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = e_plus.nrows();
    let km = e_minus.ncols();
    let mut basis = DMatrix::zeros(n, n);
    basis.columns_mut(0, km).copy_from(e_minus);
    basis.columns_mut(km, n - km).copy_from(e_plus);
    let inv = basis
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("E+ and E- do not span the tangent space"))?;
    let mut select = DMatrix::zeros(n, n);
    for i in 0..km {
        select[(i, i)] = 1.0;
    }
    Ok(basis * select * inv)
}

fn validate(params: &SplittingParams) -> Result<()> {
    if !(params.window > 0.0 && params.step > 0.0 && params.gap_tol > 0.0 && params.reorth > 0.0) {
        return Err(Error::invalid("splitting needs positive window, step, gap_tol and reorth"));
    }
    if params.rate_times == 0 {
        return Err(Error::invalid("at least one rate sample time is required"));
    }
    Ok(())
}

/// Estimates `E+`, `E-` and the rate constants at `(u, x)`.
///
/// The unstable dimension is the number of positive exponents; if any
/// exponent lies within `gap_tol` of zero the splitting is refused.
pub fn estimate_splitting(
    sys: &ControlAffineSystem,
    u: &ControlFunction,
    x: &DVector<f64>,
    params: &SplittingParams,
) -> Result<HyperbolicSplitting> {
    validate(params)?;
    let n = sys.dim_n();
    let w = params.window;
    let eye = generic_frame(n);

    let past = flow_point(sys, x, u, 0.0, -w, params.step)?;
    let fwd = propagate_frame(sys, u, &past, &eye, -w, 0.0, params.step, params.reorth)?;
    let exponents: Vec<f64> = fwd.log_growth.iter().map(|g| g / w).collect();
    if let Some(e) = exponents.iter().find(|e| e.abs() < params.gap_tol) {
        return Err(Error::CenterDirection { exponent: *e, gap_tol: params.gap_tol });
    }
    let k_plus = exponents.iter().filter(|e| **e > 0.0).count();
    let e_plus = fwd.frame.columns(0, k_plus).into_owned();

    let future = flow_point(sys, x, u, 0.0, w, params.step)?;
    let bwd = propagate_frame(sys, u, &future, &eye, w, 0.0, params.step, params.reorth)?;
    let e_minus = bwd.frame.columns(0, n - k_plus).into_owned();

    let projection = projection_along(&e_plus, &e_minus)
        .map_err(|_| Error::CenterDirection { exponent: 0.0, gap_tol: params.gap_tol })?;
    let mut splitting = HyperbolicSplitting {
        control: u.clone(),
        point: x.clone(),
        e_plus,
        e_minus,
        projection,
        exponents,
        c_est: 1.0,
        lambda_est: f64::INFINITY,
        big_c_est: 1.0,
        mu_est: 0.0,
    };
    let times: Vec<f64> = (0..=params.rate_times).map(|i| 0.5 * w * i as f64 / params.rate_times as f64).collect();
    let fit = verify_rates(&splitting, sys, &times, params.rate_vectors, params.step)?;
    splitting.c_est = fit.c_est;
    splitting.lambda_est = fit.lambda_est;
    splitting.big_c_est = 1.0 / fit.c_est;
    splitting.mu_est = (-fit.lambda_est).exp();
    Ok(splitting)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateViolation {
    pub time: f64,
    /// True for a sample from `E+`.
    pub unstable: bool,
    /// `log |d phi_t v|` for the sampled unit vector.
    pub log_growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub c_est: f64,
    pub lambda_est: f64,
    /// Samples breaking the constants stored in the splitting.
    pub violations: Vec<RateViolation>,
    pub samples: usize,
}

/// Fits `(c, lambda)` to sampled growth of unit vectors in `E+` and `E-`.
///
/// `lambda` is the smallest growth rate observed at the largest sample time,
/// and `c <= 1` the largest constant for which both bounds hold at every
/// sample with that `lambda`.
pub fn verify_rates(
    splitting: &HyperbolicSplitting,
    sys: &ControlAffineSystem,
    t_samples: &[f64],
    vec_samples: usize,
    step: f64,
) -> Result<RateFit> {
    if t_samples.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::invalid("rate sample times must be nonnegative"));
    }
    let mut times = t_samples.to_vec();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut rng = item_rng(0, RATE_STREAM, 0);
    let mut unit_vectors = |basis: &DMatrix<f64>| -> Vec<DVector<f64>> {
        let k = basis.ncols();
        let mut out: Vec<DVector<f64>> = (0..k).map(|i| basis.column(i).into_owned()).collect();
        if k > 1 {
            for _ in 0..vec_samples {
                let c = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));
                let v = basis * c;
                let norm = v.norm();
                if norm > 1e-6 {
                    out.push(v / norm);
                }
            }
        }
        out
    };
    let plus = unit_vectors(&splitting.e_plus);
    let minus = unit_vectors(&splitting.e_minus);
    let n = sys.dim_n();
    let k = plus.len() + minus.len();
    let mut frame = DMatrix::zeros(n, k);
    for (j, v) in plus.iter().chain(&minus).enumerate() {
        frame.set_column(j, v);
    }

    // growth[time][vector]
    let mut growth: Vec<Vec<f64>> = Vec::with_capacity(times.len());
    let mut s = vec![0.0; n * (1 + k)];
    s[..n].copy_from_slice(splitting.point.as_slice());
    s[n..].copy_from_slice(frame.as_slice());
    let mut stepper = Stepper::new(sys, k);
    let mut t = 0.0;
    for &target in &times {
        stepper.advance(&mut s, &splitting.control, t, target, step, |_, _| Observe::Continue)?;
        t = target;
        growth.push((0..k).map(|j| norm_slice(&s[n * (1 + j)..n * (2 + j)]).ln()).collect());
    }

    let t_max = *times.last().unwrap_or(&0.0);
    let np = plus.len();
    let mut lambda = f64::INFINITY;
    if t_max > 0.0 {
        let last = growth.last().unwrap();
        for (j, g) in last.iter().enumerate() {
            let rate = if j < np { g / t_max } else { -g / t_max };
            lambda = lambda.min(rate);
        }
    }
    let mut log_c: f64 = 0.0;
    if lambda.is_finite() {
        for (ti, &t) in times.iter().enumerate() {
            for (j, g) in growth[ti].iter().enumerate() {
                let margin = if j < np { g - lambda * t } else { -g - lambda * t };
                log_c = log_c.min(margin);
            }
        }
    }

    let stored_log_c = splitting.c_est.ln();
    let stored_lambda = splitting.lambda_est;
    let mut violations = Vec::new();
    if stored_lambda.is_finite() {
        for (ti, &t) in times.iter().enumerate() {
            for (j, &g) in growth[ti].iter().enumerate() {
                let unstable = j < np;
                let broken = if unstable {
                    g < stored_log_c + stored_lambda * t - 1e-9
                } else {
                    g > -stored_log_c - stored_lambda * t + 1e-9
                };
                if broken {
                    violations.push(RateViolation { time: t, unstable, log_growth: g });
                }
            }
        }
    }
    Ok(RateFit { c_est: log_c.exp(), lambda_est: lambda, violations, samples: times.len() * k })
}

fn norm_slice(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||P(Phi_1(u, x)) d phi_1 - d phi_1 P(u, x)||` in the operator norm.
pub fn projection_commutation(
    at_x: &HyperbolicSplitting,
    at_image: &HyperbolicSplitting,
    sys: &ControlAffineSystem,
    step: f64,
) -> Result<f64> {
    let (_, d) = flow_with_derivative(sys, &at_x.point, &at_x.control, 0.0, 1.0, step)?;
    Ok(operator_norm(&(&at_image.projection * &d - &d * &at_x.projection)))
}

/// `log |det d phi_{tau,u}(x)|` restricted to the span of `e_plus`, measured
/// between orthonormal bases at both ends.
pub fn unstable_log_determinant(
    sys: &ControlAffineSystem,
    u: &ControlFunction,
    x: &DVector<f64>,
    e_plus: &DMatrix<f64>,
    tau: f64,
    step: f64,
) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::invalid("tau must be nonnegative"));
    }
    let k = e_plus.ncols();
    if k == 0 || tau == 0.0 {
        return Ok(0.0);
    }
    let gram = e_plus.transpose() * e_plus - DMatrix::identity(k, k);
    if gram.amax() > 1e-8 {
        return Err(Error::invalid("E+ basis is not orthonormal"));
    }
    let transport = propagate_frame(sys, u, x, e_plus, 0.0, tau, step, 1.0)?;
    Ok(transport.log_growth.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlRange;
    use crate::system::{Domain, Integrator, Saddle2d, ScalarAffine, TorusShear};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn scalar(a: f64) -> ControlAffineSystem {
        ControlAffineSystem::new(
            Arc::new(ScalarAffine { a }),
            Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
            ControlRange::symmetric(1, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn saddle(a: f64, b: f64) -> ControlAffineSystem {
        ControlAffineSystem::new(
            Arc::new(Saddle2d { a, b }),
            Domain::new_box(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(),
            ControlRange::symmetric(2, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn torus() -> ControlAffineSystem {
        ControlAffineSystem::new(
            Arc::new(TorusShear { a: 1.0, b: 1.0, s: 0.5 }),
            Domain::new_torus(vec![std::f64::consts::TAU; 2]).unwrap(),
            ControlRange::symmetric(2, 0.2).unwrap(),
        )
        .unwrap()
    }

    fn x_axis() -> DMatrix<f64> {
        dmatrix![1.0; 0.0]
    }

    fn y_axis() -> DMatrix<f64> {
        dmatrix![0.0; 1.0]
    }

    #[test]
    fn saddle_splitting_is_the_coordinate_axes() {
        let sys = saddle(1.0, 1.0);
        let p = SplittingParams::default();
        // a bounded orbit of the saddle: the fiber point of a constant control
        for c in [dvector![0.0, 0.0], dvector![0.4, -0.7]] {
            let u = ControlFunction::constant(c.clone());
            let x = dvector![-c[0], c[1]];
            let sp = estimate_splitting(&sys, &u, &x, &p).unwrap();
            assert!(principal_angle(&sp.e_plus, &x_axis()) < 1e-6);
            assert!(principal_angle(&sp.e_minus, &y_axis()) < 1e-6);
            assert!((sp.lambda_est - 1.0).abs() < 1e-3);
            assert!((sp.c_est - 1.0).abs() < 1e-3);
            assert!(sp.idempotency_defect() < 1e-10);
            assert!((sp.mu_est - (-1.0f64).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn scalar_splitting_has_no_stable_part() {
        let sys = scalar(1.0);
        let u = ControlFunction::constant(dvector![0.0]);
        let sp = estimate_splitting(&sys, &u, &dvector![0.0], &SplittingParams { window: 0.9, ..Default::default() })
            .unwrap();
        assert_eq!((sp.dim_plus(), sp.dim_minus()), (1, 0));
        assert!((sp.lambda_est - 1.0).abs() < 1e-3);
        assert_eq!(sp.projection, dmatrix![0.0]);
    }

    #[test]
    fn integrator_has_a_center_direction() {
        let sys = ControlAffineSystem::new(
            Arc::new(Integrator { n: 1 }),
            Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
            ControlRange::symmetric(1, 0.1).unwrap(),
        )
        .unwrap();
        let u = ControlFunction::constant(dvector![0.0]);
        let err = estimate_splitting(&sys, &u, &dvector![0.0], &SplittingParams::default()).unwrap_err();
        assert!(matches!(err, Error::CenterDirection { .. }));
    }

    #[test]
    fn rate_examples() {
        let sys = saddle(1.0, 1.0);
        let u = ControlFunction::constant(dvector![0.0, 0.0]);
        let sp = estimate_splitting(&sys, &u, &dvector![0.0, 0.0], &SplittingParams::default()).unwrap();
        let times: Vec<f64> = (0..=8).map(|i| i as f64 * 0.5).collect();
        let fit = verify_rates(&sp, &sys, &times, 3, 0.01).unwrap();
        assert!((fit.c_est - 1.0).abs() < 1e-3 && (fit.lambda_est - 1.0).abs() < 1e-3);
        assert!(fit.violations.is_empty());

        let mut tight = sp.clone();
        tight.lambda_est = 1.5;
        assert!(!verify_rates(&tight, &sys, &times, 0, 0.01).unwrap().violations.is_empty());

        let sys = scalar(2.0);
        let u = ControlFunction::constant(dvector![0.0]);
        let sp = estimate_splitting(&sys, &u, &dvector![0.0], &SplittingParams { window: 5.0, ..Default::default() })
            .unwrap();
        assert!((sp.lambda_est - 2.0).abs() < 1e-3);
    }

    #[test]
    fn commutation_examples() {
        let sys = saddle(1.0, 1.0);
        let u = ControlFunction::constant(dvector![0.0, 0.0]);
        let x = dvector![0.0, 0.0];
        let p = SplittingParams::default();
        let here = estimate_splitting(&sys, &u, &x, &p).unwrap();
        let image = estimate_splitting(&sys, &u.shift(1.0), &flow_point(&sys, &x, &u, 0.0, 1.0, 0.01).unwrap(), &p)
            .unwrap();
        assert!(projection_commutation(&here, &image, &sys, 0.01).unwrap() <= 1e-8);

        let mut swapped = here.clone();
        swapped.projection = here.projection_plus();
        let e = std::f64::consts::E;
        assert!(projection_commutation(&swapped, &image, &sys, 0.01).unwrap() >= e - 1.0 / e);
    }

    #[test]
    fn identity_projection_commutes_with_zero_dynamics() {
        let sys = ControlAffineSystem::new(
            Arc::new(crate::system::ZeroFields { n: 2, m: 1 }),
            Domain::new_box(vec![-1.0; 2], vec![1.0; 2]).unwrap(),
            ControlRange::symmetric(1, 1.0).unwrap(),
        )
        .unwrap();
        let u = ControlFunction::constant(dvector![0.0]);
        let sp = HyperbolicSplitting {
            control: u,
            point: dvector![0.0, 0.0],
            e_plus: DMatrix::zeros(2, 0),
            e_minus: DMatrix::identity(2, 2),
            projection: DMatrix::identity(2, 2),
            exponents: vec![],
            c_est: 1.0,
            lambda_est: 1.0,
            big_c_est: 1.0,
            mu_est: (-1.0f64).exp(),
        };
        assert_eq!(projection_commutation(&sp, &sp, &sys, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn log_determinant_examples() {
        let sys = scalar(1.0);
        let u = ControlFunction::constant(dvector![0.2]);
        let e = dmatrix![1.0];
        assert!((unstable_log_determinant(&sys, &u, &dvector![-0.2], &e, 2.0, 0.01).unwrap() - 2.0).abs() < 1e-4);
        assert_eq!(unstable_log_determinant(&sys, &u, &dvector![-0.2], &e, 0.0, 0.01).unwrap(), 0.0);
        let sys = saddle(1.0, 1.0);
        let u = ControlFunction::constant(dvector![0.0, 0.0]);
        let v = unstable_log_determinant(&sys, &u, &dvector![0.0, 0.0], &x_axis(), 3.0, 0.01).unwrap();
        assert!((v - 3.0).abs() < 1e-4);
        assert!(unstable_log_determinant(&sys, &u, &dvector![0.0, 0.0], &dmatrix![2.0; 0.0], 1.0, 0.01).is_err());
    }

    #[test]
    fn log_determinant_is_additive() {
        let sys = torus();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = ControlFunction::random(sys.range(), 0.0, 0.5, 12, &mut rng).unwrap();
        let x = dvector![0.3, 2.9];
        let e = dmatrix![0.6; 0.8];
        let whole = unstable_log_determinant(&sys, &u, &x, &e, 3.0, 0.01).unwrap();
        let first = propagate_frame(&sys, &u, &x, &e, 0.0, 1.25, 0.01, 1.0).unwrap();
        let head: f64 = first.log_growth.iter().sum();
        let tail = unstable_log_determinant(&sys, &u.shift(1.25), &first.point, &first.frame, 1.75, 0.01).unwrap();
        assert!((whole - head - tail).abs() < 1e-6, "{whole} vs {}", head + tail);
    }

    #[test]
    fn torus_splitting_is_invariant_along_the_orbit() {
        let sys = torus();
        let p = SplittingParams::default();
        // equilibrium near the saddle at the origin
        let u = ControlFunction::constant(dvector![0.05, -0.1]);
        let x = dvector![0.05f64.asin(), 0.075f64.asin()];
        let here = estimate_splitting(&sys, &u, &x, &p).unwrap();
        let (y, d) = flow_with_derivative(&sys, &x, &u, 0.0, 1.0, p.step).unwrap();
        let there = estimate_splitting(&sys, &u.shift(1.0), &y, &p).unwrap();
        assert!(principal_angle(&(&d * &here.e_plus), &there.e_plus) < 1e-4);
        assert!(principal_angle(&(&d * &here.e_minus), &there.e_minus) < 1e-4);
        assert!(projection_commutation(&here, &there, &sys, p.step).unwrap() < 1e-4);
    }

    #[test]
    fn principal_angle_examples() {
        let a = dmatrix![1.0; 0.0];
        let b = dmatrix![1.0; 1.0];
        assert!((principal_angle(&a, &b) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert_eq!(principal_angle(&a, &a), 0.0);
        assert!((principal_angle(&a, &DMatrix::identity(2, 2)) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }
}
