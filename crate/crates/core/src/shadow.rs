//! Shadowing for the time-one map of the control flow, transport of fiber
//! points between controls, and a sampled check that the lift is a graph
//! over the controls.
//!
//! Orbits are truncated to index windows `-K..=K`. Newton corrections are
//! split into stable and unstable parts. The stable offset from the
//! pseudo-orbit is pinned to zero at `-K` and swept forward, the unstable
//! offset is pinned to zero at `+K` and swept backward.
//! The splitting along the window is carried by the linearized maps
//! themselves, so it is exactly invariant under them and each Newton step
//! solves the linearized defect equations exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::chain::{equilibria, fiber, ChainControlSet, EquilibriumParams, FiberParams};
use crate::control::{convex_combination, ControlFunction};
use crate::error::{Error, Result};
use crate::flow::{flow_point, flow_with_derivative};
use crate::metric::{delta_for_epsilon, du_distance, FamilyConfig, TestFunctionFamily};
use crate::system::ControlAffineSystem;
use crate::util::item_rng;

const FRAME_STREAM: u64 = 0x6672_616d;
const CONTROL_STREAM: u64 = 0x6374_726c;

/// States `x_{-K..=K}` over the base sequence `b_k = theta_k u`.
#[derive(Debug, Clone, Serialize)]
pub struct PseudoOrbit {
    control: ControlFunction,
    window: usize,
    states: Vec<DVector<f64>>,
    jumps: Vec<f64>,
    alpha: f64,
    step: f64,
}

fn time_of(index: usize, window: usize) -> f64 {
    index as f64 - window as f64
}

impl PseudoOrbit {
    /// `states[i]` sits at time `i - K`; `states.len()` must be `2K + 1` with `K >= 1`.
    pub fn new(sys: &ControlAffineSystem, control: ControlFunction, states: Vec<DVector<f64>>, step: f64) -> Result<Self> {
        if states.len() < 3 || states.len().is_multiple_of(2) {
            return Err(Error::invalid(format!("a window -K..=K with K >= 1 needs an odd number >= 3 of states, got {}", states.len())));
        }
        if states.iter().any(|x| x.len() != sys.dim_n()) {
            return Err(Error::invalid("pseudo-orbit states must match the state dimension"));
        }
        let window = states.len() / 2;
        let jumps = jumps(sys, &control, &states, window, step)?;
        let alpha = jumps.iter().cloned().fold(0.0, f64::max);
        Ok(Self { control, window, states, jumps, alpha, step })
    }

    /// Builds a pseudo-orbit from one control per index, which must be exact
    /// unit shifts of each other.
    pub fn from_sequence(
        sys: &ControlAffineSystem,
        controls: &[ControlFunction],
        states: Vec<DVector<f64>>,
        step: f64,
    ) -> Result<Self> {
        if controls.len() != states.len() {
            return Err(Error::invalid("one control per state is required"));
        }
        for pair in controls.windows(2) {
            if pair[1] != pair[0].shift(1.0) {
                return Err(Error::invalid("controls are not consecutive unit shifts of one control"));
            }
        }
        let window = states.len() / 2;
        Self::new(sys, controls[window].clone(), states, step)
    }

    /// The exact orbit `x_n = phi(n, x, u)`, `n = -K..=K`.
    pub fn from_orbit(sys: &ControlAffineSystem, control: ControlFunction, x: &DVector<f64>, window: usize, step: f64) -> Result<Self> {
        let states = orbit_through(sys, &control, x, window, step)?;
        Self::new(sys, control, states, step)
    }

    /// The same states re-driven by another control.
    pub fn redriven(&self, sys: &ControlAffineSystem, control: ControlFunction) -> Result<Self> {
        Self::new(sys, control, self.states.clone(), self.step)
    }

    pub fn control(&self) -> &ControlFunction {
        &self.control
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Base control at index `k = i - K`.
    pub fn base(&self, i: usize) -> ControlFunction {
        self.control.shift(time_of(i, self.window))
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.states {
            for v in x.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for t in self.control.knot_ticks() {
            h.update(t.to_le_bytes());
        }
        for v in self.control.values() {
            for c in v.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

fn jumps(sys: &ControlAffineSystem, u: &ControlFunction, states: &[DVector<f64>], window: usize, step: f64) -> Result<Vec<f64>> {
    (0..states.len() - 1)
        .map(|i| {
            let t = time_of(i, window);
            let y = flow_point(sys, &states[i], u, t, t + 1.0, step)?;
            Ok(sys.domain().distance(y.as_slice(), states[i + 1].as_slice()))
        })
        .collect()
}

fn orbit_through(sys: &ControlAffineSystem, u: &ControlFunction, x: &DVector<f64>, window: usize, step: f64) -> Result<Vec<DVector<f64>>> {
    let mut states = vec![x.clone(); 2 * window + 1];
    for j in 1..=window {
        let t = j as f64;
        states[window + j] = flow_point(sys, &states[window + j - 1], u, t - 1.0, t, step)?;
        states[window - j] = flow_point(sys, &states[window - j + 1], u, 1.0 - t, -t, step)?;
    }
    Ok(states)
}

/// Whether all jumps are below `alpha`. Base coherence holds by construction
/// of [`PseudoOrbit`]; incoherent sequences are rejected by
/// [`PseudoOrbit::from_sequence`].
pub fn is_pseudo_orbit(sys: &ControlAffineSystem, candidate: &PseudoOrbit, alpha: f64) -> Result<bool> {
    let recomputed = jumps(sys, &candidate.control, &candidate.states, candidate.window, candidate.step)?;
    Ok(recomputed.iter().all(|j| *j < alpha))
}

/// Where the boundary subspaces of the window come from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SplittingField {
    /// Generic frames at both ends, carried across the window by the
    /// linearization; the unstable dimension is the number of positive
    /// exponents over the window, refused within `gap_tol` of zero.
    Filtration { gap_tol: f64 },
    /// Known subspaces at the two ends, e.g. the coordinate axes of a linear saddle.
    Fixed { e_plus: DMatrix<f64>, e_minus: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowParams {
    pub orbit_tol: f64,
    pub max_iters: usize,
    pub step: f64,
    pub splitting: SplittingField,
    /// Windows with `min |exponent| * K` below this are flagged as short.
    pub min_decay: f64,
}

impl Default for ShadowParams {
    fn default() -> Self {
        Self {
            orbit_tol: 1e-10,
            max_iters: 30,
            step: 0.01,
            splitting: SplittingField::Filtration { gap_tol: 0.1 },
            min_decay: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShadowResult {
    pub y0: DVector<f64>,
    pub orbit: Vec<DVector<f64>>,
    pub beta: f64,
    pub residual: f64,
    pub newton_iters: usize,
    /// Exponents of the linearization over the window, descending.
    pub exponents: Vec<f64>,
    pub short_window: bool,
    pub trace: Vec<f64>,
    pseudo_id: String,
}

pub fn shadow(sys: &ControlAffineSystem, pseudo: &PseudoOrbit, params: &ShadowParams) -> Result<ShadowResult> {
    shadow_from(sys, pseudo, pseudo.states(), params)
}

/// Newton iteration started from `seed` instead of the pseudo-orbit itself.
pub fn shadow_from(
    sys: &ControlAffineSystem,
    pseudo: &PseudoOrbit,
    seed: &[DVector<f64>],
    params: &ShadowParams,
) -> Result<ShadowResult> {
    if seed.len() != pseudo.states.len() {
        return Err(Error::invalid("seed must have one state per pseudo-orbit index"));
    }
    if !(params.orbit_tol > 0.0 && params.step > 0.0) {
        return Err(Error::invalid("orbit tolerance and step must be positive"));
    }
    let n = sys.dim_n();
    let len = seed.len();
    let window = pseudo.window;
    let u = &pseudo.control;
    let mut y: Vec<DVector<f64>> = seed.to_vec();
    for x in &mut y {
        sys.domain().wrap(x.as_mut_slice());
    }
    let mut trace = Vec::new();
    let mut exponents = Vec::new();
    let mut iter = 0;
    loop {
        let mut derivs = Vec::with_capacity(len - 1);
        let mut defects = Vec::with_capacity(len - 1);
        for i in 0..len - 1 {
            let t = time_of(i, window);
            let (image, d) = flow_with_derivative(sys, &y[i], u, t, t + 1.0, params.step)?;
            defects.push(DVector::from_vec(sys.domain().displacement(y[i + 1].as_slice(), image.as_slice())));
            derivs.push(d);
        }
        let residual = defects.iter().map(|f| f.norm()).fold(0.0, f64::max);
        trace.push(residual);
        if iter == 0 {
            exponents = window_exponents(&derivs, n);
        }
        if residual <= params.orbit_tol {
            let beta = y
                .iter()
                .zip(&pseudo.states)
                .map(|(a, b)| sys.domain().distance(a.as_slice(), b.as_slice()))
                .fold(0.0, f64::max);
            let min_rate = exponents.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
            return Ok(ShadowResult {
                y0: y[window].clone(),
                orbit: y,
                beta,
                residual,
                newton_iters: iter,
                short_window: min_rate * (window as f64) < params.min_decay,
                exponents,
                trace,
                pseudo_id: pseudo.fingerprint(),
            });
        }
        if iter == params.max_iters || !residual.is_finite() {
            return Err(Error::NoConvergence { iterations: iter, trace });
        }
        let (e_plus, e_minus) = boundary_subspaces(&params.splitting, &exponents, n)?;
        let first = DVector::from_vec(sys.domain().displacement(pseudo.states[0].as_slice(), y[0].as_slice()));
        let last = DVector::from_vec(sys.domain().displacement(pseudo.states[len - 1].as_slice(), y[len - 1].as_slice()));
        let delta = correction(&derivs, &defects, &e_plus, &e_minus, &first, &last)?;
        for (x, d) in y.iter_mut().zip(&delta) {
            *x += d;
            sys.domain().wrap(x.as_mut_slice());
        }
        iter += 1;
    }
}

fn generic_frame(n: usize) -> DMatrix<f64> {
    let mut rng = item_rng(0, FRAME_STREAM, 0);
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.5..0.5));
    signed_qr(&m).0
}

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

/// Per-step exponents of the product of the window's linearizations.
fn window_exponents(derivs: &[DMatrix<f64>], n: usize) -> Vec<f64> {
    let mut q = generic_frame(n);
    let mut sums = vec![0.0; n];
    for d in derivs {
        let (qn, r) = signed_qr(&(d * &q));
        for i in 0..n {
            sums[i] += r[(i, i)].abs().ln();
        }
        q = qn;
    }
    let mut exps: Vec<f64> = sums.into_iter().map(|s| s / derivs.len() as f64).collect();
    exps.sort_by(|a, b| b.total_cmp(a));
    exps
}

fn boundary_subspaces(field: &SplittingField, exponents: &[f64], n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match field {
        SplittingField::Filtration { gap_tol } => {
            if let Some(e) = exponents.iter().find(|e| e.abs() < *gap_tol) {
                return Err(Error::CenterDirection { exponent: *e, gap_tol: *gap_tol });
            }
            let k_plus = exponents.iter().filter(|e| **e > 0.0).count();
            let frame = generic_frame(n);
            Ok((frame.columns(0, k_plus).into_owned(), frame.columns(0, n - k_plus).into_owned()))
        }
        SplittingField::Fixed { e_plus, e_minus } => {
            if e_plus.nrows() != n || e_minus.nrows() != n || e_plus.ncols() + e_minus.ncols() != n {
                return Err(Error::invalid("fixed splitting must have complementary dimensions"));
            }
            let ortho = |m: &DMatrix<f64>| if m.ncols() == 0 { m.clone() } else { signed_qr(m).0 };
            Ok((ortho(e_plus), ortho(e_minus)))
        }
    }
}

/// Solves `delta_{i+1} = D_i delta_i + F_i` such that the corrected orbit
/// has no stable offset from the pseudo-orbit at the first index and no
/// unstable offset at the last; `first` and `last` are the current offsets.
fn correction(
    derivs: &[DMatrix<f64>],
    defects: &[DVector<f64>],
    e_plus: &DMatrix<f64>,
    e_minus: &DMatrix<f64>,
    first: &DVector<f64>,
    last: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let steps = derivs.len();
    let n = e_plus.nrows();
    let kp = e_plus.ncols();
    let km = e_minus.ncols();
    let singular = || Error::NoConvergence { iterations: 0, trace: vec![] };

    // unstable frames pushed forward: D_i Q_i = Q_{i+1} R_i
    let mut q = vec![e_plus.clone()];
    let mut r = Vec::with_capacity(steps);
    for d in derivs {
        let (qn, rn) = if kp == 0 { (DMatrix::zeros(n, 0), DMatrix::zeros(0, 0)) } else { signed_qr(&(d * q.last().unwrap())) };
        q.push(qn);
        r.push(rn);
    }
    // stable frames pulled back: D_i^{-1} S_{i+1} = S_i R'_i
    let mut s = vec![DMatrix::zeros(n, km); steps + 1];
    let mut rs = vec![DMatrix::zeros(km, km); steps];
    s[steps] = e_minus.clone();
    for i in (0..steps).rev() {
        if km == 0 {
            continue;
        }
        let pulled = derivs[i].clone().lu().solve(&s[i + 1]).ok_or_else(singular)?;
        let (si, ri) = signed_qr(&pulled);
        s[i] = si;
        rs[i] = ri;
    }
    let split = |i: usize, v: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let mut basis = DMatrix::zeros(n, n);
        basis.columns_mut(0, km).copy_from(&s[i]);
        basis.columns_mut(km, kp).copy_from(&q[i]);
        let coords = basis.lu().solve(v).ok_or_else(singular)?;
        Ok((coords.rows(0, km).into_owned(), coords.rows(km, kp).into_owned()))
    };
    // split each defect at its target index
    let mut sigma = Vec::with_capacity(steps);
    let mut rho = Vec::with_capacity(steps);
    for i in 0..steps {
        let (a, b) = split(i + 1, &defects[i])?;
        sigma.push(a);
        rho.push(b);
    }
    // stable coordinates forward: d_{i+1} = R'_i^{-1} d_i + sigma_i
    let mut dcoord = vec![DVector::zeros(km); steps + 1];
    dcoord[0] = -split(0, first)?.0;
    for i in 0..steps {
        let carried = if km == 0 { DVector::zeros(0) } else { rs[i].solve_upper_triangular(&dcoord[i]).ok_or_else(singular)? };
        dcoord[i + 1] = carried + &sigma[i];
    }
    // unstable coordinates backward: c_i = R_i^{-1} (c_{i+1} - rho_i)
    let mut ccoord = vec![DVector::zeros(kp); steps + 1];
    ccoord[steps] = -split(steps, last)?.1;
    for i in (0..steps).rev() {
        if kp == 0 {
            continue;
        }
        ccoord[i] = r[i].solve_upper_triangular(&(&ccoord[i + 1] - &rho[i])).ok_or_else(singular)?;
    }
    Ok((0..=steps).map(|i| &s[i] * &dcoord[i] + &q[i] * &ccoord[i]).collect())
}

/// Whether two shadows of the same pseudo-orbit, both within `beta0` of it,
/// coincide up to `merge_tol`.
pub fn uniqueness_check(
    sys: &ControlAffineSystem,
    pseudo: &PseudoOrbit,
    a: &ShadowResult,
    b: &ShadowResult,
    beta0: f64,
    merge_tol: f64,
) -> Result<bool> {
    let id = pseudo.fingerprint();
    if a.pseudo_id != id || b.pseudo_id != id {
        return Err(Error::invalid("both results must shadow the given pseudo-orbit"));
    }
    if !(a.beta < beta0 && b.beta < beta0) {
        return Err(Error::invalid(format!("shadows must stay within beta0 = {beta0}")));
    }
    let gap = a
        .orbit
        .iter()
        .zip(&b.orbit)
        .map(|(x, y)| sys.domain().distance(x.as_slice(), y.as_slice()))
        .fold(0.0, f64::max);
    Ok(gap <= merge_tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportParams {
    pub window: usize,
    pub shadow: ShadowParams,
    /// Inflation of the hull of `Q` used by the containment probe.
    pub inflate: f64,
    /// Largest admissible jump of the re-driven orbit (state units).
    pub max_alpha: f64,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self { window: 20, shadow: ShadowParams::default(), inflate: 1.1, max_alpha: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportResult {
    pub point: DVector<f64>,
    pub orbit: Vec<DVector<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub residual: f64,
    /// The shadow orbit at times `|t| <= K / 2` lies in the inflated hull of
    /// `Q`; nearer the window ends it follows the pinned boundary values.
    pub contained: bool,
}

/// `h_uv(x)`: shadows the `u`-orbit of `x` re-driven by `v`.
pub fn fiber_transport(
    sys: &ControlAffineSystem,
    q: &ChainControlSet,
    u: &ControlFunction,
    v: &ControlFunction,
    x: &DVector<f64>,
    params: &TransportParams,
) -> Result<TransportResult> {
    check_transport_params(params)?;
    let states = orbit_through(sys, u, x, params.window, params.shadow.step)?;
    transport_orbit(sys, q, &states, v, params)
}

fn check_transport_params(params: &TransportParams) -> Result<()> {
    if params.window == 0 || !(params.inflate >= 1.0) || !(params.max_alpha > 0.0) {
        return Err(Error::invalid("transport needs window >= 1, inflate >= 1 and max_alpha > 0"));
    }
    Ok(())
}

fn transport_orbit(
    sys: &ControlAffineSystem,
    q: &ChainControlSet,
    states: &[DVector<f64>],
    v: &ControlFunction,
    params: &TransportParams,
) -> Result<TransportResult> {
    let pseudo = PseudoOrbit::new(sys, v.clone(), states.to_vec(), params.shadow.step)?;
    if pseudo.alpha() > params.max_alpha {
        return Err(Error::invalid(format!(
            "re-driven orbit has jumps up to {} above max_alpha = {}; use more homotopy legs",
            pseudo.alpha(),
            params.max_alpha
        )));
    }
    let result = shadow(sys, &pseudo, &params.shadow)?;
    let (lo, hi) = q.inflated_hull(params.inflate);
    let k = params.window;
    let contained = result.orbit[k - k / 2..=k + k / 2]
        .iter()
        .all(|y| y.iter().zip(lo.iter().zip(&hi)).all(|(c, (a, b))| *a <= *c && *c <= *b));
    if !contained {
        log::warn!("shadow orbit leaves the inflated chain control set; isolation may fail");
    }
    Ok(TransportResult {
        point: result.y0,
        orbit: result.orbit,
        alpha: pseudo.alpha(),
        beta: result.beta,
        residual: result.residual,
        contained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportLeg {
    pub tau: f64,
    pub point: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub residual: f64,
    pub contained: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HomotopyPath {
    /// Fiber point over `w_tau` at the end of each completed leg.
    pub legs: Vec<TransportLeg>,
    pub leg_count: usize,
    pub delta: Option<f64>,
    pub completed: bool,
    pub failure: Option<String>,
    #[serde(skip)]
    last_orbit: Vec<DVector<f64>>,
}

impl HomotopyPath {
    /// The last point reached; the transported point if the path completed.
    pub fn endpoint(&self) -> Option<&DVector<f64>> {
        self.legs.last().map(|l| &l.point)
    }
}

/// Number of legs so that consecutive `w_tau` differ by at most `delta` in
/// sup norm, using `||w_s - w_r|| <= |s - r| ||u - v||`.
pub fn homotopy_legs(u: &ControlFunction, v: &ControlFunction, delta: f64) -> Result<usize> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    Ok(((u.sup_distance(v) / delta).ceil() as usize).max(1))
}

/// Transports `x` from the fiber over `u` to the fiber over `v` along the
/// convex path `w_tau`, with legs fine enough for `delta_for_epsilon(eps_step)`.
pub fn homotopy_transport(
    sys: &ControlAffineSystem,
    q: &ChainControlSet,
    u: &ControlFunction,
    v: &ControlFunction,
    x: &DVector<f64>,
    eps_step: f64,
    family: &TestFunctionFamily,
    params: &TransportParams,
) -> Result<HomotopyPath> {
    let delta = delta_for_epsilon(eps_step, family)?;
    let legs = homotopy_legs(u, v, delta)?;
    let mut path = homotopy_transport_legs(sys, q, u, v, x, legs, params)?;
    path.delta = Some(delta);
    Ok(path)
}

/// [`homotopy_transport`] with an explicit number of equal legs.
pub fn homotopy_transport_legs(
    sys: &ControlAffineSystem,
    q: &ChainControlSet,
    u: &ControlFunction,
    v: &ControlFunction,
    x: &DVector<f64>,
    legs: usize,
    params: &TransportParams,
) -> Result<HomotopyPath> {
    check_transport_params(params)?;
    if legs == 0 {
        return Err(Error::invalid("at least one leg is required"));
    }
    let orbit = orbit_through(sys, u, x, params.window, params.shadow.step)?;
    continue_path(sys, q, u, v, orbit, legs, params)
}

fn continue_path(
    sys: &ControlAffineSystem,
    q: &ChainControlSet,
    u: &ControlFunction,
    v: &ControlFunction,
    mut orbit: Vec<DVector<f64>>,
    legs: usize,
    params: &TransportParams,
) -> Result<HomotopyPath> {
    let mut path = HomotopyPath { legs: Vec::new(), leg_count: legs, delta: None, completed: false, failure: None, last_orbit: Vec::new() };
    for i in 1..=legs {
        let tau = i as f64 / legs as f64;
        let w = convex_combination(u, v, tau)?;
        match transport_orbit(sys, q, &orbit, &w, params) {
            Ok(t) => {
                path.legs.push(TransportLeg {
                    tau,
                    point: t.point,
                    alpha: t.alpha,
                    beta: t.beta,
                    residual: t.residual,
                    contained: t.contained,
                });
                orbit = t.orbit;
            }
            Err(e) => {
                path.failure = Some(format!("leg {i} of {legs} (tau = {tau}): {e}"));
                return Ok(path);
            }
        }
    }
    path.completed = true;
    path.last_orbit = orbit;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphVerifyParams {
    pub n_controls: usize,
    pub seed: u64,
    /// Random controls are piecewise constant on `[start, start + pieces * piece]`.
    pub control_start: f64,
    pub control_piece: f64,
    pub control_pieces: usize,
    pub eps_step: f64,
    pub family: FamilyConfig,
    pub transport: TransportParams,
    pub fiber: FiberParams,
    pub equilibrium: EquilibriumParams,
    pub round_trip: bool,
    /// Controls entering the continuity-modulus report, all pairs among them.
    pub continuity_controls: usize,
    pub du_terms: usize,
}

impl Default for GraphVerifyParams {
    fn default() -> Self {
        Self {
            n_controls: 100,
            seed: 0,
            control_start: -5.0,
            control_piece: 1.0,
            control_pieces: 10,
            eps_step: 0.5,
            family: FamilyConfig::default(),
            transport: TransportParams::default(),
            fiber: FiberParams::default(),
            equilibrium: EquilibriumParams::default(),
            round_trip: true,
            continuity_controls: 20,
            du_terms: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityPair {
    pub i: usize,
    pub j: usize,
    pub du: f64,
    pub dx: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlOutcome {
    pub index: usize,
    pub control: ControlFunction,
    pub transported: Option<DVector<f64>>,
    pub fiber_points: Vec<DVector<f64>>,
    pub fiber_resolved: bool,
    pub discrepancy: Option<f64>,
    pub round_trip: Option<f64>,
    pub contained: bool,
    pub legs: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphReport {
    pub hypothesis_ok: bool,
    pub hypothesis_note: String,
    pub base_control: DVector<f64>,
    pub base_point: Option<DVector<f64>>,
    pub controls: usize,
    pub singleton_rate: f64,
    pub max_discrepancy: f64,
    pub max_round_trip: f64,
    pub contained_rate: f64,
    pub continuity_pairs: Vec<ContinuityPair>,
    pub failures: Vec<String>,
    pub outcomes: Vec<ControlOutcome>,
}

/// Sampled check that the lift over `Q` is the graph of a map from controls
/// to states: each random control's fiber is computed by homotopy transport
/// from the constant control `u0` and independently by [`fiber`].
pub fn graph_verify(
    sys: &ControlAffineSystem,
    q: &ChainControlSet,
    u0: &DVector<f64>,
    params: &GraphVerifyParams,
) -> Result<GraphReport> {
    let family = TestFunctionFamily::new(sys.dim_m(), params.family)?;
    let mut report = GraphReport {
        hypothesis_ok: false,
        hypothesis_note: String::new(),
        base_control: u0.clone(),
        base_point: None,
        controls: 0,
        singleton_rate: 0.0,
        max_discrepancy: 0.0,
        max_round_trip: 0.0,
        contained_rate: 0.0,
        continuity_pairs: Vec::new(),
        failures: Vec::new(),
        outcomes: Vec::new(),
    };
    let eq = equilibria(sys, u0, q.grid(), &params.equilibrium)?;
    let (lo, hi) = q.inflated_hull(params.transport.inflate);
    let inside: Vec<_> = eq
        .roots
        .iter()
        .filter(|r| r.point.iter().zip(lo.iter().zip(&hi)).all(|(c, (a, b))| *a <= *c && *c <= *b))
        .collect();
    if inside.len() != 1 || !inside[0].hyperbolic {
        report.hypothesis_note = format!(
            "hypothesis failed: the fiber over u0 should be one hyperbolic equilibrium, found {} equilibria in Q ({} hyperbolic)",
            inside.len(),
            inside.iter().filter(|r| r.hyperbolic).count()
        );
        return Ok(report);
    }
    let x0 = inside[0].point.clone();
    report.hypothesis_ok = true;
    report.hypothesis_note = "fiber over u0 is a single hyperbolic equilibrium".into();
    report.base_point = Some(x0.clone());
    let u0f = ControlFunction::constant(u0.clone());

    let outcomes: Vec<ControlOutcome> = (0..params.n_controls)
        .into_par_iter()
        .map(|index| -> Result<ControlOutcome> {
            let mut rng = item_rng(params.seed, CONTROL_STREAM, index as u64);
            let control = ControlFunction::random(
                sys.range(),
                params.control_start,
                params.control_piece,
                params.control_pieces,
                &mut rng,
            )?;
            let mut outcome = ControlOutcome {
                index,
                control: control.clone(),
                transported: None,
                fiber_points: Vec::new(),
                fiber_resolved: false,
                discrepancy: None,
                round_trip: None,
                contained: false,
                legs: 0,
                failure: None,
            };
            let f = fiber(sys, q, &control, &params.fiber)?;
            outcome.fiber_points = f.points;
            outcome.fiber_resolved = f.resolved;
            let path = homotopy_transport(sys, q, &u0f, &control, &x0, params.eps_step, &family, &params.transport)?;
            outcome.legs = path.leg_count;
            outcome.contained = path.legs.iter().all(|l| l.contained);
            if !path.completed {
                outcome.failure = path.failure.clone();
                return Ok(outcome);
            }
            let y = path.endpoint().expect("completed paths have legs").clone();
            if outcome.fiber_points.len() == 1 {
                outcome.discrepancy = Some(sys.domain().distance(y.as_slice(), outcome.fiber_points[0].as_slice()));
            }
            if params.round_trip {
                let back = continue_path(sys, q, &control, &u0f, path.last_orbit.clone(), path.leg_count, &params.transport)?;
                match back.endpoint() {
                    Some(p) if back.completed => {
                        outcome.round_trip = Some(sys.domain().distance(p.as_slice(), x0.as_slice()));
                        outcome.contained &= back.legs.iter().all(|l| l.contained);
                    }
                    _ => outcome.failure = back.failure.or(Some("return path failed".into())),
                }
            }
            outcome.transported = Some(y);
            Ok(outcome)
        })
        .collect::<Result<Vec<_>>>()?;

    let count = outcomes.len().max(1) as f64;
    report.controls = outcomes.len();
    report.singleton_rate = outcomes.iter().filter(|o| o.fiber_points.len() == 1).count() as f64 / count;
    report.contained_rate = outcomes.iter().filter(|o| o.contained).count() as f64 / count;
    report.max_discrepancy = outcomes.iter().filter_map(|o| o.discrepancy).fold(0.0, f64::max);
    report.max_round_trip = outcomes.iter().filter_map(|o| o.round_trip).fold(0.0, f64::max);
    for o in &outcomes {
        if let Some(msg) = &o.failure {
            report.failures.push(format!("control {}: {msg}", o.index));
        } else if o.fiber_points.len() != 1 {
            report.failures.push(format!("control {}: fiber has {} points", o.index, o.fiber_points.len()));
        }
    }
    let pool: Vec<&ControlOutcome> =
        outcomes.iter().take(params.continuity_controls).filter(|o| o.transported.is_some()).collect();
    for a in 0..pool.len() {
        for b in a + 1..pool.len() {
            let du = du_distance(&pool[a].control, &pool[b].control, &family, params.du_terms)?.value;
            let (ya, yb) = (pool[a].transported.as_ref().unwrap(), pool[b].transported.as_ref().unwrap());
            let dx = sys.domain().distance(ya.as_slice(), yb.as_slice());
            report.continuity_pairs.push(ContinuityPair { i: pool[a].index, j: pool[b].index, du, dx });
        }
    }
    report.continuity_pairs.sort_by(|p, q| p.du.total_cmp(&q.du).then(p.i.cmp(&q.i)).then(p.j.cmp(&q.j)));
    report.outcomes = outcomes;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::StateGrid;
    use crate::control::ControlRange;
    use crate::system::{BistableCubic, Domain, Saddle2d, ScalarAffine};
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

    fn saddle() -> ControlAffineSystem {
        ControlAffineSystem::new(
            Arc::new(Saddle2d { a: 1.0, b: 1.0 }),
            Domain::new_box(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(),
            ControlRange::symmetric(2, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn square(sys: &ControlAffineSystem, r: f64) -> ChainControlSet {
        let grid = StateGrid::uniform(sys.domain(), 0.05).unwrap();
        let cells = (0..grid.len()).filter(|&c| grid.center(c).iter().all(|v| v.abs() < r)).collect();
        ChainControlSet::from_cells(&grid, cells, 0.05, 0.5).unwrap()
    }

    #[test]
    fn exact_orbits_are_pseudo_orbits_and_shadow_themselves() {
        let sys = saddle();
        let u = ControlFunction::constant(dvector![0.3, -0.2]);
        let p = PseudoOrbit::from_orbit(&sys, u, &dvector![-0.3, -0.2], 5, 0.01).unwrap();
        assert!(p.alpha() < 1e-12);
        assert!(is_pseudo_orbit(&sys, &p, 1e-9).unwrap());
        let r = shadow(&sys, &p, &ShadowParams::default()).unwrap();
        assert!(r.beta <= 1e-10);
        assert_eq!(r.newton_iters, 0);
    }

    #[test]
    fn perturbed_state_sets_alpha() {
        let sys = saddle();
        let u = ControlFunction::constant(dvector![0.0, 0.0]);
        let mut states = PseudoOrbit::from_orbit(&sys, u.clone(), &dvector![0.0, 0.0], 3, 0.01).unwrap().states().to_vec();
        states[3][1] += 0.05;
        let p = PseudoOrbit::new(&sys, u, states, 0.01).unwrap();
        // the defect into index 3 is 0.05, the one out of it 0.05 e^{-1}
        assert!((p.alpha() - 0.05).abs() < 1e-9);
        assert!(is_pseudo_orbit(&sys, &p, 0.0501).unwrap());
        assert!(!is_pseudo_orbit(&sys, &p, 0.0499).unwrap());
    }

    #[test]
    fn incoherent_controls_are_rejected() {
        let sys = saddle();
        let u = ControlFunction::uniform_pieces(0.0, 1.0, vec![dvector![0.1, 0.0], dvector![0.2, 0.0]]).unwrap();
        let states = vec![dvector![0.0, 0.0]; 3];
        let good = vec![u.shift(-1.0), u.clone(), u.shift(1.0)];
        assert!(PseudoOrbit::from_sequence(&sys, &good, states.clone(), 0.01).is_ok());
        let bad = vec![u.shift(-1.0), u.clone(), u.shift(0.5)];
        assert!(matches!(PseudoOrbit::from_sequence(&sys, &bad, states, 0.01), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn doubling_map_with_constant_defect() {
        // x' = ln2 x + u has time-one map y -> 2y + u / ln2
        let ln2 = std::f64::consts::LN_2;
        let sys = scalar(ln2);
        let u = ControlFunction::constant(dvector![0.1 * ln2]);
        let p = PseudoOrbit::new(&sys, u, vec![dvector![0.0]; 81], 0.01).unwrap();
        assert!((p.alpha() - 0.1).abs() < 1e-9);
        let r = shadow(&sys, &p, &ShadowParams::default()).unwrap();
        // the window end pins the orbit to 0; the pull decays like 2^{-k}
        assert!((r.y0[0] + 0.1).abs() < 1e-9);
        assert!(r.orbit[..60].iter().all(|y| (y[0] + 0.1).abs() < 1e-6));
        assert!((r.beta - 0.1).abs() < 1e-9);
        assert!(r.residual <= 1e-10);
    }

    #[test]
    fn saddle_shadowing_constant_is_bounded() {
        let sys = saddle();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = ControlFunction::constant(dvector![0.0, 0.0]);
        let alpha = 1e-3;
        let states: Vec<DVector<f64>> = (0..41).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-0.2..0.2) * alpha)).collect();
        let p = PseudoOrbit::new(&sys, u, states, 0.01).unwrap();
        assert!(p.alpha() <= alpha);
        let fixed = ShadowParams {
            splitting: SplittingField::Fixed { e_plus: dmatrix![1.0; 0.0], e_minus: dmatrix![0.0; 1.0] },
            ..ShadowParams::default()
        };
        for params in [ShadowParams::default(), fixed] {
            let r = shadow(&sys, &p, &params).unwrap();
            assert!(r.residual <= 1e-10);
            assert!(r.beta <= 3.0 * p.alpha(), "beta {} alpha {}", r.beta, p.alpha());
            assert!(!r.short_window);
        }
    }

    #[test]
    fn perturbed_seeds_converge_to_the_same_orbit() {
        let sys = saddle();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = ControlFunction::random(sys.range(), -3.0, 1.0, 6, &mut rng).unwrap();
        let states: Vec<DVector<f64>> = (0..21).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5))).collect();
        let p = PseudoOrbit::new(&sys, u, states, 0.01).unwrap();
        let params = ShadowParams::default();
        let a = shadow(&sys, &p, &params).unwrap();
        let seed: Vec<DVector<f64>> = p.states().iter().map(|x| x + dvector![1e-4, -1e-4]).collect();
        let b = shadow_from(&sys, &p, &seed, &params).unwrap();
        assert!(uniqueness_check(&sys, &p, &a, &b, 10.0, 1e-8).unwrap());
        assert!(uniqueness_check(&sys, &p, &a, &a, 10.0, 0.0).unwrap());
        let other = PseudoOrbit::new(&sys, ControlFunction::constant(dvector![0.0, 0.0]), p.states().to_vec(), 0.01).unwrap();
        let c = shadow(&sys, &other, &params).unwrap();
        assert!(uniqueness_check(&sys, &p, &a, &c, 10.0, 1e-8).is_err());
    }

    #[test]
    fn integrator_window_reports_a_center_direction() {
        let sys = ControlAffineSystem::new(
            Arc::new(crate::system::Integrator { n: 1 }),
            Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
            ControlRange::symmetric(1, 0.1).unwrap(),
        )
        .unwrap();
        let p = PseudoOrbit::new(&sys, ControlFunction::constant(dvector![0.0]), vec![dvector![0.0], dvector![0.01], dvector![0.0]], 0.01)
            .unwrap();
        assert!(matches!(shadow(&sys, &p, &ShadowParams::default()), Err(Error::CenterDirection { .. })));
    }

    #[test]
    fn transport_examples() {
        let sys = saddle();
        let q = square(&sys, 1.0);
        let params = TransportParams { max_alpha: 5.0, ..TransportParams::default() };
        let zero = ControlFunction::constant(dvector![0.0, 0.0]);
        let ones = ControlFunction::constant(dvector![1.0, 1.0]);
        let same = fiber_transport(&sys, &q, &zero, &zero, &dvector![0.0, 0.0], &params).unwrap();
        assert!(same.point.norm() < 1e-12);
        let y = fiber_transport(&sys, &q, &zero, &ones, &dvector![0.0, 0.0], &params).unwrap();
        assert!((&y.point - dvector![-1.0, 1.0]).norm() < 1e-3);

        let sc = scalar(1.0);
        let q = square(&sc, 1.0);
        for c in [-0.6, 0.35] {
            let v = ControlFunction::constant(dvector![c]);
            let y = fiber_transport(&sc, &q, &ControlFunction::constant(dvector![0.0]), &v, &dvector![0.0], &params).unwrap();
            assert!((y.point[0] + c).abs() < 1e-4);
        }
    }

    #[test]
    fn homotopy_examples() {
        let sys = saddle();
        let q = square(&sys, 1.0);
        let params = TransportParams::default();
        let family = TestFunctionFamily::new(2, FamilyConfig::default()).unwrap();
        let zero = ControlFunction::constant(dvector![0.0, 0.0]);
        let ones = ControlFunction::constant(dvector![1.0, 1.0]);
        let p = homotopy_transport(&sys, &q, &zero, &zero, &dvector![0.0, 0.0], 0.5, &family, &params).unwrap();
        assert_eq!(p.legs.len(), 1);
        assert!(p.endpoint().unwrap().norm() < 1e-12);
        let p = homotopy_transport(&sys, &q, &zero, &ones, &dvector![0.0, 0.0], 0.5, &family, &params).unwrap();
        assert!(p.completed && p.leg_count >= 2);
        assert!((p.endpoint().unwrap() - dvector![-1.0, 1.0]).norm() < 1e-3);
        let three = homotopy_transport_legs(&sys, &q, &zero, &ones, &dvector![0.0, 0.0], p.leg_count + 3, &params).unwrap();
        assert!((three.endpoint().unwrap() - p.endpoint().unwrap()).norm() < 1e-6);
    }

    #[test]
    fn graph_verify_gates_on_a_single_equilibrium() {
        let sys = ControlAffineSystem::new(
            Arc::new(BistableCubic),
            Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
            ControlRange::symmetric(1, 0.1).unwrap(),
        )
        .unwrap();
        let q = square(&sys, 1.5);
        let r = graph_verify(&sys, &q, &dvector![0.0], &GraphVerifyParams { n_controls: 2, ..Default::default() }).unwrap();
        assert!(!r.hypothesis_ok);
        assert!(r.hypothesis_note.contains("hypothesis failed"));
    }

    #[test]
    fn graph_verify_on_the_saddle() {
        let sys = saddle();
        let q = square(&sys, 1.0);
        let params = GraphVerifyParams { n_controls: 4, continuity_controls: 4, ..Default::default() };
        let r = graph_verify(&sys, &q, &dvector![0.0, 0.0], &params).unwrap();
        assert!(r.hypothesis_ok);
        assert_eq!(r.singleton_rate, 1.0);
        assert!(r.failures.is_empty(), "{:?}", r.failures);
        assert!(r.max_discrepancy < 1e-3);
        assert!(r.max_round_trip < 1e-6);
        assert_eq!(r.continuity_pairs.len(), 6);
    }
}
