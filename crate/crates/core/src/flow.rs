//! Fixed-step classical Runge-Kutta integration of the control flow and of its
//! variational equation.
//!
//! Substeps are cut at every control breakpoint, so each RK4 stage sees a
//! single constant control value. Backward integration runs the same scheme
//! with a negative step, which is the forward scheme applied to the negated
//! fields driven by the time-reversed control `s -> u(-s)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::system::ControlAffineSystem;

/// Default integration step in seconds.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub control: ControlFunction,
}

impl Trajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectories are nonempty")
    }

    /// Largest distance between each recorded state and a one-step replay
    /// from its predecessor.
    pub fn replay_residual(&self, sys: &ControlAffineSystem, step: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 1..self.states.len() {
            let y = flow_point(sys, &self.states[i - 1], &self.control, self.times[i - 1], self.times[i], step)?;
            worst = worst.max(sys.domain().distance(y.as_slice(), self.states[i].as_slice()));
        }
        Ok(worst)
    }
}

/// Whether an observed grid point lets integration continue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Observe {
    Continue,
    Stop,
}

/// RK4 stepper for the state together with `k` tangent columns.
///
/// The working vector is `[x (n), V (n x k, column-major)]` with
/// `x' = F(x, u)` and `V' = DF(x, u) V`.
pub(crate) struct Stepper<'a> {
    sys: &'a ControlAffineSystem,
    n: usize,
    k: usize,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    jac: Vec<f64>,
    cuts: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(sys: &'a ControlAffineSystem, tangent_columns: usize) -> Self {
        let n = sys.dim_n();
        let len = n * (1 + tangent_columns);
        Self {
            sys,
            n,
            k: tangent_columns,
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            tmp: vec![0.0; len],
            jac: vec![0.0; n * n],
            cuts: Vec::new(),
        }
    }

    fn deriv(sys: &ControlAffineSystem, n: usize, k: usize, jac: &mut [f64], s: &[f64], u: &[f64], out: &mut [f64]) {
        let fields = sys.fields();
        fields.rhs(&s[..n], u, &mut out[..n]);
        if k > 0 {
            fields.rhs_jacobian(&s[..n], u, jac);
            for c in 0..k {
                let col = &s[n * (1 + c)..n * (2 + c)];
                for i in 0..n {
                    let row = &jac[i * n..(i + 1) * n];
                    out[n * (1 + c) + i] = row.iter().zip(col).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn rk4(&mut self, s: &mut [f64], u: &[f64], dt: f64) {
        let (n, k) = (self.n, self.k);
        Self::deriv(self.sys, n, k, &mut self.jac, s, u, &mut self.k1);
        for i in 0..s.len() {
            self.tmp[i] = s[i] + 0.5 * dt * self.k1[i];
        }
        Self::deriv(self.sys, n, k, &mut self.jac, &self.tmp, u, &mut self.k2);
        for i in 0..s.len() {
            self.tmp[i] = s[i] + 0.5 * dt * self.k2[i];
        }
        Self::deriv(self.sys, n, k, &mut self.jac, &self.tmp, u, &mut self.k3);
        for i in 0..s.len() {
            self.tmp[i] = s[i] + dt * self.k3[i];
        }
        Self::deriv(self.sys, n, k, &mut self.jac, &self.tmp, u, &mut self.k4);
        for i in 0..s.len() {
            s[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    /// One grid step from `a` to `b`, cut at the breakpoints of `u` in between.
    fn grid_step(&mut self, s: &mut [f64], u: &ControlFunction, a: f64, b: f64) {
        let mut cuts = std::mem::take(&mut self.cuts);
        cuts.clear();
        cuts.extend(u.knots_between(a, b));
        if b < a {
            cuts.reverse();
        }
        cuts.push(b);
        let mut from = a;
        for &to in &cuts {
            if to != from {
                let value = u.eval(0.5 * (from + to));
                self.rk4(s, value.as_slice(), to - from);
                from = to;
            }
        }
        self.cuts = cuts;
        self.sys.domain().wrap(&mut s[..self.n]);
    }

    /// Integrates from `t0` to `t1` (either direction) on the grid
    /// `t0 + j * step`, calling `observe` at every grid time including both ends.
    ///
    /// Returns the time reached, which is earlier than `t1` only if the
    /// observer asked to stop.
    pub(crate) fn advance(
        &mut self,
        s: &mut [f64],
        u: &ControlFunction,
        t0: f64,
        t1: f64,
        step: f64,
        mut observe: impl FnMut(f64, &[f64]) -> Observe,
    ) -> Result<f64> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid(format!("integration step must be positive, got {step}")));
        }
        if !(t0.is_finite() && t1.is_finite()) {
            return Err(Error::invalid("integration times must be finite"));
        }
        if observe(t0, s) == Observe::Stop {
            return Ok(t0);
        }
        let span = (t1 - t0).abs();
        let dir = if t1 >= t0 { 1.0 } else { -1.0 };
        let steps = ((span / step) - 1e-9).ceil().max(0.0) as usize;
        let mut t = t0;
        for j in 1..=steps {
            let next = if j == steps { t1 } else { t0 + dir * step * j as f64 };
            self.grid_step(s, u, t, next);
            t = next;
            if !self.sys.domain().in_safety_box(&s[..self.n]) || s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Escape { time: t });
            }
            if observe(t, s) == Observe::Stop {
                return Ok(t);
            }
        }
        Ok(t)
    }
}

fn check_inputs(sys: &ControlAffineSystem, x0: &DVector<f64>, u: &ControlFunction) -> Result<()> {
    if x0.len() != sys.dim_n() {
        return Err(Error::invalid(format!("state has length {}, expected {}", x0.len(), sys.dim_n())));
    }
    if !sys.range().contains_function(u) {
        return Err(Error::invalid("control takes values outside the control range"));
    }
    if !sys.domain().in_safety_box(x0.as_slice()) {
        return Err(Error::invalid(format!("initial state {:?} lies outside the safety box", x0.as_slice())));
    }
    Ok(())
}

/// `phi(t, x0, u)` sampled on the step grid of `[t0, t1]`.
///
/// For `t1 < t0` the solution is computed backward; the returned samples are
/// still ordered by increasing time.
pub fn integrate(
    sys: &ControlAffineSystem,
    x0: &DVector<f64>,
    u: &ControlFunction,
    t0: f64,
    t1: f64,
    step: f64,
) -> Result<Trajectory> {
    check_inputs(sys, x0, u)?;
    let mut s = x0.as_slice().to_vec();
    sys.domain().wrap(&mut s);
    let mut times = Vec::new();
    let mut states = Vec::new();
    Stepper::new(sys, 0).advance(&mut s, u, t0, t1, step, |t, s| {
        times.push(t);
        states.push(DVector::from_column_slice(s));
        Observe::Continue
    })?;
    if t1 < t0 {
        times.reverse();
        states.reverse();
    }
    Ok(Trajectory { times, states, control: u.clone() })
}

/// Endpoint `phi(t1 - t0, x, theta_{t0} u)` of the solution started at time `t0`.
pub fn flow_point(
    sys: &ControlAffineSystem,
    x: &DVector<f64>,
    u: &ControlFunction,
    t0: f64,
    t1: f64,
    step: f64,
) -> Result<DVector<f64>> {
    check_inputs(sys, x, u)?;
    let mut s = x.as_slice().to_vec();
    sys.domain().wrap(&mut s);
    Stepper::new(sys, 0).advance(&mut s, u, t0, t1, step, |_, _| Observe::Continue)?;
    Ok(DVector::from_vec(s))
}

/// Endpoint together with the derivative `d phi_{t1 - t0}` of the flow.
pub fn flow_with_derivative(
    sys: &ControlAffineSystem,
    x: &DVector<f64>,
    u: &ControlFunction,
    t0: f64,
    t1: f64,
    step: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_inputs(sys, x, u)?;
    let n = sys.dim_n();
    let mut s = vec![0.0; n * (n + 1)];
    s[..n].copy_from_slice(x.as_slice());
    sys.domain().wrap(&mut s[..n]);
    for i in 0..n {
        s[n * (1 + i) + i] = 1.0;
    }
    Stepper::new(sys, n).advance(&mut s, u, t0, t1, step, |_, _| Observe::Continue)?;
    let point = DVector::from_column_slice(&s[..n]);
    let deriv = DMatrix::from_column_slice(n, n, &s[n..]);
    Ok((point, deriv))
}

/// `d phi_{t,u}(x0)`, from the joint state and tangent system.
pub fn variational_flow(
    sys: &ControlAffineSystem,
    x0: &DVector<f64>,
    u: &ControlFunction,
    t: f64,
    step: f64,
) -> Result<DMatrix<f64>> {
    Ok(flow_with_derivative(sys, x0, u, 0.0, t, step)?.1)
}

/// First time in `[t0, t1]` (on the step grid) at which `inside` fails, or
/// `None` if the trajectory stays inside throughout. Escape from the safety
/// box counts as leaving.
pub(crate) fn exit_time(
    sys: &ControlAffineSystem,
    x: &[f64],
    u: &ControlFunction,
    t0: f64,
    t1: f64,
    step: f64,
    inside: impl Fn(&[f64]) -> bool,
) -> Result<Option<f64>> {
    let mut s = x.to_vec();
    sys.domain().wrap(&mut s);
    let mut exit = None;
    let res = Stepper::new(sys, 0).advance(&mut s, u, t0, t1, step, |t, s| {
        if inside(s) {
            Observe::Continue
        } else {
            exit = Some(t);
            Observe::Stop
        }
    });
    match res {
        Ok(_) => Ok(exit),
        Err(Error::Escape { time }) => Ok(Some(time)),
        Err(e) => Err(e),
    }
}
