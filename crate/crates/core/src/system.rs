//! Control-affine systems `x' = f_0(x) + sum_i u_i f_i(x)` on a box or a flat torus.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlRange;
use crate::error::{Error, Result};

/// The vector fields of a control-affine system. Index 0 is the drift.
///
/// Jacobians are written row-major into an `n * n` slice.
pub trait VectorFields: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn field(&self, index: usize, x: &[f64], out: &mut [f64]);
    fn field_jacobian(&self, index: usize, x: &[f64], out: &mut [f64]);

    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        self.field(0, x, out);
        let mut tmp = vec![0.0; n];
        for (i, ui) in u.iter().enumerate() {
            if *ui != 0.0 {
                self.field(i + 1, x, &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += ui * t);
            }
        }
    }

    fn rhs_jacobian(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        self.field_jacobian(0, x, out);
        let mut tmp = vec![0.0; n * n];
        for (i, ui) in u.iter().enumerate() {
            if *ui != 0.0 {
                self.field_jacobian(i + 1, x, &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += ui * t);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `(R / p_1 Z) x ... x (R / p_n Z)`, coordinates kept in `[0, p_i)`.
    Torus { periods: Vec<f64> },
}

impl Domain {
    pub fn new_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("box bounds must be nonempty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(Error::invalid("box bounds must be finite with lo < hi"));
        }
        Ok(Domain::Box { lo, hi })
    }

    pub fn new_torus(periods: Vec<f64>) -> Result<Self> {
        if periods.is_empty() || periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("torus periods must be finite and positive"));
        }
        Ok(Domain::Torus { periods })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Torus { periods } => periods.len(),
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self, Domain::Torus { .. })
    }

    /// Coordinate bounds of the fundamental region.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
            Domain::Torus { periods } => (vec![0.0; periods.len()], periods.clone()),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Box { lo, hi } => {
                x.len() == lo.len() && x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
            }
            Domain::Torus { periods } => x.len() == periods.len() && x.iter().all(|v| v.is_finite()),
        }
    }

    /// Box inflated by a factor 2 about its center; the whole torus.
    pub fn in_safety_box(&self, x: &[f64]) -> bool {
        match self {
            Domain::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| {
                let c = 0.5 * (a + b);
                (v - c).abs() <= (b - a)
            }),
            Domain::Torus { .. } => x.iter().all(|v| v.is_finite()),
        }
    }

    pub fn wrap(&self, x: &mut [f64]) {
        if let Domain::Torus { periods } = self {
            for (v, p) in x.iter_mut().zip(periods) {
                *v = v.rem_euclid(*p);
                if *v >= *p {
                    *v = 0.0;
                }
            }
        }
    }

    /// Shortest displacement `b - a` (minimal image on the torus).
    pub fn displacement(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            Domain::Box { .. } => a.iter().zip(b).map(|(x, y)| y - x).collect(),
            Domain::Torus { periods } => a
                .iter()
                .zip(b)
                .zip(periods)
                .map(|((x, y), p)| {
                    let d = (y - x).rem_euclid(*p);
                    if d > 0.5 * p {
                        d - p
                    } else {
                        d
                    }
                })
                .collect(),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.displacement(a, b).iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// A control-affine system with its state domain and control range.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    fields: Arc<dyn VectorFields>,
    domain: Domain,
    range: ControlRange,
}

impl ControlAffineSystem {
    pub fn new(fields: Arc<dyn VectorFields>, domain: Domain, range: ControlRange) -> Result<Self> {
        if fields.state_dim() != domain.dim() {
            return Err(Error::invalid(format!(
                "vector fields act on R^{} but the domain has dimension {}",
                fields.state_dim(),
                domain.dim()
            )));
        }
        if fields.control_dim() != range.dim() {
            return Err(Error::invalid(format!(
                "system takes {} controls but the control range has dimension {}",
                fields.control_dim(),
                range.dim()
            )));
        }
        Ok(Self { fields, domain, range })
    }

    pub fn dim_n(&self) -> usize {
        self.fields.state_dim()
    }

    pub fn dim_m(&self) -> usize {
        self.fields.control_dim()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn range(&self) -> &ControlRange {
        &self.range
    }

    pub fn fields(&self) -> &dyn VectorFields {
        self.fields.as_ref()
    }

    /// Same fields and domain with a different control range.
    pub fn with_range(&self, range: ControlRange) -> Result<Self> {
        Self::new(self.fields.clone(), self.domain.clone(), range)
    }

    /// `f_0(x) + sum_i u_i f_i(x)` after validating `x` and `u`.
    pub fn eval_rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.domain.contains(x.as_slice()) {
            return Err(Error::invalid(format!("state {:?} lies outside the domain", x.as_slice())));
        }
        if !self.range.contains(u.as_slice()) {
            return Err(Error::invalid(format!("control {:?} lies outside the control range", u.as_slice())));
        }
        let mut out = DVector::zeros(self.dim_n());
        self.fields.rhs(x.as_slice(), u.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Jacobian of the right-hand side in `x` for a fixed control value.
    pub fn rhs_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim_n();
        let mut buf = vec![0.0; n * n];
        self.fields.rhs_jacobian(x.as_slice(), u.as_slice(), &mut buf);
        DMatrix::from_row_slice(n, n, &buf)
    }

    /// Largest relative deviation between the analytic Jacobians and central
    /// differences of the fields, over `samples` random points of the domain.
    pub fn jacobian_fd_error<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> f64 {
        let n = self.dim_n();
        let (lo, hi) = self.domain.bounds();
        let mut worst: f64 = 0.0;
        let mut jac = vec![0.0; n * n];
        let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..samples {
            let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.gen_range(*a..*b)).collect();
            for index in 0..=self.dim_m() {
                self.fields.field_jacobian(index, &x, &mut jac);
                let scale = jac.iter().fold(1.0f64, |s, v| s.max(v.abs()));
                for j in 0..n {
                    let h = 1e-6 * (1.0 + x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    self.fields.field(index, &xp, &mut fp);
                    self.fields.field(index, &xm, &mut fm);
                    for i in 0..n {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        worst = worst.max((fd - jac[i * n + j]).abs() / scale);
                    }
                }
            }
        }
        worst
    }

    /// True when every field vanishes at all sampled points.
    pub fn is_degenerate<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> bool {
        let n = self.dim_n();
        let (lo, hi) = self.domain.bounds();
        let mut out = vec![0.0; n];
        (0..samples.max(1)).all(|_| {
            let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.gen_range(*a..*b)).collect();
            (0..=self.dim_m()).all(|i| {
                self.fields.field(i, &x, &mut out);
                out.iter().all(|v| *v == 0.0)
            })
        })
    }
}

/// `x' = a x + u`.
#[derive(Debug, Clone)]
pub struct ScalarAffine {
    pub a: f64,
}

impl VectorFields for ScalarAffine {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn field(&self, index: usize, x: &[f64], out: &mut [f64]) {
        out[0] = if index == 0 { self.a * x[0] } else { 1.0 };
    }
    fn field_jacobian(&self, index: usize, _x: &[f64], out: &mut [f64]) {
        out[0] = if index == 0 { self.a } else { 0.0 };
    }
    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.a * x[0] + u[0];
    }
    fn rhs_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.a;
    }
}

/// `x' = a x + u_1`, `y' = -b y + u_2`.
#[derive(Debug, Clone)]
pub struct Saddle2d {
    pub a: f64,
    pub b: f64,
}

impl VectorFields for Saddle2d {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn field(&self, index: usize, x: &[f64], out: &mut [f64]) {
        match index {
            0 => {
                out[0] = self.a * x[0];
                out[1] = -self.b * x[1];
            }
            1 => {
                out[0] = 1.0;
                out[1] = 0.0;
            }
            _ => {
                out[0] = 0.0;
                out[1] = 1.0;
            }
        }
    }
    fn field_jacobian(&self, index: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if index == 0 {
            out[0] = self.a;
            out[3] = -self.b;
        }
    }
    fn rhs(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = self.a * x[0] + u[0];
        out[1] = -self.b * x[1] + u[1];
    }
    fn rhs_jacobian(&self, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = self.a;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = -self.b;
    }
}

/// On the 2-torus `[0, 2 pi)^2`:
/// `x' = -a sin x + u_1`, `y' = b sin y + s sin x + u_2`.
///
/// For `|u| < min(a, b)` the equilibrium near the origin is a hyperbolic
/// saddle (stable in `x`, unstable in `y`) and the shear term couples the two.
#[derive(Debug, Clone)]
pub struct TorusShear {
    pub a: f64,
    pub b: f64,
    pub s: f64,
}

impl TorusShear {
    pub const PERIOD: f64 = TAU;
}

impl VectorFields for TorusShear {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn field(&self, index: usize, x: &[f64], out: &mut [f64]) {
        match index {
            0 => {
                out[0] = -self.a * x[0].sin();
                out[1] = self.b * x[1].sin() + self.s * x[0].sin();
            }
            1 => {
                out[0] = 1.0;
                out[1] = 0.0;
            }
            _ => {
                out[0] = 0.0;
                out[1] = 1.0;
            }
        }
    }
    fn field_jacobian(&self, index: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if index == 0 {
            out[0] = -self.a * x[0].cos();
            out[2] = self.s * x[0].cos();
            out[3] = self.b * x[1].cos();
        }
    }
}

/// `x' = u` in `R^n`; every finite-time exponent is zero.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub n: usize,
}

impl VectorFields for Integrator {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.n
    }
    fn field(&self, index: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if index > 0 {
            out[index - 1] = 1.0;
        }
    }
    fn field_jacobian(&self, _index: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// All fields identically zero.
#[derive(Debug, Clone)]
pub struct ZeroFields {
    pub n: usize,
    pub m: usize,
}

impl VectorFields for ZeroFields {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn field(&self, _index: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn field_jacobian(&self, _index: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// `x' = x - x^3 + u`, equilibria near -1, 0 and 1 for small `u`.
#[derive(Debug, Clone)]
pub struct BistableCubic;

impl VectorFields for BistableCubic {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn field(&self, index: usize, x: &[f64], out: &mut [f64]) {
        out[0] = if index == 0 { x[0] - x[0].powi(3) } else { 1.0 };
    }
    fn field_jacobian(&self, index: usize, x: &[f64], out: &mut [f64]) {
        out[0] = if index == 0 { 1.0 - 3.0 * x[0] * x[0] } else { 0.0 };
    }
}

/// Catalog identifiers accepted by [`catalog_fields`].
pub const CATALOG_IDS: &[&str] = &["scalar_affine", "saddle2d", "torus_shear", "integrator", "zero", "bistable_cubic"];

/// Looks up a named system; `param` returns the named parameter or `None`.
pub fn catalog_fields(id: &str, param: impl Fn(&str) -> Option<f64>) -> Result<Arc<dyn VectorFields>> {
    let get = |name: &str, default: f64| param(name).unwrap_or(default);
    let dim = |name: &str| -> Result<usize> {
        let v = get(name, 1.0);
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config { field: format!("system.params.{name}"), message: "must be a positive integer".into() })
        }
    };
    Ok(match id {
        "scalar_affine" => Arc::new(ScalarAffine { a: get("a", 1.0) }),
        "saddle2d" => Arc::new(Saddle2d { a: get("a", 1.0), b: get("b", 1.0) }),
        "torus_shear" => Arc::new(TorusShear { a: get("a", 1.0), b: get("b", 1.0), s: get("s", 0.5) }),
        "integrator" => Arc::new(Integrator { n: dim("n")? }),
        "zero" => Arc::new(ZeroFields { n: dim("n")?, m: dim("m")? }),
        "bistable_cubic" => Arc::new(BistableCubic),
        other => {
            return Err(Error::Config {
                field: "system.id".into(),
                message: format!("unknown system `{other}`; expected one of {CATALOG_IDS:?}"),
            })
        }
    })
}

/// Parameter names each catalog entry understands.
pub fn catalog_params(id: &str) -> &'static [&'static str] {
    match id {
        "scalar_affine" => &["a"],
        "saddle2d" => &["a", "b"],
        "torus_shear" => &["a", "b", "s"],
        "integrator" => &["n"],
        "zero" => &["n", "m"],
        _ => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn saddle() -> ControlAffineSystem {
        ControlAffineSystem::new(
            Arc::new(Saddle2d { a: 1.0, b: 1.0 }),
            Domain::new_box(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap(),
            ControlRange::symmetric(2, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn scalar() -> ControlAffineSystem {
        ControlAffineSystem::new(
            Arc::new(ScalarAffine { a: 1.0 }),
            Domain::new_box(vec![-2.0], vec![2.0]).unwrap(),
            ControlRange::symmetric(1, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn eval_rhs_examples() {
        assert_eq!(saddle().eval_rhs(&dvector![1.0, 0.0], &dvector![0.0, 0.0]).unwrap(), dvector![1.0, 0.0]);
        assert_eq!(scalar().eval_rhs(&dvector![0.5], &dvector![-0.5]).unwrap(), dvector![0.0]);
        assert_eq!(scalar().eval_rhs(&dvector![1.0], &dvector![1.0]).unwrap(), dvector![2.0]);
    }

    #[test]
    fn eval_rhs_rejects_bad_inputs() {
        assert!(matches!(scalar().eval_rhs(&dvector![3.0], &dvector![0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(scalar().eval_rhs(&dvector![0.0], &dvector![1.5]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn catalog_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let systems: Vec<Arc<dyn VectorFields>> = vec![
            Arc::new(ScalarAffine { a: 1.3 }),
            Arc::new(Saddle2d { a: 1.0, b: 2.0 }),
            Arc::new(TorusShear { a: 1.0, b: 1.5, s: 0.5 }),
            Arc::new(BistableCubic),
            Arc::new(Integrator { n: 2 }),
        ];
        for fields in systems {
            let n = fields.state_dim();
            let sys = ControlAffineSystem::new(
                fields.clone(),
                Domain::new_box(vec![-2.0; n], vec![2.0; n]).unwrap(),
                ControlRange::symmetric(fields.control_dim(), 1.0).unwrap(),
            )
            .unwrap();
            let err = sys.jacobian_fd_error(20, &mut rng);
            assert!(err <= 1e-5, "{fields:?}: {err}");
        }
    }

    #[test]
    fn specialised_rhs_matches_field_sum() {
        #[derive(Debug)]
        struct Plain(TorusShear);
        impl VectorFields for Plain {
            fn state_dim(&self) -> usize {
                2
            }
            fn control_dim(&self) -> usize {
                2
            }
            fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
                self.0.field(i, x, out)
            }
            fn field_jacobian(&self, i: usize, x: &[f64], out: &mut [f64]) {
                self.0.field_jacobian(i, x, out)
            }
        }
        let s = Saddle2d { a: 1.5, b: 0.5 };
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        s.rhs(&[0.3, -0.7], &[0.2, 0.9], &mut a);
        s.field(0, &[0.3, -0.7], &mut b);
        assert_eq!(a, [b[0] + 0.2, b[1] + 0.9]);
        let p = Plain(TorusShear { a: 1.0, b: 1.0, s: 0.5 });
        p.rhs(&[0.3, 0.1], &[0.2, -0.1], &mut a);
        assert!((a[0] - (-(0.3f64).sin() + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn torus_wraps_and_measures_minimal_image() {
        let d = Domain::new_torus(vec![TAU, TAU]).unwrap();
        let mut x = [TAU + 0.5, -0.25];
        d.wrap(&mut x);
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - (TAU - 0.25)).abs() < 1e-12);
        assert!((d.distance(&[0.1, 0.0], &[TAU - 0.1, 0.0]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn safety_box_is_twice_the_domain() {
        let d = Domain::new_box(vec![-2.0], vec![2.0]).unwrap();
        assert!(d.in_safety_box(&[3.9]));
        assert!(!d.in_safety_box(&[4.1]));
        assert!(!d.contains(&[2.1]));
    }

    #[test]
    fn zero_fields_are_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = ControlAffineSystem::new(
            Arc::new(ZeroFields { n: 1, m: 1 }),
            Domain::new_box(vec![-1.0], vec![1.0]).unwrap(),
            ControlRange::symmetric(1, 1.0).unwrap(),
        )
        .unwrap();
        assert!(sys.is_degenerate(10, &mut rng));
        assert!(!scalar().is_degenerate(10, &mut rng));
    }
}
