//! Run configuration: one strict JSON document, validated field by field.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chain::{ChainParams, EquilibriumParams, FiberParams, StateGrid};
use crate::control::{ControlFunction, ControlRange};
use crate::error::{Error, Result};
use crate::hyperbolic::SplittingParams;
use crate::metric::FamilyConfig;
use crate::shadow::{GraphVerifyParams, ShadowParams, SplittingField, TransportParams};
use crate::system::{catalog_fields, catalog_params, ControlAffineSystem, Domain, VectorFields};
use crate::util::item_rng;

const CONTROL_SPEC_STREAM: u64 = 0x636f_6e66;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// A control given in the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Constant(Vec<f64>),
    Piecewise { knots: Vec<f64>, values: Vec<Vec<f64>> },
    /// Uniform random values in the control range on `pieces` pieces from
    /// `start`; `stream` selects an independent draw for the run seed.
    Random { start: f64, piece: f64, pieces: usize, stream: u64 },
}

impl ControlSpec {
    /// Builds `spec`, or the constant control at the center of `range`.
    pub fn build_or_center(spec: &Option<ControlSpec>, range: &ControlRange, seed: u64) -> Result<ControlFunction> {
        match spec {
            Some(s) => s.build(range, seed),
            None => Ok(ControlFunction::constant(range.center().clone())),
        }
    }

    pub fn build(&self, range: &ControlRange, seed: u64) -> Result<ControlFunction> {
        let vec = |v: &Vec<f64>| DVector::from_column_slice(v);
        match self {
            ControlSpec::Constant(v) => Ok(ControlFunction::constant(vec(v))),
            ControlSpec::Piecewise { knots, values } => {
                ControlFunction::piecewise(knots, values.iter().map(vec).collect())
            }
            ControlSpec::Random { start, piece, pieces, stream } => {
                let mut rng = item_rng(seed, CONTROL_SPEC_STREAM, *stream);
                ControlFunction::random(range, *start, *piece, *pieces, &mut rng)
            }
        }
    }

    fn values(&self) -> Vec<&Vec<f64>> {
        match self {
            ControlSpec::Constant(v) => vec![v],
            ControlSpec::Piecewise { values, .. } => values.iter().collect(),
            ControlSpec::Random { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSpec {
    /// Cell width per axis, or one value for all axes.
    pub h: Vec<f64>,
    pub eps: f64,
    pub transition_time: f64,
    pub samples_per_cell: usize,
    pub controls_per_cell: usize,
    pub step: f64,
    /// Which chain control set downstream commands use, by rank in size.
    pub set_index: usize,
}

impl Default for ChainSpec {
    fn default() -> Self {
        let p = ChainParams::default();
        Self {
            h: vec![0.01],
            eps: p.eps,
            transition_time: p.transition_time,
            samples_per_cell: p.samples_per_cell,
            controls_per_cell: p.controls_per_cell,
            step: p.step,
            set_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplittingSpec {
    pub window: f64,
    pub gap_tol: f64,
    pub step: f64,
    pub reorth: f64,
    pub rate_times: usize,
    pub rate_vectors: usize,
    /// Defaults to the center of the control range.
    pub control: Option<ControlSpec>,
    /// Base point; defaults to the equilibrium of a constant control.
    pub point: Option<Vec<f64>>,
}

impl Default for SplittingSpec {
    fn default() -> Self {
        let p = SplittingParams::default();
        Self {
            window: p.window,
            gap_tol: p.gap_tol,
            step: p.step,
            reorth: p.reorth,
            rate_times: p.rate_times,
            rate_vectors: p.rate_vectors,
            control: None,
            point: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowSpec {
    /// Half window `K`: states at times `-K..=K`.
    pub k: usize,
    pub orbit_tol: f64,
    pub max_iters: usize,
    pub step: f64,
    pub gap_tol: f64,
    /// Size of the random state perturbations making the pseudo-orbit.
    pub alpha: f64,
    /// Newton seeds for the uniqueness check, perturbed by this much.
    pub seed_offset: f64,
    pub merge_tol: f64,
    pub control: Option<ControlSpec>,
    pub point: Option<Vec<f64>>,
}

impl Default for ShadowSpec {
    fn default() -> Self {
        let p = ShadowParams::default();
        Self {
            k: 20,
            orbit_tol: p.orbit_tol,
            max_iters: p.max_iters,
            step: p.step,
            gap_tol: 0.1,
            alpha: 1e-3,
            seed_offset: 1e-3,
            merge_tol: 1e-8,
            control: None,
            point: None,
        }
    }
}

impl ShadowSpec {
    pub fn params(&self) -> ShadowParams {
        ShadowParams {
            orbit_tol: self.orbit_tol,
            max_iters: self.max_iters,
            step: self.step,
            splitting: SplittingField::Filtration { gap_tol: self.gap_tol },
            ..ShadowParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSpec {
    pub window: usize,
    pub inflate: f64,
    pub max_alpha: f64,
    /// Each homotopy leg moves the control by at most `delta(eps_step)`.
    pub eps_step: f64,
    /// Explicit leg count, overriding `eps_step`.
    pub legs: Option<usize>,
    /// Defaults to the center of the control range.
    pub u: Option<ControlSpec>,
    pub v: Option<ControlSpec>,
    /// Fiber point over `u`; defaults to the equilibrium of a constant `u`.
    pub point: Option<Vec<f64>>,
}

impl Default for TransportSpec {
    fn default() -> Self {
        let p = TransportParams::default();
        Self {
            window: p.window,
            inflate: p.inflate,
            max_alpha: p.max_alpha,
            eps_step: 0.5,
            legs: None,
            u: None,
            v: None,
            point: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphVerifySpec {
    pub n_controls: usize,
    pub control_start: f64,
    pub control_piece: f64,
    pub control_pieces: usize,
    pub round_trip: bool,
    pub continuity_controls: usize,
    /// Constant base control; defaults to the center of the control range.
    pub base_control: Option<Vec<f64>>,
    pub fiber_horizon: f64,
    pub fiber_resolution: f64,
}

impl Default for GraphVerifySpec {
    fn default() -> Self {
        let p = GraphVerifyParams::default();
        let f = FiberParams::default();
        Self {
            n_controls: p.n_controls,
            control_start: p.control_start,
            control_piece: p.control_piece,
            control_pieces: p.control_pieces,
            round_trip: p.round_trip,
            continuity_controls: p.continuity_controls,
            base_control: None,
            fiber_horizon: f.horizon,
            fiber_resolution: f.resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    pub max_level: u32,
    /// Series terms kept by the distance.
    pub truncation: usize,
    pub eps: Vec<f64>,
    pub pairs: usize,
    pub shift_times: Vec<f64>,
    pub control_start: f64,
    pub control_piece: f64,
    pub control_pieces: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            max_level: FamilyConfig::default().max_level,
            truncation: 32,
            eps: vec![0.5, 0.1, 0.02],
            pairs: 100,
            shift_times: (-16..=16).map(|i| i as f64 * 0.25).collect(),
            control_start: -2.0,
            control_piece: 0.5,
            control_pieces: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySpec {
    /// Box sampled for `K`, per axis.
    pub k_lo: Vec<f64>,
    pub k_hi: Vec<f64>,
    pub k_per_axis: usize,
    pub taus: Vec<f64>,
    /// Constant candidate controls on a grid over the control range.
    pub pool_per_axis: usize,
    /// Sub-box of the control range for the constant grid; defaults to the whole range.
    pub pool_lo: Option<Vec<f64>>,
    pub pool_hi: Option<Vec<f64>>,
    /// Also offer the witness control of every `K` sample as a candidate.
    pub pool_witnesses: bool,
    /// Additional random piecewise-constant candidates.
    pub pool_random: usize,
    pub pool_piece: f64,
    pub inflate: f64,
    pub step: f64,
    pub probe_horizon: f64,
    pub formula_tau: f64,
    /// K samples (evenly spread) at which the determinant formula is evaluated.
    pub lift_samples: usize,
    pub splitting_window: f64,
}

impl Default for EntropySpec {
    fn default() -> Self {
        Self {
            k_lo: Vec::new(),
            k_hi: Vec::new(),
            k_per_axis: 101,
            taus: vec![1.0, 2.0, 3.0, 4.0],
            pool_per_axis: 21,
            pool_lo: None,
            pool_hi: None,
            pool_witnesses: false,
            pool_random: 0,
            pool_piece: 1.0,
            inflate: 1.0,
            step: 0.05,
            probe_horizon: 10.0,
            formula_tau: 1.0,
            lift_samples: 5,
            splitting_window: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub domain: Domain,
    pub control_range: RangeSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub chain: ChainSpec,
    #[serde(default)]
    pub splitting: SplittingSpec,
    #[serde(default)]
    pub shadow: ShadowSpec,
    #[serde(default)]
    pub transport: TransportSpec,
    #[serde(default)]
    pub graph_verify: GraphVerifySpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub entropy: EntropySpec,
}

fn field_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field_err(field, format!("must be a positive finite number, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(field_err(field, format!("must be a nonnegative finite number, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(field_err(field, format!("must be at least {min}, got {v}")))
    }
}

fn finite_vec(field: &str, v: &[f64], len: Option<usize>) -> Result<()> {
    if let Some(n) = len {
        if v.len() != n {
            return Err(field_err(field, format!("must have {n} entries, got {}", v.len())));
        }
    }
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(field_err(field, "entries must be finite"))
    }
}

fn control_spec(field: &str, spec: &Option<ControlSpec>, m: usize) -> Result<()> {
    let Some(spec) = spec else { return Ok(()) };
    for v in spec.values() {
        finite_vec(field, v, Some(m))?;
    }
    match spec {
        ControlSpec::Piecewise { knots, values } => {
            finite_vec(&format!("{field}.knots"), knots, None)?;
            if values.len() != knots.len() + 1 {
                return Err(field_err(field, "needs one more value than knots"));
            }
            if knots.windows(2).any(|w| w[0] >= w[1]) {
                return Err(field_err(&format!("{field}.knots"), "must be strictly increasing"));
            }
        }
        ControlSpec::Random { start, piece, pieces, .. } => {
            finite_vec(&format!("{field}.start"), &[*start], None)?;
            positive(&format!("{field}.piece"), *piece)?;
            at_least(&format!("{field}.pieces"), *pieces, 1)?;
        }
        ControlSpec::Constant(_) => {}
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| field_err("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn state_dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_range.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.fields()?;
        let known = catalog_params(&self.system.id);
        for (name, value) in &self.system.params {
            if !known.contains(&name.as_str()) {
                return Err(field_err(
                    &format!("system.params.{name}"),
                    format!("unknown parameter for `{}`; expected one of {known:?}", self.system.id),
                ));
            }
            if !value.is_finite() {
                return Err(field_err(&format!("system.params.{name}"), "must be finite"));
            }
        }
        let fields = self.fields()?;
        let n = self.state_dim();
        let m = self.control_dim();
        match &self.domain {
            Domain::Box { lo, hi } => {
                finite_vec("domain.lo", lo, Some(fields.state_dim()))?;
                finite_vec("domain.hi", hi, Some(fields.state_dim()))?;
                if lo.iter().zip(hi).any(|(a, b)| a >= b) {
                    return Err(field_err("domain", "needs lo < hi on every axis"));
                }
            }
            Domain::Torus { periods } => {
                finite_vec("domain.periods", periods, Some(fields.state_dim()))?;
                for p in periods {
                    positive("domain.periods", *p)?;
                }
            }
        }
        finite_vec("control_range.lo", &self.control_range.lo, Some(fields.control_dim()))?;
        finite_vec("control_range.hi", &self.control_range.hi, Some(fields.control_dim()))?;
        if self.control_range.lo.iter().zip(&self.control_range.hi).any(|(a, b)| a >= b) {
            return Err(field_err("control_range", "needs lo < hi on every component"));
        }

        let c = &self.chain;
        if c.h.len() != 1 && c.h.len() != n {
            return Err(field_err("chain.h", format!("must have 1 or {n} entries")));
        }
        for h in &c.h {
            positive("chain.h", *h)?;
        }
        positive("chain.eps", c.eps)?;
        if c.eps < c.h.iter().cloned().fold(0.0, f64::max) {
            return Err(field_err("chain.eps", "must be at least the cell width h"));
        }
        positive("chain.transition_time", c.transition_time)?;
        at_least("chain.samples_per_cell", c.samples_per_cell, 1)?;
        positive("chain.step", c.step)?;

        let s = &self.splitting;
        positive("splitting.window", s.window)?;
        positive("splitting.gap_tol", s.gap_tol)?;
        positive("splitting.step", s.step)?;
        positive("splitting.reorth", s.reorth)?;
        at_least("splitting.rate_times", s.rate_times, 1)?;
        control_spec("splitting.control", &s.control, m)?;
        if let Some(p) = &s.point {
            finite_vec("splitting.point", p, Some(n))?;
        }

        let s = &self.shadow;
        at_least("shadow.k", s.k, 1)?;
        positive("shadow.orbit_tol", s.orbit_tol)?;
        at_least("shadow.max_iters", s.max_iters, 1)?;
        positive("shadow.step", s.step)?;
        positive("shadow.gap_tol", s.gap_tol)?;
        nonnegative("shadow.alpha", s.alpha)?;
        nonnegative("shadow.seed_offset", s.seed_offset)?;
        positive("shadow.merge_tol", s.merge_tol)?;
        control_spec("shadow.control", &s.control, m)?;
        if let Some(p) = &s.point {
            finite_vec("shadow.point", p, Some(n))?;
        }

        let t = &self.transport;
        at_least("transport.window", t.window, 1)?;
        if !(t.inflate >= 1.0 && t.inflate.is_finite()) {
            return Err(field_err("transport.inflate", "must be at least 1"));
        }
        positive("transport.max_alpha", t.max_alpha)?;
        if !(t.eps_step > 0.0 && t.eps_step < 1.0) {
            return Err(field_err("transport.eps_step", "must lie in (0, 1)"));
        }
        if let Some(l) = t.legs {
            at_least("transport.legs", l, 1)?;
        }
        control_spec("transport.u", &t.u, m)?;
        control_spec("transport.v", &t.v, m)?;
        if let Some(p) = &t.point {
            finite_vec("transport.point", p, Some(n))?;
        }

        let g = &self.graph_verify;
        at_least("graph_verify.n_controls", g.n_controls, 1)?;
        finite_vec("graph_verify.control_start", &[g.control_start], None)?;
        positive("graph_verify.control_piece", g.control_piece)?;
        at_least("graph_verify.control_pieces", g.control_pieces, 1)?;
        if let Some(b) = &g.base_control {
            finite_vec("graph_verify.base_control", b, Some(m))?;
        }
        positive("graph_verify.fiber_horizon", g.fiber_horizon)?;
        positive("graph_verify.fiber_resolution", g.fiber_resolution)?;

        let mt = &self.metric;
        at_least("metric.truncation", mt.truncation, 1)?;
        if mt.eps.is_empty() || mt.eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(field_err("metric.eps", "needs at least one value, each in (0, 1)"));
        }
        if mt.shift_times.is_empty() {
            return Err(field_err("metric.shift_times", "needs at least one time"));
        }
        finite_vec("metric.shift_times", &mt.shift_times, None)?;
        finite_vec("metric.control_start", &[mt.control_start], None)?;
        positive("metric.control_piece", mt.control_piece)?;
        at_least("metric.control_pieces", mt.control_pieces, 1)?;

        let e = &self.entropy;
        if !e.k_lo.is_empty() || !e.k_hi.is_empty() {
            finite_vec("entropy.k_lo", &e.k_lo, Some(n))?;
            finite_vec("entropy.k_hi", &e.k_hi, Some(n))?;
            if e.k_lo.iter().zip(&e.k_hi).any(|(a, b)| a > b) {
                return Err(field_err("entropy", "needs k_lo <= k_hi on every axis"));
            }
        }
        at_least("entropy.k_per_axis", e.k_per_axis, 1)?;
        if e.taus.len() < 3 {
            return Err(field_err("entropy.taus", "needs at least three horizons"));
        }
        for tau in &e.taus {
            positive("entropy.taus", *tau)?;
        }
        at_least("entropy.pool_per_axis", e.pool_per_axis, 1)?;
        match (&e.pool_lo, &e.pool_hi) {
            (None, None) => {}
            (Some(lo), Some(hi)) => {
                finite_vec("entropy.pool_lo", lo, Some(m))?;
                finite_vec("entropy.pool_hi", hi, Some(m))?;
                let inside = |v: &[f64]| {
                    v.iter().zip(self.control_range.lo.iter().zip(&self.control_range.hi)).all(|(x, (a, b))| a <= x && x <= b)
                };
                if !inside(lo) || !inside(hi) || lo.iter().zip(hi).any(|(a, b)| a > b) {
                    return Err(field_err("entropy.pool_lo", "pool box must satisfy lo <= hi inside the control range"));
                }
            }
            _ => return Err(field_err("entropy.pool_lo", "pool_lo and pool_hi go together")),
        }
        positive("entropy.pool_piece", e.pool_piece)?;
        if !(e.inflate >= 1.0 && e.inflate.is_finite()) {
            return Err(field_err("entropy.inflate", "must be at least 1"));
        }
        positive("entropy.step", e.step)?;
        nonnegative("entropy.probe_horizon", e.probe_horizon)?;
        positive("entropy.formula_tau", e.formula_tau)?;
        at_least("entropy.lift_samples", e.lift_samples, 1)?;
        positive("entropy.splitting_window", e.splitting_window)?;
        Ok(())
    }

    pub fn fields(&self) -> Result<Arc<dyn VectorFields>> {
        catalog_fields(&self.system.id, |name| self.system.params.get(name).copied())
    }

    pub fn build_system(&self) -> Result<ControlAffineSystem> {
        let range = ControlRange::from_bounds(&self.control_range.lo, &self.control_range.hi)?;
        ControlAffineSystem::new(self.fields()?, self.domain.clone(), range)
    }

    pub fn grid(&self) -> Result<StateGrid> {
        let h = if self.chain.h.len() == 1 { vec![self.chain.h[0]; self.state_dim()] } else { self.chain.h.clone() };
        StateGrid::new(&self.domain, &h)
    }

    pub fn chain_params(&self) -> ChainParams {
        ChainParams {
            transition_time: self.chain.transition_time,
            eps: self.chain.eps,
            samples_per_cell: self.chain.samples_per_cell,
            controls_per_cell: self.chain.controls_per_cell,
            step: self.chain.step,
            seed: self.seed,
        }
    }

    pub fn splitting_params(&self) -> SplittingParams {
        let s = &self.splitting;
        SplittingParams {
            window: s.window,
            step: s.step,
            gap_tol: s.gap_tol,
            reorth: s.reorth,
            rate_times: s.rate_times,
            rate_vectors: s.rate_vectors,
        }
    }

    pub fn transport_params(&self) -> TransportParams {
        let t = &self.transport;
        TransportParams { window: t.window, shadow: self.shadow.params(), inflate: t.inflate, max_alpha: t.max_alpha }
    }

    pub fn family_config(&self) -> FamilyConfig {
        FamilyConfig { max_level: self.metric.max_level }
    }

    pub fn graph_verify_params(&self) -> GraphVerifyParams {
        let g = &self.graph_verify;
        GraphVerifyParams {
            n_controls: g.n_controls,
            seed: self.seed,
            control_start: g.control_start,
            control_piece: g.control_piece,
            control_pieces: g.control_pieces,
            eps_step: self.transport.eps_step,
            family: self.family_config(),
            transport: self.transport_params(),
            fiber: FiberParams { horizon: g.fiber_horizon, resolution: g.fiber_resolution, ..FiberParams::default() },
            equilibrium: EquilibriumParams::default(),
            round_trip: g.round_trip,
            continuity_controls: g.continuity_controls,
            du_terms: self.metric.truncation,
        }
    }
}
