//! Command-line front end. Each subcommand reads one JSON configuration,
//! runs one pipeline stage and writes its results into the output directory.
//!
//! Exit codes: 0 success, 1 rejected input, 2 numerical failure.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use crate::chain::{
    build_transition_graph, chain_control_sets, equilibria, fiber, ChainControlSet, EquilibriumParams,
    FiberParams, GraphDiagnostics, WitnessReplay,
};
use crate::control::ControlFunction;
use crate::entropy::{h_inv_direct, h_inv_formula, r_inv_counts, uniform_samples, AdmissiblePair, SlopeFit};
use crate::error::{Error, Result};
use crate::flow::flow_point;
use crate::hyperbolic::{estimate_splitting, projection_commutation, SplittingParams};
use crate::metric::{delta_for_epsilon, near_pair, sup_shift_distance, TestFunctionFamily};
use crate::shadow::{
    graph_verify, homotopy_transport, homotopy_transport_legs, shadow, shadow_from, uniqueness_check, PseudoOrbit,
};
use crate::system::ControlAffineSystem;
use crate::util::item_rng;

pub use config::{ControlSpec, RunConfig};
use output::{fmt_f64, write_csv, write_json, Envelope};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const SHADOW_NOISE_STREAM: u64 = 0x6e6f_6973;
const SHADOW_SEED_STREAM: u64 = 0x7365_6564;
const METRIC_STREAM: u64 = 0x6d65_7472;
const POOL_STREAM: u64 = 0x706f_6f6c;

#[derive(Debug, Parser)]
#[command(name = "hyperlift", version, about = "Chain control sets, hyperbolicity, shadowing and invariance entropy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Transition graph and chain control sets; writes cells.csv and summary.json.
    Chain(Common),
    /// Hyperbolic splitting along one lifted trajectory.
    Splitting(Common),
    /// Shadows a randomly perturbed orbit.
    Shadow(Common),
    /// Homotopy transport of a fiber point from control u to control v.
    Transport(Common),
    /// Sampled check that the lift over Q is a graph over control space.
    GraphVerify(Common),
    /// Spanning-set counts and the two entropy estimates; writes entropy.csv.
    Entropy(Common),
    /// Uniform shift bound of the control metric on random pairs.
    MetricProbe(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Chain(c) => ("chain", c),
            Command::Splitting(c) => ("splitting", c),
            Command::Shadow(c) => ("shadow", c),
            Command::Transport(c) => ("transport", c),
            Command::GraphVerify(c) => ("graph-verify", c),
            Command::Entropy(c) => ("entropy", c),
            Command::MetricProbe(c) => ("metric-probe", c),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, common) = cli.command.parts();
    match execute(name, common) {
        Ok(summary) => {
            println!("{name}: {summary}");
            0
        }
        Err(e) => {
            eprintln!("hyperlift {name}: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(name: &str, common: &Common) -> Result<String> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Error::Config { field: "--config".into(), message: format!("{}: {e}", common.config.display()) })?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.threads == Some(0) {
        return Err(Error::Config { field: "--threads".into(), message: "must be at least 1".into() });
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hyperlift-out"));
    fs::create_dir_all(&out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let run = Run { cfg: &cfg, hash: cfg.hash(), out: &out, command: name };
    pool.install(|| match name {
        "chain" => run.chain(),
        "splitting" => run.splitting(),
        "shadow" => run.shadow(),
        "transport" => run.transport(),
        "graph-verify" => run.graph_verify(),
        "entropy" => run.entropy(),
        "metric-probe" => run.metric_probe(),
        _ => unreachable!("clap only yields known subcommands"),
    })
}

struct Run<'a> {
    cfg: &'a RunConfig,
    hash: String,
    out: &'a Path,
    command: &'a str,
}

#[derive(Debug, Serialize)]
struct SetSummary {
    index: usize,
    cells: usize,
    hull_lo: Vec<f64>,
    hull_hi: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ChainSummary {
    grid_counts: Vec<usize>,
    grid_widths: Vec<f64>,
    eps: f64,
    transition_time: f64,
    diagnostics: GraphDiagnostics,
    witness_replay: WitnessReplay,
    sets: Vec<SetSummary>,
}

fn set_summary(index: usize, q: &ChainControlSet) -> SetSummary {
    let (lo, hi) = q.hull();
    SetSummary { index, cells: q.len(), hull_lo: lo.to_vec(), hull_hi: hi.to_vec() }
}

fn vec_of(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

impl Run<'_> {
    fn write<T: Serialize>(&self, file: &str, result: T) -> Result<()> {
        let env = Envelope { command: self.command, version: VERSION, config_hash: &self.hash, seed: self.cfg.seed, result };
        write_json(&self.out.join(file), &env)
    }

    fn system(&self) -> Result<ControlAffineSystem> {
        self.cfg.build_system()
    }

    fn control(&self, spec: &Option<ControlSpec>, sys: &ControlAffineSystem) -> Result<ControlFunction> {
        ControlSpec::build_or_center(spec, sys.range(), self.cfg.seed)
    }

    /// The chain control set selected by `chain.set_index`.
    fn selected_set(&self, sys: &ControlAffineSystem) -> Result<ChainControlSet> {
        let graph = build_transition_graph(sys, &self.cfg.grid()?, &self.cfg.chain_params())?;
        let mut sets = chain_control_sets(&graph);
        let i = self.cfg.chain.set_index;
        if i >= sets.len() {
            return Err(Error::Config {
                field: "chain.set_index".into(),
                message: format!("only {} chain control sets were found", sets.len()),
            });
        }
        Ok(sets.swap_remove(i))
    }

    /// `point` if given, else the first hyperbolic equilibrium of a constant
    /// control (inside `within` when given).
    fn base_point(
        &self,
        field: &str,
        sys: &ControlAffineSystem,
        u: &ControlFunction,
        point: &Option<Vec<f64>>,
        within: Option<&ChainControlSet>,
    ) -> Result<DVector<f64>> {
        if let Some(p) = point {
            return Ok(vec_of(p));
        }
        let missing = |why: &str| Error::Config { field: field.into(), message: format!("no point given and {why}") };
        if !u.is_constant() {
            return Err(missing("the control is not constant"));
        }
        let grid = match within {
            Some(q) => q.grid().clone(),
            None => self.cfg.grid()?,
        };
        let eq = equilibria(sys, &u.values()[0], &grid, &EquilibriumParams::default())?;
        eq.roots
            .into_iter()
            .filter(|r| r.hyperbolic)
            .map(|r| r.point)
            .find(|p| within.is_none_or(|q| q.contains_point(p.as_slice())))
            .ok_or_else(|| missing("the constant control has no hyperbolic equilibrium there"))
    }

    fn chain(&self) -> Result<String> {
        let sys = self.system()?;
        let grid = self.cfg.grid()?;
        let graph = build_transition_graph(&sys, &grid, &self.cfg.chain_params())?;
        let sets = chain_control_sets(&graph);
        let replay = graph.replay_witnesses(&sys)?;
        let n = grid.dim();
        let mut header = vec!["set".to_string(), "cell".to_string()];
        for i in 0..n {
            header.push(format!("lo_{i}"));
            header.push(format!("hi_{i}"));
        }
        let mut rows = Vec::new();
        for (s, q) in sets.iter().enumerate() {
            for &cell in q.cells() {
                let (lo, hi) = grid.cell_bounds(cell);
                let mut row = vec![s.to_string(), cell.to_string()];
                for i in 0..n {
                    row.push(fmt_f64(lo[i]));
                    row.push(fmt_f64(hi[i]));
                }
                rows.push(row);
            }
        }
        write_csv(&self.out.join("cells.csv"), &header, &rows)?;
        let summary = ChainSummary {
            grid_counts: grid.counts().to_vec(),
            grid_widths: grid.widths().to_vec(),
            eps: self.cfg.chain.eps,
            transition_time: self.cfg.chain.transition_time,
            diagnostics: graph.diagnostics().clone(),
            witness_replay: replay,
            sets: sets.iter().enumerate().map(|(i, q)| set_summary(i, q)).collect(),
        };
        self.write("summary.json", &summary)?;
        let hulls: Vec<String> = summary
            .sets
            .iter()
            .map(|s| format!("{:?}..{:?} ({} cells)", s.hull_lo, s.hull_hi, s.cells))
            .collect();
        Ok(format!("{} chain control set(s) {}", sets.len(), hulls.join(", ")))
    }

    fn splitting(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report {
            point: DVector<f64>,
            dim_plus: usize,
            dim_minus: usize,
            e_plus: nalgebra::DMatrix<f64>,
            e_minus: nalgebra::DMatrix<f64>,
            exponents: Vec<f64>,
            c_est: f64,
            lambda_est: f64,
            big_c_est: f64,
            mu_est: f64,
            idempotency_defect: f64,
            projection_commutation: f64,
        }
        let sys = self.system()?;
        let u = self.control(&self.cfg.splitting.control, &sys)?;
        let x = self.base_point("splitting.point", &sys, &u, &self.cfg.splitting.point, None)?;
        let params = self.cfg.splitting_params();
        let sp = estimate_splitting(&sys, &u, &x, &params)?;
        let x1 = flow_point(&sys, &x, &u, 0.0, 1.0, params.step)?;
        let at_image = estimate_splitting(&sys, &u.shift(1.0), &x1, &params)?;
        let commutation = projection_commutation(&sp, &at_image, &sys, params.step)?;
        let report = Report {
            point: x,
            dim_plus: sp.dim_plus(),
            dim_minus: sp.dim_minus(),
            idempotency_defect: sp.idempotency_defect(),
            e_plus: sp.e_plus,
            e_minus: sp.e_minus,
            exponents: sp.exponents,
            c_est: sp.c_est,
            lambda_est: sp.lambda_est,
            big_c_est: sp.big_c_est,
            mu_est: sp.mu_est,
            projection_commutation: commutation,
        };
        self.write("report.json", &report)?;
        Ok(format!(
            "dim E+ = {}, dim E- = {}, lambda = {:.6}, c = {:.6}, commutation = {:.3e}",
            report.dim_plus, report.dim_minus, report.lambda_est, report.c_est, report.projection_commutation
        ))
    }

    fn shadow(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report {
            window: usize,
            alpha: f64,
            beta: f64,
            ratio: f64,
            residual: f64,
            newton_iters: usize,
            exponents: Vec<f64>,
            short_window: bool,
            y0: DVector<f64>,
            unique: bool,
            seed_beta: f64,
        }
        let s = &self.cfg.shadow;
        let sys = self.system()?;
        let u = self.control(&s.control, &sys)?;
        let x = self.base_point("shadow.point", &sys, &u, &s.point, None)?;
        let exact = PseudoOrbit::from_orbit(&sys, u.clone(), &x, s.k, s.step)?;
        let perturb = |stream: u64, size: f64| -> Vec<DVector<f64>> {
            exact
                .states()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = item_rng(self.cfg.seed, stream, i as u64);
                    let d = DVector::from_fn(p.len(), |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0));
                    let n = d.norm();
                    if n > 0.0 {
                        p + d * (0.5 * size / n)
                    } else {
                        p.clone()
                    }
                })
                .collect()
        };
        let pseudo = PseudoOrbit::new(&sys, u, perturb(SHADOW_NOISE_STREAM, s.alpha), s.step)?;
        let params = s.params();
        let a = shadow(&sys, &pseudo, &params)?;
        let seeds: Vec<DVector<f64>> = perturb(SHADOW_SEED_STREAM, s.seed_offset)
            .iter()
            .zip(exact.states())
            .zip(pseudo.states())
            .map(|((q, e), p)| p + (q - e))
            .collect();
        let b = shadow_from(&sys, &pseudo, &seeds, &params)?;
        let beta0 = 2.0 * a.beta.max(b.beta) + s.merge_tol;
        let unique = uniqueness_check(&sys, &pseudo, &a, &b, beta0, s.merge_tol)?;
        let alpha = pseudo.alpha();
        let report = Report {
            window: s.k,
            alpha,
            beta: a.beta,
            ratio: if alpha > 0.0 { a.beta / alpha } else { 0.0 },
            residual: a.residual,
            newton_iters: a.newton_iters,
            exponents: a.exponents,
            short_window: a.short_window,
            y0: a.y0,
            unique,
            seed_beta: b.beta,
        };
        self.write("report.json", &report)?;
        Ok(format!(
            "alpha = {:.3e}, beta = {:.3e}, beta/alpha = {:.4}, unique = {}",
            report.alpha, report.beta, report.ratio, report.unique
        ))
    }

    fn transport(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report {
            start: DVector<f64>,
            path: crate::shadow::HomotopyPath,
            fiber_points: Vec<DVector<f64>>,
            fiber_resolved: bool,
            discrepancy: Option<f64>,
        }
        let t = &self.cfg.transport;
        let sys = self.system()?;
        let q = self.selected_set(&sys)?;
        let u = self.control(&t.u, &sys)?;
        let v = self.control(&t.v, &sys)?;
        let x = self.base_point("transport.point", &sys, &u, &t.point, Some(&q))?;
        let params = self.cfg.transport_params();
        let path = match t.legs {
            Some(legs) => homotopy_transport_legs(&sys, &q, &u, &v, &x, legs, &params)?,
            None => {
                let family = TestFunctionFamily::new(sys.dim_m(), self.cfg.family_config())?;
                homotopy_transport(&sys, &q, &u, &v, &x, t.eps_step, &family, &params)?
            }
        };
        let g = &self.cfg.graph_verify;
        let fp = FiberParams { horizon: g.fiber_horizon, resolution: g.fiber_resolution, ..FiberParams::default() };
        let f = fiber(&sys, &q, &v, &fp)?;
        let discrepancy = match (path.completed, path.endpoint(), f.points.as_slice()) {
            (true, Some(y), [p]) => Some(sys.domain().distance(y.as_slice(), p.as_slice())),
            _ => None,
        };
        let summary = match (&path.failure, discrepancy) {
            (Some(msg), _) => format!("stopped after {} of {} legs: {msg}", path.legs.len(), path.leg_count),
            (None, Some(d)) => format!("{} legs, distance to the fiber over v {:.3e}", path.leg_count, d),
            (None, None) => format!("{} legs, fiber over v has {} points", path.leg_count, f.points.len()),
        };
        let report = Report { start: x, path, fiber_points: f.points, fiber_resolved: f.resolved, discrepancy };
        self.write("report.json", &report)?;
        Ok(summary)
    }

    fn graph_verify(&self) -> Result<String> {
        let sys = self.system()?;
        let q = self.selected_set(&sys)?;
        let u0 = match &self.cfg.graph_verify.base_control {
            Some(b) => vec_of(b),
            None => sys.range().center().clone(),
        };
        let report = graph_verify(&sys, &q, &u0, &self.cfg.graph_verify_params())?;
        self.write("report.json", &report)?;
        if !report.hypothesis_ok {
            return Ok(report.hypothesis_note.clone());
        }
        Ok(format!(
            "singleton_rate {:.4}, max discrepancy {:.3e}, max round trip {:.3e}, {} failures",
            report.singleton_rate,
            report.max_discrepancy,
            report.max_round_trip,
            report.failures.len()
        ))
    }

    fn entropy(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report {
            k_samples: usize,
            candidates: usize,
            taus: Vec<f64>,
            counts: Vec<Option<usize>>,
            direct: Option<SlopeFit>,
            direct_error: Option<String>,
            formula: f64,
            formula_per_sample: Vec<f64>,
            difference: Option<f64>,
        }
        let e = &self.cfg.entropy;
        let sys = self.system()?;
        let q = self.selected_set(&sys)?;
        let (k_lo, k_hi) = if e.k_lo.is_empty() {
            let (lo, hi) = q.hull();
            let at = |s: f64| lo.iter().zip(hi).map(|(a, b)| a + s * (b - a)).collect::<Vec<f64>>();
            (at(0.25), at(0.75))
        } else {
            (e.k_lo.clone(), e.k_hi.clone())
        };
        let samples = uniform_samples(&k_lo, &k_hi, e.k_per_axis)?;
        let range = sys.range();
        let (pool_lo, pool_hi) = match (&e.pool_lo, &e.pool_hi) {
            (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            _ => (range.lower().as_slice().to_vec(), range.upper().as_slice().to_vec()),
        };
        let grid_pool: Vec<ControlFunction> = uniform_samples(&pool_lo, &pool_hi, e.pool_per_axis)?
                .into_iter()
                .map(ControlFunction::constant)
                .collect();
        let pair = AdmissiblePair::new(&sys, samples, q, &grid_pool, e.probe_horizon, e.inflate, e.step)?;
        // witnesses lead, in sample order, so lowest-index ties sweep across K
        let mut pool: Vec<ControlFunction> = Vec::new();
        let witnesses = if e.pool_witnesses { pair.witnesses.as_slice() } else { &[] };
        for c in witnesses.iter().chain(&grid_pool) {
            if !pool.contains(c) {
                pool.push(c.clone());
            }
        }
        let tau_max = e.taus.iter().cloned().fold(0.0, f64::max);
        let pieces = (tau_max / e.pool_piece).ceil().max(1.0) as usize;
        for i in 0..e.pool_random {
            let mut rng = item_rng(self.cfg.seed, POOL_STREAM, i as u64);
            pool.push(ControlFunction::random(range, 0.0, e.pool_piece, pieces, &mut rng)?);
        }
        let counts: Vec<Option<usize>> = r_inv_counts(&sys, &pair, &e.taus, &pool, e.inflate, e.step)?
            .into_iter()
            .map(|r| r.count)
            .collect();
        let (direct, direct_error) = match h_inv_direct(&e.taus, &counts) {
            Ok(fit) => (Some(fit), None),
            Err(err) => (None, Some(err.to_string())),
        };
        let m = pair.k_samples.len();
        let picks: Vec<usize> = if e.lift_samples == 1 {
            vec![m / 2]
        } else {
            (0..e.lift_samples).map(|i| i * (m - 1) / (e.lift_samples - 1)).collect()
        };
        let lift: Vec<(ControlFunction, DVector<f64>)> =
            picks.iter().map(|&i| (pair.witnesses[i].clone(), pair.k_samples[i].clone())).collect();
        let sp = SplittingParams { window: e.splitting_window, ..self.cfg.splitting_params() };
        let formula = h_inv_formula(&sys, &lift, e.formula_tau, &sp)?;

        let rows: Vec<Vec<String>> = e
            .taus
            .iter()
            .zip(&counts)
            .map(|(t, c)| {
                let log_r = c.map(|c| fmt_f64((c as f64).ln())).unwrap_or_else(|| "inf".into());
                let count = c.map(|c| c.to_string()).unwrap_or_else(|| "inf".into());
                vec![fmt_f64(*t), log_r, count]
            })
            .collect();
        write_csv(&self.out.join("entropy.csv"), &["tau".into(), "log_r".into(), "count".into()], &rows)?;
        let report = Report {
            k_samples: m,
            candidates: pool.len(),
            taus: e.taus.clone(),
            difference: direct.map(|d| (d.slope - formula.value).abs()),
            counts,
            direct,
            direct_error,
            formula: formula.value,
            formula_per_sample: formula.per_sample,
        };
        self.write("report.json", &report)?;
        Ok(match report.direct {
            Some(d) => format!("h_direct = {:.6}, h_formula = {:.6}", d.slope, report.formula),
            None => format!("h_direct undefined, h_formula = {:.6}", report.formula),
        })
    }

    fn metric_probe(&self) -> Result<String> {
        #[derive(Serialize)]
        struct EpsRow {
            eps: f64,
            delta: f64,
            pairs: usize,
            below_eps: usize,
            max_sup: f64,
            max_sup_norm: f64,
        }
        let mt = &self.cfg.metric;
        let sys = self.system()?;
        let family = TestFunctionFamily::new(sys.dim_m(), self.cfg.family_config())?;
        let mut rows = Vec::new();
        for (k, &eps) in mt.eps.iter().enumerate() {
            let delta = delta_for_epsilon(eps, &family)?;
            let mut row = EpsRow { eps, delta, pairs: mt.pairs, below_eps: 0, max_sup: 0.0, max_sup_norm: 0.0 };
            for i in 0..mt.pairs {
                let mut rng = item_rng(self.cfg.seed, METRIC_STREAM + k as u64, i as u64);
                let (u, v) =
                    near_pair(sys.range(), mt.control_start, mt.control_piece, mt.control_pieces, delta, &mut rng)?;
                let sup = sup_shift_distance(&u, &v, &family, mt.truncation, &mt.shift_times)?;
                row.max_sup = row.max_sup.max(sup.value);
                row.max_sup_norm = row.max_sup_norm.max(u.sup_distance(&v));
                if sup.value < eps {
                    row.below_eps += 1;
                }
            }
            rows.push(row);
        }
        let all = rows.iter().all(|r| r.below_eps == r.pairs);
        let family_hash = family.config_hash();
        self.write("report.json", serde_json::json!({ "family_hash": family_hash, "rows": rows, "all_below": all }))?;
        let parts: Vec<String> =
            rows.iter().map(|r| format!("eps {}: {}/{} below", r.eps, r.below_eps, r.pairs)).collect();
        Ok(parts.join(", "))
    }
}
