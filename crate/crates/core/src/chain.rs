//! Chain control sets from a cell graph with `(eps, T)` transitions, their
//! fibers over individual controls, constant-control equilibria, and a
//! sampling probe for isolatedness.
//!
//! Edges use one transition time `T` and constant controls per edge, so the
//! graph under-approximates the controls of a chain and over-approximates its
//! jumps; refining `h`, `eps` and the control samples recovers the chain
//! definition in the limit.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DVector;
use num_complex::Complex64;
use petgraph::algo::kosaraju_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::flow::{Observe, Stepper};
use crate::system::{ControlAffineSystem, Domain};
use crate::util::{item_rng, lex_cmp};

const GRID_STREAM: u64 = 0x6772_6964;
const ISOLATION_STREAM: u64 = 0x6973_6f6c;

/// Axis-aligned cells tiling the domain. Cell indices are row-major in the
/// multi-index with the first axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateGrid {
    lo: Vec<f64>,
    h: Vec<f64>,
    counts: Vec<usize>,
    periods: Option<Vec<f64>>,
}

impl StateGrid {
    pub fn new(domain: &Domain, h: &[f64]) -> Result<Self> {
        let (lo, hi) = domain.bounds();
        if h.len() != lo.len() {
            return Err(Error::invalid(format!("grid needs {} cell widths, got {}", lo.len(), h.len())));
        }
        let mut counts = Vec::with_capacity(h.len());
        for ((a, b), w) in lo.iter().zip(&hi).zip(h) {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::invalid(format!("cell width must be positive, got {w}")));
            }
            let span = b - a;
            let count = (span / w).round();
            if count < 1.0 || (count * w - span).abs() > 1e-9 * span {
                return Err(Error::invalid(format!("cell width {w} does not tile an interval of length {span}")));
            }
            counts.push(count as usize);
        }
        let periods = match domain {
            Domain::Torus { periods } => Some(periods.clone()),
            Domain::Box { .. } => None,
        };
        Ok(Self { lo, h: h.to_vec(), counts, periods })
    }

    pub fn uniform(domain: &Domain, h: f64) -> Result<Self> {
        Self::new(domain, &vec![h; domain.dim()])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn widths(&self) -> &[f64] {
        &self.h
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        self.counts
            .iter()
            .map(|c| {
                let k = index % c;
                index /= c;
                k
            })
            .collect()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.counts).rev().fold(0, |acc, (k, c)| acc * c + k)
    }

    pub fn center(&self, index: usize) -> Vec<f64> {
        let multi = self.multi_index(index);
        (0..self.dim()).map(|i| self.lo[i] + (multi[i] as f64 + 0.5) * self.h[i]).collect()
    }

    pub fn cell_bounds(&self, index: usize) -> (Vec<f64>, Vec<f64>) {
        let multi = self.multi_index(index);
        let lo = (0..self.dim()).map(|i| self.lo[i] + multi[i] as f64 * self.h[i]).collect();
        let hi = (0..self.dim()).map(|i| self.lo[i] + (multi[i] + 1) as f64 * self.h[i]).collect();
        (lo, hi)
    }

    /// Cell containing `x`; points on the upper boundary belong to the last cell.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut multi = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let mut v = x[i];
            if let Some(p) = &self.periods {
                v = v.rem_euclid(p[i]);
            }
            let k = ((v - self.lo[i]) / self.h[i]).floor();
            if k < 0.0 || k > self.counts[i] as f64 {
                return None;
            }
            multi.push((k as usize).min(self.counts[i] - 1));
        }
        Some(self.index(&multi))
    }

    /// Cells whose centers lie at distance `< eps` from `y`, ascending.
    pub fn centers_within(&self, y: &[f64], eps: f64, out: &mut Vec<usize>) {
        out.clear();
        let n = self.dim();
        let mut ranges: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        for i in 0..n {
            let rel = (y[i] - self.lo[i]) / self.h[i] - 0.5;
            let reach = eps / self.h[i];
            let first = (rel - reach).ceil() as i64;
            let last = (rel + reach).floor() as i64;
            let mut axis = Vec::new();
            let count = self.counts[i] as i64;
            for k in first..=last {
                let offset = (k as f64 + 0.5) * self.h[i] + self.lo[i] - y[i];
                let kk = if self.periods.is_some() {
                    k.rem_euclid(count)
                } else if (0..count).contains(&k) {
                    k
                } else {
                    continue;
                };
                axis.push((kk as usize, offset * offset));
            }
            if self.periods.is_some() {
                // overlapping wrap-arounds keep the nearest image only
                axis.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                axis.dedup_by_key(|e| e.0);
            }
            if axis.is_empty() {
                return;
            }
            ranges.push(axis);
        }
        let eps2 = eps * eps;
        let mut pick = vec![0usize; n];
        loop {
            let d2: f64 = (0..n).map(|i| ranges[i][pick[i]].1).sum();
            if d2 < eps2 {
                let multi: Vec<usize> = (0..n).map(|i| ranges[i][pick[i]].0).collect();
                out.push(self.index(&multi));
            }
            let mut axis = 0;
            loop {
                if axis == n {
                    out.sort_unstable();
                    out.dedup();
                    return;
                }
                pick[axis] += 1;
                if pick[axis] < ranges[axis].len() {
                    break;
                }
                pick[axis] = 0;
                axis += 1;
            }
        }
    }
}

/// Parameters of the transition graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainParams {
    /// Transition time `T` (s).
    pub transition_time: f64,
    /// Jump tolerance (state units); must be at least the largest cell width.
    pub eps: f64,
    /// Sample states per cell; the first is the cell center.
    pub samples_per_cell: usize,
    /// Random constant controls per cell, in addition to the vertices and the
    /// center of the control range.
    pub controls_per_cell: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self { transition_time: 0.5, eps: 0.02, samples_per_cell: 1, controls_per_cell: 8, step: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GraphDiagnostics {
    pub trajectories: usize,
    pub escapes: usize,
    pub edges: usize,
    /// All vector fields vanish at the sampled states.
    pub degenerate: bool,
}

/// Outgoing edges of one cell and the `(state, control)` witnesses behind them.
#[derive(Debug, Clone, Default)]
pub struct CellEdges {
    /// Flattened witnesses, `n + m` numbers each.
    witnesses: Vec<f64>,
    /// `(target cell, witness index, endpoint inside the target)`, sorted by target.
    edges: Vec<(u32, u32, bool)>,
}

impl CellEdges {
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().map(|e| e.0 as usize)
    }
}

#[derive(Debug, Clone)]
pub struct CellGraph {
    grid: StateGrid,
    params: ChainParams,
    state_dim: usize,
    control_dim: usize,
    cells: Vec<CellEdges>,
    diagnostics: GraphDiagnostics,
}

/// A witness replayed against its edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WitnessReplay {
    pub checked: usize,
    pub passed: usize,
}

impl CellGraph {
    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn diagnostics(&self) -> &GraphDiagnostics {
        &self.diagnostics
    }

    pub fn node_count(&self) -> usize {
        self.cells.len()
    }

    pub fn successors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.cells[cell].targets()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.cells[from].edges.binary_search_by_key(&(to as u32), |e| e.0).is_ok()
    }

    /// Whether some sampled trajectory for `from -> to` ends inside cell `to`,
    /// so the edge needs no jump beyond the cell size.
    pub fn is_exact_edge(&self, from: usize, to: usize) -> bool {
        let edges = &self.cells[from].edges;
        edges.binary_search_by_key(&(to as u32), |e| e.0).is_ok_and(|p| edges[p].2)
    }

    /// Whether the edges among `cells` that need no jump contain a cycle.
    pub fn has_exact_cycle(&self, cells: &[usize]) -> bool {
        let mut members: Vec<usize> = cells.to_vec();
        members.sort_unstable();
        members.dedup();
        let mut g: DiGraph<(), ()> = DiGraph::new();
        for _ in &members {
            g.add_node(());
        }
        for (i, &c) in members.iter().enumerate() {
            for e in &self.cells[c].edges {
                if !e.2 {
                    continue;
                }
                if let Ok(j) = members.binary_search(&(e.0 as usize)) {
                    if i == j {
                        return true;
                    }
                    g.add_edge(NodeIndex::new(i), NodeIndex::new(j), ());
                }
            }
        }
        kosaraju_scc(&g).iter().any(|comp| comp.len() > 1)
    }

    /// `(state, control)` stored for the edge `from -> to`.
    pub fn witness(&self, from: usize, to: usize) -> Option<(DVector<f64>, DVector<f64>)> {
        let cell = &self.cells[from];
        let pos = cell.edges.binary_search_by_key(&(to as u32), |e| e.0).ok()?;
        let stride = self.state_dim + self.control_dim;
        let w = cell.edges[pos].1 as usize * stride;
        let data = &cell.witnesses[w..w + stride];
        Some((
            DVector::from_column_slice(&data[..self.state_dim]),
            DVector::from_column_slice(&data[self.state_dim..]),
        ))
    }

    /// Re-integrates every stored witness and checks the endpoint lands within
    /// `eps` of the target cell center.
    pub fn replay_witnesses(&self, sys: &ControlAffineSystem) -> Result<WitnessReplay> {
        let results: Vec<Result<(usize, usize)>> = (0..self.cells.len())
            .into_par_iter()
            .map(|from| {
                let mut checked = 0;
                let mut passed = 0;
                for to in self.successors(from) {
                    let (x, u) = self.witness(from, to).expect("edge has a witness");
                    let y = crate::flow::flow_point(
                        sys,
                        &x,
                        &ControlFunction::constant(u),
                        0.0,
                        self.params.transition_time,
                        self.params.step,
                    )?;
                    checked += 1;
                    if sys.domain().distance(y.as_slice(), &self.grid.center(to)) < self.params.eps {
                        passed += 1;
                    }
                }
                Ok((checked, passed))
            })
            .collect();
        let mut replay = WitnessReplay { checked: 0, passed: 0 };
        for r in results {
            let (c, p) = r?;
            replay.checked += c;
            replay.passed += p;
        }
        Ok(replay)
    }

    /// Whether the subgraph induced by `cells` is strongly connected.
    pub fn is_strongly_connected(&self, cells: &[usize]) -> bool {
        if cells.is_empty() {
            return false;
        }
        let mut members: Vec<usize> = cells.to_vec();
        members.sort_unstable();
        members.dedup();
        let position = |c: usize| members.binary_search(&c).ok();
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); members.len()];
        for (i, &c) in members.iter().enumerate() {
            for t in self.successors(c) {
                if let Some(j) = position(t) {
                    reverse[j].push(i);
                }
            }
        }
        let reach = |forward: bool| {
            let mut seen = vec![false; members.len()];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                let next: Vec<usize> = if forward {
                    self.successors(members[i]).filter_map(position).collect()
                } else {
                    reverse[i].clone()
                };
                for j in next {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        let nontrivial = members.len() > 1 || self.has_edge(members[0], members[0]);
        nontrivial && reach(true) && reach(false)
    }
}

fn validate_chain_params(grid: &StateGrid, params: &ChainParams) -> Result<()> {
    if !(params.transition_time > 0.0 && params.transition_time.is_finite()) {
        return Err(Error::invalid("transition time T must be positive"));
    }
    let hmax = grid.widths().iter().cloned().fold(0.0, f64::max);
    if !(params.eps >= hmax) {
        return Err(Error::invalid(format!("eps = {} must be at least the cell width {hmax}", params.eps)));
    }
    if params.samples_per_cell == 0 {
        return Err(Error::invalid("at least one sample per cell is required"));
    }
    if !(params.step > 0.0) {
        return Err(Error::invalid("integration step must be positive"));
    }
    Ok(())
}

/// Transition graph: from sampled `(state, constant control)` pairs in each
/// cell, an edge to every cell whose center lies within `eps` of the state
/// reached after time `T`.
pub fn build_transition_graph(sys: &ControlAffineSystem, grid: &StateGrid, params: &ChainParams) -> Result<CellGraph> {
    validate_chain_params(grid, params)?;
    if grid.dim() != sys.dim_n() {
        return Err(Error::invalid("grid and system dimensions differ"));
    }
    let n = sys.dim_n();
    let m = sys.dim_m();
    let range = sys.range();
    let mut base_controls = range.vertices();
    base_controls.push(range.center().clone());

    let per_cell: Vec<(CellEdges, usize, usize)> = (0..grid.len())
        .into_par_iter()
        .map(|cell| {
            let mut rng = item_rng(params.seed, GRID_STREAM, cell as u64);
            let (lo, hi) = grid.cell_bounds(cell);
            let mut states = vec![grid.center(cell)];
            for _ in 1..params.samples_per_cell {
                states.push((0..n).map(|i| rng.gen_range(lo[i]..hi[i])).collect());
            }
            let mut controls = base_controls.clone();
            for _ in 0..params.controls_per_cell {
                controls.push(range.sample(&mut rng));
            }
            let controls: Vec<ControlFunction> = controls.into_iter().map(ControlFunction::constant).collect();

            let mut stepper = Stepper::new(sys, 0);
            let mut targets: BTreeMap<u32, (u32, bool)> = BTreeMap::new();
            let mut witnesses = Vec::new();
            let mut near = Vec::new();
            let mut escapes = 0;
            let mut trajectories = 0;
            for x in &states {
                for u in &controls {
                    trajectories += 1;
                    let mut s = x.clone();
                    match stepper.advance(&mut s, u, 0.0, params.transition_time, params.step, |_, _| Observe::Continue) {
                        Ok(_) => {}
                        Err(Error::Escape { .. }) => {
                            escapes += 1;
                            continue;
                        }
                        Err(_) => continue,
                    }
                    grid.centers_within(&s, params.eps, &mut near);
                    if near.is_empty() {
                        continue;
                    }
                    let w = (witnesses.len() / (n + m)) as u32;
                    let landed = grid.locate(&s);
                    let mut used = false;
                    for &t in &near {
                        let exact = landed == Some(t);
                        match targets.get_mut(&(t as u32)) {
                            Some(e) if exact && !e.1 => {
                                *e = (w, true);
                                used = true;
                            }
                            Some(_) => {}
                            None => {
                                targets.insert(t as u32, (w, exact));
                                used = true;
                            }
                        }
                    }
                    if used {
                        witnesses.extend_from_slice(x);
                        witnesses.extend_from_slice(u.values()[0].as_slice());
                    }
                }
            }
            let edges = targets.into_iter().map(|(t, (w, exact))| (t, w, exact)).collect();
            (CellEdges { witnesses, edges }, trajectories, escapes)
        })
        .collect();

    let mut diagnostics = GraphDiagnostics::default();
    let mut cells = Vec::with_capacity(per_cell.len());
    for (edges, traj, esc) in per_cell {
        diagnostics.trajectories += traj;
        diagnostics.escapes += esc;
        diagnostics.edges += edges.edges.len();
        cells.push(edges);
    }
    let mut rng = item_rng(params.seed, GRID_STREAM, u64::MAX);
    diagnostics.degenerate = sys.is_degenerate(64, &mut rng);
    if diagnostics.degenerate {
        log::warn!("all vector fields vanish: every cell is trivially recurrent");
    }
    Ok(CellGraph { grid: grid.clone(), params: params.clone(), state_dim: n, control_dim: m, cells, diagnostics })
}

/// A nontrivial strongly connected component of the cell graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainControlSet {
    cells: Vec<usize>,
    hull_lo: Vec<f64>,
    hull_hi: Vec<f64>,
    grid: StateGrid,
    eps: f64,
    transition_time: f64,
}

impl ChainControlSet {
    /// Wraps a set of cells, e.g. for hand-built test regions.
    pub fn from_cells(grid: &StateGrid, cells: Vec<usize>, eps: f64, transition_time: f64) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("a chain control set needs at least one cell"));
        }
        let mut cells = cells;
        cells.sort_unstable();
        cells.dedup();
        if *cells.last().unwrap() >= grid.len() {
            return Err(Error::invalid("cell index outside the grid"));
        }
        let n = grid.dim();
        let mut hull_lo = vec![f64::INFINITY; n];
        let mut hull_hi = vec![f64::NEG_INFINITY; n];
        for &c in &cells {
            let (lo, hi) = grid.cell_bounds(c);
            for i in 0..n {
                hull_lo[i] = hull_lo[i].min(lo[i]);
                hull_hi[i] = hull_hi[i].max(hi[i]);
            }
        }
        Ok(Self { cells, hull_lo, hull_hi, grid: grid.clone(), eps, transition_time })
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn hull(&self) -> (&[f64], &[f64]) {
        (&self.hull_lo, &self.hull_hi)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn transition_time(&self) -> f64 {
        self.transition_time
    }

    pub fn contains_cell(&self, cell: usize) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        self.grid.locate(x).is_some_and(|c| self.contains_cell(c))
    }

    /// Hull scaled by `factor` about its center.
    pub fn inflated_hull(&self, factor: f64) -> (Vec<f64>, Vec<f64>) {
        self.hull_lo
            .iter()
            .zip(&self.hull_hi)
            .map(|(a, b)| {
                let c = 0.5 * (a + b);
                let r = 0.5 * (b - a) * factor;
                (c - r, c + r)
            })
            .unzip()
    }
}

fn in_box(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
}

/// Nontrivial SCCs (more than one cell, or a self-loop) that carry a cycle
/// of jump-free edges, largest first, ties broken by the least cell index.
///
/// The cycle requirement stands in for the existence of a controlled
/// trajectory that stays in the set. It removes components that exist only
/// because an `eps` jump pulls a trajectory back against the flow, such as
/// single cells just outside an unstable boundary.
pub fn chain_control_sets(graph: &CellGraph) -> Vec<ChainControlSet> {
    if graph.node_count() == 0 {
        return Vec::new();
    }
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(graph.node_count(), graph.diagnostics.edges);
    for _ in 0..graph.node_count() {
        g.add_node(());
    }
    for from in 0..graph.node_count() {
        for to in graph.successors(from) {
            g.add_edge(NodeIndex::new(from), NodeIndex::new(to), ());
        }
    }
    let mut sets: Vec<ChainControlSet> = kosaraju_scc(&g)
        .into_iter()
        .filter(|comp| comp.len() > 1 || graph.has_edge(comp[0].index(), comp[0].index()))
        .map(|comp| comp.into_iter().map(|n| n.index()).collect::<Vec<_>>())
        .filter(|cells| graph.has_exact_cycle(cells))
        .map(|cells| {
            ChainControlSet::from_cells(&graph.grid, cells, graph.params.eps, graph.params.transition_time)
                .expect("components are nonempty")
        })
        .collect();
    sets.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cells[0].cmp(&b.cells[0])));
    sets
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumParams {
    pub newton_tol: f64,
    pub dedupe_tol: f64,
    /// Eigenvalues with `|Re| <` this value make an equilibrium nonhyperbolic.
    pub spectral_gap_tol: f64,
    pub max_iters: usize,
}

impl Default for EquilibriumParams {
    fn default() -> Self {
        Self { newton_tol: 1e-12, dedupe_tol: 1e-6, spectral_gap_tol: 1e-6, max_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    pub point: DVector<f64>,
    /// `(re, im)` pairs of the Jacobian spectrum.
    pub eigenvalues: Vec<(f64, f64)>,
    pub hyperbolic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriaReport {
    pub roots: Vec<Equilibrium>,
    pub seeds: usize,
    pub converged: usize,
}

/// Zeros of `f_0 + sum_i u0_i f_i` found by Newton's method from every cell
/// center, deduplicated and ordered lexicographically.
pub fn equilibria(
    sys: &ControlAffineSystem,
    u0: &DVector<f64>,
    grid: &StateGrid,
    params: &EquilibriumParams,
) -> Result<EquilibriaReport> {
    if !sys.range().contains(u0.as_slice()) {
        return Err(Error::invalid("constant control lies outside the control range"));
    }
    let n = sys.dim_n();
    let found: Vec<Option<DVector<f64>>> = (0..grid.len())
        .into_par_iter()
        .map(|cell| {
            let mut x = DVector::from_vec(grid.center(cell));
            let mut f = DVector::zeros(n);
            for _ in 0..params.max_iters {
                sys.fields().rhs(x.as_slice(), u0.as_slice(), f.as_mut_slice());
                if f.norm() <= params.newton_tol {
                    break;
                }
                let j = sys.rhs_jacobian(&x, u0);
                let dx = j.lu().solve(&f)?;
                x -= dx;
                sys.domain().wrap(x.as_mut_slice());
                if !sys.domain().in_safety_box(x.as_slice()) {
                    return None;
                }
            }
            sys.fields().rhs(x.as_slice(), u0.as_slice(), f.as_mut_slice());
            (f.norm() <= params.newton_tol && sys.domain().contains(x.as_slice())).then_some(x)
        })
        .collect();
    let converged = found.iter().filter(|r| r.is_some()).count();
    let mut roots: Vec<DVector<f64>> = Vec::new();
    for x in found.into_iter().flatten() {
        if !roots.iter().any(|r| sys.domain().distance(r.as_slice(), x.as_slice()) <= params.dedupe_tol) {
            roots.push(x);
        }
    }
    roots.sort_by(|a, b| lex_cmp(a.as_slice(), b.as_slice()));
    let roots = roots
        .into_iter()
        .map(|point| {
            let eig: Vec<Complex64> = sys.rhs_jacobian(&point, u0).complex_eigenvalues().iter().copied().collect();
            let hyperbolic = eig.iter().all(|z| z.re.abs() >= params.spectral_gap_tol);
            let mut eigenvalues: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
            eigenvalues.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
            Equilibrium { point, eigenvalues, hyperbolic }
        })
        .collect();
    Ok(EquilibriaReport { roots, seeds: grid.len(), converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiberParams {
    /// Half-length `T_f` of the time window `[-T_f, T_f]` (s).
    pub horizon: f64,
    /// Scale factor applied to the hull of `Q` about its center.
    pub inflate: f64,
    pub step: f64,
    /// Boxes are bisected until their widths fall below this (state units).
    pub resolution: f64,
    /// Give up refining when more boxes than this survive a level.
    pub max_boxes: usize,
}

impl Default for FiberParams {
    fn default() -> Self {
        Self { horizon: 40.0, inflate: 1.1, step: 0.01, resolution: 1e-8, max_boxes: 4096 }
    }
}

/// Fiber `Q(u)`: states whose full trajectory under `u` stays in `Q`.
#[derive(Debug, Clone, Serialize)]
pub struct LiftFiber {
    pub control: ControlFunction,
    pub points: Vec<DVector<f64>>,
    pub horizon: f64,
    /// Width of the boxes that localize each point.
    pub containment_tol: f64,
    pub inflate: f64,
    /// False when refinement stopped at `max_boxes` before reaching the resolution.
    pub resolved: bool,
    pub boxes: usize,
}

/// Where a trajectory leaves the region: `(axis, upper side?)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Exit {
    Stays,
    Face(usize, bool),
}

struct ExitProbe<'a> {
    sys: &'a ControlAffineSystem,
    control: &'a ControlFunction,
    lo: Vec<f64>,
    hi: Vec<f64>,
    horizon: f64,
    step: f64,
    cache: HashMap<Vec<u64>, (Exit, Exit)>,
}

impl ExitProbe<'_> {
    fn exit(&self, x: &[f64], t_end: f64) -> Result<Exit> {
        let mut s = x.to_vec();
        let mut face = Exit::Stays;
        let (lo, hi) = (&self.lo, &self.hi);
        let res = Stepper::new(self.sys, 0).advance(&mut s, self.control, 0.0, t_end, self.step, |_, s| {
            let mut worst = (0.0, Exit::Stays);
            for i in 0..s.len() {
                let w = hi[i] - lo[i];
                let below = (lo[i] - s[i]) / w;
                let above = (s[i] - hi[i]) / w;
                if below > worst.0 {
                    worst = (below, Exit::Face(i, false));
                }
                if above > worst.0 {
                    worst = (above, Exit::Face(i, true));
                }
            }
            face = worst.1;
            if face == Exit::Stays {
                Observe::Continue
            } else {
                Observe::Stop
            }
        });
        match res {
            Ok(_) => Ok(face),
            Err(Error::Escape { .. }) if face != Exit::Stays => Ok(face),
            Err(e) => Err(e),
        }
    }

    fn signatures(&mut self, x: &[f64]) -> Result<(Exit, Exit)> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(s) = self.cache.get(&key) {
            return Ok(*s);
        }
        let s = (self.exit(x, self.horizon)?, self.exit(x, -self.horizon)?);
        self.cache.insert(key, s);
        Ok(s)
    }

    /// A box can hold a full orbit only if, in each time direction, its
    /// corners do not all leave through one and the same face.
    fn may_contain_orbit(&mut self, lo: &[f64], hi: &[f64]) -> Result<bool> {
        let n = lo.len();
        let mut first: Option<(Exit, Exit)> = None;
        let (mut fwd_split, mut bwd_split) = (false, false);
        for mask in 0..1usize << n {
            let corner: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect();
            let sig = self.signatures(&corner)?;
            match first {
                None => first = Some(sig),
                Some(f) => {
                    fwd_split |= sig.0 != f.0;
                    bwd_split |= sig.1 != f.1;
                }
            }
        }
        let f = first.expect("boxes have corners");
        let fwd_ok = fwd_split || f.0 == Exit::Stays;
        let bwd_ok = bwd_split || f.1 == Exit::Stays;
        Ok(fwd_ok && bwd_ok)
    }
}

/// Fiber of `Q` over `u`, localized by bisection.
///
/// Starting from the inflated hull of `Q`, boxes are bisected along every
/// axis and kept only if, forward and backward in time over `[0, T_f]`, the
/// trajectories from their corners do not all leave the inflated hull through
/// the same face. Around a hyperbolic fiber point the forward exit face flips
/// across its stable manifold and the backward exit face across its unstable
/// one, so only boxes meeting both survive. Surviving boxes at the target
/// resolution are merged into clusters whose centers are the fiber points.
pub fn fiber(sys: &ControlAffineSystem, q: &ChainControlSet, u: &ControlFunction, params: &FiberParams) -> Result<LiftFiber> {
    if !(params.horizon > 0.0 && params.inflate >= 1.0 && params.resolution > 0.0 && params.step > 0.0) {
        return Err(Error::invalid("fiber needs horizon > 0, inflate >= 1, resolution > 0 and step > 0"));
    }
    if !sys.range().contains_function(u) {
        return Err(Error::invalid("control takes values outside the control range"));
    }
    let (lo, hi) = q.inflated_hull(params.inflate);
    let mut probe = ExitProbe {
        sys,
        control: u,
        lo: lo.clone(),
        hi: hi.clone(),
        horizon: params.horizon,
        step: params.step,
        cache: HashMap::new(),
    };
    let n = lo.len();
    let mut current = vec![(lo, hi)];
    let mut resolved = true;
    let kept = loop {
        let mut kept = Vec::new();
        for (blo, bhi) in current {
            if probe.may_contain_orbit(&blo, &bhi)? {
                kept.push((blo, bhi));
            }
        }
        let width = kept.iter().flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| y - x)).fold(0.0, f64::max);
        if kept.is_empty() || width <= params.resolution {
            break kept;
        }
        if kept.len() > params.max_boxes {
            resolved = false;
            break kept;
        }
        probe.cache.retain(|_, _| false);
        current = Vec::with_capacity(kept.len() << n);
        for (blo, bhi) in kept {
            let mid: Vec<f64> = blo.iter().zip(&bhi).map(|(a, b)| 0.5 * (a + b)).collect();
            for mask in 0..1usize << n {
                let (mut clo, mut chi) = (blo.clone(), bhi.clone());
                for i in 0..n {
                    if mask >> i & 1 == 1 {
                        clo[i] = mid[i];
                    } else {
                        chi[i] = mid[i];
                    }
                }
                current.push((clo, chi));
            }
        }
    };
    let width = kept.iter().flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| y - x)).fold(0.0, f64::max);
    let points = cluster_boxes(&kept);
    Ok(LiftFiber {
        control: u.clone(),
        points,
        horizon: params.horizon,
        containment_tol: width,
        inflate: params.inflate,
        resolved,
        boxes: kept.len(),
    })
}

/// Merges boxes that touch (up to half a box width) and returns the mean
/// center of each group, sorted lexicographically.
fn cluster_boxes(boxes: &[(Vec<f64>, Vec<f64>)]) -> Vec<DVector<f64>> {
    let k = boxes.len();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..k {
        for b in a + 1..k {
            let touch = (0..boxes[a].0.len()).all(|i| {
                let slack = 0.5 * (boxes[a].1[i] - boxes[a].0[i]);
                boxes[a].0[i] <= boxes[b].1[i] + slack && boxes[b].0[i] <= boxes[a].1[i] + slack
            });
            if touch {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, (lo, hi)) in boxes.iter().enumerate() {
        let r = find(&mut parent, i);
        let entry = groups.entry(r).or_insert_with(|| (vec![0.0; lo.len()], 0));
        for (acc, (a, b)) in entry.0.iter_mut().zip(lo.iter().zip(hi)) {
            *acc += 0.5 * (a + b);
        }
        entry.1 += 1;
    }
    let mut points: Vec<DVector<f64>> =
        groups.into_values().map(|(sum, c)| DVector::from_iterator(sum.len(), sum.into_iter().map(|s| s / c as f64))).collect();
    points.sort_by(|a, b| lex_cmp(a.as_slice(), b.as_slice()));
    points
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsolationParams {
    pub inflate_factors: Vec<f64>,
    pub probe_time: f64,
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for IsolationParams {
    fn default() -> Self {
        Self { inflate_factors: vec![1.05, 1.1, 1.2], probe_time: 20.0, samples: 200, step: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsolationCounterexample {
    pub point: DVector<f64>,
    pub control: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorResult {
    pub factor: f64,
    pub samples_tested: usize,
    pub counterexample: Option<IsolationCounterexample>,
}

/// Sampling evidence for isolatedness. Not a proof.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsolationReport {
    pub heuristic: bool,
    pub factors: Vec<FactorResult>,
    pub largest_clean_factor: Option<f64>,
}

/// For each inflation factor, samples states in the inflated hull but outside
/// `Q` together with constant controls, and looks for one whose trajectory
/// stays in the inflated hull on `[-T_probe, T_probe]`.
pub fn isolated_check(sys: &ControlAffineSystem, q: &ChainControlSet, params: &IsolationParams) -> Result<IsolationReport> {
    if params.inflate_factors.iter().any(|f| !(*f > 1.0)) {
        return Err(Error::invalid("inflation factors must exceed 1"));
    }
    let n = sys.dim_n();
    let mut factors = Vec::new();
    for (fi, &factor) in params.inflate_factors.iter().enumerate() {
        let (lo, hi) = q.inflated_hull(factor);
        let inside = |x: &[f64]| in_box(x, &lo, &hi);
        let mut rng = item_rng(params.seed, ISOLATION_STREAM, fi as u64);
        let mut tested = 0;
        let mut counterexample = None;
        let mut attempts = 0;
        while tested < params.samples && attempts < 100 * params.samples.max(1) {
            attempts += 1;
            let x: Vec<f64> = (0..n).map(|i| rng.gen_range(lo[i]..=hi[i])).collect();
            if q.contains_point(&x) {
                continue;
            }
            tested += 1;
            let c = sys.range().sample(&mut rng);
            let u = ControlFunction::constant(c.clone());
            let fwd = crate::flow::exit_time(sys, &x, &u, 0.0, params.probe_time, params.step, inside)?;
            if fwd.is_some() {
                continue;
            }
            let bwd = crate::flow::exit_time(sys, &x, &u, 0.0, -params.probe_time, params.step, inside)?;
            if bwd.is_none() {
                counterexample = Some(IsolationCounterexample { point: DVector::from_vec(x), control: c });
                break;
            }
        }
        factors.push(FactorResult { factor, samples_tested: tested, counterexample });
    }
    let largest_clean_factor = factors
        .iter()
        .filter(|f| f.counterexample.is_none() && f.samples_tested > 0)
        .map(|f| f.factor)
        .fold(None, |acc: Option<f64>, f| Some(acc.map_or(f, |a| a.max(f))));
    Ok(IsolationReport { heuristic: true, factors, largest_clean_factor })
}
