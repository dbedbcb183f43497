//! Charger placement over a pluggable equilibrium backend.
//!
//! The outer loop only ever asks one question: what is the total delay at
//! equilibrium when chargers sit at selection S? Two backends answer it,
//! the convex congestion game (exact, deterministic) and the atomic queue
//! simulator (better-response NE plus Monte Carlo). Greedy, single-swap
//! refinement, and exhaustive search all consume the same evaluator, and
//! repeated selections hit a cache so shared subsets are solved once.

use std::collections::HashMap;
use std::sync::Mutex;

use itertools::Itertools;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::betterresponse::{
    find_approx_ne, initial_assignment, vehicles_for, Assignment, NeClass, NeOptions, NeProblem,
    NeReport,
};
use crate::delay::DelayFn;
use crate::equilibrium::{
    charger_costs, solve_cp, DelaySet, EquilibriumSolution, SolverOptions,
};
use crate::network::{union_selection, DemandTable, Network, VEH_TYPES};
use crate::queuesim::{
    monte_carlo, MonteCarloReport, RoutePlan, Scenario, StationSpec, VehiclePlan,
};
use crate::rng::{child_seed, stream_rng, Stream};
use crate::routes::{
    build_route_library, pearson, recover_flows, LibraryParams, RecoverOptions, RouteFlows,
    RouteLibrary,
};
use crate::{Error, Result};

/// Default evaluation budgets for exhaustive search.
pub const GAME_EXHAUSTIVE_BUDGET: usize = 10_000;
pub const QUEUE_EXHAUSTIVE_BUDGET: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub value: f64,
    /// Monte Carlo standard error; None for deterministic backends.
    pub stderr: Option<f64>,
}

pub trait Backend: Sync {
    /// Total delay at equilibrium with chargers at `selection` (node
    /// indices), plus any fixed pre-existing chargers the backend carries.
    fn evaluate(&self, selection: &[usize]) -> Result<Evaluation>;
    fn name(&self) -> &'static str;
}

/// Caches backend evaluations by selection set. Infeasible selections are
/// scored +inf so search routines can skip them without special cases.
pub struct Evaluator<'a> {
    backend: &'a dyn Backend,
    cache: Mutex<HashMap<Vec<usize>, Evaluation>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(backend: &'a dyn Backend) -> Self {
        Self { backend, cache: Mutex::new(HashMap::new()) }
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    pub fn score(&self, selection: &[usize]) -> Result<Evaluation> {
        let mut key = selection.to_vec();
        key.sort_unstable();
        key.dedup();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let eval = match self.backend.evaluate(&key) {
            Ok(e) => e,
            Err(Error::Infeasible(_)) => Evaluation { value: f64::INFINITY, stderr: None },
            Err(e) => return Err(e),
        };
        self.cache.lock().unwrap().insert(key, eval.clone());
        Ok(eval)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub selection: Vec<usize>,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlacementResult {
    pub method: String,
    /// Chosen charger nodes, sorted.
    pub selection: Vec<usize>,
    pub objective: f64,
    pub stderr: Option<f64>,
    /// Every selection this method looked at, in evaluation order.
    pub evaluations: Vec<EvalRecord>,
}

/// Tie handling when several augmentations share the minimal value.
#[derive(Debug, Clone, Copy)]
pub enum TieRule {
    LowestId,
    Seeded(u64),
}

fn tie_tol(vmin: f64) -> f64 {
    1e-9 * vmin.abs().max(1.0)
}

fn pick_tied(tied: &[usize], rule: TieRule, round: usize) -> usize {
    match rule {
        TieRule::LowestId => tied[0],
        TieRule::Seeded(seed) => {
            let mut rng = stream_rng(seed, Stream::Placement(round));
            tied[rng.gen_range(0..tied.len())]
        }
    }
}

/// Greedy charger placement: grow the selection one node at a time, always
/// adding the candidate whose augmented selection has minimal total delay.
pub fn greedy_place(
    ev: &Evaluator,
    candidates: &[usize],
    n_s: usize,
    tie: TieRule,
) -> Result<PlacementResult> {
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    if n_s > pool.len() {
        return Err(Error::validation(format!(
            "cannot place {} chargers among {} candidates",
            n_s,
            pool.len()
        )));
    }
    let mut selected: Vec<usize> = Vec::new();
    let mut evaluations: Vec<EvalRecord> = Vec::new();
    let mut objective = f64::INFINITY;
    let mut stderr = None;
    for round in 0..n_s {
        let open: Vec<usize> =
            pool.iter().copied().filter(|v| !selected.contains(v)).collect();
        let scored: Vec<(usize, Evaluation)> = open
            .par_iter()
            .map(|&e| Ok((e, ev.score(&union_selection(&selected, &[e]))?)))
            .collect::<Result<_>>()?;
        for (e, eval) in &scored {
            evaluations.push(EvalRecord {
                selection: union_selection(&selected, &[*e]),
                value: eval.value,
                stderr: eval.stderr,
            });
        }
        let vmin = scored.iter().map(|(_, e)| e.value).fold(f64::INFINITY, f64::min);
        if !vmin.is_finite() {
            return Err(Error::infeasible(format!(
                "no feasible augmentation in greedy round {}",
                round + 1
            )));
        }
        let tied: Vec<usize> = scored
            .iter()
            .filter(|(_, e)| e.value - vmin <= tie_tol(vmin))
            .map(|(v, _)| *v)
            .collect();
        let chosen = pick_tied(&tied, tie, round);
        let eval = &scored.iter().find(|(v, _)| *v == chosen).unwrap().1;
        objective = eval.value;
        stderr = eval.stderr;
        selected.push(chosen);
        selected.sort_unstable();
    }
    if n_s == 0 {
        let eval = ev.score(&[])?;
        objective = eval.value;
        stderr = eval.stderr;
        evaluations.push(EvalRecord { selection: vec![], value: eval.value, stderr: eval.stderr });
    }
    Ok(PlacementResult {
        method: "greedy".into(),
        selection: selected,
        objective,
        stderr,
        evaluations,
    })
}

/// Local refinement: repeatedly apply the single swap (drop one selected
/// node, add one unselected candidate) with the largest improvement.
pub fn single_swap_refine(
    ev: &Evaluator,
    candidates: &[usize],
    base: &PlacementResult,
    max_passes: usize,
) -> Result<PlacementResult> {
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut selection = base.selection.clone();
    let mut objective = base.objective;
    let mut stderr = base.stderr;
    let mut evaluations: Vec<EvalRecord> = Vec::new();
    for _ in 0..max_passes {
        let mut trials: Vec<Vec<usize>> = Vec::new();
        for &out in &selection {
            for &inn in pool.iter().filter(|v| !selection.contains(v)) {
                let mut s: Vec<usize> =
                    selection.iter().copied().filter(|&v| v != out).collect();
                s.push(inn);
                s.sort_unstable();
                trials.push(s);
            }
        }
        let scored: Vec<(Vec<usize>, Evaluation)> = trials
            .par_iter()
            .map(|s| Ok((s.clone(), ev.score(s)?)))
            .collect::<Result<_>>()?;
        let mut best: Option<&(Vec<usize>, Evaluation)> = None;
        for t in &scored {
            evaluations.push(EvalRecord {
                selection: t.0.clone(),
                value: t.1.value,
                stderr: t.1.stderr,
            });
            if best.map_or(true, |b| t.1.value < b.1.value) {
                best = Some(t);
            }
        }
        match best {
            Some((sel, eval)) if eval.value < objective - tie_tol(objective) => {
                selection = sel.clone();
                objective = eval.value;
                stderr = eval.stderr;
            }
            _ => break,
        }
    }
    Ok(PlacementResult {
        method: format!("{}+swap", base.method),
        selection,
        objective,
        stderr,
        evaluations,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Evaluate every size-n_s subset and return the global minimizer with the
/// full ranking. Refuses to start when the subset count exceeds `budget`.
pub fn exhaustive_place(
    ev: &Evaluator,
    candidates: &[usize],
    n_s: usize,
    budget: usize,
) -> Result<PlacementResult> {
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    if n_s > pool.len() {
        return Err(Error::validation(format!(
            "cannot place {} chargers among {} candidates",
            n_s,
            pool.len()
        )));
    }
    let count = binomial(pool.len(), n_s);
    if count > budget as u128 {
        return Err(Error::BudgetExceeded(format!(
            "exhaustive search needs {count} evaluations, budget is {budget}"
        )));
    }
    let subsets: Vec<Vec<usize>> = pool.into_iter().combinations(n_s).collect();
    let scored: Vec<(Vec<usize>, Evaluation)> = subsets
        .par_iter()
        .map(|s| Ok((s.clone(), ev.score(s)?)))
        .collect::<Result<_>>()?;
    let mut evaluations = Vec::with_capacity(scored.len());
    let mut best: Option<&(Vec<usize>, Evaluation)> = None;
    for t in &scored {
        evaluations.push(EvalRecord {
            selection: t.0.clone(),
            value: t.1.value,
            stderr: t.1.stderr,
        });
        if best.map_or(true, |b| t.1.value < b.1.value) {
            best = Some(t);
        }
    }
    let (selection, eval) = best.ok_or_else(|| Error::validation("no subsets to evaluate"))?;
    if !eval.value.is_finite() {
        return Err(Error::infeasible("every selection is infeasible"));
    }
    Ok(PlacementResult {
        method: "exhaustive".into(),
        selection: selection.clone(),
        objective: eval.value,
        stderr: eval.stderr,
        evaluations,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                r[idx] = avg;
            }
            i = j + 1;
        }
        r
    };
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub selection: Vec<usize>,
    pub game_value: f64,
    pub game_normalized: f64,
    pub queue_mean: f64,
    pub queue_stderr: f64,
    pub queue_normalized: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Rank correlation between the two backends' objectives over the
    /// evaluated selections; None with fewer than two comparable rows.
    pub spearman: Option<f64>,
}

/// Evaluate every size-n_s subset on both backends and tabulate normalized
/// objectives side by side.
pub fn compare(
    game: &Evaluator,
    queue: &Evaluator,
    candidates: &[usize],
    n_s: usize,
    budget: usize,
) -> Result<ComparisonTable> {
    let mut pool: Vec<usize> = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let count = binomial(pool.len(), n_s);
    if count > budget as u128 {
        return Err(Error::BudgetExceeded(format!(
            "comparison needs {count} evaluations per backend, budget is {budget}"
        )));
    }
    let subsets: Vec<Vec<usize>> = pool.into_iter().combinations(n_s).collect();
    let scored: Vec<(Vec<usize>, Evaluation, Evaluation)> = subsets
        .par_iter()
        .map(|s| Ok((s.clone(), game.score(s)?, queue.score(s)?)))
        .collect::<Result<_>>()?;
    let norm_base = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let m = vals.filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        if m.is_finite() && m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let game_min = norm_base(&mut scored.iter().map(|t| t.1.value));
    let queue_min = norm_base(&mut scored.iter().map(|t| t.2.value));
    let rows: Vec<ComparisonRow> = scored
        .iter()
        .map(|(sel, g, q)| ComparisonRow {
            selection: sel.clone(),
            game_value: g.value,
            game_normalized: g.value / game_min,
            queue_mean: q.value,
            queue_stderr: q.stderr.unwrap_or(0.0),
            queue_normalized: q.value / queue_min,
        })
        .collect();
    let comparable: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.game_value.is_finite() && r.queue_mean.is_finite())
        .map(|r| (r.game_value, r.queue_mean))
        .collect();
    let ga: Vec<f64> = comparable.iter().map(|t| t.0).collect();
    let qa: Vec<f64> = comparable.iter().map(|t| t.1).collect();
    Ok(ComparisonTable { rows, spearman: spearman(&ga, &qa) })
}

fn selection_label(net: &Network, selection: &[usize]) -> String {
    selection
        .iter()
        .map(|&v| net.node_id(v).to_string())
        .collect::<Vec<_>>()
        .join("|")
}

/// Ranking CSV for bar-chart style comparisons, best first.
pub fn ranking_csv(net: &Network, result: &PlacementResult) -> String {
    let mut rows = result.evaluations.clone();
    rows.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.selection.cmp(&b.selection)));
    rows.dedup_by(|a, b| a.selection == b.selection);
    let mut out = String::from("selection,value,stderr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            selection_label(net, &r.selection),
            r.value,
            r.stderr.map(|s| s.to_string()).unwrap_or_default()
        ));
    }
    out
}

pub fn comparison_csv(net: &Network, table: &ComparisonTable) -> String {
    let mut out = String::from(
        "selection,game_value,game_normalized,queue_mean,queue_stderr,queue_normalized\n",
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            selection_label(net, &r.selection),
            r.game_value,
            r.game_normalized,
            r.queue_mean,
            r.queue_stderr,
            r.queue_normalized
        ));
    }
    out.push_str(&format!(
        "spearman,{}\n",
        table.spearman.map(|s| s.to_string()).unwrap_or_else(|| "na".into())
    ));
    out
}

/// Equilibrium backend: augment chargers, solve the convex program, read
/// off the total delay.
pub struct GameBackend {
    pub net: Network,
    pub demand: DemandTable,
    pub delays: DelaySet,
    /// Pre-existing charger nodes included in every evaluation.
    pub fixed: Vec<usize>,
    /// Delay law applied to every placed charger.
    pub charger_delay: DelayFn,
    pub options: SolverOptions,
}

impl Backend for GameBackend {
    fn evaluate(&self, selection: &[usize]) -> Result<Evaluation> {
        let sel = union_selection(&self.fixed, selection);
        let delay = &self.charger_delay;
        let aug = self.net.augment_with_chargers(&sel, &|_| delay.clone())?;
        let sol = solve_cp(&aug, &self.demand, &self.delays, &self.options)?;
        Ok(Evaluation { value: sol.total_delay, stderr: None })
    }

    fn name(&self) -> &'static str {
        "game"
    }
}

/// Queue-backend knobs: station hardware, demand-to-vehicle expansion, and
/// sampling effort.
#[derive(Debug, Clone)]
pub struct QueueBackendConfig {
    pub horizon_s: u32,
    /// Vehicles of one class enter uniformly over this window.
    pub entry_window_s: u32,
    pub ports: usize,
    pub rate: f64,
    pub exit_capacity: usize,
    pub initial_charge: f64,
    pub library: LibraryParams,
    pub recover: RecoverOptions,
    pub solver: SolverOptions,
    pub ne: NeOptions,
    /// Monte Carlo replications for the final objective.
    pub final_seeds: usize,
    pub seed: u64,
}

impl Default for QueueBackendConfig {
    fn default() -> Self {
        Self {
            horizon_s: 3600,
            entry_window_s: 600,
            ports: 2,
            rate: 0.02,
            exit_capacity: 4,
            initial_charge: 0.2,
            library: LibraryParams::default(),
            recover: RecoverOptions::default(),
            solver: SolverOptions::default(),
            ne: NeOptions::default(),
            final_seeds: 25,
            seed: 0,
        }
    }
}

/// Simulation backend running the full four-step pipeline per selection:
/// link-space equilibrium, route library at equilibrium costs, route-flow
/// recovery, better-response NE in the queue model, Monte Carlo objective.
/// Every selection shares the same seeds (common random numbers).
pub struct QueueBackend {
    pub net: Network,
    pub demand: DemandTable,
    pub delays: DelaySet,
    pub fixed: Vec<usize>,
    pub charger_delay: DelayFn,
    pub config: QueueBackendConfig,
}

/// Everything one queue-backend evaluation produces. `Backend::evaluate`
/// keeps only the objective; the CLI exports the rest.
pub struct QueueRun {
    pub solution: EquilibriumSolution,
    pub library: RouteLibrary,
    pub recovered: RouteFlows,
    pub scenario: Scenario,
    pub plans: Vec<RoutePlan>,
    pub classes: Vec<NeClass>,
    pub assignment: Assignment,
    pub ne_report: NeReport,
    pub vehicles: Vec<VehiclePlan>,
    pub mc: MonteCarloReport,
}

impl QueueBackend {
    pub fn run_pipeline(&self, selection: &[usize]) -> Result<QueueRun> {
        let cfg = &self.config;
        let sel = union_selection(&self.fixed, selection);
        let delay = &self.charger_delay;
        let aug = self.net.augment_with_chargers(&sel, &|_| delay.clone())?;
        let sol = solve_cp(&aug, &self.demand, &self.delays, &cfg.solver)?;

        let eq_costs = self.delays.link_costs(&sol.x);
        let charger_nodes: Vec<usize> = aug.chargers.iter().map(|c| c.node).collect();
        let station_costs = charger_costs(&aug, &sol.x_hat);
        let library = build_route_library(
            &self.net,
            &self.demand,
            &charger_nodes,
            &station_costs,
            &eq_costs,
            cfg.library,
        )?;
        let partition = sol.commodities.partition.clone();
        let recovered =
            recover_flows(&self.net, &library, &sol.x, &self.demand, &partition, &cfg.recover)?;

        let stations = charger_nodes
            .iter()
            .map(|&v| StationSpec {
                node: v,
                ports: cfg.ports,
                rate: cfg.rate,
                exit_capacity: cfg.exit_capacity,
            })
            .collect();
        let mut scenario = Scenario::new(self.net.clone(), stations, cfg.horizon_s)?;
        scenario.initial_charge = cfg.initial_charge;

        let mut plans: Vec<RoutePlan> = Vec::new();
        let mut flows: Vec<f64> = Vec::new();
        let mut classes: Vec<NeClass> = Vec::new();
        for (od, pair) in self.demand.entries.iter().enumerate() {
            for t in VEH_TYPES {
                let n = pair.q[t.index()].round() as usize;
                if n == 0 {
                    continue;
                }
                let lib_routes = library.class_routes(od, t);
                let mut routes = Vec::with_capacity(lib_routes.len());
                for r in lib_routes {
                    routes.push(plans.len());
                    plans.push(scenario.plan_route(&library.routes[r])?);
                    flows.push(recovered.flows[r]);
                }
                let departures: Vec<u32> = (0..n)
                    .map(|k| (k as u64 * cfg.entry_window_s as u64 / n as u64) as u32)
                    .collect();
                classes.push(NeClass { od, vtype: t, routes, departures });
            }
        }
        let problem = NeProblem { scenario: &scenario, plans, classes };
        let initial = initial_assignment(&problem, &flows)?;
        let ne_opts = NeOptions { seed: child_seed(cfg.seed, 1), ..cfg.ne.clone() };
        let (assignment, ne_report) = find_approx_ne(&problem, initial, &ne_opts)?;

        let vehicles = vehicles_for(&problem, &assignment);
        let seeds: Vec<u64> = (0..cfg.final_seeds)
            .map(|k| child_seed(cfg.seed, 1_000_000 + k))
            .collect();
        let mc = monte_carlo(&scenario, &problem.plans, &vehicles, &seeds)?;
        let NeProblem { plans, classes, .. } = problem;
        Ok(QueueRun {
            solution: sol,
            library,
            recovered,
            scenario,
            plans,
            classes,
            assignment,
            ne_report,
            vehicles,
            mc,
        })
    }
}

impl Backend for QueueBackend {
    fn evaluate(&self, selection: &[usize]) -> Result<Evaluation> {
        let run = self.run_pipeline(selection)?;
        Ok(Evaluation { value: run.mc.mean_total_s, stderr: Some(run.mc.stderr_total_s) })
    }

    fn name(&self) -> &'static str {
        "queue"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Table-driven backend for exercising the search routines.
    struct FakeBackend {
        values: HashMap<Vec<usize>, f64>,
        calls: Mutex<usize>,
    }

    impl FakeBackend {
        fn new(entries: &[(&[usize], f64)]) -> Self {
            let mut values = HashMap::new();
            for (sel, v) in entries {
                let mut key = sel.to_vec();
                key.sort_unstable();
                values.insert(key, *v);
            }
            Self { values, calls: Mutex::new(0) }
        }
    }

    impl Backend for FakeBackend {
        fn evaluate(&self, selection: &[usize]) -> Result<Evaluation> {
            *self.calls.lock().unwrap() += 1;
            match self.values.get(selection) {
                Some(&v) if v.is_finite() => Ok(Evaluation { value: v, stderr: None }),
                Some(_) => Err(Error::infeasible("marked infeasible")),
                None => Err(Error::validation(format!("unexpected selection {selection:?}"))),
            }
        }

        fn name(&self) -> &'static str {
            "fake"
        }
    }

    fn fig3_like() -> FakeBackend {
        FakeBackend::new(&[
            (&[1], 2.1),
            (&[2], 2.0),
            (&[3], 2.1),
            (&[1, 2], 2.0),
            (&[2, 3], 2.0),
            (&[1, 3], 1.6),
        ])
    }

    #[test]
    fn greedy_is_myopic_and_deterministic() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        let r = greedy_place(&ev, &[1, 2, 3], 2, TieRule::LowestId).unwrap();
        assert_eq!(r.selection, vec![1, 2]);
        assert!((r.objective - 2.0).abs() < 1e-12);
        assert_eq!(r.evaluations.len(), 5);
        // each round's pick has that round's minimal value
        let round1_min =
            r.evaluations[..3].iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
        assert_eq!(round1_min, 2.0);
    }

    #[test]
    fn swap_refinement_recovers_global_optimum() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        let greedy = greedy_place(&ev, &[1, 2, 3], 2, TieRule::LowestId).unwrap();
        let refined = single_swap_refine(&ev, &[1, 2, 3], &greedy, 50).unwrap();
        assert_eq!(refined.selection, vec![1, 3]);
        assert!((refined.objective - 1.6).abs() < 1e-12);
        assert_eq!(refined.method, "greedy+swap");
        assert!(refined.objective <= greedy.objective);
    }

    #[test]
    fn swap_keeps_local_optimum_unchanged() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        let base = PlacementResult {
            method: "greedy".into(),
            selection: vec![1, 3],
            objective: 1.6,
            stderr: None,
            evaluations: vec![],
        };
        let refined = single_swap_refine(&ev, &[1, 2, 3], &base, 50).unwrap();
        assert_eq!(refined.selection, vec![1, 3]);
        assert_eq!(refined.objective, 1.6);
    }

    #[test]
    fn exhaustive_finds_global_minimum_with_full_log() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        let r = exhaustive_place(&ev, &[1, 2, 3], 2, 100).unwrap();
        assert_eq!(r.selection, vec![1, 3]);
        assert!((r.objective - 1.6).abs() < 1e-12);
        assert_eq!(r.evaluations.len(), 3);
        assert!(exhaustive_place(&ev, &[1, 2, 3], 2, 2).is_err());
    }

    #[test]
    fn exhaustive_beats_or_ties_greedy() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        let g = greedy_place(&ev, &[1, 2, 3], 2, TieRule::LowestId).unwrap();
        let x = exhaustive_place(&ev, &[1, 2, 3], 2, 100).unwrap();
        assert!(x.objective <= g.objective);
    }

    #[test]
    fn greedy_equals_exhaustive_for_single_site() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        let g = greedy_place(&ev, &[1, 2, 3], 1, TieRule::LowestId).unwrap();
        let x = exhaustive_place(&ev, &[1, 2, 3], 1, 100).unwrap();
        assert_eq!(g.selection, x.selection);
        assert_eq!(g.objective, x.objective);
    }

    #[test]
    fn infeasible_selections_are_skipped_or_fatal() {
        let backend = FakeBackend::new(&[
            (&[1], f64::NAN),
            (&[2], 5.0),
            (&[1, 2], f64::NAN),
            (&[2, 3], 4.0),
            (&[3], f64::NAN),
            (&[1, 3], f64::NAN),
        ]);
        let ev = Evaluator::new(&backend);
        // NaN markers are turned into infeasibility by the fake backend
        let r = greedy_place(&ev, &[1, 2, 3], 2, TieRule::LowestId).unwrap();
        assert_eq!(r.selection, vec![2, 3]);
        let all_bad = FakeBackend::new(&[(&[1], f64::NAN), (&[2], f64::NAN)]);
        let ev2 = Evaluator::new(&all_bad);
        assert!(greedy_place(&ev2, &[1, 2], 1, TieRule::LowestId).is_err());
    }

    #[test]
    fn cache_prevents_duplicate_backend_calls() {
        let backend = fig3_like();
        let ev = Evaluator::new(&backend);
        greedy_place(&ev, &[1, 2, 3], 2, TieRule::LowestId).unwrap();
        let after_greedy = *backend.calls.lock().unwrap();
        exhaustive_place(&ev, &[1, 2, 3], 2, 100).unwrap();
        let after_both = *backend.calls.lock().unwrap();
        assert_eq!(after_greedy, 5);
        // exhaustive re-uses {1,2} and {2,3} from greedy's rounds
        assert_eq!(after_both, 6);
    }

    #[test]
    fn seeded_ties_are_reproducible() {
        let backend = FakeBackend::new(&[(&[1], 1.0), (&[2], 1.0), (&[3], 1.0)]);
        let ev = Evaluator::new(&backend);
        let a = greedy_place(&ev, &[1, 2, 3], 1, TieRule::Seeded(7)).unwrap();
        let b = greedy_place(&ev, &[1, 2, 3], 1, TieRule::Seeded(7)).unwrap();
        assert_eq!(a.selection, b.selection);
        let low = greedy_place(&ev, &[1, 2, 3], 1, TieRule::LowestId).unwrap();
        assert_eq!(low.selection, vec![1]);
    }

    #[test]
    fn spearman_handles_ties_and_degenerate_input() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-9);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap() + 1.0).abs() < 1e-9);
        assert!(spearman(&[1.0], &[2.0]).is_none());
        assert!(spearman(&[1.0, 1.0], &[2.0, 3.0]).is_none());
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.5, 2.5, 4.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn comparison_table_normalizes_per_backend() {
        let game = fig3_like();
        let queue = FakeBackend::new(&[
            (&[1, 2], 400.0),
            (&[2, 3], 420.0),
            (&[1, 3], 500.0),
        ]);
        let gev = Evaluator::new(&game);
        let qev = Evaluator::new(&queue);
        let table = compare(&gev, &qev, &[1, 2, 3], 2, 100).unwrap();
        assert_eq!(table.rows.len(), 3);
        let best_game = table
            .rows
            .iter()
            .map(|r| r.game_normalized)
            .fold(f64::INFINITY, f64::min);
        let best_queue = table
            .rows
            .iter()
            .map(|r| r.queue_normalized)
            .fold(f64::INFINITY, f64::min);
        assert!((best_game - 1.0).abs() < 1e-12);
        assert!((best_queue - 1.0).abs() < 1e-12);
        // the two backends disagree here by construction
        assert!(table.spearman.unwrap() < 1.0);
    }

    #[test]
    fn identical_backends_have_rank_correlation_one() {
        let a = fig3_like();
        let b = fig3_like();
        let ea = Evaluator::new(&a);
        let eb = Evaluator::new(&b);
        let table = compare(&ea, &eb, &[1, 2, 3], 2, 100).unwrap();
        assert!((table.spearman.unwrap() - 1.0).abs() < 1e-9);
        let one = compare(&ea, &eb, &[1, 2], 2, 100).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert!(one.spearman.is_none());
    }
}
