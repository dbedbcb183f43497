//! Batch pipeline for EV charger placement experiments.
//!
//! Six subcommands cover the workflow end to end: `calibrate` fits BPR delay
//! laws from isolated-link simulations, `equilibrium` solves the link-space
//! congestion game, `recover` turns equilibrium link flows into route flows,
//! `simulate` drives the recovered routes to an approximate Nash equilibrium
//! in the queue model, and `place` / `compare` run the charger placement
//! searches over either backend.
//!
//! Configuration comes from a JSON file (`--config`); command-line flags
//! override the file. Outputs are plain CSV/JSON written under `--out` and
//! are byte-identical across re-runs with the same config and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use evflow::betterresponse::{assignment_csv, NeOptions, NeProblem};
use evflow::delay::{fit_bpr, generate_link_samples, DelayFn, DelayParams};
use evflow::equilibrium::{charger_costs, solve_cp, DelaySet, EquilibriumSolution, SolverOptions};
use evflow::network::{load_demand, load_network, union_selection, DemandTable, Network};
use evflow::placement::{
    compare, comparison_csv, exhaustive_place, greedy_place, ranking_csv, single_swap_refine,
    Evaluator, GameBackend, PlacementResult, QueueBackend, QueueBackendConfig, TieRule,
    GAME_EXHAUSTIVE_BUDGET, QUEUE_EXHAUSTIVE_BUDGET,
};
use evflow::queuesim::{run_logged, Scenario};
use evflow::rng::child_seed;
use evflow::routes::{
    build_route_library, recover_flows, routes_csv, topk_coverage, LibraryParams, RecoverOptions,
};
use evflow::{Error, Result};

#[derive(Parser)]
#[command(name = "evflow", version, about = "EV charger placement via traffic equilibria")]
struct Cli {
    /// JSON experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Charger selection as comma-separated node ids, e.g. "c1,c3".
    #[arg(long, global = true, value_delimiter = ',')]
    selection: Option<Vec<String>>,
    /// Number of chargers to place.
    #[arg(long, global = true)]
    ns: Option<usize>,
    /// Placement method: greedy, greedy-swap or exhaustive.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Placement backend: game or queue.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Approximate-equilibrium tolerance for the queue model.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Relative Wardrop gap target for the congestion game.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit per-link BPR delay laws from isolated-link queue simulations.
    Calibrate,
    /// Solve the link-space equilibrium for a fixed charger selection.
    Equilibrium,
    /// Recover route flows from the equilibrium link flows.
    Recover,
    /// Run the queue model to an approximate NE on the recovered routes.
    Simulate,
    /// Search for a charger placement with the configured method.
    Place,
    /// Evaluate all size-ns selections under both backends and compare.
    Compare,
}

/// Every field has a default so a config file only names what it overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Config {
    network: Option<PathBuf>,
    demand: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    jobs: Option<usize>,

    /// JSON map of link id to delay law; wins over `fits`.
    delays: Option<PathBuf>,
    /// Fit CSV from `calibrate`; BPR defaults per link when absent.
    fits: Option<PathBuf>,
    /// Calibration flow levels as fractions of each link's capacity.
    flow_fractions: Vec<f64>,
    calibrate_seeds: usize,
    /// Link ids to calibrate; all links when absent.
    calibrate_links: Option<Vec<String>>,
    horizon_s: u32,

    tolerance: f64,
    max_iters: usize,
    /// Constant service delay of a placed charger, seconds.
    charger_delay_s: f64,
    /// Pre-existing chargers included in every evaluation.
    fixed_chargers: Vec<String>,
    selection: Vec<String>,

    k_od: usize,
    k_oc: usize,
    k_cd: usize,
    coverage_k: Vec<usize>,

    entry_window_s: u32,
    ports: usize,
    charge_rate: f64,
    exit_capacity: usize,
    initial_charge: f64,
    alpha: f64,
    n_mc: usize,
    n_mc_final: usize,
    ne_max_iters: usize,
    final_seeds: usize,

    ns: usize,
    method: String,
    backend: String,
    /// Candidate node ids for placement; network candidates when absent.
    candidates: Option<Vec<String>>,
    budget: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            network: None,
            demand: None,
            out: PathBuf::from("out"),
            seed: 0,
            jobs: None,
            delays: None,
            fits: None,
            flow_fractions: vec![0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0, 1.1],
            calibrate_seeds: 4,
            calibrate_links: None,
            horizon_s: 3600,
            tolerance: 1e-6,
            max_iters: 50_000,
            charger_delay_s: 0.0,
            fixed_chargers: Vec::new(),
            selection: Vec::new(),
            k_od: 8,
            k_oc: 4,
            k_cd: 4,
            coverage_k: vec![1, 2, 4, 8, 16],
            entry_window_s: 600,
            ports: 2,
            charge_rate: 0.02,
            exit_capacity: 4,
            initial_charge: 0.2,
            alpha: 0.01,
            n_mc: 20,
            n_mc_final: 100,
            ne_max_iters: 500,
            final_seeds: 25,
            ns: 1,
            method: "greedy".into(),
            backend: "game".into(),
            candidates: None,
            budget: None,
        }
    }
}

impl Config {
    fn network_path(&self) -> Result<&Path> {
        self.network
            .as_deref()
            .ok_or_else(|| Error::validation("no network file configured (set \"network\")"))
    }

    fn demand_path(&self) -> Result<&Path> {
        self.demand
            .as_deref()
            .ok_or_else(|| Error::validation("no demand file configured (set \"demand\")"))
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("tolerance must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::validation("alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.initial_charge) {
            return Err(Error::validation("initial_charge must be in [0, 1)"));
        }
        if !(self.charge_rate > 0.0) {
            return Err(Error::validation("charge_rate must be positive"));
        }
        if self.ports == 0 || self.horizon_s == 0 || self.entry_window_s == 0 {
            return Err(Error::validation("ports, horizon_s and entry_window_s must be positive"));
        }
        if self.flow_fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::validation("flow_fractions must be strictly positive"));
        }
        if self.charger_delay_s < 0.0 {
            return Err(Error::validation("charger_delay_s must be nonnegative"));
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(p) = path else { return Ok(Config::default()) };
    let text = fs::read_to_string(p).map_err(io_err(p))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: p.display().to_string(), detail: e.to_string() })
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(name);
    fs::write(&p, content).map_err(io_err(&p))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn node_indices(net: &Network, ids: &[String], what: &str) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            net.node_idx(id)
                .ok_or_else(|| Error::validation(format!("{what}: unknown node {id:?}")))
        })
        .collect()
}

/// Delay laws for the congestion game: an explicit JSON map when configured,
/// else calibrated fits, else BPR defaults derived from link attributes.
fn delay_set(net: &Network, cfg: &Config) -> Result<DelaySet> {
    if let Some(path) = &cfg.delays {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let map: std::collections::HashMap<String, DelayFn> = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
        let link = net
            .links
            .iter()
            .map(|l| {
                map.get(&l.id).copied().ok_or_else(|| {
                    Error::validation(format!("delay file has no entry for link {:?}", l.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(DelaySet::new(link));
    }
    let Some(path) = &cfg.fits else { return Ok(DelaySet::bpr_default(net)) };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |detail: String| Error::Parse { path: path.display().to_string(), detail };
    let mut per_link: Vec<Option<DelayFn>> = vec![None; net.links.len()];
    for (row, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(format!("row {row}: expected 6 columns, got {}", f.len())));
        }
        let l = net
            .link_idx(f[0])
            .ok_or_else(|| parse_err(format!("row {row}: unknown link {:?}", f[0])))?;
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| parse_err(format!("row {row}: bad number {s:?}: {e}")))
        };
        per_link[l] =
            Some(DelayFn::Bpr(DelayParams::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?)?));
    }
    let link = per_link
        .into_iter()
        .enumerate()
        .map(|(l, d)| {
            d.ok_or_else(|| {
                Error::validation(format!("fit file has no row for link {:?}", net.links[l].id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DelaySet::new(link))
}

fn cmd_calibrate(cfg: &Config) -> Result<()> {
    let net = load_network(cfg.network_path()?)?;
    let scenario = Scenario::new(net.clone(), Vec::new(), cfg.horizon_s)?;
    let targets: Vec<usize> = match &cfg.calibrate_links {
        None => (0..net.links.len()).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                net.link_idx(id)
                    .ok_or_else(|| Error::validation(format!("calibrate: unknown link {id:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let mut samples_csv = String::from("link_id,flow_vph,mean_delay_s,seed_count\n");
    let mut fits_csv = String::from("link_id,fft,cap,a,b,r2\n");
    for &l in &targets {
        let levels: Vec<f64> =
            cfg.flow_fractions.iter().map(|f| f * net.links[l].cap_vph).collect();
        let base = child_seed(cfg.seed, 10_000 + l);
        let seeds: Vec<u64> = (0..cfg.calibrate_seeds).map(|k| child_seed(base, k)).collect();
        let samples = generate_link_samples(&scenario, l, &levels, &seeds)?;
        for s in &samples {
            samples_csv.push_str(&format!(
                "{},{},{},{}\n",
                net.links[l].id,
                s.flow,
                s.mean_delay,
                seeds.len()
            ));
        }
        let fit = fit_bpr(&samples, None)?;
        let p = fit.params;
        fits_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            net.links[l].id, p.fft, p.cap, p.a, p.b, fit.r_squared
        ));
    }
    write_out(&cfg.out, "samples.csv", &samples_csv)?;
    write_out(&cfg.out, "fits.csv", &fits_csv)?;
    let meta = json!({
        "seed": cfg.seed,
        "horizon_s": cfg.horizon_s,
        "links": targets.len(),
        "flow_fractions": cfg.flow_fractions,
        "seeds_per_level": cfg.calibrate_seeds,
    });
    write_out(&cfg.out, "calibrate.json", &serde_json::to_string_pretty(&meta).unwrap())
}

struct EqContext {
    net: Network,
    aug: Network,
    demand: DemandTable,
    delays: DelaySet,
    sol: EquilibriumSolution,
}

/// Load inputs, augment the configured chargers, solve the convex program.
fn solve_context(cfg: &Config) -> Result<EqContext> {
    let net = load_network(cfg.network_path()?)?;
    let demand = load_demand(cfg.demand_path()?, &net)?;
    let delays = delay_set(&net, cfg)?;
    let fixed = node_indices(&net, &cfg.fixed_chargers, "fixed charger")?;
    let chosen = node_indices(&net, &cfg.selection, "selection")?;
    let sel = union_selection(&fixed, &chosen);
    let station = DelayFn::constant(cfg.charger_delay_s);
    let aug = net.augment_with_chargers(&sel, &|_| station)?;
    let opts = SolverOptions { tolerance: cfg.tolerance, max_iters: cfg.max_iters };
    let sol = solve_cp(&aug, &demand, &delays, &opts)?;
    Ok(EqContext { net, aug, demand, delays, sol })
}

fn cmd_equilibrium(cfg: &Config) -> Result<()> {
    let ctx = solve_context(cfg)?;
    write_out(&cfg.out, "links.csv", &ctx.sol.links_csv(&ctx.aug, &ctx.delays))?;
    write_out(&cfg.out, "chargers.csv", &ctx.sol.chargers_csv(&ctx.aug))?;
    write_out(&cfg.out, "partition.csv", &ctx.sol.partition_csv(&ctx.aug))?;
    write_out(&cfg.out, "summary.json", &ctx.sol.summary_json(Some(cfg.seed)))
}

fn cmd_recover(cfg: &Config) -> Result<()> {
    let ctx = solve_context(cfg)?;
    let eq_costs = ctx.delays.link_costs(&ctx.sol.x);
    let charger_nodes: Vec<usize> = ctx.aug.chargers.iter().map(|c| c.node).collect();
    let station_costs = charger_costs(&ctx.aug, &ctx.sol.x_hat);
    let params = LibraryParams { k_od: cfg.k_od, k_oc: cfg.k_oc, k_cd: cfg.k_cd };
    let library = build_route_library(
        &ctx.net,
        &ctx.demand,
        &charger_nodes,
        &station_costs,
        &eq_costs,
        params,
    )?;
    let rec = recover_flows(
        &ctx.net,
        &library,
        &ctx.sol.x,
        &ctx.demand,
        &ctx.sol.commodities.partition,
        &RecoverOptions::default(),
    )?;
    write_out(&cfg.out, "library.json", &serde_json::to_string_pretty(&library).unwrap())?;
    write_out(&cfg.out, "route_flows.csv", &routes_csv(&ctx.net, &library, &rec.flows))?;
    let rows = topk_coverage(&ctx.net, &library, &rec.flows, &ctx.sol.x, &cfg.coverage_k);
    let mut cov = String::from("k,coverage,mae,rmse,pearson\n");
    for r in &rows {
        cov.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            r.coverage,
            r.mae,
            r.rmse,
            r.pearson.map(|p| p.to_string()).unwrap_or_else(|| "na".into())
        ));
    }
    write_out(&cfg.out, "coverage.csv", &cov)?;
    let meta = json!({
        "seed": cfg.seed,
        "objective": rec.objective,
        "residual_norm": rec.residual_norm,
        "max_constraint_violation": rec.max_constraint_violation,
        "iterations": rec.iterations,
        "routes": library.routes.len(),
    });
    write_out(&cfg.out, "recover.json", &serde_json::to_string_pretty(&meta).unwrap())
}

fn queue_backend(cfg: &Config) -> Result<QueueBackend> {
    let net = load_network(cfg.network_path()?)?;
    let demand = load_demand(cfg.demand_path()?, &net)?;
    let delays = delay_set(&net, cfg)?;
    let fixed = node_indices(&net, &cfg.fixed_chargers, "fixed charger")?;
    Ok(QueueBackend {
        net,
        demand,
        delays,
        fixed,
        charger_delay: DelayFn::constant(cfg.charger_delay_s),
        config: QueueBackendConfig {
            horizon_s: cfg.horizon_s,
            entry_window_s: cfg.entry_window_s,
            ports: cfg.ports,
            rate: cfg.charge_rate,
            exit_capacity: cfg.exit_capacity,
            initial_charge: cfg.initial_charge,
            library: LibraryParams { k_od: cfg.k_od, k_oc: cfg.k_oc, k_cd: cfg.k_cd },
            recover: RecoverOptions::default(),
            solver: SolverOptions { tolerance: cfg.tolerance, max_iters: cfg.max_iters },
            ne: NeOptions {
                alpha: cfg.alpha,
                n_mc: cfg.n_mc,
                n_mc_final: cfg.n_mc_final,
                max_iters: cfg.ne_max_iters,
                seed: 0,
            },
            final_seeds: cfg.final_seeds,
            seed: cfg.seed,
        },
    })
}

fn cmd_simulate(cfg: &Config) -> Result<()> {
    let qb = queue_backend(cfg)?;
    let chosen = node_indices(&qb.net, &cfg.selection, "selection")?;
    let run = qb.run_pipeline(&chosen)?;

    let problem = NeProblem {
        scenario: &run.scenario,
        plans: run.plans.clone(),
        classes: run.classes.clone(),
    };
    write_out(&cfg.out, "assignment.csv", &assignment_csv(&problem, &run.assignment))?;
    let ne = json!({ "seed": cfg.seed, "report": run.ne_report });
    write_out(&cfg.out, "ne_report.json", &serde_json::to_string_pretty(&ne).unwrap())?;
    let mc = json!({ "seed": cfg.seed, "report": run.mc });
    write_out(&cfg.out, "montecarlo.json", &serde_json::to_string_pretty(&mc).unwrap())?;

    // Link-flow heatmap under the final assignment, same seeds as the
    // Monte Carlo objective.
    let seeds: Vec<u64> =
        (0..cfg.final_seeds).map(|k| child_seed(cfg.seed, 1_000_000 + k)).collect();
    let mut counts = vec![0.0f64; run.scenario.net.links.len()];
    for &seed in &seeds {
        let (_, log) = run_logged(&run.scenario, &run.plans, &run.vehicles, seed)?;
        for (l, traversals) in log.iter().enumerate() {
            counts[l] += traversals.len() as f64;
        }
    }
    let hours = cfg.horizon_s as f64 / 3600.0;
    let mut heat = String::from("link_id,mean_traversals,flow_vph\n");
    for (l, link) in run.scenario.net.links.iter().enumerate() {
        let mean = counts[l] / seeds.len() as f64;
        heat.push_str(&format!("{},{},{}\n", link.id, mean, mean / hours));
    }
    write_out(&cfg.out, "heatmap.csv", &heat)
}

fn placement_candidates(net: &Network, cfg: &Config, fixed: &[usize]) -> Result<Vec<usize>> {
    let mut cands = match &cfg.candidates {
        Some(ids) => node_indices(net, ids, "candidate")?,
        None => net.candidates.clone(),
    };
    cands.retain(|c| !fixed.contains(c));
    if cands.is_empty() {
        return Err(Error::validation("no placement candidates available"));
    }
    Ok(cands)
}

fn run_search(
    ev: &Evaluator,
    cands: &[usize],
    cfg: &Config,
    budget: usize,
) -> Result<PlacementResult> {
    match cfg.method.as_str() {
        "greedy" => greedy_place(ev, cands, cfg.ns, TieRule::LowestId),
        "greedy-swap" => {
            let base = greedy_place(ev, cands, cfg.ns, TieRule::LowestId)?;
            single_swap_refine(ev, cands, &base, 50)
        }
        "exhaustive" => exhaustive_place(ev, cands, cfg.ns, budget),
        other => Err(Error::validation(format!(
            "unknown method {other:?}; expected greedy, greedy-swap or exhaustive"
        ))),
    }
}

fn cmd_place(cfg: &Config) -> Result<()> {
    let (result, net) = match cfg.backend.as_str() {
        "game" => {
            let net = load_network(cfg.network_path()?)?;
            let demand = load_demand(cfg.demand_path()?, &net)?;
            let delays = delay_set(&net, cfg)?;
            let fixed = node_indices(&net, &cfg.fixed_chargers, "fixed charger")?;
            let cands = placement_candidates(&net, cfg, &fixed)?;
            let backend = GameBackend {
                net: net.clone(),
                demand,
                delays,
                fixed,
                charger_delay: DelayFn::constant(cfg.charger_delay_s),
                options: SolverOptions { tolerance: cfg.tolerance, max_iters: cfg.max_iters },
            };
            let ev = Evaluator::new(&backend);
            let budget = cfg.budget.unwrap_or(GAME_EXHAUSTIVE_BUDGET);
            (run_search(&ev, &cands, cfg, budget)?, net)
        }
        "queue" => {
            let backend = queue_backend(cfg)?;
            let net = backend.net.clone();
            let cands = placement_candidates(&net, cfg, &backend.fixed)?;
            let ev = Evaluator::new(&backend);
            let budget = cfg.budget.unwrap_or(QUEUE_EXHAUSTIVE_BUDGET);
            (run_search(&ev, &cands, cfg, budget)?, net)
        }
        other => {
            return Err(Error::validation(format!(
                "unknown backend {other:?}; expected game or queue"
            )))
        }
    };
    let labeled = json!({
        "seed": cfg.seed,
        "backend": cfg.backend,
        "result": result,
    });
    write_out(&cfg.out, "placement.json", &serde_json::to_string_pretty(&labeled).unwrap())?;
    write_out(&cfg.out, "ranking.csv", &ranking_csv(&net, &result))
}

fn cmd_compare(cfg: &Config) -> Result<()> {
    let queue = queue_backend(cfg)?;
    let game = GameBackend {
        net: queue.net.clone(),
        demand: queue.demand.clone(),
        delays: queue.delays.clone(),
        fixed: queue.fixed.clone(),
        charger_delay: queue.charger_delay,
        options: SolverOptions { tolerance: cfg.tolerance, max_iters: cfg.max_iters },
    };
    let cands = placement_candidates(&queue.net, cfg, &queue.fixed)?;
    let gev = Evaluator::new(&game);
    let qev = Evaluator::new(&queue);
    let budget = cfg.budget.unwrap_or(QUEUE_EXHAUSTIVE_BUDGET);
    let table = compare(&gev, &qev, &cands, cfg.ns, budget)?;
    write_out(&cfg.out, "comparison.csv", &comparison_csv(&queue.net, &table))?;
    let meta = json!({
        "seed": cfg.seed,
        "ns": cfg.ns,
        "spearman": table.spearman,
        "rows": table.rows.len(),
    });
    write_out(&cfg.out, "compare.json", &serde_json::to_string_pretty(&meta).unwrap())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(sel) = cli.selection {
        cfg.selection = sel;
    }
    if let Some(ns) = cli.ns {
        cfg.ns = ns;
    }
    if let Some(m) = cli.method {
        cfg.method = m;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(t) = cli.tolerance {
        cfg.tolerance = t;
    }
    cfg.validate()?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    }
    match cli.cmd {
        Cmd::Calibrate => cmd_calibrate(&cfg),
        Cmd::Equilibrium => cmd_equilibrium(&cfg),
        Cmd::Recover => cmd_recover(&cfg),
        Cmd::Simulate => cmd_simulate(&cfg),
        Cmd::Place => cmd_place(&cfg),
        Cmd::Compare => cmd_compare(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_class() as u8)
        }
    }
}
