//! Link-space equilibrium of the charger-augmented congestion game.
//!
//! Solves the convex program whose minimizers are Nash equilibria: minimize
//! the extended Beckmann potential (link integrals plus charger integrals
//! minus the F3 charging-benefit term) over per-commodity link flows that
//! respect node conservation and the demand partition rules (F1 never
//! charges, F2 charges exactly once, F3 may charge).
//!
//! The solver is Frank-Wolfe with exact line search. Every iteration solves
//! the linearized subproblem per (od, type) via shortest-path best responses,
//! which yields the Wardrop gap certificate for free. Between conditional
//! gradient steps the solver equilibrates flow pairwise across the discovered
//! routes of each commodity (a restricted-master acceleration); each shift is
//! an exact one-dimensional minimization, so the potential never increases
//! and the gap certificate stays valid.

use serde::Serialize;

use crate::delay::{DelayFn, DelayParams};
use crate::graph;
use crate::network::{ChargePartition, DemandTable, Network, OdPair, VehType};
use crate::{Error, Result};

/// Per-physical-link delay functions, aligned with `Network::links`.
#[derive(Debug, Clone)]
pub struct DelaySet {
    pub link: Vec<DelayFn>,
}

impl DelaySet {
    pub fn new(link: Vec<DelayFn>) -> Self {
        Self { link }
    }

    /// Standard BPR curves from the network's physical attributes.
    pub fn bpr_default(net: &Network) -> Self {
        let link = net
            .links
            .iter()
            .map(|l| {
                DelayFn::Bpr(DelayParams { fft: l.fft_s, cap: l.cap_vph, a: 0.15, b: 4.0 })
            })
            .collect();
        Self { link }
    }

    pub fn link_costs(&self, x: &[f64]) -> Vec<f64> {
        self.link.iter().zip(x).map(|(d, &xl)| d.eval(xl)).collect()
    }

    pub fn free_flow_costs(&self) -> Vec<f64> {
        self.link.iter().map(|d| d.eval(0.0)).collect()
    }
}

/// Charger delays evaluated at the given self-loop flows, in charger order.
pub fn charger_costs(net: &Network, x_hat: &[f64]) -> Vec<f64> {
    net.chargers.iter().zip(x_hat).map(|(c, &xc)| c.delay.eval(xc)).collect()
}

/// Best-response route for one (od, type) at fixed costs.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub cost: f64,
    /// Physical links, approach segment then departure segment.
    pub links: Vec<usize>,
    /// Length of the approach segment; equals links.len() when not charging.
    pub split: usize,
    /// Charger position in `net.chargers`, if the response charges.
    pub charger: Option<usize>,
}

struct OdTrees {
    dist_o: Vec<f64>,
    via_o: Vec<Option<usize>>,
    dist_d: Vec<f64>,
    via_d: Vec<Option<usize>>,
}

fn od_trees(net: &Network, costs: &[f64], od: &OdPair) -> OdTrees {
    let (dist_o, via_o) = graph::shortest_tree_from(net, costs, od.origin);
    let (dist_d, via_d) = graph::shortest_tree_to(net, costs, od.destination);
    OdTrees { dist_o, via_o, dist_d, via_d }
}

fn best_charging_response(
    net: &Network,
    station_costs: &[f64],
    trees: &OdTrees,
    od: &OdPair,
) -> Option<BestResponse> {
    let mut best: Option<(f64, usize)> = None;
    for (c, ch) in net.chargers.iter().enumerate() {
        let s = ch.node;
        if !trees.dist_o[s].is_finite() || !trees.dist_d[s].is_finite() {
            continue;
        }
        let cost = trees.dist_o[s] + station_costs[c] + trees.dist_d[s];
        if best.map_or(true, |(bc, _)| cost < bc) {
            best = Some((cost, c));
        }
    }
    let (cost, c) = best?;
    let s = net.chargers[c].node;
    let mut links = graph::tree_path_from(&trees.via_o, net, od.origin, s)?;
    let split = links.len();
    let back = graph::tree_path_to(&trees.via_d, net, od.destination, s)?;
    links.extend_from_slice(&back);
    Some(BestResponse { cost, links, split, charger: Some(c) })
}

fn best_response_with_trees(
    net: &Network,
    station_costs: &[f64],
    trees: &OdTrees,
    od: &OdPair,
    t: VehType,
) -> Result<BestResponse> {
    let od_name = |n: &Network| format!("{} -> {}", n.node_id(od.origin), n.node_id(od.destination));
    let non_charging = || -> Option<BestResponse> {
        if !trees.dist_o[od.destination].is_finite() {
            return None;
        }
        let links = graph::tree_path_from(&trees.via_o, net, od.origin, od.destination)?;
        let split = links.len();
        Some(BestResponse { cost: trees.dist_o[od.destination], links, split, charger: None })
    };
    match t {
        VehType::F1 => non_charging().ok_or_else(|| {
            Error::infeasible(format!("OD {}: destination unreachable", od_name(net)))
        }),
        VehType::F2 => best_charging_response(net, station_costs, trees, od).ok_or_else(|| {
            Error::infeasible(format!("OD {}: no reachable charger for F2 demand", od_name(net)))
        }),
        VehType::F3 => {
            let nc = non_charging();
            let ch = best_charging_response(net, station_costs, trees, od).map(|mut br| {
                br.cost -= od.benefit_s;
                br
            });
            match (nc, ch) {
                // ties keep the non-charging route
                (Some(a), Some(b)) => Ok(if a.cost <= b.cost { a } else { b }),
                (Some(a), None) => Ok(a),
                (None, Some(b)) => Ok(b),
                (None, None) => Err(Error::infeasible(format!(
                    "OD {}: destination unreachable",
                    od_name(net)
                ))),
            }
        }
    }
}

/// Cheapest route for class (od, t) at the given link and station costs.
/// F1 ignores chargers, F2 must pass one, F3 compares the non-charging
/// cost against the best charging cost minus its benefit c_i.
pub fn charger_best_response(
    net: &Network,
    link_costs: &[f64],
    station_costs: &[f64],
    od: &OdPair,
    t: VehType,
) -> Result<BestResponse> {
    let trees = od_trees(net, link_costs, od);
    best_response_with_trees(net, station_costs, &trees, od, t)
}

/// Per-commodity link flows and the demand partition of Problem (CP).
#[derive(Debug, Clone)]
pub struct CommodityFlows {
    pub n_links: usize,
    /// x^(i,t,nc), indexed [od][type][link].
    pub nc: Vec<[Vec<f64>; 3]>,
    /// x^(i,t,c+), indexed [od][type][charger][link].
    pub plus: Vec<[Vec<Vec<f64>>; 3]>,
    /// x^(i,t,c-), same indexing.
    pub minus: Vec<[Vec<Vec<f64>>; 3]>,
    pub partition: ChargePartition,
}

impl CommodityFlows {
    pub fn zeros(n_od: usize, n_links: usize, n_chargers: usize) -> Self {
        let zero_link = vec![0.0; n_links];
        let per_charger = vec![zero_link.clone(); n_chargers];
        Self {
            n_links,
            nc: vec![[zero_link.clone(), zero_link.clone(), zero_link.clone()]; n_od],
            plus: vec![
                [per_charger.clone(), per_charger.clone(), per_charger.clone()];
                n_od
            ],
            minus: vec![
                [per_charger.clone(), per_charger.clone(), per_charger.clone()];
                n_od
            ],
            partition: ChargePartition::zeros(n_od, n_chargers),
        }
    }

    /// Total flow per physical link.
    pub fn total_link_flows(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n_links];
        for i in 0..self.nc.len() {
            for t in 0..3 {
                for (l, v) in self.nc[i][t].iter().enumerate() {
                    x[l] += v;
                }
                for c in 0..self.plus[i][t].len() {
                    for (l, v) in self.plus[i][t][c].iter().enumerate() {
                        x[l] += v;
                    }
                    for (l, v) in self.minus[i][t][c].iter().enumerate() {
                        x[l] += v;
                    }
                }
            }
        }
        x
    }

    /// Throughput per charger, x_hat_c = sum of q^(i,t,c).
    pub fn charger_flows(&self, n_chargers: usize) -> Vec<f64> {
        let mut xh = vec![0.0; n_chargers];
        for per_od in &self.partition.q {
            for per_type in per_od {
                for (c, v) in per_type.iter().enumerate() {
                    xh[c] += v;
                }
            }
        }
        xh
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    /// Total flow per physical link.
    pub x: Vec<f64>,
    /// Throughput per active charger (order of Network::chargers).
    pub x_hat: Vec<f64>,
    pub commodities: CommodityFlows,
    pub potential: f64,
    pub total_delay: f64,
    pub wardrop_gap: f64,
    pub iterations: usize,
    /// Potential value after each iteration; non-increasing.
    pub potential_trace: Vec<f64>,
}

/// c_d: sum of flow times delay over links and chargers. Benefits are a
/// welfare transfer, not delay, so they do not appear here.
pub fn total_delay(net: &Network, delays: &DelaySet, x: &[f64], x_hat: &[f64]) -> f64 {
    let links: f64 = delays.link.iter().zip(x).map(|(d, &xl)| xl * d.eval(xl)).sum();
    let chargers: f64 =
        net.chargers.iter().zip(x_hat).map(|(c, &xc)| xc * c.delay.eval(xc)).sum();
    links + chargers
}

/// F3 benefit payout: sum over ODs of c_i times that OD's F3 charging flow.
fn benefit_term(demand: &DemandTable, partition: &ChargePartition) -> f64 {
    demand
        .entries
        .iter()
        .enumerate()
        .map(|(i, od)| od.benefit_s * partition.charging_total(i, VehType::F3.index()))
        .sum()
}

/// Extended potential of a feasible commodity flow. Rejects infeasible input
/// with a report of the largest constraint violation.
pub fn potential(
    net: &Network,
    demand: &DemandTable,
    delays: &DelaySet,
    flows: &CommodityFlows,
) -> Result<f64> {
    check_feasible(net, demand, flows, 1e-6)?;
    let x = flows.total_link_flows();
    let x_hat = flows.charger_flows(net.chargers.len());
    Ok(potential_value(net, demand, delays, &x, &x_hat, &flows.partition))
}

fn potential_value(
    net: &Network,
    demand: &DemandTable,
    delays: &DelaySet,
    x: &[f64],
    x_hat: &[f64],
    partition: &ChargePartition,
) -> f64 {
    let links: f64 = delays.link.iter().zip(x).map(|(d, &xl)| d.integral(xl)).sum();
    let chargers: f64 =
        net.chargers.iter().zip(x_hat).map(|(c, &xc)| c.delay.integral(xc)).sum();
    links + chargers - benefit_term(demand, partition)
}

/// Verifies conservation (A x = y per commodity), nonnegativity, and the
/// partition rules, all within `tol`.
pub fn check_feasible(
    net: &Network,
    demand: &DemandTable,
    flows: &CommodityFlows,
    tol: f64,
) -> Result<()> {
    flows.partition.validate(demand, tol)?;
    let mut worst: f64 = 0.0;
    let mut worst_what = String::new();
    let n = net.nodes.len();
    let mut record = |v: f64, what: &dyn Fn() -> String| {
        if v > worst {
            worst = v;
            worst_what = what();
        }
    };
    let balance = |xs: &[f64]| -> Vec<f64> {
        let mut b = vec![0.0; n];
        for (l, link) in net.links.iter().enumerate() {
            b[link.tail] += xs[l];
            b[link.head] -= xs[l];
        }
        b
    };
    for (i, od) in demand.entries.iter().enumerate() {
        for t in 0..3 {
            for (l, &v) in flows.nc[i][t].iter().enumerate() {
                record((-v).max(0.0), &|| format!("nc[{i}][{t}] negative on link {l}"));
            }
            let rem = od.q[t] - flows.partition.charging_total(i, t);
            let b = balance(&flows.nc[i][t]);
            for (v, &bv) in b.iter().enumerate() {
                let want = if v == od.origin {
                    rem
                } else if v == od.destination {
                    -rem
                } else {
                    0.0
                };
                record((bv - want).abs(), &|| format!("nc[{i}][{t}] conservation at node {v}"));
            }
            for (c, ch) in net.chargers.iter().enumerate() {
                let qc = flows.partition.q[i][t][c];
                for (seg, xs) in [(0usize, &flows.plus[i][t][c]), (1, &flows.minus[i][t][c])] {
                    for (l, &v) in xs.iter().enumerate() {
                        record((-v).max(0.0), &|| {
                            format!("commodity[{i}][{t}][{c}] seg {seg} negative on link {l}")
                        });
                    }
                    let b = balance(xs);
                    let (src, dst) =
                        if seg == 0 { (od.origin, ch.node) } else { (ch.node, od.destination) };
                    for (v, &bv) in b.iter().enumerate() {
                        let mut want = 0.0;
                        if v == src {
                            want += qc;
                        }
                        if v == dst {
                            want -= qc;
                        }
                        record((bv - want).abs(), &|| {
                            format!("commodity[{i}][{t}][{c}] seg {seg} conservation at node {v}")
                        });
                    }
                }
            }
        }
    }
    if worst > tol {
        return Err(Error::validation(format!(
            "infeasible flows: max violation {worst:.3e} at {worst_what}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Target relative Wardrop gap.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iters: 50_000 }
    }
}

/// One discovered route with its assigned flow.
#[derive(Debug, Clone)]
struct Atom {
    links: Vec<usize>,
    split: usize,
    charger: Option<usize>,
    flow: f64,
}

impl Atom {
    fn cost(&self, link_costs: &[f64], station_costs: &[f64], benefit: f64, t: usize) -> f64 {
        let mut c: f64 = self.links.iter().map(|&l| link_costs[l]).sum();
        if let Some(ch) = self.charger {
            c += station_costs[ch];
            if t == VehType::F3.index() {
                c -= benefit;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy)]
struct Class {
    od: usize,
    t: usize,
    q: f64,
    benefit: f64,
}

struct Workspace<'a> {
    net: &'a Network,
    delays: &'a DelaySet,
    classes: Vec<Class>,
    atoms: Vec<Vec<Atom>>,
    x: Vec<f64>,
    x_hat: Vec<f64>,
}

impl Workspace<'_> {
    fn rebuild_flows(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
        self.x_hat.iter_mut().for_each(|v| *v = 0.0);
        for atoms in &self.atoms {
            for a in atoms {
                for &l in &a.links {
                    self.x[l] += a.flow;
                }
                if let Some(c) = a.charger {
                    self.x_hat[c] += a.flow;
                }
            }
        }
    }

    fn add_flow(&mut self, k: usize, br: &BestResponse, q: f64) {
        let atoms = &mut self.atoms[k];
        if let Some(a) =
            atoms.iter_mut().find(|a| a.charger == br.charger && a.links == br.links)
        {
            a.flow += q;
        } else {
            atoms.push(Atom { links: br.links.clone(), split: br.split, charger: br.charger, flow: q });
        }
        for &l in &br.links {
            self.x[l] += q;
        }
        if let Some(c) = br.charger {
            self.x_hat[c] += q;
        }
    }

    /// Shift delta vehicles per hour between two atoms of one class, keeping
    /// link and charger totals in sync.
    fn shift(&mut self, k: usize, hi: usize, lo: usize, delta: f64) {
        let (from_links, from_charger);
        let (to_links, to_charger);
        {
            let a = &self.atoms[k][hi];
            from_links = a.links.clone();
            from_charger = a.charger;
            let b = &self.atoms[k][lo];
            to_links = b.links.clone();
            to_charger = b.charger;
        }
        self.atoms[k][hi].flow -= delta;
        self.atoms[k][lo].flow += delta;
        for &l in &from_links {
            self.x[l] -= delta;
        }
        for &l in &to_links {
            self.x[l] += delta;
        }
        if let Some(c) = from_charger {
            self.x_hat[c] -= delta;
        }
        if let Some(c) = to_charger {
            self.x_hat[c] += delta;
        }
    }

    /// Pairwise cost-equalizing sweeps within one class. Each move solves the
    /// exact one-dimensional problem by bisection, so the potential cannot
    /// increase. Returns the number of moves applied.
    fn equilibrate_class(&mut self, k: usize) -> usize {
        let class = self.classes[k];
        let mut moves = 0;
        for _ in 0..200 {
            let link_costs = self.delays.link_costs(&self.x);
            let station_costs = charger_costs(self.net, &self.x_hat);
            let costs: Vec<f64> = self.atoms[k]
                .iter()
                .map(|a| a.cost(&link_costs, &station_costs, class.benefit, class.t))
                .collect();
            let mut hi = None;
            let mut lo = 0usize;
            for (j, a) in self.atoms[k].iter().enumerate() {
                if a.flow > 0.0 && hi.map_or(true, |h: usize| costs[j] > costs[h]) {
                    hi = Some(j);
                }
                if costs[j] < costs[lo] {
                    lo = j;
                }
            }
            let hi = match hi {
                Some(h) => h,
                None => break,
            };
            let spread = costs[hi] - costs[lo];
            if spread <= 1e-12 * (1.0 + costs[lo].abs()) || hi == lo {
                break;
            }
            let cap = self.atoms[k][hi].flow;
            // g(delta) = cost_lo - cost_hi after moving delta; increasing in delta
            let g = |ws: &Workspace, delta: f64| -> f64 {
                let mut dx: Vec<(usize, f64)> = Vec::new();
                let bump = |l: usize, v: f64, dx: &mut Vec<(usize, f64)>| {
                    if let Some(e) = dx.iter_mut().find(|e| e.0 == l) {
                        e.1 += v;
                    } else {
                        dx.push((l, v));
                    }
                };
                for &l in &ws.atoms[k][hi].links {
                    bump(l, -delta, &mut dx);
                }
                for &l in &ws.atoms[k][lo].links {
                    bump(l, delta, &mut dx);
                }
                let eval_atom = |idx: usize| -> f64 {
                    let a = &ws.atoms[k][idx];
                    let mut c: f64 = a
                        .links
                        .iter()
                        .map(|&l| {
                            let mut xl = ws.x[l];
                            if let Some(e) = dx.iter().find(|e| e.0 == l) {
                                xl += e.1;
                            }
                            ws.delays.link[l].eval(xl.max(0.0))
                        })
                        .sum();
                    if let Some(c0) = a.charger {
                        let mut xc = ws.x_hat[c0];
                        if ws.atoms[k][hi].charger == Some(c0) {
                            xc -= delta;
                        }
                        if ws.atoms[k][lo].charger == Some(c0) {
                            xc += delta;
                        }
                        c += ws.net.chargers[c0].delay.eval(xc.max(0.0));
                        if class.t == VehType::F3.index() {
                            c -= class.benefit;
                        }
                    }
                    c
                };
                eval_atom(lo) - eval_atom(hi)
            };
            let delta = if g(self, cap) <= 0.0 {
                cap
            } else {
                let mut a = 0.0f64;
                let mut b = cap;
                for _ in 0..100 {
                    let m = 0.5 * (a + b);
                    if g(self, m) <= 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                    if b - a <= 1e-15 * cap {
                        break;
                    }
                }
                0.5 * (a + b)
            };
            if delta <= 1e-16 * class.q {
                break;
            }
            self.shift(k, hi, lo, delta);
            moves += 1;
        }
        moves
    }
}

fn gap_denominator(aon: f64, ff_aon: f64) -> f64 {
    aon.abs().max(ff_aon.abs()).max(1e-12)
}

/// Relative Wardrop gap of an existing solution at its own costs.
pub fn wardrop_gap(
    solution: &EquilibriumSolution,
    net: &Network,
    demand: &DemandTable,
    delays: &DelaySet,
) -> Result<f64> {
    let x = &solution.x;
    let x_hat = &solution.x_hat;
    let link_costs = delays.link_costs(x);
    let station_costs = charger_costs(net, x_hat);
    let tc = total_delay(net, delays, x, x_hat)
        - benefit_term(demand, &solution.commodities.partition);
    let mut aon = 0.0;
    let ff_link_costs = delays.free_flow_costs();
    let ff_station_costs = charger_costs(net, &vec![0.0; net.chargers.len()]);
    let mut ff_aon = 0.0;
    for od in &demand.entries {
        for t in 0..3 {
            if od.q[t] == 0.0 {
                continue;
            }
            let br =
                charger_best_response(net, &link_costs, &station_costs, od, VehType::from_index(t))?;
            aon += od.q[t] * br.cost;
            let ff = charger_best_response(
                net,
                &ff_link_costs,
                &ff_station_costs,
                od,
                VehType::from_index(t),
            )?;
            ff_aon += od.q[t] * ff.cost;
        }
    }
    Ok(((tc - aon) / gap_denominator(aon, ff_aon)).max(0.0))
}

/// Solve Problem (CP) on a charger-augmented network. Chargers in
/// `net.chargers` are the active selection. Returns a certified solution
/// with `wardrop_gap <= opts.tolerance`.
pub fn solve_cp(
    net: &Network,
    demand: &DemandTable,
    delays: &DelaySet,
    opts: &SolverOptions,
) -> Result<EquilibriumSolution> {
    assert_eq!(delays.link.len(), net.links.len(), "delay set does not match network");
    let mut classes = Vec::new();
    for (i, od) in demand.entries.iter().enumerate() {
        for t in 0..3 {
            if od.q[t] > 0.0 {
                classes.push(Class { od: i, t, q: od.q[t], benefit: od.benefit_s });
            }
        }
    }
    let n_links = net.links.len();
    let n_chargers = net.chargers.len();
    let mut ws = Workspace {
        net,
        delays,
        atoms: vec![Vec::new(); classes.len()],
        classes,
        x: vec![0.0; n_links],
        x_hat: vec![0.0; n_chargers],
    };

    // all-or-nothing start at free-flow costs; also fixes the gap denominator
    let ff_costs = delays.free_flow_costs();
    let ff_station = charger_costs(net, &vec![0.0; n_chargers]);
    let mut ff_aon = 0.0;
    for k in 0..ws.classes.len() {
        let class = ws.classes[k];
        let od = &demand.entries[class.od];
        let br = charger_best_response(net, &ff_costs, &ff_station, od, VehType::from_index(class.t))?;
        ff_aon += class.q * br.cost;
        ws.add_flow(k, &br, class.q);
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = ws.classes.is_empty();
    let mut gap = 0.0;
    while iterations < opts.max_iters && !converged {
        iterations += 1;
        ws.rebuild_flows();
        let link_costs = delays.link_costs(&ws.x);
        let station_costs = charger_costs(net, &ws.x_hat);

        // gap certificate from true best responses
        let mut aon = 0.0;
        let mut responses = Vec::with_capacity(ws.classes.len());
        for class in &ws.classes {
            let od = &demand.entries[class.od];
            let trees = od_trees(net, &link_costs, od);
            let br = best_response_with_trees(
                net,
                &station_costs,
                &trees,
                od,
                VehType::from_index(class.t),
            )?;
            aon += class.q * br.cost;
            responses.push(br);
        }
        let mut tc = 0.0;
        for (k, class) in ws.classes.iter().enumerate() {
            let costs_of: f64 = ws.atoms[k]
                .iter()
                .map(|a| a.flow * a.cost(&link_costs, &station_costs, class.benefit, class.t))
                .sum();
            tc += costs_of;
        }
        gap = ((tc - aon) / gap_denominator(aon, ff_aon)).max(0.0);
        if gap <= opts.tolerance {
            converged = true;
            break;
        }

        // Frank-Wolfe step toward the all-or-nothing target, exact line search
        let mut dx = vec![0.0; n_links];
        let mut dxh = vec![0.0; n_chargers];
        let mut dbenefit = 0.0;
        for (k, class) in ws.classes.iter().enumerate() {
            for a in &ws.atoms[k] {
                for &l in &a.links {
                    dx[l] -= a.flow;
                }
                if let Some(c) = a.charger {
                    dxh[c] -= a.flow;
                    if class.t == VehType::F3.index() {
                        dbenefit -= class.benefit * a.flow;
                    }
                }
            }
            let br = &responses[k];
            for &l in &br.links {
                dx[l] += class.q;
            }
            if let Some(c) = br.charger {
                dxh[c] += class.q;
                if class.t == VehType::F3.index() {
                    dbenefit += class.benefit * class.q;
                }
            }
        }
        let dphi = |gamma: f64| -> f64 {
            let mut v = -dbenefit;
            for l in 0..n_links {
                if dx[l] != 0.0 {
                    v += delays.link[l].eval((ws.x[l] + gamma * dx[l]).max(0.0)) * dx[l];
                }
            }
            for c in 0..n_chargers {
                if dxh[c] != 0.0 {
                    v += net.chargers[c].delay.eval((ws.x_hat[c] + gamma * dxh[c]).max(0.0))
                        * dxh[c];
                }
            }
            v
        };
        let gamma = if dphi(0.0) >= 0.0 {
            0.0
        } else if dphi(1.0) <= 0.0 {
            1.0
        } else {
            let mut a = 0.0f64;
            let mut b = 1.0f64;
            while b - a > 1e-10 {
                let m = 0.5 * (a + b);
                if dphi(m) <= 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        if gamma > 0.0 {
            for atoms in ws.atoms.iter_mut() {
                for a in atoms.iter_mut() {
                    a.flow *= 1.0 - gamma;
                }
            }
            ws.rebuild_flows();
            for k in 0..ws.classes.len() {
                let q = ws.classes[k].q;
                let br = responses[k].clone();
                ws.add_flow(k, &br, gamma * q);
            }
        }

        // pairwise equilibration across discovered routes
        for _ in 0..8 {
            let mut moves = 0;
            for k in 0..ws.classes.len() {
                moves += ws.equilibrate_class(k);
            }
            if moves == 0 {
                break;
            }
        }
        for atoms in ws.atoms.iter_mut() {
            atoms.retain(|a| a.flow > 0.0);
        }

        ws.rebuild_flows();
        trace.push(potential_value(
            net,
            demand,
            delays,
            &ws.x,
            &ws.x_hat,
            &partition_from_atoms(&ws, demand, n_chargers),
        ));
    }

    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            detail: format!("wardrop gap {gap:.3e} above tolerance {:.3e}", opts.tolerance),
        });
    }

    // exact per-class mass normalization before exporting commodities
    for (k, class) in ws.classes.iter().enumerate() {
        let total: f64 = ws.atoms[k].iter().map(|a| a.flow).sum();
        if total > 0.0 {
            let scale = class.q / total;
            for a in ws.atoms[k].iter_mut() {
                a.flow *= scale;
            }
        }
    }
    ws.rebuild_flows();

    let commodities = commodities_from_atoms(&ws, demand, n_links, n_chargers);
    let x = ws.x.clone();
    let x_hat = ws.x_hat.clone();
    let potential = potential_value(net, demand, delays, &x, &x_hat, &commodities.partition);
    let td = total_delay(net, delays, &x, &x_hat);
    let mut solution = EquilibriumSolution {
        x,
        x_hat,
        commodities,
        potential,
        total_delay: td,
        wardrop_gap: 0.0,
        iterations,
        potential_trace: trace,
    };
    solution.wardrop_gap = wardrop_gap(&solution, net, demand, delays)?;
    Ok(solution)
}

fn partition_from_atoms(ws: &Workspace, demand: &DemandTable, n_chargers: usize) -> ChargePartition {
    let mut part = ChargePartition::zeros(demand.entries.len(), n_chargers);
    for (k, class) in ws.classes.iter().enumerate() {
        for a in &ws.atoms[k] {
            if let Some(c) = a.charger {
                part.q[class.od][class.t][c] += a.flow;
            }
        }
    }
    part
}

fn commodities_from_atoms(
    ws: &Workspace,
    demand: &DemandTable,
    n_links: usize,
    n_chargers: usize,
) -> CommodityFlows {
    let mut com = CommodityFlows::zeros(demand.entries.len(), n_links, n_chargers);
    for (k, class) in ws.classes.iter().enumerate() {
        for a in &ws.atoms[k] {
            match a.charger {
                None => {
                    for &l in &a.links {
                        com.nc[class.od][class.t][l] += a.flow;
                    }
                }
                Some(c) => {
                    com.partition.q[class.od][class.t][c] += a.flow;
                    for &l in &a.links[..a.split] {
                        com.plus[class.od][class.t][c][l] += a.flow;
                    }
                    for &l in &a.links[a.split..] {
                        com.minus[class.od][class.t][c][l] += a.flow;
                    }
                }
            }
        }
    }
    com
}

#[derive(Serialize)]
struct Summary {
    potential: f64,
    total_delay: f64,
    wardrop_gap: f64,
    iterations: usize,
    seed: Option<u64>,
}

impl EquilibriumSolution {
    /// CSV: link_id, flow, delay.
    pub fn links_csv(&self, net: &Network, delays: &DelaySet) -> String {
        let mut out = String::from("link_id,flow,delay\n");
        for (l, link) in net.links.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                link.id,
                self.x[l],
                delays.link[l].eval(self.x[l])
            ));
        }
        out
    }

    /// CSV: charger node, throughput, delay.
    pub fn chargers_csv(&self, net: &Network) -> String {
        let mut out = String::from("node,throughput,delay\n");
        for (c, ch) in net.chargers.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                net.node_id(ch.node),
                self.x_hat[c],
                ch.delay.eval(self.x_hat[c])
            ));
        }
        out
    }

    /// CSV of the demand partition: od, type, charger node, q.
    pub fn partition_csv(&self, net: &Network) -> String {
        let mut out = String::from("od,type,charger,q\n");
        for (i, per_od) in self.commodities.partition.q.iter().enumerate() {
            for (t, per_type) in per_od.iter().enumerate() {
                for (c, &q) in per_type.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        i,
                        VehType::from_index(t),
                        net.node_id(net.chargers[c].node),
                        q
                    ));
                }
            }
        }
        out
    }

    pub fn summary_json(&self, seed: Option<u64>) -> String {
        serde_json::to_string_pretty(&Summary {
            potential: self.potential,
            total_delay: self.total_delay,
            wardrop_gap: self.wardrop_gap,
            iterations: self.iterations,
            seed,
        })
        .expect("summary serialization cannot fail")
    }
}
