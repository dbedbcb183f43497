//! Approximate Nash equilibrium search for the atomic queue model.
//!
//! Vehicles are atomic: each picks one route from its (OD, type) class.
//! The better-response walk repeatedly moves a single vehicle from the
//! slowest used route to the fastest feasible route of the same class,
//! re-simulating between moves. There is no potential-game guarantee, so
//! the walk keeps the best assignment seen and reports convergence
//! honestly.

use std::collections::HashSet;

use serde::Serialize;

use crate::network::VehType;
use crate::queuesim::{monte_carlo, RoutePlan, Scenario, VehiclePlan};
use crate::rng::child_seed;
use crate::{Error, Result};

/// One compatibility class: vehicles that may use exactly these routes.
#[derive(Debug, Clone)]
pub struct NeClass {
    pub od: usize,
    pub vtype: VehType,
    /// Indices into the route plan catalog.
    pub routes: Vec<usize>,
    /// Departure time per vehicle of the class, seconds.
    pub departures: Vec<u32>,
}

/// A queue scenario together with its route catalog and class structure.
pub struct NeProblem<'a> {
    pub scenario: &'a Scenario,
    pub plans: Vec<RoutePlan>,
    pub classes: Vec<NeClass>,
}

impl NeProblem<'_> {
    fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.plans.len()];
        for (c, class) in self.classes.iter().enumerate() {
            for &r in &class.routes {
                if r >= self.plans.len() {
                    return Err(Error::validation("class references unknown route"));
                }
                if self.plans[r].vtype != class.vtype {
                    return Err(Error::validation("route type does not match its class"));
                }
                if let Some(prev) = owner[r] {
                    if prev != c {
                        return Err(Error::validation("route belongs to two classes"));
                    }
                }
                owner[r] = Some(c);
            }
            if class.routes.is_empty() && !class.departures.is_empty() {
                return Err(Error::infeasible("class has vehicles but no routes"));
            }
        }
        Ok(())
    }
}

/// Integer vehicle counts per catalog route.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub counts: Vec<usize>,
}

impl Assignment {
    pub fn used(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }
}

/// Round continuous route flows to per-class integer counts by the largest
/// remainder method; class totals are preserved exactly.
pub fn initial_assignment(problem: &NeProblem, flows: &[f64]) -> Result<Assignment> {
    if flows.len() != problem.plans.len() {
        return Err(Error::validation("flow vector length mismatch"));
    }
    problem.validate()?;
    let mut counts = vec![0usize; problem.plans.len()];
    for class in &problem.classes {
        let n = class.departures.len();
        if n == 0 {
            continue;
        }
        let raw: Vec<f64> = class.routes.iter().map(|&r| flows[r].max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        let shares: Vec<f64> = if total > 0.0 {
            raw.iter().map(|f| f * n as f64 / total).collect()
        } else {
            vec![n as f64 / class.routes.len() as f64; class.routes.len()]
        };
        let mut base: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let assigned: usize = base.iter().sum();
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &j in order.iter().take(n - assigned) {
            base[j] += 1;
        }
        for (&r, &c) in class.routes.iter().zip(&base) {
            counts[r] = c;
        }
    }
    Ok(Assignment { counts })
}

fn check_assignment(problem: &NeProblem, assignment: &Assignment) -> Result<()> {
    if assignment.counts.len() != problem.plans.len() {
        return Err(Error::validation("assignment length mismatch"));
    }
    let mut covered = vec![false; problem.plans.len()];
    for class in &problem.classes {
        let total: usize = class.routes.iter().map(|&r| assignment.counts[r]).sum();
        if total != class.departures.len() {
            return Err(Error::validation(format!(
                "class ({}, {}) holds {} vehicles, expected {}",
                class.od,
                class.vtype,
                total,
                class.departures.len()
            )));
        }
        for &r in &class.routes {
            covered[r] = true;
        }
    }
    for (r, &cov) in covered.iter().enumerate() {
        if !cov && assignment.counts[r] > 0 {
            return Err(Error::validation(format!("route {r} is outside every class")));
        }
    }
    Ok(())
}

/// Expand an assignment into concrete vehicles: class by class, route by
/// route, departure slots consumed in order.
pub fn vehicles_for(problem: &NeProblem, assignment: &Assignment) -> Vec<VehiclePlan> {
    let mut vehicles = Vec::new();
    for class in &problem.classes {
        let mut slot = 0;
        for &r in &class.routes {
            for _ in 0..assignment.counts[r] {
                vehicles.push(VehiclePlan {
                    id: vehicles.len(),
                    route: r,
                    depart_s: class.departures[slot],
                    initial_charge: None,
                });
                slot += 1;
            }
        }
    }
    vehicles
}

/// Monte Carlo mean travel time per route; unused routes report free flow.
pub fn route_delays(
    problem: &NeProblem,
    assignment: &Assignment,
    seed: u64,
    n_mc: usize,
) -> Result<Vec<f64>> {
    let vehicles = vehicles_for(problem, assignment);
    let seeds: Vec<u64> = (0..n_mc).map(|k| child_seed(seed, k)).collect();
    let report = monte_carlo(problem.scenario, &problem.plans, &vehicles, &seeds)?;
    Ok(report.route_mean_s)
}

/// Equilibrium check: largest pairwise delay gap among used routes must not
/// exceed alpha times the smallest delay over the whole route set.
pub fn is_approx_ne(delays: &[f64], used: &[bool], alpha: f64) -> bool {
    let min_all = delays.iter().copied().fold(f64::INFINITY, f64::min);
    if !min_all.is_finite() {
        return true;
    }
    let used_delays: Vec<f64> = delays
        .iter()
        .zip(used)
        .filter(|(_, &u)| u)
        .map(|(&d, _)| d)
        .collect();
    if used_delays.len() < 2 {
        return true;
    }
    let hi = used_delays.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = used_delays.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo <= alpha * min_all
}

/// Candidate single-vehicle moves, best first: sources are used routes in
/// decreasing delay order, targets the strictly faster routes of the same
/// class in increasing delay order. Ties break on lower route index.
fn improving_moves(
    problem: &NeProblem,
    assignment: &Assignment,
    delays: &[f64],
) -> Vec<(usize, usize)> {
    let mut sources: Vec<usize> = (0..assignment.counts.len())
        .filter(|&r| assignment.counts[r] > 0)
        .collect();
    sources.sort_by(|&a, &b| delays[b].total_cmp(&delays[a]).then(a.cmp(&b)));
    let mut moves = Vec::new();
    for &from in &sources {
        let class = problem
            .classes
            .iter()
            .find(|c| c.routes.contains(&from));
        let Some(class) = class else { continue };
        let mut targets: Vec<usize> = class
            .routes
            .iter()
            .copied()
            .filter(|&to| to != from && delays[to] < delays[from])
            .collect();
        targets.sort_by(|&a, &b| delays[a].total_cmp(&delays[b]).then(a.cmp(&b)));
        for to in targets {
            moves.push((from, to));
        }
    }
    moves
}

/// One better-response move: shift a vehicle from the slowest used route to
/// the fastest strictly better route of its class. None at a fixed point.
pub fn better_response_step(
    problem: &NeProblem,
    assignment: &Assignment,
    delays: &[f64],
) -> Option<Assignment> {
    let (from, to) = *improving_moves(problem, assignment, delays).first()?;
    let mut next = assignment.clone();
    next.counts[from] -= 1;
    next.counts[to] += 1;
    Some(next)
}

#[derive(Debug, Clone)]
pub struct NeOptions {
    pub alpha: f64,
    pub n_mc: usize,
    pub n_mc_final: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for NeOptions {
    fn default() -> Self {
        Self { alpha: 0.01, n_mc: 20, n_mc_final: 100, max_iters: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NeReport {
    pub iterations: usize,
    pub converged: bool,
    pub alpha: f64,
    /// Largest used-route delay gap within any class, seconds.
    pub max_discrepancy: f64,
    pub route_times: Vec<f64>,
}

fn class_discrepancies(
    problem: &NeProblem,
    assignment: &Assignment,
    delays: &[f64],
    alpha: f64,
) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut ok = true;
    for class in &problem.classes {
        let class_delays: Vec<f64> = class.routes.iter().map(|&r| delays[r]).collect();
        let class_used: Vec<bool> =
            class.routes.iter().map(|&r| assignment.counts[r] > 0).collect();
        if !is_approx_ne(&class_delays, &class_used, alpha) {
            ok = false;
        }
        let used: Vec<f64> = class_delays
            .iter()
            .zip(&class_used)
            .filter(|(_, &u)| u)
            .map(|(&d, _)| d)
            .collect();
        if used.len() >= 2 {
            let hi = used.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = used.iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.max(hi - lo);
        }
    }
    (worst, ok)
}

const VISITED_CAP: usize = 10_000;

/// Better-response walk from an initial assignment.
///
/// Each iteration simulates the current assignment, checks the alpha
/// criterion per class, and applies the best single-vehicle move that does
/// not recreate a visited assignment. Returns the converged assignment, or
/// the best seen when the walk cycles or exhausts its iteration budget;
/// the report is always evaluated with the final (larger) seed count.
pub fn find_approx_ne(
    problem: &NeProblem,
    initial: Assignment,
    opts: &NeOptions,
) -> Result<(Assignment, NeReport)> {
    problem.validate()?;
    check_assignment(problem, &initial)?;
    let mut visited: HashSet<Vec<usize>> = HashSet::new();
    visited.insert(initial.counts.clone());
    let mut current = initial;
    let mut best = current.clone();
    let mut best_disc = f64::INFINITY;
    let mut iterations = 0;
    let mut converged_in_search = false;
    loop {
        let delays = route_delays(problem, &current, opts.seed, opts.n_mc)?;
        let (disc, ok) = class_discrepancies(problem, &current, &delays, opts.alpha);
        if disc < best_disc {
            best_disc = disc;
            best = current.clone();
        }
        if ok {
            converged_in_search = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        let moves = improving_moves(problem, &current, &delays);
        let mut applied = false;
        for (from, to) in moves {
            let mut next = current.clone();
            next.counts[from] -= 1;
            next.counts[to] += 1;
            if !visited.contains(&next.counts) {
                if visited.len() < VISITED_CAP {
                    visited.insert(next.counts.clone());
                }
                current = next;
                applied = true;
                break;
            }
        }
        if !applied {
            // every improving move revisits a known assignment
            break;
        }
        iterations += 1;
    }
    let result = if converged_in_search { current } else { best };
    let route_times = route_delays(problem, &result, opts.seed, opts.n_mc_final)?;
    let (max_discrepancy, converged) =
        class_discrepancies(problem, &result, &route_times, opts.alpha);
    Ok((
        result,
        NeReport { iterations, converged, alpha: opts.alpha, max_discrepancy, route_times },
    ))
}

/// CSV mapping each vehicle to its route.
pub fn assignment_csv(problem: &NeProblem, assignment: &Assignment) -> String {
    let mut out = String::from("vehicle_id,route_id\n");
    for v in vehicles_for(problem, assignment) {
        out.push_str(&format!("{},{}\n", v.id, v.route));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Network, Node};

    fn two_route_scenario(fft_s: f64, horizon: u32) -> Scenario {
        let nodes = ["o", "d"]
            .iter()
            .map(|s| Node { id: s.to_string(), x: None, y: None })
            .collect();
        let net = Network::new(
            nodes,
            vec![
                ("r0".into(), "o".into(), "d".into(), 7000.0, 1, fft_s, Some(3600.0), false),
                ("r1".into(), "o".into(), "d".into(), 7000.0, 1, fft_s, Some(3600.0), false),
            ],
            vec![],
        )
        .unwrap();
        Scenario::new(net, vec![], horizon).unwrap()
    }

    fn two_route_problem(scenario: &Scenario, n: usize) -> NeProblem<'_> {
        NeProblem {
            scenario,
            plans: vec![
                RoutePlan { od: 0, vtype: VehType::F1, links: vec![0], station: None },
                RoutePlan { od: 0, vtype: VehType::F1, links: vec![1], station: None },
            ],
            classes: vec![NeClass {
                od: 0,
                vtype: VehType::F1,
                routes: vec![0, 1],
                departures: vec![0; n],
            }],
        }
    }

    #[test]
    fn largest_remainder_preserves_totals() {
        let scenario = two_route_scenario(100.0, 400);
        let mut problem = two_route_problem(&scenario, 4);
        problem.plans.push(RoutePlan { od: 0, vtype: VehType::F1, links: vec![0], station: None });
        problem.classes[0].routes.push(2);
        let a = initial_assignment(&problem, &[1.4, 1.4, 1.2]).unwrap();
        assert_eq!(a.counts.iter().sum::<usize>(), 4);
        assert_eq!(a.counts, vec![2, 1, 1]);
        // zero flow spreads evenly
        let z = initial_assignment(&problem, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(z.counts.iter().sum::<usize>(), 4);
        assert_eq!(z.counts, vec![2, 1, 1]);
    }

    #[test]
    fn step_moves_one_vehicle_from_worst_to_best() {
        let scenario = two_route_scenario(100.0, 400);
        let problem = two_route_problem(&scenario, 5);
        let a = Assignment { counts: vec![5, 0] };
        let next = better_response_step(&problem, &a, &[10.0, 2.0]).unwrap();
        assert_eq!(next.counts, vec![4, 1]);
        // equal delays are a fixed point
        assert!(better_response_step(&problem, &a, &[7.0, 7.0]).is_none());
    }

    #[test]
    fn step_respects_class_boundaries() {
        // class 0 owns routes {0,1}, class 1 owns route {2}; route 0 is
        // fastest but class-1 vehicles may not take it
        let scenario = two_route_scenario(100.0, 400);
        let mut problem = two_route_problem(&scenario, 2);
        problem.plans.push(RoutePlan { od: 1, vtype: VehType::F1, links: vec![1], station: None });
        problem.classes.push(NeClass {
            od: 1,
            vtype: VehType::F1,
            routes: vec![2],
            departures: vec![0],
        });
        let a = Assignment { counts: vec![1, 1, 1] };
        let delays = [1.0, 1.0, 50.0];
        assert!(better_response_step(&problem, &a, &delays).is_none());
    }

    #[test]
    fn approx_ne_check_examples() {
        assert!(!is_approx_ne(&[100.0, 102.0], &[true, true], 0.01));
        assert!(is_approx_ne(&[100.0, 100.5], &[true, true], 0.01));
        // single used route is always an equilibrium
        assert!(is_approx_ne(&[100.0, 150.0], &[true, false], 0.01));
        // monotone in alpha
        let mut prev = false;
        for k in 0..60 {
            let alpha = k as f64 * 0.0005;
            let now = is_approx_ne(&[100.0, 102.0], &[true, true], alpha);
            assert!(!prev || now);
            prev = now;
        }
    }

    #[test]
    fn symmetric_vehicles_split_evenly() {
        // short free-flow time makes the 1% band tight (0.2 s), so the walk
        // must reach the exact 3/3 split from the lopsided start
        let scenario = two_route_scenario(20.0, 300);
        let problem = two_route_problem(&scenario, 6);
        let initial = Assignment { counts: vec![5, 1] };
        let opts = NeOptions { seed: 9, ..NeOptions::default() };
        let (result, report) = find_approx_ne(&problem, initial, &opts).unwrap();
        assert!(report.converged, "disc {}", report.max_discrepancy);
        assert_eq!(result.counts, vec![3, 3]);
        assert_eq!(report.iterations, 2);
    }

    #[test]
    fn converged_initial_takes_zero_iterations() {
        let scenario = two_route_scenario(100.0, 600);
        let problem = two_route_problem(&scenario, 4);
        let initial = Assignment { counts: vec![2, 2] };
        let (result, report) =
            find_approx_ne(&problem, initial.clone(), &NeOptions::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(report.converged);
        assert_eq!(result.counts, initial.counts);
    }

    #[test]
    fn tight_alpha_oscillation_returns_best_seen() {
        // three vehicles, two routes: any (2,1) split has discrepancy 0.5 s
        // which a 0.001 criterion rejects, so the walk cycles
        let scenario = two_route_scenario(100.0, 600);
        let problem = two_route_problem(&scenario, 3);
        let initial = Assignment { counts: vec![2, 1] };
        let opts = NeOptions { alpha: 0.001, seed: 4, ..NeOptions::default() };
        let (result, report) = find_approx_ne(&problem, initial, &opts).unwrap();
        assert!(!report.converged);
        assert!(report.max_discrepancy > 0.0);
        let diff = result.counts[0].abs_diff(result.counts[1]);
        assert_eq!(diff, 1);
    }

    #[test]
    fn delays_use_free_flow_for_unused_routes() {
        let scenario = two_route_scenario(100.0, 600);
        let problem = two_route_problem(&scenario, 1);
        let a = Assignment { counts: vec![1, 0] };
        let delays = route_delays(&problem, &a, 3, 1).unwrap();
        assert_eq!(delays[0], 100.0);
        assert_eq!(delays[1], 100.0);
    }

    #[test]
    fn rejects_malformed_initial_assignment() {
        let scenario = two_route_scenario(100.0, 600);
        let problem = two_route_problem(&scenario, 4);
        let bad = Assignment { counts: vec![3, 0] };
        assert!(find_approx_ne(&problem, bad, &NeOptions::default()).is_err());
        let worse = Assignment { counts: vec![4] };
        assert!(find_approx_ne(&problem, worse, &NeOptions::default()).is_err());
    }

    #[test]
    fn assignment_csv_lists_every_vehicle() {
        let scenario = two_route_scenario(100.0, 600);
        let problem = two_route_problem(&scenario, 3);
        let a = Assignment { counts: vec![2, 1] };
        let csv = assignment_csv(&problem, &a);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0");
        assert_eq!(lines[3], "2,1");
    }
}
