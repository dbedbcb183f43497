//! Route library construction and route-flow recovery.
//!
//! A route library enumerates candidate routes per OD pair and vehicle
//! type: loopless shortest paths for non-charging travel, and two-segment
//! compositions through each charger for charging travel. Recovery then
//! finds nonnegative route flows reproducing observed link flows while
//! matching the charging partition of each demand class exactly.

use std::collections::HashSet;

use serde::Serialize;

use crate::graph::{path_nodes, yen_k_shortest, Path};
use crate::network::{ChargePartition, DemandTable, Network, VehType, VEH_TYPES};
use crate::{Error, Result};

/// Yen's algorithm behind a validated entry point.
pub fn k_shortest_paths(
    net: &Network,
    costs: &[f64],
    origin: usize,
    destination: usize,
    k: usize,
) -> Result<Vec<Path>> {
    if origin == destination {
        return Err(Error::validation("origin equals destination"));
    }
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    Ok(yen_k_shortest(net, costs, origin, destination, k))
}

#[derive(Debug, Clone, Serialize)]
pub struct Route {
    pub od: usize,
    pub vtype: VehType,
    /// Physical links in traversal order; a link may repeat across segments.
    pub links: Vec<usize>,
    /// Links preceding the charging stop; equals links.len() when the stop
    /// is at the destination, 0 when it is at the origin.
    pub split: usize,
    /// Charger node index, None on non-charging routes.
    pub charger: Option<usize>,
    /// Cost at the supplied link and charger costs.
    pub cost: f64,
    /// True when the two segments revisit a node.
    pub node_repeat: bool,
}

/// Routes of one demand class (OD pair, vehicle type, charger choice).
#[derive(Debug, Clone, Serialize)]
pub struct RouteGroup {
    pub od: usize,
    pub vtype: VehType,
    /// Position in the charger list the library was built with.
    pub charger_pos: Option<usize>,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteLibrary {
    pub routes: Vec<Route>,
    pub groups: Vec<RouteGroup>,
    /// Charger node per position, as passed at build time.
    pub charger_nodes: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LibraryParams {
    /// Non-charging routes per OD.
    pub k_od: usize,
    /// Origin-to-charger segment candidates.
    pub k_oc: usize,
    /// Charger-to-destination segment candidates.
    pub k_cd: usize,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self { k_od: 8, k_oc: 4, k_cd: 4 }
    }
}

fn compose_nodes(net: &Network, seg1: &[usize], seg2: &[usize], via: usize) -> Vec<usize> {
    let mut seq = if seg1.is_empty() {
        vec![via]
    } else {
        path_nodes(net, net.links[seg1[0]].tail, seg1)
    };
    if !seg2.is_empty() {
        seq.extend(path_nodes(net, via, seg2).into_iter().skip(1));
    }
    seq
}

fn has_repeat(nodes: &[usize]) -> bool {
    let mut seen = HashSet::with_capacity(nodes.len());
    nodes.iter().any(|v| !seen.insert(*v))
}

/// Enumerate candidate routes for every OD pair and vehicle type.
///
/// `charger_nodes` lists charging locations; `charger_costs` their delay at
/// the evaluation point (aligned by position). Non-charging routes serve F1
/// and F3; charging routes serve F2 and F3. Compositions that revisit a
/// node are kept but flagged.
pub fn build_route_library(
    net: &Network,
    demand: &DemandTable,
    charger_nodes: &[usize],
    charger_costs: &[f64],
    link_costs: &[f64],
    params: LibraryParams,
) -> Result<RouteLibrary> {
    if charger_nodes.len() != charger_costs.len() {
        return Err(Error::validation("charger cost list length mismatch"));
    }
    if params.k_od == 0 || params.k_oc == 0 || params.k_cd == 0 {
        return Err(Error::validation("route counts must be at least 1"));
    }
    let mut routes: Vec<Route> = Vec::new();
    let mut groups: Vec<RouteGroup> = Vec::new();
    let mut seen: HashSet<(usize, u8, Option<usize>, Vec<usize>)> = HashSet::new();

    for (od, pair) in demand.entries.iter().enumerate() {
        let (o, d) = (pair.origin, pair.destination);
        let nc_paths = yen_k_shortest(net, link_costs, o, d, params.k_od);
        let mut charging: Vec<(usize, Route)> = Vec::new();
        for (pos, &s) in charger_nodes.iter().enumerate() {
            let seg1: Vec<Path> = if o == s {
                vec![Path { cost: 0.0, links: vec![] }]
            } else {
                yen_k_shortest(net, link_costs, o, s, params.k_oc)
            };
            let seg2: Vec<Path> = if s == d {
                vec![Path { cost: 0.0, links: vec![] }]
            } else {
                yen_k_shortest(net, link_costs, s, d, params.k_cd)
            };
            for p1 in &seg1 {
                for p2 in &seg2 {
                    let mut links = p1.links.clone();
                    links.extend_from_slice(&p2.links);
                    let nodes = compose_nodes(net, &p1.links, &p2.links, s);
                    charging.push((
                        pos,
                        Route {
                            od,
                            vtype: VehType::F2,
                            links,
                            split: p1.links.len(),
                            charger: Some(s),
                            cost: p1.cost + p2.cost + charger_costs[pos],
                            node_repeat: has_repeat(&nodes),
                        },
                    ));
                }
            }
        }

        for t in VEH_TYPES {
            if !t.must_charge() {
                let mut members = Vec::new();
                for p in &nc_paths {
                    let key = (od, t.index() as u8, None, p.links.clone());
                    if seen.insert(key) {
                        members.push(routes.len());
                        routes.push(Route {
                            od,
                            vtype: t,
                            links: p.links.clone(),
                            split: 0,
                            charger: None,
                            cost: p.cost,
                            node_repeat: false,
                        });
                    }
                }
                groups.push(RouteGroup { od, vtype: t, charger_pos: None, members });
            }
            if t.may_charge() {
                for pos in 0..charger_nodes.len() {
                    let mut members = Vec::new();
                    for (p, r) in charging.iter().filter(|(p, _)| *p == pos) {
                        let key = (od, t.index() as u8, Some(*p), r.links.clone());
                        if seen.insert(key) {
                            members.push(routes.len());
                            let mut r = r.clone();
                            r.vtype = t;
                            routes.push(r);
                        }
                    }
                    groups.push(RouteGroup { od, vtype: t, charger_pos: Some(pos), members });
                }
            }
        }
    }
    Ok(RouteLibrary {
        routes,
        groups,
        charger_nodes: charger_nodes.to_vec(),
    })
}

impl RouteLibrary {
    /// Link flows induced by the given route flows: each route contributes
    /// its flow once per traversal of a link.
    pub fn link_flows(&self, flows: &[f64], n_links: usize) -> Vec<f64> {
        let mut x = vec![0.0; n_links];
        for (r, route) in self.routes.iter().enumerate() {
            if flows[r] != 0.0 {
                for &l in &route.links {
                    x[l] += flows[r];
                }
            }
        }
        x
    }

    /// Routes of one (od, type) class, in library order.
    pub fn class_routes(&self, od: usize, t: VehType) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.od == od && g.vtype == t)
            .flat_map(|g| g.members.iter().copied())
            .collect()
    }
}

/// Euclidean projection of v onto {f >= 0, sum f = q}.
fn project_simplex(v: &mut [f64], q: f64) {
    if v.is_empty() {
        return;
    }
    if q <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - q) / (i + 1) as f64;
        if ui - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - tau).max(0.0));
}

#[derive(Debug, Clone)]
pub struct RecoverOptions {
    pub max_iters: usize,
    /// Relative objective-change stopping threshold.
    pub tol: f64,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self { max_iters: 50_000, tol: 1e-14 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteFlows {
    pub flows: Vec<f64>,
    /// Half squared link-flow misfit at the solution.
    pub objective: f64,
    pub residual_norm: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
}

fn group_budget(
    group: &RouteGroup,
    demand: &DemandTable,
    partition: &ChargePartition,
) -> f64 {
    let t = group.vtype.index();
    match group.charger_pos {
        Some(c) => partition.q[group.od][t][c],
        None => {
            let total = demand.entries[group.od].q[t];
            let charged: f64 = partition.q[group.od][t].iter().sum();
            (total - charged).max(0.0)
        }
    }
}

/// Recover route flows from equilibrium link flows.
///
/// Solves min 0.5||Rf - x||^2 over f >= 0 with each demand class summing to
/// its (possibly zero) budget, by accelerated projected gradient descent
/// with exact per-class simplex projections.
pub fn recover_flows(
    net: &Network,
    library: &RouteLibrary,
    x_star: &[f64],
    demand: &DemandTable,
    partition: &ChargePartition,
    opts: &RecoverOptions,
) -> Result<RouteFlows> {
    if x_star.len() != net.links.len() {
        return Err(Error::validation("link flow vector length mismatch"));
    }
    partition.validate(demand, 1e-6)?;
    let n = library.routes.len();
    let budgets: Vec<f64> = library
        .groups
        .iter()
        .map(|g| group_budget(g, demand, partition))
        .collect();
    for (g, group) in library.groups.iter().enumerate() {
        if budgets[g] > 1e-12 && group.members.is_empty() {
            let pair = &demand.entries[group.od];
            return Err(Error::infeasible(format!(
                "no routes available for {} -> {} ({})",
                net.node_id(pair.origin),
                net.node_id(pair.destination),
                group.vtype
            )));
        }
    }

    let mut f = vec![0.0; n];
    for (g, group) in library.groups.iter().enumerate() {
        if !group.members.is_empty() {
            let share = budgets[g] / group.members.len() as f64;
            for &r in &group.members {
                f[r] = share;
            }
        }
    }
    if n == 0 {
        let residual: f64 = x_star.iter().map(|x| x * x).sum::<f64>().sqrt();
        return Ok(RouteFlows {
            flows: f,
            objective: 0.5 * residual * residual,
            residual_norm: residual,
            max_constraint_violation: 0.0,
            iterations: 0,
        });
    }

    let apply = |f: &[f64]| library.link_flows(f, net.links.len());
    let apply_t = |r: &[f64]| {
        let mut g = vec![0.0; n];
        for (j, route) in library.routes.iter().enumerate() {
            g[j] = route.links.iter().map(|&l| r[l]).sum();
        }
        g
    };

    // Lipschitz constant of the gradient by power iteration on R^T R.
    let mut v = vec![1.0; n];
    let mut lip = 1.0;
    for _ in 0..60 {
        let w = apply_t(&apply(&v));
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-30 {
            break;
        }
        lip = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
    }
    let step = 1.0 / (lip.max(1e-12) * 1.05);

    let project = |f: &mut [f64]| {
        for (g, group) in library.groups.iter().enumerate() {
            if group.members.is_empty() {
                continue;
            }
            let mut sub: Vec<f64> = group.members.iter().map(|&r| f[r]).collect();
            project_simplex(&mut sub, budgets[g]);
            for (&r, &val) in group.members.iter().zip(&sub) {
                f[r] = val;
            }
        }
    };
    let objective = |f: &[f64]| {
        let x = apply(f);
        0.5 * x
            .iter()
            .zip(x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };

    project(&mut f);
    let mut y = f.clone();
    let mut t_acc = 1.0f64;
    let mut obj_prev = objective(&f);
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        let x = apply(&y);
        let r: Vec<f64> = x.iter().zip(x_star).map(|(a, b)| a - b).collect();
        let grad = apply_t(&r);
        let mut f_next: Vec<f64> =
            y.iter().zip(&grad).map(|(yi, gi)| yi - step * gi).collect();
        project(&mut f_next);

        // restart momentum when it points uphill
        let uphill: f64 = f_next
            .iter()
            .zip(&f)
            .zip(&y)
            .map(|((fn_, fo), yo)| (yo - fn_) * (fn_ - fo))
            .sum();
        if uphill > 0.0 {
            t_acc = 1.0;
            y = f_next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
            let beta = (t_acc - 1.0) / t_next;
            y = f_next
                .iter()
                .zip(&f)
                .map(|(fn_, fo)| fn_ + beta * (fn_ - fo))
                .collect();
            t_acc = t_next;
        }
        let obj = objective(&f_next);
        f = f_next;
        let done = obj <= 1e-18 || (obj_prev - obj).abs() <= opts.tol * obj_prev.max(1.0);
        obj_prev = obj;
        if done {
            break;
        }
    }

    // exact class sums
    for (g, group) in library.groups.iter().enumerate() {
        if group.members.is_empty() {
            continue;
        }
        let sum: f64 = group.members.iter().map(|&r| f[r]).sum();
        if sum > 0.0 {
            let scale = budgets[g] / sum;
            for &r in &group.members {
                f[r] *= scale;
            }
        } else if budgets[g] > 0.0 {
            let share = budgets[g] / group.members.len() as f64;
            for &r in &group.members {
                f[r] = share;
            }
        }
    }
    let x = apply(&f);
    let residual_norm = x
        .iter()
        .zip(x_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let max_violation = library
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let sum: f64 = group.members.iter().map(|&r| f[r]).sum();
            (sum - budgets[g]).abs()
        })
        .fold(0.0f64, f64::max);
    Ok(RouteFlows {
        flows: f,
        objective: 0.5 * residual_norm * residual_norm,
        residual_norm,
        max_constraint_violation: max_violation,
        iterations,
    })
}

/// Sample Pearson correlation; None when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-24 || sbb <= 1e-24 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageRow {
    pub k: usize,
    /// Share of total link flow reproduced by the k highest-flow routes.
    pub coverage: f64,
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
}

/// Evaluate link-flow reproduction using only the top-k routes by flow.
pub fn topk_coverage(
    net: &Network,
    library: &RouteLibrary,
    flows: &[f64],
    x_star: &[f64],
    ks: &[usize],
) -> Vec<CoverageRow> {
    let mut order: Vec<usize> = (0..flows.len()).collect();
    order.sort_by(|&a, &b| flows[b].total_cmp(&flows[a]).then(a.cmp(&b)));
    let total: f64 = x_star.iter().sum();
    let n_links = net.links.len();
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut partial = vec![0.0; flows.len()];
        for &r in order.iter().take(k) {
            partial[r] = flows[r];
        }
        let x = library.link_flows(&partial, n_links);
        let covered: f64 = x.iter().sum();
        let coverage = if total > 0.0 { (covered / total).clamp(0.0, 1.0) } else { 1.0 };
        let mae = x
            .iter()
            .zip(x_star)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n_links.max(1) as f64;
        let rmse = (x
            .iter()
            .zip(x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n_links.max(1) as f64)
            .sqrt();
        rows.push(CoverageRow { k, coverage, mae, rmse, pearson: pearson(&x, x_star) });
    }
    rows
}

/// One CSV line per route with its recovered flow.
pub fn routes_csv(net: &Network, library: &RouteLibrary, flows: &[f64]) -> String {
    let mut out = String::from("route,od,type,charger,split,flow,links\n");
    for (r, route) in library.routes.iter().enumerate() {
        let charger = route
            .charger
            .map(|s| net.node_id(s).to_string())
            .unwrap_or_default();
        let links = route
            .links
            .iter()
            .map(|&l| net.links[l].id.clone())
            .collect::<Vec<_>>()
            .join("|");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r, route.od, route.vtype, charger, route.split, flows[r], links
        ));
    }
    out
}
