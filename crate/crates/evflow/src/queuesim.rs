//! Atomic mesoscopic queue simulator.
//!
//! Links are spatial queues: a vehicle traverses the running part in
//! free-flow time, then waits in the link's exit queue until the node model
//! lets it move. Storage is finite, so full links block upstream movers
//! (spillback). Per-step admission budgets realize the stochastic inflow and
//! outflow capacities. Charging stations have an entrance queue, a fixed set
//! of ports, and a bounded exit queue that re-enters traffic through the
//! node model.
//!
//! Step order, fixed: (1) running -> exit-queue promotions, (2) budget
//! sampling, (3) node model, (4) origin entries, (5) station phases
//! (entrance -> port, charge increment, port -> exit queue). A station's
//! exit queue competes as a node approach in phase 3 of later steps.
//!
//! One run is strictly single-threaded; the node model resolves competing
//! approaches sequentially by seeded uniform draws. Distinct seeds run
//! concurrently in the Monte Carlo harness.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::network::{Network, VehType};
use crate::rng::{stream_rng, Stream};
use crate::routes::Route;
use crate::{Error, Result};

/// Steps with zero state change before a run is declared gridlocked.
pub const GRIDLOCK_WINDOW: u32 = 600;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationSpec {
    /// Node index the station occupies.
    pub node: usize,
    pub ports: usize,
    /// Charge gained per timestep at a port (fraction of full).
    pub rate: f64,
    /// Exit queue slots; a full exit queue blocks finished vehicles at ports.
    pub exit_capacity: usize,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: Network,
    /// Sorted by node index; at most one station per node.
    pub stations: Vec<StationSpec>,
    pub horizon_s: u32,
    pub dt_s: u32,
    /// Default initial battery fraction of entering vehicles.
    pub initial_charge: f64,
    pub target_charge: f64,
}

impl Scenario {
    pub fn new(net: Network, mut stations: Vec<StationSpec>, horizon_s: u32) -> Result<Self> {
        stations.sort_by_key(|s| s.node);
        for w in stations.windows(2) {
            if w[0].node == w[1].node {
                return Err(Error::validation("two stations on one node"));
            }
        }
        for s in &stations {
            if s.node >= net.nodes.len() {
                return Err(Error::validation("station node out of range"));
            }
            if s.ports == 0 || !(s.rate > 0.0) {
                return Err(Error::validation("station needs ports >= 1 and rate > 0"));
            }
        }
        Ok(Self {
            net,
            stations,
            horizon_s,
            dt_s: 1,
            initial_charge: 0.2,
            target_charge: 1.0,
        })
    }

    pub fn station_at(&self, node: usize) -> Option<usize> {
        self.stations.binary_search_by_key(&node, |s| s.node).ok()
    }

    pub fn steps(&self) -> u32 {
        self.horizon_s / self.dt_s
    }

    /// Running-part duration in steps, at least one.
    pub fn fft_steps(&self, link: usize) -> u32 {
        ((self.net.links[link].fft_s / self.dt_s as f64).ceil() as u32).max(1)
    }

    pub fn charge_steps(&self, station: usize, initial: f64) -> u32 {
        let need = (self.target_charge - initial).max(0.0);
        (need / self.stations[station].rate).ceil() as u32
    }

    /// Uncontended travel time of a route, seconds: link free-flow times
    /// plus the charging duration at the planned stop.
    pub fn route_free_flow_s(&self, plan: &RoutePlan, initial_charge: Option<f64>) -> f64 {
        let links: u32 = plan.links.iter().map(|&l| self.fft_steps(l)).sum();
        let charge = match plan.station {
            Some((s, _)) => self.charge_steps(s, initial_charge.unwrap_or(self.initial_charge)),
            None => 0,
        };
        ((links + charge) * self.dt_s) as f64
    }

    /// Translate a library route into a simulator plan, matching its charger
    /// node to a station.
    pub fn plan_route(&self, route: &Route) -> Result<RoutePlan> {
        let station = match route.charger {
            None => None,
            Some(node) => {
                let s = self.station_at(node).ok_or_else(|| {
                    Error::validation(format!(
                        "route charges at {} but no station is there",
                        self.net.node_id(node)
                    ))
                })?;
                Some((s, route.split))
            }
        };
        let plan = RoutePlan {
            od: route.od,
            vtype: route.vtype,
            links: route.links.clone(),
            station,
        };
        validate_plan(self, &plan)?;
        Ok(plan)
    }
}

/// Executable route: physical links plus an optional charging stop after
/// the first `split` links (`station = (station index, split)`).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePlan {
    pub od: usize,
    pub vtype: VehType,
    pub links: Vec<usize>,
    pub station: Option<(usize, usize)>,
}

pub fn validate_plan(scenario: &Scenario, plan: &RoutePlan) -> Result<()> {
    let net = &scenario.net;
    for w in plan.links.windows(2) {
        if net.links[w[0]].head != net.links[w[1]].tail {
            return Err(Error::validation(format!(
                "route links {} and {} do not connect",
                net.links[w[0]].id, net.links[w[1]].id
            )));
        }
    }
    match plan.vtype {
        VehType::F1 => {
            if plan.station.is_some() {
                return Err(Error::validation("F1 route cannot include a station"));
            }
        }
        VehType::F2 => {
            if plan.station.is_none() {
                return Err(Error::validation("F2 route must include a station"));
            }
        }
        VehType::F3 => {}
    }
    if let Some((s, split)) = plan.station {
        if split > plan.links.len() {
            return Err(Error::validation("station split beyond route end"));
        }
        let stop_node = if split == 0 {
            plan.links.first().map(|&l| net.links[l].tail)
        } else {
            Some(net.links[plan.links[split - 1]].head)
        };
        if let Some(v) = stop_node {
            if scenario.stations[s].node != v {
                return Err(Error::validation("station is not on the route"));
            }
        }
    } else if plan.links.is_empty() {
        return Err(Error::validation("vehicle with no route"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct VehiclePlan {
    pub id: usize,
    /// Index into the route catalog passed to `run`.
    pub route: usize,
    pub depart_s: u32,
    pub initial_charge: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pos {
    Pre,
    OnLink,
    Entrance(usize),
    Port(usize),
    StationExit(usize),
    Done,
}

struct Veh {
    route: usize,
    /// Index of the current (when on a link) or next leg in plan.links.
    leg: usize,
    pos: Pos,
    charge: f64,
    charged: bool,
    depart_step: u32,
    arrive_step: Option<u32>,
    entered_link: u32,
}

struct LinkQ {
    running: VecDeque<(usize, u32)>,
    exit: VecDeque<usize>,
    occupancy: usize,
}

struct StationQ {
    entrance: VecDeque<usize>,
    ports: Vec<Option<usize>>,
    exit: VecDeque<usize>,
}

/// An approach competing at a node: a link's exit queue or a station's exit
/// queue located at that node.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Approach {
    InLink(usize),
    Station(usize),
}

pub struct SimState<'a> {
    scenario: &'a Scenario,
    catalog: &'a [RoutePlan],
    vehicles: Vec<Veh>,
    links: Vec<LinkQ>,
    stations: Vec<StationQ>,
    link_rngs: Vec<ChaCha8Rng>,
    node_rngs: Vec<ChaCha8Rng>,
    in_budget: Vec<u32>,
    out_budget: Vec<u32>,
    /// (sum of traversal seconds, count) per link.
    link_stats: Vec<(f64, usize)>,
    /// Optional (entered, left) step pairs per link, for calibration.
    traversals: Option<Vec<Vec<(u32, u32)>>>,
    moves_this_step: usize,
    last_move_step: u32,
    gridlocked: bool,
}

fn orient(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
}

fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Movement through a node as a short segment, shifted to the right of the
/// travel direction so opposing straight movements pass each other.
fn movement_segment(a: [f64; 2], w: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    const R: f64 = 1.0;
    const OFF: f64 = 0.25;
    let right_a = [a[1], -a[0]];
    let right_w = [w[1], -w[0]];
    let p1 = [-R * a[0] + OFF * right_a[0], -R * a[1] + OFF * right_a[1]];
    let p2 = [R * w[0] + OFF * right_w[0], R * w[1] + OFF * right_w[1]];
    (p1, p2)
}

/// Two movements conflict when their node segments properly cross at 45
/// degrees or more. Shallower crossings are weaves and may proceed together.
fn movements_conflict(m1: ([f64; 2], [f64; 2]), m2: ([f64; 2], [f64; 2])) -> bool {
    let (p1, p2) = movement_segment(m1.0, m1.1);
    let (q1, q2) = movement_segment(m2.0, m2.1);
    if !segments_cross(p1, p2, q1, q2) {
        return false;
    }
    let d1 = [p2[0] - p1[0], p2[1] - p1[1]];
    let d2 = [q2[0] - q1[0], q2[1] - q1[1]];
    let dot = d1[0] * d2[0] + d1[1] * d2[1];
    let n1 = d1[0].hypot(d1[1]);
    let n2 = d2[0].hypot(d2[1]);
    if n1 < 1e-12 || n2 < 1e-12 {
        return false;
    }
    let ang = (dot / (n1 * n2)).clamp(-1.0, 1.0).acos().to_degrees();
    ang >= 45.0
}

enum Intent {
    ToLink(usize),
    ToStation(usize),
    Leave,
}

impl<'a> SimState<'a> {
    pub fn new(
        scenario: &'a Scenario,
        catalog: &'a [RoutePlan],
        vehicles: &[VehiclePlan],
        seed: u64,
    ) -> Result<Self> {
        for plan in catalog {
            validate_plan(scenario, plan)?;
        }
        let mut vs = Vec::with_capacity(vehicles.len());
        for (i, v) in vehicles.iter().enumerate() {
            if v.id != i {
                return Err(Error::validation("vehicle ids must be 0..n in order"));
            }
            if v.route >= catalog.len() {
                return Err(Error::validation(format!("vehicle {} has no route", v.id)));
            }
            vs.push(Veh {
                route: v.route,
                leg: 0,
                pos: Pos::Pre,
                charge: v.initial_charge.unwrap_or(scenario.initial_charge),
                charged: false,
                depart_step: v.depart_s / scenario.dt_s,
                arrive_step: None,
                entered_link: 0,
            });
        }
        let net = &scenario.net;
        Ok(Self {
            scenario,
            catalog,
            vehicles: vs,
            links: net
                .links
                .iter()
                .map(|_| LinkQ { running: VecDeque::new(), exit: VecDeque::new(), occupancy: 0 })
                .collect(),
            stations: scenario
                .stations
                .iter()
                .map(|s| StationQ {
                    entrance: VecDeque::new(),
                    ports: vec![None; s.ports],
                    exit: VecDeque::new(),
                })
                .collect(),
            link_rngs: (0..net.links.len()).map(|l| stream_rng(seed, Stream::Link(l))).collect(),
            node_rngs: (0..net.nodes.len()).map(|v| stream_rng(seed, Stream::Node(v))).collect(),
            in_budget: vec![0; net.links.len()],
            out_budget: vec![0; net.links.len()],
            link_stats: vec![(0.0, 0); net.links.len()],
            traversals: None,
            moves_this_step: 0,
            last_move_step: 0,
            gridlocked: false,
        })
    }

    /// Record every individual link traversal as (entered, left) steps.
    pub fn with_traversal_log(mut self) -> Self {
        self.traversals = Some(vec![Vec::new(); self.links.len()]);
        self
    }

    pub fn gridlocked(&self) -> bool {
        self.gridlocked
    }

    /// Vehicles not yet arrived.
    pub fn active_vehicles(&self) -> usize {
        self.vehicles.iter().filter(|v| v.pos != Pos::Done).count()
    }

    /// Conservation counts: (pre-entry, on links, in stations, arrived).
    pub fn census(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for v in &self.vehicles {
            match v.pos {
                Pos::Pre => c.0 += 1,
                Pos::OnLink => c.1 += 1,
                Pos::Entrance(_) | Pos::Port(_) | Pos::StationExit(_) => c.2 += 1,
                Pos::Done => c.3 += 1,
            }
        }
        c
    }

    pub fn link_occupancy(&self, l: usize) -> usize {
        self.links[l].occupancy
    }

    fn intent(&self, vi: usize) -> Intent {
        let veh = &self.vehicles[vi];
        let plan = &self.catalog[veh.route];
        if let Some((s, split)) = plan.station {
            if !veh.charged && veh.leg == split {
                return Intent::ToStation(s);
            }
        }
        if veh.leg >= plan.links.len() {
            Intent::Leave
        } else {
            Intent::ToLink(plan.links[veh.leg])
        }
    }

    fn enter_link(&mut self, vi: usize, link: usize, t: u32) {
        let ready = t + self.scenario.fft_steps(link);
        self.links[link].running.push_back((vi, ready));
        self.links[link].occupancy += 1;
        self.vehicles[vi].pos = Pos::OnLink;
        self.vehicles[vi].entered_link = t;
        // leg always names the next plan link to enter
        self.vehicles[vi].leg += 1;
        self.moves_this_step += 1;
    }

    /// One timestep. Returns the number of state changes.
    pub fn step(&mut self, t: u32) -> usize {
        self.moves_this_step = 0;
        self.promote(t);
        self.sample_budgets();
        self.node_moves(t);
        self.entries(t);
        self.station_phases();
        if self.moves_this_step > 0 {
            self.last_move_step = t;
        } else if self.active_vehicles() > 0 && t.saturating_sub(self.last_move_step) >= GRIDLOCK_WINDOW
        {
            self.gridlocked = true;
        }
        self.moves_this_step
    }

    fn promote(&mut self, t: u32) {
        for lq in self.links.iter_mut() {
            while let Some(&(vi, ready)) = lq.running.front() {
                if ready <= t {
                    lq.running.pop_front();
                    lq.exit.push_back(vi);
                    self.moves_this_step += 1;
                } else {
                    break;
                }
            }
        }
    }

    fn sample_budgets(&mut self) {
        let dt = self.scenario.dt_s as f64;
        for (l, link) in self.scenario.net.links.iter().enumerate() {
            let per_step = link.cap_vph * dt / 3600.0;
            let base = per_step.floor() as u32;
            let frac = per_step - per_step.floor();
            let rng = &mut self.link_rngs[l];
            let extra_in = frac > 1e-12 && rng.gen_bool(frac);
            let extra_out = frac > 1e-12 && rng.gen_bool(frac);
            self.in_budget[l] = base + extra_in as u32;
            self.out_budget[l] = base + extra_out as u32;
        }
    }

    /// Unit travel directions (into node, out of node) for a link-to-link
    /// movement; None when coordinates are missing, which disables conflicts.
    fn movement_geometry(&self, in_link: usize, out_link: usize) -> Option<([f64; 2], [f64; 2])> {
        let net = &self.scenario.net;
        let dir = |tail: usize, head: usize| -> Option<[f64; 2]> {
            let (tx, ty) = (net.nodes[tail].x?, net.nodes[tail].y?);
            let (hx, hy) = (net.nodes[head].x?, net.nodes[head].y?);
            let (dx, dy) = (hx - tx, hy - ty);
            let n = dx.hypot(dy);
            if n < 1e-9 {
                return None;
            }
            Some([dx / n, dy / n])
        };
        let a = dir(net.links[in_link].tail, net.links[in_link].head)?;
        let w = dir(net.links[out_link].tail, net.links[out_link].head)?;
        Some((a, w))
    }

    /// Attempt the front vehicle of one approach. Returns the executed
    /// movement geometry (Some(None) on success without geometry) or None
    /// when the approach is blocked.
    #[allow(clippy::option_option)]
    fn try_front(
        &mut self,
        approach: Approach,
        executed: &[([f64; 2], [f64; 2])],
        t: u32,
    ) -> Option<Option<([f64; 2], [f64; 2])>> {
        let vi = match approach {
            Approach::InLink(l) => *self.links[l].exit.front()?,
            Approach::Station(s) => *self.stations[s].exit.front()?,
        };
        let from_link = match approach {
            Approach::InLink(l) => Some(l),
            Approach::Station(_) => None,
        };
        let mut geometry = None;
        match self.intent(vi) {
            Intent::ToLink(next) => {
                if let Some(l) = from_link {
                    if self.out_budget[l] == 0 {
                        return None;
                    }
                    if let Some(geom) = self.movement_geometry(l, next) {
                        if executed.iter().any(|&e| movements_conflict(e, geom)) {
                            return None;
                        }
                        geometry = Some(geom);
                    }
                }
                if self.in_budget[next] == 0
                    || self.links[next].occupancy >= self.scenario.net.links[next].storage
                {
                    return None;
                }
                self.depart_approach(approach, vi, t);
                self.in_budget[next] -= 1;
                if let Some(l) = from_link {
                    self.out_budget[l] -= 1;
                }
                self.enter_link(vi, next, t);
            }
            Intent::ToStation(s) => {
                if let Some(l) = from_link {
                    if self.out_budget[l] == 0 {
                        return None;
                    }
                    self.out_budget[l] -= 1;
                }
                self.depart_approach(approach, vi, t);
                self.stations[s].entrance.push_back(vi);
                self.vehicles[vi].pos = Pos::Entrance(s);
                self.moves_this_step += 1;
            }
            Intent::Leave => {
                if let Some(l) = from_link {
                    if self.out_budget[l] == 0 {
                        return None;
                    }
                    self.out_budget[l] -= 1;
                }
                self.depart_approach(approach, vi, t);
                self.vehicles[vi].pos = Pos::Done;
                self.vehicles[vi].arrive_step = Some(t);
                self.moves_this_step += 1;
            }
        }
        Some(geometry)
    }

    /// Remove the front vehicle from its approach queue and update per-link
    /// traversal statistics.
    fn depart_approach(&mut self, approach: Approach, vi: usize, t: u32) {
        match approach {
            Approach::InLink(l) => {
                let popped = self.links[l].exit.pop_front();
                debug_assert_eq!(popped, Some(vi));
                self.links[l].occupancy -= 1;
                let entered = self.vehicles[vi].entered_link;
                let secs = (t - entered) as f64 * self.scenario.dt_s as f64;
                self.link_stats[l].0 += secs;
                self.link_stats[l].1 += 1;
                if let Some(log) = &mut self.traversals {
                    log[l].push((entered, t));
                }
            }
            Approach::Station(s) => {
                let popped = self.stations[s].exit.pop_front();
                debug_assert_eq!(popped, Some(vi));
            }
        }
    }

    fn node_moves(&mut self, t: u32) {
        for node in 0..self.scenario.net.nodes.len() {
            let mut roundabout: Vec<Approach> = Vec::new();
            let mut normal: Vec<Approach> = Vec::new();
            for &l in &self.scenario.net.in_links[node] {
                if !self.links[l].exit.is_empty() {
                    if self.scenario.net.links[l].roundabout {
                        roundabout.push(Approach::InLink(l));
                    } else {
                        normal.push(Approach::InLink(l));
                    }
                }
            }
            if let Some(s) = self.scenario.station_at(node) {
                if !self.stations[s].exit.is_empty() {
                    normal.push(Approach::Station(s));
                }
            }
            if roundabout.is_empty() && normal.is_empty() {
                continue;
            }
            let mut executed: Vec<([f64; 2], [f64; 2])> = Vec::new();
            for class in [roundabout, normal] {
                let mut live = class;
                while !live.is_empty() {
                    let pick = if live.len() == 1 {
                        0
                    } else {
                        self.node_rngs[node].gen_range(0..live.len())
                    };
                    let approach = live[pick];
                    match self.try_front(approach, &executed, t) {
                        None => {
                            // blocked approaches sit out the rest of the step
                            live.swap_remove(pick);
                        }
                        Some(geom) => {
                            if let Some(g) = geom {
                                executed.push(g);
                            }
                            let empty = match approach {
                                Approach::InLink(l) => self.links[l].exit.is_empty(),
                                Approach::Station(s) => self.stations[s].exit.is_empty(),
                            };
                            if empty {
                                live.swap_remove(pick);
                            }
                        }
                    }
                }
            }
        }
    }

    fn entries(&mut self, t: u32) {
        for vi in 0..self.vehicles.len() {
            if self.vehicles[vi].pos != Pos::Pre || self.vehicles[vi].depart_step > t {
                continue;
            }
            let plan = &self.catalog[self.vehicles[vi].route];
            match plan.station {
                Some((s, 0)) if !self.vehicles[vi].charged => {
                    self.stations[s].entrance.push_back(vi);
                    self.vehicles[vi].pos = Pos::Entrance(s);
                    self.moves_this_step += 1;
                }
                _ => {
                    let link = plan.links[0];
                    if self.in_budget[link] > 0
                        && self.links[link].occupancy < self.scenario.net.links[link].storage
                    {
                        self.in_budget[link] -= 1;
                        self.enter_link(vi, link, t);
                    }
                }
            }
        }
    }

    fn station_phases(&mut self) {
        for s in 0..self.stations.len() {
            let rate = self.scenario.stations[s].rate;
            let exit_cap = self.scenario.stations[s].exit_capacity;
            let target = self.scenario.target_charge;
            for p in 0..self.stations[s].ports.len() {
                if self.stations[s].ports[p].is_none() {
                    if let Some(vi) = self.stations[s].entrance.pop_front() {
                        self.stations[s].ports[p] = Some(vi);
                        self.vehicles[vi].pos = Pos::Port(s);
                        self.moves_this_step += 1;
                    }
                }
            }
            // increment includes vehicles seated this very step
            for p in 0..self.stations[s].ports.len() {
                if let Some(vi) = self.stations[s].ports[p] {
                    self.vehicles[vi].charge += rate;
                    self.moves_this_step += 1;
                }
            }
            for p in 0..self.stations[s].ports.len() {
                if let Some(vi) = self.stations[s].ports[p] {
                    if self.vehicles[vi].charge >= target - 1e-12
                        && self.stations[s].exit.len() < exit_cap
                    {
                        self.stations[s].ports[p] = None;
                        self.stations[s].exit.push_back(vi);
                        self.vehicles[vi].charged = true;
                        self.vehicles[vi].pos = Pos::StationExit(s);
                        self.moves_this_step += 1;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VehicleOutcome {
    pub id: usize,
    pub route: usize,
    pub depart_s: u32,
    pub arrive_s: Option<u32>,
    /// Experienced time; horizon minus departure for unfinished vehicles.
    pub travel_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub seed: u64,
    pub total_travel_time_s: f64,
    pub per_vehicle: Vec<VehicleOutcome>,
    /// Agent-wise mean traversal time per link; None when untraversed.
    pub per_link_mean_s: Vec<Option<f64>>,
    /// Mean travel time per catalog route; None when no vehicle used it.
    pub per_route_mean_s: Vec<Option<f64>>,
    pub unfinished: usize,
    pub gridlocked: bool,
}

fn drive(state: &mut SimState) {
    for t in 0..state.scenario.steps() {
        state.step(t);
        if state.gridlocked || state.active_vehicles() == 0 {
            break;
        }
    }
}

fn summarize(state: &SimState, seed: u64) -> SimResult {
    let scenario = state.scenario;
    let horizon = scenario.steps();
    let dt = scenario.dt_s as f64;
    let mut per_vehicle = Vec::with_capacity(state.vehicles.len());
    let mut total = 0.0;
    let mut unfinished = 0;
    let mut route_acc: Vec<(f64, usize)> = vec![(0.0, 0); state.catalog.len()];
    for (vi, veh) in state.vehicles.iter().enumerate() {
        let travel_steps = match veh.arrive_step {
            Some(a) => (a - veh.depart_step) as f64,
            None => {
                unfinished += 1;
                (horizon.saturating_sub(veh.depart_step)) as f64
            }
        };
        let travel_s = travel_steps * dt;
        total += travel_s;
        route_acc[veh.route].0 += travel_s;
        route_acc[veh.route].1 += 1;
        per_vehicle.push(VehicleOutcome {
            id: vi,
            route: veh.route,
            depart_s: veh.depart_step * scenario.dt_s,
            arrive_s: veh.arrive_step.map(|a| a * scenario.dt_s),
            travel_s,
        });
    }
    let per_link_mean_s = state
        .link_stats
        .iter()
        .map(|&(sum, n)| if n > 0 { Some(sum / n as f64) } else { None })
        .collect();
    let per_route_mean_s = route_acc
        .iter()
        .map(|&(sum, n)| if n > 0 { Some(sum / n as f64) } else { None })
        .collect();
    SimResult {
        seed,
        total_travel_time_s: total,
        per_vehicle,
        per_link_mean_s,
        per_route_mean_s,
        unfinished,
        gridlocked: state.gridlocked,
    }
}

/// Run one seeded simulation to the horizon (or gridlock).
pub fn run(
    scenario: &Scenario,
    catalog: &[RoutePlan],
    vehicles: &[VehiclePlan],
    seed: u64,
) -> Result<SimResult> {
    let mut state = SimState::new(scenario, catalog, vehicles, seed)?;
    drive(&mut state);
    Ok(summarize(&state, seed))
}

/// Like `run`, additionally returning every link traversal as an
/// (entered, left) step pair per link.
pub fn run_logged(
    scenario: &Scenario,
    catalog: &[RoutePlan],
    vehicles: &[VehiclePlan],
    seed: u64,
) -> Result<(SimResult, Vec<Vec<(u32, u32)>>)> {
    let mut state = SimState::new(scenario, catalog, vehicles, seed)?.with_traversal_log();
    drive(&mut state);
    let result = summarize(&state, seed);
    let log = state.traversals.take().unwrap_or_default();
    Ok((result, log))
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub runs: usize,
    pub mean_total_s: f64,
    pub stderr_total_s: f64,
    /// Per catalog route; unused routes carry their free-flow time.
    pub route_mean_s: Vec<f64>,
    pub route_stderr_s: Vec<f64>,
    pub unfinished_runs: usize,
    pub gridlocked_runs: usize,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Independent seeded replications, averaged. Routes no vehicle uses get
/// their free-flow time with zero standard error.
pub fn monte_carlo(
    scenario: &Scenario,
    catalog: &[RoutePlan],
    vehicles: &[VehiclePlan],
    seeds: &[u64],
) -> Result<MonteCarloReport> {
    if seeds.is_empty() {
        return Err(Error::validation("monte_carlo needs at least one seed"));
    }
    let results: Vec<Result<SimResult>> = seeds
        .par_iter()
        .map(|&seed| run(scenario, catalog, vehicles, seed))
        .collect();
    let mut runs = Vec::with_capacity(seeds.len());
    for r in results {
        runs.push(r?);
    }
    let totals: Vec<f64> = runs.iter().map(|r| r.total_travel_time_s).collect();
    let (mean_total_s, stderr_total_s) = mean_stderr(&totals);
    let mut route_mean_s = Vec::with_capacity(catalog.len());
    let mut route_stderr_s = Vec::with_capacity(catalog.len());
    for r in 0..catalog.len() {
        let per_run: Vec<f64> =
            runs.iter().filter_map(|res| res.per_route_mean_s[r]).collect();
        if per_run.is_empty() {
            route_mean_s.push(scenario.route_free_flow_s(&catalog[r], None));
            route_stderr_s.push(0.0);
        } else {
            let (m, se) = mean_stderr(&per_run);
            route_mean_s.push(m);
            route_stderr_s.push(se);
        }
    }
    Ok(MonteCarloReport {
        runs: runs.len(),
        mean_total_s,
        stderr_total_s,
        route_mean_s,
        route_stderr_s,
        unfinished_runs: runs.iter().filter(|r| r.unfinished > 0).count(),
        gridlocked_runs: runs.iter().filter(|r| r.gridlocked).count(),
    })
}
