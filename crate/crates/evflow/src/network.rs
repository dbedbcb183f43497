//! Road network and demand data model.
//!
//! Networks are directed graphs with per-link physical attributes plus a set
//! of candidate charger nodes. Chargers are modeled as self-loops (v, v) but
//! stored in a separate list so physical-link indexing stays stable across
//! charger selections. Node and link lookups go through interned indices;
//! the string ids appear only at the file boundary and in exports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::delay::DelayFn;
use crate::{Error, Result};

/// Default saturation flow per lane, vehicles per hour.
pub const DEFAULT_CAP_PER_LANE_VPH: f64 = 1900.0;
/// Effective vehicle length for storage (jam spacing), meters.
pub const EFFECTIVE_VEHICLE_LENGTH_M: f64 = 7.0;

/// Driver classes. F1 never charges, F2 must charge exactly once, F3 may
/// charge and collects a benefit c_i when it does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehType {
    F1,
    F2,
    F3,
}

pub const VEH_TYPES: [VehType; 3] = [VehType::F1, VehType::F2, VehType::F3];

impl VehType {
    pub fn index(self) -> usize {
        match self {
            VehType::F1 => 0,
            VehType::F2 => 1,
            VehType::F3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        VEH_TYPES[i]
    }

    /// Whether this class is allowed to use a charging route.
    pub fn may_charge(self) -> bool {
        !matches!(self, VehType::F1)
    }

    /// Whether this class must use a charging route.
    pub fn must_charge(self) -> bool {
        matches!(self, VehType::F2)
    }
}

impl fmt::Display for VehType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VehType::F1 => write!(f, "f1"),
            VehType::F2 => write!(f, "f2"),
            VehType::F3 => write!(f, "f3"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub x: Option<f64>,
    pub y: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub id: String,
    /// Node indices into Network::nodes.
    pub tail: usize,
    pub head: usize,
    pub length_m: f64,
    pub lanes: u32,
    pub fft_s: f64,
    pub cap_vph: f64,
    /// Vehicles that physically fit on the link.
    pub storage: usize,
    /// Roundabout membership; grants priority in the simulator's node model.
    pub roundabout: bool,
}

/// Charging station attached to node `node`, modeled as a self-loop.
#[derive(Debug, Clone)]
pub struct ChargerLink {
    pub node: usize,
    pub delay: DelayFn,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    /// Candidate charger nodes V_c, sorted node indices.
    pub candidates: Vec<usize>,
    /// Active chargers, sorted by node index; at most one per node.
    pub chargers: Vec<ChargerLink>,
    node_index: HashMap<String, usize>,
    link_index: HashMap<String, usize>,
    /// Per node: outgoing / incoming physical link indices, ascending.
    pub out_links: Vec<Vec<usize>>,
    pub in_links: Vec<Vec<usize>>,
}

// -------- file schema --------

#[derive(Deserialize)]
#[serde(untagged)]
enum IdValue {
    S(String),
    I(i64),
    F(f64),
}

impl IdValue {
    fn into_string(self) -> String {
        match self {
            IdValue::S(s) => s,
            IdValue::I(i) => i.to_string(),
            IdValue::F(f) => f.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct NodeRow {
    id: IdValue,
    #[serde(default)]
    x: Option<f64>,
    #[serde(default)]
    y: Option<f64>,
}

#[derive(Deserialize)]
struct LinkRow {
    id: IdValue,
    tail: IdValue,
    head: IdValue,
    length_m: f64,
    lanes: u32,
    fft_s: f64,
    #[serde(default)]
    cap_vph: Option<f64>,
    #[serde(default)]
    roundabout: bool,
}

#[derive(Deserialize)]
struct NetworkFile {
    nodes: Vec<NodeRow>,
    links: Vec<LinkRow>,
    #[serde(default)]
    candidates: Vec<IdValue>,
}

#[derive(Deserialize)]
struct OdRow {
    #[allow(dead_code)]
    #[serde(default)]
    i: Option<i64>,
    origin: IdValue,
    destination: IdValue,
    #[serde(default)]
    q_f1: f64,
    #[serde(default)]
    q_f2: f64,
    #[serde(default)]
    q_f3: f64,
    #[serde(default)]
    benefit_s: f64,
}

#[derive(Deserialize)]
struct DemandFile {
    od: Vec<OdRow>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })
}

impl Network {
    /// Build and validate a network from parts. Node references in links and
    /// candidates are ids; every structural invariant is checked here.
    pub fn new(
        nodes: Vec<Node>,
        links: Vec<(String, String, String, f64, u32, f64, Option<f64>, bool)>,
        candidates: Vec<String>,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::validation("network has no links"));
        }
        let mut node_index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate node id {:?}", n.id)));
            }
        }
        let mut link_index = HashMap::new();
        let mut built = Vec::with_capacity(links.len());
        for (id, tail_id, head_id, length_m, lanes, fft_s, cap, roundabout) in links {
            let tail = *node_index
                .get(&tail_id)
                .ok_or_else(|| Error::validation(format!(
                    "link {id:?}: unknown tail node {tail_id:?}"
                )))?;
            let head = *node_index
                .get(&head_id)
                .ok_or_else(|| Error::validation(format!(
                    "link {id:?}: unknown head node {head_id:?}"
                )))?;
            if tail == head {
                return Err(Error::validation(format!("link {id:?}: tail equals head")));
            }
            if !(length_m > 0.0) {
                return Err(Error::validation(format!("link {id:?}: length must be positive")));
            }
            if lanes < 1 {
                return Err(Error::validation(format!("link {id:?}: lanes must be >= 1")));
            }
            if !(fft_s > 0.0) {
                return Err(Error::validation(format!(
                    "link {id:?}: free-flow time must be positive"
                )));
            }
            let cap_vph = cap.unwrap_or(DEFAULT_CAP_PER_LANE_VPH * lanes as f64);
            if !(cap_vph > 0.0) {
                return Err(Error::validation(format!("link {id:?}: capacity must be positive")));
            }
            if link_index.insert(id.clone(), built.len()).is_some() {
                return Err(Error::validation(format!("duplicate link id {id:?}")));
            }
            // Storage floor of 1 so every link can hold at least one vehicle.
            let storage =
                ((length_m * lanes as f64 / EFFECTIVE_VEHICLE_LENGTH_M).floor() as usize).max(1);
            built.push(Link {
                id,
                tail,
                head,
                length_m,
                lanes,
                fft_s,
                cap_vph,
                storage,
                roundabout,
            });
        }
        let mut cand_idx = Vec::with_capacity(candidates.len());
        for c in candidates {
            let idx = *node_index
                .get(&c)
                .ok_or_else(|| Error::validation(format!("unknown candidate node {c:?}")))?;
            cand_idx.push(idx);
        }
        cand_idx.sort_unstable();
        cand_idx.dedup();

        let mut out_links = vec![Vec::new(); nodes.len()];
        let mut in_links = vec![Vec::new(); nodes.len()];
        for (l, link) in built.iter().enumerate() {
            out_links[link.tail].push(l);
            in_links[link.head].push(l);
        }

        Ok(Self {
            nodes,
            links: built,
            candidates: cand_idx,
            chargers: Vec::new(),
            node_index,
            link_index,
            out_links,
            in_links,
        })
    }

    pub fn node_idx(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn node_id(&self, idx: usize) -> &str {
        &self.nodes[idx].id
    }

    pub fn link_idx(&self, id: &str) -> Option<usize> {
        self.link_index.get(id).copied()
    }

    /// Active charger at node `v`, if any, as position into `chargers`.
    pub fn charger_at(&self, v: usize) -> Option<usize> {
        self.chargers.binary_search_by_key(&v, |c| c.node).ok()
    }

    /// Copy of the network with one charger self-loop per selected node.
    /// Re-selecting a node replaces its charger, so the operation is
    /// idempotent; physical links are untouched.
    pub fn augment_with_chargers(
        &self,
        selection: &[usize],
        delays: &dyn Fn(usize) -> DelayFn,
    ) -> Result<Network> {
        let mut out = self.clone();
        for &v in selection {
            if self.candidates.binary_search(&v).is_err() {
                return Err(Error::validation(format!(
                    "node {:?} is not a charger candidate",
                    self.node_id(v)
                )));
            }
            match out.chargers.binary_search_by_key(&v, |c| c.node) {
                Ok(pos) => out.chargers[pos].delay = delays(v),
                Err(pos) => out.chargers.insert(pos, ChargerLink { node: v, delay: delays(v) }),
            }
        }
        Ok(out)
    }

    /// Node-link incidence over physical links: +1 where a link starts, -1
    /// where it ends. Charger self-loops are excluded.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nodes.len(), self.links.len());
        for (l, link) in self.links.iter().enumerate() {
            a[(link.tail, l)] = 1.0;
            a[(link.head, l)] = -1.0;
        }
        a
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: NetworkFile = read_json(path.as_ref())?;
        let nodes = file
            .nodes
            .into_iter()
            .map(|r| Node { id: r.id.into_string(), x: r.x, y: r.y })
            .collect();
        let links = file
            .links
            .into_iter()
            .map(|r| {
                (
                    r.id.into_string(),
                    r.tail.into_string(),
                    r.head.into_string(),
                    r.length_m,
                    r.lanes,
                    r.fft_s,
                    r.cap_vph,
                    r.roundabout,
                )
            })
            .collect();
        let candidates = file.candidates.into_iter().map(IdValue::into_string).collect();
        Self::new(nodes, links, candidates)
    }
}

/// Convenience alias used throughout: `load_network("net.json")?`.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    Network::load(path)
}

#[derive(Debug, Clone)]
pub struct OdPair {
    pub origin: usize,
    pub destination: usize,
    /// Demand by class, vehicles per hour, indexed by VehType::index.
    pub q: [f64; 3],
    /// Charging benefit c_i for F3 drivers, seconds.
    pub benefit_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DemandTable {
    pub entries: Vec<OdPair>,
}

impl DemandTable {
    pub fn new(entries: Vec<OdPair>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.origin == e.destination {
                return Err(Error::validation(format!("OD {i}: origin equals destination")));
            }
            if e.q.iter().any(|&q| q < 0.0) || e.benefit_s < 0.0 {
                return Err(Error::validation(format!("OD {i}: negative demand or benefit")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>, net: &Network) -> Result<Self> {
        let file: DemandFile = read_json(path.as_ref())?;
        let mut entries = Vec::with_capacity(file.od.len());
        for (i, row) in file.od.into_iter().enumerate() {
            let o_id = row.origin.into_string();
            let d_id = row.destination.into_string();
            let origin = net
                .node_idx(&o_id)
                .ok_or_else(|| Error::validation(format!("OD {i}: unknown origin {o_id:?}")))?;
            let destination = net
                .node_idx(&d_id)
                .ok_or_else(|| Error::validation(format!(
                    "OD {i}: unknown destination {d_id:?}"
                )))?;
            entries.push(OdPair {
                origin,
                destination,
                q: [row.q_f1, row.q_f2, row.q_f3],
                benefit_s: row.benefit_s,
            });
        }
        Self::new(entries)
    }

    pub fn total_demand(&self) -> f64 {
        self.entries.iter().map(|e| e.q.iter().sum::<f64>()).sum()
    }
}

pub fn load_demand(path: impl AsRef<Path>, net: &Network) -> Result<DemandTable> {
    DemandTable::load(path, net)
}

/// Demand split q^(i,t,c): how much of each (OD, type) demand charges at
/// each active charger. Indexed [od][type][charger position].
#[derive(Debug, Clone, PartialEq)]
pub struct ChargePartition {
    pub q: Vec<[Vec<f64>; 3]>,
}

impl ChargePartition {
    pub fn zeros(n_od: usize, n_chargers: usize) -> Self {
        Self { q: vec![[vec![0.0; n_chargers], vec![0.0; n_chargers], vec![0.0; n_chargers]]; n_od] }
    }

    pub fn n_od(&self) -> usize {
        self.q.len()
    }

    /// Total charging demand of (od, type) across chargers.
    pub fn charging_total(&self, od: usize, t: usize) -> f64 {
        self.q[od][t].iter().sum()
    }

    /// Checks nonnegativity, the per-type budget, F1 never charging and F2
    /// always charging, within `tol`.
    pub fn validate(&self, demand: &DemandTable, tol: f64) -> Result<()> {
        if self.q.len() != demand.entries.len() {
            return Err(Error::validation("partition OD count mismatch"));
        }
        for (i, e) in demand.entries.iter().enumerate() {
            for t in 0..3 {
                for &v in &self.q[i][t] {
                    if v < -tol {
                        return Err(Error::validation(format!(
                            "partition q[{i}][{t}] negative: {v}"
                        )));
                    }
                }
                let tot = self.charging_total(i, t);
                if tot > e.q[t] + tol {
                    return Err(Error::validation(format!(
                        "partition for OD {i} type {t} exceeds demand: {tot} > {}",
                        e.q[t]
                    )));
                }
            }
            if self.charging_total(i, 0) > tol {
                return Err(Error::validation(format!("OD {i}: F1 demand cannot charge")));
            }
            if (self.charging_total(i, 1) - e.q[1]).abs() > tol {
                return Err(Error::validation(format!(
                    "OD {i}: F2 demand must charge exactly; got {} of {}",
                    self.charging_total(i, 1),
                    e.q[1]
                )));
            }
        }
        Ok(())
    }
}

/// Node demand vectors for one (od, type): per charger the (c+, c-) pair and
/// the non-charging vector. Entries sum to zero by construction.
#[derive(Debug, Clone)]
pub struct YVectors {
    pub charging: Vec<(DVector<f64>, DVector<f64>)>,
    pub non_charging: DVector<f64>,
}

/// Build the y vectors for every (od, type) from a demand partition.
/// `chargers` lists charger node indices in partition column order.
pub fn node_demand_vectors(
    net: &Network,
    demand: &DemandTable,
    chargers: &[usize],
    partition: &ChargePartition,
) -> Result<Vec<[YVectors; 3]>> {
    partition.validate(demand, 1e-9)?;
    let n = net.nodes.len();
    let mut out = Vec::with_capacity(demand.entries.len());
    for (i, e) in demand.entries.iter().enumerate() {
        let mut per_type: Vec<YVectors> = Vec::with_capacity(3);
        for t in 0..3 {
            let mut charging = Vec::with_capacity(chargers.len());
            for (c, &s) in chargers.iter().enumerate() {
                let q = partition.q[i][t][c];
                let mut plus = DVector::zeros(n);
                let mut minus = DVector::zeros(n);
                plus[e.origin] += q;
                plus[s] -= q;
                minus[s] += q;
                minus[e.destination] -= q;
                charging.push((plus, minus));
            }
            let rem = e.q[t] - partition.charging_total(i, t);
            let mut nc = DVector::zeros(n);
            nc[e.origin] += rem;
            nc[e.destination] -= rem;
            per_type.push(YVectors { charging, non_charging: nc });
        }
        let arr: [YVectors; 3] = per_type.try_into().map_err(|_| Error::validation("internal"))?;
        out.push(arr);
        let _ = i;
    }
    Ok(out)
}

/// Sorted union of two charger-node selections; placement uses this to merge
/// a fixed pre-existing set with the candidate selection under evaluation.
pub fn union_selection(fixed: &[usize], selection: &[usize]) -> Vec<usize> {
    let mut set: BTreeMap<usize, ()> = BTreeMap::new();
    for &v in fixed.iter().chain(selection) {
        set.insert(v, ());
    }
    set.into_keys().collect()
}
