//! Shortest-path machinery over per-link costs.
//!
//! Costs are supplied per physical link (nonnegative); charger self-loops
//! never appear here. All tie-breaks are deterministic: the heap orders by
//! (cost, node, link) and equal-cost relaxations keep the smaller link index,
//! so repeated runs produce identical paths.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::network::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub cost: f64,
    /// Link indices from origin to destination; empty iff origin == destination.
    pub links: Vec<usize>,
}

/// Node sequence visited by a link path starting at `o`.
pub fn path_nodes(net: &Network, o: usize, links: &[usize]) -> Vec<usize> {
    let mut nodes = vec![o];
    for &l in links {
        nodes.push(net.links[l].head);
    }
    nodes
}

#[derive(PartialEq)]
struct HeapKey(f64, usize, usize);

impl Eq for HeapKey {}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .total_cmp(&other.0)
            .then(self.1.cmp(&other.1))
            .then(self.2.cmp(&other.2))
    }
}

fn run_dijkstra(
    net: &Network,
    costs: &[f64],
    source: usize,
    reverse: bool,
    banned_links: Option<&[bool]>,
    banned_nodes: Option<&[bool]>,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = net.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut via = vec![None; n];
    let mut settled = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Reverse(HeapKey(0.0, source, usize::MAX)));
    while let Some(Reverse(HeapKey(d, v, _))) = heap.pop() {
        if settled[v] {
            continue;
        }
        settled[v] = true;
        if d > dist[v] {
            continue;
        }
        let out = if reverse { &net.in_links[v] } else { &net.out_links[v] };
        for &l in out {
            if banned_links.is_some_and(|b| b[l]) {
                continue;
            }
            let link = &net.links[l];
            let w = if reverse { link.tail } else { link.head };
            if banned_nodes.is_some_and(|b| b[w]) || settled[w] {
                continue;
            }
            let nd = d + costs[l];
            if nd < dist[w] {
                dist[w] = nd;
                via[w] = Some(l);
                heap.push(Reverse(HeapKey(nd, w, l)));
            } else if nd == dist[w] && via[w].is_some_and(|prev| l < prev) {
                // deterministic preference for the smaller link id on exact ties
                via[w] = Some(l);
                heap.push(Reverse(HeapKey(nd, w, l)));
            }
        }
    }
    (dist, via)
}

/// Shortest-path distances and incoming link from `o` to every node.
pub fn shortest_tree_from(net: &Network, costs: &[f64], o: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    run_dijkstra(net, costs, o, false, None, None)
}

/// Distances to `d` and the outgoing link toward `d` from every node.
pub fn shortest_tree_to(net: &Network, costs: &[f64], d: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    run_dijkstra(net, costs, d, true, None, None)
}

/// Extract the o -> v path from a forward tree.
pub fn tree_path_from(via: &[Option<usize>], net: &Network, o: usize, v: usize) -> Option<Vec<usize>> {
    let mut links = Vec::new();
    let mut cur = v;
    while cur != o {
        let l = via[cur]?;
        links.push(l);
        cur = net.links[l].tail;
    }
    links.reverse();
    Some(links)
}

/// Extract the v -> d path from a reverse tree.
pub fn tree_path_to(via: &[Option<usize>], net: &Network, d: usize, v: usize) -> Option<Vec<usize>> {
    let mut links = Vec::new();
    let mut cur = v;
    while cur != d {
        let l = via[cur]?;
        links.push(l);
        cur = net.links[l].head;
    }
    Some(links)
}

/// Single-pair shortest path honoring optional ban lists.
pub fn shortest_path_restricted(
    net: &Network,
    costs: &[f64],
    o: usize,
    d: usize,
    banned_links: Option<&[bool]>,
    banned_nodes: Option<&[bool]>,
) -> Option<Path> {
    if o == d {
        return Some(Path { cost: 0.0, links: Vec::new() });
    }
    let (dist, via) = run_dijkstra(net, costs, o, false, banned_links, banned_nodes);
    if !dist[d].is_finite() {
        return None;
    }
    let links = tree_path_from(&via, net, o, d)?;
    Some(Path { cost: dist[d], links })
}

pub fn shortest_path(net: &Network, costs: &[f64], o: usize, d: usize) -> Option<Path> {
    shortest_path_restricted(net, costs, o, d, None, None)
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    links: Vec<usize>,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cost.total_cmp(&other.cost).then_with(|| self.links.cmp(&other.links))
    }
}

/// Yen's algorithm: up to `k` loopless paths from `o` to `d` in
/// non-decreasing cost order. Equal costs order by link sequence. Returns
/// fewer than `k` paths when the graph runs out; empty when unreachable.
pub fn yen_k_shortest(net: &Network, costs: &[f64], o: usize, d: usize, k: usize) -> Vec<Path> {
    assert!(o != d, "k-shortest requires distinct endpoints");
    assert!(k >= 1);
    let first = match shortest_path(net, costs, o, d) {
        Some(p) => p,
        None => return Vec::new(),
    };
    let mut accepted: Vec<Path> = vec![first];
    let mut candidates: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
    let mut seen: Vec<Vec<usize>> = Vec::new();

    while accepted.len() < k {
        let last = accepted.last().unwrap().links.clone();
        let last_nodes = path_nodes(net, o, &last);
        for i in 0..last.len() {
            let spur_node = last_nodes[i];
            let root = &last[..i];
            let mut banned_links = vec![false; net.links.len()];
            for p in &accepted {
                if p.links.len() > i && p.links[..i] == *root {
                    banned_links[p.links[i]] = true;
                }
            }
            let mut banned_nodes = vec![false; net.nodes.len()];
            for &v in &last_nodes[..i] {
                banned_nodes[v] = true;
            }
            let spur = shortest_path_restricted(
                net,
                costs,
                spur_node,
                d,
                Some(&banned_links),
                Some(&banned_nodes),
            );
            if let Some(spur) = spur {
                let mut links = root.to_vec();
                links.extend_from_slice(&spur.links);
                if accepted.iter().any(|p| p.links == links) || seen.contains(&links) {
                    continue;
                }
                let cost = links.iter().map(|&l| costs[l]).sum();
                seen.push(links.clone());
                candidates.push(Reverse(Candidate { cost, links }));
            }
        }
        match candidates.pop() {
            Some(Reverse(c)) => accepted.push(Path { cost: c.cost, links: c.links }),
            None => break,
        }
    }
    accepted
}
