//! Shared fixtures and an independent path-space equilibrium oracle.
//!
//! The oracle enumerates every simple path (and every path-through-charger
//! composition) explicitly and equalizes generalized costs by pairwise
//! bisection, so it shares no search machinery with the link-space solver
//! it is used to check.

use evflow::delay::{DelayFn, DelayParams};
use evflow::equilibrium::DelaySet;
use evflow::network::{DemandTable, Network, Node, OdPair};
use rand::Rng;

pub type LinkSpec = (String, String, String, f64, u32, f64, Option<f64>, bool);

pub fn node(id: &str) -> Node {
    Node { id: id.into(), x: None, y: None }
}

pub fn node_at(id: &str, x: f64, y: f64) -> Node {
    Node { id: id.into(), x: Some(x), y: Some(y) }
}

/// Link with throwaway physical attributes, for networks whose delays come
/// from an explicit `DelaySet` rather than link properties.
pub fn link(id: &str, tail: &str, head: &str) -> LinkSpec {
    (id.into(), tail.into(), head.into(), 500.0, 1, 10.0, None, false)
}

pub fn link_full(
    id: &str,
    tail: &str,
    head: &str,
    length_m: f64,
    lanes: u32,
    fft_s: f64,
    cap_vph: f64,
) -> LinkSpec {
    (id.into(), tail.into(), head.into(), length_m, lanes, fft_s, Some(cap_vph), false)
}

pub fn od(origin: usize, destination: usize, q: [f64; 3], benefit_s: f64) -> OdPair {
    OdPair { origin, destination, q, benefit_s }
}

/// Two parallel routes, one flow-independent: demand 1.5 splits so the
/// congestible link carries exactly 1.0 and both used routes cost 1.0.
pub fn pigou() -> (Network, DemandTable, DelaySet, Vec<f64>) {
    let net = Network::new(
        vec![node("s"), node("t")],
        vec![link("p1", "s", "t"), link("p2", "s", "t")],
        vec![],
    )
    .unwrap();
    let delays = DelaySet::new(vec![
        DelayFn::constant(1.0),
        DelayFn::Affine { base: 0.0, slope: 1.0 },
    ]);
    let demand =
        DemandTable::new(vec![od(0, 1, [1.5, 0.0, 0.0], 0.0)]).unwrap();
    (net, demand, delays, vec![0.5, 1.0])
}

/// The four-node Braess diamond with the zero-cost shortcut a -> b.
/// At q = 4000 everyone zigzags (all links but the 45 s ones at 4000); at
/// q = 6000 the equilibrium splits 1500/1500/3000 and every path costs 90.
pub fn braess(q: f64) -> (Network, DemandTable, DelaySet, Vec<f64>) {
    let net = Network::new(
        vec![node("s"), node("a"), node("b"), node("t")],
        vec![
            link("sa", "s", "a"),
            link("at", "a", "t"),
            link("sb", "s", "b"),
            link("bt", "b", "t"),
            link("ab", "a", "b"),
        ],
        vec![],
    )
    .unwrap();
    let delays = DelaySet::new(vec![
        DelayFn::Affine { base: 0.0, slope: 0.01 },
        DelayFn::constant(45.0),
        DelayFn::constant(45.0),
        DelayFn::Affine { base: 0.0, slope: 0.01 },
        DelayFn::constant(0.0),
    ]);
    let demand = DemandTable::new(vec![od(0, 3, [q, 0.0, 0.0], 0.0)]).unwrap();
    let expected = if q <= 4500.0 {
        vec![q, 0.0, 0.0, q, q]
    } else {
        vec![4500.0, q - 4500.0, q - 4500.0, 4500.0, 9000.0 - q]
    };
    (net, demand, delays, expected)
}

/// Eight-node counterexample network: one unit of must-charge demand, a
/// pre-existing charger at c0, and placement candidates c1, c2, c3. Greedy
/// placement of two chargers lands on total delay 2.0 while {c1, c3}
/// achieves 1.6 by splitting flow across both congestible approaches.
pub fn fig3() -> (Network, DemandTable, DelaySet) {
    let net = Network::new(
        vec![
            node("O"),
            node("D"),
            node("c0"),
            node("c1"),
            node("c2"),
            node("c3"),
            node("c4"),
            node("c5"),
        ],
        vec![
            link("O-c0", "O", "c0"),
            link("c0-D", "c0", "D"),
            link("O-c4", "O", "c4"),
            link("c4-c3", "c4", "c3"),
            link("c3-D", "c3", "D"),
            link("c4-c2", "c4", "c2"),
            link("c2-c5", "c2", "c5"),
            link("c5-D", "c5", "D"),
            link("O-c1", "O", "c1"),
            link("c1-c5", "c1", "c5"),
        ],
        vec!["c0".into(), "c1".into(), "c2".into(), "c3".into()],
    )
    .unwrap();
    let delays = DelaySet::new(vec![
        DelayFn::constant(10.0),
        DelayFn::constant(10.0),
        DelayFn::Affine { base: 0.0, slope: 1.0 },
        DelayFn::constant(0.0),
        DelayFn::constant(1.1),
        DelayFn::constant(0.0),
        DelayFn::constant(0.0),
        DelayFn::Affine { base: 0.0, slope: 1.0 },
        DelayFn::constant(0.0),
        DelayFn::constant(1.1),
    ]);
    let demand = DemandTable::new(vec![od(0, 1, [0.0, 1.0, 0.0], 0.0)]).unwrap();
    (net, demand, delays)
}

/// 3x5 grid with bidirectional 300 m streets, four central charger
/// candidates and 120 vehicles of mixed type. Small enough for exhaustive
/// search on the queue backend, large enough for routing to matter.
pub fn desk_grid() -> (Network, DemandTable) {
    let mut nodes = Vec::new();
    for r in 0..3u32 {
        for c in 0..5u32 {
            nodes.push(node_at(
                &format!("n{r}{c}"),
                c as f64 * 300.0,
                r as f64 * 300.0,
            ));
        }
    }
    let mut links: Vec<LinkSpec> = Vec::new();
    let mut street = |a: &str, b: &str| {
        links.push((format!("{a}-{b}"), a.into(), b.into(), 300.0, 1, 20.0, None, false));
    };
    for r in 0..3u32 {
        for c in 0..5u32 {
            let here = format!("n{r}{c}");
            if c + 1 < 5 {
                let right = format!("n{r}{}", c + 1);
                street(&here, &right);
                street(&right, &here);
            }
            if r + 1 < 3 {
                let down = format!("n{}{c}", r + 1);
                street(&here, &down);
                street(&down, &here);
            }
        }
    }
    let net = Network::new(
        nodes,
        links,
        vec!["n11".into(), "n02".into(), "n22".into(), "n13".into()],
    )
    .unwrap();
    let idx = |id: &str| net.node_idx(id).unwrap();
    let demand = DemandTable::new(vec![
        od(idx("n10"), idx("n14"), [30.0, 50.0, 0.0], 0.0),
        od(idx("n14"), idx("n10"), [20.0, 0.0, 0.0], 0.0),
        od(idx("n00"), idx("n24"), [0.0, 0.0, 20.0], 240.0),
    ])
    .unwrap();
    (net, demand)
}

// -------- random layered instances --------

fn dfs_paths(
    net: &Network,
    u: usize,
    d: usize,
    on_path: &mut Vec<bool>,
    stack: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
    cap: usize,
) {
    if out.len() >= cap {
        return;
    }
    if u == d {
        out.push(stack.clone());
        return;
    }
    on_path[u] = true;
    for &l in &net.out_links[u] {
        let v = net.links[l].head;
        if on_path[v] {
            continue;
        }
        stack.push(l);
        dfs_paths(net, v, d, on_path, stack, out, cap);
        stack.pop();
    }
    on_path[u] = false;
}

/// All simple paths from `o` to `d` as link sequences, up to `cap` of them.
/// `o == d` yields the single empty path.
pub fn enumerate_paths(net: &Network, o: usize, d: usize, cap: usize) -> Vec<Vec<usize>> {
    if o == d {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    dfs_paths(net, o, d, &mut vec![false; net.nodes.len()], &mut Vec::new(), &mut out, cap);
    out
}

/// Layered random network: O, one or two middle layers of width 2..=3, D.
/// Forward links only, so at most 3 * 3 + 3 = 12 simple O-D paths. Returns
/// the per-link delay laws alongside; chargers are not yet placed.
pub fn random_instance(
    rng: &mut impl Rng,
    with_chargers: bool,
) -> (Network, DemandTable, Vec<DelayFn>) {
    loop {
        let mid_layers = rng.gen_range(1..=2usize);
        let mut layers: Vec<Vec<String>> = vec![vec!["O".into()]];
        let mut serial = 0;
        for _ in 0..mid_layers {
            let width = rng.gen_range(2..=3usize);
            layers.push(
                (0..width)
                    .map(|_| {
                        serial += 1;
                        format!("m{serial}")
                    })
                    .collect(),
            );
        }
        layers.push(vec!["D".into()]);

        let mut links: Vec<(String, String)> = Vec::new();
        for w in layers.windows(2) {
            let (from, to) = (&w[0], &w[1]);
            for u in from {
                for v in to {
                    if rng.gen_bool(0.8) {
                        links.push((u.clone(), v.clone()));
                    }
                }
            }
            // every node keeps at least one way forward and one way in
            for u in from {
                if !links.iter().any(|(a, _)| a == u) {
                    links.push((u.clone(), to[rng.gen_range(0..to.len())].clone()));
                }
            }
            for v in to {
                if !links.iter().any(|(_, b)| b == v) {
                    links.push((from[rng.gen_range(0..from.len())].clone(), v.clone()));
                }
            }
        }
        if mid_layers == 2 && rng.gen_bool(0.5) {
            let far = &layers[2];
            let skip = (String::from("O"), far[rng.gen_range(0..far.len())].clone());
            if !links.contains(&skip) {
                links.push(skip);
            }
        }
        links.sort();
        links.dedup();

        let nodes: Vec<Node> = layers.iter().flatten().map(|id| node(id)).collect();
        let specs: Vec<LinkSpec> = links
            .iter()
            .map(|(a, b)| link(&format!("{a}>{b}"), a, b))
            .collect();
        let candidates: Vec<String> = if with_chargers {
            layers[1..layers.len() - 1].iter().flatten().cloned().collect()
        } else {
            vec![]
        };
        let net = Network::new(nodes, specs, candidates).unwrap();

        let o = net.node_idx("O").unwrap();
        let d = net.node_idx("D").unwrap();
        let n_paths = enumerate_paths(&net, o, d, 64).len();
        if n_paths == 0 || n_paths > 12 {
            continue;
        }

        let delay_fns: Vec<DelayFn> = net
            .links
            .iter()
            .map(|_| {
                DelayFn::Bpr(
                    DelayParams::new(
                        rng.gen_range(5.0..40.0),
                        rng.gen_range(600.0..2400.0),
                        rng.gen_range(0.1..0.5),
                        rng.gen_range(2.0..5.0),
                    )
                    .unwrap(),
                )
            })
            .collect();

        let q = if with_chargers {
            [
                rng.gen_range(500.0..1500.0),
                rng.gen_range(300.0..900.0),
                rng.gen_range(200.0..600.0),
            ]
        } else {
            [rng.gen_range(500.0..2500.0), 0.0, 0.0]
        };
        let benefit = if with_chargers { rng.gen_range(20.0..80.0) } else { 0.0 };
        let demand = DemandTable::new(vec![od(o, d, q, benefit)]).unwrap();
        return (net, demand, delay_fns);
    }
}

/// Place one or two chargers with strictly increasing service delay on a
/// random instance's candidate nodes.
pub fn place_random_chargers(net: &Network, rng: &mut impl Rng) -> Network {
    let mut picks = net.candidates.clone();
    let keep = rng.gen_range(1..=2usize.min(picks.len()));
    while picks.len() > keep {
        let drop = rng.gen_range(0..picks.len());
        picks.remove(drop);
    }
    let law = DelayFn::Bpr(DelayParams::new(30.0, 200.0, 0.3, 2.0).unwrap());
    net.augment_with_chargers(&picks, &|_| law).unwrap()
}

// -------- path-space oracle --------

struct Alt {
    links: Vec<usize>,
    charger: Option<usize>,
    bonus: f64,
}

struct AltGroup {
    q: f64,
    alts: Vec<Alt>,
}

fn build_groups(net: &Network, demand: &DemandTable) -> Option<Vec<AltGroup>> {
    let mut groups = Vec::new();
    for pair in &demand.entries {
        let plain = enumerate_paths(net, pair.origin, pair.destination, 256);
        for t in 0..3 {
            if pair.q[t] == 0.0 {
                continue;
            }
            let mut alts = Vec::new();
            if t != 1 {
                for p in &plain {
                    alts.push(Alt { links: p.clone(), charger: None, bonus: 0.0 });
                }
            }
            if t != 0 {
                for (pos, ch) in net.chargers.iter().enumerate() {
                    for p1 in enumerate_paths(net, pair.origin, ch.node, 256) {
                        for p2 in enumerate_paths(net, ch.node, pair.destination, 256) {
                            let mut seq = p1.clone();
                            seq.extend_from_slice(&p2);
                            alts.push(Alt {
                                links: seq,
                                charger: Some(pos),
                                bonus: if t == 2 { pair.benefit_s } else { 0.0 },
                            });
                        }
                    }
                }
            }
            if alts.is_empty() {
                return None;
            }
            groups.push(AltGroup { q: pair.q[t], alts });
        }
    }
    Some(groups)
}

/// Wardrop equilibrium over the fully enumerated alternative space, by
/// pairwise cost equalization with exact bisection. Returns link and
/// charger flows, or None if the demand cannot be routed or the sweep
/// limit is hit before every group's cost spread drops below `tol`.
pub fn path_space_equilibrium(
    net: &Network,
    demand: &DemandTable,
    delay_fns: &[DelayFn],
    tol: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let groups = build_groups(net, demand)?;
    let mut f: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| vec![g.q / g.alts.len() as f64; g.alts.len()])
        .collect();
    let mut x = vec![0.0; net.links.len()];
    let mut xh = vec![0.0; net.chargers.len()];
    for (gi, g) in groups.iter().enumerate() {
        for (ai, a) in g.alts.iter().enumerate() {
            for &l in &a.links {
                x[l] += f[gi][ai];
            }
            if let Some(c) = a.charger {
                xh[c] += f[gi][ai];
            }
        }
    }

    let cost_at = |x: &[f64], xh: &[f64], a: &Alt| -> f64 {
        let mut c: f64 =
            a.links.iter().map(|&l| delay_fns[l].eval(x[l].max(0.0))).sum();
        if let Some(ch) = a.charger {
            c += net.chargers[ch].delay.eval(xh[ch].max(0.0));
        }
        c - a.bonus
    };
    // cost difference (lo - hi) after moving delta from hi to lo; counts
    // repeated links per alternative, so it is exact even on odd paths
    let diff = |x: &[f64], xh: &[f64], hi: &Alt, lo: &Alt, delta: f64| -> f64 {
        let adj = |l: usize| -> f64 {
            let minus = hi.links.iter().filter(|&&e| e == l).count() as f64;
            let plus = lo.links.iter().filter(|&&e| e == l).count() as f64;
            (x[l] + delta * (plus - minus)).max(0.0)
        };
        let adj_h = |c: usize| -> f64 {
            let mut v = xh[c];
            if hi.charger == Some(c) {
                v -= delta;
            }
            if lo.charger == Some(c) {
                v += delta;
            }
            v.max(0.0)
        };
        let eval = |a: &Alt| -> f64 {
            let mut c: f64 = a.links.iter().map(|&l| delay_fns[l].eval(adj(l))).sum();
            if let Some(ch) = a.charger {
                c += net.chargers[ch].delay.eval(adj_h(ch));
            }
            c - a.bonus
        };
        eval(lo) - eval(hi)
    };

    for _sweep in 0..200_000 {
        let mut moved = false;
        let mut worst = 0.0f64;
        for (gi, g) in groups.iter().enumerate() {
            let costs: Vec<f64> = g.alts.iter().map(|a| cost_at(&x, &xh, a)).collect();
            let mut hi: Option<usize> = None;
            let mut lo = 0usize;
            for (ai, &c) in costs.iter().enumerate() {
                if f[gi][ai] > 0.0 && hi.map_or(true, |h: usize| c > costs[h]) {
                    hi = Some(ai);
                }
                if c < costs[lo] {
                    lo = ai;
                }
            }
            let Some(hi) = hi else { continue };
            let spread = costs[hi] - costs[lo];
            worst = worst.max(spread);
            if spread <= tol || hi == lo {
                continue;
            }
            let cap = f[gi][hi];
            let delta = if diff(&x, &xh, &g.alts[hi], &g.alts[lo], cap) <= 0.0 {
                cap
            } else {
                let (mut a, mut b) = (0.0f64, cap);
                for _ in 0..100 {
                    let m = 0.5 * (a + b);
                    if diff(&x, &xh, &g.alts[hi], &g.alts[lo], m) <= 0.0 {
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
            if delta <= 1e-15 * g.q {
                continue;
            }
            f[gi][hi] -= delta;
            f[gi][lo] += delta;
            for &l in &g.alts[hi].links {
                x[l] -= delta;
            }
            for &l in &g.alts[lo].links {
                x[l] += delta;
            }
            if let Some(c) = g.alts[hi].charger {
                xh[c] -= delta;
            }
            if let Some(c) = g.alts[lo].charger {
                xh[c] += delta;
            }
            moved = true;
        }
        if !moved {
            return if worst <= tol { Some((x, xh)) } else { None };
        }
    }
    None
}
