//! Shared test oracles, deliberately independent of the library's packing
//! implementation: brute-force arborescence enumeration and an exact
//! rational-arithmetic LP solver for the packing polytope.
#![allow(dead_code)] // each test binary uses a subset
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use std::collections::BTreeSet;

use treepack_core::topology::{Link, LinkClass, Node, NodeId, NodeKind, Topology};

pub fn ratio(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Enumerate every spanning arborescence rooted at `root` as a set of link
/// indices: each non-root node picks one in-link, keep the acyclic choices
/// that reach everything from the root.
pub fn enumerate_arborescences(t: &Topology, root: NodeId) -> Vec<Vec<usize>> {
    let nodes: Vec<NodeId> = t.nodes.iter().map(|n| n.id).collect();
    let non_root: Vec<NodeId> = nodes.iter().copied().filter(|&v| v != root).collect();
    let in_links: Vec<Vec<usize>> = non_root
        .iter()
        .map(|&v| {
            t.links
                .iter()
                .enumerate()
                .filter(|(_, l)| l.dst == v)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut choice: Vec<usize> = Vec::new();
    enumerate_rec(t, root, &non_root, &in_links, &mut choice, &mut out);
    out
}

fn enumerate_rec(
    t: &Topology,
    root: NodeId,
    non_root: &[NodeId],
    in_links: &[Vec<usize>],
    choice: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if choice.len() == non_root.len() {
        // Validate: walking parents from every node terminates at the root.
        let parent_of = |v: NodeId| -> Option<NodeId> {
            non_root
                .iter()
                .position(|&x| x == v)
                .map(|i| t.links[choice[i]].src)
        };
        for &start in non_root {
            let mut v = start;
            let mut steps = 0;
            loop {
                match parent_of(v) {
                    None => break, // reached the root
                    Some(p) => {
                        v = p;
                        steps += 1;
                        if steps > non_root.len() {
                            return; // cycle
                        }
                    }
                }
            }
            if v != root && parent_of(v).is_none() && v != root {
                return;
            }
        }
        let mut links = choice.clone();
        links.sort_unstable();
        out.push(links);
        return;
    }
    let idx = choice.len();
    for &li in &in_links[idx] {
        choice.push(li);
        enumerate_rec(t, root, non_root, in_links, choice, out);
        choice.pop();
    }
}

/// Exact optimum of the fractional tree-packing LP
///   max sum_T x_T  s.t.  sum_{T owning e} x_T <= c_e,  x >= 0
/// solved by dense rational simplex with Bland's rule. Capacities must be
/// integral (they are, in every generated test graph).
pub fn packing_lp_optimum(t: &Topology, trees: &[Vec<usize>]) -> BigRational {
    let m = t.links.len();
    let k = trees.len();
    if k == 0 {
        return BigRational::zero();
    }
    // Tableau: rows = constraints with slack, final row = objective.
    // Columns: k tree vars, m slacks, 1 rhs.
    let cols = k + m + 1;
    let mut tab: Vec<Vec<BigRational>> = Vec::with_capacity(m + 1);
    for (e, l) in t.links.iter().enumerate() {
        let mut row = vec![BigRational::zero(); cols];
        for (j, tr) in trees.iter().enumerate() {
            if tr.binary_search(&e).is_ok() {
                row[j] = BigRational::one();
            }
        }
        row[k + e] = BigRational::one();
        row[cols - 1] = ratio(l.gbps.round() as i64);
        tab.push(row);
    }
    // Objective: minimize -sum x_T.
    let mut obj = vec![BigRational::zero(); cols];
    for j in 0..k {
        obj[j] = -BigRational::one();
    }
    tab.push(obj);

    // Bland: entering = lowest-index column with a negative cost.
    while let Some(enter) = (0..cols - 1).find(|&j| tab[m][j].is_negative()) {
        // Ratio test, ties to the lowest row (Bland).
        let mut leave: Option<(usize, BigRational)> = None;
        for r in 0..m {
            if tab[r][enter].is_positive() {
                let ratio = &tab[r][cols - 1] / &tab[r][enter];
                let better = match &leave {
                    None => true,
                    Some((_, best)) => &ratio < best,
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let (pr, _) = leave.expect("packing LP is bounded");
        // Pivot.
        let pivot = tab[pr][enter].clone();
        for c in 0..cols {
            tab[pr][c] = &tab[pr][c] / &pivot;
        }
        for r in 0..=m {
            if r == pr {
                continue;
            }
            let f = tab[r][enter].clone();
            if f.is_zero() {
                continue;
            }
            for c in 0..cols {
                let delta = &f * &tab[pr][c];
                tab[r][c] = &tab[r][c] - delta;
            }
        }
    }
    // The z-row rhs accumulates the maximized objective.
    tab[m][cols - 1].clone()
}

pub fn lp_to_f64(x: &BigRational) -> f64 {
    let n = x.numer();
    let d = x.denom();
    // Good enough for test tolerances.
    n.to_string().parse::<f64>().unwrap() / d.to_string().parse::<f64>().unwrap()
}

/// Random directed multigraph on `n` GPU nodes with integer capacities,
/// guaranteed to reach every node from node 0. Arc count is kept moderate
/// so exhaustive enumeration stays cheap.
pub fn random_digraph(rng: &mut impl Rng, n: u16) -> Topology {
    loop {
        let nodes: Vec<Node> =
            (0..n).map(|i| Node { id: NodeId(i), kind: NodeKind::Gpu }).collect();
        let max_arcs = (n as usize) * (n as usize - 1);
        let m = rng.gen_range(n as usize..=(2 * n as usize + 2).min(max_arcs));
        let mut pairs: Vec<(u16, u16)> = Vec::new();
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    pairs.push((u, v));
                }
            }
        }
        let mut links = Vec::new();
        let mut chosen = BTreeSet::new();
        while chosen.len() < m {
            let p = pairs[rng.gen_range(0..pairs.len())];
            if chosen.insert(p) {
                links.push(Link {
                    src: NodeId(p.0),
                    dst: NodeId(p.1),
                    gbps: rng.gen_range(1..=8) as f64,
                    class: LinkClass::Nvlink,
                });
            }
        }
        let t = Topology { name: format!("rand{n}"), nodes, links };
        let reach = treepack_core::graph::reachable(&t, NodeId(0));
        if reach.len() == n as usize {
            return t;
        }
    }
}

/// Random connected bidirectional graph (every link has its reverse), for
/// AllReduce replay tests.
pub fn random_bidirectional(rng: &mut impl Rng, n: u16) -> Topology {
    let nodes: Vec<Node> =
        (0..n).map(|i| Node { id: NodeId(i), kind: NodeKind::Gpu }).collect();
    let mut links = Vec::new();
    let both = |links: &mut Vec<Link>, a: u16, b: u16, g: f64| {
        links.push(Link { src: NodeId(a), dst: NodeId(b), gbps: g, class: LinkClass::Nvlink });
        links.push(Link { src: NodeId(b), dst: NodeId(a), gbps: g, class: LinkClass::Nvlink });
    };
    // Random spanning tree first, then extra chords.
    for v in 1..n {
        let u = rng.gen_range(0..v);
        both(&mut links, u, v, rng.gen_range(1..=8) as f64);
    }
    let extra = rng.gen_range(0..=n as usize);
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            both(&mut links, a, b, rng.gen_range(1..=8) as f64);
        }
    }
    Topology { name: format!("bidi{n}"), nodes, links }
}
