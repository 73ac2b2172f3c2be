//! Shared graph machinery: connectivity, max-flow, relay pruning and
//! canonical labeling of small multigraphs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::topology::{NodeId, NodeKind, Topology};

/// Weakly-connected component index per node.
pub fn weak_components(t: &Topology) -> BTreeMap<NodeId, usize> {
    let mut comp: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut next = 0usize;
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for n in &t.nodes {
        adj.entry(n.id).or_default();
    }
    for l in &t.links {
        adj.entry(l.src).or_default().push(l.dst);
        adj.entry(l.dst).or_default().push(l.src);
    }
    for n in &t.nodes {
        if comp.contains_key(&n.id) {
            continue;
        }
        let mut q = VecDeque::new();
        q.push_back(n.id);
        comp.insert(n.id, next);
        while let Some(u) = q.pop_front() {
            for &v in &adj[&u] {
                if let std::collections::btree_map::Entry::Vacant(e) = comp.entry(v) {
                    e.insert(next);
                    q.push_back(v);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Nodes reachable from `root` following link directions.
pub fn reachable(t: &Topology, root: NodeId) -> BTreeSet<NodeId> {
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for l in &t.links {
        adj.entry(l.src).or_default().push(l.dst);
    }
    let mut seen = BTreeSet::new();
    let mut q = VecDeque::new();
    seen.insert(root);
    q.push_back(root);
    while let Some(u) = q.pop_front() {
        if let Some(vs) = adj.get(&u) {
            for &v in vs {
                if seen.insert(v) {
                    q.push_back(v);
                }
            }
        }
    }
    seen
}

/// Planning view of a topology: allocated GPUs plus the relay nodes that can
/// actually carry transit. Relays with at most one distinct neighbor are
/// removed iteratively, as are relays unreachable from any GPU.
///
/// Arborescences later span every node of this view, so the pruning is what
/// makes switch hierarchies usable: a PCIe domain switch with no allocated
/// GPUs behind it must not be forced into every tree.
pub fn prune_relays(t: &Topology) -> Topology {
    let mut retained: BTreeSet<NodeId> = t.nodes.iter().map(|n| n.id).collect();
    loop {
        let mut dropped = None;
        for n in t.nodes.iter().filter(|n| n.kind != NodeKind::Gpu) {
            if !retained.contains(&n.id) {
                continue;
            }
            let neighbors: BTreeSet<NodeId> = t
                .links
                .iter()
                .filter(|l| retained.contains(&l.src) && retained.contains(&l.dst))
                .filter_map(|l| {
                    if l.src == n.id {
                        Some(l.dst)
                    } else if l.dst == n.id {
                        Some(l.src)
                    } else {
                        None
                    }
                })
                .collect();
            if neighbors.len() <= 1 {
                dropped = Some(n.id);
                break;
            }
        }
        match dropped {
            Some(id) => {
                retained.remove(&id);
            }
            None => break,
        }
    }
    Topology {
        name: t.name.clone(),
        nodes: t.nodes.iter().filter(|n| retained.contains(&n.id)).copied().collect(),
        links: t
            .links
            .iter()
            .filter(|l| retained.contains(&l.src) && retained.contains(&l.dst))
            .copied()
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Max flow
// ---------------------------------------------------------------------------

const FLOW_EPS: f64 = 1e-12;

/// Edmonds-Karp max flow on an arc list. Arcs are directed; parallel arcs
/// are merged into one residual entry per (src,dst).
pub fn max_flow_arcs(n: usize, arcs: &[(usize, usize, f64)], s: usize, t: usize) -> f64 {
    let mut cap = vec![vec![0.0f64; n]; n];
    for &(u, v, c) in arcs {
        cap[u][v] += c;
    }
    let mut flow = 0.0;
    loop {
        // BFS for a shortest augmenting path.
        let mut parent = vec![usize::MAX; n];
        parent[s] = s;
        let mut q = VecDeque::new();
        q.push_back(s);
        while let Some(u) = q.pop_front() {
            for v in 0..n {
                if parent[v] == usize::MAX && cap[u][v] > FLOW_EPS {
                    parent[v] = u;
                    q.push_back(v);
                }
            }
        }
        if parent[t] == usize::MAX {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = t;
        while v != s {
            let u = parent[v];
            bottleneck = bottleneck.min(cap[u][v]);
            v = u;
        }
        let mut v = t;
        while v != s {
            let u = parent[v];
            cap[u][v] -= bottleneck;
            cap[v][u] += bottleneck;
            v = u;
        }
        flow += bottleneck;
    }
    flow
}

/// Max flow between two topology nodes. With `unit_caps` every link counts
/// as capacity 1 regardless of its bandwidth.
pub fn max_flow(t: &Topology, src: NodeId, dst: NodeId, unit_caps: bool) -> f64 {
    let index: BTreeMap<NodeId, usize> =
        t.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let arcs: Vec<(usize, usize, f64)> = t
        .links
        .iter()
        .map(|l| (index[&l.src], index[&l.dst], if unit_caps { 1.0 } else { l.gbps }))
        .collect();
    max_flow_arcs(t.nodes.len(), &arcs, index[&src], index[&dst])
}

// ---------------------------------------------------------------------------
// Canonical multigraph labeling (for allocation binning)
// ---------------------------------------------------------------------------

/// Canonical key of a small multigraph given as a symmetric multiplicity
/// matrix: the lexicographically smallest row-major serialization over all
/// vertex permutations. Exponential in n, fine for n <= 8.
pub fn canonical_key(mult: &[Vec<u32>]) -> Vec<u32> {
    let n = mult.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<Vec<u32>> = None;
    permute(&mut perm, 0, &mut |p| {
        let mut key = Vec::with_capacity(n * n);
        for &i in p.iter() {
            for &j in p.iter() {
                key.push(mult[i][j]);
            }
        }
        match &best {
            Some(b) if *b <= key => {}
            _ => best = Some(key),
        }
    });
    best.unwrap_or_default()
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}
