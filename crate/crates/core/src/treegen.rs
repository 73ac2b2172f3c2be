//! Arborescence packing: a multiplicative-weight-update scheme computes a
//! near-maximal fractional packing of directed spanning trees rooted at a
//! vertex, and an exact branch-and-bound integer program then minimizes the
//! number of trees while keeping the rate within a configured gap.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::graph;
use crate::topology::{LinkClass, NodeId, NodeKind, Topology};
use crate::{Error, Result};

/// Feasibility slack when checking per-edge capacity constraints.
pub const CAP_TOLERANCE: f64 = 1e-9;

/// One directed spanning tree. Edges point away from the root and cover all
/// GPU nodes of the planning topology; SWITCH/NIC nodes may appear as
/// pass-through internal vertices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arborescence {
    pub root: NodeId,
    /// Edges as indices into the topology's link list, sorted ascending.
    pub links: Vec<usize>,
    /// Max hops from the root to any leaf.
    pub depth: usize,
}

impl Arborescence {
    fn from_links(t: &Topology, root: NodeId, mut links: Vec<usize>) -> Arborescence {
        links.sort_unstable();
        let depth = depth_of(t, root, &links);
        Arborescence { root, links, depth }
    }

    /// Child map node -> outgoing tree links, for schedule generation.
    pub fn children(&self, t: &Topology) -> BTreeMap<NodeId, Vec<usize>> {
        let mut m: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for &li in &self.links {
            m.entry(t.links[li].src).or_default().push(li);
        }
        m
    }

    /// Tree links in breadth-first order from the root.
    pub fn links_bfs(&self, t: &Topology) -> Vec<usize> {
        let children = self.children(t);
        let mut order = Vec::with_capacity(self.links.len());
        let mut frontier = vec![self.root];
        while let Some(u) = frontier.pop() {
            if let Some(out) = children.get(&u) {
                for &li in out {
                    order.push(li);
                    frontier.insert(0, t.links[li].dst);
                }
            }
        }
        order
    }

    /// Vertices covered by the tree.
    pub fn vertices(&self, t: &Topology) -> BTreeSet<NodeId> {
        let mut s: BTreeSet<NodeId> = self.links.iter().map(|&li| t.links[li].dst).collect();
        s.insert(self.root);
        for &li in &self.links {
            s.insert(t.links[li].src);
        }
        s
    }
}

fn depth_of(t: &Topology, root: NodeId, links: &[usize]) -> usize {
    let mut depth: BTreeMap<NodeId, usize> = BTreeMap::new();
    depth.insert(root, 0);
    let mut remaining: Vec<usize> = links.to_vec();
    let mut best = 0;
    while !remaining.is_empty() {
        let before = remaining.len();
        remaining.retain(|&li| {
            let l = &t.links[li];
            if let Some(&d) = depth.get(&l.src) {
                depth.insert(l.dst, d + 1);
                best = best.max(d + 1);
                false
            } else {
                true
            }
        });
        if remaining.len() == before {
            break; // not rooted at `root`; depth over the reachable part
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackingStage {
    MwuRaw,
    IlpRefined,
}

/// A set of arborescences with nonnegative rate weights (GB/s) satisfying
/// the per-edge capacity constraints.
///
/// Carries the topology it was planned against so the serialized document
/// is self-contained and downstream planners can resolve link indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreePacking {
    pub root: NodeId,
    pub topology: Topology,
    pub trees: Vec<Arborescence>,
    pub weights: Vec<f64>,
    pub total_rate: f64,
    pub stage: PackingStage,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TreePacking {
    /// Per-link load imposed by the packing, indexed like `t.links`.
    pub fn link_loads(&self, t: &Topology) -> Vec<f64> {
        let mut load = vec![0.0; t.links.len()];
        for (tree, &w) in self.trees.iter().zip(&self.weights) {
            for &li in &tree.links {
                load[li] += w;
            }
        }
        load
    }

    /// Every edge satisfies its capacity constraint within tolerance.
    pub fn is_feasible(&self, t: &Topology) -> bool {
        self.link_loads(t)
            .iter()
            .zip(&t.links)
            .all(|(load, l)| *load <= l.gbps + CAP_TOLERANCE)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MwuConfig {
    /// Approximation parameter in (0, 0.5]. The packing rate is at least
    /// (1 - epsilon) times the optimum.
    pub epsilon: f64,
    /// Iteration guard; exceeding it signals a bug, not a user error.
    pub max_iterations: usize,
}

impl Default for MwuConfig {
    fn default() -> Self {
        MwuConfig { epsilon: 0.05, max_iterations: 20_000_000 }
    }
}

// ---------------------------------------------------------------------------
// Planning view
// ---------------------------------------------------------------------------

/// Compact arc representation of a pruned topology. Node ids are remapped to
/// 0..n; `link` points back into the original link list.
struct PlanView {
    n: usize,
    node_ids: Vec<NodeId>,
    gpu_idx: Vec<usize>,
    arcs: Vec<Arc>,
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    u: usize,
    v: usize,
    cap: f64,
    /// Original link index, also the deterministic tie-break key.
    link: usize,
}

fn plan_view(t: &Topology) -> PlanView {
    let pruned = graph::prune_relays(t);
    let node_ids: Vec<NodeId> = pruned.nodes.iter().map(|n| n.id).collect();
    let index: BTreeMap<NodeId, usize> =
        node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let gpu_idx = pruned
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.kind == NodeKind::Gpu)
        .map(|(i, _)| i)
        .collect();
    // Recover original link indices by identity scan: pruning only filters.
    let mut arcs = Vec::new();
    let mut cursor = 0usize;
    for (orig_idx, l) in t.links.iter().enumerate() {
        if cursor < pruned.links.len()
            && pruned.links[cursor] == *l
            && index.contains_key(&l.src)
            && index.contains_key(&l.dst)
        {
            arcs.push(Arc { u: index[&l.src], v: index[&l.dst], cap: l.gbps, link: orig_idx });
            cursor += 1;
        }
    }
    PlanView { n: node_ids.len(), node_ids, gpu_idx, arcs }
}

impl PlanView {
    fn node_index(&self, id: NodeId) -> Option<usize> {
        self.node_ids.iter().position(|&n| n == id)
    }

    fn require_reachable(&self, root: NodeId) -> Result<usize> {
        let r = self
            .node_index(root)
            .ok_or_else(|| Error::validation("root", format!("node {root} not in topology")))?;
        let mut seen = vec![false; self.n];
        seen[r] = true;
        let mut stack = vec![r];
        while let Some(u) = stack.pop() {
            for a in self.arcs.iter().filter(|a| a.u == u) {
                if !seen[a.v] {
                    seen[a.v] = true;
                    stack.push(a.v);
                }
            }
        }
        for (i, ok) in seen.iter().enumerate() {
            if !ok {
                return Err(Error::Unreachable(self.node_ids[i].to_string()));
            }
        }
        Ok(r)
    }
}

// ---------------------------------------------------------------------------
// Minimum-cost arborescence (Chu-Liu/Edmonds)
// ---------------------------------------------------------------------------

/// Minimum total cost spanning arborescence rooted at `root`.
///
/// `costs[i]` is the nonnegative cost of `t.links[i]`. Relay nodes with at
/// most one neighbor are pruned first; the tree spans everything that
/// remains. Ties break on the lowest (src, dst, link-index) tuple.
pub fn min_weight_arborescence(
    t: &Topology,
    root: NodeId,
    costs: &[f64],
) -> Result<Arborescence> {
    if costs.len() != t.links.len() {
        return Err(Error::validation("costs", "length must match link count"));
    }
    let view = plan_view(t);
    let r = view.require_reachable(root)?;
    let chosen = cle(view.n, &view.arcs, r, costs)
        .ok_or_else(|| Error::Internal("no arborescence in a reachable graph".into()))?;
    let links = chosen.iter().map(|&ai| view.arcs[ai].link).collect();
    Ok(Arborescence::from_links(t, root, links))
}

/// Chu-Liu/Edmonds on a compact arc list; returns indices into `arcs`.
fn cle(n: usize, arcs: &[Arc], root: usize, costs: &[f64]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy)]
    struct WArc {
        u: usize,
        v: usize,
        cost: f64,
        idx: usize, // index into the caller's arc list
        /// Original (src, dst, link-index): the deterministic tie-break is
        /// lexicographic on this triple and survives contraction.
        tie: (usize, usize, usize),
    }
    let mut cur: Vec<WArc> = arcs
        .iter()
        .enumerate()
        .map(|(i, a)| WArc { u: a.u, v: a.v, cost: costs[a.link], idx: i, tie: (a.u, a.v, a.link) })
        .collect();
    let mut n_cur = n;
    let mut root_cur = root;
    let mut active = vec![true; n];
    // Stack of contractions for expansion: (cycle arcs as WArc list, chosen
    // in-arc per cycle vertex, mapping info).
    struct Contraction {
        cycle_choice: Vec<(usize, usize)>, // (vertex, chosen arc idx into caller arcs)
        entry_vertex_of: BTreeMap<usize, usize>, // arc idx -> cycle vertex it enters
    }
    let mut contractions: Vec<Contraction> = Vec::new();
    let selected_final: Option<Vec<usize>>;

    loop {
        // Cheapest in-arc per vertex.
        let mut best: Vec<Option<WArc>> = vec![None; n_cur];
        for a in &cur {
            if a.v == root_cur || a.u == a.v {
                continue;
            }
            let better = match &best[a.v] {
                None => true,
                Some(b) => (a.cost, a.tie) < (b.cost, b.tie),
            };
            if better {
                best[a.v] = Some(*a);
            }
        }
        for (v, b) in best.iter().enumerate() {
            if active[v] && v != root_cur && b.is_none() {
                return None;
            }
        }
        // Cycle detection over the chosen parents.
        let parent: Vec<Option<usize>> =
            best.iter().map(|b| b.as_ref().map(|a| a.u)).collect();
        let cycle = find_cycle(&parent, root_cur, &active);
        match cycle {
            None => {
                let mut sel: Vec<usize> =
                    best.iter().flatten().map(|a| a.idx).collect();
                sel.sort_unstable();
                selected_final = Some(sel);
                break;
            }
            Some(cyc) => {
                let cyc_set: BTreeSet<usize> = cyc.iter().copied().collect();
                let super_node = n_cur;
                let mut entry_vertex_of = BTreeMap::new();
                let mut next: Vec<WArc> = Vec::with_capacity(cur.len());
                for a in &cur {
                    let iu = cyc_set.contains(&a.u);
                    let iv = cyc_set.contains(&a.v);
                    if iu && iv {
                        continue;
                    }
                    let mut na = *a;
                    if iu {
                        na.u = super_node;
                    }
                    if iv {
                        na.cost = a.cost - best[a.v].as_ref().unwrap().cost;
                        entry_vertex_of.insert(a.idx, a.v);
                        na.v = super_node;
                    }
                    next.push(na);
                }
                contractions.push(Contraction {
                    cycle_choice: cyc
                        .iter()
                        .map(|&v| (v, best[v].as_ref().unwrap().idx))
                        .collect(),
                    entry_vertex_of,
                });
                cur = next;
                n_cur += 1;
                for &v in &cyc_set {
                    active[v] = false;
                }
                active.push(true);
                if cyc_set.contains(&root_cur) {
                    root_cur = super_node;
                }
            }
        }
    }

    // Expand contractions in reverse order.
    let mut selected: BTreeSet<usize> = selected_final?.into_iter().collect();
    for c in contractions.iter().rev() {
        // Which selected arc enters this cycle's supernode?
        let entry = selected.iter().copied().find(|ai| c.entry_vertex_of.contains_key(ai));
        let broken_vertex = entry.map(|ai| c.entry_vertex_of[&ai]);
        for &(v, arc_idx) in &c.cycle_choice {
            if Some(v) != broken_vertex {
                selected.insert(arc_idx);
            }
        }
    }
    Some(selected.into_iter().collect())
}

fn find_cycle(parent: &[Option<usize>], root: usize, active: &[bool]) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut color = vec![0u8; n]; // 0 unseen, 1 in progress, 2 done
    for start in 0..n {
        if !active[start] || color[start] != 0 || start == root {
            continue;
        }
        let mut path = Vec::new();
        let mut v = start;
        loop {
            if v == root || color[v] == 2 {
                for &p in &path {
                    color[p] = 2;
                }
                break;
            }
            if color[v] == 1 {
                // Found a cycle; extract it from the path tail.
                let pos = path.iter().position(|&p| p == v).unwrap();
                return Some(path[pos..].to_vec());
            }
            color[v] = 1;
            path.push(v);
            v = parent[v].unwrap();
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Optimal rate bound (Edmonds' arborescence packing theorem)
// ---------------------------------------------------------------------------

/// Min over all non-root GPU vertices v of max-flow(root -> v): the exact
/// optimal fractional packing rate. Serves as the oracle for `pack_mwu`.
pub fn optimal_rate_bound(t: &Topology, root: NodeId) -> Result<f64> {
    let view = plan_view(t);
    view.require_reachable(root)?;
    let pruned = graph::prune_relays(t);
    let mut best = f64::INFINITY;
    for v in pruned.gpus() {
        if v == root {
            continue;
        }
        best = best.min(graph::max_flow(&pruned, root, v, false));
    }
    if best.is_infinite() {
        return Err(Error::validation("topology", "needs at least 2 GPU nodes"));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// MWU packing
// ---------------------------------------------------------------------------

/// Fractional tree packing by multiplicative weight update.
///
/// Width-bounded steps: each iteration routes the bottleneck capacity of the
/// current min-length arborescence and multiplies the lengths of used edges
/// by (1 + eps * c_min / c_e). On termination all weights are scaled
/// uniformly so every capacity constraint holds exactly. The loop also exits
/// early once the exactly-scaled packing certifies (1 - epsilon) of the
/// max-flow bound, which the returned packing itself witnesses.
pub fn pack_mwu(t: &Topology, root: NodeId, cfg: &MwuConfig) -> Result<TreePacking> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 0.5) {
        return Err(Error::validation("epsilon", "must be in (0, 0.5]"));
    }
    if !t.is_gpu(root) {
        return Err(Error::validation("root", format!("node {root} is not a GPU")));
    }
    let view = plan_view(t);
    if view.gpu_idx.len() < 2 {
        return Err(Error::validation("topology", "needs at least 2 GPU nodes"));
    }
    let r = view.require_reachable(root)?;
    let bound = optimal_rate_bound(t, root)?;
    let target = (1.0 - cfg.epsilon) * bound;

    let m = view.arcs.len() as f64;
    let eps = cfg.epsilon / 3.0;
    let delta = (1.0 + eps) * ((1.0 + eps) * m).powf(-1.0 / eps);
    let mut length: Vec<f64> = view.arcs.iter().map(|a| delta / a.cap).collect();
    let mut cost_by_link: Vec<f64> = vec![0.0; t.links.len()];

    let mut raw: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut load: Vec<f64> = vec![0.0; view.arcs.len()];
    let mut raw_total = 0.0;
    let mut iterations = 0usize;

    loop {
        for (i, a) in view.arcs.iter().enumerate() {
            cost_by_link[a.link] = length[i];
        }
        let chosen = cle(view.n, &view.arcs, r, &cost_by_link)
            .ok_or_else(|| Error::Internal("arborescence vanished mid-iteration".into()))?;
        let tree_len: f64 = chosen.iter().map(|&ai| length[ai]).sum();
        if tree_len >= 1.0 {
            break;
        }
        let c_min = chosen
            .iter()
            .map(|&ai| view.arcs[ai].cap)
            .fold(f64::INFINITY, f64::min);
        let key: Vec<usize> = {
            let mut k: Vec<usize> = chosen.iter().map(|&ai| view.arcs[ai].link).collect();
            k.sort_unstable();
            k
        };
        *raw.entry(key).or_insert(0.0) += c_min;
        raw_total += c_min;
        for &ai in &chosen {
            load[ai] += c_min;
            length[ai] *= 1.0 + eps * c_min / view.arcs[ai].cap;
        }
        iterations += 1;
        if iterations > cfg.max_iterations {
            return Err(Error::Internal(format!(
                "MWU exceeded the iteration cap ({}) before convergence",
                cfg.max_iterations
            )));
        }
        if iterations.is_multiple_of(32) {
            let scale = feasibility_scale(&view, &load);
            if raw_total * scale >= target {
                break;
            }
        }
    }

    let scale = feasibility_scale(&view, &load);
    let mut trees = Vec::with_capacity(raw.len());
    let mut weights = Vec::with_capacity(raw.len());
    for (links, w) in raw {
        let w = w * scale;
        if w <= 1e-15 * bound.max(1.0) {
            continue;
        }
        trees.push(Arborescence::from_links(t, root, links));
        weights.push(w);
    }
    let total_rate = weights.iter().sum();
    Ok(TreePacking {
        root,
        topology: t.clone(),
        trees,
        weights,
        total_rate,
        stage: PackingStage::MwuRaw,
        warnings: Vec::new(),
    })
}

/// Largest uniform multiplier that keeps every edge within capacity.
fn feasibility_scale(view: &PlanView, load: &[f64]) -> f64 {
    let mut s = f64::INFINITY;
    for (a, &l) in view.arcs.iter().zip(load) {
        if l > 0.0 {
            s = s.min(a.cap / l);
        }
    }
    if s.is_finite() {
        s
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Integral packing completion (constructive arborescence peeling)
// ---------------------------------------------------------------------------

/// For integer capacities, peel `k = optimal_rate_bound` arc-disjoint
/// spanning arborescences one at a time, keeping the residual graph
/// k-remaining-packable after every arc commitment (checked by max-flow).
/// Used to guarantee the ILP candidate pool can express the integral
/// optimum. Returns None when capacities are not integral or the peel gets
/// stuck (the caller then just proceeds without augmentation).
pub fn integral_packing(t: &Topology, root: NodeId) -> Option<Vec<Arborescence>> {
    let view = plan_view(t);
    let r = view.require_reachable(root).ok()?;
    if view
        .arcs
        .iter()
        .any(|a| (a.cap - a.cap.round()).abs() > 1e-9 || a.cap.round() < 1.0)
    {
        return None;
    }
    let k = optimal_rate_bound(t, root).ok()?;
    if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
        return None;
    }
    let k = k.round() as usize;
    let mut residual: Vec<u32> = view.arcs.iter().map(|a| a.cap.round() as u32).collect();
    let mut trees = Vec::with_capacity(k);
    for peel in 0..k {
        let remaining_after = (k - peel - 1) as f64;
        let tree = peel_one(&view, r, &mut residual, remaining_after)?;
        trees.push(Arborescence::from_links(
            t,
            root,
            tree.iter().map(|&ai| view.arcs[ai].link).collect(),
        ));
    }
    Some(trees)
}

/// Grow one spanning arborescence in the residual graph such that after
/// consuming it, every vertex still has `remaining` arc-disjoint paths from
/// the root. Arc candidates are tried in lex order; an arc is committed only
/// if the connectivity requirement survives.
fn peel_one(
    view: &PlanView,
    root: usize,
    residual: &mut [u32],
    remaining: f64,
) -> Option<Vec<usize>> {
    let mut in_tree = vec![false; view.n];
    in_tree[root] = true;
    let mut covered = 1usize;
    let mut tree: Vec<usize> = Vec::new();
    let mut used = vec![0u32; residual.len()];

    while covered < view.n {
        let mut committed = false;
        let mut candidates: Vec<usize> = (0..view.arcs.len())
            .filter(|&ai| {
                let a = &view.arcs[ai];
                in_tree[a.u] && !in_tree[a.v] && residual[ai] > used[ai]
            })
            .collect();
        candidates.sort_by_key(|&ai| view.arcs[ai].link);
        for ai in candidates {
            used[ai] += 1;
            let v = view.arcs[ai].v;
            in_tree[v] = true;
            if peel_invariant(view, root, residual, &used, &in_tree, remaining) {
                tree.push(ai);
                covered += 1;
                committed = true;
                break;
            }
            in_tree[v] = false;
            used[ai] -= 1;
        }
        if !committed {
            return None;
        }
    }
    for (ai, &u) in used.iter().enumerate() {
        residual[ai] -= u;
    }
    Some(tree)
}

/// Lovász-style safety condition on the residual graph (committed arcs
/// removed). Cut sets avoiding the covered vertex set S still need
/// `remaining + 1` in-arcs (one for finishing the current tree, which grows
/// out of S, plus the future trees); cut sets meeting S need `remaining`.
/// Per Menger that is: max-flow from the S-contracted source >= remaining+1
/// for every uncovered vertex, and max-flow from the root >= remaining for
/// every vertex.
fn peel_invariant(
    view: &PlanView,
    root: usize,
    residual: &[u32],
    used: &[u32],
    in_tree: &[bool],
    remaining: f64,
) -> bool {
    let arcs: Vec<(usize, usize, f64)> = view
        .arcs
        .iter()
        .enumerate()
        .filter(|(ai, _)| residual[*ai] > used[*ai])
        .map(|(ai, a)| (a.u, a.v, (residual[ai] - used[ai]) as f64))
        .collect();
    if remaining > 0.0 {
        for v in 0..view.n {
            if v == root {
                continue;
            }
            if graph::max_flow_arcs(view.n, &arcs, root, v) + 1e-9 < remaining {
                return false;
            }
        }
    }
    // Contract S into a super-source for the current tree's completion.
    let src = view.n;
    let contracted: Vec<(usize, usize, f64)> = arcs
        .iter()
        .filter_map(|&(u, v, c)| {
            let cu = if in_tree[u] { src } else { u };
            let cv = if in_tree[v] { src } else { v };
            if cu == cv {
                None
            } else {
                Some((cu, cv, c))
            }
        })
        .collect();
    for (v, covered) in in_tree.iter().enumerate() {
        if *covered {
            continue;
        }
        if graph::max_flow_arcs(view.n + 1, &contracted, src, v) + 1e-9 < remaining + 1.0 {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// ILP refinement
// ---------------------------------------------------------------------------

/// Minimize the number of trees: restrict weights to a grid (level 0 uses
/// integers), maximize the total rate with an exact branch-and-bound, and
/// relax the grid in halving steps (down to 1/16) until the achieved rate is
/// within `gap` of the MWU reference. Among rate-optimal solutions the
/// fewest trees win; remaining ties go to the lexicographically first
/// selection.
pub fn refine_ilp(p: &TreePacking, t: &Topology, gap: f64) -> Result<TreePacking> {
    if p.stage != PackingStage::MwuRaw {
        return Err(Error::validation("packing", "refine_ilp expects an MWU_RAW packing"));
    }
    if !(gap > 0.0 && gap < 0.5) {
        return Err(Error::validation("gap", "must be in (0, 0.5)"));
    }
    if p.trees.is_empty() {
        return Err(Error::validation("packing", "candidate set is empty"));
    }
    let reference = p.total_rate;
    let rate_cap = optimal_rate_bound(t, p.root)?;

    let mut pool: Vec<Arborescence> = p.trees.clone();
    let mut augmented = false;
    let mut best: Option<(f64, Vec<Arborescence>, Vec<f64>)> = None;

    // Weight quantum: the smallest candidate bottleneck capacity, so the
    // level-0 grid is the integral {0, 1} formulation on unit-capacity
    // graphs and stays binary on uniform-capacity hardware.
    let base_grid = pool
        .iter()
        .map(|a| {
            a.links
                .iter()
                .map(|&li| t.links[li].gbps)
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    let grids: Vec<f64> = (0..5).map(|l| base_grid / (1 << l) as f64).collect();
    let mut gi = 0;
    while gi < grids.len() {
        let g = grids[gi];
        let (rate, sel) = solve_grid(&pool, t, g, rate_cap);
        let better = match &best {
            Some((r, trees, _)) => {
                rate > r + 1e-12 || (rate > r - 1e-12 && sel.len() < trees.len())
            }
            None => true,
        };
        if better {
            let trees: Vec<Arborescence> = sel.iter().map(|&(i, _)| pool[i].clone()).collect();
            let weights: Vec<f64> = sel.iter().map(|&(_, units)| units as f64 * g).collect();
            best = Some((rate, trees, weights));
        }
        if rate + CAP_TOLERANCE >= (1.0 - gap) * reference {
            break;
        }
        // Before relaxing the grid, try once to complete the candidate pool
        // with an exact integral packing (helps when the MWU trees do not
        // contain a disjoint family realizing the integral optimum).
        if !augmented {
            augmented = true;
            if let Some(extra) = integral_packing(t, p.root) {
                let known: BTreeSet<Vec<usize>> =
                    pool.iter().map(|a| a.links.clone()).collect();
                let mut added = false;
                for a in extra {
                    if !known.contains(&a.links) {
                        pool.push(a);
                        added = true;
                    }
                }
                if added {
                    pool.sort_by(|a, b| a.links.cmp(&b.links));
                    continue; // re-solve the same grid with the richer pool
                }
            }
        }
        gi += 1;
    }

    let (rate, trees, weights) = best.unwrap();
    let mut warnings = Vec::new();
    if rate + CAP_TOLERANCE < (1.0 - gap) * reference {
        warnings.push(format!(
            "rate {rate:.6} is below (1-gap) * MWU reference {reference:.6} even at the finest grid"
        ));
    }
    let total_rate = weights.iter().sum();
    Ok(TreePacking {
        root: p.root,
        topology: t.clone(),
        trees,
        weights,
        total_rate,
        stage: PackingStage::IlpRefined,
        warnings,
    })
}

/// Exact two-phase branch-and-bound over weights in multiples of `g`.
/// Phase A maximizes the rate; phase B minimizes the tree count at that
/// rate. Returns (rate, selection as (pool index, units)).
fn solve_grid(
    pool: &[Arborescence],
    t: &Topology,
    g: f64,
    rate_cap: f64,
) -> (f64, Vec<(usize, u32)>) {
    // Edge universe: only links used by any candidate matter.
    let mut edge_ids: Vec<usize> = pool.iter().flat_map(|a| a.links.iter().copied()).collect();
    edge_ids.sort_unstable();
    edge_ids.dedup();
    let eidx: BTreeMap<usize, usize> =
        edge_ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let caps_units: Vec<u32> = edge_ids
        .iter()
        .map(|&l| ((t.links[l].gbps + CAP_TOLERANCE) / g).floor() as u32)
        .collect();
    let cand_edges: Vec<Vec<usize>> = pool
        .iter()
        .map(|a| a.links.iter().map(|l| eidx[l]).collect())
        .collect();
    let max_units: Vec<u32> = cand_edges
        .iter()
        .map(|es| es.iter().map(|&e| caps_units[e]).min().unwrap_or(0))
        .collect();
    let cap_units_total = ((rate_cap + CAP_TOLERANCE) / g).floor() as u64;

    // Phase A: max sum of units.
    struct SearchA<'a> {
        cand_edges: &'a [Vec<usize>],
        max_units: &'a [u32],
        cap_units_total: u64,
        best: u64,
        residual: Vec<u32>,
        done: bool,
    }
    impl SearchA<'_> {
        fn feasible_units(&self, i: usize) -> u32 {
            let by_cap = self.cand_edges[i]
                .iter()
                .map(|&e| self.residual[e])
                .min()
                .unwrap_or(0);
            by_cap.min(self.max_units[i])
        }
        fn run(&mut self, i: usize, cur: u64) {
            if self.done {
                return;
            }
            if cur > self.best {
                self.best = cur;
                if self.best >= self.cap_units_total {
                    self.done = true;
                    return;
                }
            }
            if i == self.cand_edges.len() {
                return;
            }
            // Optimistic bound: every remaining candidate at its own cap.
            let mut ub = cur;
            for j in i..self.cand_edges.len() {
                ub += self.feasible_units(j) as u64;
                if ub > self.cap_units_total {
                    ub = self.cap_units_total;
                    break;
                }
            }
            if ub <= self.best {
                return;
            }
            let take_max = self.feasible_units(i);
            let mut x = take_max;
            loop {
                for &e in &self.cand_edges[i] {
                    self.residual[e] -= x;
                }
                self.run(i + 1, cur + x as u64);
                for &e in &self.cand_edges[i] {
                    self.residual[e] += x;
                }
                if self.done || x == 0 {
                    break;
                }
                x -= 1;
            }
        }
    }
    let mut a = SearchA {
        cand_edges: &cand_edges,
        max_units: &max_units,
        cap_units_total,
        best: 0,
        residual: caps_units.clone(),
        done: false,
    };
    a.run(0, 0);
    let rate_units = a.best;
    if rate_units == 0 {
        return (0.0, Vec::new());
    }

    // Phase B: fewest trees achieving rate_units; first solution found in
    // candidate order with units tried descending is the tie-break winner.
    struct SearchB<'a> {
        cand_edges: &'a [Vec<usize>],
        max_units: &'a [u32],
        target: u64,
        best_count: usize,
        best_sel: Vec<(usize, u32)>,
        residual: Vec<u32>,
        sel: Vec<(usize, u32)>,
        // Descending per-candidate unit caps, for the count lower bound.
        sorted_caps: Vec<u32>,
    }
    impl SearchB<'_> {
        fn feasible_units(&self, i: usize) -> u32 {
            let by_cap = self.cand_edges[i]
                .iter()
                .map(|&e| self.residual[e])
                .min()
                .unwrap_or(0);
            by_cap.min(self.max_units[i])
        }
        fn min_trees_for(&self, mut need: u64) -> usize {
            let mut c = 0;
            for &u in &self.sorted_caps {
                if need == 0 {
                    break;
                }
                need = need.saturating_sub(u as u64);
                c += 1;
            }
            if need > 0 {
                usize::MAX
            } else {
                c
            }
        }
        fn run(&mut self, i: usize, cur: u64) {
            let need = self.target - cur;
            if need == 0 {
                if self.sel.len() < self.best_count {
                    self.best_count = self.sel.len();
                    self.best_sel = self.sel.clone();
                }
                return;
            }
            if i == self.cand_edges.len() {
                return;
            }
            let lb = self.min_trees_for(need);
            if lb == usize::MAX || self.sel.len() + lb >= self.best_count {
                return;
            }
            let take_max = (self.feasible_units(i) as u64).min(need) as u32;
            let mut x = take_max;
            loop {
                if x > 0 {
                    for &e in &self.cand_edges[i] {
                        self.residual[e] -= x;
                    }
                    self.sel.push((i, x));
                    self.run(i + 1, cur + x as u64);
                    self.sel.pop();
                    for &e in &self.cand_edges[i] {
                        self.residual[e] += x;
                    }
                } else {
                    self.run(i + 1, cur);
                }
                if x == 0 {
                    break;
                }
                x -= 1;
            }
        }
    }
    let mut sorted_caps: Vec<u32> = max_units.clone();
    sorted_caps.sort_unstable_by(|x, y| y.cmp(x));
    let mut b = SearchB {
        cand_edges: &cand_edges,
        max_units: &max_units,
        target: rate_units,
        best_count: usize::MAX,
        best_sel: Vec::new(),
        residual: caps_units.clone(),
        sel: Vec::new(),
        sorted_caps,
    };
    b.run(0, 0);
    (rate_units as f64 * g, b.best_sel)
}

// ---------------------------------------------------------------------------
// DOT emission
// ---------------------------------------------------------------------------

/// Graphviz rendering of a packing: topology links in gray, tree edges
/// colored per tree and labeled with the tree's weight.
pub fn to_dot(t: &Topology, p: &TreePacking) -> String {
    const COLORS: [&str; 8] =
        ["red", "blue", "darkgreen", "orange", "purple", "brown", "cyan3", "magenta"];
    let mut s = String::from("digraph packing {\n");
    for n in &t.nodes {
        let shape = match n.kind {
            NodeKind::Gpu => "circle",
            NodeKind::Switch => "box",
            NodeKind::Nic => "diamond",
        };
        s.push_str(&format!("  n{} [label=\"{}\", shape={}];\n", n.id, n.id, shape));
    }
    let mut used: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (ti, tree) in p.trees.iter().enumerate() {
        for &li in &tree.links {
            used.entry(li).or_default().push(ti);
        }
    }
    for (li, l) in t.links.iter().enumerate() {
        match used.get(&li) {
            Some(tis) => {
                for &ti in tis {
                    s.push_str(&format!(
                        "  n{} -> n{} [color={}, label=\"t{} w={:.3}\"];\n",
                        l.src,
                        l.dst,
                        COLORS[ti % COLORS.len()],
                        ti,
                        p.weights[ti]
                    ));
                }
            }
            None => {
                if l.class == LinkClass::Nvlink {
                    s.push_str(&format!(
                        "  n{} -> n{} [color=gray80, style=dotted];\n",
                        l.src, l.dst
                    ));
                }
            }
        }
    }
    s.push_str("}\n");
    s
}
