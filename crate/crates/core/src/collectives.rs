//! Schedule generation: turn tree packings into chunked, pipelined transfer
//! schedules for the collective primitives.
//!
//! A schedule is a DAG of [`TransferOp`]s assigned to logical streams. Ops
//! on one stream execute in list order; cross-stream ordering exists only
//! through `depends_on`. That structure is the concurrency contract handed
//! to the simulator (or to a real executor).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::topology::{self, LinkClass, NodeId, Topology};
use crate::treegen::{self, Arborescence, MwuConfig, TreePacking};
use crate::{Error, Result};

/// Element granularity for chunk/split alignment; reductions never split an
/// element.
pub const ELEMENT_BYTES: u64 = 4;

/// Default latency of toggling peer access when switching between NVLink
/// and PCIe paths, in seconds. A calibration constant; measured values vary
/// with the number of GPUs.
pub const DEFAULT_T_DPA: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Broadcast,
    Gather,
    AllReduce,
    AllGather,
}

impl Primitive {
    pub fn parse(s: &str) -> Option<Primitive> {
        match s.to_ascii_lowercase().as_str() {
            "broadcast" | "bcast" => Some(Primitive::Broadcast),
            "gather" => Some(Primitive::Gather),
            "allreduce" | "all_reduce" | "all-reduce" => Some(Primitive::AllReduce),
            "allgather" | "all_gather" | "all-gather" => Some(Primitive::AllGather),
            _ => None,
        }
    }

    /// Rooted primitives require a root in the request.
    pub fn is_rooted(self) -> bool {
        matches!(self, Primitive::Broadcast | Primitive::Gather)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
    Prod,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectiveRequest {
    pub primitive: Primitive,
    /// Required for Broadcast/Gather, ignored otherwise.
    pub root: Option<NodeId>,
    /// Total payload in bytes.
    pub data_bytes: u64,
    /// AllReduce only.
    pub reduce_op: Option<ReduceOp>,
}

impl CollectiveRequest {
    pub fn validate(&self) -> Result<()> {
        if self.data_bytes == 0 {
            return Err(Error::validation("data_bytes", "payload must be positive"));
        }
        if self.primitive.is_rooted() && self.root.is_none() {
            return Err(Error::validation("root", "rooted primitive needs a root"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Copy,
    /// Carries a partial reduction toward a root; the receiving GPU folds
    /// the payload into its accumulator.
    ReduceForward,
    /// Zero-byte combine at a node once all inputs for a chunk arrived.
    LocalReduce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferOp {
    pub id: usize,
    pub kind: OpKind,
    /// Index into the topology link list; None for LocalReduce.
    pub link: Option<usize>,
    pub src: NodeId,
    pub dst: NodeId,
    pub tree_id: u32,
    pub chunk_id: u32,
    pub bytes: u64,
    pub stream_id: u32,
    pub depends_on: Vec<usize>,
    /// Hop distance of the link from its tree root (stream-reuse key).
    pub hop: u32,
    /// Earliest simulated start time in seconds (hybrid PCIe delay).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub min_start: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

/// One tree as used by a schedule, with the rate weight assigned to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleTree {
    pub root: NodeId,
    pub links: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectiveSchedule {
    pub primitive: Primitive,
    pub data_bytes: u64,
    pub chunk_bytes: u64,
    pub element_bytes: u64,
    pub trees: Vec<ScheduleTree>,
    /// Bytes assigned to each tree; sums to `data_bytes` per phase.
    pub data_split: Vec<u64>,
    pub ops: Vec<TransferOp>,
    pub n_streams: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CollectiveSchedule {
    /// Transfer ops (link-bearing), excluding LocalReduce bookkeeping.
    pub fn transfer_ops(&self) -> impl Iterator<Item = &TransferOp> {
        self.ops.iter().filter(|o| o.link.is_some())
    }
}

// ---------------------------------------------------------------------------
// Split and chunk helpers
// ---------------------------------------------------------------------------

/// Weight-proportional byte split, element-aligned, largest remainder on the
/// element units, any sub-element residue absorbed by the last share.
/// Guarantees the shares sum to `total` exactly.
pub fn weighted_split(total: u64, weights: &[f64], element: u64) -> Vec<u64> {
    assert!(!weights.is_empty());
    let wsum: f64 = weights.iter().sum();
    let units = total / element;
    let mut shares: Vec<u64> = Vec::with_capacity(weights.len());
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (i, &w) in weights.iter().enumerate() {
        let exact = units as f64 * (w / wsum);
        let floor = exact.floor() as u64;
        shares.push(floor);
        assigned += floor;
        fracs.push((exact - floor as f64, i));
    }
    let mut left = units.saturating_sub(assigned);
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut fi = 0;
    while left > 0 {
        shares[fracs[fi % fracs.len()].1] += 1;
        left -= 1;
        fi += 1;
    }
    let mut out: Vec<u64> = shares.iter().map(|&s| s * element).collect();
    let residue = total - out.iter().sum::<u64>();
    if let Some(last) = out.last_mut() {
        *last += residue;
    }
    out
}

/// Chunk sizes for one share: full chunks plus a final remainder chunk.
fn chunk_sizes(share: u64, chunk: u64) -> Vec<u64> {
    if share == 0 {
        return Vec::new();
    }
    let n = share.div_ceil(chunk);
    (0..n)
        .map(|c| if c + 1 < n { chunk } else { share - (n - 1) * chunk })
        .collect()
}

fn normalize_chunk(chunk_bytes: u64) -> u64 {
    let c = chunk_bytes.max(ELEMENT_BYTES);
    c - c % ELEMENT_BYTES
}

/// Reverse link of `link`: parallel reverse links are matched by rank so two
/// parallel edges map to two distinct reverse edges.
fn reverse_link(t: &Topology, link: usize) -> Result<usize> {
    let l = t.links[link];
    let rank = t.links[..link]
        .iter()
        .filter(|o| o.src == l.src && o.dst == l.dst && o.class == l.class)
        .count();
    let mut seen = 0;
    for (i, o) in t.links.iter().enumerate() {
        if o.src == l.dst && o.dst == l.src && o.class == l.class {
            if seen == rank {
                return Ok(i);
            }
            seen += 1;
        }
    }
    Err(Error::Plan(format!(
        "missing reverse link for {} -> {} (class {:?})",
        l.src, l.dst, l.class
    )))
}

// ---------------------------------------------------------------------------
// Schedule builder
// ---------------------------------------------------------------------------

/// Accumulates ops with automatic stream assignment. Streams are keyed by
/// (tree, link, phase) so the reduce and broadcast passes of an AllReduce
/// never share a queue even when they touch the same physical link.
struct Builder {
    ops: Vec<TransferOp>,
    streams: BTreeMap<(u32, usize, u8), u32>,
    local_streams: BTreeMap<(u32, NodeId), u32>,
    next_stream: u32,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            ops: Vec::new(),
            streams: BTreeMap::new(),
            local_streams: BTreeMap::new(),
            next_stream: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        t: &Topology,
        kind: OpKind,
        link: usize,
        tree: u32,
        chunk: u32,
        bytes: u64,
        deps: Vec<usize>,
        hop: u32,
        phase: u8,
    ) -> usize {
        let id = self.ops.len();
        let next = &mut self.next_stream;
        let stream = *self.streams.entry((tree, link, phase)).or_insert_with(|| {
            let s = *next;
            *next += 1;
            s
        });
        let l = t.links[link];
        self.ops.push(TransferOp {
            id,
            kind,
            link: Some(link),
            src: l.src,
            dst: l.dst,
            tree_id: tree,
            chunk_id: chunk,
            bytes,
            stream_id: stream,
            depends_on: deps,
            hop,
            min_start: 0.0,
        });
        id
    }

    fn push_local(&mut self, node: NodeId, tree: u32, chunk: u32, deps: Vec<usize>) -> usize {
        let id = self.ops.len();
        let next = &mut self.next_stream;
        let stream = *self.local_streams.entry((tree, node)).or_insert_with(|| {
            let s = *next;
            *next += 1;
            s
        });
        self.ops.push(TransferOp {
            id,
            kind: OpKind::LocalReduce,
            link: None,
            src: node,
            dst: node,
            tree_id: tree,
            chunk_id: chunk,
            bytes: 0,
            stream_id: stream,
            depends_on: deps,
            hop: 0,
            min_start: 0.0,
        });
        id
    }
}

fn schedule_trees(p: &TreePacking) -> Vec<ScheduleTree> {
    p.trees
        .iter()
        .zip(&p.weights)
        .map(|(a, &w)| ScheduleTree { root: a.root, links: a.links.clone(), weight: w })
        .collect()
}

/// Tree links in BFS order with the hop distance of each link's source.
fn tree_hops(t: &Topology, a: &Arborescence) -> Vec<(usize, u32)> {
    let mut depth: BTreeMap<NodeId, u32> = BTreeMap::new();
    depth.insert(a.root, 0);
    a.links_bfs(t)
        .into_iter()
        .map(|li| {
            let l = t.links[li];
            let d = *depth.get(&l.src).unwrap_or(&0);
            depth.insert(l.dst, d + 1);
            (li, d)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Broadcast / Gather
// ---------------------------------------------------------------------------

/// Chunked pipelined broadcast over a packing: chunk c on edge (u -> v)
/// depends on chunk c's arrival at u.
pub fn plan_broadcast(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
) -> Result<CollectiveSchedule> {
    plan_one_to_many(p, req, chunk_bytes, Primitive::Broadcast)
}

/// Gather reverses every edge of the broadcast schedule; chunks flow from
/// the leaves toward the root, no reduction applied.
pub fn plan_gather(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
) -> Result<CollectiveSchedule> {
    plan_one_to_many(p, req, chunk_bytes, Primitive::Gather)
}

fn plan_one_to_many(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
    want: Primitive,
) -> Result<CollectiveSchedule> {
    req.validate()?;
    if req.primitive != want {
        return Err(Error::validation("primitive", format!("expected {want:?}")));
    }
    if p.trees.is_empty() {
        return Err(Error::Plan("packing has zero trees".into()));
    }
    if req.root != Some(p.root) {
        return Err(Error::Plan(format!(
            "root mismatch: request {:?}, packing rooted at {}",
            req.root, p.root
        )));
    }
    let topo = &p.topology;
    let chunk = normalize_chunk(chunk_bytes);
    let split = weighted_split(req.data_bytes, &p.weights, ELEMENT_BYTES);
    let mut b = Builder::new();

    for (ti, tree) in p.trees.iter().enumerate() {
        let hops = tree_hops(topo, tree);
        let chunks = chunk_sizes(split[ti], chunk);
        for (c, &bytes) in chunks.iter().enumerate() {
            match want {
                Primitive::Broadcast => {
                    // Arrival op of this chunk at each node.
                    let mut arrived: BTreeMap<NodeId, usize> = BTreeMap::new();
                    for &(li, hop) in &hops {
                        let l = topo.links[li];
                        let deps = arrived.get(&l.src).map(|&d| vec![d]).unwrap_or_default();
                        let id =
                            b.push(topo, OpKind::Copy, li, ti as u32, c as u32, bytes, deps, hop, 0);
                        arrived.insert(l.dst, id);
                    }
                }
                Primitive::Gather => {
                    // Reverse edges, leaf-to-root: deepest hops first so
                    // each op can depend on its children's forwards.
                    let mut sent: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
                    for &(li, hop) in hops.iter().rev() {
                        let l = topo.links[li];
                        let rli = reverse_link(topo, li)?;
                        let deps = sent.get(&l.dst).cloned().unwrap_or_default();
                        let id = b.push(
                            topo,
                            OpKind::Copy,
                            rli,
                            ti as u32,
                            c as u32,
                            bytes,
                            deps,
                            hop,
                            0,
                        );
                        sent.entry(l.src).or_default().push(id);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    Ok(CollectiveSchedule {
        primitive: want,
        data_bytes: req.data_bytes,
        chunk_bytes: chunk,
        element_bytes: ELEMENT_BYTES,
        trees: schedule_trees(p),
        data_split: split,
        ops: b.ops,
        n_streams: b.next_stream,
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// AllReduce / AllGather
// ---------------------------------------------------------------------------

/// AllReduce over bidirectional links: a reduce pass toward the root on the
/// reversed tree edges, then a broadcast pass outward on the forward edges.
/// Broadcast of chunk c begins when the root has fully reduced chunk c.
pub fn plan_allreduce(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
) -> Result<CollectiveSchedule> {
    plan_many_to_many(p, req, chunk_bytes, Primitive::AllReduce)
}

/// AllGather: same two-pass structure with reduction replaced by
/// concatenation. Inbound bytes grow toward the root; the return pass sends
/// each subtree exactly the slices it lacks.
pub fn plan_allgather(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
) -> Result<CollectiveSchedule> {
    plan_many_to_many(p, req, chunk_bytes, Primitive::AllGather)
}

fn plan_many_to_many(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
    want: Primitive,
) -> Result<CollectiveSchedule> {
    req.validate()?;
    if req.primitive != want {
        return Err(Error::validation("primitive", format!("expected {want:?}")));
    }
    if p.trees.is_empty() {
        return Err(Error::Plan("packing has zero trees".into()));
    }
    let topo = &p.topology;
    let chunk = normalize_chunk(chunk_bytes);
    let split = weighted_split(req.data_bytes, &p.weights, ELEMENT_BYTES);
    let gpus = topo.gpus();
    let mut b = Builder::new();

    for (ti, tree) in p.trees.iter().enumerate() {
        match want {
            Primitive::AllReduce => {
                allreduce_tree(&mut b, topo, tree, ti as u32, split[ti], chunk)?;
            }
            Primitive::AllGather => {
                allgather_tree(&mut b, topo, tree, ti as u32, split[ti], chunk, &gpus)?;
            }
            _ => unreachable!(),
        }
    }
    Ok(CollectiveSchedule {
        primitive: want,
        data_bytes: req.data_bytes,
        chunk_bytes: chunk,
        element_bytes: ELEMENT_BYTES,
        trees: schedule_trees(p),
        data_split: split,
        ops: b.ops,
        n_streams: b.next_stream,
        warnings: Vec::new(),
    })
}

/// (gpu, nearest GPU ancestor, reversed physical path with hop tags).
type GpuPath = (NodeId, NodeId, Vec<(usize, u32)>);

fn allreduce_tree(
    b: &mut Builder,
    topo: &Topology,
    tree: &Arborescence,
    ti: u32,
    share: u64,
    chunk: u64,
) -> Result<()> {
    let hops = tree_hops(topo, tree);
    let chunks = chunk_sizes(share, chunk);

    // Reduction happens at GPUs only; relays relay. Each GPU's partial
    // travels the reversed physical path up to its nearest GPU ancestor,
    // which folds it. Build (gpu, logical parent, reversed path) triples.
    let parent_link: BTreeMap<NodeId, usize> =
        tree.links.iter().map(|&li| (topo.links[li].dst, li)).collect();
    let depth: BTreeMap<NodeId, u32> = {
        let mut d = BTreeMap::new();
        d.insert(tree.root, 0);
        for &(li, hop) in &hops {
            d.insert(topo.links[li].dst, hop + 1);
        }
        d
    };
    let hop_of: BTreeMap<usize, u32> = hops.iter().copied().collect();
    let mut gpu_paths: Vec<GpuPath> = Vec::new();
    for v in tree.vertices(topo) {
        if v == tree.root || !topo.is_gpu(v) {
            continue;
        }
        let mut path = Vec::new();
        let mut x = v;
        let parent = loop {
            let li = *parent_link
                .get(&x)
                .ok_or_else(|| Error::Internal("tree vertex without parent".into()))?;
            path.push((reverse_link(topo, li)?, hop_of[&li]));
            let up = topo.links[li].src;
            if topo.is_gpu(up) {
                break up;
            }
            x = up;
        };
        gpu_paths.push((v, parent, path));
    }
    // Deepest GPUs first so parents can depend on children's arrivals.
    gpu_paths.sort_by_key(|(v, ..)| (std::cmp::Reverse(depth[v]), *v));

    for (c, &bytes) in chunks.iter().enumerate() {
        // RF arrivals into each GPU (its logical children's partials).
        let mut inbox: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (g, parent, path) in &gpu_paths {
            let mut prev: Option<usize> = None;
            for &(rli, hop) in path {
                let receiver = topo.links[rli].dst;
                let kind =
                    if topo.is_gpu(receiver) { OpKind::ReduceForward } else { OpKind::Copy };
                let deps = match prev {
                    Some(p) => vec![p],
                    None => inbox.get(g).cloned().unwrap_or_default(),
                };
                prev = Some(b.push(topo, kind, rli, ti, c as u32, bytes, deps, hop, 1));
            }
            inbox.entry(*parent).or_default().push(prev.unwrap());
        }
        let root_deps = inbox.get(&tree.root).cloned().unwrap_or_default();
        let reduced = b.push_local(tree.root, ti, c as u32, root_deps);
        // Broadcast pass outward on the forward edges.
        let mut arrived: BTreeMap<NodeId, usize> = BTreeMap::new();
        for &(li, hop) in &hops {
            let l = topo.links[li];
            let deps = match arrived.get(&l.src) {
                Some(&d) => vec![d],
                None => vec![reduced],
            };
            let id = b.push(topo, OpKind::Copy, li, ti, c as u32, bytes, deps, hop, 2);
            arrived.insert(l.dst, id);
        }
    }
    Ok(())
}

fn allgather_tree(
    b: &mut Builder,
    topo: &Topology,
    tree: &Arborescence,
    ti: u32,
    share: u64,
    chunk: u64,
    gpus: &[NodeId],
) -> Result<()> {
    let children = tree.children(topo);
    let hops = tree_hops(topo, tree);
    // Per-GPU contribution slice of this tree's share.
    let contrib = weighted_split(share, &vec![1.0; gpus.len()], ELEMENT_BYTES);
    let slice: BTreeMap<NodeId, u64> =
        gpus.iter().copied().zip(contrib.iter().copied()).collect();

    fn subtree_bytes(
        topo: &Topology,
        node: NodeId,
        children: &BTreeMap<NodeId, Vec<usize>>,
        slice: &BTreeMap<NodeId, u64>,
    ) -> u64 {
        let own = slice.get(&node).copied().unwrap_or(0);
        own + children
            .get(&node)
            .map(|ls| {
                ls.iter()
                    .map(|&li| subtree_bytes(topo, topo.links[li].dst, children, slice))
                    .sum()
            })
            .unwrap_or(0)
    }

    // Inward pass: node v forwards its subtree's slices to its parent in
    // waves; wave c depends on wave c of each child where present.
    let mut up_waves: BTreeMap<NodeId, Vec<Vec<usize>>> = BTreeMap::new();
    let mut up_out: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for &(li, hop) in hops.iter().rev() {
        let l = topo.links[li];
        let rli = reverse_link(topo, li)?;
        let total = subtree_bytes(topo, l.dst, &children, &slice);
        let waves = chunk_sizes(total, chunk);
        let inbound = up_waves.get(&l.dst).cloned().unwrap_or_default();
        let mut outs = Vec::with_capacity(waves.len());
        for (c, &bytes) in waves.iter().enumerate() {
            let mut deps: Vec<usize> = Vec::new();
            match inbound.get(c) {
                Some(per_wave) => deps.extend(per_wave.iter().copied()),
                None => {
                    if let Some(last) = inbound.last() {
                        deps.extend(last.iter().copied());
                    }
                }
            }
            let id = b.push(topo, OpKind::Copy, rli, ti, c as u32, bytes, deps, hop, 1);
            outs.push(id);
        }
        let entry = up_waves.entry(l.src).or_default();
        for (c, &id) in outs.iter().enumerate() {
            if entry.len() <= c {
                entry.resize(c + 1, Vec::new());
            }
            entry[c].push(id);
        }
        up_out.insert(l.dst, outs);
    }

    // Outward pass: link (u -> v) carries exactly what v's subtree lacks.
    let mut down_arr: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    for &(li, hop) in &hops {
        let l = topo.links[li];
        let missing = share - subtree_bytes(topo, l.dst, &children, &slice);
        let waves = chunk_sizes(missing, chunk);
        let parent_ops = down_arr.get(&l.src).cloned().unwrap_or_default();
        // Data from u's other children must have flowed inward through u.
        let sibling_ops: Vec<usize> = children
            .get(&l.src)
            .map(|ls| {
                ls.iter()
                    .filter(|&&oli| oli != li)
                    .filter_map(|&oli| up_out.get(&topo.links[oli].dst))
                    .flatten()
                    .copied()
                    .collect()
            })
            .unwrap_or_default();
        let mut outs = Vec::with_capacity(waves.len());
        for (c, &bytes) in waves.iter().enumerate() {
            let mut deps: Vec<usize> = Vec::new();
            if !parent_ops.is_empty() {
                deps.push(parent_ops[c.min(parent_ops.len() - 1)]);
            }
            if c == 0 {
                deps.extend(sibling_ops.iter().copied());
            }
            let id = b.push(topo, OpKind::Copy, li, ti, c as u32, bytes, deps, hop, 2);
            outs.push(id);
        }
        down_arr.insert(l.dst, outs);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Hybrid NVLink + PCIe
// ---------------------------------------------------------------------------

/// Byte split solving T_PCIe + T_dpa = T_NVL: proportional to the side
/// rates, shifted by the peer-access toggle latency, clamped at zero.
/// Rates are GB/s (1e9 bytes per second).
pub fn hybrid_split(total: u64, bw_pcie: f64, bw_nvlink: f64, t_dpa: f64) -> (u64, u64) {
    let denom = bw_pcie + bw_nvlink;
    let raw = total as f64 * bw_pcie / denom - t_dpa * 1e9 * bw_pcie * bw_nvlink / denom;
    let pcie = raw.max(0.0).min(total as f64) as u64;
    let pcie = pcie - pcie % ELEMENT_BYTES;
    (pcie, total - pcie)
}

/// Plan over both link classes: two independent packings (NVLink-only and
/// PCIe-only), bytes split per the equal-finish-time rule, the PCIe portion
/// delayed by `t_dpa`. Falls back to NVLink-only with a warning when the
/// PCIe subgraph cannot be packed.
pub fn plan_hybrid(
    t: &Topology,
    req: &CollectiveRequest,
    cfg: &MwuConfig,
    t_dpa: f64,
    chunk_bytes: u64,
) -> Result<CollectiveSchedule> {
    req.validate()?;
    if t_dpa < 0.0 {
        return Err(Error::validation("t_dpa", "must be nonnegative"));
    }
    let nv = graph_class(t, LinkClass::Nvlink);
    let pcie = graph_class(t, LinkClass::Pcie);
    let nv_pack = pack_for(&nv, req, cfg)?;
    let pcie_pack = pack_for(&pcie, req, cfg).ok();

    let mut warnings = Vec::new();
    let (d_pcie, d_nvl) = match &pcie_pack {
        Some(pp) => hybrid_split(req.data_bytes, pp.total_rate, nv_pack.total_rate, t_dpa),
        None => {
            warnings.push("PCIe subgraph not packable; NVLink-only schedule".into());
            (0, req.data_bytes)
        }
    };

    let mut sched = plan_primitive(&nv_pack, req, chunk_bytes, d_nvl)?;
    remap_links(&mut sched, &topology::filter_index_map(t, &nv));
    if d_pcie > 0 {
        let pp = pcie_pack.as_ref().unwrap();
        let mut pcie_sched = plan_primitive(pp, req, chunk_bytes, d_pcie)?;
        remap_links(&mut pcie_sched, &topology::filter_index_map(t, &pcie));
        merge_delayed(&mut sched, pcie_sched, t_dpa);
    }
    sched.data_bytes = req.data_bytes;
    sched.warnings.extend(warnings);
    Ok(sched)
}

/// Rewrite link indices of a schedule planned on a filtered topology so they
/// refer to the parent topology.
fn remap_links(sched: &mut CollectiveSchedule, map: &[usize]) {
    for op in sched.ops.iter_mut() {
        if let Some(li) = op.link {
            op.link = Some(map[li]);
        }
    }
    for tree in sched.trees.iter_mut() {
        for li in tree.links.iter_mut() {
            *li = map[*li];
        }
    }
}

fn graph_class(t: &Topology, class: LinkClass) -> Topology {
    topology::filter_to(t, class)
}

/// Pack and refine on one link class, choosing the root: the request root
/// for rooted primitives, otherwise the GPU maximizing the packing rate
/// (ties to the lowest id).
fn pack_for(t: &Topology, req: &CollectiveRequest, cfg: &MwuConfig) -> Result<TreePacking> {
    let root = match req.root {
        Some(r) if req.primitive.is_rooted() => r,
        _ => best_allreduce_root(t)?,
    };
    let raw = treegen::pack_mwu(t, root, cfg)?;
    treegen::refine_ilp(&raw, t, 0.05)
}

/// Evaluate all GPU roots by the exact packing bound; highest rate wins,
/// ties to the lowest id.
pub fn best_allreduce_root(t: &Topology) -> Result<NodeId> {
    let mut best: Option<(f64, NodeId)> = None;
    for g in t.gpus() {
        if let Ok(rate) = treegen::optimal_rate_bound(t, g) {
            let better = match best {
                Some((br, _)) => rate > br + 1e-12,
                None => true,
            };
            if better {
                best = Some((rate, g));
            }
        }
    }
    best.map(|(_, g)| g)
        .ok_or_else(|| Error::Disconnected("no GPU root reaches all GPUs".into()))
}

fn plan_primitive(
    p: &TreePacking,
    req: &CollectiveRequest,
    chunk_bytes: u64,
    bytes: u64,
) -> Result<CollectiveSchedule> {
    let sub_req = CollectiveRequest {
        root: if req.primitive.is_rooted() { Some(p.root) } else { None },
        data_bytes: bytes,
        ..req.clone()
    };
    match req.primitive {
        Primitive::Broadcast => plan_broadcast(p, &sub_req, chunk_bytes),
        Primitive::Gather => plan_gather(p, &sub_req, chunk_bytes),
        Primitive::AllReduce => plan_allreduce(p, &sub_req, chunk_bytes),
        Primitive::AllGather => plan_allgather(p, &sub_req, chunk_bytes),
    }
}

/// Append `extra`'s ops/trees/streams to `base`, delaying every appended op
/// by `delay` seconds.
fn merge_delayed(base: &mut CollectiveSchedule, extra: CollectiveSchedule, delay: f64) {
    let op_off = base.ops.len();
    let stream_off = base.n_streams;
    let tree_off = base.trees.len() as u32;
    for mut op in extra.ops {
        op.id += op_off;
        op.stream_id += stream_off;
        op.tree_id += tree_off;
        op.min_start += delay;
        for d in op.depends_on.iter_mut() {
            *d += op_off;
        }
        base.ops.push(op);
    }
    base.trees.extend(extra.trees);
    base.data_split.extend(extra.data_split);
    base.n_streams += extra.n_streams;
    base.warnings.extend(extra.warnings);
}

// ---------------------------------------------------------------------------
// One-hop switch trees
// ---------------------------------------------------------------------------

/// One-hop trees for switch-attached fabrics: with m GPUs, GPU j is the root
/// for 1/m of the data; every root reaches the other m-1 GPUs directly
/// through the switch. AllReduce gathers raw slices to each root (relays
/// only relay; the root reduces locally), then broadcasts the result back.
/// AllGather degenerates to the all-to-all slice exchange.
pub fn plan_switch_onehop(
    t: &Topology,
    req: &CollectiveRequest,
    chunk_bytes: u64,
) -> Result<CollectiveSchedule> {
    req.validate()?;
    if !matches!(req.primitive, Primitive::AllReduce | Primitive::AllGather) {
        return Err(Error::validation(
            "primitive",
            "one-hop trees serve AllReduce/AllGather",
        ));
    }
    let nv = topology::filter_to(t, LinkClass::Nvlink);
    if !nv.is_switch_attached() {
        return Err(Error::Plan(
            "topology is not switch-attached (GPU-GPU paths must cross a SWITCH)".into(),
        ));
    }
    let gpus = nv.gpus();
    let m = gpus.len();
    if m < 2 {
        return Err(Error::validation("topology", "need at least 2 GPUs"));
    }
    let chunk = normalize_chunk(chunk_bytes);
    let split = weighted_split(req.data_bytes, &vec![1.0; m], ELEMENT_BYTES);

    // Parallel link slots per GPU, indices into the caller's topology.
    let up_links: BTreeMap<NodeId, Vec<usize>> = gpus
        .iter()
        .map(|&g| {
            let ls: Vec<usize> = t
                .links
                .iter()
                .enumerate()
                .filter(|(_, l)| l.class == LinkClass::Nvlink && l.src == g && !t.is_gpu(l.dst))
                .map(|(i, _)| i)
                .collect();
            (g, ls)
        })
        .collect();
    let down_links: BTreeMap<NodeId, Vec<usize>> = gpus
        .iter()
        .map(|&g| {
            let ls: Vec<usize> = t
                .links
                .iter()
                .enumerate()
                .filter(|(_, l)| l.class == LinkClass::Nvlink && l.dst == g && !t.is_gpu(l.src))
                .map(|(i, _)| i)
                .collect();
            (g, ls)
        })
        .collect();

    let mut b = Builder::new();
    let mut trees = Vec::with_capacity(m);
    for (j, &root) in gpus.iter().enumerate() {
        let chunks = chunk_sizes(split[j], chunk);
        let mut tree_links: BTreeSet<usize> = BTreeSet::new();
        for (c, &bytes) in chunks.iter().enumerate() {
            let mut root_inbound: Vec<usize> = Vec::new();
            if req.primitive == Primitive::AllReduce {
                // Inward: every other GPU ships its slice j to the root.
                for (k, &g) in gpus.iter().enumerate() {
                    if g == root {
                        continue;
                    }
                    let slot = if k < j { j - 1 } else { j };
                    let upl = up_links[&g][slot % up_links[&g].len()];
                    let hop_in = b.push(
                        t,
                        OpKind::Copy,
                        upl,
                        j as u32,
                        c as u32,
                        bytes,
                        Vec::new(),
                        0,
                        1,
                    );
                    let dnl = down_links[&root][k % down_links[&root].len()];
                    let arr = b.push(
                        t,
                        OpKind::Copy,
                        dnl,
                        j as u32,
                        c as u32,
                        bytes,
                        vec![hop_in],
                        1,
                        1,
                    );
                    root_inbound.push(arr);
                }
            }
            let ready = if req.primitive == Primitive::AllReduce {
                Some(b.push_local(root, j as u32, c as u32, root_inbound))
            } else {
                None
            };
            // Outward: the root ships slice j (reduced, or its own
            // contribution for AllGather) to every other GPU.
            for (k, &g) in gpus.iter().enumerate() {
                if g == root {
                    continue;
                }
                let upl = up_links[&root][k % up_links[&root].len()];
                let deps = ready.map(|r| vec![r]).unwrap_or_default();
                let out = b.push(t, OpKind::Copy, upl, j as u32, c as u32, bytes, deps, 0, 2);
                let slot = if k < j { j - 1 } else { j };
                let dnl = down_links[&g][slot % down_links[&g].len()];
                b.push(t, OpKind::Copy, dnl, j as u32, c as u32, bytes, vec![out], 1, 2);
                if c == 0 {
                    tree_links.insert(upl);
                    tree_links.insert(dnl);
                }
            }
        }
        trees.push(ScheduleTree {
            root,
            links: tree_links.into_iter().collect(),
            weight: 1.0,
        });
    }
    Ok(CollectiveSchedule {
        primitive: req.primitive,
        data_bytes: req.data_bytes,
        chunk_bytes: chunk,
        element_bytes: ELEMENT_BYTES,
        trees,
        data_split: split,
        ops: b.ops,
        n_streams: b.next_stream,
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Multi-server three-phase AllReduce
// ---------------------------------------------------------------------------

/// Three-phase AllReduce across servers: (1) per-server reduction to a
/// partition-local root, (2) one-hop cross-server reduce-broadcast among the
/// n partition roots, (3) per-server broadcast from the roots. Phases are
/// pipelined per chunk through byte-range dependencies.
///
/// The partition count is the minimum refined tree count over the servers;
/// partition j's root on each server is GPU j modulo the server size, so
/// distinct partitions exercise distinct roots and network endpoints.
/// Returns the combined topology the schedule's link indices refer to.
pub fn plan_multiserver(
    servers: &[Topology],
    inter: &Topology,
    req: &CollectiveRequest,
    cfg: &MwuConfig,
    chunk_bytes: u64,
) -> Result<(Topology, CollectiveSchedule)> {
    req.validate()?;
    if req.primitive != Primitive::AllReduce {
        return Err(Error::validation("primitive", "multi-server plan serves AllReduce"));
    }
    if servers.len() < 2 {
        return Err(Error::validation("servers", "need at least 2 servers"));
    }
    // Combined topology with globally unique node ids.
    let mut nodes = Vec::new();
    let mut links = Vec::new();
    let mut seen = BTreeSet::new();
    for s in servers {
        for n in &s.nodes {
            if !seen.insert(n.id) {
                return Err(Error::validation(
                    "servers",
                    format!("node id {} appears in more than one server", n.id),
                ));
            }
            nodes.push(*n);
        }
        links.extend(s.links.iter().copied());
    }
    for n in &inter.nodes {
        if seen.insert(n.id) {
            nodes.push(*n);
        }
    }
    let inter_link_base = links.len();
    links.extend(inter.links.iter().copied());
    let mut combined_nodes = nodes;
    combined_nodes.sort_by_key(|n| n.id);
    let combined = Topology { name: "multiserver".into(), nodes: combined_nodes, links };

    // Per-server refined packings size the partition count.
    let mut tree_counts = Vec::new();
    for s in servers {
        let nv = topology::filter_to(s, LinkClass::Nvlink);
        let root = best_allreduce_root(&nv)?;
        let refined = treegen::refine_ilp(&treegen::pack_mwu(&nv, root, cfg)?, &nv, 0.05)?;
        if refined.trees.is_empty() {
            return Err(Error::Plan(format!("server `{}` packs zero trees", s.name)));
        }
        tree_counts.push(refined.trees.len());
    }
    let partitions = *tree_counts.iter().min().unwrap();
    let chunk = normalize_chunk(chunk_bytes);
    let part_split = weighted_split(req.data_bytes, &vec![1.0; partitions], ELEMENT_BYTES);

    // Server link offsets in the combined link list.
    let mut offsets = Vec::with_capacity(servers.len());
    let mut acc = 0usize;
    for s in servers {
        offsets.push(acc);
        acc += s.links.len();
    }

    let mut b = Builder::new();
    let mut trees = Vec::new();
    for (j, &part_bytes) in part_split.iter().enumerate() {
        let tree_id = j as u32;
        let n_srv = servers.len();
        let roots: Vec<NodeId> = servers
            .iter()
            .map(|s| {
                let g = s.gpus();
                g[j % g.len()]
            })
            .collect();
        for &a in &roots {
            for &bb in &roots {
                if a != bb && !inter.links.iter().any(|l| l.src == a && l.dst == bb) {
                    return Err(Error::Disconnected(format!(
                        "inter topology lacks a link {a} -> {bb} for partition {j}"
                    )));
                }
            }
        }
        let sub_split = weighted_split(part_bytes, &vec![1.0; n_srv], ELEMENT_BYTES);
        let part_chunks = chunk_sizes(part_bytes, chunk);

        // Phase 1: per-server reduce to the partition root over the best
        // single tree at that root (edge costs favor fat links).
        type IntraTree = (Vec<usize>, Vec<(usize, u32)>, Topology);
        let mut local_reduced: Vec<Vec<usize>> = Vec::with_capacity(n_srv);
        let mut intra: Vec<IntraTree> = Vec::new();
        for (si, s) in servers.iter().enumerate() {
            let nv = topology::filter_to(s, LinkClass::Nvlink);
            let costs: Vec<f64> = nv.links.iter().map(|l| 1.0 / l.gbps).collect();
            let tr = treegen::min_weight_arborescence(&nv, roots[si], &costs)?;
            // Map NVLink-filtered link indices back into the server, then
            // into the combined list.
            let mut nv_to_srv = Vec::with_capacity(nv.links.len());
            let mut cursor = 0usize;
            for (fi, l) in s.links.iter().enumerate() {
                if cursor < nv.links.len() && nv.links[cursor] == *l {
                    nv_to_srv.push(fi);
                    cursor += 1;
                }
            }
            let hops = tree_hops(&nv, &tr);
            let mut per_chunk = Vec::with_capacity(part_chunks.len());
            for (c, &bytes) in part_chunks.iter().enumerate() {
                let mut inbound: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
                for &(li, hop) in hops.iter().rev() {
                    let l = nv.links[li];
                    let rli = reverse_link(&nv, li)?;
                    let deps = inbound.get(&l.dst).cloned().unwrap_or_default();
                    let kind =
                        if nv.is_gpu(l.dst) { OpKind::ReduceForward } else { OpKind::Copy };
                    let id = b.push(
                        &combined,
                        kind,
                        offsets[si] + nv_to_srv[rli],
                        tree_id,
                        c as u32,
                        bytes,
                        deps,
                        hop,
                        1,
                    );
                    inbound.entry(l.src).or_default().push(id);
                }
                let deps = inbound.get(&roots[si]).cloned().unwrap_or_default();
                per_chunk.push(b.push_local(roots[si], tree_id, c as u32, deps));
            }
            local_reduced.push(per_chunk);
            let global_links: Vec<usize> =
                hops.iter().map(|&(li, _)| offsets[si] + nv_to_srv[li]).collect();
            intra.push((global_links, hops, nv));
        }

        // Phase 2: one-hop exchange among the partition roots. The sub-part
        // hubbed by server s' collects partials there, the hub combines and
        // returns the result. Track each return op's byte range so phase 3
        // can pipeline per chunk.
        let mut returns: Vec<Vec<(u64, u64, usize)>> = vec![Vec::new(); n_srv];
        let mut sub_offset = 0u64;
        for (hub, &sub_bytes) in sub_split.iter().enumerate() {
            let hub_root = roots[hub];
            let sub_chunks = chunk_sizes(sub_bytes, chunk);
            let mut chunk_off = 0u64;
            for (c, &bytes) in sub_chunks.iter().enumerate() {
                let start = sub_offset + chunk_off;
                let end = start + bytes;
                // The phase-1 chunk that completes this byte range.
                let p1_idx = (end.div_ceil(chunk) as usize)
                    .saturating_sub(1)
                    .min(part_chunks.len() - 1);
                let mut hub_inbound = Vec::new();
                for (si, &r) in roots.iter().enumerate() {
                    if si == hub {
                        continue;
                    }
                    let li = inter
                        .links
                        .iter()
                        .position(|l| l.src == r && l.dst == hub_root)
                        .expect("verified above");
                    let id = b.push(
                        &combined,
                        OpKind::ReduceForward,
                        inter_link_base + li,
                        tree_id,
                        c as u32,
                        bytes,
                        vec![local_reduced[si][p1_idx]],
                        0,
                        3,
                    );
                    hub_inbound.push(id);
                }
                let mut deps = hub_inbound;
                deps.push(local_reduced[hub][p1_idx]);
                let combined_id = b.push_local(hub_root, tree_id, c as u32, deps);
                for (si, &r) in roots.iter().enumerate() {
                    if si == hub {
                        returns[si].push((start, end, combined_id));
                        continue;
                    }
                    let li = inter
                        .links
                        .iter()
                        .position(|l| l.src == hub_root && l.dst == r)
                        .expect("verified above");
                    let id = b.push(
                        &combined,
                        OpKind::Copy,
                        inter_link_base + li,
                        tree_id,
                        c as u32,
                        bytes,
                        vec![combined_id],
                        0,
                        4,
                    );
                    returns[si].push((start, end, id));
                }
                chunk_off += bytes;
            }
            sub_offset += sub_bytes;
        }

        // Phase 3: per-server broadcast of the reduced partition, each chunk
        // waiting only on the returns that cover its byte range.
        for (si, (global_links, hops, nv)) in intra.iter().enumerate() {
            let mut chunk_off = 0u64;
            for (c, &bytes) in part_chunks.iter().enumerate() {
                let range = (chunk_off, chunk_off + bytes);
                let root_deps: Vec<usize> = returns[si]
                    .iter()
                    .filter(|&&(s0, e0, _)| s0 < range.1 && e0 > range.0)
                    .map(|&(_, _, id)| id)
                    .collect();
                let mut arrived: BTreeMap<NodeId, usize> = BTreeMap::new();
                for (pos, &(li, hop)) in hops.iter().enumerate() {
                    let l = nv.links[li];
                    let deps = match arrived.get(&l.src) {
                        Some(&d) => vec![d],
                        None => root_deps.clone(),
                    };
                    let id = b.push(
                        &combined,
                        OpKind::Copy,
                        global_links[pos],
                        tree_id,
                        c as u32,
                        bytes,
                        deps,
                        hop,
                        5,
                    );
                    arrived.insert(l.dst, id);
                }
                chunk_off += bytes;
            }
        }

        trees.push(ScheduleTree {
            root: roots[0],
            links: intra.iter().flat_map(|(ls, ..)| ls.iter().copied()).collect(),
            weight: 1.0,
        });
    }

    let sched = CollectiveSchedule {
        primitive: req.primitive,
        data_bytes: req.data_bytes,
        chunk_bytes: chunk,
        element_bytes: ELEMENT_BYTES,
        trees,
        data_split: part_split,
        ops: b.ops,
        n_streams: b.next_stream,
        warnings: Vec::new(),
    };
    Ok((combined, sched))
}

// ---------------------------------------------------------------------------
// Stream reuse
// ---------------------------------------------------------------------------

/// Reuse streams across trees: ops from different trees on the same directed
/// link at the same hop distance (and pass) merge onto one stream with
/// strict chunk-level round robin (tree order within a chunk, then chunk
/// order). All dependencies are preserved; ops are re-ordered so list order
/// matches stream order and re-numbered.
pub fn share_streams(s: &CollectiveSchedule) -> CollectiveSchedule {
    #[derive(PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
    enum Key {
        Link(usize, u32, u8),
        Lone(u32),
    }
    let kind_tag = |k: OpKind| match k {
        OpKind::Copy => 0u8,
        OpKind::ReduceForward => 1,
        OpKind::LocalReduce => 2,
    };
    let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (i, op) in s.ops.iter().enumerate() {
        let key = match op.link {
            Some(li) => Key::Link(li, op.hop, kind_tag(op.kind)),
            None => Key::Lone(op.stream_id),
        };
        groups.entry(key).or_default().push(i);
    }
    // New stream ids in group order; within a merged stream, round robin by
    // (chunk, tree).
    let mut slot: Vec<(u32, u32)> = vec![(0, 0); s.ops.len()]; // (stream, position)
    for (stream, ids) in groups.values().enumerate() {
        let mut ordered = ids.clone();
        ordered.sort_by_key(|&i| (s.ops[i].chunk_id, s.ops[i].tree_id, i));
        for (pos, &i) in ordered.iter().enumerate() {
            slot[i] = (stream as u32, pos as u32);
        }
    }
    let n_streams = groups.len() as u32;
    // Re-order ops by (stream, position) and re-number ids.
    let mut order: Vec<usize> = (0..s.ops.len()).collect();
    order.sort_by_key(|&i| slot[i]);
    let mut new_id = vec![0usize; s.ops.len()];
    for (pos, &i) in order.iter().enumerate() {
        new_id[i] = pos;
    }
    let mut ops: Vec<TransferOp> = order
        .iter()
        .map(|&i| {
            let mut op = s.ops[i].clone();
            op.id = new_id[i];
            op.stream_id = slot[i].0;
            op.depends_on = op.depends_on.iter().map(|&d| new_id[d]).collect();
            op.depends_on.sort_unstable();
            op
        })
        .collect();
    ops.sort_by_key(|o| o.id);
    CollectiveSchedule { ops, n_streams, ..s.clone() }
}
