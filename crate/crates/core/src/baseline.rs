//! NCCL-style ring baseline: edge-disjoint directed Hamiltonian cycle
//! packing over the NVLink graph with a PCIe single-ring fallback, the
//! message-bound ring rate translation, and the theoretical ring-vs-tree
//! speedup over unique allocation bins.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::collectives::Primitive;
use crate::graph;
use crate::topology::{self, LinkClass, NodeId, Topology};
use crate::treegen;
use crate::{Error, Result};

/// Effective bandwidth of the PCIe fallback ring in NVLink units when
/// normalizing speedups. The nominal per-link ratio is about one half, but a
/// ring through the shared PCIe hierarchy sustains roughly a third of an
/// NVLink tree unit end to end, which is also the value that reproduces the
/// reported ceiling of ~6x over tree packings on fragmented allocations.
pub const PCIE_RING_EQUIV: f64 = 1.0 / 3.0;

/// A set of directed Hamiltonian cycles over the allocated GPU nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSet {
    /// Each ring is a GPU visiting order; the cycle closes back to the
    /// first entry. On switch-attached topologies consecutive GPUs are
    /// connected through the switch rather than directly.
    pub rings: Vec<Vec<NodeId>>,
    pub link_class_used: LinkClass,
    /// Bottleneck bandwidth of a single ring in GB/s.
    pub per_ring_rate: f64,
}

/// Greedily pack the maximum number of edge-disjoint directed Hamiltonian
/// cycles in the NVLink subgraph (exhaustive branch-and-bound, lexicographic
/// order, exact for the <= 8-GPU direct-attached machines). Falls back to a
/// single PCIe ring when no NVLink ring exists.
pub fn build_rings(t: &Topology) -> Result<RingSet> {
    let gpus = t.gpus();
    if gpus.len() < 2 {
        return Err(Error::validation("topology", "need at least 2 GPUs"));
    }
    let nv = topology::filter_to(t, LinkClass::Nvlink);
    if nv.is_switch_attached() {
        if let Some(rs) = switch_star_rings(&nv, &gpus) {
            return Ok(rs);
        }
    } else {
        let rings = max_ham_packing(&nv, &gpus);
        if !rings.is_empty() {
            let rate = rings
                .iter()
                .map(|r| ring_bottleneck(&nv, r))
                .fold(f64::INFINITY, f64::min);
            return Ok(RingSet {
                rings: rings
                    .iter()
                    .map(|r| r.iter().map(|&i| gpus[i]).collect())
                    .collect(),
                link_class_used: LinkClass::Nvlink,
                per_ring_rate: rate,
            });
        }
    }
    pcie_fallback_ring(t, &gpus)
}

/// Translate a ring set into an effective collective rate using the message
/// lower bounds: a ring of N processes needs ceil((N-1)/N) messages per
/// process for Broadcast/Gather and twice that for AllReduce/AllGather, so
/// one ring operates at N/(N-1) (resp. N/(2(N-1))) of its bottleneck
/// bandwidth. Totals sum over rings.
pub fn ring_rate(rs: &RingSet, primitive: Primitive, n_gpus: usize) -> Result<f64> {
    if rs.rings.is_empty() {
        return Err(Error::validation("rings", "empty ring set"));
    }
    if n_gpus < 2 {
        return Err(Error::validation("n_gpus", "need at least 2 GPUs"));
    }
    let phases = match primitive {
        Primitive::Broadcast | Primitive::Gather => 1.0,
        Primitive::AllReduce | Primitive::AllGather => 2.0,
    };
    let k = rs.rings.len() as f64;
    let n = n_gpus as f64;
    Ok(k * rs.per_ring_rate * n / (phases * (n - 1.0)))
}

/// Best-root tree-packing rate over the allocation, in unit-capacity NVLink
/// terms. Packing rate equals the min root-to-vertex cut (Edmonds), so the
/// exact bound stands in for running the full MWU pipeline per bin.
pub fn best_root_tree_rate(nv_unit: &Topology) -> Result<f64> {
    let mut best: Option<f64> = None;
    for root in nv_unit.gpus() {
        if let Ok(rate) = treegen::optimal_rate_bound(nv_unit, root) {
            best = Some(best.map_or(rate, |b: f64| b.max(rate)));
        }
    }
    best.ok_or_else(|| Error::Disconnected("no root reaches every GPU over NVLink".into()))
}

/// Theoretical tree-over-ring speedup for one allocation.
///
/// Both sides of the ratio meet the same per-primitive message bound, so
/// the translation factors cancel and the speedup reduces to
/// packing-rate / ring-equivalent, where an NVLink ring counts 1.0 per
/// directed ring and the PCIe fallback counts [`PCIE_RING_EQUIV`].
pub fn theoretical_speedup(
    t: &Topology,
    allocation: &BTreeSet<NodeId>,
    primitive: Primitive,
) -> Result<f64> {
    let _ = primitive; // cancels; see above
    let sub = topology::subgraph(t, allocation)?;
    let nv_unit = topology::unit_caps(&topology::filter_to(&sub, LinkClass::Nvlink));
    let tree = best_root_tree_rate(&nv_unit)?;
    let rings = build_rings(&topology::unit_caps(&sub))?;
    let ring_equiv = match rings.link_class_used {
        LinkClass::Pcie => PCIE_RING_EQUIV,
        _ => rings.rings.len() as f64 * rings.per_ring_rate,
    };
    Ok(tree / ring_equiv)
}

// ---------------------------------------------------------------------------
// Ring construction internals
// ---------------------------------------------------------------------------

/// Rings on a switch-star NVLink fabric: GPUs in id order through the
/// switch, one ring per parallel uplink/downlink slot.
fn switch_star_rings(nv: &Topology, gpus: &[NodeId]) -> Option<RingSet> {
    let mut count = usize::MAX;
    let mut rate = f64::INFINITY;
    for &g in gpus {
        let up = nv.links.iter().filter(|l| l.src == g).count();
        let down = nv.links.iter().filter(|l| l.dst == g).count();
        count = count.min(up).min(down);
        for l in nv.links.iter().filter(|l| l.src == g || l.dst == g) {
            rate = rate.min(l.gbps);
        }
    }
    if count == 0 || !rate.is_finite() {
        return None;
    }
    let ring: Vec<NodeId> = gpus.to_vec();
    Some(RingSet {
        rings: vec![ring; count],
        link_class_used: LinkClass::Nvlink,
        per_ring_rate: rate,
    })
}

/// Single PCIe ring over the GPUs in id order, consecutive GPUs routed by
/// the shortest PCIe relay path. Rate is the bottleneck capacity divided by
/// how often a physical link is shared between hops.
fn pcie_fallback_ring(t: &Topology, gpus: &[NodeId]) -> Result<RingSet> {
    let pcie = topology::filter_to(t, LinkClass::Pcie);
    let mut uses: BTreeMap<usize, usize> = BTreeMap::new();
    for w in 0..gpus.len() {
        let a = gpus[w];
        let b = gpus[(w + 1) % gpus.len()];
        let path = shortest_link_path(&pcie, a, b).ok_or_else(|| {
            Error::Plan(format!(
                "degenerate allocation: no Hamiltonian cycle over NVLink and no PCIe path {a}->{b}"
            ))
        })?;
        for li in path {
            *uses.entry(li).or_insert(0) += 1;
        }
    }
    let rate = uses
        .iter()
        .map(|(&li, &u)| pcie.links[li].gbps / u as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(RingSet {
        rings: vec![gpus.to_vec()],
        link_class_used: LinkClass::Pcie,
        per_ring_rate: rate,
    })
}

/// BFS shortest path (in hops) from `a` to `b`; returns link indices.
fn shortest_link_path(t: &Topology, a: NodeId, b: NodeId) -> Option<Vec<usize>> {
    let mut prev: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut q = std::collections::VecDeque::new();
    let mut seen = BTreeSet::new();
    seen.insert(a);
    q.push_back(a);
    while let Some(u) = q.pop_front() {
        if u == b {
            break;
        }
        for (li, l) in t.links.iter().enumerate() {
            if l.src == u && !seen.contains(&l.dst) {
                seen.insert(l.dst);
                prev.insert(l.dst, li);
                q.push_back(l.dst);
            }
        }
    }
    if !seen.contains(&b) {
        return None;
    }
    let mut path = Vec::new();
    let mut v = b;
    while v != a {
        let li = prev[&v];
        path.push(li);
        v = t.links[li].src;
    }
    path.reverse();
    Some(path)
}

fn ring_bottleneck(nv: &Topology, ring: &[usize]) -> f64 {
    // Indices are into the sorted GPU list; resolve pair capacities.
    let gpus = nv.gpus();
    let mut rate = f64::INFINITY;
    for w in 0..ring.len() {
        let a = gpus[ring[w]];
        let b = gpus[ring[(w + 1) % ring.len()]];
        let cap = nv
            .links
            .iter()
            .filter(|l| l.src == a && l.dst == b)
            .map(|l| l.gbps)
            .fold(f64::NEG_INFINITY, f64::max);
        rate = rate.min(cap);
    }
    rate
}

/// Exhaustive maximum packing of edge-disjoint directed Hamiltonian cycles.
/// Cycles are explored in lexicographic order and successive cycles are
/// constrained to be lexicographically nondecreasing, which removes
/// permutation symmetry without losing any packing.
fn max_ham_packing(nv: &Topology, gpus: &[NodeId]) -> Vec<Vec<usize>> {
    let k = gpus.len();
    let index: BTreeMap<NodeId, usize> =
        gpus.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let mut mult = vec![vec![0u8; k]; k];
    for l in &nv.links {
        if let (Some(&u), Some(&v)) = (index.get(&l.src), index.get(&l.dst)) {
            mult[u][v] += 1;
        }
    }
    struct Search {
        k: usize,
        mult: Vec<Vec<u8>>,
        best: Vec<Vec<usize>>,
        cur: Vec<Vec<usize>>,
        done: bool,
        ub0: usize,
    }
    impl Search {
        fn bound(&self) -> usize {
            let mut arcs = 0usize;
            let mut min_deg = usize::MAX;
            for u in 0..self.k {
                let out: usize = self.mult[u].iter().map(|&m| m as usize).sum();
                let inn: usize = (0..self.k).map(|v| self.mult[v][u] as usize).sum();
                arcs += out;
                min_deg = min_deg.min(out).min(inn);
            }
            min_deg.min(arcs / self.k)
        }
        fn run(&mut self, floor: &[usize]) {
            if self.done {
                return;
            }
            if self.cur.len() > self.best.len() {
                self.best = self.cur.clone();
                if self.best.len() >= self.ub0 {
                    self.done = true;
                    return;
                }
            }
            if self.cur.len() + self.bound() <= self.best.len() {
                return;
            }
            // Enumerate Hamiltonian cycles starting at vertex 0, lex >= floor.
            let mut path = vec![0usize];
            let mut visited = vec![false; self.k];
            visited[0] = true;
            self.extend(&mut path, &mut visited, floor, true);
        }
        fn extend(
            &mut self,
            path: &mut Vec<usize>,
            visited: &mut Vec<bool>,
            floor: &[usize],
            on_floor: bool,
        ) {
            if self.done {
                return;
            }
            if path.len() == self.k {
                if self.mult[path[self.k - 1]][0] > 0 {
                    let cycle = path.clone();
                    for w in 0..self.k {
                        self.mult[cycle[w]][cycle[(w + 1) % self.k]] -= 1;
                    }
                    self.cur.push(cycle.clone());
                    self.run(&cycle);
                    self.cur.pop();
                    for w in 0..self.k {
                        self.mult[cycle[w]][cycle[(w + 1) % self.k]] += 1;
                    }
                }
                return;
            }
            let u = *path.last().unwrap();
            let lo = if on_floor && path.len() < floor.len() { floor[path.len()] } else { 0 };
            for v in lo..self.k {
                if visited[v] || self.mult[u][v] == 0 {
                    continue;
                }
                let still_floor = on_floor && path.len() < floor.len() && v == floor[path.len()];
                path.push(v);
                visited[v] = true;
                self.extend(path, visited, floor, still_floor);
                path.pop();
                visited[v] = false;
                if self.done {
                    return;
                }
            }
        }
    }
    let mut s = Search { k, mult, best: Vec::new(), cur: Vec::new(), done: false, ub0: 0 };
    s.ub0 = s.bound();
    if k >= 2 && s.ub0 > 0 {
        s.run(&[]);
    }
    s.best
}

// ---------------------------------------------------------------------------
// Allocation binning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationBin {
    /// Lexicographically smallest allocation in the class.
    pub representative: Vec<NodeId>,
    /// Number of allocations in the class.
    pub members: usize,
}

/// Unique allocation bins: GPU subsets of size 3 up to the full machine,
/// binned by isomorphism of the induced NVLink multigraph. Allocations whose
/// induced NVLink graph is disconnected are skipped (no collective can run
/// on NVLink alone there).
pub fn allocation_bins(t: &Topology) -> Result<Vec<AllocationBin>> {
    let gpus = t.gpus();
    let n = gpus.len();
    if n > 8 {
        let nv = topology::filter_to(t, LinkClass::Nvlink);
        if nv.is_switch_attached() {
            // All same-size allocations are isomorphic through the switch.
            return Ok((3..=n)
                .map(|k| AllocationBin {
                    representative: gpus[..k].to_vec(),
                    members: binomial(n, k),
                })
                .collect());
        }
        return Err(Error::validation(
            "topology",
            "exhaustive allocation binning is supported for at most 8 GPUs",
        ));
    }
    let nv = topology::filter_to(t, LinkClass::Nvlink);
    let index: BTreeMap<NodeId, usize> =
        gpus.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    // Undirected multiplicity matrix: count each pair once per direction,
    // i.e. only links with src < dst.
    let mut full = vec![vec![0u32; n]; n];
    for l in &nv.links {
        if let (Some(&u), Some(&v)) = (index.get(&l.src), index.get(&l.dst)) {
            if u < v {
                full[u][v] += 1;
                full[v][u] += 1;
            }
        }
    }

    let mut bins: BTreeMap<Vec<u32>, AllocationBin> = BTreeMap::new();
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size < 3 {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sub: Vec<Vec<u32>> = members
            .iter()
            .map(|&i| members.iter().map(|&j| full[i][j]).collect())
            .collect();
        if !connected(&sub) {
            continue;
        }
        let key = graph::canonical_key(&sub);
        let entry = bins.entry(key).or_insert_with(|| AllocationBin {
            representative: members.iter().map(|&i| gpus[i]).collect(),
            members: 0,
        });
        entry.members += 1;
    }
    let mut out: Vec<AllocationBin> = bins.into_values().collect();
    out.sort_by(|a, b| {
        (a.representative.len(), &a.representative)
            .cmp(&(b.representative.len(), &b.representative))
    });
    Ok(out)
}

fn connected(mult: &[Vec<u32>]) -> bool {
    let n = mult.len();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            if !seen[v] && mult[u][v] > 0 {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

fn binomial(n: usize, k: usize) -> usize {
    let mut r = 1usize;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{preset, Preset};

    #[test]
    fn dgx1p_packs_four_directed_rings() {
        let t = topology::unit_caps(&preset(Preset::Dgx1P));
        let rs = build_rings(&t).unwrap();
        assert_eq!(rs.link_class_used, LinkClass::Nvlink);
        assert_eq!(rs.rings.len(), 4);
        assert!((rs.per_ring_rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ring_allreduce_rate_is_32_14_exactly() {
        let t = topology::unit_caps(&preset(Preset::Dgx1P));
        let rs = build_rings(&t).unwrap();
        let rate = ring_rate(&rs, Primitive::AllReduce, 8).unwrap();
        assert_eq!(rate, 32.0 / 14.0);
    }

    #[test]
    fn three_gpu_triangle_packs_two_rings() {
        // Fully connected 3 GPUs: both ring orientations.
        let t = topology::unit_caps(&preset(Preset::Dgx1P));
        let sub = topology::subgraph(&t, &[NodeId(0), NodeId(1), NodeId(2)].into()).unwrap();
        let rs = build_rings(&sub).unwrap();
        assert_eq!(rs.rings.len(), 2);
        let seqs: Vec<Vec<u16>> =
            rs.rings.iter().map(|r| r.iter().map(|n| n.0).collect()).collect();
        assert!(seqs.contains(&vec![0, 1, 2]));
        assert!(seqs.contains(&vec![0, 2, 1]));
    }

    #[test]
    fn partial_allocation_falls_back_to_pcie() {
        let t = preset(Preset::Dgx1P);
        let sub = topology::subgraph(&t, &[NodeId(1), NodeId(4), NodeId(5), NodeId(6)].into())
            .unwrap();
        let rs = build_rings(&sub).unwrap();
        assert_eq!(rs.link_class_used, LinkClass::Pcie);
        assert_eq!(rs.rings.len(), 1);
    }

    #[test]
    fn dgx2_rings_through_switch() {
        let t = preset(Preset::Dgx2);
        let rs = build_rings(&t).unwrap();
        assert_eq!(rs.link_class_used, LinkClass::Nvlink);
        assert_eq!(rs.rings.len(), 6);
        assert!((rs.per_ring_rate - 12.5).abs() < 1e-12);
    }

    #[test]
    fn allocation_bin_counts_match_machine_generations() {
        let bins_p = allocation_bins(&preset(Preset::Dgx1P)).unwrap();
        assert_eq!(bins_p.len(), 14, "dgx1p bins: {:?}", bins_p.len());
        let bins_v = allocation_bins(&preset(Preset::Dgx1V)).unwrap();
        assert_eq!(bins_v.len(), 46, "dgx1v bins: {:?}", bins_v.len());
    }

    #[test]
    fn ring_perfect_allocation_speedup_is_one() {
        let t = preset(Preset::Dgx1V);
        let alloc = [NodeId(2), NodeId(3), NodeId(6), NodeId(7)].into();
        let s = theoretical_speedup(&t, &alloc, Primitive::Broadcast).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "speedup {s}");
    }

    #[test]
    fn fallback_allocation_speedup_beats_rings() {
        let t = preset(Preset::Dgx1P);
        let alloc = [NodeId(1), NodeId(4), NodeId(5), NodeId(6)].into();
        let s = theoretical_speedup(&t, &alloc, Primitive::Broadcast).unwrap();
        assert!(s > 1.0, "speedup {s}");
    }
}
