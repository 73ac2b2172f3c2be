//! Interconnect topology model: directed capacitated multigraphs of GPUs,
//! switches and NICs, plus hardware presets and a JSON ingestion format.
//!
//! A physical bidirectional link is always represented as two directed
//! [`Link`] entries, one per direction, each carrying the full per-direction
//! capacity. Parallel links between the same node pair are permitted and are
//! distinct entries (the DGX-2 preset wires 6 parallel NVLinks per GPU).

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::{Error, Result};

/// Identifier of a topology node. Unique within one [`Topology`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Gpu,
    /// Relay-only node (NVSwitch, PCIe switch). Never a collective root and
    /// never owns payload data; it may appear as a pass-through vertex.
    Switch,
    Nic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkClass {
    Nvlink,
    Pcie,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

/// One directed capacitated edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub src: NodeId,
    pub dst: NodeId,
    /// Per-direction bandwidth in GB/s. Strictly positive.
    pub gbps: f64,
    pub class: LinkClass,
}

/// Directed capacitated multigraph. Immutable after construction; safe to
/// share across concurrent planner and simulator runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
}

// Default per-direction capacities. The hardware figures are quoted as
// ranges (NVLink Gen1 18-20, Gen2 22-25, PCIe 8-12 GB/s); presets use the
// midpoints and every value can be overridden via a topology document.
pub const NVLINK_GEN1_GBPS: f64 = 18.0;
pub const NVLINK_GEN2_GBPS: f64 = 23.0;
pub const PCIE_GBPS: f64 = 10.0;
/// DGX-2: 6 NVLinks per GPU, 150 GB/s bidirectional = 75 GB/s per direction.
pub const DGX2_PER_LINK_GBPS: f64 = 75.0 / 6.0;

/// Undirected NVLink pairs of the 8-GPU hybrid cube-mesh: two fully
/// connected quads {0..3} and {4..7} plus the cross links i <-> i+4.
/// Every GPU has 4 NVLinks.
pub const CUBE_MESH_PAIRS: [(u16, u16); 16] = [
    (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3),
    (4, 5), (4, 6), (4, 7), (5, 6), (5, 7), (6, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

/// Additional NVLinks of the V100 generation: the two spare ports per GPU
/// chain into one Hamiltonian cycle of extra links. Six of them double
/// existing cube-mesh pairs; (3,5) and (0,6) are V100-only connections.
/// Every GPU ends up with 6 NVLinks.
pub const V100_EXTRA_PAIRS: [(u16, u16); 8] =
    [(0, 1), (1, 2), (2, 3), (3, 5), (4, 5), (4, 7), (6, 7), (0, 6)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Dgx1P,
    Dgx1V,
    Dgx2,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Preset> {
        match name.to_ascii_lowercase().as_str() {
            "dgx1p" | "dgx-1p" | "dgx1-p100" => Ok(Preset::Dgx1P),
            "dgx1v" | "dgx-1v" | "dgx1-v100" => Ok(Preset::Dgx1V),
            "dgx2" | "dgx-2" => Ok(Preset::Dgx2),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl Topology {
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn has_node(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.node(id).map(|n| n.kind)
    }

    /// GPU node ids in ascending order.
    pub fn gpus(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> =
            self.nodes.iter().filter(|n| n.kind == NodeKind::Gpu).map(|n| n.id).collect();
        v.sort();
        v
    }

    pub fn is_gpu(&self, id: NodeId) -> bool {
        self.kind(id) == Some(NodeKind::Gpu)
    }

    /// Indices into `links` of all out-links of `id`, in link order.
    pub fn out_links(&self, id: NodeId) -> Vec<usize> {
        self.links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.src == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when every GPU-to-GPU path crosses a SWITCH node, i.e. there are
    /// no direct GPU-GPU links but at least one switch.
    pub fn is_switch_attached(&self) -> bool {
        let has_switch = self.nodes.iter().any(|n| n.kind == NodeKind::Switch);
        has_switch
            && !self
                .links
                .iter()
                .any(|l| self.is_gpu(l.src) && self.is_gpu(l.dst))
    }

    /// Multiset of undirected (min,max) neighbor pairs restricted to a link
    /// class, with multiplicities. Used by tests and the ring builder.
    pub fn undirected_pairs(&self, class: LinkClass) -> BTreeMap<(NodeId, NodeId), usize> {
        let mut m = BTreeMap::new();
        for l in self.links.iter().filter(|l| l.class == class) {
            let key = if l.src <= l.dst { (l.src, l.dst) } else { (l.dst, l.src) };
            *m.entry(key).or_insert(0) += 1;
        }
        // Each undirected pair appears once per direction.
        for v in m.values_mut() {
            *v /= 2;
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Document format
// ---------------------------------------------------------------------------

/// JSON document schema. `bidirectional: true` expands an entry into two
/// directed links, each with the full `gbps` per-direction capacity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub name: String,
    pub nodes: Vec<Node>,
    pub links: Vec<LinkDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkDoc {
    pub src: NodeId,
    pub dst: NodeId,
    pub gbps: f64,
    pub class: LinkClass,
    #[serde(default)]
    pub bidirectional: bool,
}

/// Parse and validate a topology document.
pub fn load_topology(source: &str) -> Result<Topology> {
    let doc: TopologyDoc =
        serde_json::from_str(source).map_err(|e| Error::Parse(e.to_string()))?;
    topology_from_doc(&doc)
}

pub fn topology_from_doc(doc: &TopologyDoc) -> Result<Topology> {
    let mut seen = BTreeSet::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        if !seen.insert(n.id) {
            return Err(Error::validation(
                format!("nodes[{i}].id"),
                format!("duplicate node id {}", n.id),
            ));
        }
    }
    let mut links = Vec::new();
    for (i, l) in doc.links.iter().enumerate() {
        if l.gbps <= 0.0 || l.gbps.is_nan() {
            return Err(Error::validation(
                format!("links[{i}].gbps"),
                format!("capacity must be positive, got {}", l.gbps),
            ));
        }
        for (field, id) in [("src", l.src), ("dst", l.dst)] {
            if !seen.contains(&id) {
                return Err(Error::validation(
                    format!("links[{i}].{field}"),
                    format!("link endpoint {id} is not a declared node"),
                ));
            }
        }
        if l.src == l.dst {
            return Err(Error::validation(
                format!("links[{i}]"),
                format!("self-loop on node {}", l.src),
            ));
        }
        links.push(Link { src: l.src, dst: l.dst, gbps: l.gbps, class: l.class });
        if l.bidirectional {
            links.push(Link { src: l.dst, dst: l.src, gbps: l.gbps, class: l.class });
        }
    }
    let mut nodes = doc.nodes.clone();
    nodes.sort_by_key(|n| n.id);
    Ok(Topology { name: doc.name.clone(), nodes, links })
}

/// Serialize a topology back into the document schema (all links emitted as
/// directed entries, so reloading reproduces the exact link multiset).
pub fn to_doc(t: &Topology) -> TopologyDoc {
    TopologyDoc {
        name: t.name.clone(),
        nodes: t.nodes.clone(),
        links: t
            .links
            .iter()
            .map(|l| LinkDoc {
                src: l.src,
                dst: l.dst,
                gbps: l.gbps,
                class: l.class,
                bidirectional: false,
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Build one of the known hardware presets, including its PCIe overlay.
pub fn preset(p: Preset) -> Topology {
    match p {
        Preset::Dgx1P => dgx1(false),
        Preset::Dgx1V => dgx1(true),
        Preset::Dgx2 => dgx2(),
    }
}

/// DGX-1 (8 GPUs). P100: cube-mesh NVLink at 18 GB/s per direction.
/// V100: additionally the four double links at 23 GB/s per direction.
///
/// PCIe overlay: two 4-GPU domains, each behind a PCIe switch, bridged at a
/// root switch (a common DGX-1 layout; the exact tree is overridable via a
/// topology document). Switch ids: 8 and 9 for the domains, 10 for the root.
fn dgx1(v100: bool) -> Topology {
    let mut nodes: Vec<Node> =
        (0..8).map(|i| Node { id: NodeId(i), kind: NodeKind::Gpu }).collect();
    for id in [8, 9, 10] {
        nodes.push(Node { id: NodeId(id), kind: NodeKind::Switch });
    }
    let nv = if v100 { NVLINK_GEN2_GBPS } else { NVLINK_GEN1_GBPS };
    let mut links = Vec::new();
    let both = |links: &mut Vec<Link>, a: u16, b: u16, gbps: f64, class: LinkClass| {
        links.push(Link { src: NodeId(a), dst: NodeId(b), gbps, class });
        links.push(Link { src: NodeId(b), dst: NodeId(a), gbps, class });
    };
    for &(a, b) in &CUBE_MESH_PAIRS {
        both(&mut links, a, b, nv, LinkClass::Nvlink);
    }
    if v100 {
        for &(a, b) in &V100_EXTRA_PAIRS {
            both(&mut links, a, b, nv, LinkClass::Nvlink);
        }
    }
    for g in 0..8u16 {
        let sw = if g < 4 { 8 } else { 9 };
        both(&mut links, g, sw, PCIE_GBPS, LinkClass::Pcie);
    }
    both(&mut links, 8, 10, PCIE_GBPS, LinkClass::Pcie);
    both(&mut links, 9, 10, PCIE_GBPS, LinkClass::Pcie);
    Topology {
        name: if v100 { "dgx1v".into() } else { "dgx1p".into() },
        nodes,
        links,
    }
}

/// DGX-2: 16 GPUs, each connected to the NVSwitch (node 16) by 6 parallel
/// NVLinks per direction at 12.5 GB/s each (75 GB/s per direction total).
/// PCIe overlay: four 4-GPU domains (switches 17..=20) bridged at a root
/// switch (21).
fn dgx2() -> Topology {
    let mut nodes: Vec<Node> =
        (0..16).map(|i| Node { id: NodeId(i), kind: NodeKind::Gpu }).collect();
    for id in 16..=21 {
        nodes.push(Node { id: NodeId(id), kind: NodeKind::Switch });
    }
    let mut links = Vec::new();
    for g in 0..16u16 {
        for _ in 0..6 {
            links.push(Link {
                src: NodeId(g),
                dst: NodeId(16),
                gbps: DGX2_PER_LINK_GBPS,
                class: LinkClass::Nvlink,
            });
            links.push(Link {
                src: NodeId(16),
                dst: NodeId(g),
                gbps: DGX2_PER_LINK_GBPS,
                class: LinkClass::Nvlink,
            });
        }
    }
    let both = |links: &mut Vec<Link>, a: u16, b: u16| {
        links.push(Link { src: NodeId(a), dst: NodeId(b), gbps: PCIE_GBPS, class: LinkClass::Pcie });
        links.push(Link { src: NodeId(b), dst: NodeId(a), gbps: PCIE_GBPS, class: LinkClass::Pcie });
    };
    for g in 0..16u16 {
        both(&mut links, g, 17 + g / 4);
    }
    for sw in 17..=20u16 {
        both(&mut links, sw, 21);
    }
    Topology { name: "dgx2".into(), nodes, links }
}

// ---------------------------------------------------------------------------
// Subgraph extraction and link filtering
// ---------------------------------------------------------------------------

/// Induced subgraph over an allocated GPU set plus the SWITCH/NIC nodes
/// needed to connect them.
///
/// Relay nodes that lose links through the restriction and end up with at
/// most one distinct neighbor are pruned iteratively (they cannot carry
/// GPU-to-GPU transit). Errors if the allocated GPUs are not weakly
/// connected in the result.
pub fn subgraph(t: &Topology, allocated: &BTreeSet<NodeId>) -> Result<Topology> {
    for id in allocated {
        if !t.has_node(*id) {
            return Err(Error::validation(
                "allocated",
                format!("node {id} is not in topology `{}`", t.name),
            ));
        }
    }
    let alloc_gpus: BTreeSet<NodeId> =
        allocated.iter().copied().filter(|id| t.is_gpu(*id)).collect();
    if alloc_gpus.len() < 2 {
        return Err(Error::validation(
            "allocated",
            format!("need at least 2 allocated GPUs, got {}", alloc_gpus.len()),
        ));
    }

    // Retain allocated GPUs plus every relay node; relays that become
    // useless are pruned below.
    let mut retained: BTreeSet<NodeId> = t
        .nodes
        .iter()
        .filter(|n| {
            (n.kind == NodeKind::Gpu && allocated.contains(&n.id)) || n.kind != NodeKind::Gpu
        })
        .map(|n| n.id)
        .collect();

    let keep_links = |retained: &BTreeSet<NodeId>| -> Vec<Link> {
        t.links
            .iter()
            .filter(|l| retained.contains(&l.src) && retained.contains(&l.dst))
            .copied()
            .collect()
    };

    // A relay is pruned only if the restriction changed its link set (or a
    // pruned neighbor did); untouched relays survive so that subgraph with
    // the full node set is the identity.
    let full_degree: BTreeMap<NodeId, usize> = t
        .nodes
        .iter()
        .map(|n| {
            let d = t.links.iter().filter(|l| l.src == n.id || l.dst == n.id).count();
            (n.id, d)
        })
        .collect();
    loop {
        let links = keep_links(&retained);
        let mut dropped = None;
        for n in t.nodes.iter().filter(|n| n.kind != NodeKind::Gpu) {
            if !retained.contains(&n.id) {
                continue;
            }
            let deg = links.iter().filter(|l| l.src == n.id || l.dst == n.id).count();
            if deg == full_degree[&n.id] {
                continue; // untouched by the restriction
            }
            let neighbors: BTreeSet<NodeId> = links
                .iter()
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

    let links = keep_links(&retained);
    let nodes: Vec<Node> =
        t.nodes.iter().filter(|n| retained.contains(&n.id)).copied().collect();
    let out = Topology { name: format!("{}/sub", t.name), nodes, links };

    // Weak connectivity over the allocated GPUs.
    let comp = crate::graph::weak_components(&out);
    let gpu_comps: BTreeSet<usize> = alloc_gpus.iter().map(|g| comp[g]).collect();
    if gpu_comps.len() > 1 {
        let first = *alloc_gpus.iter().next().unwrap();
        let part: Vec<String> = alloc_gpus
            .iter()
            .filter(|g| comp[g] == comp[&first])
            .map(|g| g.to_string())
            .collect();
        return Err(Error::Disconnected(format!(
            "allocated GPUs split into {} partitions; one partition is {{{}}}",
            gpu_comps.len(),
            part.join(",")
        )));
    }
    // Identity case: nothing was dropped.
    if out.nodes.len() == t.nodes.len() && out.links.len() == t.links.len() {
        return Ok(Topology { name: t.name.clone(), ..out });
    }
    Ok(out)
}

/// Retain only links whose class is in `classes`; the node set is unchanged.
/// The result may be disconnected; downstream planners validate.
pub fn filter_links(t: &Topology, classes: &BTreeSet<LinkClass>) -> Topology {
    Topology {
        name: t.name.clone(),
        nodes: t.nodes.clone(),
        links: t.links.iter().filter(|l| classes.contains(&l.class)).copied().collect(),
    }
}

pub fn filter_to(t: &Topology, class: LinkClass) -> Topology {
    let mut s = BTreeSet::new();
    s.insert(class);
    filter_links(t, &s)
}

/// For a topology produced by filtering `parent`'s links (order-preserving),
/// the parent index of each filtered link.
pub fn filter_index_map(parent: &Topology, filtered: &Topology) -> Vec<usize> {
    let mut map = Vec::with_capacity(filtered.links.len());
    let mut cursor = 0usize;
    for (pi, l) in parent.links.iter().enumerate() {
        if cursor < filtered.links.len() && filtered.links[cursor] == *l {
            map.push(pi);
            cursor += 1;
        }
    }
    assert_eq!(map.len(), filtered.links.len(), "not an order-preserving filter");
    map
}

/// Copy of the topology with every link capacity set to 1.0. The theoretical
/// analyses (packing bounds, ring counts, speedups) run on unit capacities.
pub fn unit_caps(t: &Topology) -> Topology {
    Topology {
        name: t.name.clone(),
        nodes: t.nodes.clone(),
        links: t.links.iter().map(|l| Link { gbps: 1.0, ..*l }).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u16]) -> BTreeSet<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn bidirectional_expansion() {
        let doc = r#"{
            "name": "pair",
            "nodes": [{"id": 0, "kind": "gpu"}, {"id": 1, "kind": "gpu"}],
            "links": [{"src": 0, "dst": 1, "gbps": 20.0, "class": "nvlink", "bidirectional": true}]
        }"#;
        let t = load_topology(doc).unwrap();
        assert_eq!(t.nodes.len(), 2);
        assert_eq!(t.links.len(), 2);
        assert!(t.links.iter().all(|l| (l.gbps - 20.0).abs() < 1e-12));
        assert_eq!(t.links[0].src, NodeId(0));
        assert_eq!(t.links[1].src, NodeId(1));
    }

    #[test]
    fn dangling_endpoint_rejected() {
        let doc = r#"{
            "name": "bad",
            "nodes": [{"id": 0, "kind": "gpu"}, {"id": 1, "kind": "gpu"}],
            "links": [{"src": 0, "dst": 9, "gbps": 20.0, "class": "nvlink"}]
        }"#;
        let err = load_topology(doc).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "links[0].dst"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn nonpositive_capacity_rejected() {
        let doc = r#"{
            "name": "bad",
            "nodes": [{"id": 0, "kind": "gpu"}, {"id": 1, "kind": "gpu"}],
            "links": [{"src": 0, "dst": 1, "gbps": 0.0, "class": "pcie"}]
        }"#;
        assert!(matches!(load_topology(doc), Err(Error::Validation { .. })));
    }

    #[test]
    fn dgx1p_degrees_and_neighbors() {
        let t = preset(Preset::Dgx1P);
        let pairs = t.undirected_pairs(LinkClass::Nvlink);
        // Node 0's NVLink neighbors are exactly {1, 2, 3, 4}.
        let n0: BTreeSet<NodeId> = pairs
            .keys()
            .filter(|(a, b)| *a == NodeId(0) || *b == NodeId(0))
            .map(|&(a, b)| if a == NodeId(0) { b } else { a })
            .collect();
        assert_eq!(n0, ids(&[1, 2, 3, 4]));
        // Every GPU has NVLink degree 4 counting multiplicity.
        for g in 0..8u16 {
            let deg: usize = pairs
                .iter()
                .filter(|((a, b), _)| *a == NodeId(g) || *b == NodeId(g))
                .map(|(_, m)| m)
                .sum();
            assert_eq!(deg, 4, "gpu {g}");
        }
    }

    #[test]
    fn dgx1v_degrees_and_extra_links() {
        let t = preset(Preset::Dgx1V);
        let pairs = t.undirected_pairs(LinkClass::Nvlink);
        // (3,5) is connected on the V100 generation only.
        assert_eq!(pairs.get(&(NodeId(3), NodeId(5))), Some(&1));
        assert_eq!(
            preset(Preset::Dgx1P).undirected_pairs(LinkClass::Nvlink).get(&(NodeId(3), NodeId(5))),
            None
        );
        // Every GPU has NVLink degree 6 counting multiplicity.
        for g in 0..8u16 {
            let deg: usize = pairs
                .iter()
                .filter(|((a, b), _)| *a == NodeId(g) || *b == NodeId(g))
                .map(|(_, m)| m)
                .sum();
            assert_eq!(deg, 6, "gpu {g}");
        }
    }

    #[test]
    fn dgx2_shape() {
        let t = preset(Preset::Dgx2);
        assert_eq!(t.gpus().len(), 16);
        let nv = filter_to(&t, LinkClass::Nvlink);
        assert!(nv.is_switch_attached());
        for g in 0..16u16 {
            let up = nv
                .links
                .iter()
                .filter(|l| l.src == NodeId(g) && l.dst == NodeId(16))
                .count();
            assert_eq!(up, 6, "gpu {g} uplinks");
        }
        let total_up: f64 = nv
            .links
            .iter()
            .filter(|l| l.src == NodeId(0))
            .map(|l| l.gbps)
            .sum();
        assert!((total_up - 75.0).abs() < 1e-9);
    }

    #[test]
    fn subgraph_drops_missing_links() {
        // {1,4,5,6} on the P100 mesh: no direct NVLink between 1 and 4.
        let t = preset(Preset::Dgx1P);
        let s = subgraph(&t, &ids(&[1, 4, 5, 6])).unwrap();
        let pairs = filter_to(&s, LinkClass::Nvlink).undirected_pairs(LinkClass::Nvlink);
        assert!(!pairs.contains_key(&(NodeId(1), NodeId(4))));
        let keys: Vec<(NodeId, NodeId)> = pairs.keys().copied().collect();
        assert_eq!(
            keys,
            vec![
                (NodeId(1), NodeId(5)),
                (NodeId(4), NodeId(5)),
                (NodeId(4), NodeId(6)),
                (NodeId(5), NodeId(6)),
            ]
        );
    }

    #[test]
    fn subgraph_2367_is_the_four_cycle() {
        let t = preset(Preset::Dgx1V);
        let s = subgraph(&t, &ids(&[2, 3, 6, 7])).unwrap();
        let pairs = s.undirected_pairs(LinkClass::Nvlink);
        let keys: Vec<(NodeId, NodeId)> = pairs.keys().copied().collect();
        assert_eq!(
            keys,
            vec![
                (NodeId(2), NodeId(3)),
                (NodeId(2), NodeId(6)),
                (NodeId(3), NodeId(7)),
                (NodeId(6), NodeId(7)),
            ]
        );
    }

    #[test]
    fn subgraph_identity_and_idempotence() {
        let t = preset(Preset::Dgx1V);
        let all: BTreeSet<NodeId> = t.nodes.iter().map(|n| n.id).collect();
        let s = subgraph(&t, &all).unwrap();
        assert_eq!(s, t);

        let alloc = ids(&[1, 4, 5, 6]);
        let once = subgraph(&t, &alloc).unwrap();
        let twice = subgraph(&once, &alloc).unwrap();
        assert_eq!(once.nodes, twice.nodes);
        assert_eq!(once.links, twice.links);
    }

    #[test]
    fn subgraph_prunes_empty_pcie_domain() {
        let t = preset(Preset::Dgx1P);
        let s = subgraph(&t, &ids(&[0, 1])).unwrap();
        // Domain switch 9 lost all its GPUs; it and the root bridge go away.
        assert!(!s.has_node(NodeId(9)));
        assert!(!s.has_node(NodeId(10)));
        assert!(s.has_node(NodeId(8)));
    }

    #[test]
    fn filter_links_classes() {
        let t = preset(Preset::Dgx1V);
        let nv = filter_to(&t, LinkClass::Nvlink);
        assert!(nv.links.iter().all(|l| l.class == LinkClass::Nvlink));
        assert_eq!(nv.nodes.len(), t.nodes.len());
        let pcie = filter_to(&t, LinkClass::Pcie);
        assert!(pcie.links.iter().all(|l| l.class == LinkClass::Pcie));
        let none = filter_links(&t, &BTreeSet::new());
        assert!(none.links.is_empty());
    }

    #[test]
    fn round_trip_preserves_graph() {
        for p in [Preset::Dgx1P, Preset::Dgx1V, Preset::Dgx2] {
            let t = preset(p);
            let json = serde_json::to_string(&to_doc(&t)).unwrap();
            let t2 = load_topology(&json).unwrap();
            assert_eq!(t.nodes, t2.nodes);
            assert_eq!(t.links, t2.links);
        }
    }
}
