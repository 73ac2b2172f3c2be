//! Browser bindings: a thin JSON facade over the planner, simulator and
//! tuner for the static demo page in `www/`. Inputs and outputs are JSON
//! strings so the page needs no generated glue beyond wasm-bindgen's.

use serde::Serialize;
use std::collections::BTreeSet;
use wasm_bindgen::prelude::*;

use treepack_core::baseline;
use treepack_core::collectives::{self, CollectiveRequest, Primitive, ReduceOp};
use treepack_core::sim::{self, SimConfig};
use treepack_core::topology::{self, LinkClass, NodeId, Preset, Topology};
use treepack_core::treegen::{self, MwuConfig};

#[derive(Serialize)]
struct LinkOut {
    src: u16,
    dst: u16,
    gbps: f64,
    class: String,
}

#[derive(Serialize)]
struct NodeOut {
    id: u16,
    kind: String,
}

#[derive(Serialize)]
struct TreeOut {
    root: u16,
    weight: f64,
    links: Vec<usize>,
}

#[derive(Serialize)]
struct PlanOut {
    nodes: Vec<NodeOut>,
    links: Vec<LinkOut>,
    trees: Vec<TreeOut>,
    total_rate: f64,
    mwu_tree_count: usize,
    ring_count: usize,
    ring_class: String,
    ring_rate: f64,
    speedup: f64,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct SimOut {
    total_time: f64,
    throughput_gbps: f64,
    ops: usize,
    streams: u32,
    link_busy: Vec<(u16, u16, f64)>,
}

#[derive(Serialize)]
struct TuneOut {
    trajectory: Vec<(u64, f64)>,
    best_chunk: u64,
    best_throughput: f64,
}

fn parse_alloc(t: &Topology, gpus_csv: &str) -> Result<Topology, String> {
    let gpus_csv = gpus_csv.trim();
    if gpus_csv.is_empty() {
        return Ok(t.clone());
    }
    let alloc: BTreeSet<NodeId> = gpus_csv
        .split(',')
        .map(|s| s.trim().parse::<u16>().map(NodeId))
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad GPU list: {e}"))?;
    topology::subgraph(t, &alloc).map_err(|e| e.to_string())
}

fn load(preset_name: &str, gpus_csv: &str) -> Result<Topology, String> {
    let p = Preset::parse(preset_name).map_err(|e| e.to_string())?;
    parse_alloc(&topology::preset(p), gpus_csv)
}

fn build_schedule(
    t: &Topology,
    primitive: &str,
    root: u16,
    bytes: u64,
    chunk: u64,
) -> Result<(collectives::CollectiveSchedule, usize, f64, Vec<TreeOut>), String> {
    let primitive = Primitive::parse(primitive).ok_or("unknown primitive")?;
    let req = CollectiveRequest {
        primitive,
        root: primitive.is_rooted().then_some(NodeId(root)),
        data_bytes: bytes.max(4),
        reduce_op: matches!(primitive, Primitive::AllReduce).then_some(ReduceOp::Sum),
    };
    let cfg = MwuConfig::default();
    let nv = treepack_core::graph::prune_relays(&topology::filter_to(t, LinkClass::Nvlink));
    if nv.is_switch_attached()
        && matches!(primitive, Primitive::AllReduce | Primitive::AllGather)
    {
        let sched = collectives::plan_switch_onehop(t, &req, chunk).map_err(|e| e.to_string())?;
        let trees = sched
            .trees
            .iter()
            .map(|tr| TreeOut { root: tr.root.0, weight: tr.weight, links: tr.links.clone() })
            .collect();
        let count = sched.trees.len();
        return Ok((sched, count, count as f64 * 12.5, trees));
    }
    let root = match req.root {
        Some(r) => r,
        None => collectives::best_allreduce_root(&nv).map_err(|e| e.to_string())?,
    };
    let raw = treegen::pack_mwu(&nv, root, &cfg).map_err(|e| e.to_string())?;
    let refined = treegen::refine_ilp(&raw, &nv, 0.05).map_err(|e| e.to_string())?;
    let mwu_count = raw.trees.len();
    let rate = refined.total_rate;
    let sub_req = CollectiveRequest { root: Some(root), ..req.clone() };
    let mut sched = match primitive {
        Primitive::Broadcast => collectives::plan_broadcast(&refined, &sub_req, chunk),
        Primitive::Gather => collectives::plan_gather(&refined, &sub_req, chunk),
        Primitive::AllReduce => collectives::plan_allreduce(&refined, &req, chunk),
        Primitive::AllGather => collectives::plan_allgather(&refined, &req, chunk),
    }
    .map_err(|e| e.to_string())?;
    // Remap tree/op links onto the caller topology for drawing.
    let map = topology::filter_index_map(t, &topology::filter_to(t, LinkClass::Nvlink));
    // prune_relays only removes nodes that had no NVLink links, so link
    // indices survive; map from the filtered list directly.
    for op in sched.ops.iter_mut() {
        if let Some(li) = op.link {
            op.link = Some(map[li]);
        }
    }
    let trees = sched
        .trees
        .iter()
        .map(|tr| TreeOut {
            root: tr.root.0,
            weight: tr.weight,
            links: tr.links.iter().map(|&li| map[li]).collect(),
        })
        .collect();
    Ok((sched, mwu_count, rate, trees))
}

/// Plan a collective on a preset allocation; returns topology, packed trees,
/// the ring baseline and the theoretical speedup as JSON.
#[wasm_bindgen]
pub fn plan_json(
    preset_name: &str,
    gpus_csv: &str,
    primitive: &str,
    root: u16,
    bytes: f64,
    chunk: f64,
) -> String {
    match plan_impl(preset_name, gpus_csv, primitive, root, bytes as u64, chunk as u64) {
        Ok(out) => out,
        Err(e) => format!("{{\"error\": {}}}", serde_json::to_string(&e).unwrap()),
    }
}

fn plan_impl(
    preset_name: &str,
    gpus_csv: &str,
    primitive: &str,
    root: u16,
    bytes: u64,
    chunk: u64,
) -> Result<String, String> {
    let t = load(preset_name, gpus_csv)?;
    let (sched, mwu_count, rate, trees) = build_schedule(&t, primitive, root, bytes, chunk)?;
    let rings = baseline::build_rings(&topology::unit_caps(&t)).map_err(|e| e.to_string())?;
    let alloc: BTreeSet<NodeId> = t.gpus().into_iter().collect();
    let base = topology::preset(Preset::parse(preset_name).unwrap());
    let speedup = baseline::theoretical_speedup(&base, &alloc, Primitive::Broadcast)
        .unwrap_or(f64::NAN);
    let prim = Primitive::parse(primitive).unwrap();
    let ring_rate = baseline::ring_rate(&rings, prim, t.gpus().len()).unwrap_or(f64::NAN);
    let out = PlanOut {
        nodes: t
            .nodes
            .iter()
            .map(|n| NodeOut { id: n.id.0, kind: format!("{:?}", n.kind).to_lowercase() })
            .collect(),
        links: t
            .links
            .iter()
            .map(|l| LinkOut {
                src: l.src.0,
                dst: l.dst.0,
                gbps: l.gbps,
                class: format!("{:?}", l.class).to_lowercase(),
            })
            .collect(),
        trees,
        total_rate: rate,
        mwu_tree_count: mwu_count,
        ring_count: rings.rings.len(),
        ring_class: format!("{:?}", rings.link_class_used).to_lowercase(),
        ring_rate,
        speedup,
        warnings: sched.warnings.clone(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Simulate the planned schedule; returns time, throughput and per-link
/// utilization as JSON.
#[wasm_bindgen]
pub fn simulate_json(
    preset_name: &str,
    gpus_csv: &str,
    primitive: &str,
    root: u16,
    bytes: f64,
    chunk: f64,
    overhead_us: f64,
) -> String {
    match simulate_impl(preset_name, gpus_csv, primitive, root, bytes as u64, chunk as u64, overhead_us)
    {
        Ok(out) => out,
        Err(e) => format!("{{\"error\": {}}}", serde_json::to_string(&e).unwrap()),
    }
}

fn simulate_impl(
    preset_name: &str,
    gpus_csv: &str,
    primitive: &str,
    root: u16,
    bytes: u64,
    chunk: u64,
    overhead_us: f64,
) -> Result<String, String> {
    let t = load(preset_name, gpus_csv)?;
    let (sched, ..) = build_schedule(&t, primitive, root, bytes, chunk)?;
    let cfg = SimConfig { per_op_overhead: overhead_us * 1e-6, ..SimConfig::zero_overhead() };
    let report = sim::simulate(&t, &sched, &cfg).map_err(|e| e.to_string())?;
    let out = SimOut {
        total_time: report.total_time,
        throughput_gbps: report.throughput_gbps,
        ops: sched.ops.len(),
        streams: sched.n_streams,
        link_busy: report
            .per_link_busy
            .iter()
            .map(|b| (b.src, b.dst, b.busy_fraction))
            .collect(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Run the MIAD chunk-size search and return the trajectory as JSON.
#[wasm_bindgen]
pub fn tune_json(
    preset_name: &str,
    gpus_csv: &str,
    primitive: &str,
    root: u16,
    bytes: f64,
    init_chunk: f64,
    overhead_us: f64,
) -> String {
    match tune_impl(preset_name, gpus_csv, primitive, root, bytes as u64, init_chunk as u64, overhead_us)
    {
        Ok(out) => out,
        Err(e) => format!("{{\"error\": {}}}", serde_json::to_string(&e).unwrap()),
    }
}

fn tune_impl(
    preset_name: &str,
    gpus_csv: &str,
    primitive: &str,
    root: u16,
    bytes: u64,
    init_chunk: u64,
    overhead_us: f64,
) -> Result<String, String> {
    let t = load(preset_name, gpus_csv)?;
    let cfg = SimConfig { per_op_overhead: overhead_us * 1e-6, ..SimConfig::zero_overhead() };
    let result = sim::tune_chunk_size(
        &t,
        |chunk| {
            build_schedule(&t, primitive, root, bytes, chunk)
                .map(|(s, ..)| s)
                .map_err(treepack_core::Error::Plan)
        },
        &cfg,
        init_chunk.max(4),
    )
    .map_err(|e| e.to_string())?;
    let out = TuneOut {
        trajectory: result
            .trajectory
            .iter()
            .map(|p| (p.chunk_bytes, p.throughput_gbps))
            .collect(),
        best_chunk: result.chunk_bytes,
        best_throughput: result.report.throughput_gbps,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}
