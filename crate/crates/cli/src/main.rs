//! `treepack`: plan tree packings, generate collective schedules, simulate
//! them, and compare against the ring baseline.
//!
//! Exit codes: 0 success, 1 validation error, 2 internal invariant
//! violation.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use treepack_core::baseline;
use treepack_core::collectives::{self, CollectiveRequest, CollectiveSchedule, Primitive};
use treepack_core::sim::{self, Arbitration, SimConfig};
use treepack_core::topology::{self, LinkClass, NodeId, Preset, Topology};
use treepack_core::treegen::{self, MwuConfig, TreePacking};
use treepack_core::Error;

#[derive(Parser)]
#[command(name = "treepack", version, about = "Spanning-tree packing planner and simulator for GPU collectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack trees on a topology and emit a collective schedule.
    Plan(PlanArgs),
    /// Simulate a schedule (from a file or planned inline).
    Simulate(SimulateArgs),
    /// Ring-vs-tree speedup comparison over allocations.
    Compare(CompareArgs),
    /// List or dump the built-in hardware presets.
    Presets(PresetsArgs),
}

#[derive(Args, Clone)]
struct TopologyArgs {
    /// Topology document (JSON).
    #[arg(long, conflicts_with = "preset")]
    topology: Option<PathBuf>,
    /// Built-in preset: dgx1p, dgx1v or dgx2.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated GPU ids to allocate (default: all GPUs).
    #[arg(long, value_delimiter = ',')]
    gpus: Vec<u16>,
}

impl TopologyArgs {
    fn load(&self) -> Result<Topology, Error> {
        let base = match (&self.topology, &self.preset) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
                topology::load_topology(&text)?
            }
            (None, Some(name)) => topology::preset(Preset::parse(name)?),
            _ => {
                return Err(Error::validation(
                    "topology",
                    "provide exactly one of --topology or --preset",
                ))
            }
        };
        if self.gpus.is_empty() {
            Ok(base)
        } else {
            let alloc: BTreeSet<NodeId> = self.gpus.iter().map(|&g| NodeId(g)).collect();
            topology::subgraph(&base, &alloc)
        }
    }
}

#[derive(Args, Clone)]
struct PlanOpts {
    /// Collective primitive: broadcast, gather, allreduce, allgather.
    #[arg(long, default_value = "broadcast")]
    primitive: String,
    /// Root GPU id (rooted primitives).
    #[arg(long)]
    root: Option<u16>,
    /// Payload size, with binary suffixes (e.g. 500M, 1G).
    #[arg(long, default_value = "256M")]
    bytes: String,
    /// Chunk size for pipelining.
    #[arg(long, default_value = "4M")]
    chunk_bytes: String,
    /// MWU approximation parameter.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// ILP rate gap threshold.
    #[arg(long, default_value_t = 0.05)]
    gap: f64,
    /// Plan over NVLink and PCIe together with the equal-finish split.
    #[arg(long)]
    hybrid: bool,
    /// Peer-access toggle latency for hybrid planning, seconds.
    #[arg(long, default_value_t = collectives::DEFAULT_T_DPA)]
    t_dpa: f64,
    /// Merge same-position streams across trees.
    #[arg(long)]
    share_streams: bool,
    /// Link class used for single-class planning.
    #[arg(long, value_enum, default_value_t = ClassArg::Nvlink)]
    link_class: ClassArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassArg {
    Nvlink,
    Pcie,
}

impl From<ClassArg> for LinkClass {
    fn from(c: ClassArg) -> LinkClass {
        match c {
            ClassArg::Nvlink => LinkClass::Nvlink,
            ClassArg::Pcie => LinkClass::Pcie,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    topo: TopologyArgs,
    #[command(flatten)]
    opts: PlanOpts,
    /// Output prefix for artifacts.
    #[arg(long, default_value = "treepack")]
    out: PathBuf,
    /// Also emit a Graphviz rendering of the packing.
    #[arg(long)]
    emit_dot: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Schedule artifact produced by `plan`; omit to plan inline.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[command(flatten)]
    topo: TopologyArgs,
    #[command(flatten)]
    opts: PlanOpts,
    #[arg(long, default_value = "treepack")]
    out: PathBuf,
    /// Per-op launch overhead in microseconds.
    #[arg(long, default_value_t = 10.0)]
    overhead_us: f64,
    /// Reduce+forward throughput factor in (0, 1].
    #[arg(long, default_value_t = 0.85)]
    reduce_factor: f64,
    /// Link arbitration: fair or fifo-unfair.
    #[arg(long, default_value = "fair")]
    arbitration: String,
    /// Search the chunk size with the MIAD scheme and print the trajectory.
    #[arg(long)]
    tune_chunks: bool,
    /// Starting chunk size for --tune-chunks.
    #[arg(long, default_value = "1M")]
    init_chunk: String,
    /// Also emit the per-op timeline as CSV.
    #[arg(long)]
    emit_timeline: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    topo: TopologyArgs,
    #[arg(long, default_value = "broadcast")]
    primitive: String,
    /// Evaluate every unique allocation bin instead of one allocation.
    #[arg(long)]
    all_allocations: bool,
    #[arg(long, default_value = "treepack")]
    out: PathBuf,
}

#[derive(Args)]
struct PresetsArgs {
    /// Write the named preset as a topology document to stdout.
    #[arg(long)]
    dump: Option<String>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    inputs: serde_json::Value,
    config: serde_json::Value,
    outputs: Vec<String>,
}

#[derive(Serialize, serde::Deserialize)]
struct ScheduleDoc {
    topology: Topology,
    schedule: CollectiveSchedule,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Presets(args) => cmd_presets(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("treepack: {e}");
            match e {
                Error::Internal(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Parse a size with base-2 suffixes K/M/G.
fn parse_bytes(s: &str) -> Result<u64, Error> {
    let s = s.trim();
    let (digits, mult) = match s.chars().last() {
        Some('K') | Some('k') => (&s[..s.len() - 1], 1u64 << 10),
        Some('M') | Some('m') => (&s[..s.len() - 1], 1u64 << 20),
        Some('G') | Some('g') => (&s[..s.len() - 1], 1u64 << 30),
        _ => (s, 1),
    };
    let v: f64 = digits
        .parse()
        .map_err(|_| Error::validation("bytes", format!("cannot parse size `{s}`")))?;
    if v <= 0.0 {
        return Err(Error::validation("bytes", "size must be positive"));
    }
    Ok((v * mult as f64) as u64)
}

fn build_request(opts: &PlanOpts) -> Result<CollectiveRequest, Error> {
    let primitive = Primitive::parse(&opts.primitive)
        .ok_or_else(|| Error::validation("primitive", format!("unknown `{}`", opts.primitive)))?;
    Ok(CollectiveRequest {
        primitive,
        root: opts.root.map(NodeId),
        data_bytes: parse_bytes(&opts.bytes)?,
        reduce_op: match primitive {
            Primitive::AllReduce => Some(collectives::ReduceOp::Sum),
            _ => None,
        },
    })
}

/// Pack and plan per the request: hybrid when asked, one-hop trees on
/// switch-attached fabrics for the many-to-many primitives, otherwise the
/// MWU + ILP pipeline on the selected link class.
fn plan_pipeline(
    t: &Topology,
    opts: &PlanOpts,
) -> Result<(Option<TreePacking>, CollectiveSchedule), Error> {
    let req = build_request(opts)?;
    let chunk = parse_bytes(&opts.chunk_bytes)?;
    let cfg = MwuConfig { epsilon: opts.epsilon, ..Default::default() };
    if opts.hybrid {
        let sched = collectives::plan_hybrid(t, &req, &cfg, opts.t_dpa, chunk)?;
        let sched = if opts.share_streams { collectives::share_streams(&sched) } else { sched };
        return Ok((None, sched));
    }
    let class: LinkClass = opts.link_class.into();
    let view = treepack_core::graph::prune_relays(&topology::filter_to(t, class));
    if view.is_switch_attached()
        && matches!(req.primitive, Primitive::AllReduce | Primitive::AllGather)
    {
        let sched = collectives::plan_switch_onehop(t, &req, chunk)?;
        let sched = if opts.share_streams { collectives::share_streams(&sched) } else { sched };
        return Ok((None, sched));
    }
    let root = match req.root {
        Some(r) if req.primitive.is_rooted() => r,
        _ => collectives::best_allreduce_root(&view)?,
    };
    let raw = treegen::pack_mwu(&view, root, &cfg)?;
    let refined = treegen::refine_ilp(&raw, &view, opts.gap)?;
    let sub_req = CollectiveRequest { root: Some(root), ..req.clone() };
    let sched = match req.primitive {
        Primitive::Broadcast => collectives::plan_broadcast(&refined, &sub_req, chunk)?,
        Primitive::Gather => collectives::plan_gather(&refined, &sub_req, chunk)?,
        Primitive::AllReduce => collectives::plan_allreduce(&refined, &req, chunk)?,
        Primitive::AllGather => collectives::plan_allgather(&refined, &req, chunk)?,
    };
    let sched = if opts.share_streams { collectives::share_streams(&sched) } else { sched };
    Ok((Some(refined), sched))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("serialize: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| Error::Validation { field: path.display().to_string(), message: e.to_string() })?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(
    prefix: &Path,
    command: &str,
    inputs: serde_json::Value,
    config: serde_json::Value,
    outputs: &[PathBuf],
) -> Result<(), Error> {
    let mut outs: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    let path = with_suffix(prefix, ".manifest.json");
    outs.push(path.display().to_string());
    let manifest = RunManifest { command: command.to_string(), inputs, config, outputs: outs };
    write_json(&path, &manifest)
}

fn topo_inputs(t: &TopologyArgs) -> serde_json::Value {
    serde_json::json!({
        "topology": t.topology.as_ref().map(|p| p.display().to_string()),
        "preset": t.preset,
        "gpus": t.gpus,
    })
}

fn plan_config(o: &PlanOpts) -> serde_json::Value {
    serde_json::json!({
        "primitive": o.primitive,
        "root": o.root,
        "bytes": o.bytes,
        "chunk_bytes": o.chunk_bytes,
        "epsilon": o.epsilon,
        "gap": o.gap,
        "hybrid": o.hybrid,
        "t_dpa": o.t_dpa,
        "share_streams": o.share_streams,
    })
}

fn cmd_plan(args: PlanArgs) -> Result<(), Error> {
    let t = args.topo.load()?;
    let (packing, sched) = plan_pipeline(&t, &args.opts)?;
    let mut outputs = Vec::new();

    if let Some(p) = &packing {
        let path = with_suffix(&args.out, ".packing.json");
        write_json(&path, p)?;
        println!(
            "packing: {} trees, total rate {:.3} GB/s (root {})",
            p.trees.len(),
            p.total_rate,
            p.root
        );
        outputs.push(path);
        if args.emit_dot {
            let path = with_suffix(&args.out, ".dot");
            std::fs::write(&path, treegen::to_dot(&p.topology, p)).map_err(|e| {
                Error::Validation { field: path.display().to_string(), message: e.to_string() }
            })?;
            outputs.push(path);
        }
    } else {
        println!("packing: {} schedule trees (direct construction)", sched.trees.len());
    }
    for w in &sched.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "schedule: {} ops on {} streams, chunk {} bytes, splits {:?}",
        sched.ops.len(),
        sched.n_streams,
        sched.chunk_bytes,
        sched.data_split
    );
    let spath = with_suffix(&args.out, ".schedule.json");
    write_json(&spath, &ScheduleDoc { topology: t, schedule: sched })?;
    outputs.push(spath);
    write_manifest(&args.out, "plan", topo_inputs(&args.topo), plan_config(&args.opts), &outputs)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let arbitration = match args.arbitration.as_str() {
        "fair" => Arbitration::Fair,
        "fifo-unfair" | "fifo_unfair" | "unfair" => Arbitration::FifoUnfair,
        other => {
            return Err(Error::validation("arbitration", format!("unknown `{other}`")))
        }
    };
    let cfg = SimConfig {
        per_op_overhead: args.overhead_us * 1e-6,
        reduce_throughput_factor: args.reduce_factor,
        link_arbitration: arbitration,
        t_dpa: args.opts.t_dpa,
    };
    let mut outputs = Vec::new();

    let (t, report) = if let Some(path) = &args.schedule {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let doc: ScheduleDoc =
            serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let report = sim::simulate(&doc.topology, &doc.schedule, &cfg)?;
        (doc.topology, report)
    } else {
        let t = args.topo.load()?;
        if args.tune_chunks {
            let init = parse_bytes(&args.init_chunk)?;
            let mut opts = args.opts.clone();
            let result = sim::tune_chunk_size(
                &t,
                |chunk| {
                    opts.chunk_bytes = chunk.to_string();
                    plan_pipeline(&t, &opts).map(|(_, s)| s)
                },
                &cfg,
                init,
            )?;
            println!("MIAD trajectory:");
            for p in &result.trajectory {
                println!("  chunk {:>12} B  ->  {:.3} GB/s", p.chunk_bytes, p.throughput_gbps);
            }
            println!("selected chunk: {} bytes", result.chunk_bytes);
            (t, result.report)
        } else {
            let (_, sched) = plan_pipeline(&t, &args.opts)?;
            let report = sim::simulate(&t, &sched, &cfg)?;
            (t, report)
        }
    };
    let _ = t;

    println!(
        "simulated: {:.6} s total, {:.3} GB/s over {} bytes",
        report.total_time, report.throughput_gbps, report.data_bytes
    );
    let rpath = with_suffix(&args.out, ".report.json");
    write_json(&rpath, &report)?;
    outputs.push(rpath);
    if args.emit_timeline {
        let mut csv = String::from("op,stream,start,end\n");
        for e in &report.per_stream_timeline {
            csv.push_str(&format!("{},{},{:.9},{:.9}\n", e.op, e.stream, e.start, e.end));
        }
        let tpath = with_suffix(&args.out, ".timeline.csv");
        std::fs::write(&tpath, csv).map_err(|e| Error::Validation {
            field: tpath.display().to_string(),
            message: e.to_string(),
        })?;
        outputs.push(tpath);
    }
    write_manifest(
        &args.out,
        "simulate",
        serde_json::json!({
            "schedule": args.schedule.as_ref().map(|p| p.display().to_string()),
            "inline": topo_inputs(&args.topo),
        }),
        serde_json::json!({
            "plan": plan_config(&args.opts),
            "overhead_us": args.overhead_us,
            "reduce_factor": args.reduce_factor,
            "arbitration": args.arbitration,
            "tune_chunks": args.tune_chunks,
        }),
        &outputs,
    )
}

fn cmd_compare(args: CompareArgs) -> Result<(), Error> {
    let primitive = Primitive::parse(&args.primitive)
        .ok_or_else(|| Error::validation("primitive", format!("unknown `{}`", args.primitive)))?;
    // Comparison runs on the full machine; allocations select subsets.
    let base = match (&args.topo.topology, &args.topo.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            topology::load_topology(&text)?
        }
        (None, Some(name)) => topology::preset(Preset::parse(name)?),
        _ => {
            return Err(Error::validation(
                "topology",
                "provide exactly one of --topology or --preset",
            ))
        }
    };
    let allocations: Vec<Vec<NodeId>> = if args.all_allocations {
        baseline::allocation_bins(&base)?
            .into_iter()
            .map(|b| b.representative)
            .collect()
    } else if !args.topo.gpus.is_empty() {
        vec![args.topo.gpus.iter().map(|&g| NodeId(g)).collect()]
    } else {
        vec![base.gpus()]
    };

    let mut csv = String::from("allocation,gpus,ring_class,ring_count,ring_rate,tree_rate,speedup\n");
    let mut speedups = Vec::new();
    for alloc in &allocations {
        let set: BTreeSet<NodeId> = alloc.iter().copied().collect();
        let sub = topology::subgraph(&base, &set)?;
        let unit = topology::unit_caps(&sub);
        let rings = baseline::build_rings(&unit)?;
        let rrate = baseline::ring_rate(&rings, primitive, alloc.len())?;
        let nv = topology::unit_caps(&topology::filter_to(&sub, LinkClass::Nvlink));
        let tree_rate = baseline::best_root_tree_rate(&nv)?;
        let speedup = baseline::theoretical_speedup(&base, &set, primitive)?;
        speedups.push(speedup);
        let names: Vec<String> = alloc.iter().map(|g| g.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{:?},{},{:.6},{:.6},{:.6}\n",
            names.join("-"),
            alloc.len(),
            rings.link_class_used,
            rings.rings.len(),
            rrate,
            tree_rate,
            speedup
        ));
    }
    let cpath = with_suffix(&args.out, ".compare.csv");
    std::fs::write(&cpath, &csv).map_err(|e| Error::Validation {
        field: cpath.display().to_string(),
        message: e.to_string(),
    })?;
    let mut sorted = speedups.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = sorted.first().copied().unwrap_or(f64::NAN);
    let max = sorted.last().copied().unwrap_or(f64::NAN);
    let median = if sorted.is_empty() { f64::NAN } else { sorted[sorted.len() / 2] };
    println!(
        "{} allocations: speedup min {:.3} / median {:.3} / max {:.3}",
        speedups.len(),
        min,
        median,
        max
    );
    write_manifest(
        &args.out,
        "compare",
        serde_json::json!({
            "preset": args.topo.preset,
            "topology": args.topo.topology.as_ref().map(|p| p.display().to_string()),
            "gpus": args.topo.gpus,
            "all_allocations": args.all_allocations,
        }),
        serde_json::json!({ "primitive": args.primitive }),
        &[cpath],
    )
}

fn cmd_presets(args: PresetsArgs) -> Result<(), Error> {
    match args.dump {
        Some(name) => {
            let t = topology::preset(Preset::parse(&name)?);
            let doc = topology::to_doc(&t);
            println!(
                "{}",
                serde_json::to_string_pretty(&doc)
                    .map_err(|e| Error::Internal(e.to_string()))?
            );
        }
        None => {
            for (name, desc) in [
                ("dgx1p", "8 GPUs, cube-mesh NVLink Gen1 (18 GB/s), 4 links per GPU, PCIe overlay"),
                ("dgx1v", "8 GPUs, cube-mesh + extra-link cycle, NVLink Gen2 (23 GB/s), 6 links per GPU, PCIe overlay"),
                ("dgx2", "16 GPUs on an NVSwitch, 6 x 12.5 GB/s links per GPU per direction, PCIe overlay"),
            ] {
                println!("{name:8} {desc}");
            }
        }
    }
    Ok(())
}
