//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Run with
//!     cargo test -p treepack-core --test acceptance -- --nocapture

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use common::{enumerate_arborescences, lp_to_f64, packing_lp_optimum, random_digraph};
use treepack_core::baseline::{allocation_bins, build_rings, ring_rate, theoretical_speedup};
use treepack_core::collectives::{
    hybrid_split, plan_allreduce, plan_broadcast, plan_hybrid, plan_switch_onehop,
    CollectiveRequest, Primitive, ReduceOp,
};
use treepack_core::replay::replay_allreduce_sum;
use treepack_core::sim::{simulate, tune_chunk_size, SimConfig};
use treepack_core::topology::{
    filter_to, load_topology, preset, unit_caps, LinkClass, NodeId, Preset, Topology,
};
use treepack_core::treegen::{optimal_rate_bound, pack_mwu, refine_ilp, MwuConfig};

fn nv_unit(p: Preset) -> Topology {
    unit_caps(&treepack_core::graph::prune_relays(&filter_to(&preset(p), LinkClass::Nvlink)))
}

fn chain(n: u16, gbps: f64) -> Topology {
    let nodes: Vec<String> =
        (0..n).map(|i| format!("{{\"id\": {i}, \"kind\": \"gpu\"}}")).collect();
    let links: Vec<String> = (0..n - 1)
        .map(|i| {
            format!(
                "{{\"src\": {i}, \"dst\": {}, \"gbps\": {gbps}, \"class\": \"nvlink\", \"bidirectional\": true}}",
                i + 1
            )
        })
        .collect();
    load_topology(&format!(
        "{{\"name\": \"chain{n}\", \"nodes\": [{}], \"links\": [{}]}}",
        nodes.join(","),
        links.join(",")
    ))
    .unwrap()
}

/// Criterion 1: MWU + ILP refinement on the V100-generation 8-GPU NVLink
/// graph with unit capacities yields exactly 6 trees of weight 1.0 and total
/// rate 6, within 10 seconds.
#[test]
fn criterion_01_dgx1v_tree_minimization() {
    let t0 = Instant::now();
    let t = nv_unit(Preset::Dgx1V);
    let cfg = MwuConfig { epsilon: 0.05, ..Default::default() };
    let raw = pack_mwu(&t, NodeId(0), &cfg).unwrap();
    let refined = refine_ilp(&raw, &t, 0.05).unwrap();
    let elapsed = t0.elapsed();
    assert_eq!(refined.trees.len(), 6, "tree count");
    for w in &refined.weights {
        assert!((w - 1.0).abs() < 1e-9, "weight {w}");
    }
    assert!((refined.total_rate - 6.0).abs() < 1e-9, "rate {}", refined.total_rate);
    assert!(refined.is_feasible(&t));
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "PASS criterion 1: dgx1v unit-capacity packing refined {} MWU trees (rate {:.3}) to 6 trees x 1.0, rate 6, in {elapsed:?}",
        raw.trees.len(),
        raw.total_rate
    );
}

/// Criterion 2: on 200 random digraphs (3-6 nodes, random capacities) the
/// MWU rate reaches (1 - eps) of the max-flow bound, and the bound equals
/// the exhaustive arborescence-enumeration LP within 1e-6 relative, all in
/// under 60 seconds.
#[test]
fn criterion_02_edmonds_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = MwuConfig { epsilon: 0.05, ..Default::default() };
    let mut worst_ratio = f64::INFINITY;
    for case in 0..200 {
        let n = 3 + (case % 4) as u16;
        let t = random_digraph(&mut rng, n);
        let bound = optimal_rate_bound(&t, NodeId(0)).unwrap();
        let trees = enumerate_arborescences(&t, NodeId(0));
        assert!(!trees.is_empty(), "case {case}: reachable graph must have a tree");
        let lp = lp_to_f64(&packing_lp_optimum(&t, &trees));
        assert!(
            (bound - lp).abs() <= 1e-6 * lp.max(1.0),
            "case {case}: bound {bound} vs exhaustive LP {lp}"
        );
        let pack = pack_mwu(&t, NodeId(0), &cfg).unwrap();
        assert!(pack.is_feasible(&t), "case {case}: infeasible packing");
        assert!(
            pack.total_rate >= (1.0 - cfg.epsilon) * bound - 1e-9,
            "case {case}: rate {} below (1-eps) * {bound}",
            pack.total_rate
        );
        worst_ratio = worst_ratio.min(pack.total_rate / bound.max(1e-12));
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "PASS criterion 2: 200 random graphs, bound == exhaustive LP, MWU/OPT worst ratio {worst_ratio:.4} >= 0.95, in {elapsed:?}"
    );
}

/// Criterion 3: ring arithmetic on the P100 preset with unit bandwidth
/// reproduces the 32/14 AllReduce effective rate exactly.
#[test]
fn criterion_03_ring_rate_arithmetic() {
    let t = unit_caps(&preset(Preset::Dgx1P));
    let rings = build_rings(&t).unwrap();
    assert_eq!(rings.rings.len(), 4, "directed ring count");
    let rate = ring_rate(&rings, Primitive::AllReduce, 8).unwrap();
    assert_eq!(rate, 32.0 / 14.0, "exact rational equality as f64");
    println!(
        "PASS criterion 3: 4 directed rings on 8 GPUs give AllReduce rate 32/14 = {rate} exactly"
    );
}

/// Criterion 4: speedups over all unique allocation bins are >= 1 with the
/// maximum in [5, 7]; bin counts are exactly 14 (P100) and 46 (V100);
/// runtime under 2 minutes.
#[test]
fn criterion_04_figure8_floor_and_ceiling() {
    let t0 = Instant::now();
    let mut max_speedup: f64 = 0.0;
    let mut min_speedup = f64::INFINITY;
    for (p, expect_bins) in [(Preset::Dgx1P, 14usize), (Preset::Dgx1V, 46usize)] {
        let t = preset(p);
        let bins = allocation_bins(&t).unwrap();
        assert_eq!(bins.len(), expect_bins, "{p:?} bin count");
        for bin in &bins {
            let alloc: BTreeSet<NodeId> = bin.representative.iter().copied().collect();
            let s = theoretical_speedup(&t, &alloc, Primitive::Broadcast).unwrap();
            assert!(
                s >= 1.0 - 1e-9,
                "{p:?} bin {:?}: speedup {s} below 1",
                bin.representative
            );
            max_speedup = max_speedup.max(s);
            min_speedup = min_speedup.min(s);
        }
    }
    let elapsed = t0.elapsed();
    assert!(
        (5.0..=7.0).contains(&max_speedup),
        "max speedup {max_speedup} outside [5, 7]"
    );
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "PASS criterion 4: 14 + 46 bins, speedups in [{min_speedup:.3}, {max_speedup:.3}], floor >= 1, ceiling in [5,7], in {elapsed:?}"
    );
}

/// Criterion 5: the chunk pipelining law. Two chunks over a 4-GPU chain cut
/// the time to exactly 2/3; (c + h - 1)/c holds exactly for c in {1,2,4,8},
/// h in {1,2,3,7} at zero overhead.
#[test]
fn criterion_05_chunk_pipelining_law() {
    let cfg = SimConfig::zero_overhead();
    let bytes: u64 = 96 << 20;
    // The headline 4-GPU case.
    let t = chain(4, 23.0);
    let p = pack_mwu(&t, NodeId(0), &MwuConfig::default()).unwrap();
    let req = CollectiveRequest {
        primitive: Primitive::Broadcast,
        root: Some(NodeId(0)),
        data_bytes: bytes,
        reduce_op: None,
    };
    let one = simulate(&t, &plan_broadcast(&p, &req, bytes).unwrap(), &cfg).unwrap();
    let two = simulate(&t, &plan_broadcast(&p, &req, bytes / 2).unwrap(), &cfg).unwrap();
    let ratio = two.total_time / one.total_time;
    assert!((ratio - 2.0 / 3.0).abs() < 1e-12, "2-chunk ratio {ratio}");

    for h in [1u64, 2, 3, 7] {
        let t = chain(h as u16 + 1, 16.0);
        let p = pack_mwu(&t, NodeId(0), &MwuConfig::default()).unwrap();
        let hop = bytes as f64 / 16.0e9;
        for c in [1u64, 2, 4, 8] {
            let s = plan_broadcast(&p, &req, bytes / c).unwrap();
            let r = simulate(&t, &s, &cfg).unwrap();
            let expect = (c + h - 1) as f64 / c as f64 * hop;
            assert!(
                (r.total_time - expect).abs() <= 1e-12 * expect,
                "h={h} c={c}: {} vs {}",
                r.total_time,
                expect
            );
        }
    }
    println!(
        "PASS criterion 5: 2-chunk 4-GPU chain time ratio {ratio:.15} = 2/3; (c+h-1)/c exact for c in {{1,2,4,8}}, h in {{1,2,3,7}}"
    );
}

/// Criterion 6: on the full 8-GPU V100-generation packing at 500 MB, the
/// simulated AllReduce throughput is half the Broadcast throughput within
/// 10%. Launch overhead and the reduce kernel factor are turned off to
/// isolate the structural two-pass / shared-directions effect.
#[test]
fn criterion_06_allreduce_broadcast_ratio() {
    let t = treepack_core::graph::prune_relays(&filter_to(&preset(Preset::Dgx1V), LinkClass::Nvlink));
    let refined = refine_ilp(&pack_mwu(&t, NodeId(0), &MwuConfig::default()).unwrap(), &t, 0.05)
        .unwrap();
    let bytes: u64 = 500 << 20;
    let chunk: u64 = 2 << 20;
    let cfg = SimConfig::zero_overhead();
    let bc_req = CollectiveRequest {
        primitive: Primitive::Broadcast,
        root: Some(NodeId(0)),
        data_bytes: bytes,
        reduce_op: None,
    };
    let ar_req = CollectiveRequest {
        primitive: Primitive::AllReduce,
        root: None,
        data_bytes: bytes,
        reduce_op: Some(ReduceOp::Sum),
    };
    let bc = simulate(&t, &plan_broadcast(&refined, &bc_req, chunk).unwrap(), &cfg).unwrap();
    let ar = simulate(&t, &plan_allreduce(&refined, &ar_req, chunk).unwrap(), &cfg).unwrap();
    let ratio = ar.throughput_gbps / bc.throughput_gbps;
    assert!(
        (0.45..=0.55).contains(&ratio),
        "AllReduce/Broadcast throughput ratio {ratio} (bc {:.1} GB/s, ar {:.1} GB/s)",
        bc.throughput_gbps,
        ar.throughput_gbps
    );
    println!(
        "PASS criterion 6: broadcast {:.1} GB/s, allreduce {:.1} GB/s, ratio {ratio:.3} within 0.5 +- 10%",
        bc.throughput_gbps, ar.throughput_gbps
    );
}

/// Criterion 7: the hybrid split. With T_dpa = 0 bytes split in exact
/// bandwidth proportion; with T_dpa > 0 and a large payload the PCIe and
/// NVLink sides finish within one chunk-time of each other.
#[test]
fn criterion_07_hybrid_split() {
    // Exact proportional reduction at T_dpa = 0.
    let (p, n) = hybrid_split(100 << 20, 10.0, 40.0, 0.0);
    assert_eq!(p, 20 << 20);
    assert_eq!(n, 80 << 20);

    // Simulated equal-finish: dual-class pair topology isolates the law
    // from pipeline fill effects.
    let t = load_topology(
        r#"{
        "name": "dual",
        "nodes": [{"id": 0, "kind": "gpu"}, {"id": 1, "kind": "gpu"}],
        "links": [
            {"src": 0, "dst": 1, "gbps": 40.0, "class": "nvlink", "bidirectional": true},
            {"src": 0, "dst": 1, "gbps": 10.0, "class": "pcie", "bidirectional": true}
        ]
    }"#,
    )
    .unwrap();
    let t_dpa = 0.002;
    let chunk: u64 = 1 << 20;
    let req = CollectiveRequest {
        primitive: Primitive::Broadcast,
        root: Some(NodeId(0)),
        data_bytes: 1 << 30,
        reduce_op: None,
    };
    let sched = plan_hybrid(&t, &req, &MwuConfig::default(), t_dpa, chunk).unwrap();
    assert!(sched.warnings.is_empty(), "{:?}", sched.warnings);
    let report = simulate(&t, &sched, &SimConfig::zero_overhead()).unwrap();
    let mut nvl_finish: f64 = 0.0;
    let mut pcie_finish: f64 = 0.0;
    for e in &report.per_stream_timeline {
        let op = &sched.ops[e.op];
        if let Some(li) = op.link {
            match t.links[li].class {
                LinkClass::Nvlink => nvl_finish = nvl_finish.max(e.end),
                LinkClass::Pcie => pcie_finish = pcie_finish.max(e.end),
                LinkClass::Network => {}
            }
        }
    }
    // One chunk-time at the PCIe rate (the slower side).
    let chunk_time = chunk as f64 / 10.0e9;
    assert!(
        (pcie_finish - nvl_finish).abs() <= chunk_time + 1e-12,
        "PCIe finishes at {pcie_finish}, NVLink at {nvl_finish}, chunk time {chunk_time}"
    );
    println!(
        "PASS criterion 7: T_dpa=0 split exact (20/80 MB); with T_dpa={t_dpa}s finish gap {:.3e}s <= one chunk-time {:.3e}s",
        (pcie_finish - nvl_finish).abs(),
        chunk_time
    );
}

/// Criterion 8: symbolic replay of generated AllReduce schedules with SUM
/// over random integer vectors equals the elementwise ground truth on 100
/// random (topology, chunking) instances, exactly.
#[test]
fn criterion_08_allreduce_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = MwuConfig { epsilon: 0.1, ..Default::default() };
    for case in 0..100 {
        let n = rng.gen_range(2..=6u16);
        let t = common::random_bidirectional(&mut rng, n);
        let root = NodeId(rng.gen_range(0..n));
        let p = pack_mwu(&t, root, &cfg).unwrap();
        let elems = rng.gen_range(16..=512usize);
        let bytes = (elems * 4) as u64;
        let chunk = (rng.gen_range(1..=elems) * 4) as u64;
        let req = CollectiveRequest {
            primitive: Primitive::AllReduce,
            root: None,
            data_bytes: bytes,
            reduce_op: Some(ReduceOp::Sum),
        };
        let s = plan_allreduce(&p, &req, chunk).unwrap();
        let inputs: BTreeMap<NodeId, Vec<i64>> = t
            .gpus()
            .into_iter()
            .map(|g| {
                let v: Vec<i64> =
                    (0..elems).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect();
                (g, v)
            })
            .collect();
        let mut expect = vec![0i64; elems];
        for v in inputs.values() {
            for (e, x) in expect.iter_mut().zip(v) {
                *e += x;
            }
        }
        let out = replay_allreduce_sum(&t, &s, &inputs)
            .unwrap_or_else(|e| panic!("case {case}: replay failed: {e}"));
        for (g, v) in out {
            assert_eq!(v, expect, "case {case}: GPU {g} result mismatch");
        }
    }
    println!("PASS criterion 8: 100 random AllReduce replays match the elementwise sum exactly");
}

/// Criterion 9: the MIAD tuner at 10 us launch overhead lands within 2% of
/// the brute-force best over its reachable candidate set and plateaus
/// within 10 iterations on the 4-GPU broadcast scenario.
#[test]
fn criterion_09_miad_tuner() {
    let t = chain(4, 23.0);
    let p = pack_mwu(&t, NodeId(0), &MwuConfig::default()).unwrap();
    let bytes: u64 = 256 << 20;
    let req = CollectiveRequest {
        primitive: Primitive::Broadcast,
        root: Some(NodeId(0)),
        data_bytes: bytes,
        reduce_op: None,
    };
    let cfg = SimConfig { per_op_overhead: 10e-6, ..SimConfig::zero_overhead() };
    let init: u64 = 1 << 20;
    let result =
        tune_chunk_size(&t, |chunk| plan_broadcast(&p, &req, chunk), &cfg, init).unwrap();
    assert!(
        result.trajectory.len() <= 10,
        "trajectory has {} points",
        result.trajectory.len()
    );
    // Brute force over the tuner's reachable candidate set: the doubling
    // ladder plus the additive walk-back below every ladder point.
    let mut candidates = BTreeSet::new();
    let mut s = init;
    while s <= bytes * 2 {
        candidates.insert(s);
        let mut back = s;
        while back > init {
            back -= init;
            candidates.insert(back);
        }
        s *= 2;
    }
    let mut best = 0.0f64;
    let mut best_size = 0;
    for &cand in &candidates {
        let r = simulate(&t, &plan_broadcast(&p, &req, cand).unwrap(), &cfg).unwrap();
        if r.throughput_gbps > best {
            best = r.throughput_gbps;
            best_size = cand;
        }
    }
    assert!(
        result.report.throughput_gbps >= 0.98 * best,
        "tuned {} GB/s at {} bytes vs brute-force {} GB/s at {} bytes",
        result.report.throughput_gbps,
        result.chunk_bytes,
        best,
        best_size
    );
    println!(
        "PASS criterion 9: MIAD stabilized in {} iterations at {} MiB, {:.2} GB/s >= 98% of brute-force {:.2} GB/s",
        result.trajectory.len(),
        result.chunk_bytes >> 20,
        result.report.throughput_gbps,
        best
    );
}

/// Criterion 10: hardware-scale absolute numbers are out of reach by
/// construction; the stand-in structural check is that one-hop planning on
/// the 16-GPU switch preset yields 16 one-hop trees with 1/16 splits.
#[test]
fn criterion_10_dgx2_onehop_shape() {
    let t = preset(Preset::Dgx2);
    let bytes: u64 = 512 << 20;
    let req = CollectiveRequest {
        primitive: Primitive::AllReduce,
        root: None,
        data_bytes: bytes,
        reduce_op: Some(ReduceOp::Sum),
    };
    let s = plan_switch_onehop(&t, &req, 8 << 20).unwrap();
    assert_eq!(s.trees.len(), 16);
    let each = bytes / 16;
    assert!(s.data_split.iter().all(|&b| b == each), "{:?}", s.data_split);
    for op in s.transfer_ops() {
        assert!(op.hop <= 1, "one logical hop max");
    }
    // Every tree is rooted at a distinct GPU.
    let roots: BTreeSet<NodeId> = s.trees.iter().map(|tr| tr.root).collect();
    assert_eq!(roots.len(), 16);
    println!(
        "PASS criterion 10: 16 one-hop trees, each carrying {}/16 of the payload through the switch",
        bytes
    );
}
