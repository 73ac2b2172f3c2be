//! Deterministic link-level discrete-event simulator.
//!
//! Fluid-flow model: an op becomes eligible when its dependencies complete
//! and it reaches the head of its stream; eligible transfers progress at the
//! link capacity divided among concurrently active streams (recomputed at
//! every event boundary). Byte-for-byte exact on uncontended pipelines.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::collectives::{CollectiveSchedule, OpKind};
use crate::topology::Topology;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arbitration {
    /// Concurrent streams share a link equally.
    Fair,
    /// The lowest stream id monopolizes a contended link until it blocks --
    /// an adversarial stand-in for driver scheduling.
    FifoUnfair,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    /// Seconds charged once per transfer op at issue (command launch cost).
    pub per_op_overhead: f64,
    /// Throughput multiplier for links feeding a reduce+forward (kernel
    /// cost); in (0, 1].
    pub reduce_throughput_factor: f64,
    pub link_arbitration: Arbitration,
    /// Peer-access toggle latency used by hybrid planning, seconds.
    pub t_dpa: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            per_op_overhead: 10e-6,
            reduce_throughput_factor: 0.85,
            link_arbitration: Arbitration::Fair,
            t_dpa: crate::collectives::DEFAULT_T_DPA,
        }
    }
}

impl SimConfig {
    pub fn zero_overhead() -> SimConfig {
        SimConfig { per_op_overhead: 0.0, reduce_throughput_factor: 1.0, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.per_op_overhead < 0.0 {
            return Err(Error::validation("per_op_overhead", "must be nonnegative"));
        }
        if !(self.reduce_throughput_factor > 0.0 && self.reduce_throughput_factor <= 1.0) {
            return Err(Error::validation("reduce_throughput_factor", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkBusy {
    pub link: usize,
    pub src: u16,
    pub dst: u16,
    pub busy_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub op: usize,
    pub stream: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub total_time: f64,
    /// data_bytes / total_time, in GB/s (1e9 bytes per second).
    pub throughput_gbps: f64,
    pub data_bytes: u64,
    pub per_link_busy: Vec<LinkBusy>,
    pub per_stream_timeline: Vec<TimelineEntry>,
}

/// Transfers within a millionth of a byte of done are done.
const BYTE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
enum OpState {
    Blocked,
    Issuing { until: f64 },
    Active { remaining: f64 },
    Done,
}

/// Event-driven replay of a schedule over the topology's link capacities.
pub fn simulate(t: &Topology, s: &CollectiveSchedule, cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let n = s.ops.len();
    if n == 0 {
        return Err(Error::validation("schedule", "no ops to simulate"));
    }
    for op in &s.ops {
        if let Some(li) = op.link {
            if li >= t.links.len() {
                return Err(Error::validation(
                    "schedule",
                    format!("op {} references link {} outside the topology", op.id, li),
                ));
            }
        }
        for &d in &op.depends_on {
            if d >= n {
                return Err(Error::validation(
                    "schedule",
                    format!("op {} depends on unknown op {}", op.id, d),
                ));
            }
        }
    }

    // Stream queues in list order.
    let mut queues: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for op in &s.ops {
        queues.entry(op.stream_id).or_default().push(op.id);
    }
    let mut head: BTreeMap<u32, usize> = queues.keys().map(|&k| (k, 0usize)).collect();
    let mut deps_left: Vec<usize> = s.ops.iter().map(|o| o.depends_on.len()).collect();
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for op in &s.ops {
        for &d in &op.depends_on {
            dependents[d].push(op.id);
        }
    }
    let mut state = vec![OpState::Blocked; n];
    let mut start_time = vec![0.0f64; n];
    let mut end_time = vec![0.0f64; n];
    let mut done = 0usize;
    let mut now = 0.0f64;
    let mut busy = vec![0.0f64; t.links.len()];
    // At most one op per stream can be issuing or active, so these sets stay
    // small; every loop below walks them rather than the whole op list.
    let mut active: Vec<usize> = Vec::new();
    let mut issuing: Vec<usize> = Vec::new();
    let stream_ids: Vec<u32> = queues.keys().copied().collect();

    macro_rules! complete {
        ($i:expr, $time:expr) => {{
            state[$i] = OpState::Done;
            end_time[$i] = $time;
            done += 1;
            for &d in &dependents[$i] {
                deps_left[d] -= 1;
            }
            let sid = s.ops[$i].stream_id;
            *head.get_mut(&sid).unwrap() += 1;
        }};
    }

    while done < n {
        // Issue newly eligible heads; zero-cost ops may cascade within one
        // instant, so repeat until stable.
        loop {
            let mut progressed = false;
            for &sid in &stream_ids {
                let pos = head[&sid];
                if pos >= queues[&sid].len() {
                    continue;
                }
                let i = queues[&sid][pos];
                if state[i] != OpState::Blocked || deps_left[i] > 0 {
                    continue;
                }
                if s.ops[i].min_start > now + 1e-18 {
                    continue;
                }
                start_time[i] = now;
                if s.ops[i].kind == OpKind::LocalReduce {
                    complete!(i, now);
                    progressed = true;
                } else if cfg.per_op_overhead > 0.0 {
                    state[i] = OpState::Issuing { until: now + cfg.per_op_overhead };
                    issuing.push(i);
                } else if s.ops[i].bytes == 0 {
                    complete!(i, now);
                    progressed = true;
                } else {
                    state[i] = OpState::Active { remaining: s.ops[i].bytes as f64 };
                    active.push(i);
                }
            }
            if !progressed {
                break;
            }
        }

        if done == n {
            break;
        }

        // Per-link active sets and rates (bytes/second).
        active.sort_unstable();
        let mut active_per_link: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &active {
            active_per_link.entry(s.ops[i].link.unwrap()).or_default().push(i);
        }
        let mut rate: BTreeMap<usize, f64> = BTreeMap::new();
        for (&li, ops) in &active_per_link {
            let cap = t.links[li].gbps * 1e9;
            match cfg.link_arbitration {
                Arbitration::Fair => {
                    let share = cap / ops.len() as f64;
                    for &i in ops {
                        rate.insert(i, share * kind_factor(cfg, s.ops[i].kind));
                    }
                }
                Arbitration::FifoUnfair => {
                    let winner =
                        *ops.iter().min_by_key(|&&i| (s.ops[i].stream_id, i)).unwrap();
                    for &i in ops {
                        rate.insert(i, 0.0);
                    }
                    rate.insert(winner, cap * kind_factor(cfg, s.ops[winner].kind));
                }
            }
        }

        // Next event time: transfer/issue completions or a min_start gate.
        let mut te = f64::INFINITY;
        for &i in &issuing {
            if let OpState::Issuing { until } = state[i] {
                te = te.min(until);
            }
        }
        for &i in &active {
            if let OpState::Active { remaining } = state[i] {
                let r = rate[&i];
                if r > 0.0 {
                    te = te.min(now + remaining / r);
                }
            }
        }
        for &sid in &stream_ids {
            let pos = head[&sid];
            if pos >= queues[&sid].len() {
                continue;
            }
            let i = queues[&sid][pos];
            if state[i] == OpState::Blocked && deps_left[i] == 0 && s.ops[i].min_start > now {
                te = te.min(s.ops[i].min_start);
            }
        }
        if !te.is_finite() {
            return Err(Error::Plan(
                "schedule deadlocked: dependency cycle or unsatisfiable ordering".into(),
            ));
        }
        let dt = (te - now).max(0.0);

        for &li in active_per_link.keys() {
            busy[li] += dt;
        }

        // Progress and complete.
        for &i in &issuing {
            if let OpState::Issuing { until } = state[i] {
                if until <= te + 1e-18 {
                    if s.ops[i].bytes == 0 {
                        complete!(i, te);
                    } else {
                        state[i] = OpState::Active { remaining: s.ops[i].bytes as f64 };
                        active.push(i);
                    }
                }
            }
        }
        issuing.retain(|&i| matches!(state[i], OpState::Issuing { .. }));
        let snapshot: Vec<usize> = active.clone();
        for i in snapshot {
            if let OpState::Active { remaining } = state[i] {
                let r = rate.get(&i).copied().unwrap_or(0.0);
                let left = remaining - r * dt;
                // Absolute sub-byte epsilon: float residue must not strand
                // an op whose completion time rounds into the current event.
                if r > 0.0 && left <= BYTE_EPS {
                    complete!(i, te);
                } else {
                    state[i] = OpState::Active { remaining: left };
                }
            }
        }
        active.retain(|&i| matches!(state[i], OpState::Active { .. }));
        now = te;
    }

    let total_time = now;
    let per_link_busy = busy
        .iter()
        .enumerate()
        .filter(|(_, &b)| b > 0.0)
        .map(|(li, &b)| LinkBusy {
            link: li,
            src: t.links[li].src.0,
            dst: t.links[li].dst.0,
            busy_fraction: if total_time > 0.0 { b / total_time } else { 0.0 },
        })
        .collect();
    let mut per_stream_timeline: Vec<TimelineEntry> = s
        .ops
        .iter()
        .map(|o| TimelineEntry {
            op: o.id,
            stream: o.stream_id,
            start: start_time[o.id],
            end: end_time[o.id],
        })
        .collect();
    per_stream_timeline.sort_by(|a, b| {
        (a.stream, a.start, a.op).partial_cmp(&(b.stream, b.start, b.op)).unwrap()
    });
    Ok(SimReport {
        total_time,
        throughput_gbps: if total_time > 0.0 {
            s.data_bytes as f64 / total_time / 1e9
        } else {
            f64::INFINITY
        },
        data_bytes: s.data_bytes,
        per_link_busy,
        per_stream_timeline,
    })
}

fn kind_factor(cfg: &SimConfig, kind: OpKind) -> f64 {
    match kind {
        OpKind::ReduceForward => cfg.reduce_throughput_factor,
        _ => 1.0,
    }
}

// ---------------------------------------------------------------------------
// MIAD chunk size tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunePoint {
    pub chunk_bytes: u64,
    pub throughput_gbps: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub chunk_bytes: u64,
    pub report: SimReport,
    pub trajectory: Vec<TunePoint>,
}

/// Relative improvement below this fraction counts as "not increasing".
pub const MIAD_PLATEAU: f64 = 0.01;
pub const MIAD_ITER_CAP: usize = 64;

/// Multiplicative-increase additive-decrease search over chunk sizes driven
/// by simulated throughput: double while the throughput keeps increasing,
/// then walk back in `init_bytes` steps until it stops improving. Returns
/// the best observed point and the visited trajectory.
pub fn tune_chunk_size(
    t: &Topology,
    mut planner: impl FnMut(u64) -> Result<CollectiveSchedule>,
    cfg: &SimConfig,
    init_bytes: u64,
) -> Result<TuneResult> {
    if init_bytes == 0 {
        return Err(Error::validation("init_bytes", "must be positive"));
    }
    let mut trajectory: Vec<TunePoint> = Vec::new();
    let mut best: Option<(u64, SimReport)> = None;
    let mut measure = |size: u64,
                       trajectory: &mut Vec<TunePoint>,
                       best: &mut Option<(u64, SimReport)>|
     -> Result<f64> {
        let sched = planner(size)?;
        let report = simulate(t, &sched, cfg)?;
        let tput = report.throughput_gbps;
        trajectory.push(TunePoint { chunk_bytes: size, throughput_gbps: tput });
        let better = match best {
            Some((_, r)) => tput > r.throughput_gbps,
            None => true,
        };
        if better {
            *best = Some((size, report));
        }
        Ok(tput)
    };

    let mut size = init_bytes;
    let mut prev = measure(size, &mut trajectory, &mut best)?;
    let mut iters = 1usize;
    // Multiplicative increase while the throughput strictly increases.
    let mut overshoot = None;
    while iters < MIAD_ITER_CAP {
        let next = size * 2;
        let tput = measure(next, &mut trajectory, &mut best)?;
        iters += 1;
        if tput > prev * (1.0 + MIAD_PLATEAU) {
            size = next;
            prev = tput;
        } else if tput >= prev * (1.0 - MIAD_PLATEAU) {
            // Plateau: neither a real increase nor a decrease.
            break;
        } else {
            overshoot = Some(next);
            break;
        }
    }
    // Additive decrease from the overshoot point until improvement stops.
    if let Some(start) = overshoot {
        let mut cur = start;
        let mut last = trajectory.last().unwrap().throughput_gbps;
        while iters < MIAD_ITER_CAP && cur > init_bytes {
            let next = cur
                .saturating_sub(init_bytes)
                .max(crate::collectives::ELEMENT_BYTES);
            let tput = measure(next, &mut trajectory, &mut best)?;
            iters += 1;
            if tput <= last * (1.0 + MIAD_PLATEAU) {
                break;
            }
            cur = next;
            last = tput;
        }
    }
    let (chunk_bytes, report) = best.unwrap();
    Ok(TuneResult { chunk_bytes, report, trajectory })
}
