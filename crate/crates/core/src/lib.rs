//! Planner and simulator for collective communication over heterogeneous
//! GPU interconnects.
//!
//! The pipeline mirrors how a topology-aware collectives library works:
//!
//! 1. [`topology`] models the interconnect as a directed capacitated
//!    multigraph (hardware presets, a JSON ingestion format, subgraph
//!    extraction for partial GPU allocations).
//! 2. [`treegen`] packs directed spanning trees (arborescences) rooted at a
//!    chosen vertex to maximize the aggregate transfer rate, then minimizes
//!    the number of trees with an exact integer program.
//! 3. [`collectives`] turns tree packings into chunked, pipelined transfer
//!    schedules for Broadcast / Gather / AllReduce / AllGather, including
//!    hybrid NVLink+PCIe splits, one-hop switch trees and a three-phase
//!    multi-server AllReduce.
//! 4. [`sim`] replays a schedule on a deterministic link-level
//!    discrete-event simulator and hosts the MIAD chunk-size tuner.
//! 5. [`baseline`] builds NCCL-style rings on the same topologies and
//!    computes the theoretical ring-vs-tree speedup.
//!
//! [`replay`] provides symbolic schedule audits (byte conservation,
//! reduction correctness) used by the test suites.

pub mod baseline;
pub mod collectives;
pub mod graph;
pub mod replay;
pub mod sim;
pub mod topology;
pub mod treegen;

use thiserror::Error;

/// Crate-wide error type.
///
/// Exit-code mapping for front ends: [`Error::Internal`] signals a broken
/// invariant (exit 2); everything else is input validation (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error in field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("unknown preset `{0}` (expected dgx1p, dgx1v or dgx2)")]
    UnknownPreset(String),

    #[error("topology is not connected: {0}")]
    Disconnected(String),

    #[error("node {0} is unreachable from the root")]
    Unreachable(String),

    #[error("{0}")]
    Plan(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
