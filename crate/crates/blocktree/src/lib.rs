//! Geometric memory allocation and mapping over sparse block trees.
//!
//! Memory is carved into blocks whose size is a power of two and whose base
//! address is a multiple of that size. Free space is tracked as *niches*,
//! the missing children of a sparse binary tree over the address space, and
//! summarized by per-node saturating counter vectors that guide best-fit
//! placement without scanning. Requests of arbitrary size are *ledged* into
//! descending power-of-two pieces that self-align when laid back to back.
//! The same trees double as page tables: virtual spaces map offsets to
//! backing blocks and populate themselves on access. A byte-exact reference
//! model and a pipelined hardware-style simulator round out the crate.

pub mod diff;
pub mod geometry;
pub mod ledge;
pub mod niche_map;
pub mod oracle;
pub mod pipeline;
pub mod render;
pub mod vtree;
pub mod rtree;
pub mod trace;
pub mod tree;

pub use diff::{DiffConfig, DiffRunner, Mismatch, MutationFlags};
pub use geometry::{BlockId, ConfigError, GeometryConfig};
pub use niche_map::NicheMap;
pub use pipeline::{
    CompletedOp, MuxFairness, Outcome, PipelineId, PipelineRequest, PreallocStats, RequestKind,
    SimConfig, SimMetrics, Simulator, StageId, Workload,
};
pub use render::{parse_rendering, render_bytes, render_tree, Rendered};
pub use rtree::{AllocError, Allocator, AllocatorStats, PlacementPolicy};
pub use trace::{parse_trace, ApplyError, Session, TraceLine, TraceOp};
pub use tree::{BlockTree, LocalView, Node, NodeKind, Payload};
pub use vtree::{
    AccessPlan, BackingSource, PopulationStrategy, SpaceError, SpaceHandle, SpaceManager,
    VPayload, VirtualSpace,
};
