//! The trace grammar and a replay session.
//!
//! One op per line:
//!
//! ```text
//! alloc <tag> <size>
//! free <tag>
//! vspace <tag> <doubling|fixed|paging:<bits>> <size>
//! vdestroy <tag>
//! access <tag> <offset>
//! ```
//!
//! `#` starts a comment, blank lines are skipped, numbers may be
//! decimal or 0x-hex. Workload files additionally allow `@tick <t>`
//! directives: every later op is injected at that tick. Ticks must
//! not decrease.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::geometry::GeometryConfig;
use crate::rtree::{AllocError, Allocator, PlacementPolicy};
use crate::vtree::{PopulationStrategy, SpaceError, SpaceHandle, SpaceManager};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    Alloc { tag: String, size: u64 },
    Free { tag: String },
    VSpace { tag: String, strategy: PopulationStrategy, size: u64 },
    VDestroy { tag: String },
    Access { tag: String, offset: u64 },
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceOp::Alloc { tag, size } => write!(f, "alloc {tag} {size}"),
            TraceOp::Free { tag } => write!(f, "free {tag}"),
            TraceOp::VSpace { tag, strategy, size } => {
                let s = match strategy {
                    PopulationStrategy::Doubling => "doubling".to_string(),
                    PopulationStrategy::FixedLedged => "fixed".to_string(),
                    PopulationStrategy::FixedPaging { page_level } => {
                        format!("paging:{page_level}")
                    }
                };
                write!(f, "vspace {tag} {s} {size}")
            }
            TraceOp::VDestroy { tag } => write!(f, "vdestroy {tag}"),
            TraceOp::Access { tag, offset } => write!(f, "access {tag} {offset:#x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub line: usize,
    /// Injection tick; `None` outside workload files.
    pub tick: Option<u64>,
    pub op: TraceOp,
}

impl TraceLine {
    pub fn new(op: TraceOp) -> Self {
        TraceLine { line: 0, tick: None, op }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct TraceParseError {
    pub line: usize,
    pub msg: String,
}

fn parse_num(token: &str) -> Option<u64> {
    if let Some(hex) = token.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()
    } else {
        token.parse().ok()
    }
}

/// Parses a trace; `allow_ticks` admits `@tick` directives.
pub fn parse_trace(text: &str, allow_ticks: bool) -> Result<Vec<TraceLine>, TraceParseError> {
    let mut out = Vec::new();
    let mut tick: Option<u64> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let err = |msg: String| TraceParseError { line: lineno, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let verb = tokens.next().unwrap();
        let mut arg = |name: &str| {
            tokens
                .next()
                .map(str::to_string)
                .ok_or_else(|| err(format!("missing {name}")))
        };
        let op = match verb {
            "@tick" => {
                if !allow_ticks {
                    return Err(err("@tick is only valid in workload files".into()));
                }
                let t = parse_num(&arg("tick")?).ok_or_else(|| err("bad tick".into()))?;
                if tick.is_some_and(|prev| t < prev) {
                    return Err(err(format!("tick {t} decreases")));
                }
                tick = Some(t);
                if let Some(extra) = tokens.next() {
                    return Err(err(format!("trailing token `{extra}`")));
                }
                continue;
            }
            "alloc" => {
                let tag = arg("tag")?;
                let size =
                    parse_num(&arg("size")?).ok_or_else(|| err("bad size".into()))?;
                TraceOp::Alloc { tag, size }
            }
            "free" => TraceOp::Free { tag: arg("tag")? },
            "vspace" => {
                let tag = arg("tag")?;
                let strat = arg("strategy")?;
                let strategy = match strat.as_str() {
                    "doubling" => PopulationStrategy::Doubling,
                    "fixed" => PopulationStrategy::FixedLedged,
                    other => match other.strip_prefix("paging:").and_then(parse_num) {
                        Some(bits) if bits <= u8::MAX as u64 => {
                            PopulationStrategy::FixedPaging { page_level: bits as u8 }
                        }
                        _ => return Err(err(format!("unknown strategy `{strat}`"))),
                    },
                };
                let size =
                    parse_num(&arg("size")?).ok_or_else(|| err("bad size".into()))?;
                TraceOp::VSpace { tag, strategy, size }
            }
            "vdestroy" => TraceOp::VDestroy { tag: arg("tag")? },
            "access" => {
                let tag = arg("tag")?;
                let offset =
                    parse_num(&arg("offset")?).ok_or_else(|| err("bad offset".into()))?;
                TraceOp::Access { tag, offset }
            }
            other => return Err(err(format!("unknown op `{other}`"))),
        };
        if let Some(extra) = tokens.next() {
            return Err(err(format!("trailing token `{extra}`")));
        }
        out.push(TraceLine { line: lineno, tick, op });
    }
    Ok(out)
}

/// Writes lines back in the grammar; `@tick` directives are emitted
/// whenever the tick changes.
pub fn format_trace(lines: &[TraceLine]) -> String {
    let mut out = String::new();
    let mut tick: Option<u64> = None;
    for l in lines {
        if l.tick != tick {
            if let Some(t) = l.tick {
                out.push_str(&format!("@tick {t}\n"));
            }
            tick = l.tick;
        }
        out.push_str(&format!("{}\n", l.op));
    }
    out
}

/// A trace op that cannot be applied; aborts a replay.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("tag `{0}` is already live")]
    DuplicateTag(String),
    #[error("tag `{0}` is not live")]
    UnknownTag(String),
    #[error("tag `{0}` names a {1}, not a {2}")]
    WrongKind(String, &'static str, &'static str),
    #[error("invalid op: {0}")]
    Invalid(String),
    #[error("internal invariant failure: {0}")]
    Internal(String),
}

/// Counted soft outcomes of a replay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionEvents {
    pub oom: u64,
    pub traps: u64,
}

/// Replays trace ops against one allocator and one space manager.
pub struct Session {
    allocator: Allocator,
    manager: SpaceManager,
    max_pieces: Option<usize>,
    chunks: BTreeMap<String, (u64, u64)>,
    handles: BTreeMap<String, SpaceHandle>,
    events: SessionEvents,
}

impl Session {
    pub fn new(config: GeometryConfig, policy: PlacementPolicy, max_pieces: Option<usize>) -> Self {
        Session {
            allocator: Allocator::new(config, policy),
            manager: SpaceManager::new(config),
            max_pieces,
            chunks: BTreeMap::new(),
            handles: BTreeMap::new(),
            events: SessionEvents::default(),
        }
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn manager(&self) -> &SpaceManager {
        &self.manager
    }

    pub fn events(&self) -> SessionEvents {
        self.events
    }

    pub fn live_chunks(&self) -> impl Iterator<Item = (&str, (u64, u64))> {
        self.chunks.iter().map(|(t, &c)| (t.as_str(), c))
    }

    pub fn live_spaces(&self) -> impl Iterator<Item = (&str, SpaceHandle)> {
        self.handles.iter().map(|(t, &h)| (t.as_str(), h))
    }

    fn check_fresh(&self, tag: &str) -> Result<(), ApplyError> {
        if self.chunks.contains_key(tag) || self.handles.contains_key(tag) {
            return Err(ApplyError::DuplicateTag(tag.to_string()));
        }
        Ok(())
    }

    /// Applies one op. Out-of-memory and traps are counted, not errors.
    pub fn apply(&mut self, op: &TraceOp) -> Result<(), ApplyError> {
        match op {
            TraceOp::Alloc { tag, size } => {
                self.check_fresh(tag)?;
                match self.allocator.alloc_chunk(*size, self.max_pieces) {
                    Ok(chunk) => {
                        self.chunks.insert(tag.clone(), (chunk.base, *size));
                    }
                    Err(AllocError::OutOfMemory { .. }) => self.events.oom += 1,
                    Err(e) => return Err(ApplyError::Invalid(e.to_string())),
                }
            }
            TraceOp::Free { tag } => {
                if self.handles.contains_key(tag) {
                    return Err(ApplyError::WrongKind(tag.clone(), "space", "chunk"));
                }
                let (base, size) = self
                    .chunks
                    .remove(tag)
                    .ok_or_else(|| ApplyError::UnknownTag(tag.clone()))?;
                self.allocator
                    .free_chunk(base, size)
                    .map_err(|e| ApplyError::Internal(e.to_string()))?;
            }
            TraceOp::VSpace { tag, strategy, size } => {
                self.check_fresh(tag)?;
                match self.manager.create_space(*strategy, *size, &mut self.allocator) {
                    Ok(handle) => {
                        self.handles.insert(tag.clone(), handle);
                    }
                    Err(SpaceError::Backing(AllocError::OutOfMemory { .. })) => {
                        self.events.oom += 1;
                    }
                    Err(e @ (SpaceError::BadSize { .. } | SpaceError::BadPageLevel { .. })) => {
                        return Err(ApplyError::Invalid(e.to_string()));
                    }
                    Err(e) => return Err(ApplyError::Internal(e.to_string())),
                }
            }
            TraceOp::VDestroy { tag } => {
                if self.chunks.contains_key(tag) {
                    return Err(ApplyError::WrongKind(tag.clone(), "chunk", "space"));
                }
                let handle = self
                    .handles
                    .remove(tag)
                    .ok_or_else(|| ApplyError::UnknownTag(tag.clone()))?;
                self.manager
                    .destroy_space(handle, &mut self.allocator)
                    .map_err(|e| ApplyError::Internal(e.to_string()))?;
            }
            TraceOp::Access { tag, offset } => {
                if self.chunks.contains_key(tag) {
                    return Err(ApplyError::WrongKind(tag.clone(), "chunk", "space"));
                }
                let handle = *self
                    .handles
                    .get(tag)
                    .ok_or_else(|| ApplyError::UnknownTag(tag.clone()))?;
                match self.manager.access(handle, *offset, &mut self.allocator) {
                    Ok(_) => {}
                    Err(SpaceError::Trap { .. }) => self.events.traps += 1,
                    Err(SpaceError::Backing(AllocError::OutOfMemory { .. })) => {
                        self.events.oom += 1;
                    }
                    Err(e @ SpaceError::OutOfBounds { .. }) => {
                        return Err(ApplyError::Invalid(e.to_string()));
                    }
                    Err(e) => return Err(ApplyError::Internal(e.to_string())),
                }
            }
        }
        Ok(())
    }
}
