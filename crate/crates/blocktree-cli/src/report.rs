//! The stats document written after a replay.
//!
//! Serialized as JSON with sorted keys so identical runs produce
//! byte-identical documents. `events.invalid_ops` exists for schema
//! parity with the pipeline metrics; replay aborts on the first
//! invalid op, so a written report always shows zero there.

use std::collections::BTreeMap;

use serde::Serialize;

use blocktree::rtree::AllocatorStats;
use blocktree::trace::Session;

#[derive(Debug, Serialize)]
pub struct ConfigSection {
    pub n: u8,
    pub m: u8,
    pub w: u8,
    pub policy: String,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct SpaceSection {
    pub backed_bytes: u64,
    pub node_count: u64,
}

#[derive(Debug, Serialize)]
pub struct EventsSection {
    pub oom: u64,
    pub traps: u64,
    pub invalid_ops: u64,
}

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub config: ConfigSection,
    pub allocator: AllocatorStats,
    pub per_space: BTreeMap<String, SpaceSection>,
    pub events: EventsSection,
}

impl StatsReport {
    pub fn collect(session: &Session, policy: &str, seed: u64) -> StatsReport {
        let cfg = *session.allocator().config();
        let mut per_space = BTreeMap::new();
        for (tag, handle) in session.live_spaces() {
            let space = session.manager().space(handle).expect("live handle");
            per_space.insert(
                tag.to_string(),
                SpaceSection {
                    backed_bytes: space.backed_bytes(),
                    node_count: space.node_count(),
                },
            );
        }
        let events = session.events();
        StatsReport {
            config: ConfigSection {
                n: cfg.height_bits(),
                m: cfg.min_level(),
                w: cfg.counter_bits(),
                policy: policy.to_string(),
                seed,
            },
            allocator: session.allocator().stats(),
            per_space,
            events: EventsSection { oom: events.oom, traps: events.traps, invalid_ops: 0 },
        }
    }

    /// Allocated and free bytes must tile the space exactly.
    pub fn conserves_bytes(&self) -> bool {
        self.allocator.bytes_allocated + self.allocator.bytes_free == 1u64 << self.config.n
    }

    pub fn to_json(&self) -> String {
        let mut doc = serde_json::to_string_pretty(self).expect("report serializes");
        doc.push('\n');
        doc
    }
}
