//! Differential checking of the allocator against the byte model.
//!
//! Every operation is applied to both sides. Equality is checked
//! locally in the region each operation may touch (the consumed or
//! merged niche), with periodic full sweeps; out-of-memory verdicts
//! must agree exactly. A mismatch is minimized into a short replayable
//! trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BlockId, GeometryConfig};
use crate::oracle::ByteModel;
use crate::rtree::{AllocError, Allocator, PlacementPolicy};
use crate::trace::{format_trace, TraceLine, TraceOp};
use crate::tree::LocalView;

/// Deliberate oracle weakenings for validating the harness itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MutationFlags {
    /// Let the oracle coalesce free runs across alignment boundaries,
    /// the failure mode geometric alignment exists to prevent. A
    /// correct allocator then mismatches quickly.
    pub misaligned_coalesce: bool,
}

impl MutationFlags {
    pub fn any(&self) -> bool {
        self.misaligned_coalesce
    }
}

#[derive(Debug, Clone)]
pub struct DiffConfig {
    pub geometry: GeometryConfig,
    pub policy: PlacementPolicy,
    pub max_pieces: Option<usize>,
    pub mutation: MutationFlags,
    /// Full tree/model sweep cadence in ops; mutations sweep every op.
    pub sweep_every: u64,
}

impl DiffConfig {
    pub fn new(geometry: GeometryConfig, policy: PlacementPolicy) -> Self {
        DiffConfig {
            geometry,
            policy,
            max_pieces: None,
            mutation: MutationFlags::default(),
            sweep_every: 64,
        }
    }
}

/// A divergence between allocator and model, with a replayable trace.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub op_index: usize,
    pub message: String,
    /// Minimized trace still producing a divergence.
    pub trace: String,
    pub tree_free: String,
    pub model_free: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiffStats {
    pub ops: u64,
    pub allocs: u64,
    pub frees: u64,
    pub ooms: u64,
    pub sweeps: u64,
}

pub struct DiffRunner {
    cfg: DiffConfig,
    alloc: Allocator,
    model: ByteModel,
    /// Live chunks by tag number: (base, requested size).
    live: Vec<(u64, u64, u64)>,
    next_tag: u64,
    history: Vec<TraceOp>,
    stats: DiffStats,
}

fn fail(msg: impl Into<String>) -> Result<(), String> {
    Err(msg.into())
}

impl DiffRunner {
    pub fn new(cfg: DiffConfig) -> Self {
        let sweep_every = if cfg.mutation.any() { 1 } else { cfg.sweep_every.max(1) };
        let cfg = DiffConfig { sweep_every, ..cfg };
        DiffRunner {
            alloc: Allocator::new(cfg.geometry, cfg.policy),
            model: ByteModel::new(cfg.geometry).expect("model height"),
            cfg,
            live: Vec::new(),
            next_tag: 0,
            history: Vec::new(),
            stats: DiffStats::default(),
        }
    }

    pub fn stats(&self) -> DiffStats {
        self.stats
    }

    pub fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    pub fn history(&self) -> &[TraceOp] {
        &self.history
    }

    /// The free space both sides must agree on: canonical niches, or
    /// the misaligned-coalesced runs under that mutation.
    fn expected_free(&self) -> Vec<(u64, u64)> {
        let mut out = if self.cfg.mutation.misaligned_coalesce {
            self.model.free_decomposition(true)
        } else {
            self.model
                .canonical_niches()
                .into_iter()
                .map(|id| (id.base(), id.size()))
                .collect()
        };
        out.sort_unstable();
        out
    }

    fn tree_free(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = self
            .alloc
            .tree()
            .niches()
            .into_iter()
            .map(|id| (id.base(), id.size()))
            .collect();
        out.sort_unstable();
        out
    }

    fn sweep(&mut self) -> Result<(), String> {
        self.stats.sweeps += 1;
        self.alloc
            .tree()
            .validate()
            .map_err(|e| format!("tree invariant: {e}"))?;
        self.model.check_self().map_err(|e| format!("model invariant: {e}"))?;
        let got = self.tree_free();
        let want = self.expected_free();
        if got != want {
            return fail(format!("free sets diverge: tree {got:x?}, model {want:x?}"));
        }
        if self.alloc.tree().bytes_allocated() != self.model.used_bytes() {
            return fail(format!(
                "allocated byte totals diverge: tree {}, model {}",
                self.alloc.tree().bytes_allocated(),
                self.model.used_bytes()
            ));
        }
        Ok(())
    }

    /// Tree partition inside `region` must equal the model's canonical
    /// free decomposition there.
    fn check_region(&self, region: BlockId) -> Result<(), String> {
        if self.cfg.mutation.any() {
            return Ok(()); // mutations compare globally every op
        }
        let want = self.model.canonical_within(region);
        let got: Vec<BlockId> = match self.alloc.tree().local_view(region) {
            LocalView::Subtree { niches } => niches,
            LocalView::InsideNiche(_) => vec![region],
            LocalView::InsideLeaf(_) => vec![],
        };
        if got != want {
            return fail(format!(
                "free space inside {region} diverges: tree {got:?}, model {want:?}"
            ));
        }
        Ok(())
    }

    fn apply_alloc(&mut self, tag: u64, size: u64) -> Result<(), String> {
        self.stats.allocs += 1;
        let model_fit = self.model.best_fit(size);
        match self.alloc.alloc_chunk(size, self.cfg.max_pieces) {
            Ok(chunk) => {
                let Some(fit) = model_fit else {
                    return fail(format!(
                        "allocator placed {size} bytes at {:#x} but the model is out of memory",
                        chunk.base
                    ));
                };
                if fit.level() != chunk.consumed_niche.level() {
                    return fail(format!(
                        "best-fit levels diverge for size {size}: tree used {}, model expects {}",
                        chunk.consumed_niche, fit
                    ));
                }
                let pieces = chunk.pieces.iter().map(|id| (id.base(), id.size())).collect();
                self.model
                    .alloc(chunk.base, size, pieces)
                    .map_err(|e| format!("model rejects placement of {size} bytes: {e}"))?;
                self.live.push((tag, chunk.base, size));
                self.check_region(chunk.consumed_niche)
            }
            Err(AllocError::OutOfMemory { .. }) => {
                self.stats.ooms += 1;
                if let Some(fit) = model_fit {
                    return fail(format!(
                        "allocator reports out of memory for {size} bytes but the model fits it at {fit}"
                    ));
                }
                Ok(())
            }
            Err(e) => fail(format!("allocator rejected alloc of {size}: {e}")),
        }
    }

    fn apply_free(&mut self, tag: u64) -> Result<(), String> {
        let Some(at) = self.live.iter().position(|&(t, _, _)| t == tag) else {
            return Ok(()); // dangling frees are skipped on both sides
        };
        self.stats.frees += 1;
        let (_, base, size) = self.live.swap_remove(at);
        let freed = self
            .alloc
            .free_chunk(base, size)
            .map_err(|e| format!("allocator failed to free {size} at {base:#x}: {e}"))?;
        self.model
            .free(base, size)
            .map_err(|e| format!("model failed to free {size} at {base:#x}: {e}"))?;
        for f in &freed.frees {
            self.check_region(f.merged_niche)?;
        }
        Ok(())
    }

    /// One op against both sides; `Err` is a divergence message.
    pub fn step(&mut self, op: &TraceOp) -> Result<(), String> {
        self.history.push(op.clone());
        self.stats.ops += 1;
        let result = match op {
            TraceOp::Alloc { tag, size } => {
                let tag = tag_number(tag)?;
                if self.live.iter().any(|&(t, _, _)| t == tag) {
                    return fail(format!("tag t{tag} reused"));
                }
                self.next_tag = self.next_tag.max(tag + 1);
                self.apply_alloc(tag, *size)
            }
            TraceOp::Free { tag } => self.apply_free(tag_number(tag)?),
            other => fail(format!("op `{other}` is not a chunk op")),
        }?;
        if self.stats.ops % self.cfg.sweep_every == 0 {
            self.sweep()?;
        }
        Ok(result)
    }

    fn random_op(&mut self, rng: &mut ChaCha8Rng) -> TraceOp {
        let cfg = self.cfg.geometry;
        let (n, m) = (cfg.height_bits(), cfg.min_level());
        let roll = rng.gen_range(0u32..100);
        if self.live.is_empty() || roll < 55 {
            let level = rng.gen_range(m..=n);
            let size = if roll < 12 {
                1u64 << level // exercises the block-sized path
            } else {
                let lo = if level == 0 { 1 } else { (1u64 << (level - 1)) + 1 };
                rng.gen_range(lo..=1u64 << level)
            };
            let tag = self.next_tag;
            TraceOp::Alloc { tag: format!("t{tag}"), size }
        } else {
            let at = rng.gen_range(0..self.live.len());
            TraceOp::Free { tag: format!("t{}", self.live[at].0) }
        }
    }

    /// Runs `ops` random operations; a divergence comes back minimized.
    pub fn run_random(&mut self, ops: u64, seed: u64) -> Result<DiffStats, Box<Mismatch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..ops {
            let op = self.random_op(&mut rng);
            if let Err(message) = self.step(&op) {
                return Err(Box::new(self.conclude(message)));
            }
        }
        if let Err(message) = self.sweep() {
            return Err(Box::new(self.conclude(message)));
        }
        Ok(self.stats)
    }

    /// Replays a fixed trace (chunk ops only).
    pub fn replay(&mut self, ops: &[TraceOp]) -> Result<DiffStats, Box<Mismatch>> {
        for op in ops {
            if let Err(message) = self.step(op) {
                return Err(Box::new(self.conclude(message)));
            }
        }
        if let Err(message) = self.sweep() {
            return Err(Box::new(self.conclude(message)));
        }
        Ok(self.stats)
    }

    fn conclude(&self, message: String) -> Mismatch {
        let minimized = minimize(&self.cfg, &self.history);
        let lines: Vec<TraceLine> = minimized.iter().cloned().map(TraceLine::new).collect();
        Mismatch {
            op_index: self.history.len() - 1,
            message,
            trace: format_trace(&lines),
            tree_free: render_free("tree", &self.tree_free()),
            model_free: render_free("model", &self.expected_free()),
        }
    }
}

fn tag_number(tag: &str) -> Result<u64, String> {
    tag.strip_prefix('t')
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format!("differential traces use t<N> tags, got `{tag}`"))
}

fn render_free(side: &str, free: &[(u64, u64)]) -> String {
    let mut out = format!("{side} free set:\n");
    for &(base, size) in free {
        out.push_str(&format!("  {base:#x}+{size:#x}\n"));
    }
    out
}

/// Does this trace still diverge, under the same configuration?
fn diverges(cfg: &DiffConfig, ops: &[TraceOp]) -> bool {
    let mut runner = DiffRunner::new(cfg.clone());
    for op in ops {
        if runner.step(op).is_err() {
            return true;
        }
    }
    runner.sweep().is_err()
}

/// Greedy trace shrinking: drop windows of shrinking size while the
/// divergence persists.
fn minimize(cfg: &DiffConfig, history: &[TraceOp]) -> Vec<TraceOp> {
    let mut ops = history.to_vec();
    // Fast prefix cut: the earliest power-of-two prefix that diverges.
    let mut len = 1;
    while len < ops.len() {
        if diverges(cfg, &ops[..len]) {
            ops.truncate(len);
            break;
        }
        len *= 2;
    }
    let mut window = (ops.len() / 2).max(1);
    loop {
        let mut shrunk = false;
        let mut start = 0;
        while start < ops.len() {
            let end = (start + window).min(ops.len());
            let mut candidate = ops.clone();
            candidate.drain(start..end);
            if !candidate.is_empty() && diverges(cfg, &candidate) {
                ops = candidate;
                shrunk = true;
            } else {
                start = end;
            }
        }
        if window == 1 && !shrunk {
            return ops;
        }
        if !shrunk {
            window = (window / 2).max(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u8, m: u8, w: u8) -> DiffConfig {
        DiffConfig::new(
            GeometryConfig::new(n, m, w).unwrap(),
            PlacementPolicy::Leftmost,
        )
    }

    #[test]
    fn healthy_allocator_survives_a_differential_run() {
        for policy in [
            PlacementPolicy::Leftmost,
            PlacementPolicy::Rightmost,
            PlacementPolicy::SeededRandom(5),
        ] {
            let mut c = cfg(8, 0, 2);
            c.policy = policy;
            let mut runner = DiffRunner::new(c);
            let stats = runner.run_random(2_000, 99).unwrap();
            assert_eq!(stats.ops, 2_000);
            assert!(stats.allocs > 0 && stats.frees > 0);
        }
    }

    #[test]
    fn bounded_chunks_also_agree() {
        let mut c = cfg(8, 2, 2);
        c.max_pieces = Some(2);
        let mut runner = DiffRunner::new(c);
        runner.run_random(2_000, 3).unwrap();
    }

    #[test]
    fn misaligned_coalesce_mutation_is_caught_and_minimized() {
        let mut c = cfg(6, 0, 2);
        c.mutation.misaligned_coalesce = true;
        let mut runner = DiffRunner::new(c.clone());
        let mismatch = runner.run_random(10_000, 1).unwrap_err();
        assert!(mismatch.message.contains("free sets diverge"));
        // The minimized trace still diverges and is reasonably small.
        let lines = crate::trace::parse_trace(&mismatch.trace, false).unwrap();
        let ops: Vec<TraceOp> = lines.into_iter().map(|l| l.op).collect();
        assert!(diverges(&c, &ops));
        assert!(ops.len() <= 8, "minimized to {} ops", ops.len());
        // The divergence is exactly a coalesce across an alignment
        // boundary: some model run is not a geometrically valid block.
        let misaligned = |base: u64, size: u64| {
            !size.is_power_of_two() || base % size != 0
        };
        let runs: Vec<(u64, u64)> = mismatch
            .model_free
            .lines()
            .skip(1)
            .map(|l| {
                let (b, s) = l.trim().split_once('+').unwrap();
                (
                    u64::from_str_radix(b.trim_start_matches("0x"), 16).unwrap(),
                    u64::from_str_radix(s.trim_start_matches("0x"), 16).unwrap(),
                )
            })
            .collect();
        assert!(runs.iter().any(|&(b, s)| misaligned(b, s)), "runs {runs:x?}");
    }

    #[test]
    fn replay_reproduces_the_same_stats() {
        let mut runner = DiffRunner::new(cfg(8, 1, 2));
        let stats = runner.run_random(500, 42).unwrap();
        let history = runner.history().to_vec();
        let mut again = DiffRunner::new(cfg(8, 1, 2));
        let replayed = again.replay(&history).unwrap();
        assert_eq!(stats.allocs, replayed.allocs);
        assert_eq!(stats.frees, replayed.frees);
        assert_eq!(stats.ooms, replayed.ooms);
        assert_eq!(runner.allocator().tree(), again.allocator().tree());
    }

    #[test]
    fn dangling_frees_are_skipped() {
        let mut runner = DiffRunner::new(cfg(6, 0, 2));
        runner.step(&TraceOp::Free { tag: "t9".into() }).unwrap();
        assert_eq!(runner.stats().frees, 0);
    }

    #[test]
    fn block_alloc_matches_power_of_two_chunks() {
        // A power-of-two chunk and a block request are the same op:
        // equal placements and equal policy randomness consumption.
        for policy in [
            PlacementPolicy::Leftmost,
            PlacementPolicy::Rightmost,
            PlacementPolicy::SeededRandom(11),
        ] {
            let geometry = GeometryConfig::new(6, 0, 2).unwrap();
            let mut via_blocks = Allocator::new(geometry, policy);
            let mut via_chunks = Allocator::new(geometry, policy);
            for level in [2u8, 0, 3, 1, 2, 0, 4, 1] {
                let b = via_blocks.alloc_block(level).unwrap();
                let c = via_chunks.alloc_chunk(1 << level, None).unwrap();
                assert_eq!(b.leaf.base(), c.base);
            }
            assert_eq!(via_blocks.tree(), via_chunks.tree());
        }
    }
}
