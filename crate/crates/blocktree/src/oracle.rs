//! Brute-force reference model for differential testing.
//!
//! The model tracks the space as a flat occupancy bitmap plus a registry of
//! live chunks, with no tree structure at all. It validates every placement
//! the allocator makes (range, power-of-two size, self-alignment, overlap)
//! and can recompute the canonical free-space decomposition from scratch:
//! scanning left to right and emitting the largest aligned free block at
//! each position yields exactly the niche set a canonically coalesced tree
//! must have, so the two representations can be compared wholesale.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{ceil_log2, BlockId, GeometryConfig};

/// Memory guard: the bitmap is materialized, so cap the space height.
pub const MAX_MODEL_HEIGHT: u8 = 26;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ModelError {
    #[error("model space of 2^{0} bytes is too large to materialize (max 2^{MAX_MODEL_HEIGHT})")]
    SpaceTooTall(u8),
}

/// A placement the model refuses to accept; any of these out of the
/// allocator is a bug.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerdictError {
    #[error("piece at {base:#x}+{size} leaves the space")]
    OutOfRange { base: u64, size: u64 },
    #[error("piece size {0} is not a power of two")]
    NotPowerOfTwo(u64),
    #[error("piece size {size} is below the minimum block of {min}")]
    BelowMinimum { size: u64, min: u64 },
    #[error("piece at {base:#x} is not aligned to its size {size}")]
    Misaligned { base: u64, size: u64 },
    #[error("piece at {base:#x}+{size} overlaps an allocated byte")]
    Overlap { base: u64, size: u64 },
    #[error("pieces are unordered or overlap each other")]
    PiecesOutOfOrder,
    #[error("no chunk registered at {0:#x}")]
    UnknownChunk(u64),
    #[error("chunk at {base:#x} was allocated with size {have}, freed with {want}")]
    SizeMismatch { base: u64, have: u64, want: u64 },
    #[error("chunk base {base:#x} does not match first piece {first:#x}")]
    BaseMismatch { base: u64, first: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEntry {
    /// Size as requested at allocation time.
    pub size: u64,
    /// Placed pieces, ascending and disjoint: (base, size).
    pub pieces: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteModel {
    config: GeometryConfig,
    words: Vec<u64>,
    free: u64,
    chunks: BTreeMap<u64, ChunkEntry>,
}

impl ByteModel {
    pub fn new(config: GeometryConfig) -> Result<Self, ModelError> {
        let n = config.height_bits();
        if n > MAX_MODEL_HEIGHT {
            return Err(ModelError::SpaceTooTall(n));
        }
        let bits = 1u64 << n;
        let words = vec![0u64; (bits as usize).div_ceil(64)];
        Ok(ByteModel { config, words, free: bits, chunks: BTreeMap::new() })
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    pub fn free_bytes(&self) -> u64 {
        self.free
    }

    pub fn used_bytes(&self) -> u64 {
        self.config.total_bytes() - self.free
    }

    pub fn chunks(&self) -> &BTreeMap<u64, ChunkEntry> {
        &self.chunks
    }

    fn bit(&self, i: u64) -> bool {
        self.words[(i >> 6) as usize] >> (i & 63) & 1 == 1
    }

    pub fn is_free(&self, addr: u64) -> bool {
        !self.bit(addr)
    }

    pub fn is_free_range(&self, base: u64, len: u64) -> bool {
        let mut i = base;
        let end = base + len;
        while i < end {
            if i & 63 == 0 && i + 64 <= end {
                if self.words[(i >> 6) as usize] != 0 {
                    return false;
                }
                i += 64;
            } else {
                if self.bit(i) {
                    return false;
                }
                i += 1;
            }
        }
        true
    }

    fn set_range(&mut self, base: u64, len: u64, occupied: bool) {
        let mut i = base;
        let end = base + len;
        while i < end {
            if i & 63 == 0 && i + 64 <= end {
                let w = &mut self.words[(i >> 6) as usize];
                let had = w.count_ones() as u64;
                *w = if occupied { u64::MAX } else { 0 };
                let have = w.count_ones() as u64;
                self.free = self.free + had - have;
                i += 64;
            } else {
                let w = &mut self.words[(i >> 6) as usize];
                let mask = 1u64 << (i & 63);
                let was = *w & mask != 0;
                if occupied {
                    *w |= mask;
                } else {
                    *w &= !mask;
                }
                match (was, occupied) {
                    (false, true) => self.free -= 1,
                    (true, false) => self.free += 1,
                    _ => {}
                }
                i += 1;
            }
        }
    }

    fn check_piece(&self, base: u64, size: u64) -> Result<(), VerdictError> {
        if !size.is_power_of_two() {
            return Err(VerdictError::NotPowerOfTwo(size));
        }
        if size < 1u64 << self.config.min_level() {
            return Err(VerdictError::BelowMinimum {
                size,
                min: 1u64 << self.config.min_level(),
            });
        }
        if base % size != 0 {
            return Err(VerdictError::Misaligned { base, size });
        }
        if base + size > self.config.total_bytes() || base + size < base {
            return Err(VerdictError::OutOfRange { base, size });
        }
        if !self.is_free_range(base, size) {
            return Err(VerdictError::Overlap { base, size });
        }
        Ok(())
    }

    /// Record a chunk the allocator placed. Verifies every piece; on any
    /// failure nothing is recorded.
    pub fn alloc(
        &mut self,
        base: u64,
        size: u64,
        pieces: Vec<(u64, u64)>,
    ) -> Result<(), VerdictError> {
        if pieces.is_empty() {
            return Err(VerdictError::PiecesOutOfOrder);
        }
        if pieces[0].0 != base {
            return Err(VerdictError::BaseMismatch { base, first: pieces[0].0 });
        }
        for pair in pieces.windows(2) {
            if pair[0].0 + pair[0].1 > pair[1].0 {
                return Err(VerdictError::PiecesOutOfOrder);
            }
        }
        for &(b, s) in &pieces {
            self.check_piece(b, s)?;
        }
        for &(b, s) in &pieces {
            self.set_range(b, s, true);
        }
        self.chunks.insert(base, ChunkEntry { size, pieces });
        Ok(())
    }

    /// Release the chunk registered at `base`.
    pub fn free(&mut self, base: u64, size: u64) -> Result<ChunkEntry, VerdictError> {
        let entry = self.chunks.get(&base).ok_or(VerdictError::UnknownChunk(base))?;
        if entry.size != size {
            return Err(VerdictError::SizeMismatch { base, have: entry.size, want: size });
        }
        let entry = self.chunks.remove(&base).unwrap();
        for &(b, s) in &entry.pieces {
            self.set_range(b, s, false);
        }
        Ok(entry)
    }

    fn next_free(&self, mut pos: u64) -> Option<u64> {
        let total = self.config.total_bytes();
        while pos < total {
            let word = self.words[(pos >> 6) as usize];
            let inverted = !word >> (pos & 63);
            if inverted != 0 {
                let hit = pos + inverted.trailing_zeros() as u64;
                if hit < total {
                    return Some(hit);
                }
                return None;
            }
            pos = (pos | 63) + 1;
        }
        None
    }

    /// Largest aligned free block starting exactly at `pos`, capped at
    /// `limit` (one past the last byte to consider).
    fn greedy_block_at(&self, pos: u64, limit: u64) -> BlockId {
        let align = if pos == 0 {
            self.config.height_bits()
        } else {
            (pos.trailing_zeros() as u8).min(self.config.height_bits())
        };
        let mut level = align;
        loop {
            let size = 1u64 << level;
            if pos + size <= limit && self.is_free_range(pos, size) {
                return BlockId::from_base(level, pos).unwrap();
            }
            level -= 1;
        }
    }

    /// The unique maximal decomposition of the free set into aligned
    /// blocks: exactly the niche set of a canonically coalesced tree.
    pub fn canonical_niches(&self) -> Vec<BlockId> {
        self.canonical_within_range(0, self.config.total_bytes())
    }

    /// Canonical decomposition restricted to an aligned block's extent.
    pub fn canonical_within(&self, block: BlockId) -> Vec<BlockId> {
        self.canonical_within_range(block.base(), block.end())
    }

    fn canonical_within_range(&self, start: u64, end: u64) -> Vec<BlockId> {
        let mut out = Vec::new();
        let mut pos = start;
        while let Some(p) = self.next_free(pos) {
            if p >= end {
                break;
            }
            let block = self.greedy_block_at(p, end);
            pos = block.end();
            out.push(block);
        }
        out.sort();
        out
    }

    /// Free-space decomposition as raw (base, size) extents. With
    /// `misaligned_coalesce` the alignment rule is dropped: each free run is
    /// split into the largest powers of two that merely *fit*, which is how
    /// free space looks if adjacent blocks are allowed to merge regardless
    /// of where they start.
    pub fn free_decomposition(&self, misaligned_coalesce: bool) -> Vec<(u64, u64)> {
        if !misaligned_coalesce {
            return self.canonical_niches().iter().map(|b| (b.base(), b.size())).collect();
        }
        let mut out = Vec::new();
        let total = self.config.total_bytes();
        let mut pos = 0u64;
        while let Some(run_start) = self.next_free(pos) {
            let mut run_end = run_start;
            while run_end < total && self.is_free(run_end) {
                run_end += 1;
            }
            let mut p = run_start;
            while p < run_end {
                let len = run_end - p;
                let size = 1u64 << (63 - len.leading_zeros());
                out.push((p, size));
                p += size;
            }
            pos = run_end;
        }
        out
    }

    /// Smallest canonical free block that holds `size` bytes, leftmost
    /// among equals.
    pub fn best_fit(&self, size: u64) -> Option<BlockId> {
        let rounded = self.config.round_to_min(size);
        if size == 0 || rounded > self.config.total_bytes() {
            return None;
        }
        let needed = ceil_log2(rounded);
        self.canonical_niches()
            .into_iter()
            .filter(|b| b.level() >= needed)
            .min_by_key(|b| (b.level(), b.base()))
    }

    /// The registry must tile the occupied bytes exactly.
    pub fn check_self(&self) -> Result<(), String> {
        let mut count = 0u64;
        for (base, entry) in &self.chunks {
            for &(b, s) in &entry.pieces {
                if self.is_free_range(b, s) || !(b..b + s).all(|i| self.bit(i)) {
                    return Err(format!("chunk {base:#x} piece {b:#x}+{s} not fully occupied"));
                }
                count += s;
            }
        }
        if count != self.used_bytes() {
            return Err(format!(
                "registry covers {count} bytes but {} are occupied",
                self.used_bytes()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u8, m: u8) -> GeometryConfig {
        GeometryConfig::new(n, m, 2).unwrap()
    }

    fn blocks(v: &[(u8, u64)]) -> Vec<BlockId> {
        v.iter().map(|&(l, i)| BlockId::new(l, i)).collect()
    }

    /// Occupy everything except the given byte ranges.
    fn with_free(n: u8, free: &[(u64, u64)]) -> ByteModel {
        let mut m = ByteModel::new(cfg(n, 0)).unwrap();
        m.set_range(0, m.config.total_bytes(), true);
        for &(b, len) in free {
            m.set_range(b, len, false);
        }
        m
    }

    #[test]
    fn canonical_of_empty_space_is_the_whole_space() {
        let m = ByteModel::new(cfg(4, 0)).unwrap();
        assert_eq!(m.canonical_niches(), blocks(&[(4, 0)]));
        assert_eq!(m.free_bytes(), 16);
    }

    #[test]
    fn adjacent_pairs_straddling_an_alignment_boundary_stay_split() {
        // Free bytes 6..10: a 4-byte run, but 6 is only 2-aligned, so the
        // decomposition is two level-1 blocks, never a level-2 block at 6.
        let m = with_free(4, &[(6, 4)]);
        assert_eq!(m.canonical_niches(), blocks(&[(1, 3), (1, 4)]));
    }

    #[test]
    fn aligned_pairs_coalesce() {
        // Free bytes 8..12 sit on a 4-byte boundary: one level-2 block.
        let m = with_free(4, &[(8, 4)]);
        assert_eq!(m.canonical_niches(), blocks(&[(2, 2)]));
    }

    #[test]
    fn misaligned_mode_merges_across_the_boundary() {
        let m = with_free(4, &[(6, 4)]);
        assert_eq!(m.free_decomposition(false), vec![(6, 2), (8, 2)]);
        assert_eq!(m.free_decomposition(true), vec![(6, 4)]);
    }

    #[test]
    fn canonical_matches_worked_layout() {
        // Allocated: 4 bytes at 0, 2 at 4, 4 at 12; free: 6..8 and 8..12.
        let m = with_free(4, &[(6, 2), (8, 4)]);
        assert_eq!(m.canonical_niches(), blocks(&[(1, 3), (2, 2)]));
    }

    #[test]
    fn best_fit_prefers_smallest_then_leftmost() {
        let m = with_free(4, &[(6, 2), (8, 4)]);
        assert_eq!(m.best_fit(3), Some(BlockId::new(2, 2)));
        assert_eq!(m.best_fit(4), Some(BlockId::new(2, 2)));
        assert_eq!(m.best_fit(1), Some(BlockId::new(1, 3)));
        assert_eq!(m.best_fit(2), Some(BlockId::new(1, 3)));
        assert_eq!(m.best_fit(5), None);
        let full = with_free(4, &[]);
        assert_eq!(full.best_fit(1), None);
    }

    #[test]
    fn alloc_validates_placements() {
        let mut m = ByteModel::new(cfg(4, 0)).unwrap();
        assert_eq!(
            m.alloc(6, 4, vec![(6, 4)]),
            Err(VerdictError::Misaligned { base: 6, size: 4 })
        );
        assert_eq!(m.alloc(0, 3, vec![(0, 3)]), Err(VerdictError::NotPowerOfTwo(3)));
        assert_eq!(
            m.alloc(12, 8, vec![(12, 8)]),
            Err(VerdictError::Misaligned { base: 12, size: 8 })
        );
        assert_eq!(
            m.alloc(16, 4, vec![(16, 4)]),
            Err(VerdictError::OutOfRange { base: 16, size: 4 })
        );
        m.alloc(0, 4, vec![(0, 4)]).unwrap();
        assert_eq!(
            m.alloc(0, 4, vec![(0, 4)]),
            Err(VerdictError::Overlap { base: 0, size: 4 })
        );
        assert_eq!(m.free_bytes(), 12);
        m.check_self().unwrap();
    }

    #[test]
    fn min_level_pieces_are_enforced() {
        let mut m = ByteModel::new(cfg(4, 2)).unwrap();
        assert_eq!(
            m.alloc(0, 2, vec![(0, 2)]),
            Err(VerdictError::BelowMinimum { size: 2, min: 4 })
        );
        m.alloc(0, 2, vec![(0, 4)]).unwrap();
    }

    #[test]
    fn free_round_trips_chunks() {
        let mut m = ByteModel::new(cfg(4, 0)).unwrap();
        m.alloc(0, 11, vec![(0, 8), (8, 2), (10, 1)]).unwrap();
        assert_eq!(m.free_bytes(), 5);
        assert_eq!(m.canonical_niches(), blocks(&[(0, 11), (2, 3)]));
        assert_eq!(m.free(8, 11), Err(VerdictError::UnknownChunk(8)));
        assert_eq!(
            m.free(0, 12),
            Err(VerdictError::SizeMismatch { base: 0, have: 11, want: 12 })
        );
        let entry = m.free(0, 11).unwrap();
        assert_eq!(entry.pieces, vec![(0, 8), (8, 2), (10, 1)]);
        assert_eq!(m.free_bytes(), 16);
        assert_eq!(m.canonical_niches(), blocks(&[(4, 0)]));
        m.check_self().unwrap();
    }

    #[test]
    fn canonical_within_restricts_the_scan() {
        let m = with_free(4, &[(6, 2), (8, 4)]);
        assert_eq!(m.canonical_within(BlockId::new(3, 1)), blocks(&[(2, 2)]));
        assert_eq!(m.canonical_within(BlockId::new(3, 0)), blocks(&[(1, 3)]));
        assert_eq!(m.canonical_within(BlockId::new(2, 0)), vec![]);
    }

    #[test]
    fn model_height_is_capped() {
        let g = GeometryConfig::new(27, 0, 2).unwrap();
        assert_eq!(ByteModel::new(g), Err(ModelError::SpaceTooTall(27)));
    }
}
