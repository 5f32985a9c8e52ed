//! Address-space geometry: configuration and block naming.
//!
//! The address space is `2^n` bytes tall. A *block* of level `l` spans
//! `2^l` bytes and starts at a multiple of its own size, so alignment is a
//! structural property of the naming scheme rather than something checked
//! after the fact: block `(l, i)` starts at `i * 2^l` by construction.

use std::fmt;
use thiserror::Error;

/// Upper bound on the space height; keeps every byte count inside `u64`.
pub const MAX_HEIGHT_BITS: u8 = 48;
/// Upper bound on niche-counter precision.
pub const MAX_COUNTER_BITS: u8 = 16;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ConfigError {
    #[error("space height must be at most {MAX_HEIGHT_BITS} bits, got {0}")]
    HeightTooLarge(u8),
    #[error("minimum block level {min_level} exceeds space height {height_bits}")]
    MinLevelTooLarge { min_level: u8, height_bits: u8 },
    #[error("counter width must be in 1..={MAX_COUNTER_BITS} bits, got {0}")]
    BadCounterWidth(u8),
}

/// Shape of an address space: height `n`, minimum block level `m`, and the
/// bit width `w` of the saturating niche counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometryConfig {
    height_bits: u8,
    min_level: u8,
    counter_bits: u8,
}

impl GeometryConfig {
    pub fn new(height_bits: u8, min_level: u8, counter_bits: u8) -> Result<Self, ConfigError> {
        if height_bits > MAX_HEIGHT_BITS {
            return Err(ConfigError::HeightTooLarge(height_bits));
        }
        if min_level > height_bits {
            return Err(ConfigError::MinLevelTooLarge { min_level, height_bits });
        }
        if counter_bits == 0 || counter_bits > MAX_COUNTER_BITS {
            return Err(ConfigError::BadCounterWidth(counter_bits));
        }
        Ok(GeometryConfig { height_bits, min_level, counter_bits })
    }

    pub fn height_bits(&self) -> u8 {
        self.height_bits
    }

    pub fn min_level(&self) -> u8 {
        self.min_level
    }

    pub fn counter_bits(&self) -> u8 {
        self.counter_bits
    }

    /// Total bytes in the space, `2^n`.
    pub fn total_bytes(&self) -> u64 {
        1u64 << self.height_bits
    }

    /// Saturation point of one niche counter, `2^w - 1`.
    pub fn counter_max(&self) -> u16 {
        ((1u32 << self.counter_bits) - 1) as u16
    }

    /// Number of counters carried by a node of `level`: one per level from
    /// `level - 1` down to the minimum level.
    pub fn map_len(&self, level: u8) -> usize {
        debug_assert!(level >= self.min_level && level <= self.height_bits);
        (level - self.min_level) as usize
    }

    /// `size` rounded up to a multiple of the minimum block size.
    pub fn round_to_min(&self, size: u64) -> u64 {
        let grain = 1u64 << self.min_level;
        size.div_ceil(grain) * grain
    }

    /// Smallest level whose block size is at least `size`; `None` when the
    /// size exceeds the space.
    pub fn level_for(&self, size: u64) -> Option<u8> {
        if size == 0 || size > self.total_bytes() {
            return None;
        }
        Some(ceil_log2(size).max(self.min_level))
    }

    pub fn contains_level(&self, level: u8) -> bool {
        self.min_level <= level && level <= self.height_bits
    }
}

/// Smallest `k` with `2^k >= x`; `x` must be nonzero.
pub(crate) fn ceil_log2(x: u64) -> u8 {
    debug_assert!(x > 0);
    (64 - (x - 1).leading_zeros()) as u8
}

/// A block name: level `l`, index `i`, base `i * 2^l`, size `2^l`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    level: u8,
    index: u64,
}

impl BlockId {
    pub fn new(level: u8, index: u64) -> Self {
        BlockId { level, index }
    }

    /// Block of `level` starting at `base`; `None` when `base` is not a
    /// multiple of the block size.
    pub fn from_base(level: u8, base: u64) -> Option<Self> {
        if base & ((1u64 << level) - 1) != 0 {
            return None;
        }
        Some(BlockId { level, index: base >> level })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn base(&self) -> u64 {
        self.index << self.level
    }

    pub fn size(&self) -> u64 {
        1u64 << self.level
    }

    /// One past the last byte.
    pub fn end(&self) -> u64 {
        self.base() + self.size()
    }

    pub fn parent(&self) -> BlockId {
        BlockId { level: self.level + 1, index: self.index >> 1 }
    }

    pub fn sibling(&self) -> BlockId {
        BlockId { level: self.level, index: self.index ^ 1 }
    }

    pub fn is_left(&self) -> bool {
        self.index & 1 == 0
    }

    pub fn left_child(&self) -> BlockId {
        debug_assert!(self.level > 0);
        BlockId { level: self.level - 1, index: self.index << 1 }
    }

    pub fn right_child(&self) -> BlockId {
        debug_assert!(self.level > 0);
        BlockId { level: self.level - 1, index: (self.index << 1) | 1 }
    }

    /// The child whose extent contains `addr`.
    pub fn child_covering(&self, addr: u64) -> BlockId {
        debug_assert!(self.contains(addr));
        BlockId { level: self.level - 1, index: addr >> (self.level - 1) }
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.base() <= addr && addr < self.end()
    }

    pub fn contains_block(&self, other: BlockId) -> bool {
        other.level <= self.level && (other.index >> (self.level - other.level)) == self.index
    }

    /// True when the block lies inside a space of the given shape. Levels
    /// below the minimum are still "in bounds"; stores reject them separately.
    pub fn in_bounds(&self, config: &GeometryConfig) -> bool {
        self.level <= config.height_bits()
            && (self.index >> (config.height_bits() - self.level)) == 0
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}@{:#x}", self.level, self.base())
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}@{:#x}", self.level, self.base())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(GeometryConfig::new(16, 4, 2).is_ok());
        assert!(GeometryConfig::new(48, 0, 16).is_ok());
        assert_eq!(GeometryConfig::new(49, 0, 2), Err(ConfigError::HeightTooLarge(49)));
        assert_eq!(
            GeometryConfig::new(4, 5, 2),
            Err(ConfigError::MinLevelTooLarge { min_level: 5, height_bits: 4 })
        );
        assert_eq!(GeometryConfig::new(4, 0, 0), Err(ConfigError::BadCounterWidth(0)));
        assert_eq!(GeometryConfig::new(4, 0, 17), Err(ConfigError::BadCounterWidth(17)));
    }

    #[test]
    fn counter_saturation_point() {
        assert_eq!(GeometryConfig::new(4, 0, 1).unwrap().counter_max(), 1);
        assert_eq!(GeometryConfig::new(4, 0, 2).unwrap().counter_max(), 3);
        assert_eq!(GeometryConfig::new(4, 0, 16).unwrap().counter_max(), 65535);
    }

    #[test]
    fn rounding_and_fit_levels() {
        let g = GeometryConfig::new(8, 2, 2).unwrap();
        assert_eq!(g.round_to_min(1), 4);
        assert_eq!(g.round_to_min(4), 4);
        assert_eq!(g.round_to_min(5), 8);
        assert_eq!(g.level_for(1), Some(2));
        assert_eq!(g.level_for(4), Some(2));
        assert_eq!(g.level_for(5), Some(3));
        assert_eq!(g.level_for(256), Some(8));
        assert_eq!(g.level_for(257), None);
        assert_eq!(g.level_for(0), None);
    }

    #[test]
    fn block_arithmetic() {
        let b = BlockId::new(2, 3);
        assert_eq!(b.base(), 12);
        assert_eq!(b.size(), 4);
        assert_eq!(b.end(), 16);
        assert_eq!(b.parent(), BlockId::new(3, 1));
        assert_eq!(b.sibling(), BlockId::new(2, 2));
        assert!(!b.is_left());
        assert_eq!(b.parent().left_child(), BlockId::new(2, 2));
        assert_eq!(b.parent().right_child(), b);
        assert!(b.contains(13));
        assert!(!b.contains(16));
        assert!(BlockId::new(3, 1).contains_block(b));
        assert!(!BlockId::new(3, 0).contains_block(b));
        assert_eq!(BlockId::new(3, 1).child_covering(12), b);
    }

    #[test]
    fn base_alignment_is_structural() {
        assert_eq!(BlockId::from_base(2, 8), Some(BlockId::new(2, 2)));
        assert_eq!(BlockId::from_base(2, 6), None);
        let g = GeometryConfig::new(4, 0, 2).unwrap();
        assert!(BlockId::new(4, 0).in_bounds(&g));
        assert!(!BlockId::new(4, 1).in_bounds(&g));
        assert!(BlockId::new(0, 15).in_bounds(&g));
        assert!(!BlockId::new(0, 16).in_bounds(&g));
    }

    #[test]
    fn ceil_log2_small_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ceil_log2(1 << 48), 48);
    }
}
