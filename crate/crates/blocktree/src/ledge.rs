//! Ledging: decomposing an arbitrary size into a descending run of
//! power-of-two pieces.
//!
//! Unbounded, the pieces are the set bits of the size (rounded up to the
//! minimum block size), largest first. Because each piece is no larger than
//! the alignment the previous pieces leave behind, laying the run out
//! back-to-back from an aligned base keeps every piece aligned to its own
//! size: the offsets are plain prefix sums.
//!
//! With a piece budget of `k`, the top `k - 1` binary pieces are kept and
//! the remainder is rounded up to one final power of two; when that final
//! piece matches the piece before it the two merge, cascading upward. The
//! bound costs at most a `2^(1-k)` fraction of the request in padding (plus
//! the minimum-block rounding), and the padded total never outgrows the
//! request's enclosing power of two.

use crate::geometry::{ceil_log2, GeometryConfig};
use crate::rtree::AllocError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgePiece {
    pub level: u8,
    /// Byte offset of the piece within the chunk.
    pub offset: u64,
}

impl LedgePiece {
    pub fn size(&self) -> u64 {
        1u64 << self.level
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgePlan {
    /// Strictly descending piece levels; offsets are prefix sums.
    pub pieces: Vec<LedgePiece>,
    /// The request rounded up to the minimum block size.
    pub rounded_size: u64,
}

impl LedgePlan {
    /// Bytes the plan actually occupies (>= rounded_size under a bound).
    pub fn total(&self) -> u64 {
        self.pieces.iter().map(|p| p.size()).sum()
    }

    /// Smallest level whose block holds the whole plan.
    pub fn fit_level(&self) -> u8 {
        ceil_log2(self.total())
    }
}

/// Split `size` into aligned pieces. `max_pieces` of `None` gives the exact
/// binary decomposition; `Some(k)` bounds the piece count at the cost of
/// padding.
pub fn decompose(
    size: u64,
    config: &GeometryConfig,
    max_pieces: Option<usize>,
) -> Result<LedgePlan, AllocError> {
    if size == 0 {
        return Err(AllocError::InvalidSize);
    }
    if size > config.total_bytes() {
        return Err(AllocError::TooLarge { size, space: config.total_bytes() });
    }
    if max_pieces == Some(0) {
        return Err(AllocError::BadPieceBound);
    }
    let rounded = config.round_to_min(size);
    if rounded > config.total_bytes() {
        return Err(AllocError::TooLarge { size, space: config.total_bytes() });
    }

    let mut levels: Vec<u8> = Vec::new();
    let mut rest = rounded;
    while rest != 0 {
        let level = 63 - rest.leading_zeros() as u8;
        levels.push(level);
        rest -= 1u64 << level;
    }

    if let Some(k) = max_pieces {
        if levels.len() > k {
            let kept = k - 1;
            let tail: u64 = levels[kept..].iter().map(|&l| 1u64 << l).sum();
            levels.truncate(kept);
            levels.push(ceil_log2(tail));
            // The rounded tail can match the piece above it; merge upward.
            while levels.len() >= 2 && levels[levels.len() - 1] == levels[levels.len() - 2] {
                let l = levels.pop().unwrap();
                levels.pop();
                levels.push(l + 1);
            }
        }
    }

    let mut pieces = Vec::with_capacity(levels.len());
    let mut offset = 0u64;
    for level in levels {
        pieces.push(LedgePiece { level, offset });
        offset += 1u64 << level;
    }
    Ok(LedgePlan { pieces, rounded_size: rounded })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u8, m: u8) -> GeometryConfig {
        GeometryConfig::new(n, m, 2).unwrap()
    }

    fn shape(plan: &LedgePlan) -> Vec<(u64, u64)> {
        plan.pieces.iter().map(|p| (p.size(), p.offset)).collect()
    }

    #[test]
    fn eleven_bytes_is_eight_two_one() {
        let plan = decompose(11, &cfg(4, 0), None).unwrap();
        assert_eq!(shape(&plan), vec![(8, 0), (2, 8), (1, 10)]);
        assert_eq!(plan.total(), 11);
        assert_eq!(plan.rounded_size, 11);
        assert_eq!(plan.fit_level(), 4);
    }

    #[test]
    fn thirteen_bytes_is_eight_four_one() {
        let plan = decompose(13, &cfg(4, 0), None).unwrap();
        assert_eq!(shape(&plan), vec![(8, 0), (4, 8), (1, 12)]);
        // Pieces reassemble the request exactly.
        assert_eq!(plan.total(), 13);
    }

    #[test]
    fn powers_of_two_are_single_pieces() {
        let plan = decompose(16, &cfg(4, 0), None).unwrap();
        assert_eq!(shape(&plan), vec![(16, 0)]);
        let plan = decompose(1, &cfg(4, 0), None).unwrap();
        assert_eq!(shape(&plan), vec![(1, 0)]);
    }

    #[test]
    fn minimum_level_rounds_the_request() {
        let plan = decompose(11, &cfg(8, 2), None).unwrap();
        assert_eq!(plan.rounded_size, 12);
        assert_eq!(shape(&plan), vec![(8, 0), (4, 8)]);
    }

    #[test]
    fn bad_sizes_are_rejected() {
        assert_eq!(decompose(0, &cfg(4, 0), None), Err(AllocError::InvalidSize));
        assert_eq!(
            decompose(17, &cfg(4, 0), None),
            Err(AllocError::TooLarge { size: 17, space: 16 })
        );
        // Rounding can push a fitting size over the space.
        assert_eq!(
            decompose(255, &cfg(8, 4), None),
            Ok(LedgePlan {
                pieces: vec![LedgePiece { level: 8, offset: 0 }],
                rounded_size: 256
            })
        );
        assert_eq!(decompose(5, &cfg(4, 0), Some(0)), Err(AllocError::BadPieceBound));
    }

    #[test]
    fn piece_bound_rounds_the_tail() {
        // 11 = 8+2+1; with two pieces the 2+1 tail becomes one 4.
        let plan = decompose(11, &cfg(4, 0), Some(2)).unwrap();
        assert_eq!(shape(&plan), vec![(8, 0), (4, 8)]);
        assert_eq!(plan.total(), 12);
    }

    #[test]
    fn piece_bound_merges_cascade() {
        // 15 = 8+4+2+1; with two pieces the 4+2+1 tail rounds to 8, which
        // merges with the leading 8 into a single 16.
        let plan = decompose(15, &cfg(4, 0), Some(2)).unwrap();
        assert_eq!(shape(&plan), vec![(16, 0)]);
        // With three pieces the 2+1 tail rounds to 4, merging into 8+8=16...
        // no: 8+4+4 merges the two 4s into an 8, then 8+8 into 16.
        let plan = decompose(15, &cfg(4, 0), Some(3)).unwrap();
        assert_eq!(shape(&plan), vec![(16, 0)]);
        // 23 = 16+4+2+1; three pieces: 16+4+4 -> 16+8.
        let plan = decompose(23, &cfg(8, 0), Some(3)).unwrap();
        assert_eq!(shape(&plan), vec![(16, 0), (8, 16)]);
    }

    #[test]
    fn generous_bounds_change_nothing() {
        for size in 1..=256u64 {
            let free = decompose(size, &cfg(8, 0), None).unwrap();
            let bounded = decompose(size, &cfg(8, 0), Some(free.pieces.len())).unwrap();
            assert_eq!(free, bounded);
            assert_eq!(free.total(), size);
        }
    }

    #[test]
    fn bounded_plans_obey_count_padding_and_order() {
        for size in 1..=512u64 {
            for k in 1..=6usize {
                let plan = match decompose(size, &cfg(9, 0), Some(k)) {
                    Ok(p) => p,
                    Err(_) => panic!("size {size} k {k}"),
                };
                assert!(plan.pieces.len() <= k);
                assert!(plan.total() >= size);
                // Padding bound: total < size + size/2^(k-1), and the plan
                // never outgrows the request's enclosing power of two.
                assert!(plan.total() <= 1u64 << ceil_log2(size));
                let overhead = plan.total() - size;
                assert!(
                    (overhead as f64) <= (size as f64) / ((1u64 << (k - 1)) as f64),
                    "size {size} k {k} overhead {overhead}"
                );
                // Strictly descending piece levels, offsets are prefix sums.
                let mut off = 0;
                let mut prev = u8::MAX;
                for p in &plan.pieces {
                    assert!(p.level < prev);
                    assert_eq!(p.offset, off);
                    assert_eq!(p.offset % p.size(), 0, "self-aligned at aligned bases");
                    off += p.size();
                    prev = p.level;
                }
            }
        }
    }
}
