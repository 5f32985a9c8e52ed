//! Saturating per-level niche counters.
//!
//! A node of level `l` carries one counter per level from `l - 1` down to
//! the minimum level `m`. Counter `q` estimates how many free blocks
//! (niches) of level `q` sit under the node, saturating at `2^w - 1`. A
//! parent map is a pure function of its children: the pointwise saturating
//! sum of the child maps, with one new counter prepended for level `l - 1`
//! that is 1 exactly when one child is missing. At `w = 1` the maps are
//! bitmaps and the sum degenerates to bitwise OR.

use thiserror::Error;

use crate::geometry::GeometryConfig;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CombineError {
    /// Two missing children would mean the parent itself is a free block,
    /// which canonical coalescing forbids.
    #[error("cannot combine two missing children")]
    NoChildren,
    #[error("child map has length {got}, expected {want}")]
    LengthMismatch { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NicheMap {
    counters: Vec<u16>,
}

impl NicheMap {
    pub fn zeros(len: usize) -> Self {
        NicheMap { counters: vec![0; len] }
    }

    pub fn from_counters(counters: Vec<u16>) -> Self {
        NicheMap { counters }
    }

    /// Counters ordered from the level just below the owning node down to
    /// the minimum level.
    pub fn counters(&self) -> &[u16] {
        &self.counters
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }

    /// Counter for `level`, given the level of the node carrying this map.
    pub fn counter_for(&self, node_level: u8, level: u8) -> u16 {
        debug_assert!(level < node_level);
        self.counters[(node_level - 1 - level) as usize]
    }

    pub fn is_zero(&self) -> bool {
        self.counters.iter().all(|&c| c == 0)
    }

    /// Parent map from two child maps at `child_level`. `None` marks a
    /// missing child (a niche).
    pub fn combine(
        left: Option<&NicheMap>,
        right: Option<&NicheMap>,
        child_level: u8,
        config: &GeometryConfig,
    ) -> Result<NicheMap, CombineError> {
        let want = config.map_len(child_level);
        for side in [left, right].into_iter().flatten() {
            if side.len() != want {
                return Err(CombineError::LengthMismatch { got: side.len(), want });
            }
        }
        let missing = match (left, right) {
            (None, None) => return Err(CombineError::NoChildren),
            (Some(_), Some(_)) => 0,
            _ => 1,
        };
        let max = config.counter_max();
        let mut counters = Vec::with_capacity(want + 1);
        counters.push(missing);
        for pos in 0..want {
            let l = left.map_or(0, |m| m.counters[pos]);
            let r = right.map_or(0, |m| m.counters[pos]);
            counters.push((l + r).min(max));
        }
        Ok(NicheMap { counters })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u8, m: u8, w: u8) -> GeometryConfig {
        GeometryConfig::new(n, m, w).unwrap()
    }

    fn map(cs: &[u16]) -> NicheMap {
        NicheMap::from_counters(cs.to_vec())
    }

    #[test]
    fn combine_two_present_children() {
        let g = cfg(4, 0, 2);
        let out = NicheMap::combine(Some(&map(&[0, 1, 0])), Some(&map(&[1, 0, 0])), 3, &g);
        assert_eq!(out.unwrap(), map(&[0, 1, 1, 0]));
    }

    #[test]
    fn combine_with_missing_child_prepends_one() {
        let g = cfg(4, 0, 2);
        let out = NicheMap::combine(Some(&map(&[0, 1, 0])), None, 3, &g);
        assert_eq!(out.unwrap(), map(&[1, 0, 1, 0]));
        let out = NicheMap::combine(None, Some(&map(&[0, 1, 0])), 3, &g);
        assert_eq!(out.unwrap(), map(&[1, 0, 1, 0]));
    }

    #[test]
    fn combine_width_one_is_bitwise_or() {
        let g = cfg(4, 0, 1);
        let out = NicheMap::combine(Some(&map(&[1, 0, 1])), Some(&map(&[1, 1, 0])), 3, &g);
        assert_eq!(out.unwrap(), map(&[0, 1, 1, 1]));
    }

    #[test]
    fn combine_saturates_at_counter_max() {
        let g = cfg(3, 0, 2);
        let out = NicheMap::combine(Some(&map(&[3, 2])), Some(&map(&[1, 2])), 2, &g);
        assert_eq!(out.unwrap(), map(&[0, 3, 3]));
    }

    #[test]
    fn combine_rejects_two_missing_children() {
        let g = cfg(4, 0, 2);
        assert_eq!(NicheMap::combine(None, None, 3, &g), Err(CombineError::NoChildren));
    }

    #[test]
    fn combine_rejects_wrong_lengths() {
        let g = cfg(4, 0, 2);
        assert_eq!(
            NicheMap::combine(Some(&map(&[0, 1])), None, 3, &g),
            Err(CombineError::LengthMismatch { got: 2, want: 3 })
        );
    }

    #[test]
    fn counter_lookup_by_level() {
        let m = map(&[0, 1, 2]);
        assert_eq!(m.counter_for(4, 3), 0);
        assert_eq!(m.counter_for(4, 2), 1);
        assert_eq!(m.counter_for(4, 1), 2);
    }
}
