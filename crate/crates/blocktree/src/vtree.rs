//! Virtual address spaces described by mapping trees.
//!
//! A virtual space is a block tree whose leaves are backed by real
//! memory blocks obtained from a [`BackingSource`]. Interior nodes
//! carry a full bit: set iff the node's whole extent is backed. The
//! full bit drives the doubling population strategy, which widens the
//! backed region one sibling at a time instead of paging at a fixed
//! grain.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{BlockId, GeometryConfig};
use crate::rtree::{AllocError, Allocator};
use crate::tree::{BlockTree, Payload};

/// Node payload of a mapping tree.
///
/// `backing` is the real-memory base address; it is meaningful only
/// on leaves (interiors keep 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VPayload {
    pub full: bool,
    pub backing: u64,
}

impl Payload for VPayload {
    fn annotation(&self) -> Option<String> {
        Some(if self.full { "1" } else { "0" }.to_string())
    }

    fn snapshot_fields(&self, is_leaf: bool) -> Option<String> {
        if is_leaf {
            Some(format!("full={} back={:#x}", self.full as u8, self.backing))
        } else {
            Some(format!("full={}", self.full as u8))
        }
    }

    fn parse_snapshot_fields(fields: &[(&str, &str)], is_leaf: bool) -> Result<Self, String> {
        let mut payload = VPayload::default();
        let mut seen_full = false;
        for &(key, value) in fields {
            match key {
                "full" => {
                    payload.full = match value {
                        "0" => false,
                        "1" => true,
                        other => return Err(format!("bad full bit `{other}`")),
                    };
                    seen_full = true;
                }
                "back" if is_leaf => {
                    let digits = value
                        .strip_prefix("0x")
                        .ok_or_else(|| format!("bad backing address `{value}`"))?;
                    payload.backing = u64::from_str_radix(digits, 16)
                        .map_err(|e| format!("bad backing address `{value}`: {e}"))?;
                }
                other => return Err(format!("unexpected field `{other}`")),
            }
        }
        if !seen_full {
            return Err("missing full bit".to_string());
        }
        Ok(payload)
    }

    fn byte_glyph() -> char {
        'b'
    }
}

/// Supplies and reclaims real-memory blocks for backing.
pub trait BackingSource {
    /// A real block of the given level, by base address.
    fn obtain(&mut self, level: u8) -> Result<u64, AllocError>;
    fn release(&mut self, base: u64, level: u8) -> Result<(), AllocError>;
}

impl BackingSource for Allocator {
    fn obtain(&mut self, level: u8) -> Result<u64, AllocError> {
        self.alloc_block(level).map(|a| a.base())
    }

    fn release(&mut self, base: u64, level: u8) -> Result<(), AllocError> {
        self.free_block(base, level).map(|_| ())
    }
}

/// How accesses to unbacked locations populate a space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationStrategy {
    /// Back minimally, then double: an access beside a fully backed
    /// sibling backs the whole missing sibling block.
    Doubling,
    /// Pre-populate the whole fixed-size space from its ledge plan.
    FixedLedged,
    /// Back fixed pages of size 2^page_level on first touch.
    FixedPaging { page_level: u8 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("no such space")]
    UnknownSpace,
    #[error("offset {offset:#x} out of bounds (space bound {bound:#x})")]
    OutOfBounds { offset: u64, bound: u64 },
    #[error("trap: offset {offset:#x} beyond fixed size {size:#x}")]
    Trap { offset: u64, size: u64 },
    #[error("offset {offset:#x} is not backed")]
    Unbacked { offset: u64 },
    #[error("invalid size {size:#x} for a space of {space:#x} bytes")]
    BadSize { size: u64, space: u64 },
    #[error("page level {page_level} outside [{min}, {max}]")]
    BadPageLevel { page_level: u8, min: u8, max: u8 },
    #[error("backing allocation failed: {0}")]
    Backing(#[from] AllocError),
}

/// What an access will do, before touching any allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessPlan {
    /// Offset already falls inside a backed leaf.
    Hit { leaf: BlockId },
    /// One new leaf must be backed at this block.
    Back { block: BlockId },
}

/// A resolved virtual offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub leaf: BlockId,
    pub real_base: u64,
    pub offset_in_block: u64,
}

impl Translation {
    pub fn real_address(&self) -> u64 {
        self.real_base + self.offset_in_block
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    /// The virtual block newly backed by this access, with its real base.
    pub backed: Option<(BlockId, u64)>,
    pub translation: Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpaceHandle(u64);

impl SpaceHandle {
    pub fn raw(&self) -> u64 {
        self.0
    }
}

/// One virtual address space.
#[derive(Debug, Clone)]
pub struct VirtualSpace {
    tree: BlockTree<VPayload>,
    strategy: PopulationStrategy,
    size: u64,
}

impl VirtualSpace {
    pub fn tree(&self) -> &BlockTree<VPayload> {
        &self.tree
    }

    pub fn strategy(&self) -> PopulationStrategy {
        self.strategy
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn backed_bytes(&self) -> u64 {
        self.tree.bytes_allocated()
    }

    pub fn node_count(&self) -> u64 {
        self.tree.node_count()
    }

    /// Offsets at or beyond this bound cannot be addressed.
    fn bound(&self) -> u64 {
        match self.strategy {
            PopulationStrategy::Doubling => self.tree.config().total_bytes(),
            _ => self.size,
        }
    }
}

/// Creates, populates, translates and destroys virtual spaces.
#[derive(Debug, Clone)]
pub struct SpaceManager {
    config: GeometryConfig,
    spaces: BTreeMap<u64, VirtualSpace>,
    next_handle: u64,
}

impl SpaceManager {
    pub fn new(config: GeometryConfig) -> Self {
        SpaceManager { config, spaces: BTreeMap::new(), next_handle: 1 }
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.spaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spaces.is_empty()
    }

    pub fn spaces(&self) -> impl Iterator<Item = (SpaceHandle, &VirtualSpace)> {
        self.spaces.iter().map(|(&h, s)| (SpaceHandle(h), s))
    }

    pub fn space(&self, handle: SpaceHandle) -> Result<&VirtualSpace, SpaceError> {
        self.spaces.get(&handle.0).ok_or(SpaceError::UnknownSpace)
    }

    /// A new space. Fixed strategies obtain their pre-population from
    /// `source` atomically: on failure nothing stays allocated.
    pub fn create_space(
        &mut self,
        strategy: PopulationStrategy,
        size: u64,
        source: &mut dyn BackingSource,
    ) -> Result<SpaceHandle, SpaceError> {
        let total = self.config.total_bytes();
        if size == 0 || size > total {
            return Err(SpaceError::BadSize { size, space: total });
        }
        if let PopulationStrategy::FixedPaging { page_level } = strategy {
            if page_level < self.config.min_level() || page_level > self.config.height_bits() {
                return Err(SpaceError::BadPageLevel {
                    page_level,
                    min: self.config.min_level(),
                    max: self.config.height_bits(),
                });
            }
        }
        let mut tree = BlockTree::new(self.config);
        if strategy == PopulationStrategy::FixedLedged {
            populate_ledged(&mut tree, size, source)?;
        }
        let handle = self.next_handle;
        self.next_handle += 1;
        self.spaces.insert(handle, VirtualSpace { tree, strategy, size });
        Ok(SpaceHandle(handle))
    }

    /// Destroys the space, releasing every backed leaf to `source`.
    pub fn destroy_space(
        &mut self,
        handle: SpaceHandle,
        source: &mut dyn BackingSource,
    ) -> Result<(), SpaceError> {
        let space = self.spaces.remove(&handle.0).ok_or(SpaceError::UnknownSpace)?;
        for (id, payload) in space.tree.leaves() {
            source.release(payload.backing, id.level())?;
        }
        Ok(())
    }

    /// Resolves `offset` to real memory without populating anything.
    pub fn translate(&self, handle: SpaceHandle, offset: u64) -> Result<Translation, SpaceError> {
        let space = self.space(handle)?;
        if offset >= space.bound() {
            return Err(SpaceError::OutOfBounds { offset, bound: space.bound() });
        }
        match find_covering(&space.tree, offset) {
            Some(Ok(leaf)) => {
                let payload = space.tree.node(leaf).unwrap().payload;
                Ok(Translation {
                    leaf,
                    real_base: payload.backing,
                    offset_in_block: offset - leaf.base(),
                })
            }
            _ => Err(SpaceError::Unbacked { offset }),
        }
    }

    /// What [`Self::access`] would do for this offset, without doing it.
    pub fn plan_access(&self, handle: SpaceHandle, offset: u64) -> Result<AccessPlan, SpaceError> {
        let space = self.space(handle)?;
        let total = space.tree.config().total_bytes();
        if offset >= total {
            return Err(SpaceError::OutOfBounds { offset, bound: total });
        }
        if offset >= space.bound() {
            return Err(SpaceError::Trap { offset, size: space.size });
        }
        plan_in_tree(&space.tree, space.strategy, offset)
    }

    /// Touches `offset`: backs new memory per the space's strategy if
    /// needed, then translates.
    pub fn access(
        &mut self,
        handle: SpaceHandle,
        offset: u64,
        source: &mut dyn BackingSource,
    ) -> Result<AccessResult, SpaceError> {
        let plan = self.plan_access(handle, offset)?;
        let backed = match plan {
            AccessPlan::Hit { .. } => None,
            AccessPlan::Back { block } => {
                let real_base = source.obtain(block.level())?;
                let space = self.spaces.get_mut(&handle.0).unwrap();
                back_block(&mut space.tree, block, real_base);
                Some((block, real_base))
            }
        };
        Ok(AccessResult { backed, translation: self.translate(handle, offset)? })
    }
}

/// The partition entity covering `offset`: `Ok(leaf)` if backed,
/// `Err(interior)` whose missing child covers the offset otherwise,
/// `None` in an empty tree.
fn find_covering(tree: &BlockTree<VPayload>, offset: u64) -> Option<Result<BlockId, BlockId>> {
    let cfg = tree.config();
    for level in cfg.min_level()..=cfg.height_bits() {
        let id = BlockId::new(level, offset >> level);
        if let Some(node) = tree.node(id) {
            return Some(if node.kind.is_leaf() { Ok(id) } else { Err(id) });
        }
    }
    None
}

fn plan_in_tree(
    tree: &BlockTree<VPayload>,
    strategy: PopulationStrategy,
    offset: u64,
) -> Result<AccessPlan, SpaceError> {
    let cfg = tree.config();
    let minimal = |level: u8| BlockId::new(level, offset >> level);
    match find_covering(tree, offset) {
        Some(Ok(leaf)) => Ok(AccessPlan::Hit { leaf }),
        Some(Err(interior)) => {
            // The child covering the offset is missing; its sibling is
            // present (coalescing keeps at least one child).
            let hole = interior.child_covering(offset);
            let block = match strategy {
                PopulationStrategy::FixedLedged => {
                    return Err(SpaceError::Unbacked { offset });
                }
                PopulationStrategy::FixedPaging { page_level } => minimal(page_level),
                PopulationStrategy::Doubling => {
                    let sibling = tree.node(hole.sibling()).expect("interior keeps a child");
                    if sibling.payload.full {
                        hole
                    } else {
                        minimal(cfg.min_level())
                    }
                }
            };
            Ok(AccessPlan::Back { block })
        }
        None => {
            let level = match strategy {
                PopulationStrategy::FixedPaging { page_level } => page_level,
                _ => cfg.min_level(),
            };
            Ok(AccessPlan::Back { block: minimal(level) })
        }
    }
}

/// Installs a backed leaf and refreshes full bits up to the root.
fn back_block(tree: &mut BlockTree<VPayload>, block: BlockId, real_base: u64) {
    let target = if tree.is_empty() {
        tree.root_id()
    } else {
        match find_covering(tree, block.base()) {
            Some(Err(interior)) => interior.child_covering(block.base()),
            _ => unreachable!("planned block is not inside a niche"),
        }
    };
    tree.carve(target, vec![(block, VPayload { full: true, backing: real_base })])
        .expect("planned block fits its niche");
    refresh_full_bits(tree, block);
}

fn refresh_full_bits(tree: &mut BlockTree<VPayload>, from: BlockId) {
    let mut cur = from;
    while cur.level() < tree.config().height_bits() {
        let parent = cur.parent();
        let child_full = |id: BlockId| tree.node(id).is_some_and(|n| n.payload.full);
        let full = child_full(parent.left_child()) && child_full(parent.right_child());
        tree.node_mut(parent).expect("ancestors exist").payload.full = full;
        cur = parent;
    }
}

/// Pre-populates a fixed-size space: one backed leaf per ledge piece.
/// All real blocks are obtained before the tree is touched, so a
/// failure releases them and leaves both sides unchanged.
fn populate_ledged(
    tree: &mut BlockTree<VPayload>,
    size: u64,
    source: &mut dyn BackingSource,
) -> Result<(), SpaceError> {
    let plan = crate::ledge::decompose(size, tree.config(), None)?;
    let mut leaves = Vec::new();
    for piece in &plan.pieces {
        match source.obtain(piece.level) {
            Ok(base) => {
                let id = BlockId::from_base(piece.level, piece.offset).expect("self-aligned");
                leaves.push((id, VPayload { full: true, backing: base }));
            }
            Err(err) => {
                for (id, payload) in leaves {
                    let _ = source.release(payload.backing, id.level());
                }
                return Err(err.into());
            }
        }
    }
    tree.carve(tree.root_id(), leaves.clone()).expect("ledge pieces tile from zero");
    // Interiors along the spine may cover several pieces; recompute
    // from each leaf so every ancestor sees final child states.
    for (id, _) in leaves {
        refresh_full_bits(tree, id);
    }
    Ok(())
}
