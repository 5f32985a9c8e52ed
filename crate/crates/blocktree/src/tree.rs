//! Sparse block trees.
//!
//! A tree stores one node per *backed or allocated* region boundary: leaves
//! are allocated (or backed) blocks, interior nodes are split blocks, and a
//! missing child of an interior node is a *niche*, a free block of exactly
//! the missing child's size. Coalescing is canonical: an interior node never
//! has two missing children (it would itself be the niche), so the set of
//! niches is uniquely determined by the set of leaves. The empty tree is one
//! all-space niche.
//!
//! Nodes live in one ordered store per level, keyed by block index, which
//! makes whole-tree iteration deterministic. Every node carries a niche map;
//! interior maps are recomputed from children on each structural change,
//! never adjusted in place.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::geometry::{BlockId, GeometryConfig};
use crate::niche_map::NicheMap;

/// Per-node payload. Allocation trees carry `()`; mapping trees carry a
/// full flag and a backing address.
pub trait Payload: Clone + Default + PartialEq + fmt::Debug {
    /// Annotation drawn at the node's center in figure renderings; `None`
    /// falls back to the node's niche map.
    fn annotation(&self) -> Option<String> {
        None
    }

    /// Extra `key=value` tokens for the node's snapshot line.
    fn snapshot_fields(&self, _is_leaf: bool) -> Option<String> {
        None
    }

    fn parse_snapshot_fields(fields: &[(&str, &str)], is_leaf: bool) -> Result<Self, String>;

    /// Glyph for one allocated/backed byte in figure renderings.
    fn byte_glyph() -> char {
        'x'
    }
}

impl Payload for () {
    fn parse_snapshot_fields(fields: &[(&str, &str)], _is_leaf: bool) -> Result<Self, String> {
        if let Some((k, _)) = fields.first() {
            return Err(format!("unexpected field `{k}`"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Leaf,
    Interior { left: bool, right: bool },
}

impl NodeKind {
    pub fn is_leaf(&self) -> bool {
        matches!(self, NodeKind::Leaf)
    }

    pub fn has_child(&self, left_side: bool) -> bool {
        match self {
            NodeKind::Leaf => false,
            NodeKind::Interior { left, right } => {
                if left_side {
                    *left
                } else {
                    *right
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<P> {
    pub kind: NodeKind,
    pub map: NicheMap,
    pub payload: P,
}

impl<P> Node<P> {
    pub fn is_leaf(&self) -> bool {
        self.kind.is_leaf()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("block {0} lies outside the space")]
    OutOfRange(BlockId),
    #[error("block level {0} is below the minimum level {1}")]
    BelowMinLevel(u8, u8),
    #[error("{0} is not a niche")]
    NotANiche(BlockId),
    #[error("no leaf at {0}")]
    NotALeaf(BlockId),
    #[error("carve rejected: {0}")]
    BadCarve(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("tree invariant violated: {0}")]
pub struct InvariantViolation(pub String);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("bad snapshot header: {0}")]
    Header(String),
    #[error("snapshot line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("snapshot violates tree invariants: {0}")]
    Invariant(String),
}

/// Structural changes made by [`BlockTree::carve`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CarveReport {
    /// Nodes created, leaves and interiors alike.
    pub created_nodes: Vec<BlockId>,
    /// Niches that came into existence (missing children of new interiors).
    pub created_niches: Vec<BlockId>,
}

/// Structural changes made by [`BlockTree::remove_leaf`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoveReport {
    /// The niche the freed block merged into after coalescing.
    pub merged_niche: BlockId,
    /// Sibling niches consumed by the merge, smallest first.
    pub merged_away: Vec<BlockId>,
    /// Nodes removed, the leaf itself plus collapsed ancestors.
    pub removed_nodes: Vec<BlockId>,
}

/// Where an aligned block sits relative to the tree's structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocalView {
    /// A node exists at the block; these are the tree's niches within it.
    Subtree { niches: Vec<BlockId> },
    /// The block lies inside this niche.
    InsideNiche(BlockId),
    /// The block lies inside this leaf.
    InsideLeaf(BlockId),
}

#[derive(Clone, PartialEq)]
pub struct BlockTree<P: Payload> {
    config: GeometryConfig,
    levels: Vec<BTreeMap<u64, Node<P>>>,
}

impl<P: Payload> BlockTree<P> {
    pub fn new(config: GeometryConfig) -> Self {
        let levels = vec![BTreeMap::new(); config.height_bits() as usize + 1];
        BlockTree { config, levels }
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    pub fn root_id(&self) -> BlockId {
        BlockId::new(self.config.height_bits(), 0)
    }

    pub fn is_empty(&self) -> bool {
        self.levels[self.config.height_bits() as usize].is_empty()
    }

    pub fn node(&self, id: BlockId) -> Option<&Node<P>> {
        self.levels.get(id.level() as usize)?.get(&id.index())
    }

    pub fn node_mut(&mut self, id: BlockId) -> Option<&mut Node<P>> {
        self.levels.get_mut(id.level() as usize)?.get_mut(&id.index())
    }

    pub fn root(&self) -> Option<&Node<P>> {
        self.node(self.root_id())
    }

    pub fn node_count(&self) -> u64 {
        self.levels.iter().map(|m| m.len() as u64).sum()
    }

    /// Nodes at one level in index order.
    pub fn nodes_at_level(&self, level: u8) -> impl Iterator<Item = (BlockId, &Node<P>)> {
        self.levels[level as usize]
            .iter()
            .map(move |(&i, n)| (BlockId::new(level, i), n))
    }

    /// All leaves in address order.
    pub fn leaves(&self) -> Vec<(BlockId, &P)> {
        let mut out: Vec<(BlockId, &P)> = Vec::new();
        for level in self.config.min_level()..=self.config.height_bits() {
            for (id, node) in self.nodes_at_level(level) {
                if node.is_leaf() {
                    out.push((id, &node.payload));
                }
            }
        }
        out.sort_by_key(|(id, _)| id.base());
        out
    }

    /// The leaf starting exactly at `base`, if any. Returns an interior
    /// node's id as `Err` when `base` opens a split block instead.
    pub fn leaf_at_base(&self, base: u64) -> Option<Result<BlockId, BlockId>> {
        for level in self.config.min_level()..=self.config.height_bits() {
            if base & ((1u64 << level) - 1) != 0 {
                // The lowest node starting at any base is reachable before
                // alignment runs out, so stop at the first misaligned level.
                return None;
            }
            let id = BlockId::new(level, base >> level);
            if let Some(node) = self.node(id) {
                return Some(if node.is_leaf() { Ok(id) } else { Err(id) });
            }
        }
        None
    }

    /// All niches in (level, index) order. The empty tree is one whole-space
    /// niche.
    pub fn niches(&self) -> Vec<BlockId> {
        if self.is_empty() {
            return vec![self.root_id()];
        }
        let mut out = Vec::new();
        for level in self.config.min_level() + 1..=self.config.height_bits() {
            for (id, node) in self.nodes_at_level(level) {
                if let NodeKind::Interior { left, right } = node.kind {
                    if !left {
                        out.push(id.left_child());
                    }
                    if !right {
                        out.push(id.right_child());
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Exact niche counts per level, index 0 = minimum level.
    pub fn niche_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; (self.config.height_bits() - self.config.min_level()) as usize + 1];
        for id in self.niches() {
            hist[(id.level() - self.config.min_level()) as usize] += 1;
        }
        hist
    }

    pub fn bytes_allocated(&self) -> u64 {
        self.leaves().iter().map(|(id, _)| id.size()).sum()
    }

    /// Exact niche counts under an existing node, by traversal. Independent
    /// of the stored maps: this is the ground truth they approximate. The
    /// result is ordered like a niche map, node level - 1 down to minimum.
    pub fn true_niche_counts(&self, id: BlockId) -> Result<Vec<u64>, TreeError> {
        let node = self.node(id).ok_or(TreeError::NotANiche(id))?;
        let mut counts = vec![0u64; self.config.map_len(id.level())];
        self.count_under(id, node, id.level(), &mut counts);
        Ok(counts)
    }

    fn count_under(&self, id: BlockId, node: &Node<P>, top: u8, counts: &mut [u64]) {
        let NodeKind::Interior { left, right } = node.kind else {
            return;
        };
        for (child, present) in [(id.left_child(), left), (id.right_child(), right)] {
            if present {
                let cn = self.node(child).expect("child flag set but node missing");
                self.count_under(child, cn, top, counts);
            } else {
                counts[(top - 1 - child.level()) as usize] += 1;
            }
        }
    }

    /// Locate `block` relative to the structure without a whole-tree scan.
    pub fn local_view(&self, block: BlockId) -> LocalView {
        let mut cur = self.root_id();
        if self.is_empty() {
            return LocalView::InsideNiche(cur);
        }
        loop {
            if cur == block {
                let mut niches = Vec::new();
                self.collect_niches_under(cur, &mut niches);
                niches.sort();
                return LocalView::Subtree { niches };
            }
            let node = self.node(cur).expect("walk reached missing node");
            match node.kind {
                NodeKind::Leaf => return LocalView::InsideLeaf(cur),
                NodeKind::Interior { .. } => {
                    let child = cur.child_covering(block.base());
                    if node.kind.has_child(child.is_left()) {
                        cur = child;
                    } else {
                        return LocalView::InsideNiche(child);
                    }
                }
            }
        }
    }

    fn collect_niches_under(&self, id: BlockId, out: &mut Vec<BlockId>) {
        let node = self.node(id).expect("collect under missing node");
        let NodeKind::Interior { left, right } = node.kind else {
            return;
        };
        for (child, present) in [(id.left_child(), left), (id.right_child(), right)] {
            if present {
                self.collect_niches_under(child, out);
            } else {
                out.push(child);
            }
        }
    }

    fn child_map(&self, parent: BlockId, left_side: bool) -> Option<&NicheMap> {
        let child = if left_side { parent.left_child() } else { parent.right_child() };
        self.node(child).map(|n| &n.map)
    }

    /// Recompute one interior node's map from its children.
    fn refresh_map(&mut self, id: BlockId) {
        let node = self.node(id).expect("refresh of missing node");
        let NodeKind::Interior { left, right } = node.kind else {
            return;
        };
        let lm = if left { self.child_map(id, true).cloned() } else { None };
        let rm = if right { self.child_map(id, false).cloned() } else { None };
        let map = NicheMap::combine(lm.as_ref(), rm.as_ref(), id.level() - 1, &self.config)
            .expect("interior node with both children missing");
        self.node_mut(id).unwrap().map = map;
    }

    /// Recompute maps from `id` (inclusive) up to the root.
    fn refresh_maps_upward(&mut self, mut id: BlockId) {
        loop {
            self.refresh_map(id);
            if id.level() == self.config.height_bits() {
                break;
            }
            id = id.parent();
        }
    }

    fn check_block(&self, id: BlockId) -> Result<(), TreeError> {
        if !id.in_bounds(&self.config) {
            return Err(TreeError::OutOfRange(id));
        }
        if id.level() < self.config.min_level() {
            return Err(TreeError::BelowMinLevel(id.level(), self.config.min_level()));
        }
        Ok(())
    }

    /// True when `id` names a free block: the whole space on an empty tree,
    /// or a missing child of an existing interior node.
    pub fn is_niche(&self, id: BlockId) -> bool {
        if self.check_block(id).is_err() {
            return false;
        }
        if self.is_empty() {
            return id == self.root_id();
        }
        if id.level() == self.config.height_bits() {
            return false;
        }
        match self.node(id.parent()) {
            Some(p) => !p.kind.has_child(id.is_left()) && !p.kind.is_leaf(),
            None => false,
        }
    }

    /// Fill the niche `target` with `leaves` (disjoint blocks inside it,
    /// address order), creating the connecting interior nodes. Gaps between
    /// the leaves become new niches. Ancestor maps are recomputed on the way
    /// back to the root.
    pub fn carve(
        &mut self,
        target: BlockId,
        leaves: Vec<(BlockId, P)>,
    ) -> Result<CarveReport, TreeError> {
        self.check_block(target)?;
        if !self.is_niche(target) {
            return Err(TreeError::NotANiche(target));
        }
        if leaves.is_empty() {
            return Err(TreeError::BadCarve("no leaves"));
        }
        for (id, _) in &leaves {
            self.check_block(*id)?;
            if !target.contains_block(*id) {
                return Err(TreeError::BadCarve("leaf outside the target niche"));
            }
        }
        for pair in leaves.windows(2) {
            if pair[0].0.end() > pair[1].0.base() {
                return Err(TreeError::BadCarve("leaves overlap or are out of order"));
            }
        }
        let mut report = CarveReport::default();
        self.build_subtree(target, &leaves, &mut report);
        if target.level() < self.config.height_bits() {
            let parent = target.parent();
            let pnode = self.node_mut(parent).expect("niche without parent");
            if let NodeKind::Interior { left, right } = &mut pnode.kind {
                if target.is_left() {
                    *left = true;
                } else {
                    *right = true;
                }
            }
            self.refresh_maps_upward(parent);
        }
        report.created_niches.sort();
        Ok(report)
    }

    fn build_subtree(&mut self, block: BlockId, leaves: &[(BlockId, P)], report: &mut CarveReport) {
        if leaves.len() == 1 && leaves[0].0 == block {
            let map = NicheMap::zeros(self.config.map_len(block.level()));
            self.levels[block.level() as usize].insert(
                block.index(),
                Node { kind: NodeKind::Leaf, map, payload: leaves[0].1.clone() },
            );
            report.created_nodes.push(block);
            return;
        }
        debug_assert!(block.level() > self.config.min_level());
        let mid = block.base() + block.size() / 2;
        let split = leaves.partition_point(|(b, _)| b.base() < mid);
        let (lhs, rhs) = leaves.split_at(split);
        let (lc, rc) = (block.left_child(), block.right_child());
        if lhs.is_empty() {
            report.created_niches.push(lc);
        } else {
            self.build_subtree(lc, lhs, report);
        }
        if rhs.is_empty() {
            report.created_niches.push(rc);
        } else {
            self.build_subtree(rc, rhs, report);
        }
        let lm = if lhs.is_empty() { None } else { self.child_map(block, true).cloned() };
        let rm = if rhs.is_empty() { None } else { self.child_map(block, false).cloned() };
        let map = NicheMap::combine(lm.as_ref(), rm.as_ref(), block.level() - 1, &self.config)
            .expect("carve produced a childless interior");
        self.levels[block.level() as usize].insert(
            block.index(),
            Node {
                kind: NodeKind::Interior { left: !lhs.is_empty(), right: !rhs.is_empty() },
                map,
                payload: P::default(),
            },
        );
        report.created_nodes.push(block);
    }

    /// Remove the leaf `id`, coalescing upward: while the freed block's
    /// sibling is missing, the parent collapses and the free block doubles.
    /// Returns the leaf's payload and the structural changes.
    pub fn remove_leaf(&mut self, id: BlockId) -> Result<(P, RemoveReport), TreeError> {
        self.check_block(id)?;
        match self.node(id) {
            Some(n) if n.is_leaf() => {}
            _ => return Err(TreeError::NotALeaf(id)),
        }
        let payload = self.levels[id.level() as usize].remove(&id.index()).unwrap().payload;
        let mut report =
            RemoveReport { merged_niche: id, merged_away: Vec::new(), removed_nodes: vec![id] };
        let mut cur = id;
        loop {
            if cur.level() == self.config.height_bits() {
                report.merged_niche = cur;
                break;
            }
            let parent = cur.parent();
            let pnode = self.node_mut(parent).expect("non-root node without parent");
            let NodeKind::Interior { left, right } = &mut pnode.kind else {
                unreachable!("parent of a node is a leaf");
            };
            let sibling_present = if cur.is_left() { *right } else { *left };
            if sibling_present {
                if cur.is_left() {
                    *left = false;
                } else {
                    *right = false;
                }
                self.refresh_maps_upward(parent);
                report.merged_niche = cur;
                break;
            }
            report.merged_away.push(cur.sibling());
            self.levels[parent.level() as usize].remove(&parent.index());
            report.removed_nodes.push(parent);
            cur = parent;
        }
        Ok((payload, report))
    }

    /// Check every structural and map invariant.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let n = self.config.height_bits();
        let m = self.config.min_level();
        for level in 0..m {
            if !self.levels[level as usize].is_empty() {
                return Err(InvariantViolation(format!("node below minimum level {m} at level {level}")));
            }
        }
        for level in m..=n {
            for (id, node) in self.nodes_at_level(level) {
                if !id.in_bounds(&self.config) {
                    return Err(InvariantViolation(format!("{id} out of bounds")));
                }
                match node.kind {
                    NodeKind::Leaf => {
                        if !node.map.is_zero() || node.map.len() != self.config.map_len(level) {
                            return Err(InvariantViolation(format!("leaf {id} has a nonzero or misshapen map")));
                        }
                    }
                    NodeKind::Interior { left, right } => {
                        if level == m {
                            return Err(InvariantViolation(format!("interior {id} at the minimum level")));
                        }
                        if !left && !right {
                            return Err(InvariantViolation(format!("interior {id} has no children")));
                        }
                        for (child, flagged) in
                            [(id.left_child(), left), (id.right_child(), right)]
                        {
                            if flagged != self.node(child).is_some() {
                                return Err(InvariantViolation(format!(
                                    "{id} child flag for {child} disagrees with the store"
                                )));
                            }
                        }
                        let lm = if left { self.child_map(id, true).cloned() } else { None };
                        let rm = if right { self.child_map(id, false).cloned() } else { None };
                        let want =
                            NicheMap::combine(lm.as_ref(), rm.as_ref(), level - 1, &self.config)
                                .map_err(|e| InvariantViolation(format!("{id}: {e}")))?;
                        if node.map != want {
                            return Err(InvariantViolation(format!(
                                "{id} map {:?} differs from combined children {:?}",
                                node.map.counters(),
                                want.counters()
                            )));
                        }
                    }
                }
                if level < n {
                    let parent = id.parent();
                    match self.node(parent) {
                        Some(p) if p.kind.has_child(id.is_left()) => {}
                        _ => {
                            return Err(InvariantViolation(format!("{id} is not linked from a parent")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Line-oriented snapshot: a header followed by one line per node,
    /// levels descending, indexes ascending.
    pub fn to_snapshot(&self) -> String {
        let mut out = format!(
            "geomtree v1 n={} m={} w={}\n",
            self.config.height_bits(),
            self.config.min_level(),
            self.config.counter_bits()
        );
        for level in (self.config.min_level()..=self.config.height_bits()).rev() {
            for (id, node) in self.nodes_at_level(level) {
                let kind = if node.is_leaf() { "leaf" } else { "int" };
                let counters: Vec<String> =
                    node.map.counters().iter().map(|c| c.to_string()).collect();
                out.push_str(&format!(
                    "L{} I{} {} map=[{}]",
                    level,
                    id.index(),
                    kind,
                    counters.join(",")
                ));
                if let Some(extra) = node.payload.snapshot_fields(node.is_leaf()) {
                    out.push(' ');
                    out.push_str(&extra);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, SnapshotError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| SnapshotError::Header("empty snapshot".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("geomtree") || parts.next() != Some("v1") {
            return Err(SnapshotError::Header(format!("unrecognized header `{header}`")));
        }
        let mut n = None;
        let mut m = None;
        let mut w = None;
        for tok in parts {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| SnapshotError::Header(format!("bad token `{tok}`")))?;
            let v: u8 = v
                .parse()
                .map_err(|_| SnapshotError::Header(format!("bad value in `{tok}`")))?;
            match k {
                "n" => n = Some(v),
                "m" => m = Some(v),
                "w" => w = Some(v),
                _ => return Err(SnapshotError::Header(format!("unknown key `{k}`"))),
            }
        }
        let (Some(n), Some(m), Some(w)) = (n, m, w) else {
            return Err(SnapshotError::Header("missing n/m/w".into()));
        };
        let config = GeometryConfig::new(n, m, w)
            .map_err(|e| SnapshotError::Header(e.to_string()))?;
        let mut tree = BlockTree::new(config);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SnapshotError::Line { line: line_no, msg };
            let mut toks = line.split_whitespace();
            let ltok = toks.next().unwrap();
            let level: u8 = ltok
                .strip_prefix('L')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(format!("expected L<level>, got `{ltok}`")))?;
            let itok = toks.next().ok_or_else(|| err("missing index".into()))?;
            let index: u64 = itok
                .strip_prefix('I')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(format!("expected I<index>, got `{itok}`")))?;
            let ktok = toks.next().ok_or_else(|| err("missing node kind".into()))?;
            let is_leaf = match ktok {
                "leaf" => true,
                "int" => false,
                other => return Err(err(format!("unknown node kind `{other}`"))),
            };
            let mtok = toks.next().ok_or_else(|| err("missing map".into()))?;
            let body = mtok
                .strip_prefix("map=[")
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| err(format!("expected map=[..], got `{mtok}`")))?;
            let mut counters = Vec::new();
            if !body.is_empty() {
                for c in body.split(',') {
                    counters.push(
                        c.parse::<u16>()
                            .map_err(|_| err(format!("bad counter `{c}`")))?,
                    );
                }
            }
            let fields: Vec<(&str, &str)> = toks
                .map(|t| t.split_once('=').ok_or_else(|| err(format!("bad field `{t}`"))))
                .collect::<Result<_, _>>()?;
            let payload = P::parse_snapshot_fields(&fields, is_leaf).map_err(|msg| err(msg))?;
            let id = BlockId::new(level, index);
            if !id.in_bounds(&config) || level < m {
                return Err(err(format!("{id} out of bounds")));
            }
            let kind = if is_leaf {
                NodeKind::Leaf
            } else {
                NodeKind::Interior { left: false, right: false }
            };
            let prior = tree.levels[level as usize].insert(
                index,
                Node { kind, map: NicheMap::from_counters(counters), payload },
            );
            if prior.is_some() {
                return Err(err(format!("duplicate node {id}")));
            }
        }
        // Child flags are not serialized; restore them from node presence.
        for level in (m + 1..=n).rev() {
            let indexes: Vec<u64> = tree.levels[level as usize].keys().copied().collect();
            for index in indexes {
                let id = BlockId::new(level, index);
                if tree.node(id).unwrap().is_leaf() {
                    continue;
                }
                let has_l = tree.node(id.left_child()).is_some();
                let has_r = tree.node(id.right_child()).is_some();
                tree.node_mut(id).unwrap().kind = NodeKind::Interior { left: has_l, right: has_r };
            }
        }
        tree.validate().map_err(|e| SnapshotError::Invariant(e.to_string()))?;
        Ok(tree)
    }
}

impl<P: Payload> fmt::Debug for BlockTree<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockTree[{}]", self.to_snapshot().replace('\n', "; "))
    }
}
