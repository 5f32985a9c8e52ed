//! Text renderings of block trees and a parser for them.
//!
//! Two forms share one semantic model. The figure form draws one row
//! per level with solid spans for present nodes, dashed spans for
//! niches, centered annotations, and a byte occupancy row. It is
//! meant for small spaces. The compact form lists the same content
//! line by line and scales to any space. [`parse_rendering`] accepts
//! both and returns the semantic content, so tests can compare
//! meaning without pinning glyphs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::BlockId;
use crate::tree::{BlockTree, Payload};

/// Columns reserved for the row label in the figure form.
pub const LABEL_COLS: usize = 14;
/// Columns drawn per byte in the figure form.
pub const BYTE_COLS: usize = 4;
/// Largest space rendered as a figure; larger trees use the compact form.
pub const FIGURE_LIMIT_BITS: u8 = 8;

/// One present node as it appears in a rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedNode {
    pub id: BlockId,
    /// Centered text: the payload annotation if any, else the niche map.
    pub annotation: Option<String>,
}

/// Semantic content of a rendering, independent of glyph choices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub space_bits: u8,
    pub min_bits: u8,
    /// Level descending, index ascending.
    pub nodes: Vec<RenderedNode>,
    /// Level ascending, index ascending.
    pub niches: Vec<BlockId>,
    /// Run-length byte occupancy: glyph and length, adjacent runs merged.
    pub byte_runs: Vec<(char, u64)>,
}

impl Rendered {
    /// The semantic content a rendering of `tree` must parse back to.
    pub fn of<P: Payload>(tree: &BlockTree<P>) -> Rendered {
        let cfg = tree.config();
        let mut nodes = Vec::new();
        for level in (cfg.min_level()..=cfg.height_bits()).rev() {
            for (id, node) in tree.nodes_at_level(level) {
                nodes.push(RenderedNode { id, annotation: annotation_of(node) });
            }
        }
        Rendered {
            space_bits: cfg.height_bits(),
            min_bits: cfg.min_level(),
            nodes,
            niches: tree.niches(),
            byte_runs: byte_runs(tree),
        }
    }
}

/// A rendering that could not be parsed.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderParseError {
    #[error("empty rendering")]
    Empty,
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
}

fn annotation_of<P: Payload>(node: &crate::tree::Node<P>) -> Option<String> {
    if let Some(text) = node.payload.annotation() {
        debug_assert!(!text.contains([' ', '-', '.', ':']));
        return Some(text);
    }
    let counters = node.map.counters();
    if counters.is_empty() {
        return None;
    }
    let parts: Vec<String> = counters.iter().map(|c| c.to_string()).collect();
    Some(format!("[{}]", parts.join(",")))
}

fn byte_runs<P: Payload>(tree: &BlockTree<P>) -> Vec<(char, u64)> {
    let mut pieces: Vec<(u64, u64, char)> = Vec::new();
    for (id, _) in tree.leaves() {
        pieces.push((id.base(), id.size(), P::byte_glyph()));
    }
    for id in tree.niches() {
        pieces.push((id.base(), id.size(), '-'));
    }
    pieces.sort_unstable_by_key(|&(base, _, _)| base);
    let mut runs: Vec<(char, u64)> = Vec::new();
    for (_, size, glyph) in pieces {
        match runs.last_mut() {
            Some((g, len)) if *g == glyph => *len += size,
            _ => runs.push((glyph, size)),
        }
    }
    runs
}

fn level_span(level: u8) -> usize {
    (1usize << level) * BYTE_COLS
}

fn draw_span(row: &mut [char], start: usize, end: usize, dashed: bool, annotation: Option<&str>) {
    row[start] = '.';
    row[end] = '.';
    for col in start + 1..end {
        row[col] = if dashed {
            if (col - start) % 2 == 1 { '-' } else { ' ' }
        } else {
            '-'
        };
    }
    if let Some(text) = annotation {
        let inner = end - start - 1;
        debug_assert!(text.len() <= inner);
        let offset = start + 1 + (inner - text.len()) / 2;
        for (i, ch) in text.chars().enumerate() {
            row[offset + i] = ch;
        }
    }
}

fn row_to_line(label: &str, row: &[char]) -> String {
    let mut line = format!("{label:<LABEL_COLS$}");
    line.extend(row.iter());
    line.truncate(line.trim_end().len());
    line
}

/// The byte occupancy row and hex index row for the figure form.
pub fn render_bytes<P: Payload>(tree: &BlockTree<P>) -> String {
    let total = tree.config().total_bytes();
    let width = total as usize * BYTE_COLS;
    let mut occ = vec![' '; width + 1];
    let mut fill = |base: u64, size: u64, glyph: char| {
        let (start, end) = (base as usize * BYTE_COLS, (base + size) as usize * BYTE_COLS);
        occ[start] = '|';
        occ[end] = '|';
        for col in start + 1..end {
            occ[col] = glyph;
        }
    };
    for (id, _) in tree.leaves() {
        fill(id.base(), id.size(), P::byte_glyph());
    }
    for id in tree.niches() {
        fill(id.base(), id.size(), '-');
    }
    let mut out = row_to_line("", &occ);
    out.push('\n');
    let mut idx = vec![' '; width + 1];
    for byte in 0..total as usize {
        idx[byte * BYTE_COLS] = '|';
        let text = format!("{byte:X}");
        let offset = byte * BYTE_COLS + 1 + (3 - text.len()) / 2;
        for (i, ch) in text.chars().enumerate() {
            idx[offset + i] = ch;
        }
    }
    idx[width] = '|';
    out.push_str(&row_to_line("", &idx));
    out
}

fn render_figure<P: Payload>(tree: &BlockTree<P>) -> String {
    let cfg = tree.config();
    let width = cfg.total_bytes() as usize * BYTE_COLS;
    let niches = tree.niches();
    let mut dots: BTreeSet<usize> = BTreeSet::new();
    let mut out = String::new();
    for level in (cfg.min_level()..=cfg.height_bits()).rev() {
        let mut row = vec![' '; width + 1];
        for &d in &dots {
            row[d] = ':';
        }
        let span = level_span(level);
        for (id, node) in tree.nodes_at_level(level) {
            let start = id.index() as usize * span;
            draw_span(&mut row, start, start + span, false, annotation_of(node).as_deref());
            dots.insert(start);
            dots.insert(start + span);
        }
        for id in niches.iter().filter(|id| id.level() == level) {
            let start = id.index() as usize * span;
            draw_span(&mut row, start, start + span, true, None);
            dots.insert(start);
            dots.insert(start + span);
        }
        let _ = writeln!(out, "{}", row_to_line(&format!(" Level {level}:"), &row));
        let mut sep = vec![' '; width + 1];
        for &d in &dots {
            sep[d] = ':';
        }
        let _ = writeln!(out, "{}", row_to_line("", &sep));
    }
    out.push_str(&render_bytes(tree));
    out
}

fn render_compact<P: Payload>(tree: &BlockTree<P>) -> String {
    let cfg = tree.config();
    let mut out = format!("tree n={} m={}\n", cfg.height_bits(), cfg.min_level());
    for level in (cfg.min_level()..=cfg.height_bits()).rev() {
        for (id, node) in tree.nodes_at_level(level) {
            let kind = if node.kind.is_leaf() { "leaf" } else { "int" };
            let _ = write!(out, "L{level} I{} {kind}", id.index());
            if let Some(text) = annotation_of(node) {
                let _ = write!(out, " ann={text}");
            }
            out.push('\n');
        }
    }
    for id in tree.niches() {
        let _ = writeln!(out, "L{} I{} niche", id.level(), id.index());
    }
    let runs: Vec<String> = byte_runs(tree)
        .into_iter()
        .map(|(glyph, len)| format!("{glyph}*{len}"))
        .collect();
    let _ = writeln!(out, "bytes {}", runs.join(" "));
    out
}

/// Renders `tree` as a figure for small spaces, compactly otherwise.
pub fn render_tree<P: Payload>(tree: &BlockTree<P>) -> String {
    if tree.config().height_bits() <= FIGURE_LIMIT_BITS {
        render_figure(tree)
    } else {
        render_compact(tree)
    }
}

/// Parses either rendering form back to its semantic content.
pub fn parse_rendering(text: &str) -> Result<Rendered, RenderParseError> {
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or(RenderParseError::Empty)?;
    if first.trim_start().starts_with("tree ") {
        parse_compact(text)
    } else {
        parse_figure(text)
    }
}

fn line_err(line: usize, msg: impl Into<String>) -> RenderParseError {
    RenderParseError::Line { line, msg: msg.into() }
}

fn parse_figure(text: &str) -> Result<Rendered, RenderParseError> {
    let mut nodes = Vec::new();
    let mut niches = Vec::new();
    let mut levels_seen: Vec<u8> = Vec::new();
    let mut glyph_row: Option<(usize, String)> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(" Level ") {
            let colon = rest
                .find(':')
                .ok_or_else(|| line_err(lineno, "level row without ':'"))?;
            let level: u8 = rest[..colon]
                .trim()
                .parse()
                .map_err(|_| line_err(lineno, "bad level number"))?;
            levels_seen.push(level);
            let row: Vec<char> = line.chars().skip(LABEL_COLS).collect();
            parse_level_row(&row, level, lineno, &mut nodes, &mut niches)?;
        } else if line.trim_start().starts_with(['|']) && glyph_row.is_none() {
            let start = line.len() - line.trim_start().len();
            if start != LABEL_COLS {
                return Err(line_err(lineno, "byte row not at figure origin"));
            }
            glyph_row = Some((lineno, line[LABEL_COLS..].to_string()));
        }
        // Remaining rows are continuation marks or the index row.
    }
    let space_bits = *levels_seen
        .iter()
        .max()
        .ok_or(RenderParseError::Empty)?;
    let min_bits = *levels_seen.iter().min().unwrap();
    let (lineno, glyphs) = glyph_row.ok_or_else(|| line_err(0, "missing byte row"))?;
    let total = 1u64 << space_bits;
    let row: Vec<char> = glyphs.chars().collect();
    if row.len() != total as usize * BYTE_COLS + 1 {
        return Err(line_err(lineno, "byte row width does not match space"));
    }
    let mut byte_runs: Vec<(char, u64)> = Vec::new();
    for byte in 0..total as usize {
        let glyph = row[byte * BYTE_COLS + 2];
        match byte_runs.last_mut() {
            Some((g, len)) if *g == glyph => *len += 1,
            _ => byte_runs.push((glyph, 1)),
        }
    }
    nodes.sort_by(|a, b| b.id.level().cmp(&a.id.level()).then(a.id.index().cmp(&b.id.index())));
    niches.sort_unstable();
    Ok(Rendered { space_bits, min_bits, nodes, niches, byte_runs })
}

fn parse_level_row(
    row: &[char],
    level: u8,
    lineno: usize,
    nodes: &mut Vec<RenderedNode>,
    niches: &mut Vec<BlockId>,
) -> Result<(), RenderParseError> {
    let span = level_span(level);
    let dots: Vec<usize> = row
        .iter()
        .enumerate()
        .filter_map(|(col, &ch)| (ch == '.').then_some(col))
        .collect();
    for pair in dots.windows(2) {
        let (start, end) = (pair[0], pair[1]);
        if end - start != span {
            continue;
        }
        if start % span != 0 {
            return Err(line_err(lineno, "span not aligned to its level"));
        }
        let inner = &row[start + 1..end];
        if inner.iter().all(|&c| c == ' ') {
            continue;
        }
        let id = BlockId::new(level, (start / span) as u64);
        let dashed = inner[1] == ' ' && inner.iter().all(|&c| c == '-' || c == ' ');
        if dashed {
            niches.push(id);
        } else {
            let text: String = inner.iter().collect();
            let text = text.trim_matches('-');
            if text.contains([' ', '.', ':']) {
                return Err(line_err(lineno, "malformed annotation"));
            }
            let annotation = (!text.is_empty()).then(|| text.to_string());
            nodes.push(RenderedNode { id, annotation });
        }
    }
    Ok(())
}

fn parse_compact(text: &str) -> Result<Rendered, RenderParseError> {
    let mut space_bits = None;
    let mut min_bits = 0;
    let mut nodes = Vec::new();
    let mut niches = Vec::new();
    let mut byte_runs: Vec<(char, u64)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tree ") {
            for field in rest.split_whitespace() {
                match field.split_once('=') {
                    Some(("n", v)) => {
                        space_bits =
                            Some(v.parse().map_err(|_| line_err(lineno, "bad n"))?);
                    }
                    Some(("m", v)) => {
                        min_bits = v.parse().map_err(|_| line_err(lineno, "bad m"))?;
                    }
                    _ => return Err(line_err(lineno, format!("unknown field {field}"))),
                }
            }
        } else if let Some(rest) = line.strip_prefix("bytes ") {
            for run in rest.split_whitespace() {
                let (glyph, len) = run
                    .split_once('*')
                    .ok_or_else(|| line_err(lineno, "bad byte run"))?;
                let mut chars = glyph.chars();
                let (Some(g), None) = (chars.next(), chars.next()) else {
                    return Err(line_err(lineno, "bad byte run glyph"));
                };
                let len: u64 = len.parse().map_err(|_| line_err(lineno, "bad run length"))?;
                match byte_runs.last_mut() {
                    Some((prev, total)) if *prev == g => *total += len,
                    _ => byte_runs.push((g, len)),
                }
            }
        } else if let Some(rest) = line.strip_prefix('L') {
            let mut parts = rest.split_whitespace();
            let level: u8 = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| line_err(lineno, "bad level"))?;
            let index: u64 = parts
                .next()
                .and_then(|t| t.strip_prefix('I'))
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| line_err(lineno, "bad index"))?;
            let id = BlockId::new(level, index);
            match parts.next() {
                Some("niche") => niches.push(id),
                Some("leaf") | Some("int") => {
                    let annotation = parts
                        .next()
                        .map(|t| {
                            t.strip_prefix("ann=")
                                .map(str::to_string)
                                .ok_or_else(|| line_err(lineno, "bad annotation field"))
                        })
                        .transpose()?;
                    nodes.push(RenderedNode { id, annotation });
                }
                _ => return Err(line_err(lineno, "unknown node kind")),
            }
        } else {
            return Err(line_err(lineno, "unrecognized line"));
        }
    }
    let space_bits = space_bits.ok_or(RenderParseError::Empty)?;
    nodes.sort_by(|a, b| b.id.level().cmp(&a.id.level()).then(a.id.index().cmp(&b.id.index())));
    niches.sort_unstable();
    Ok(Rendered { space_bits, min_bits, nodes, niches, byte_runs })
}
