//! Scripted walkthroughs of the states the library is built around.
//!
//! Every demo drives a 16-byte system through a fixed sequence and
//! prints the rendered figures. The output is pinned byte-for-byte by
//! golden tests; wording changes here must update those files.

use blocktree::geometry::{BlockId, GeometryConfig};
use blocktree::ledge;
use blocktree::render::{render_tree, Rendered};
use blocktree::rtree::PlacementPolicy;
use blocktree::trace::{parse_trace, Session, TraceOp};
use blocktree::vtree::VirtualSpace;

/// 16 bytes with 2-byte words: the allocation walkthrough geometry.
fn word_config() -> GeometryConfig {
    GeometryConfig::new(4, 1, 2).expect("static geometry")
}

/// 16 bytes down to single-byte blocks: the tree and mapping figures.
fn byte_config(counter_bits: u8) -> GeometryConfig {
    GeometryConfig::new(4, 0, counter_bits).expect("static geometry")
}

fn drive(session: &mut Session, script: &str) {
    for line in parse_trace(script, false).expect("demo script parses") {
        session.apply(&line.op).expect("demo op applies");
    }
}

fn range_label(id: BlockId) -> String {
    if id.size() == 1 {
        format!("{:X}", id.base())
    } else {
        format!("{:X}-{:X}", id.base(), id.base() + id.size() - 1)
    }
}

fn niche_line(session: &Session) -> String {
    let niches = session.allocator().tree().niches();
    if niches.is_empty() {
        return "niches: none".to_string();
    }
    let parts: Vec<String> = niches
        .iter()
        .map(|id| format!("level {} @ {:X}", id.level(), id.base()))
        .collect();
    format!("niches: {}", parts.join(", "))
}

fn space<'a>(session: &'a Session, tag: &str) -> &'a VirtualSpace {
    let (_, handle) = session
        .live_spaces()
        .find(|(t, _)| *t == tag)
        .expect("demo space is live");
    session.manager().space(handle).expect("live handle resolves")
}

/// The allocation walkthrough: blocks aligned to their own size never
/// produce a merge at a misaligned address, so frees coalesce back to
/// a single block covering the whole memory.
pub fn steps() {
    let mut session = Session::new(word_config(), PlacementPolicy::Leftmost, None);
    let script: &[(&str, &str)] = &[
        (
            "large blocks at both ends, four small blocks between",
            "alloc L0 4\nalloc s0 2\nalloc s1 2\nalloc s2 2\nalloc s3 2\nalloc L1 4",
        ),
        (
            "the two center small blocks free; 6 is not a multiple of 4, so 6-7 and 8-9 stay separate",
            "free s1\nfree s2",
        ),
        (
            "the small block at A frees; 8 is a multiple of 4, so 8-9 and A-B coalesce",
            "free s3",
        ),
        ("the small block at 4 frees and coalesces with 6-7", "free s0"),
        ("the left large block frees; the whole left half coalesces", "free L0"),
        ("the right large block frees; one block spans the memory", "free L1"),
    ];
    println!("allocation walkthrough: 16 bytes, 2-byte words, every block aligned to its own size");
    for (i, (what, ops)) in script.iter().enumerate() {
        drive(&mut session, ops);
        println!();
        println!("step {}: {what}", i + 1);
        println!();
        println!("{}", render_tree(session.allocator().tree()));
        println!("{}", niche_line(&session));
    }
}

/// Builds the shared sparse-tree state: three allocated runs with a
/// 2-byte and a 4-byte hole between them.
fn figure_state(counter_bits: u8) -> Session {
    let mut session =
        Session::new(byte_config(counter_bits), PlacementPolicy::Leftmost, None);
    drive(
        &mut session,
        "alloc a 4\nalloc b 2\nalloc c 2\nalloc d 2\nalloc e 2\nalloc f 4\n\
         free c\nfree d\nfree e",
    );
    session
}

pub fn sparse_tree() {
    let session = figure_state(2);
    println!("a sparse block tree: solid spans are present nodes, dashed spans are");
    println!("missing siblings, and every missing sibling is one free block (a niche)");
    println!();
    println!("{}", render_tree(session.allocator().tree()));
    println!("{}", niche_line(&session));
}

pub fn niche_maps() {
    println!("the sparse tree annotated with niche maps: per node, one saturating");
    println!("counter per level below it, each a lower bound on the niches in that level");
    for counter_bits in [2u8, 1] {
        let session = figure_state(counter_bits);
        println!();
        if counter_bits == 1 {
            println!("1-bit counters degenerate to a bitmap; combining maps is a bitwise OR");
        } else {
            println!("2-bit counters, saturating at 3");
        }
        println!();
        println!("{}", render_tree(session.allocator().tree()));
        for node in &Rendered::of(session.allocator().tree()).nodes {
            if let Some(annotation) = &node.annotation {
                println!("node {} (level {}): {annotation}", range_label(node.id), node.id.level());
            }
        }
    }
}

pub fn vtree_doubling() {
    let mut session = Session::new(byte_config(2), PlacementPolicy::Leftmost, None);
    drive(&mut session, "vspace V doubling 16");
    println!("a pristine 16-byte doubling space: an access backs the touched byte,");
    println!("and an access beside a fully backed block backs its whole sibling at once");
    println!();
    println!("untouched, the space is a single niche:");
    println!();
    println!("{}", render_tree(space(&session, "V").tree()));
    let accesses: &[(u64, &str)] = &[
        (0x8, "backs the single byte at 8"),
        (0x9, "backs 9; the block 8-9 is now fully backed"),
        (0xB, "8-9 is full, so the whole sibling block A-B is backed in one step"),
    ];
    for &(offset, what) in accesses {
        session
            .apply(&TraceOp::Access { tag: "V".to_string(), offset })
            .expect("demo access applies");
        println!();
        println!("access {offset:X}: {what}");
        println!();
        println!("{}", render_tree(space(&session, "V").tree()));
        let mut leaves: Vec<BlockId> =
            space(&session, "V").tree().leaves().iter().map(|&(id, _)| id).collect();
        leaves.sort_by_key(|id| id.base());
        let parts: Vec<String> = leaves.iter().map(|&id| range_label(id)).collect();
        println!("backed: {}", parts.join(", "));
    }
}

pub fn fixed_11() {
    let cfg = byte_config(2);
    let plan = ledge::decompose(11, &cfg, None).expect("11 bytes fit");
    let parts: Vec<String> =
        plan.pieces.iter().map(|p| format!("{} @ {:X}", p.size(), p.offset)).collect();
    println!("a fixed 11-byte space is pre-populated by ledging: 11 = 8 + 2 + 1");
    println!("pieces (size @ offset): {}", parts.join(", "));
    let mut session = Session::new(cfg, PlacementPolicy::Leftmost, None);
    drive(&mut session, "vspace F fixed 11");
    println!();
    println!("{}", render_tree(space(&session, "F").tree()));
    println!("backed bytes: {}", space(&session, "F").backed_bytes());
    let (_, handle) = session.live_spaces().next().expect("space is live");
    let hit = session.manager().translate(handle, 0xA).expect("last byte is backed");
    println!("translate A -> real {:X}", hit.real_address());
    let oob = session.manager().translate(handle, 0xB).expect_err("beyond the fixed size");
    println!("translate B -> {oob}");
    session
        .apply(&TraceOp::Access { tag: "F".to_string(), offset: 0xB })
        .expect("trapped access still applies");
    println!("access B -> trap (nothing backed, traps counted: {})", session.events().traps);
}
