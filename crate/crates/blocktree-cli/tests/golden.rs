//! Demo outputs are pinned byte-for-byte, and the figure blocks inside
//! them must parse back to the states they claim to show.

use std::process::Command;

use blocktree::geometry::BlockId;
use blocktree::render::{parse_rendering, Rendered};

fn demo(id: &str) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_blocktree"))
        .args(["demo", id])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "demo {id} exited with {:?}", out.status.code());
    assert!(out.stderr.is_empty(), "demo {id} wrote to stderr");
    String::from_utf8(out.stdout).expect("demo output is utf8")
}

/// Figures are the maximal runs of indented lines; prose starts at
/// column 0 and blank lines separate blocks.
fn figures(text: &str) -> Vec<Rendered> {
    let mut blocks = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.starts_with(' ') {
            current.push_str(line);
            current.push('\n');
        } else if !current.is_empty() {
            blocks.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    blocks
        .iter()
        .map(|b| parse_rendering(b).expect("figure block parses"))
        .collect()
}

fn annotation(figure: &Rendered, level: u8, index: u64) -> &str {
    figure
        .nodes
        .iter()
        .find(|n| n.id == BlockId::new(level, index))
        .unwrap_or_else(|| panic!("no node at level {level} index {index}"))
        .annotation
        .as_deref()
        .unwrap_or_else(|| panic!("node {level}/{index} has no annotation"))
}

#[test]
fn every_demo_matches_its_pinned_output() {
    let pinned = [
        ("steps", include_str!("golden/steps.txt")),
        ("sparse-tree", include_str!("golden/sparse-tree.txt")),
        ("niche-maps", include_str!("golden/niche-maps.txt")),
        ("vtree-doubling", include_str!("golden/vtree-doubling.txt")),
        ("fixed-11", include_str!("golden/fixed-11.txt")),
    ];
    for (id, golden) in pinned {
        assert_eq!(demo(id), golden, "demo {id} drifted from its golden file");
    }
}

#[test]
fn the_steps_figures_walk_the_expected_free_sets() {
    let figs = figures(&demo("steps"));
    assert_eq!(figs.len(), 6);
    let expected: [&[(u8, u64)]; 6] = [
        &[],
        &[(1, 3), (1, 4)],
        &[(1, 3), (2, 2)],
        &[(2, 1), (2, 2)],
        &[(2, 2), (3, 0)],
        &[(4, 0)],
    ];
    for (fig, want) in figs.iter().zip(expected) {
        let want: Vec<BlockId> = want.iter().map(|&(l, i)| BlockId::new(l, i)).collect();
        assert_eq!(fig.niches, want);
    }
    assert_eq!(figs[0].byte_runs, vec![('x', 16)]);
    assert_eq!(figs[1].byte_runs, vec![('x', 6), ('-', 4), ('x', 6)]);
    assert_eq!(figs[5].byte_runs, vec![('-', 16)]);
}

#[test]
fn the_niche_map_figures_carry_the_annotated_counters() {
    let figs = figures(&demo("niche-maps"));
    assert_eq!(figs.len(), 2);
    for fig in &figs {
        assert_eq!(annotation(fig, 4, 0), "[0,1,1,0]");
        assert_eq!(annotation(fig, 3, 0), "[0,1,0]");
        assert_eq!(annotation(fig, 3, 1), "[1,0,0]");
        assert_eq!(annotation(fig, 2, 0), "[0,0]");
        assert_eq!(annotation(fig, 2, 1), "[1,0]");
        assert_eq!(annotation(fig, 2, 3), "[0,0]");
        assert_eq!(annotation(fig, 1, 2), "[0]");
        assert_eq!(fig.niches, vec![BlockId::new(1, 3), BlockId::new(2, 2)]);
    }
}

#[test]
fn the_doubling_figures_back_one_then_two_then_four_bytes() {
    let figs = figures(&demo("vtree-doubling"));
    assert_eq!(figs.len(), 4);
    assert_eq!(figs[0].byte_runs, vec![('-', 16)]);
    assert_eq!(figs[1].byte_runs, vec![('-', 8), ('b', 1), ('-', 7)]);
    assert_eq!(figs[2].byte_runs, vec![('-', 8), ('b', 2), ('-', 6)]);
    assert_eq!(figs[3].byte_runs, vec![('-', 8), ('b', 4), ('-', 4)]);
    // The 8-9 block reads as full exactly from the second access on,
    // and the third access backs A-B as one level-1 leaf.
    assert_eq!(annotation(&figs[1], 1, 4), "0");
    assert_eq!(annotation(&figs[2], 1, 4), "1");
    assert_eq!(annotation(&figs[3], 1, 5), "1");
    assert_eq!(annotation(&figs[3], 2, 2), "1");
}

#[test]
fn the_fixed_space_figure_backs_eleven_bytes() {
    let text = demo("fixed-11");
    let figs = figures(&text);
    assert_eq!(figs.len(), 1);
    assert_eq!(figs[0].byte_runs, vec![('b', 11), ('-', 5)]);
    assert!(text.contains("backed bytes: 11"));
    assert!(text.contains("11 = 8 + 2 + 1"));
}
