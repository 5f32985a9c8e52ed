//! Workbench binary for the blocktree crates.
//!
//! Four subcommands: `replay` runs a trace file against one allocator
//! plus one space manager and emits a stats document, `demo` prints
//! scripted figure walkthroughs, `fuzz` runs the differential loop
//! against the byte-level oracle, and `pipeline` simulates the staged
//! hardware model over a ticked workload.
//!
//! Exit codes: 0 clean, 1 fuzz mismatch, 2 invalid input, 3 broken
//! internal invariant. All output is deterministic given the flags.

mod demos;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blocktree::diff::{DiffConfig, DiffRunner};
use blocktree::geometry::GeometryConfig;
use blocktree::pipeline::{MuxFairness, SimConfig, SimMetrics, Simulator, Workload};
use blocktree::rtree::PlacementPolicy;
use blocktree::trace::{format_trace, parse_trace, ApplyError, Session, TraceLine};

use report::StatsReport;

#[derive(Parser)]
#[command(name = "blocktree", version, about = "Geometric allocator workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Address space size in bits; the space holds 2^n bytes.
    #[arg(long, global = true, default_value_t = 16)]
    space_bits: u8,
    /// Minimum block size in bits.
    #[arg(long, global = true, default_value_t = 4)]
    min_block_bits: u8,
    /// Width of one niche-map counter in bits.
    #[arg(long, global = true, default_value_t = 2)]
    counter_bits: u8,
    /// Placement policy for allocations.
    #[arg(long, global = true, value_enum, default_value_t = PolicyArg::Leftmost)]
    policy: PolicyArg,
    /// Seed for the random policy and for fuzzing.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the stats report here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    stats_out: Option<PathBuf>,
    /// Bound on ledge pieces per chunk; unbounded when absent.
    #[arg(long, global = true, value_name = "K")]
    max_pieces: Option<usize>,
}

impl Common {
    fn geometry(&self) -> Result<GeometryConfig, Failure> {
        GeometryConfig::new(self.space_bits, self.min_block_bits, self.counter_bits)
            .map_err(|e| invalid(e.to_string()))
    }

    fn placement(&self) -> PlacementPolicy {
        match self.policy {
            PolicyArg::Leftmost => PlacementPolicy::Leftmost,
            PolicyArg::Rightmost => PlacementPolicy::Rightmost,
            PolicyArg::Random => PlacementPolicy::SeededRandom(self.seed),
        }
    }

    fn policy_name(&self) -> &'static str {
        match self.policy {
            PolicyArg::Leftmost => "leftmost",
            PolicyArg::Rightmost => "rightmost",
            PolicyArg::Random => "random",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Leftmost,
    Rightmost,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum FairnessArg {
    /// Rotate the first scanned pre-allocation level each refill pass.
    RoundRobin,
    /// Always scan the lowest level first.
    LowestFirst,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    /// Let frees coalesce across a misaligned boundary.
    MisalignedCoalesce,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoId {
    /// The 16-byte allocation walkthrough, step by step.
    Steps,
    /// A sparse block tree whose missing siblings are the free blocks.
    #[value(name = "sparse-tree")]
    SparseTree,
    /// The same tree annotated with saturating niche counters.
    #[value(name = "niche-maps")]
    NicheMaps,
    /// A doubling virtual space touched at 8, 9, B.
    #[value(name = "vtree-doubling")]
    VtreeDoubling,
    /// An 11-byte fixed space pre-populated by ledging.
    #[value(name = "fixed-11")]
    Fixed11,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace file and emit the resulting stats document.
    Replay {
        /// Trace file: `alloc <tag> <size>`, `free <tag>`, `vspace <tag>
        /// <doubling|fixed|paging:<bits>> <size>`, `vdestroy <tag>`,
        /// `access <tag> <offset>`; `#` starts a comment.
        trace: PathBuf,
    },
    /// Print one of the rendered walkthroughs (fixed 16-byte geometry).
    Demo {
        #[arg(value_enum)]
        id: DemoId,
    },
    /// Drive random traffic through the allocator and a byte-level
    /// oracle in lockstep, comparing free sets after every op.
    Fuzz {
        /// Number of random ops to run.
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        /// Write the exercised trace (or the counterexample) here.
        #[arg(long, value_name = "PATH")]
        emit: Option<PathBuf>,
        /// Plant a known defect; the loop must catch it.
        #[arg(long, value_enum, hide = true)]
        mutate: Option<MutationArg>,
    },
    /// Simulate the staged pipeline over a ticked workload file.
    Pipeline {
        /// Workload file: trace ops with optional `@tick <t>` directives.
        workload: PathBuf,
        /// Give up if the workload has not drained after this many ticks.
        #[arg(long, default_value_t = 1_000_000)]
        ticks: u64,
        /// Pre-allocation queue depths, as comma-separated level:depth pairs.
        #[arg(long, value_delimiter = ',', value_name = "LEVEL:DEPTH")]
        prealloc: Vec<String>,
        /// Refill scan order across pre-allocation queues.
        #[arg(long, value_enum, default_value_t = FairnessArg::RoundRobin)]
        fairness: FairnessArg,
        /// Cap on concurrently released allocator requests.
        #[arg(long, value_name = "COUNT")]
        max_in_flight: Option<usize>,
        /// Also write the metrics as JSON here.
        #[arg(long, value_name = "PATH")]
        metrics_out: Option<PathBuf>,
    },
}

/// A failed command: the documented exit code plus a stderr message.
struct Failure {
    code: u8,
    message: String,
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn invariant(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if !failure.message.is_empty() {
                eprintln!("error: {}", failure.message);
            }
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Replay { trace } => cmd_replay(&cli.common, &trace),
        Command::Demo { id } => {
            match id {
                DemoId::Steps => demos::steps(),
                DemoId::SparseTree => demos::sparse_tree(),
                DemoId::NicheMaps => demos::niche_maps(),
                DemoId::VtreeDoubling => demos::vtree_doubling(),
                DemoId::Fixed11 => demos::fixed_11(),
            }
            Ok(())
        }
        Command::Fuzz { ops, emit, mutate } => {
            cmd_fuzz(&cli.common, ops, emit.as_deref(), mutate)
        }
        Command::Pipeline { workload, ticks, prealloc, fairness, max_in_flight, metrics_out } => {
            cmd_pipeline(
                &cli.common,
                &workload,
                ticks,
                &prealloc,
                fairness,
                max_in_flight,
                metrics_out.as_deref(),
            )
        }
    }
}

fn cmd_replay(common: &Common, path: &Path) -> Result<(), Failure> {
    let text = read_file(path)?;
    let lines = parse_trace(&text, false)
        .map_err(|e| invalid(format!("{}: line {}: {}", path.display(), e.line, e.msg)))?;
    let mut session = Session::new(common.geometry()?, common.placement(), common.max_pieces);
    for line in &lines {
        if let Err(e) = session.apply(&line.op) {
            let message = format!("{}: line {}: {e}", path.display(), line.line);
            return Err(match e {
                ApplyError::Internal(_) => invariant(message),
                _ => invalid(message),
            });
        }
    }
    let report = StatsReport::collect(&session, common.policy_name(), common.seed);
    if !report.conserves_bytes() {
        return Err(invariant(format!(
            "allocated {} + free {} bytes do not tile the {}-byte space",
            report.allocator.bytes_allocated,
            report.allocator.bytes_free,
            1u64 << common.space_bits,
        )));
    }
    match &common.stats_out {
        Some(out) => write_file(out, &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_fuzz(
    common: &Common,
    ops: u64,
    emit: Option<&Path>,
    mutate: Option<MutationArg>,
) -> Result<(), Failure> {
    if common.space_bits > 16 {
        return Err(invalid("fuzz requires --space-bits <= 16 (oracle memory bound)"));
    }
    let mut cfg = DiffConfig::new(common.geometry()?, common.placement());
    cfg.max_pieces = common.max_pieces;
    if matches!(mutate, Some(MutationArg::MisalignedCoalesce)) {
        cfg.mutation.misaligned_coalesce = true;
    }
    let mut runner = DiffRunner::new(cfg);
    match runner.run_random(ops, common.seed) {
        Ok(stats) => {
            if let Some(path) = emit {
                let lines: Vec<TraceLine> =
                    runner.history().iter().cloned().map(TraceLine::new).collect();
                write_file(path, &format_trace(&lines))?;
            }
            println!(
                "ops {} allocs {} frees {} ooms {} sweeps {}",
                stats.ops, stats.allocs, stats.frees, stats.ooms, stats.sweeps
            );
            println!("tree and oracle agree");
            Ok(())
        }
        Err(mismatch) => {
            eprintln!("mismatch at op {}: {}", mismatch.op_index, mismatch.message);
            eprintln!("{}", mismatch.tree_free.trim_end());
            eprintln!("{}", mismatch.model_free.trim_end());
            match emit {
                Some(path) => {
                    write_file(path, &mismatch.trace)?;
                    eprintln!("counterexample written to {}", path.display());
                }
                None => print!("{}", mismatch.trace),
            }
            Err(Failure { code: 1, message: String::new() })
        }
    }
}

fn cmd_pipeline(
    common: &Common,
    path: &Path,
    ticks: u64,
    prealloc: &[String],
    fairness: FairnessArg,
    max_in_flight: Option<usize>,
    metrics_out: Option<&Path>,
) -> Result<(), Failure> {
    let text = read_file(path)?;
    let workload = Workload::parse(&text)
        .map_err(|e| invalid(format!("{}: line {}: {}", path.display(), e.line, e.msg)))?;
    let mut cfg = SimConfig::new(common.geometry()?);
    cfg.policy = common.placement();
    cfg.fairness = match fairness {
        FairnessArg::RoundRobin => MuxFairness::RoundRobin,
        FairnessArg::LowestFirst => MuxFairness::LowestFirst,
    };
    cfg.max_in_flight = max_in_flight;
    for spec in prealloc {
        let parsed = spec
            .split_once(':')
            .and_then(|(l, d)| Some((l.parse::<u8>().ok()?, d.parse::<u32>().ok()?)));
        let (level, depth) =
            parsed.ok_or_else(|| invalid(format!("bad --prealloc `{spec}`; want level:depth")))?;
        if level < common.min_block_bits || level > common.space_bits {
            return Err(invalid(format!(
                "--prealloc level {level} outside [{}, {}]",
                common.min_block_bits, common.space_bits
            )));
        }
        cfg.prealloc_depth.insert(level, depth);
    }
    let mut sim = Simulator::new(cfg);
    let metrics = sim.run(&workload, ticks);
    print!("{}", metrics_text(&metrics));
    if let Some(out) = metrics_out {
        let mut doc = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        doc.push('\n');
        write_file(out, &doc)?;
    }
    if metrics.spurious_failures > 0 {
        return Err(invariant(format!(
            "{} spurious failures: released requests died mid-flight",
            metrics.spurious_failures
        )));
    }
    if metrics.audit_violations > 0 {
        return Err(invariant(format!(
            "{} stage-locality violations",
            metrics.audit_violations
        )));
    }
    if metrics.drained {
        sim.validate_quiescent().map_err(invariant)?;
    } else {
        eprintln!("warning: workload not drained within {ticks} ticks");
    }
    Ok(())
}

/// One `key value` line per counter, in a fixed order; pre-allocation
/// queues get one line per level.
fn metrics_text(m: &SimMetrics) -> String {
    let mut out = String::new();
    out.push_str(&format!("ticks {}\n", m.ticks));
    out.push_str(&format!("admitted {}\n", m.admitted));
    out.push_str(&format!("completed {}\n", m.completed));
    out.push_str(&format!("rejected {}\n", m.rejected));
    out.push_str(&format!("failed {}\n", m.failed));
    out.push_str(&format!("invalid_ops {}\n", m.invalid_ops));
    out.push_str(&format!("spurious_failures {}\n", m.spurious_failures));
    out.push_str(&format!("stalled_ticks {}\n", m.stalled_ticks));
    out.push_str(&format!("audit_accesses {}\n", m.audit_accesses));
    out.push_str(&format!("audit_violations {}\n", m.audit_violations));
    out.push_str(&format!("drained {}\n", m.drained));
    for p in &m.prealloc {
        out.push_str(&format!(
            "prealloc {} depth {} refills {} average_occupancy {:.3} max_occupancy {}\n",
            p.level, p.depth, p.refills, p.average_occupancy, p.max_occupancy
        ));
    }
    out
}
