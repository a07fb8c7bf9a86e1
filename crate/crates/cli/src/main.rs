//! `gem`: run workloads through the engine or the baseline, audit journals,
//! compare the two systems and manage snapshots.
//!
//! Exit codes: 0 pass, 1 check failure, 2 usage or I/O error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gem_core::audit;
use gem_core::engine::journal::{read_snapshot, write_snapshot, SnapshotBody};
use gem_core::engine::{Journal, JournalError};
use gem_core::workload::{self, QueryResult, RunReport, Workload};
use gem_core::{EngineConfig, EngineParams, Settings};

#[derive(Parser)]
#[command(name = "gem", version, about = "Governed evolving memory: replay, audit and compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SystemArg {
    Gem,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Stream a workload through a memory system and write its journal.
    Replay {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, env = "GEM_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        journal_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "gem")]
        system: SystemArg,
    },
    /// Replay a journal and check the six trajectory conditions.
    Audit {
        #[arg(long)]
        journal: PathBuf,
        /// Workload whose default-mode queries are probed at every tick.
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the engine and the baseline on one workload and emit per-query metrics as CSV.
    Compare {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, env = "GEM_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Replay a journal and write a snapshot of its final state.
    Snapshot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and verify a snapshot; optionally dump the state as JSON.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A command's failure and the exit code it maps to.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<JournalError> for Failure {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::Io(e) => Failure::Usage(e.to_string()),
            JournalError::Format(m) => Failure::Usage(format!("not a journal or snapshot: {m}")),
            other => Failure::Check(format!("{other}\n")),
        }
    }
}

type CmdResult = Result<String, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Replay { workload, config, journal_out, system } => {
            cmd_replay(&workload, config.as_deref(), journal_out.as_deref(), system)
        }
        Command::Audit { journal, probes, json } => cmd_audit(&journal, probes.as_deref(), json),
        Command::Compare { workload, config, csv_out } => cmd_compare(&workload, config.as_deref(), csv_out.as_deref()),
        Command::Snapshot { input, out } => cmd_snapshot(&input, &out),
        Command::Restore { input, out } => cmd_restore(&input, out.as_deref()),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Check(text)) => {
            print!("{text}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("gem: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_settings(config: Option<&Path>) -> Result<Settings, Failure> {
    match config {
        None => Ok(Settings::with_defaults(EngineParams::default())),
        Some(path) => EngineConfig::load(path)
            .and_then(|c| c.settings())
            .map_err(|e| Failure::Usage(e.to_string())),
    }
}

fn load_workload(path: &Path) -> Result<(Workload, Vec<usize>), Failure> {
    let text = read_text(path)?;
    let w = Workload::parse(&text).map_err(|e| Failure::Usage(format!("{}:{e}", path.display())))?;
    Ok((w, Workload::step_lines(&text)))
}

fn load_journal(path: &Path) -> Result<Journal, Failure> {
    Ok(Journal::from_bytes(&read_bytes(path)?)?)
}

fn cmd_replay(path: &Path, config: Option<&Path>, journal_out: Option<&Path>, system: SystemArg) -> CmdResult {
    let settings = load_settings(config)?;
    let (w, lines) = load_workload(path)?;
    let (journal, report) = match system {
        SystemArg::Gem => {
            let (engine, report) = workload::run_gem(settings, &w).map_err(|e| Failure::Usage(e.to_string()))?;
            (engine.into_journal(), report)
        }
        SystemArg::Baseline => {
            let (crud, report) = workload::run_crud(settings, &w);
            (crud.into_journal(), report)
        }
    };
    if let Some(out) = journal_out {
        write_file(out, &journal.to_bytes())?;
    }

    let mut text = String::new();
    for e in &journal.entries {
        let r = &e.record;
        let _ = writeln!(text, "tick {} {:?} {:?}", r.tick.tick, r.operator, r.outcome);
    }
    for q in &report.queries {
        let _ = writeln!(text, "line {} query {:?} -> {:?}", lines[q.step], q.query.text, q.answers);
    }
    let _ = writeln!(text, "digest {}", journal.head_digest().to_hex());
    if report.failed_assertions.is_empty() {
        Ok(text)
    } else {
        for (step, msg) in &report.failed_assertions {
            let _ = writeln!(text, "assert failed at line {}: {msg}", lines[*step]);
        }
        Err(Failure::Check(text))
    }
}

fn cmd_audit(path: &Path, probes: Option<&Path>, json: bool) -> CmdResult {
    let journal = load_journal(path)?;
    let probes = match probes {
        Some(p) => load_workload(p)?.0.probes(),
        None => Vec::new(),
    };
    let report = audit::audit(&journal, &probes)?;
    let text = if json { report.to_json() + "\n" } else { audit::render_report(&report) };
    if report.pass() {
        Ok(text)
    } else {
        Err(Failure::Check(text))
    }
}

const CSV_HEADER: &str = "system,tick,footprint,stale_answers,lost_answers,salience_delta_sum\n";

fn csv_rows(out: &mut String, system: &str, report: &RunReport) {
    for QueryResult { tick, footprint, stale_answers, lost_answers, salience_delta_sum, .. } in &report.queries {
        let _ = writeln!(out, "{system},{tick},{footprint},{stale_answers},{lost_answers},{salience_delta_sum}");
    }
}

fn cmd_compare(path: &Path, config: Option<&Path>, csv_out: Option<&Path>) -> CmdResult {
    let settings = load_settings(config)?;
    let (w, _) = load_workload(path)?;
    let (_, gem) = workload::run_gem(settings.clone(), &w).map_err(|e| Failure::Usage(e.to_string()))?;
    let (_, crud) = workload::run_crud(settings, &w);
    let mut csv = CSV_HEADER.to_string();
    csv_rows(&mut csv, "gem", &gem);
    csv_rows(&mut csv, "baseline", &crud);
    match csv_out {
        Some(out) => {
            write_file(out, csv.as_bytes())?;
            Ok(String::new())
        }
        None => Ok(csv),
    }
}

fn cmd_snapshot(input: &Path, out: &Path) -> CmdResult {
    let journal = load_journal(input)?;
    let body = SnapshotBody::from_journal(&journal)?;
    write_file(out, &write_snapshot(&body))?;
    Ok(format!("digest {}\n", body.digest().to_hex()))
}

fn cmd_restore(input: &Path, out: Option<&Path>) -> CmdResult {
    let body = read_snapshot(&read_bytes(input)?)?;
    let summary = match &body {
        SnapshotBody::Gem(s) => format!(
            "gem state at tick {}: {} topics, active footprint {}\n",
            s.clock.tick,
            s.topics.len(),
            s.active_footprint()
        ),
        SnapshotBody::CrudBaseline(s) => {
            format!("baseline store at tick {}: {} records\n", s.clock.tick, s.len())
        }
    };
    if let Some(out) = out {
        let json = serde_json::to_vec_pretty(&body).map_err(|e| Failure::Usage(e.to_string()))?;
        write_file(out, &json)?;
    }
    Ok(format!("{summary}digest {}\n", body.digest().to_hex()))
}
