use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastslow_core::orchestrator::{
    blocks, episode_rows_from_trace, write_summary, write_trace, BLOCK_HEADER,
};
use fastslow_core::self_model::{RunningMean, FORMAT_VERSION};
use fastslow_core::{load_task, run_experiment, ExperienceStore, Mode, Source, TaskError};
use serde_json::{json, Value};

mod settings;

use settings::RunFlags;

#[derive(Parser)]
#[command(
    name = "fastslow",
    version,
    about = "Fast/slow solver arbitration on grid worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment under a chosen mode (per-decision by default)
    Run(RunArgs),
    /// Run a single-solver baseline (pure-s1 or pure-s2)
    Baseline(RunArgs),
    /// Print store statistics as JSON
    Inspect(InspectArgs),
    /// Aggregate a trace into per-block CSV
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: RunFlags,
    /// Print one line per episode to stdout
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Episodes per block
    #[arg(long, default_value_t = 10)]
    block: usize,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command: exit code plus a one-line message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        let code = if matches!(e, TaskError::Invalid { .. }) {
            2
        } else {
            1
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::usage(format!("cannot write {}: {e}", path.display()))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| io_failure(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out)
        .and_then(|()| out.flush())
        .map_err(|e| io_failure(path, e))
}

fn cmd_run(args: RunArgs, baseline: bool) -> Result<(), Failure> {
    let flags = args.flags.resolve()?;
    let cfg = flags.run_config();
    if baseline && !matches!(flags.mode, Some(Mode::PureS1 | Mode::PureS2)) {
        return Err(Failure::usage(
            "invalid `mode`: baseline needs --mode pure-s1 or pure-s2",
        ));
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    if flags.block == Some(0) {
        return Err(Failure::usage("invalid `block`: must be at least 1"));
    }
    let task_path = flags
        .task
        .as_ref()
        .ok_or_else(|| Failure::usage("missing `task`: pass --task"))?;
    let task = load_task(task_path)?;

    let mut store = match &flags.store {
        Some(p) if p.exists() => {
            ExperienceStore::load(p).map_err(|e| Failure::usage(e.to_string()))?
        }
        _ => ExperienceStore::default(),
    };
    let report =
        run_experiment(&cfg, &task, &mut store).map_err(|e| Failure::usage(e.to_string()))?;

    if let Some(p) = &flags.trace {
        write_file(p, |w| write_trace(w, &report.episodes))?;
    }
    if let Some(p) = &flags.summary {
        write_file(p, |w| write_summary(w, &report.episodes))?;
    }
    if let Some(p) = &flags.store {
        store.save(p).map_err(|e| Failure::usage(e.to_string()))?;
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let print = |out: &mut io::StdoutLock, s: String| {
        writeln!(out, "{s}").map_err(|e| Failure::usage(format!("stdout: {e}")))
    };
    if args.verbose {
        for ep in &report.episodes {
            print(
                &mut out,
                format!(
                    "episode {} return {} steps {} s2 {} charged_s {}",
                    ep.episode_index,
                    ep.total_return,
                    ep.steps,
                    ep.count(Source::S2) + ep.count(Source::S2Direct),
                    ep.wall_time_s
                ),
            )?;
        }
    }
    if let Some(size) = flags.block {
        print(&mut out, BLOCK_HEADER.to_owned())?;
        for (i, b) in report.blocks(size).iter().enumerate() {
            print(&mut out, b.csv_row(i))?;
        }
    }
    let n = report.episodes.len() as f64;
    let mean_return = report.episodes.iter().map(|e| e.total_return).sum::<f64>() / n;
    let totals = report.source_totals();
    print(
        &mut out,
        format!(
            "{} episodes ({}), mean return {mean_return:.4}, S2 calls {}, charged {:.4} s",
            report.episodes.len(),
            cfg.mode,
            totals[Source::S2.index()] + totals[Source::S2Direct.index()],
            report.total_charged_s()
        ),
    )
}

fn mean_json(m: &RunningMean) -> Value {
    json!({ "count": m.count, "mean": m.mean() })
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Failure> {
    if !args.store.exists() {
        return Err(Failure::usage(format!(
            "store {} does not exist",
            args.store.display()
        )));
    }
    let store = ExperienceStore::load(&args.store).map_err(|e| Failure::usage(e.to_string()))?;
    let stats = store.solver_stats();
    let solvers: Vec<Value> = stats
        .runtime
        .keys()
        .chain(stats.outcome.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|key| {
            let runtime = stats.runtime.get(key).copied().unwrap_or_default();
            let outcome = stats.outcome.get(key).copied().unwrap_or_default();
            json!({
                "solver": key.0,
                "task": key.1,
                "runtime_s": mean_json(&runtime),
                "return_to_go": mean_json(&outcome),
            })
        })
        .collect();
    let tasks: serde_json::Map<String, Value> = store
        .task_stats()
        .iter()
        .map(|(t, m)| (t.clone(), mean_json(m)))
        .collect();
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "q_entries": store.q_entries(),
        "q_visits": store.total_visits(),
        "cells_with_outcomes": stats.outcome_by_cell.len(),
        "solvers": solvers,
        "task_returns": tasks,
        "mc_costs": {
            "mc1_s": mean_json(&store.mc_costs().mc1),
            "mc2_s": mean_json(&store.mc_costs().mc2),
        },
    });
    let text = serde_json::to_string_pretty(&doc).expect("json values serialize");
    writeln!(io::stdout(), "{text}").map_err(|e| Failure::usage(format!("stdout: {e}")))
}

fn cmd_export(args: ExportArgs) -> Result<(), Failure> {
    if args.block == 0 {
        return Err(Failure::usage("invalid `block`: must be at least 1"));
    }
    let text = fs::read_to_string(&args.trace)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", args.trace.display())))?;
    let rows = episode_rows_from_trace(&text).map_err(|e| Failure::usage(e.to_string()))?;
    let emit = |w: &mut dyn Write| -> io::Result<()> {
        writeln!(w, "{BLOCK_HEADER}")?;
        for (i, b) in blocks(&rows, args.block).iter().enumerate() {
            writeln!(w, "{}", b.csv_row(i))?;
        }
        Ok(())
    };
    match &args.out {
        Some(p) => write_file(p, |w| emit(w)),
        None => emit(&mut io::stdout().lock()).map_err(|e| Failure::usage(format!("stdout: {e}"))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, false),
        Command::Baseline(a) => cmd_run(a, true),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
