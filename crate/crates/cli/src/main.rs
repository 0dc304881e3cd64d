use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdraft::checker::ExplorationBounds;
use cdraft::error::ConfigError;
use cdraft::harness::{compare, deepen, optimize_files, run, run_detailed, CheckSpec, Protocol, Scenario};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Simulator, placement model and bounded checker for cross-domain Raft.
#[derive(Debug, Parser)]
#[command(name = "cdraft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Aligned text for people.
    #[default]
    Table,
    /// JSON records.
    Records,
}

#[derive(Debug, Args)]
struct Output {
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and report latency metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Run two scenarios and report the reduction from the first to the second.
    Compare {
        /// Baseline scenario, then candidate scenario.
        #[arg(long, num_args = 2, required = true, value_names = ["A", "B"])]
        scenario: Vec<PathBuf>,
        /// Overrides both scenarios' seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Choose the global leader domain for a latency matrix and a load profile.
    Optimize {
        #[arg(long)]
        latency: PathBuf,
        #[arg(long)]
        load: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Bounded model check, or a monitored simulation run with --scenario.
    Check(CheckArgs),
    /// Run a scenario and dump its event trace.
    Trace {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Run this scenario with the safety monitor and linearizability check
    /// instead of exploring.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "cdraft")]
    protocol: ProtocolArg,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 3)]
    nodes: u16,
    /// Scripted client writes.
    #[arg(long, default_value_t = 2)]
    ops: usize,
    #[arg(long, default_value_t = 14)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    drops: u8,
    #[arg(long, default_value_t = 1)]
    crashes: u8,
    #[arg(long, default_value_t = 2)]
    timeouts: u8,
    /// Only heartbeat timers fire; leadership never changes.
    #[arg(long)]
    no_elections: bool,
    /// Step budget; the result is flagged partial when it runs out.
    #[arg(long, default_value_t = 100_000_000)]
    max_states: usize,
    /// Explore depth 1, 2, ... and report the deepest bound completed.
    #[arg(long)]
    deepen: bool,
    /// Replace the commit rule with a leader-domain majority.
    #[arg(long)]
    mutate: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Cdraft,
    Raft,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What a command found.
enum Verdict {
    Clean,
    Violation,
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Write { path: p.display().to_string(), source }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, ConfigError> {
    let mut s = Scenario::load(path)?;
    if s.name.is_empty() {
        s.name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    }
    if let Some(seed) = seed {
        s.run.seed = seed;
    }
    Ok(s)
}

fn execute(cmd: Command) -> Result<Verdict, CliError> {
    match cmd {
        Command::Run { scenario, seed, output } => {
            let report = run(&load(&scenario, seed)?)?;
            let text = match output.format {
                Format::Table => report.to_table(),
                Format::Records => report.to_json() + "\n",
            };
            emit(output.out.as_deref(), &text)?;
            Ok(if report.violations.is_empty() { Verdict::Clean } else { Verdict::Violation })
        }
        Command::Compare { scenario, seed, output } => {
            let a = run(&load(&scenario[0], seed)?)?;
            let b = run(&load(&scenario[1], seed)?)?;
            let c = compare(&a, &b);
            let text = match output.format {
                Format::Table => c.to_table(),
                Format::Records => c.to_json() + "\n",
            };
            emit(output.out.as_deref(), &text)?;
            Ok(if a.violations.is_empty() && b.violations.is_empty() { Verdict::Clean } else { Verdict::Violation })
        }
        Command::Optimize { latency, load, output } => {
            let r = optimize_files(&latency, &load)?;
            let text = match output.format {
                Format::Table => r.to_table(),
                Format::Records => r.to_json() + "\n",
            };
            emit(output.out.as_deref(), &text)?;
            Ok(Verdict::Clean)
        }
        Command::Check(args) => check(args),
        Command::Trace { scenario, seed, out } => {
            let outcome = run_detailed(&load(&scenario, seed)?, true)?;
            let text: String = outcome.trace.unwrap_or_default().iter().map(|r| format!("{r}\n")).collect();
            emit(out.as_deref(), &text)?;
            Ok(if outcome.report.violations.is_empty() { Verdict::Clean } else { Verdict::Violation })
        }
    }
}

fn check(args: CheckArgs) -> Result<Verdict, CliError> {
    if let Some(path) = &args.scenario {
        let mut s = load(path, args.seed)?;
        s.run.check_invariants = true;
        s.run.check_linearizability = true;
        let report = run(&s)?;
        let text = match args.output.format {
            Format::Table => report.to_table(),
            Format::Records => report.to_json() + "\n",
        };
        emit(args.output.out.as_deref(), &text)?;
        return Ok(if report.violations.is_empty() { Verdict::Clean } else { Verdict::Violation });
    }
    let spec = CheckSpec {
        protocol: match args.protocol {
            ProtocolArg::Cdraft => Protocol::Cdraft,
            ProtocolArg::Raft => Protocol::Raft,
        },
        domains: args.domains,
        nodes_per_domain: args.nodes,
        ops: args.ops,
        bounds: ExplorationBounds {
            max_depth: args.depth,
            max_drops: args.drops,
            max_crashes: args.crashes,
            max_timeouts: args.timeouts,
            elections: !args.no_elections,
            max_states: args.max_states,
        },
        mutate_commit_rule: args.mutate,
    };
    let (text, clean) = if args.deepen {
        let r = deepen(&spec)?;
        let text = match args.output.format {
            Format::Table => {
                let mut t = format!(
                    "exhaustive to depth {} of {}  states {}  truncated {}\n",
                    r.complete_depth, spec.bounds.max_depth, r.states_visited, r.truncated
                );
                for v in &r.violations {
                    t.push_str(&format!("VIOLATION {v}\n"));
                }
                t + &r.counterexample
            }
            Format::Records => serde_json::to_string_pretty(&r).expect("report serializes") + "\n",
        };
        (text, r.violations.is_empty())
    } else {
        let r = spec.explore()?;
        let text = match args.output.format {
            Format::Table => {
                let mut t = format!(
                    "states {}  schedules {}  deepest {}  writes acknowledged {}  truncated {}\n",
                    r.states_visited, r.schedules, r.deepest, r.writes_acknowledged, r.truncated
                );
                for v in &r.violations {
                    t.push_str(&format!("VIOLATION {v}\n"));
                }
                t + &r.counterexample_text()
            }
            Format::Records => {
                let mut v = serde_json::to_value(&r).expect("report serializes");
                v["counterexample"] = r.counterexample_text().into();
                serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
            }
        };
        (text, r.is_clean())
    };
    emit(args.output.out.as_deref(), &text)?;
    Ok(if clean { Verdict::Clean } else { Verdict::Violation })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Verdict::Clean) => ExitCode::SUCCESS,
        Ok(Verdict::Violation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
