//! Command-line driver: `run`, `sweep`, `compare` and `dump` on a config file.
//!
//! Exit status is 0 on success, 2 for an invalid configuration, 3 when a
//! tolerance was missed and `--strict` is set, 1 for any other failure.
//! Failures also print one machine-readable JSON line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vmstd::config::{ConfigError, RunConfig};
use vmstd::study::{self, ResultRow, StudyError};

#[derive(Parser)]
#[command(name = "vmstd", version, about = "Multi-level separated heat solver with a moving fine window")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// March one configuration and write its CSV row(s).
    Run(Common),
    /// Run every point of the configured sweep and fit log-log slopes.
    Sweep(Common),
    /// Multi-level run, single-level reference and (small meshes) dense oracle side by side.
    Compare(Common),
    /// March and write separated and structured-points dumps of chosen steps.
    Dump(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Concurrent sweep points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; overrides `output.dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reserved; every algorithm here is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
    /// Exit with status 3 when any step missed a tolerance.
    #[arg(long)]
    strict: bool,
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn error_record(e: &StudyError) -> String {
    match e {
        StudyError::Config(ConfigError::ConfigInvalid(d)) => {
            let items: Vec<String> = d
                .iter()
                .map(|x| format!("{{\"key\":\"{}\",\"message\":\"{}\"}}", json_escape(&x.key), json_escape(&x.message)))
                .collect();
            format!("{{\"error\":\"ConfigInvalid\",\"diagnostics\":[{}]}}", items.join(","))
        }
        StudyError::Config(ConfigError::Io { .. }) => {
            format!("{{\"error\":\"ConfigUnreadable\",\"message\":\"{}\"}}", json_escape(&e.to_string()))
        }
        StudyError::Solver { run, source } => format!(
            "{{\"error\":\"Solver\",\"run\":\"{}\",\"message\":\"{}\"}}",
            json_escape(run),
            json_escape(&source.to_string())
        ),
        _ => format!("{{\"error\":\"Failure\",\"message\":\"{}\"}}", json_escape(&e.to_string())),
    }
}

fn exit_for(e: &StudyError) -> ExitCode {
    match e {
        StudyError::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn load(args: &Common) -> Result<(RunConfig, PathBuf), StudyError> {
    let cfg = RunConfig::from_file(&args.config)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok((cfg, dir))
}

fn print_rows(rows: &[ResultRow]) {
    println!(
        "{:<18} {:<10} {:>10} {:>12} {:>9} {:>10} {:>6}  status",
        "run", "method", "value", "error", "slope", "ms/step", "dofs"
    );
    for r in rows {
        println!(
            "{:<18} {:<10} {:>10} {:>12.4e} {:>9} {:>10.2} {:>6}  {}",
            r.run_id,
            r.method,
            r.value.map_or("-".into(), |v| format!("{v}")),
            r.error,
            r.slope.map_or("-".into(), |s| format!("{s:.3}")),
            r.step_ms,
            r.dofs,
            r.status
        );
    }
}

fn finish(rows: &[ResultRow], csv: &Path, args: &Common) -> Result<ExitCode, StudyError> {
    study::write_csv(csv, rows)?;
    if !args.quiet {
        print_rows(rows);
        println!("wrote {}", csv.display());
    }
    let missed = rows.iter().any(|r| r.unconverged > 0);
    if missed && !args.quiet {
        eprintln!("warning: some steps did not meet the iteration tolerances");
    }
    Ok(if args.strict && missed {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn execute(command: &Command) -> Result<ExitCode, StudyError> {
    match command {
        Command::Run(args) => {
            let (cfg, dir) = load(args)?;
            let rows = study::run_single(&cfg, Some(&dir))?;
            finish(&rows, &dir.join(&cfg.output.csv), args)
        }
        Command::Sweep(args) => {
            let (cfg, dir) = load(args)?;
            let rows = study::sweep(&cfg, args.jobs)?;
            finish(&rows, &dir.join(&cfg.output.csv), args)
        }
        Command::Compare(args) => {
            let (cfg, dir) = load(args)?;
            let rows = study::compare(&cfg)?;
            finish(&rows, &dir.join(&cfg.output.csv), args)
        }
        Command::Dump(args) => {
            let (cfg, dir) = load(args)?;
            let (report, files) = study::run_with_dumps(&cfg, &dir)?;
            if !args.quiet {
                for f in &files {
                    println!("wrote {}", f.display());
                }
            }
            Ok(if args.strict && !report.all_converged() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            exit_for(&e)
        }
    }
}
