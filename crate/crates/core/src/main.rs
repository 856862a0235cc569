use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use hookfuzz::cli::{self, CliInvocation, Mode};

/// Coverage-guided grammar fuzzer for script-language runtimes.
#[derive(Parser)]
#[command(name = "hookfuzz", version, about)]
struct Args {
    /// Target driver: `mock`, `lua`, or a path to a `.driver` descriptor.
    #[arg(long, default_value = "mock")]
    target: String,

    /// Campaign seed. A fresh one is drawn (and printed) when omitted.
    #[arg(long)]
    seed: Option<u64>,

    /// Wall-clock budget, e.g. `60s`, `500ms`, `10m`. Unlimited when omitted.
    #[arg(long, value_parser = parse_duration)]
    max_time: Option<Duration>,

    /// Stop after this many executed lines (useful for reproducible runs).
    #[arg(long)]
    max_lines: Option<u64>,

    /// Where corpus entries, the session log, and the coverage export go.
    #[arg(long, default_value = "corpus")]
    corpus_dir: PathBuf,

    /// Configuration overrides file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Replay one saved corpus entry (source or .meta path) and exit.
    #[arg(long)]
    replay: Option<PathBuf>,

    /// Print the target's override pool and module registry, then exit.
    #[arg(long)]
    scan: bool,

    /// How often the live stats line is printed.
    #[arg(long, default_value = "2s", value_parser = parse_duration)]
    stats_interval: Duration,
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| c.is_ascii_alphabetic()) {
        Some(pos) => s.split_at(pos),
        None => (s, "ms"),
    };
    let value: f64 = num.parse().map_err(|_| format!("bad duration {s:?}"))?;
    if value < 0.0 {
        return Err(format!("negative duration {s:?}"));
    }
    let secs = match unit {
        "ms" => value / 1000.0,
        "s" => value,
        "m" => value * 60.0,
        "h" => value * 3600.0,
        other => return Err(format!("unknown duration unit {other:?}")),
    };
    Ok(Duration::from_secs_f64(secs))
}

fn main() {
    let args = Args::parse();
    let seed = args.seed.unwrap_or_else(rand::random);
    let mode = if let Some(path) = args.replay {
        Mode::Replay(path)
    } else if args.scan {
        Mode::Scan
    } else {
        Mode::Campaign
    };
    let inv = CliInvocation {
        target: args.target,
        seed,
        max_time: args.max_time,
        max_lines: args.max_lines,
        corpus_dir: args.corpus_dir,
        config_path: args.config,
        mode,
        stats_interval: args.stats_interval,
    };
    std::process::exit(cli::run(&inv));
}
