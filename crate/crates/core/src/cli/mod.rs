//! Campaign orchestration: flag-level invocation record, the campaign loop
//! wired to persistence, saved-entry replay, and the built-in scan printout.
//! The binary in `main.rs` is a thin argument parser over this module.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::config::Config;
use crate::driver::{build_driver, Driver};
use crate::persist::{
    self, CorpusWriter, ExportInput, LoadedSession, PersistError, SessionLog,
};
use crate::scheduler::{Campaign, Event, StopCondition};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;
pub const EXIT_CRASH: i32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Campaign,
    Replay(PathBuf),
    Scan,
}

#[derive(Debug, Clone)]
pub struct CliInvocation {
    pub target: String,
    pub seed: u64,
    pub max_time: Option<Duration>,
    pub max_lines: Option<u64>,
    pub corpus_dir: PathBuf,
    pub config_path: Option<PathBuf>,
    pub mode: Mode,
    pub stats_interval: Duration,
}

impl CliInvocation {
    pub fn new(target: impl Into<String>, seed: u64, corpus_dir: impl Into<PathBuf>) -> Self {
        CliInvocation {
            target: target.into(),
            seed,
            max_time: None,
            max_lines: None,
            corpus_dir: corpus_dir.into(),
            config_path: None,
            mode: Mode::Campaign,
            stats_interval: Duration::from_secs(2),
        }
    }
}

pub fn run(inv: &CliInvocation) -> i32 {
    match &inv.mode {
        Mode::Campaign => run_campaign(inv),
        Mode::Replay(path) => replay_entry(inv, &path.clone()),
        Mode::Scan => scan(inv),
    }
}

fn load_config(inv: &CliInvocation) -> Result<Config, String> {
    let mut cfg = Config::default();
    if let Some(path) = &inv.config_path {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("config {path:?}: {e}"))?;
        cfg.apply_file(&text).map_err(|e| e.to_string())?;
    }
    Ok(cfg)
}

/// Run the scheduler until max_time/max_lines or a crash event, writing
/// corpus entries as they are admitted, the session log, and the coverage
/// export.
pub fn run_campaign(inv: &CliInvocation) -> i32 {
    let cfg = match load_config(inv) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };

    // Reproducibility starts here: the seed precedes any generation output.
    println!("seed = {}", inv.seed);

    let mut driver = match build_driver(&inv.target, cfg.mutation.t_line) {
        Ok(driver) => driver,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let target_name = driver.descriptor().name.clone();
    let extension = driver.descriptor().extension.clone();
    let config_hash = cfg.hash(&target_name);

    if inv.max_time == Some(Duration::ZERO) {
        // Nothing to run; still leave well-formed empty artifacts behind.
        return match write_empty_artifacts(inv, &target_name, config_hash) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_FAILURE
            }
        };
    }

    let loaded = match persist::load_session(&inv.corpus_dir, config_hash) {
        Ok(loaded) => loaded,
        Err(PersistError::ConfigMismatch { expected, found }) => {
            eprintln!(
                "error: refusing to load corpus: entries were produced under config \
                 {found:016x}, current configuration hashes to {expected:016x}"
            );
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    for (path, why) in &loaded.skipped {
        eprintln!("warning: skipped {}: {why}", path.display());
    }

    match campaign_loop(inv, cfg, driver.as_mut(), loaded, &target_name, &extension, config_hash) {
        Ok(crashed) => {
            if crashed {
                EXIT_CRASH
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn campaign_loop(
    inv: &CliInvocation,
    cfg: Config,
    driver: &mut dyn Driver,
    loaded: LoadedSession,
    target_name: &str,
    extension: &str,
    config_hash: u64,
) -> Result<bool, String> {
    let resumed_entries = loaded.corpus.len();
    let mut campaign = if resumed_entries > 0 {
        println!("resuming session: {resumed_entries} corpus entries");
        Campaign::resume(driver, cfg, inv.seed, loaded.corpus, loaded.id_counter)
    } else {
        Campaign::new(driver, cfg, inv.seed)
    }
    .map_err(|e| e.to_string())?;

    let writer = CorpusWriter::create(&inv.corpus_dir, target_name, extension, config_hash)
        .map_err(|e| e.to_string())?;
    let mut log = SessionLog::create(&inv.corpus_dir, target_name, inv.seed, config_hash)
        .map_err(|e| e.to_string())?;

    let stop = StopCondition {
        max_time: inv.max_time,
        max_lines: inv.max_lines,
    };
    let started = Instant::now();
    let mut next_stats = started + inv.stats_interval;
    let mut saved_entries = resumed_entries;

    let flush =
        |campaign: &mut Campaign<'_>, log: &mut SessionLog, saved: &mut usize| -> Result<(), String> {
            for event in campaign.drain_events() {
                log.append(&event).map_err(|e| e.to_string())?;
                if let Event::CorpusAdd { entry_id, .. } = event {
                    let entry = &campaign.state.corpus[entry_id as usize];
                    writer
                        .save_entry(entry, campaign.id_counter(), false)
                        .map_err(|e| e.to_string())?;
                    *saved = (*saved).max(entry_id as usize + 1);
                }
            }
            Ok(())
        };

    loop {
        if campaign.crashed().is_some() {
            break;
        }
        if let Some(limit) = stop.max_lines {
            if campaign.stats.lines_executed >= limit {
                break;
            }
        }
        if let Some(limit) = stop.max_time {
            if started.elapsed() >= limit {
                break;
            }
        }
        campaign.step().map_err(|e| e.to_string())?;
        flush(&mut campaign, &mut log, &mut saved_entries)?;

        if Instant::now() >= next_stats {
            print_stats(&campaign);
            next_stats += inv.stats_interval;
        }
    }
    flush(&mut campaign, &mut log, &mut saved_entries)?;
    log.flush().map_err(|e| e.to_string())?;
    print_stats(&campaign);

    let crashed = campaign.crashed().map(str::to_owned);
    if let Some((ast, history)) = campaign.crash_entry.take() {
        let crash_id = campaign.state.corpus.len() as u64;
        let path = persist::save_crash_entry(
            &writer,
            crash_id,
            &ast,
            &history,
            inv.seed,
            campaign.stats.lines_executed,
            campaign.id_counter(),
        )
        .map_err(|e| e.to_string())?;
        println!("crash entry saved to {}", path.display());
    }

    persist::export_coverage(
        &inv.corpus_dir,
        &ExportInput {
            target: target_name,
            seed: inv.seed,
            config_hash,
            stats: &campaign.stats,
            corpus_size: campaign.state.corpus.len(),
            edge_discovery: &campaign.state.edge_discovery,
        },
    )
    .map_err(|e| e.to_string())?;

    if let Some(message) = crashed {
        println!("crash event: {message}");
        println!("reproduce with seed {}", inv.seed);
        return Ok(true);
    }
    Ok(false)
}

fn print_stats(campaign: &Campaign<'_>) {
    println!(
        "[stats] lines={} edges={} corpus={} threshold={} fallbacks={}",
        campaign.stats.lines_executed,
        campaign.total_edges(),
        campaign.state.corpus.len(),
        campaign.threshold(),
        campaign.stats.fallbacks,
    );
}

fn write_empty_artifacts(
    inv: &CliInvocation,
    target: &str,
    config_hash: u64,
) -> Result<(), PersistError> {
    let mut log = SessionLog::create(&inv.corpus_dir, target, inv.seed, config_hash)?;
    log.flush()?;
    persist::export_coverage(
        &inv.corpus_dir,
        &ExportInput {
            target,
            seed: inv.seed,
            config_hash,
            stats: &Default::default(),
            corpus_size: 0,
            edge_discovery: &[],
        },
    )?;
    Ok(())
}

/// Execute one saved entry line by line against its target, reporting each
/// verdict. No mutation happens here.
pub fn replay_entry(inv: &CliInvocation, path: &Path) -> i32 {
    let cfg = match load_config(inv) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let meta_path = if path.extension().is_some_and(|e| e == "meta") {
        path.to_path_buf()
    } else {
        path.with_extension("meta")
    };
    let entry = match persist::load_entry(&meta_path) {
        Ok(entry) => entry,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };

    let mut driver = match build_driver(&inv.target, cfg.mutation.t_line) {
        Ok(driver) => driver,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if driver.descriptor().name != entry.target {
        eprintln!(
            "error: entry was saved for target {:?}, refusing to replay on {:?}",
            entry.target,
            driver.descriptor().name
        );
        return EXIT_USAGE;
    }

    let lines = entry.lines();
    println!("replaying {} lines (entry {})", lines.len(), entry.entry_id);
    for (i, line) in lines.iter().enumerate() {
        match driver.run_line(line, cfg.mutation.t_line) {
            Ok(result) => {
                let verdict = if result.timed_out {
                    "timeout".to_owned()
                } else if let Some(err) = &result.error {
                    format!("error: {err}")
                } else {
                    format!("ok ({} edges)", result.new_edge_ids.len())
                };
                println!("[{}/{}] {verdict}", i + 1, lines.len());
            }
            Err(e) => {
                println!("[{}/{}] abnormal termination: {e}", i + 1, lines.len());
                return EXIT_CRASH;
            }
        }
    }
    EXIT_OK
}

/// Print the override pool and module registry the driver's startup scan
/// discovers; driver-authoring diagnostics.
pub fn scan(inv: &CliInvocation) -> i32 {
    let cfg = match load_config(inv) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut driver = match build_driver(&inv.target, cfg.mutation.t_line) {
        Ok(driver) => driver,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match driver.scan_builtins() {
        Ok(pool) => {
            print!("{}", pool.to_text());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
