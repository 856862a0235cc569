//! Corpus and session persistence. Layout under the corpus directory:
//! `saved/<id>.<ext>` (source), `saved/<id>.meta` (line-oriented key/value
//! sidecar), `saved/<id>.ast` (canonical tree), `session.log` (event
//! stream), `coverage.export`. Every artifact is byte-stable for a given
//! seed and configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::ast::canon;
use crate::ast::Scope;
use crate::scheduler::{CampaignStats, CorpusEntry, Event};

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corpus was produced under config hash {found:016x}, expected {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("entry {0}: malformed sidecar: {1}")]
    BadSidecar(u64, String),
    #[error("saved entry targets driver {found:?}, not {expected:?}")]
    TargetMismatch { expected: String, found: String },
}

/// A corpus entry as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedEntry {
    pub source_text: String,
    pub entry_id: u64,
    pub seed: u64,
    pub edge_count: usize,
    pub target: String,
    pub created_line: u64,
    pub config_hash: u64,
    pub crash: bool,
    pub line_offsets: Vec<usize>,
    pub edges: BTreeSet<u32>,
    pub id_counter: u64,
}

impl SavedEntry {
    /// Split the joined source back into the original submission list.
    pub fn lines(&self) -> Vec<String> {
        let bytes = self.source_text.as_bytes();
        let mut out = Vec::with_capacity(self.line_offsets.len());
        for (i, &start) in self.line_offsets.iter().enumerate() {
            let end = self
                .line_offsets
                .get(i + 1)
                .map(|&next| next.saturating_sub(1)) // drop the joining newline
                .unwrap_or(bytes.len());
            if start <= end && end <= bytes.len() {
                out.push(String::from_utf8_lossy(&bytes[start..end]).into_owned());
            }
        }
        out
    }
}

pub struct CorpusWriter {
    saved_dir: PathBuf,
    extension: String,
    target: String,
    config_hash: u64,
}

impl CorpusWriter {
    pub fn create(
        root: &Path,
        target: &str,
        extension: &str,
        config_hash: u64,
    ) -> Result<Self, PersistError> {
        let saved_dir = root.join("saved");
        fs::create_dir_all(&saved_dir)?;
        Ok(CorpusWriter {
            saved_dir,
            extension: extension.to_owned(),
            target: target.to_owned(),
            config_hash,
        })
    }

    pub fn source_path(&self, entry_id: u64) -> PathBuf {
        self.saved_dir.join(format!("{entry_id}.{}", self.extension))
    }

    /// Write source + sidecar + canonical tree for one entry.
    pub fn save_entry(
        &self,
        entry: &CorpusEntry,
        id_counter: u64,
        crash: bool,
    ) -> Result<PathBuf, PersistError> {
        let mut source = String::new();
        let mut offsets = Vec::with_capacity(entry.line_history.len());
        for (i, line) in entry.line_history.iter().enumerate() {
            if i > 0 {
                source.push('\n');
            }
            offsets.push(source.len());
            source.push_str(line);
        }

        let source_path = self.source_path(entry.entry_id);
        fs::write(&source_path, &source)?;

        let mut meta = String::new();
        let _ = writeln!(meta, "entry_id = {}", entry.entry_id);
        let _ = writeln!(meta, "seed = {}", entry.seed);
        let _ = writeln!(meta, "edge_count = {}", entry.discovered_edges.len());
        let _ = writeln!(meta, "target = {}", self.target);
        let _ = writeln!(meta, "created_line = {}", entry.created_at);
        let _ = writeln!(meta, "config_hash = {:016x}", self.config_hash);
        let _ = writeln!(meta, "id_counter = {id_counter}");
        if crash {
            let _ = writeln!(meta, "crash = 1");
        }
        let offsets_text: Vec<String> = offsets.iter().map(|o| o.to_string()).collect();
        let _ = writeln!(meta, "line_offsets = {}", offsets_text.join(","));
        let edges_text: Vec<String> = entry
            .discovered_edges
            .iter()
            .map(|e| e.to_string())
            .collect();
        let _ = writeln!(meta, "edges = {}", edges_text.join(","));
        fs::write(self.saved_dir.join(format!("{}.meta", entry.entry_id)), meta)?;

        fs::write(
            self.saved_dir.join(format!("{}.ast", entry.entry_id)),
            canon::write_scope(&entry.ast_snapshot),
        )?;
        Ok(source_path)
    }
}

/// Parse one sidecar + its source file.
pub fn load_entry(meta_path: &Path) -> Result<SavedEntry, PersistError> {
    let text = fs::read_to_string(meta_path)?;
    let mut entry = SavedEntry {
        source_text: String::new(),
        entry_id: 0,
        seed: 0,
        edge_count: 0,
        target: String::new(),
        created_line: 0,
        config_hash: 0,
        crash: false,
        line_offsets: Vec::new(),
        edges: BTreeSet::new(),
        id_counter: 0,
    };
    let bad = |m: &str| PersistError::BadSidecar(entry_id_of(meta_path), m.to_owned());
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad("missing ="))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "entry_id" => entry.entry_id = v.parse().map_err(|_| bad("entry_id"))?,
            "seed" => entry.seed = v.parse().map_err(|_| bad("seed"))?,
            "edge_count" => entry.edge_count = v.parse().map_err(|_| bad("edge_count"))?,
            "target" => entry.target = v.to_owned(),
            "created_line" => entry.created_line = v.parse().map_err(|_| bad("created_line"))?,
            "config_hash" => {
                entry.config_hash =
                    u64::from_str_radix(v, 16).map_err(|_| bad("config_hash"))?
            }
            "id_counter" => entry.id_counter = v.parse().map_err(|_| bad("id_counter"))?,
            "crash" => entry.crash = v == "1",
            "line_offsets" => {
                for part in v.split(',').filter(|p| !p.is_empty()) {
                    entry
                        .line_offsets
                        .push(part.parse().map_err(|_| bad("line_offsets"))?);
                }
            }
            "edges" => {
                for part in v.split(',').filter(|p| !p.is_empty()) {
                    entry.edges.insert(part.parse().map_err(|_| bad("edges"))?);
                }
            }
            _ => return Err(bad(&format!("unknown key {k:?}"))),
        }
    }
    if entry.edge_count != entry.edges.len() {
        return Err(bad("edge_count disagrees with edges"));
    }
    let source_path = source_path_for(meta_path);
    entry.source_text = fs::read_to_string(
        source_path.ok_or_else(|| bad("no source file next to sidecar"))?,
    )?;
    Ok(entry)
}

fn entry_id_of(meta_path: &Path) -> u64 {
    meta_path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn source_path_for(meta_path: &Path) -> Option<PathBuf> {
    let stem = meta_path.file_stem()?.to_str()?;
    let dir = meta_path.parent()?;
    fs::read_dir(dir).ok()?.flatten().find_map(|e| {
        let p = e.path();
        let name = p.file_name()?.to_str()?;
        let (s, ext) = name.rsplit_once('.')?;
        (s == stem && ext != "meta" && ext != "ast").then_some(p)
    })
}

#[derive(Debug, Default)]
pub struct LoadedSession {
    pub corpus: Vec<CorpusEntry>,
    pub id_counter: u64,
    /// Sidecars that failed to parse and were skipped with a warning.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Reconstruct the corpus from a session directory. A configuration-hash
/// mismatch refuses the whole load; individually corrupt entries are
/// skipped.
pub fn load_session(root: &Path, expected_hash: u64) -> Result<LoadedSession, PersistError> {
    let saved = root.join("saved");
    let mut session = LoadedSession::default();
    if !saved.is_dir() {
        return Ok(session);
    }
    let mut metas: Vec<PathBuf> = fs::read_dir(&saved)?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "meta"))
        .collect();
    metas.sort_by_key(|p| entry_id_of(p));

    for meta in metas {
        let entry = match load_entry(&meta) {
            Ok(entry) => entry,
            Err(e) => {
                session.skipped.push((meta, e.to_string()));
                continue;
            }
        };
        if entry.config_hash != expected_hash {
            return Err(PersistError::ConfigMismatch {
                expected: expected_hash,
                found: entry.config_hash,
            });
        }
        session.id_counter = session.id_counter.max(entry.id_counter);
        if entry.crash {
            // Crash records replay individually but never seed generation.
            continue;
        }
        let ast_path = saved.join(format!("{}.ast", entry.entry_id));
        let ast_snapshot = match fs::read_to_string(&ast_path)
            .map_err(|e| e.to_string())
            .and_then(|text| canon::parse_scope(&text).map_err(|e| e.to_string()))
        {
            Ok(scope) => scope,
            Err(e) => {
                session.skipped.push((ast_path, e));
                continue;
            }
        };
        session.corpus.push(CorpusEntry {
            entry_id: entry.entry_id,
            ast_snapshot,
            line_history: entry.lines(),
            seed: entry.seed,
            discovered_edges: entry.edges,
            created_at: entry.created_line,
        });
    }
    Ok(session)
}

/// Streaming event log: a short header then one line per event.
pub struct SessionLog {
    file: fs::File,
}

impl SessionLog {
    pub fn create(
        root: &Path,
        target: &str,
        seed: u64,
        config_hash: u64,
    ) -> Result<Self, PersistError> {
        fs::create_dir_all(root)?;
        let mut file = fs::File::create(root.join("session.log"))?;
        writeln!(file, "# session target={target} seed={seed} config={config_hash:016x}")?;
        Ok(SessionLog { file })
    }

    pub fn append(&mut self, event: &Event) -> Result<(), PersistError> {
        writeln!(self.file, "{}", event.render())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), PersistError> {
        self.file.flush()?;
        Ok(())
    }
}

/// Everything the coverage export needs from a finished campaign.
pub struct ExportInput<'a> {
    pub target: &'a str,
    pub seed: u64,
    pub config_hash: u64,
    pub stats: &'a CampaignStats,
    pub corpus_size: usize,
    /// (edge id, lines-executed clock at discovery), discovery-ordered.
    pub edge_discovery: &'a [(u32, u64)],
}

pub fn coverage_export_text(input: &ExportInput<'_>) -> String {
    let mut out = String::new();
    let s = input.stats;
    let _ = writeln!(out, "# coverage export");
    let _ = writeln!(out, "target = {}", input.target);
    let _ = writeln!(out, "seed = {}", input.seed);
    let _ = writeln!(out, "config_hash = {:016x}", input.config_hash);
    let _ = writeln!(out, "total_edges = {}", input.edge_discovery.len());
    let _ = writeln!(out, "lines_executed = {}", s.lines_executed);
    let _ = writeln!(out, "corpus_size = {}", input.corpus_size);
    let _ = writeln!(out, "declaration_passes = {}", s.declaration_passes);
    let _ = writeln!(out, "fallbacks = {}", s.fallbacks);
    let _ = writeln!(out, "startovers = {}", s.startovers);
    let _ = writeln!(out, "timeouts = {}", s.timeouts);
    let _ = writeln!(out, "errors = {}", s.errors);
    let _ = writeln!(out, "generation_skips = {}", s.generation_skips);
    let _ = writeln!(out, "crashes = {}", s.crashes);
    for (ordinal, (edge, line)) in input.edge_discovery.iter().enumerate() {
        let _ = writeln!(out, "edge {edge} ordinal {} line {line}", ordinal + 1);
    }
    out
}

pub fn export_coverage(root: &Path, input: &ExportInput<'_>) -> Result<PathBuf, PersistError> {
    fs::create_dir_all(root)?;
    let path = root.join("coverage.export");
    fs::write(&path, coverage_export_text(input))?;
    Ok(path)
}

/// Crash records are saved as the next entry id with a `crash = 1` marker so
/// they can be replayed but never reseed generation.
pub fn save_crash_entry(
    writer: &CorpusWriter,
    next_id: u64,
    ast: &Scope,
    history: &[String],
    seed: u64,
    created_at: u64,
    id_counter: u64,
) -> Result<PathBuf, PersistError> {
    let entry = CorpusEntry {
        entry_id: next_id,
        ast_snapshot: ast.clone(),
        line_history: history.to_vec(),
        seed,
        discovered_edges: BTreeSet::new(),
        created_at,
    };
    writer.save_entry(&entry, id_counter, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{ConstantValue, DeclarationStmt, Identifier, VarDecl};

    fn sample_entry() -> CorpusEntry {
        let ast = Scope {
            declarations: vec![DeclarationStmt::Var(VarDecl {
                name: Identifier::new("int_0").unwrap(),
                value: ConstantValue::Integer(7),
            })],
            ..Scope::default()
        };
        CorpusEntry {
            entry_id: 2,
            ast_snapshot: ast,
            line_history: vec![
                "var int_0 = 7".into(),
                "class aa0 : bytes\ndef aa0 . rstrip ( a , b ) :".into(),
                "r0 = int_0 + int_0".into(),
            ],
            seed: 99,
            discovered_edges: [5u32, 17, 90].into_iter().collect(),
            created_at: 55,
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let writer = CorpusWriter::create(dir.path(), "mock", "mock", 0xabcd).unwrap();
        let entry = sample_entry();
        let source_path = writer.save_entry(&entry, 123, false).unwrap();
        assert!(source_path.ends_with("saved/2.mock"));

        let loaded = load_entry(&dir.path().join("saved/2.meta")).unwrap();
        assert_eq!(loaded.entry_id, 2);
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.edge_count, 3);
        assert_eq!(loaded.target, "mock");
        assert_eq!(loaded.created_line, 55);
        assert_eq!(loaded.config_hash, 0xabcd);
        assert_eq!(loaded.id_counter, 123);
        // Multi-line submissions split back exactly.
        assert_eq!(loaded.lines(), entry.line_history);
        assert_eq!(
            loaded.source_text.as_bytes(),
            entry.line_history.join("\n").as_bytes()
        );

        let session = load_session(dir.path(), 0xabcd).unwrap();
        assert_eq!(session.corpus.len(), 1);
        assert_eq!(session.corpus[0], entry);
        assert_eq!(session.id_counter, 123);
    }

    #[test]
    fn config_hash_mismatch_refuses_load() {
        let dir = tempfile::tempdir().unwrap();
        let writer = CorpusWriter::create(dir.path(), "mock", "mock", 1).unwrap();
        writer.save_entry(&sample_entry(), 0, false).unwrap();
        assert!(matches!(
            load_session(dir.path(), 2),
            Err(PersistError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_sidecar_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let writer = CorpusWriter::create(dir.path(), "mock", "mock", 1).unwrap();
        writer.save_entry(&sample_entry(), 0, false).unwrap();
        std::fs::write(dir.path().join("saved/3.meta"), "garbage without equals\n").unwrap();
        let session = load_session(dir.path(), 1).unwrap();
        assert_eq!(session.corpus.len(), 1);
        assert_eq!(session.skipped.len(), 1);
    }

    #[test]
    fn crash_entries_replay_but_do_not_reseed() {
        let dir = tempfile::tempdir().unwrap();
        let writer = CorpusWriter::create(dir.path(), "mock", "mock", 1).unwrap();
        save_crash_entry(
            &writer,
            7,
            &Scope::default(),
            &["var int_0 = 1".into(), "boom = ghost + ghost".into()],
            4,
            10,
            50,
        )
        .unwrap();
        let loaded = load_entry(&dir.path().join("saved/7.meta")).unwrap();
        assert!(loaded.crash);
        assert_eq!(loaded.lines().len(), 2);
        let session = load_session(dir.path(), 1).unwrap();
        assert!(session.corpus.is_empty());
    }

    #[test]
    fn export_contains_summary_and_discovery_records() {
        let stats = CampaignStats {
            lines_executed: 100,
            declaration_passes: 2,
            fallbacks: 1,
            ..CampaignStats::default()
        };
        let text = coverage_export_text(&ExportInput {
            target: "mock",
            seed: 1,
            config_hash: 0,
            stats: &stats,
            corpus_size: 3,
            edge_discovery: &[(5, 1), (9, 4)],
        });
        assert!(text.contains("total_edges = 2"));
        assert!(text.contains("lines_executed = 100"));
        assert!(text.contains("corpus_size = 3"));
        assert!(text.contains("declaration_passes = 2"));
        assert!(text.contains("fallbacks = 1"));
        assert!(text.contains("edge 5 ordinal 1 line 1"));
        assert!(text.contains("edge 9 ordinal 2 line 4"));
    }
}
