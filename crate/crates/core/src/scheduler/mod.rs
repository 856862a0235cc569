//! Campaign loop: per-line execution generation with coverage feedback,
//! stall-triggered declaration passes, corpus admission, fallback with
//! occasional startover, and timeout recovery by history replay.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use indexmap::IndexSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{
    count_scopes, BindingContext, BindingKind, BindingRecord, DeclarationStmt, ExecutionStmt,
    IdentifierGen, PrimitiveKind, Scope,
};
use crate::config::{Config, MutationConfig, FALLBACK_FAILED_ROUNDS};
use crate::driver::{Driver, DriverError, StmtRef};
use crate::mutation::{
    apply_declaration_mutation, gen_execution_line, merge_module_members_into, DeclKind, GenState,
    TypeTokens,
};
use crate::reflection::{parse_error, readback_types_for, BuiltinPool, ContextModel};

/// Stall threshold (no-edge lines before a declaration pass), logarithmic in
/// the campaign's total discovered edges and clamped to the configured band.
pub fn stall_threshold(total_new_edges: u64, cfg: &MutationConfig) -> u64 {
    let raw = ((total_new_edges.saturating_add(4)) as f64).log2() * 50.0;
    (raw.floor() as u64).clamp(cfg.t_floor, cfg.t_ceil)
}

/// A retained program: enough state to restore the session that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub entry_id: u64,
    pub ast_snapshot: Scope,
    /// Every submission that completed successfully, in order; replaying it
    /// on a fresh interpreter reproduces the session prefix.
    pub line_history: Vec<String>,
    pub seed: u64,
    pub discovered_edges: BTreeSet<u32>,
    /// Logical admission time: lines executed when the entry was admitted.
    pub created_at: u64,
}

#[derive(Debug, Clone, Default)]
pub struct WorkingEntry {
    pub ast: Scope,
    pub ctx: BindingContext,
    pub history: Vec<String>,
}

#[derive(Debug)]
pub struct CampaignState {
    pub no_edge_counter: u64,
    pub failed_decl_rounds: u32,
    pub corpus: Vec<CorpusEntry>,
    pub current: WorkingEntry,
    /// Discovery-ordered campaign-global edge set; N is its length.
    pub global_edges: IndexSet<u32>,
    /// (edge id, lines-executed clock at discovery), in discovery order.
    pub edge_discovery: Vec<(u32, u64)>,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CampaignStats {
    pub lines_executed: u64,
    pub generation_skips: u64,
    pub declaration_passes: u64,
    pub fallbacks: u64,
    pub startovers: u64,
    pub timeouts: u64,
    pub errors: u64,
    pub crashes: u64,
}

/// Structured event stream consumed by the CLI for stats and by persistence
/// for session logs.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Line {
        line_no: u64,
        new_edges: usize,
        error: bool,
        timed_out: bool,
        skipped: bool,
    },
    EdgesFound {
        line_no: u64,
        ids: Vec<u32>,
    },
    DeclarationPass {
        line_no: u64,
        kind: DeclKind,
        no_op: bool,
    },
    Fallback {
        line_no: u64,
        startover: bool,
        entry_id: u64,
    },
    Timeout {
        line_no: u64,
        replayed: usize,
        abandoned: bool,
    },
    CorpusAdd {
        line_no: u64,
        entry_id: u64,
        edge_count: usize,
    },
    Crash {
        line_no: u64,
        message: String,
    },
}

impl Event {
    /// One-line session-log rendering.
    pub fn render(&self) -> String {
        match self {
            Event::Line {
                line_no,
                new_edges,
                error,
                timed_out,
                skipped,
            } => format!(
                "line {line_no} edges {new_edges} err {} timeout {} skip {}",
                *error as u8, *timed_out as u8, *skipped as u8
            ),
            Event::EdgesFound { line_no, ids } => {
                let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                format!("edges {line_no} ids {}", ids.join(","))
            }
            Event::DeclarationPass { line_no, kind, no_op } => {
                format!("decl_pass {line_no} kind {} no_op {}", kind.name(), *no_op as u8)
            }
            Event::Fallback {
                line_no,
                startover,
                entry_id,
            } => format!(
                "fallback {line_no} startover {} entry {entry_id}",
                *startover as u8
            ),
            Event::Timeout {
                line_no,
                replayed,
                abandoned,
            } => format!(
                "timeout {line_no} replayed {replayed} abandoned {}",
                *abandoned as u8
            ),
            Event::CorpusAdd {
                line_no,
                entry_id,
                edge_count,
            } => format!("corpus_add {line_no} entry {entry_id} edges {edge_count}"),
            Event::Crash { line_no, message } => {
                format!("crash {line_no} {}", message.replace('\n', " "))
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("driver failure: {0}")]
    Driver(#[from] DriverError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StopCondition {
    pub max_time: Option<Duration>,
    pub max_lines: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub stats: CampaignStats,
    pub total_edges: u64,
    pub corpus_size: usize,
    pub crashed: Option<String>,
}

enum Submit {
    Completed { novel: Vec<u32>, ok: bool },
    TimedOut,
    Crashed,
}

pub struct Campaign<'d> {
    pub cfg: Config,
    driver: &'d mut dyn Driver,
    pub state: CampaignState,
    pub stats: CampaignStats,
    events: Vec<Event>,
    seed: u64,
    ids: IdentifierGen,
    model: ContextModel,
    pool: BuiltinPool,
    tokens: TypeTokens,
    /// Names queried on read-back; grown incrementally as the context binds
    /// new identifiers (the context only grows within a session segment).
    readback_names: Vec<String>,
    names_synced: usize,
    decl_pass_since_edge: bool,
    crashed: Option<String>,
    /// History prefix (plus the crashing line) for crash reproduction.
    pub crash_entry: Option<(Scope, Vec<String>)>,
}

impl<'d> Campaign<'d> {
    /// Scan the target, seed the model, synthesize the blank entry (one
    /// initial declaration pass) and admit it as corpus entry 0.
    pub fn new(
        driver: &'d mut dyn Driver,
        cfg: Config,
        seed: u64,
    ) -> Result<Self, CampaignError> {
        let mut campaign = Self::bare(driver, cfg, seed)?;
        campaign.init_blank_entry()?;
        Ok(campaign)
    }

    /// Continue from a loaded corpus: the freshest entry is restored and the
    /// identifier counter resumes past every persisted name.
    pub fn resume(
        driver: &'d mut dyn Driver,
        cfg: Config,
        seed: u64,
        corpus: Vec<CorpusEntry>,
        id_counter: u64,
    ) -> Result<Self, CampaignError> {
        if corpus.is_empty() {
            return Self::new(driver, cfg, seed);
        }
        let mut campaign = Self::bare(driver, cfg, seed)?;
        campaign.ids = IdentifierGen::from_counter(id_counter);
        for entry in &corpus {
            for &edge in &entry.discovered_edges {
                if campaign.state.global_edges.insert(edge) {
                    campaign
                        .state
                        .edge_discovery
                        .push((edge, entry.created_at));
                }
            }
        }
        campaign.state.corpus = corpus;
        let last = campaign.state.corpus.len() as u64 - 1;
        campaign.restore_entry(last)?;
        Ok(campaign)
    }

    fn bare(
        driver: &'d mut dyn Driver,
        cfg: Config,
        seed: u64,
    ) -> Result<Self, CampaignError> {
        let pool = driver.scan_builtins()?;
        let mut model = ContextModel::new();
        for base in pool.base_names() {
            let props: Vec<String> = pool
                .overrides_of(base)
                .iter()
                .map(|(n, _)| n.clone())
                .collect();
            model.seed_type_props(base, props);
        }
        let tokens = TypeTokens {
            int: driver.primitive_token(PrimitiveKind::Int),
            float: driver.primitive_token(PrimitiveKind::Float),
            bool: driver.primitive_token(PrimitiveKind::Bool),
            text: driver.primitive_token(PrimitiveKind::Text),
            raw: driver.primitive_token(PrimitiveKind::Raw),
        };
        Ok(Campaign {
            cfg,
            driver,
            state: CampaignState {
                no_edge_counter: 0,
                failed_decl_rounds: 0,
                corpus: Vec::new(),
                current: WorkingEntry::default(),
                global_edges: IndexSet::new(),
                edge_discovery: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            stats: CampaignStats::default(),
            events: Vec::new(),
            seed,
            ids: IdentifierGen::new(),
            model,
            pool,
            tokens,
            readback_names: Vec::new(),
            names_synced: 0,
            decl_pass_since_edge: false,
            crashed: None,
            crash_entry: None,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_edges(&self) -> u64 {
        self.state.global_edges.len() as u64
    }

    pub fn threshold(&self) -> u64 {
        stall_threshold(self.total_edges(), &self.cfg.mutation)
    }

    pub fn crashed(&self) -> Option<&str> {
        self.crashed.as_deref()
    }

    pub fn id_counter(&self) -> u64 {
        self.ids.counter()
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    fn emit(&mut self, event: Event) {
        self.events.push(event);
    }

    fn gen_state(&mut self) -> GenState<'_> {
        let used = count_scopes(&self.state.current.ast);
        GenState {
            cfg: &self.cfg,
            model: &mut self.model,
            pool: &self.pool,
            ids: &mut self.ids,
            rng: &mut self.state.rng,
            tokens: self.tokens,
            scope_budget: self.cfg.mutation.s_cap.saturating_sub(used),
        }
    }

    /// One scheduler iteration: either a stall-window action (declaration
    /// pass or fallback) or one generated execution line.
    pub fn step(&mut self) -> Result<(), CampaignError> {
        if self.crashed.is_some() {
            return Ok(());
        }
        if self.state.no_edge_counter >= self.threshold() {
            // The window that just closed belonged to a declaration round;
            // closing edge-less marks that round failed.
            if self.decl_pass_since_edge {
                self.state.failed_decl_rounds += 1;
                self.decl_pass_since_edge = false;
            }
            if self.state.failed_decl_rounds >= FALLBACK_FAILED_ROUNDS {
                self.fallback()?;
            } else if count_scopes(&self.state.current.ast) >= self.cfg.mutation.s_cap {
                // The tree cannot grow more dispatch surface; skip the pass
                // and enter fallback directly.
                self.fallback()?;
            } else {
                self.declaration_pass()?;
            }
            return Ok(());
        }
        self.execution_line()
    }

    /// Run until a stop condition is met or the target crashes.
    pub fn run(&mut self, stop: StopCondition) -> Result<CampaignSummary, CampaignError> {
        let started = Instant::now();
        loop {
            if self.crashed.is_some() {
                break;
            }
            if let Some(limit) = stop.max_lines {
                if self.stats.lines_executed >= limit {
                    break;
                }
            }
            if let Some(limit) = stop.max_time {
                if started.elapsed() >= limit {
                    break;
                }
            }
            self.step()?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> CampaignSummary {
        CampaignSummary {
            stats: self.stats.clone(),
            total_edges: self.total_edges(),
            corpus_size: self.state.corpus.len(),
            crashed: self.crashed.clone(),
        }
    }

    // -- line generation ----------------------------------------------------

    fn execution_line(&mut self) -> Result<(), CampaignError> {
        let mut ctx = std::mem::take(&mut self.state.current.ctx);
        let stmt = {
            let mut g = self.gen_state();
            gen_execution_line(&mut g, &mut ctx, false)
        };
        self.state.current.ctx = ctx;

        let Some(stmt) = stmt else {
            // No viable operands for any drawn kind: a generation skip is a
            // no-edge line for scheduling purposes.
            self.stats.generation_skips += 1;
            self.state.no_edge_counter += 1;
            let line_no = self.stats.lines_executed;
            self.emit(Event::Line {
                line_no,
                new_edges: 0,
                error: false,
                timed_out: false,
                skipped: true,
            });
            return Ok(());
        };

        let text = self.driver.serialize_stmt(StmtRef::Exec(&stmt))?;
        // The tree keeps the statement even if the line faults; history and
        // the interpreter state remain the source of truth for replay.
        self.state.current.ast.executions.push(stmt);
        #[cfg(debug_assertions)]
        self.validate_tree();

        match self.submit(&text, true)? {
            Submit::Completed { novel, ok } => {
                if ok && !novel.is_empty() {
                    self.admit_to_corpus(&novel);
                }
                Ok(())
            }
            Submit::TimedOut => self.handle_timeout(&text),
            Submit::Crashed => Ok(()),
        }
    }

    /// Submit one source chunk and fold its verdict into the campaign:
    /// novelty filtering, counter resets, passive reflection on errors,
    /// history append, active type read-back.
    fn submit(&mut self, text: &str, record_history: bool) -> Result<Submit, CampaignError> {
        let result = match self.driver.run_line(text, self.cfg.mutation.t_line) {
            Ok(result) => result,
            Err(DriverError::Dead(msg)) => {
                self.record_crash(text, &msg);
                return Ok(Submit::Crashed);
            }
            Err(other) => return Err(other.into()),
        };

        if result.timed_out {
            // Edge ids from a timed-out line are unreliable and discarded.
            self.stats.lines_executed += 1;
            self.state.no_edge_counter += 1;
            let line_no = self.stats.lines_executed;
            self.emit(Event::Line {
                line_no,
                new_edges: 0,
                error: false,
                timed_out: true,
                skipped: false,
            });
            return Ok(Submit::TimedOut);
        }

        self.stats.lines_executed += 1;
        let line_no = self.stats.lines_executed;

        let mut novel = Vec::new();
        for id in &result.new_edge_ids {
            if self.state.global_edges.insert(*id) {
                self.state.edge_discovery.push((*id, line_no));
                novel.push(*id);
            }
        }
        if novel.is_empty() {
            self.state.no_edge_counter += 1;
        } else {
            // Any line that discovers an edge resets the stall window and
            // clears the failed-round streak.
            self.state.no_edge_counter = 0;
            self.state.failed_decl_rounds = 0;
            self.decl_pass_since_edge = false;
            self.emit(Event::EdgesFound {
                line_no,
                ids: novel.clone(),
            });
        }

        let ok = result.error.is_none();
        if let Some(message) = &result.error {
            self.stats.errors += 1;
            if let Some(correction) = parse_error(message, self.driver.error_patterns()) {
                self.model.apply_correction(&correction);
            }
        } else if record_history {
            self.state.current.history.push(text.to_owned());
        }

        self.emit(Event::Line {
            line_no,
            new_edges: novel.len(),
            error: !ok,
            timed_out: false,
            skipped: false,
        });

        self.readback()?;
        Ok(Submit::Completed { novel, ok })
    }

    /// Active reflection after a completed line: re-read the runtime type of
    /// every in-scope variable.
    fn readback(&mut self) -> Result<(), CampaignError> {
        let ctx = &self.state.current.ctx;
        while self.names_synced < ctx.len() {
            let (name, record) = ctx.entry_at(self.names_synced).expect("index in range");
            if matches!(record.kind, BindingKind::Variable | BindingKind::Function) {
                self.readback_names.push(name.as_str().to_owned());
            }
            self.names_synced += 1;
        }
        readback_types_for(
            self.driver,
            &self.readback_names,
            &mut self.state.current.ctx,
        )?;
        Ok(())
    }

    fn record_crash(&mut self, text: &str, message: &str) {
        self.stats.crashes += 1;
        let line_no = self.stats.lines_executed;
        self.emit(Event::Crash {
            line_no,
            message: message.to_owned(),
        });
        let mut history = self.state.current.history.clone();
        history.push(text.to_owned());
        self.crash_entry = Some((self.state.current.ast.clone(), history));
        self.crashed = Some(format!("{message} (line: {text})"));
    }

    // -- declaration pass ---------------------------------------------------

    fn declaration_pass(&mut self) -> Result<(), CampaignError> {
        self.stats.declaration_passes += 1;
        self.state.no_edge_counter = 0;

        let mut ast = std::mem::take(&mut self.state.current.ast);
        let mut ctx = std::mem::take(&mut self.state.current.ctx);
        let (kind, outcome) = {
            let mut g = self.gen_state();
            let kind = g.cfg.decl_weights.pick(g.rng);
            let outcome = apply_declaration_mutation(kind, &mut ast, &mut g, &mut ctx);
            (kind, outcome)
        };
        self.state.current.ast = ast;
        self.state.current.ctx = ctx;
        #[cfg(debug_assertions)]
        self.validate_tree();

        let line_no = self.stats.lines_executed;
        self.emit(Event::DeclarationPass {
            line_no,
            kind,
            no_op: outcome.no_op,
        });

        if outcome.no_op || outcome.changed_decls.is_empty() {
            // Nothing submitted, nothing can be discovered: the round has
            // already failed.
            self.state.failed_decl_rounds += 1;
            self.decl_pass_since_edge = false;
            return Ok(());
        }

        let mut chunks = Vec::new();
        for idx in &outcome.changed_decls {
            let decl = &self.state.current.ast.declarations[*idx];
            chunks.push(self.driver.serialize_stmt(StmtRef::Decl(decl))?);
        }
        let block = chunks.join("\n");

        match self.submit(&block, true)? {
            Submit::Completed { novel, ok } => {
                if ok && !novel.is_empty() {
                    self.admit_to_corpus(&novel);
                }
                if !ok {
                    // Block submission error: the round counts as failed now.
                    self.state.failed_decl_rounds += 1;
                    self.decl_pass_since_edge = false;
                } else if novel.is_empty() {
                    self.decl_pass_since_edge = true;
                }
                // A block that found edges already reset the streak.
            }
            Submit::TimedOut => {
                self.state.failed_decl_rounds += 1;
                self.decl_pass_since_edge = false;
                self.handle_timeout(&block)?;
            }
            Submit::Crashed => {}
        }
        // The pass reset the window; make sure the submission's own counter
        // bump does not double-charge the fresh window.
        self.state.no_edge_counter = 0;
        Ok(())
    }

    /// Synthesize the blank entry: one declaration pass over the empty tree,
    /// admitted unconditionally as corpus entry 0.
    fn init_blank_entry(&mut self) -> Result<(), CampaignError> {
        self.declaration_pass()?;
        // The pass itself may have admitted an entry for the edges it found;
        // entry 0 must be the blank program, so admission order matters.
        if self.state.corpus.is_empty() {
            let entry = CorpusEntry {
                entry_id: 0,
                ast_snapshot: self.state.current.ast.clone(),
                line_history: self.state.current.history.clone(),
                seed: self.seed,
                discovered_edges: BTreeSet::new(),
                created_at: self.stats.lines_executed,
            };
            let line_no = self.stats.lines_executed;
            self.emit(Event::CorpusAdd {
                line_no,
                entry_id: 0,
                edge_count: 0,
            });
            self.state.corpus.push(entry);
        }
        self.state.failed_decl_rounds = 0;
        self.decl_pass_since_edge = false;
        Ok(())
    }

    fn admit_to_corpus(&mut self, novel: &[u32]) {
        let entry_id = self.state.corpus.len() as u64;
        let entry = CorpusEntry {
            entry_id,
            ast_snapshot: self.state.current.ast.clone(),
            line_history: self.state.current.history.clone(),
            seed: self.seed,
            discovered_edges: novel.iter().copied().collect(),
            created_at: self.stats.lines_executed,
        };
        self.state.corpus.push(entry);
        let line_no = self.stats.lines_executed;
        self.emit(Event::CorpusAdd {
            line_no,
            entry_id,
            edge_count: novel.len(),
        });
    }

    // -- fallback and timeout recovery ---------------------------------------

    /// Clear current generation state and restore the blank entry (with
    /// probability `w_startover`) or a uniformly random corpus entry.
    fn fallback(&mut self) -> Result<(), CampaignError> {
        self.stats.fallbacks += 1;
        let startover = self.state.rng.gen_bool(self.cfg.mutation.w_startover);
        let entry_id = if startover || self.state.corpus.len() <= 1 {
            0
        } else {
            self.state.rng.gen_range(0..self.state.corpus.len()) as u64
        };
        if startover {
            self.stats.startovers += 1;
        }
        let line_no = self.stats.lines_executed;
        self.emit(Event::Fallback {
            line_no,
            startover,
            entry_id,
        });
        self.restore_entry(entry_id)?;
        self.state.no_edge_counter = 0;
        self.state.failed_decl_rounds = 0;
        self.decl_pass_since_edge = false;
        Ok(())
    }

    /// Restart the interpreter and rebuild the working entry from a corpus
    /// snapshot, replaying its history to restore interpreter state.
    fn restore_entry(&mut self, entry_id: u64) -> Result<(), CampaignError> {
        let entry = &self.state.corpus[entry_id as usize];
        self.state.current = WorkingEntry {
            ast: entry.ast_snapshot.clone(),
            ctx: BindingContext::new(),
            history: entry.line_history.clone(),
        };
        self.driver.restart()?;
        let replay_ok = self.replay_history()?;
        if !replay_ok && entry_id != 0 {
            // A corpus entry that no longer replays is abandoned for the
            // blank entry.
            return self.restore_entry(0);
        }
        let mut ctx = rebuild_context(
            &self.state.current.ast,
            &self.pool,
            &mut self.model,
        );
        // Read-back refreshes runtime types over the rebuilt skeleton.
        self.readback_names.clear();
        self.names_synced = 0;
        std::mem::swap(&mut self.state.current.ctx, &mut ctx);
        self.readback()?;
        Ok(())
    }

    /// Replay the current history under the aggregate budget. Any failed or
    /// timed-out replayed line abandons the session.
    fn replay_history(&mut self) -> Result<bool, CampaignError> {
        let budget = self.cfg.mutation.t_lines;
        let started = Instant::now();
        let history = self.state.current.history.clone();
        for line in &history {
            if started.elapsed() > budget {
                return Ok(false);
            }
            let result = match self.driver.run_line(line, self.cfg.mutation.t_line) {
                Ok(result) => result,
                Err(DriverError::Dead(msg)) => {
                    self.record_crash(line, &msg);
                    return Ok(false);
                }
                Err(other) => return Err(other.into()),
            };
            if result.timed_out || result.error.is_some() {
                return Ok(false);
            }
            // Previously unseen edges can surface on the real target during
            // replay; coverage stays monotone either way.
            for id in result.new_edge_ids {
                if self.state.global_edges.insert(id) {
                    self.state
                        .edge_discovery
                        .push((id, self.stats.lines_executed));
                }
            }
        }
        Ok(true)
    }

    /// The line at the tail of history just timed out: restart, replay the
    /// successful prefix, discard the timed-out line, resume generation.
    fn handle_timeout(&mut self, _timed_out_line: &str) -> Result<(), CampaignError> {
        self.stats.timeouts += 1;
        self.driver.restart()?;
        let replayed = self.state.current.history.len();
        let ok = self.replay_history()?;
        let line_no = self.stats.lines_executed;
        self.emit(Event::Timeout {
            line_no,
            replayed,
            abandoned: !ok,
        });
        if ok {
            // Refresh types: the fresh interpreter just replayed the prefix.
            self.readback()?;
            Ok(())
        } else {
            if self.crashed.is_some() {
                return Ok(());
            }
            self.fallback()
        }
    }

    #[cfg(debug_assertions)]
    fn validate_tree(&self) {
        if let Err(e) = crate::ast::validate(
            &self.state.current.ast,
            &self.pool,
            Some(self.cfg.mutation.s_cap),
        ) {
            panic!(
                "mutation broke well-formedness: {e}\n{}",
                crate::ast::canon::write_scope(&self.state.current.ast)
            );
        }
    }
}

/// Rebuild the binding skeleton for a restored snapshot: declarations and
/// execution destinations in order, import surfaces flattened, class
/// property pools seeded. Runtime types arrive with the next read-back.
pub fn rebuild_context(
    ast: &Scope,
    pool: &BuiltinPool,
    model: &mut ContextModel,
) -> BindingContext {
    let mut ctx = BindingContext::new();
    for decl in &ast.declarations {
        match decl {
            DeclarationStmt::Var(v) => {
                ctx.bind(v.name.clone(), BindingRecord::variable(None));
            }
            DeclarationStmt::Import(i) => {
                ctx.bind(i.module.clone(), BindingRecord::module());
                merge_module_members_into(i.module.as_str(), pool, model, &mut ctx);
            }
            DeclarationStmt::Class(c) => {
                let inherited: Vec<String> =
                    model.props(c.base.as_str()).map(str::to_owned).collect();
                model.seed_type_props(c.name.as_str(), inherited);
                for m in &c.methods {
                    model.add_type_prop(c.name.as_str(), m.name.as_str());
                }
                ctx.bind(c.name.clone(), BindingRecord::class(&c.name));
            }
            DeclarationStmt::Function(f) => {
                ctx.bind(
                    f.name.clone(),
                    BindingRecord::function(crate::ast::Signature::range(0, f.args.len())),
                );
            }
        }
    }
    for stmt in &ast.executions {
        if let Some(dst) = stmt.dst() {
            let record = match stmt {
                ExecutionStmt::NewInstance { class_name, .. } => {
                    BindingRecord::variable(Some(class_name.as_str().to_owned()))
                }
                _ => BindingRecord::variable(None),
            };
            ctx.bind(dst.clone(), record);
        }
    }
    ctx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{MockDriver, MockScript};

    fn mock_campaign(script: MockScript) -> (MockDriver, Config) {
        (MockDriver::new(script), Config::default())
    }

    #[test]
    fn threshold_reference_points() {
        let cfg = MutationConfig::default();
        assert_eq!(stall_threshold(0, &cfg), 100);
        assert_eq!(stall_threshold(12, &cfg), 200);
        assert_eq!(stall_threshold(60, &cfg), 300);
        assert_eq!(stall_threshold(1020, &cfg), 500);
        assert_eq!(stall_threshold(1 << 40, &cfg), 2000);
        assert_eq!(stall_threshold(u64::MAX, &cfg), 2000);
    }

    #[test]
    fn threshold_monotone_and_clamped() {
        let cfg = MutationConfig::default();
        let mut prev = 0;
        for n in (0..200_000u64).step_by(37) {
            let t = stall_threshold(n, &cfg);
            assert!(t >= prev);
            assert!((cfg.t_floor..=cfg.t_ceil).contains(&t));
            prev = t;
        }
    }

    #[test]
    fn blank_entry_is_corpus_entry_zero() {
        let (mut driver, cfg) = mock_campaign(MockScript::default());
        let campaign = Campaign::new(&mut driver, cfg, 1).unwrap();
        assert!(!campaign.state.corpus.is_empty());
        assert_eq!(campaign.state.corpus[0].entry_id, 0);
        // The blank program came from a real declaration pass.
        assert!(!campaign.state.corpus[0].ast_snapshot.declarations.is_empty());
    }

    #[test]
    fn plateau_drives_pass_after_exactly_one_window() {
        let (mut driver, cfg) = mock_campaign(
            MockScript {
                plateau_after: Some(0),
                ..MockScript::default()
            });
        let mut campaign = Campaign::new(&mut driver, cfg, 2).unwrap();
        campaign.drain_events();
        // N stays 0, so the window is exactly t_floor = 100 trials.
        loop {
            campaign.step().unwrap();
            let events = campaign.drain_events();
            let mut done = false;
            for e in &events {
                if matches!(e, Event::DeclarationPass { .. }) {
                    done = true;
                }
            }
            if done {
                break;
            }
        }
        assert_eq!(campaign.stats.declaration_passes, 2); // init pass + this one
        assert_eq!(
            campaign.stats.lines_executed - 1 + campaign.stats.generation_skips,
            100,
            "exactly 100 no-edge trials before the pass (minus the init block)"
        );
    }

    #[test]
    fn five_failed_rounds_then_fallback() {
        let (mut driver, cfg) = mock_campaign(
            MockScript {
                plateau_after: Some(0),
                ..MockScript::default()
            });
        let mut campaign = Campaign::new(&mut driver, cfg, 3).unwrap();
        campaign.drain_events();
        let mut passes = 0;
        let mut fell_back = false;
        for _ in 0..10_000 {
            campaign.step().unwrap();
            for e in campaign.drain_events() {
                match e {
                    Event::DeclarationPass { .. } => {
                        assert!(!fell_back, "no pass after the first fallback in this run");
                        passes += 1;
                    }
                    Event::Fallback { .. } => {
                        fell_back = true;
                    }
                    _ => {}
                }
            }
            if fell_back {
                break;
            }
        }
        assert!(fell_back, "plateau must reach fallback");
        assert_eq!(passes, 5, "exactly five failed declaration rounds first");
    }

    #[test]
    fn scope_cap_blocks_pass_and_goes_straight_to_fallback() {
        let (mut driver, mut cfg) = mock_campaign(
            MockScript {
                plateau_after: Some(0),
                ..MockScript::default()
            });
        cfg.mutation.s_cap = 1; // the root scope alone is already at cap
        let mut campaign = Campaign::new(&mut driver, cfg, 4).unwrap();
        campaign.drain_events();
        let passes_before = campaign.stats.declaration_passes;
        let mut fell_back = false;
        for _ in 0..400 {
            campaign.step().unwrap();
            for e in campaign.drain_events() {
                if matches!(e, Event::Fallback { .. }) {
                    fell_back = true;
                }
            }
            if fell_back {
                break;
            }
        }
        assert!(fell_back);
        assert_eq!(
            campaign.stats.declaration_passes, passes_before,
            "cap skips declaration mutation entirely"
        );
    }

    #[test]
    fn startover_rate_matches_probability() {
        let (mut driver, cfg) = mock_campaign(MockScript::default());
        let mut campaign = Campaign::new(&mut driver, cfg, 5).unwrap();
        // Earn a few corpus entries first so fallback has real choices.
        for _ in 0..300 {
            campaign.step().unwrap();
        }
        assert!(campaign.state.corpus.len() > 1);
        let mut startovers = 0u32;
        const N: u32 = 10_000;
        for _ in 0..N {
            campaign.fallback().unwrap();
            if campaign
                .drain_events()
                .iter()
                .any(|e| matches!(e, Event::Fallback { startover: true, .. }))
            {
                startovers += 1;
            }
        }
        let rate = 100.0 * startovers as f64 / N as f64;
        assert!((rate - 10.0).abs() <= 1.0, "startover rate {rate}%");
    }

    #[test]
    fn corpus_admission_requires_new_edges_and_is_sound() {
        let (mut driver, cfg) = mock_campaign(MockScript::default());
        let mut campaign = Campaign::new(&mut driver, cfg, 6).unwrap();
        let mut seen = IndexSet::new();
        seen.extend(campaign.state.corpus[0].discovered_edges.iter().copied());
        for _ in 0..2000 {
            campaign.step().unwrap();
        }
        for entry in &campaign.state.corpus[1..] {
            assert!(!entry.discovered_edges.is_empty());
            for edge in &entry.discovered_edges {
                assert!(
                    seen.insert(*edge),
                    "edge {edge} was already global before admission"
                );
            }
        }
        // Coverage is monotone: discovery order ids are unique.
        let unique: IndexSet<u32> = campaign
            .state
            .edge_discovery
            .iter()
            .map(|&(id, _)| id)
            .collect();
        assert_eq!(unique.len(), campaign.state.edge_discovery.len());
    }

    #[test]
    fn timeout_recovery_replays_prefix_and_preserves_bindings() {
        // Submission 45 (counted across the campaign, init block included)
        // is scripted to exceed the line budget.
        let (mut driver, cfg) = mock_campaign(MockScript {
            timeout_at: vec![45],
            ..MockScript::default()
        });
        let mut campaign = Campaign::new(&mut driver, cfg, 7).unwrap();

        let mut names_before: Vec<String> = Vec::new();
        let mut history_before = 0usize;
        while campaign.stats.timeouts == 0 {
            names_before = campaign
                .state
                .current
                .ctx
                .names()
                .map(|n| n.as_str().to_owned())
                .collect();
            history_before = campaign.state.current.history.len();
            campaign.step().unwrap();
        }
        assert!(history_before > 0, "timeout hit mid-session");

        let events = campaign.drain_events();
        let timeout_event = events
            .iter()
            .find_map(|e| match e {
                Event::Timeout {
                    replayed,
                    abandoned,
                    ..
                } => Some((*replayed, *abandoned)),
                _ => None,
            })
            .expect("timeout event");
        assert_eq!(
            timeout_event,
            (history_before, false),
            "full prefix replayed, session kept"
        );
        // The timed-out line was discarded: history unchanged, generation
        // resumes at the next line.
        assert_eq!(campaign.state.current.history.len(), history_before);
        campaign.step().unwrap();
        // Binding set after replay covers everything the prefix had bound.
        for name in names_before {
            assert!(
                campaign.state.current.ctx.contains(&name),
                "binding {name} lost in replay"
            );
        }
    }

    #[test]
    fn crash_records_line_and_stops_campaign() {
        let (mut driver, cfg) = mock_campaign(
            MockScript {
                crash_at: Some(3),
                ..MockScript::default()
            });
        let mut campaign = Campaign::new(&mut driver, cfg, 8).unwrap();
        let summary = campaign
            .run(StopCondition {
                max_lines: Some(10_000),
                ..StopCondition::default()
            })
            .unwrap();
        assert!(summary.crashed.is_some());
        assert!(campaign.crash_entry.is_some());
        let (_, history) = campaign.crash_entry.as_ref().unwrap();
        assert!(!history.is_empty(), "crashing line recorded");
    }

    #[test]
    fn identical_seeds_reproduce_identical_event_streams() {
        let run = |seed: u64| {
            let (mut driver, cfg) = mock_campaign(MockScript::default());
            let mut campaign = Campaign::new(&mut driver, cfg, seed).unwrap();
            campaign
                .run(StopCondition {
                    max_lines: Some(3_000),
                    ..StopCondition::default()
                })
                .unwrap();
            (
                campaign.drain_events(),
                campaign.state.current.history.clone(),
                campaign.summary(),
            )
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let c = run(43);
        assert_ne!(a.1, c.1, "different seeds diverge");
    }
}
