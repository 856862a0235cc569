//! Target encapsulation: everything language-specific sits behind this
//! module's `Driver` trait — serialization to the target's surface syntax,
//! stateful line execution with coverage deltas, the type read-back adapter,
//! and the per-target error-pattern set.

use std::path::Path;
use std::time::Duration;

use crate::ast::{DeclarationStmt, ExecutionStmt, PrimitiveKind, Scope};
use crate::reflection::{BuiltinPool, ErrorPatternSet};

pub mod lua;
pub mod mock;
pub mod proto;
pub mod subprocess;

pub use mock::{MockDriver, MockScript};

/// Verdict for one submitted line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LineResult {
    /// Edge ids first reported in this campaign by this submission. Unreliable
    /// and discarded when `timed_out` is set.
    pub new_edge_ids: Vec<u32>,
    pub error: Option<String>,
    pub timed_out: bool,
}

impl LineResult {
    pub fn ok(&self) -> bool {
        !self.timed_out && self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Embedded,
    Subprocess,
}

/// Registration record for one target driver.
#[derive(Debug, Clone)]
pub struct DriverDescriptor {
    pub name: String,
    pub transport: Transport,
    /// Command line for subprocess transports; empty for embedded ones.
    pub command: Vec<String>,
    /// Path of the error-pattern data, `<builtin>` when compiled in.
    pub pattern_path: String,
    pub enabled_modules: Vec<String>,
    /// File extension for saved corpus sources.
    pub extension: String,
}

/// Either statement family, for the single serialization entry point.
#[derive(Debug, Clone, Copy)]
pub enum StmtRef<'a> {
    Exec(&'a ExecutionStmt),
    Decl(&'a DeclarationStmt),
}

pub trait Driver {
    fn descriptor(&self) -> &DriverDescriptor;

    /// Lower one statement into a source line (or block, for declarations
    /// that carry bodies) the target parser accepts.
    fn serialize_stmt(&self, stmt: StmtRef<'_>) -> Result<String, DriverError>;

    /// Emit the declaration block for a scope: imports, variables, classes
    /// with their override methods, capture preambles included.
    fn serialize_scope(&self, scope: &Scope) -> Result<String, DriverError>;

    /// Execute one submission statefully. Bindings persist across calls until
    /// `restart`. The returned edge ids are novel relative to the campaign's
    /// global guard state.
    fn run_line(&mut self, text: &str, budget: Duration) -> Result<LineResult, DriverError>;

    /// Fresh interpreter state. Campaign-relative guard bookkeeping survives
    /// so edge novelty stays monotone across restarts.
    fn restart(&mut self) -> Result<(), DriverError>;

    /// Batched runtime type query; calls `sink(index, type)` for each name.
    fn query_types_into(
        &mut self,
        names: &[String],
        sink: &mut dyn FnMut(usize, Option<&str>),
    ) -> Result<(), DriverError>;

    fn query_type(&mut self, name: &str) -> Result<Option<String>, DriverError> {
        let names = [name.to_owned()];
        let mut found = None;
        self.query_types_into(&names, &mut |_, ty| found = ty.map(str::to_owned))?;
        Ok(found)
    }

    /// Startup scan of built-in modules and override entry points.
    fn scan_builtins(&mut self) -> Result<BuiltinPool, DriverError>;

    /// The target's type token for each primitive constant kind.
    fn primitive_token(&self, kind: PrimitiveKind) -> &'static str;

    /// Whether a read-back type token denotes something callable.
    fn is_callable_type(&self, token: &str) -> bool;

    /// The driver's error-pattern set for passive reflection.
    fn error_patterns(&self) -> &ErrorPatternSet;
}

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("construct not supported by target {target}: {what}")]
    Unsupported { target: String, what: String },
    #[error("driver transport is dead: {0}")]
    Dead(String),
    #[error("driver spawn failed: {0}")]
    Spawn(String),
    #[error("instrumentation fault: guard index {0} out of range")]
    InstrumentationFault(usize),
    #[error("malformed driver descriptor: {0}")]
    BadDescriptor(String),
    #[error("wire protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Guard slots per Snippet-style pc-guard instrumentation: init hands out
/// sequential positive ids, a fired guard is counted once and zeroed.
#[derive(Debug, Clone, Default)]
pub struct GuardTable {
    guards: Vec<u32>,
    next_id: u32,
    edge_count: u64,
}

impl GuardTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assign distinct ids 1..=count. A second call on an already-numbered
    /// table returns without renumbering, as does an empty range.
    pub fn init(&mut self, count: usize) {
        if count == 0 || self.guards.first().is_some_and(|&g| g != 0) {
            return;
        }
        self.guards = (0..count)
            .map(|_| {
                self.next_id += 1;
                self.next_id
            })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.guards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.guards.is_empty()
    }

    pub fn id_at(&self, index: usize) -> Option<u32> {
        self.guards.get(index).copied()
    }

    /// Total edges counted so far.
    pub fn edge_count(&self) -> u64 {
        self.edge_count
    }

    /// Fire one guard: counted exactly once, then the slot is zero forever.
    /// Returns the guard's id when this fire was the counting one.
    pub fn record_edge(&mut self, index: usize) -> Result<Option<u32>, DriverError> {
        let slot = self
            .guards
            .get_mut(index)
            .ok_or(DriverError::InstrumentationFault(index))?;
        if *slot == 0 {
            return Ok(None);
        }
        let id = *slot;
        *slot = 0;
        self.edge_count += 1;
        Ok(Some(id))
    }
}

/// Parse a `.driver` registration file: line-oriented `key = value` with
/// keys `name`, `syntax`, `transport`, `command`, `patterns`, `modules`,
/// `extension`.
pub fn parse_descriptor_file(text: &str) -> Result<(DriverDescriptor, String), DriverError> {
    let mut name = None;
    let mut syntax = None;
    let mut transport = None;
    let mut command = Vec::new();
    let mut patterns = String::from("<builtin>");
    let mut modules = Vec::new();
    let mut extension = None;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DriverError::BadDescriptor(format!("bad line {line:?}")))?;
        let v = v.trim();
        match k.trim() {
            "name" => name = Some(v.to_owned()),
            "syntax" => syntax = Some(v.to_owned()),
            "transport" => {
                transport = Some(match v {
                    "embedded" => Transport::Embedded,
                    "subprocess" => Transport::Subprocess,
                    other => {
                        return Err(DriverError::BadDescriptor(format!(
                            "unknown transport {other:?}"
                        )))
                    }
                })
            }
            "command" => command = v.split_whitespace().map(str::to_owned).collect(),
            "patterns" => patterns = v.to_owned(),
            "modules" => modules = v.split(',').map(|m| m.trim().to_owned()).collect(),
            "extension" => extension = Some(v.to_owned()),
            other => {
                return Err(DriverError::BadDescriptor(format!(
                    "unknown key {other:?}"
                )))
            }
        }
    }
    let name = name.ok_or_else(|| DriverError::BadDescriptor("missing name".into()))?;
    let syntax = syntax.unwrap_or_else(|| name.clone());
    let desc = DriverDescriptor {
        name,
        transport: transport.unwrap_or(Transport::Subprocess),
        command,
        pattern_path: patterns,
        enabled_modules: modules,
        extension: extension.unwrap_or_else(|| "txt".to_owned()),
    };
    Ok((desc, syntax))
}

/// Build a driver from a target name or a `.driver` descriptor path.
pub fn build_driver(
    target: &str,
    line_budget: Duration,
) -> Result<Box<dyn Driver>, DriverError> {
    if target == "mock" {
        return Ok(Box::new(MockDriver::new(MockScript::default())));
    }
    if target == "lua" {
        return Ok(Box::new(lua::LuaDriver::spawn_default(line_budget)?));
    }
    let path = Path::new(target);
    if path.extension().is_some_and(|e| e == "driver") {
        let text = std::fs::read_to_string(path)?;
        let (desc, syntax) = parse_descriptor_file(&text)?;
        return match syntax.as_str() {
            "lua" => Ok(Box::new(lua::LuaDriver::spawn(desc)?)),
            "mock" => Ok(Box::new(MockDriver::with_descriptor(
                desc,
                MockScript::default(),
            ))),
            other => Err(DriverError::BadDescriptor(format!(
                "unknown syntax {other:?}"
            ))),
        };
    }
    Err(DriverError::BadDescriptor(format!(
        "unknown target {target:?}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_ids_are_sequential_and_single_count() {
        let mut table = GuardTable::new();
        table.init(8);
        assert_eq!(table.id_at(6), Some(7));

        // First fire counts and zeroes; the second contributes nothing.
        assert_eq!(table.record_edge(6).unwrap(), Some(7));
        assert_eq!(table.id_at(6), Some(0));
        assert_eq!(table.record_edge(6).unwrap(), None);
        assert_eq!(table.edge_count(), 1);
    }

    #[test]
    fn init_skips_already_numbered_range() {
        let mut table = GuardTable::new();
        table.init(4);
        table.record_edge(1).unwrap();
        table.init(4); // first slot still holds id 1: no renumbering
        assert_eq!(table.record_edge(1).unwrap(), None);
        assert_eq!(table.id_at(0), Some(1));
        table.init(0);
        assert_eq!(table.len(), 4);
    }

    #[test]
    fn out_of_range_guard_is_a_fault() {
        let mut table = GuardTable::new();
        table.init(2);
        assert!(matches!(
            table.record_edge(5),
            Err(DriverError::InstrumentationFault(5))
        ));
    }

    #[test]
    fn descriptor_file_round_trip() {
        let (desc, syntax) = parse_descriptor_file(
            "name = lua\n\
             syntax = lua\n\
             transport = subprocess\n\
             command = /bin/wrapper --line-budget-ms 500\n\
             patterns = <builtin>\n\
             modules = math, string\n\
             extension = lua\n",
        )
        .unwrap();
        assert_eq!(desc.name, "lua");
        assert_eq!(syntax, "lua");
        assert_eq!(desc.transport, Transport::Subprocess);
        assert_eq!(desc.command.len(), 3);
        assert_eq!(desc.enabled_modules, vec!["math", "string"]);
        assert!(parse_descriptor_file("syntax = x\n").is_err());
    }
}
