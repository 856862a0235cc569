//! Coverage-guided grammar fuzzer for script-language runtimes.
//!
//! Programs are generated as an internal tree in two phases: declarations
//! build classes whose methods override built-in hooks, and per-line
//! executions dispatch through them. A stall-threshold scheduler decides when
//! to re-mutate declarations, a corpus retains every program that discovered
//! new coverage edges, and active/passive reflection keeps generation close
//! to semantically valid without any target API specification.

pub mod ast;
pub mod cli;
pub mod config;
pub mod driver;
pub mod mutation;
pub mod persist;
pub mod reflection;
pub mod scheduler;
