//! Engine configuration: mutation parameters, mutator weight tables, the
//! config-file loader, and the stable hash that binds saved corpus entries to
//! the exact configuration that produced them.

use std::fmt::Write as _;
use std::time::Duration;

use rand::RngCore;

use crate::mutation::{DeclKind, ExecKind};

/// How many consecutive failed declaration rounds trigger fallback.
pub const FALLBACK_FAILED_ROUNDS: u32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct MutationConfig {
    /// Minimum trials for execution generation without coverage.
    pub t_floor: u64,
    /// Maximum trials for execution generation without new coverage.
    pub t_ceil: u64,
    /// Maximum scope count in declaration mutation.
    pub s_cap: usize,
    /// Probability of starting over from the blank entry on fallback.
    pub w_startover: f64,
    /// Probability of respecting a type hint when sourcing an argument.
    pub w_respect_type: f64,
    /// Weights for feeding a non-const binding, a constant literal, or a
    /// call expression as a parameter.
    pub w_var: (u64, u64, u64),
    /// Single-line execution budget.
    pub t_line: Duration,
    /// Aggregate budget when replaying a line history.
    pub t_lines: Duration,
    /// Execution statements generated inside a fresh override body.
    pub override_body_stmts: usize,
    /// How many times a non-viable statement kind is redrawn before the line
    /// becomes a generation skip.
    pub resample_limit: u32,
    /// Havoc buffers draw their length uniformly from [0, this].
    pub havoc_max_len: usize,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            t_floor: 100,
            t_ceil: 2000,
            s_cap: 50,
            w_startover: 0.10,
            w_respect_type: 0.80,
            w_var: (9, 1, 6),
            t_line: Duration::from_millis(500),
            t_lines: Duration::from_millis(1000),
            override_body_stmts: 4,
            resample_limit: 8,
            havoc_max_len: 64,
        }
    }
}

/// Weighted choice table. One RNG draw per pick; entries keep their insertion
/// order so identical seeds reproduce identical sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable<K: Copy> {
    entries: Vec<(K, u64)>,
    total: u64,
}

impl<K: Copy + PartialEq> WeightTable<K> {
    pub fn new(entries: Vec<(K, u64)>) -> Result<Self, ConfigError> {
        if entries.is_empty() {
            return Err(ConfigError::EmptyWeightTable);
        }
        if entries.iter().any(|&(_, w)| w == 0) {
            return Err(ConfigError::ZeroWeight);
        }
        let total = entries.iter().map(|&(_, w)| w).sum();
        Ok(WeightTable { entries, total })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn weight(&self, key: K) -> Option<u64> {
        self.entries.iter().find(|&&(k, _)| k == key).map(|&(_, w)| w)
    }

    pub fn set_weight(&mut self, key: K, weight: u64) -> Result<(), ConfigError> {
        if weight == 0 {
            return Err(ConfigError::ZeroWeight);
        }
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = weight,
            None => self.entries.push((key, weight)),
        }
        self.total = self.entries.iter().map(|&(_, w)| w).sum();
        Ok(())
    }

    pub fn entries(&self) -> &[(K, u64)] {
        &self.entries
    }

    /// Weighted pick consuming exactly one RNG draw.
    pub fn pick(&self, rng: &mut impl RngCore) -> K {
        let mut x = rng.next_u64() % self.total;
        for &(k, w) in &self.entries {
            if x < w {
                return k;
            }
            x -= w;
        }
        unreachable!("weights sum to total");
    }
}

pub fn default_decl_weights() -> WeightTable<DeclKind> {
    WeightTable::new(vec![
        (DeclKind::AddFunction, 30),
        (DeclKind::AddVariable, 20),
        (DeclKind::AddClass, 12),
        (DeclKind::AddImport, 6),
    ])
    .expect("default table is valid")
}

pub fn default_exec_weights() -> WeightTable<ExecKind> {
    WeightTable::new(vec![
        (ExecKind::GetItem, 15),
        (ExecKind::SetItem, 15),
        (ExecKind::Call, 14),
        (ExecKind::SetProp, 13),
        (ExecKind::GetProp, 12),
        (ExecKind::NewInstance, 9),
        (ExecKind::BinaryOp, 2),
        (ExecKind::Return, 2),
        (ExecKind::UnaryOp, 1),
    ])
    .expect("default table is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub mutation: MutationConfig,
    pub decl_weights: WeightTable<DeclKind>,
    pub exec_weights: WeightTable<ExecKind>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mutation: MutationConfig::default(),
            decl_weights: default_decl_weights(),
            exec_weights: default_exec_weights(),
        }
    }
}

impl Config {
    /// Parse overrides from the line-oriented `key = value` format. Keys are
    /// the configuration symbol names plus the mutator names; durations take
    /// an `ms`/`s` suffix or a bare millisecond count.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(idx + 1, raw.to_owned()))?;
            self.apply_entry(key.trim(), value.trim())
                .map_err(|e| match e {
                    ConfigError::BadLine(..) => ConfigError::BadLine(idx + 1, raw.to_owned()),
                    other => other,
                })?;
        }
        self.validate()
    }

    fn apply_entry(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadLine(0, format!("{key} = {value}"));
        let m = &mut self.mutation;
        match key {
            "t_floor" => m.t_floor = value.parse().map_err(|_| bad())?,
            "t_ceil" => m.t_ceil = value.parse().map_err(|_| bad())?,
            "s_cap" => m.s_cap = value.parse().map_err(|_| bad())?,
            "w_startover" => m.w_startover = parse_probability(value).ok_or_else(bad)?,
            "w_respectType" => m.w_respect_type = parse_probability(value).ok_or_else(bad)?,
            "w_var" => {
                let mut parts = value.split(',').map(|p| p.trim().parse::<u64>());
                match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some(Ok(a)), Some(Ok(b)), Some(Ok(c)), None) => m.w_var = (a, b, c),
                    _ => return Err(bad()),
                }
            }
            "t_line" => m.t_line = parse_duration(value).ok_or_else(bad)?,
            "t_lines" => m.t_lines = parse_duration(value).ok_or_else(bad)?,
            "override_body_stmts" => m.override_body_stmts = value.parse().map_err(|_| bad())?,
            "resample_limit" => m.resample_limit = value.parse().map_err(|_| bad())?,
            "havoc_max_len" => m.havoc_max_len = value.parse().map_err(|_| bad())?,
            _ => {
                let weight: u64 = value.parse().map_err(|_| bad())?;
                if let Some(kind) = DeclKind::from_name(key) {
                    self.decl_weights.set_weight(kind, weight)?;
                } else if let Some(kind) = ExecKind::from_name(key) {
                    self.exec_weights.set_weight(kind, weight)?;
                } else {
                    return Err(ConfigError::UnknownKey(key.to_owned()));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.mutation;
        if m.t_floor > m.t_ceil {
            return Err(ConfigError::Invalid("t_floor exceeds t_ceil"));
        }
        if m.t_line > m.t_lines {
            return Err(ConfigError::Invalid("t_line exceeds t_lines"));
        }
        for p in [m.w_startover, m.w_respect_type] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid("probability outside [0, 1]"));
            }
        }
        if m.w_var.0 == 0 && m.w_var.1 == 0 && m.w_var.2 == 0 {
            return Err(ConfigError::Invalid("w_var weights all zero"));
        }
        Ok(())
    }

    /// Stable digest over every value that shapes generation, plus the target
    /// name. Saved entries refuse to load under a different hash.
    pub fn hash(&self, target: &str) -> u64 {
        let mut text = String::new();
        let m = &self.mutation;
        let _ = write!(
            text,
            "target={target};t_floor={};t_ceil={};s_cap={};w_startover={};w_respectType={};\
             w_var={},{},{};t_line={};t_lines={};body={};resample={};havoc={};",
            m.t_floor,
            m.t_ceil,
            m.s_cap,
            m.w_startover,
            m.w_respect_type,
            m.w_var.0,
            m.w_var.1,
            m.w_var.2,
            m.t_line.as_millis(),
            m.t_lines.as_millis(),
            m.override_body_stmts,
            m.resample_limit,
            m.havoc_max_len,
        );
        for (k, w) in self.decl_weights.entries() {
            let _ = write!(text, "{}={w};", k.name());
        }
        for (k, w) in self.exec_weights.entries() {
            let _ = write!(text, "{}={w};", k.name());
        }
        fnv1a(text.as_bytes())
    }
}

/// FNV-1a, hand-rolled so the digest is stable across toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

fn parse_probability(s: &str) -> Option<f64> {
    let v = if let Some(pct) = s.strip_suffix('%') {
        pct.trim().parse::<f64>().ok()? / 100.0
    } else {
        s.parse::<f64>().ok()?
    };
    (0.0..=1.0).contains(&v).then_some(v)
}

fn parse_duration(s: &str) -> Option<Duration> {
    if let Some(ms) = s.strip_suffix("ms") {
        return Some(Duration::from_millis(ms.trim().parse().ok()?));
    }
    if let Some(secs) = s.strip_suffix('s') {
        return Some(Duration::from_secs_f64(secs.trim().parse().ok()?));
    }
    Some(Duration::from_millis(s.parse().ok()?))
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("weight table is empty")]
    EmptyWeightTable,
    #[error("weights must be strictly positive")]
    ZeroWeight,
    #[error("config line {0} is malformed: {1}")]
    BadLine(usize, String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(&'static str),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let cfg = Config::default();
        assert_eq!(cfg.mutation.t_floor, 100);
        assert_eq!(cfg.mutation.t_ceil, 2000);
        assert_eq!(cfg.mutation.s_cap, 50);
        assert_eq!(cfg.mutation.w_startover, 0.10);
        assert_eq!(cfg.mutation.w_respect_type, 0.80);
        assert_eq!(cfg.mutation.w_var, (9, 1, 6));
        assert_eq!(cfg.mutation.t_line, Duration::from_millis(500));
        assert_eq!(cfg.mutation.t_lines, Duration::from_millis(1000));

        assert_eq!(cfg.decl_weights.total(), 68);
        assert_eq!(cfg.decl_weights.weight(DeclKind::AddFunction), Some(30));
        assert_eq!(cfg.decl_weights.weight(DeclKind::AddVariable), Some(20));
        assert_eq!(cfg.decl_weights.weight(DeclKind::AddClass), Some(12));
        assert_eq!(cfg.decl_weights.weight(DeclKind::AddImport), Some(6));

        assert_eq!(cfg.exec_weights.total(), 83);
        assert_eq!(cfg.exec_weights.weight(ExecKind::GetItem), Some(15));
        assert_eq!(cfg.exec_weights.weight(ExecKind::UnaryOp), Some(1));
    }

    #[test]
    fn file_overrides_symbols_and_weights() {
        let mut cfg = Config::default();
        cfg.apply_file(
            "# tuning\n\
             t_floor = 10\n\
             t_ceil = 40\n\
             w_startover = 25%\n\
             w_var = 1, 1, 2\n\
             t_line = 50ms\n\
             t_lines = 2s\n\
             AddFunction = 7\n\
             GetItem = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.mutation.t_floor, 10);
        assert_eq!(cfg.mutation.t_ceil, 40);
        assert_eq!(cfg.mutation.w_startover, 0.25);
        assert_eq!(cfg.mutation.w_var, (1, 1, 2));
        assert_eq!(cfg.mutation.t_line, Duration::from_millis(50));
        assert_eq!(cfg.mutation.t_lines, Duration::from_secs(2));
        assert_eq!(cfg.decl_weights.weight(DeclKind::AddFunction), Some(7));
        assert_eq!(cfg.exec_weights.weight(ExecKind::GetItem), Some(99));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = Config::default();
        assert!(cfg.apply_file("t_floor = 500\nt_ceil = 100\n").is_err());
        let mut cfg = Config::default();
        assert!(cfg.apply_file("w_startover = 1.5\n").is_err());
        let mut cfg = Config::default();
        assert!(cfg.apply_file("AddClass = 0\n").is_err());
        let mut cfg = Config::default();
        assert!(cfg.apply_file("no_such_key = 3\n").is_err());
        assert!(WeightTable::<DeclKind>::new(vec![]).is_err());
    }

    #[test]
    fn config_hash_tracks_weights_and_target() {
        let cfg = Config::default();
        let base = cfg.hash("mock");
        assert_eq!(base, Config::default().hash("mock"));
        assert_ne!(base, cfg.hash("lua"));
        let mut tweaked = cfg.clone();
        tweaked.apply_file("AddImport = 7\n").unwrap();
        assert_ne!(base, tweaked.hash("mock"));
    }

    #[test]
    fn single_nonzero_weight_always_picked() {
        use rand::SeedableRng;
        let table = WeightTable::new(vec![(DeclKind::AddImport, 3)]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(table.pick(&mut rng), DeclKind::AddImport);
        }
    }
}
