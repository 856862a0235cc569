//! Semantic feedback: the context model that constrains generation, the four
//! permanent corrections derived from interpreter error messages (passive
//! reflection), and runtime type read-back plus the startup built-in scan
//! (active reflection).

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use regex::Regex;

use crate::ast::{BinaryOperator, BindingContext, BindingKind, Signature, UnaryOperator};
use crate::ast::validate::BuiltinView;
use crate::driver::{Driver, DriverError};

/// An operator as the context model keys it: either side of the split enum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpRef {
    Binary(BinaryOperator),
    Unary(UnaryOperator),
}

impl OpRef {
    pub fn name(self) -> &'static str {
        match self {
            OpRef::Binary(op) => op.name(),
            OpRef::Unary(op) => op.name(),
        }
    }
}

/// Reflection-maintained generation constraints. Constraint sets only shrink
/// (denials accumulate, properties are evicted) or take point updates
/// (signatures); nothing is ever reverted within a session.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContextModel {
    /// (operator, type) pairs proven invalid. Absence means allowed.
    op_denials: BTreeSet<(OpRef, String)>,
    /// Known property names per type, already minus evictions.
    type_props: BTreeMap<String, BTreeSet<String>>,
    /// Signature corrections keyed by bare function name; these shadow
    /// whatever the binding context recorded for any call site of that name.
    func_signatures: BTreeMap<String, Signature>,
}

impl ContextModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_op_allowed(&self, op: OpRef, type_name: &str) -> bool {
        !self.op_denials.contains(&(op, type_name.to_owned()))
    }

    /// Cheap pre-check without allocating when the denial set is empty.
    pub fn has_denials(&self) -> bool {
        !self.op_denials.is_empty()
    }

    pub fn seed_type_props<I, S>(&mut self, type_name: &str, props: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.type_props
            .entry(type_name.to_owned())
            .or_default()
            .extend(props.into_iter().map(Into::into));
    }

    pub fn add_type_prop(&mut self, type_name: &str, prop: &str) {
        self.type_props
            .entry(type_name.to_owned())
            .or_default()
            .insert(prop.to_owned());
    }

    pub fn props(&self, type_name: &str) -> impl Iterator<Item = &str> {
        self.type_props
            .get(type_name)
            .into_iter()
            .flat_map(|set| set.iter().map(String::as_str))
    }

    pub fn prop_count(&self, type_name: &str) -> usize {
        self.type_props.get(type_name).map_or(0, BTreeSet::len)
    }

    pub fn signature_override(&self, func: &str) -> Option<&Signature> {
        self.func_signatures.get(func)
    }

    /// Apply one targeted correction. Idempotent: replaying a correction
    /// leaves the model unchanged.
    pub fn apply_correction(&mut self, c: &Correction) {
        match c {
            Correction::RemoveOpType { op, type_name } => {
                self.op_denials.insert((*op, type_name.clone()));
            }
            Correction::EvictProperty { type_name, prop } => {
                if let Some(props) = self.type_props.get_mut(type_name) {
                    props.remove(prop);
                }
            }
            Correction::FixParamType {
                func,
                position,
                type_name,
            } => {
                let sig = self
                    .func_signatures
                    .entry(func.clone())
                    .or_insert_with(|| Signature::exact(*position));
                // Messages count positions from 1.
                sig.set_param(position.saturating_sub(1), type_name.clone());
            }
            Correction::FixArity { func, min, max } => {
                let sig = self
                    .func_signatures
                    .entry(func.clone())
                    .or_insert_with(|| Signature::range(*min, *max));
                sig.set_arity(*min, *max);
            }
        }
    }
}

/// The four targeted corrections passive reflection can derive from a
/// runtime error message. The set is closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Correction {
    RemoveOpType { op: OpRef, type_name: String },
    EvictProperty { type_name: String, prop: String },
    FixParamType {
        func: String,
        /// 1-based, as interpreters report it.
        position: usize,
        type_name: String,
    },
    FixArity { func: String, min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionKind {
    RemoveOpType,
    EvictProperty,
    FixParamType,
    FixArity,
}

impl CorrectionKind {
    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "remove_op_type" => Some(CorrectionKind::RemoveOpType),
            "evict_property" => Some(CorrectionKind::EvictProperty),
            "fix_param_type" => Some(CorrectionKind::FixParamType),
            "fix_arity" => Some(CorrectionKind::FixArity),
            _ => None,
        }
    }
}

/// Maps a driver's surface operator tokens back to internal operators so
/// error messages like `bad operand type for unary ~` resolve to `BitNot`.
#[derive(Debug, Clone, Default)]
pub struct OpTokenMap {
    unary: Vec<(String, UnaryOperator)>,
    binary: Vec<(String, BinaryOperator)>,
}

impl OpTokenMap {
    pub fn add_unary(&mut self, token: &str, op: UnaryOperator) {
        self.unary.push((token.to_owned(), op));
    }

    pub fn add_binary(&mut self, token: &str, op: BinaryOperator) {
        self.binary.push((token.to_owned(), op));
    }

    fn resolve(&self, class: &str, token: &str) -> Option<OpRef> {
        match class {
            "unary" => UnaryOperator::from_name(token)
                .or_else(|| {
                    self.unary
                        .iter()
                        .find(|(t, _)| t == token)
                        .map(|&(_, op)| op)
                })
                .map(OpRef::Unary),
            "binary" => BinaryOperator::from_name(token)
                .or_else(|| {
                    self.binary
                        .iter()
                        .find(|(t, _)| t == token)
                        .map(|&(_, op)| op)
                })
                .map(OpRef::Binary),
            _ => None,
        }
    }
}

/// One recognizer: a regex over error text plus a template that builds the
/// correction from its captures.
#[derive(Debug, Clone)]
pub struct ErrorPattern {
    regex: Regex,
    kind: CorrectionKind,
    fields: Vec<(String, String)>,
}

/// Ordered recognizer list for one driver; first match wins.
#[derive(Debug, Clone, Default)]
pub struct ErrorPatternSet {
    patterns: Vec<ErrorPattern>,
    op_tokens: OpTokenMap,
}

impl ErrorPatternSet {
    /// Parse the per-driver pattern data: one entry per line, tab-separated
    /// `pattern`, `template` (semicolon-joined `field=$n` pairs), and the
    /// correction kind tag. `#` comments and blank lines are skipped.
    pub fn parse(text: &str, op_tokens: OpTokenMap) -> Result<Self, PatternError> {
        let mut patterns = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t').filter(|p| !p.is_empty());
            let (pattern, template, tag) = match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(t), Some(k)) => (p, t, k),
                _ => return Err(PatternError::BadLine(idx + 1)),
            };
            let regex = Regex::new(pattern).map_err(|e| PatternError::BadRegex(idx + 1, e))?;
            let kind =
                CorrectionKind::from_tag(tag.trim()).ok_or(PatternError::BadKind(idx + 1))?;
            let mut fields = Vec::new();
            for pair in template.split(';') {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or(PatternError::BadLine(idx + 1))?;
                fields.push((k.trim().to_owned(), v.trim().to_owned()));
            }
            patterns.push(ErrorPattern {
                regex,
                kind,
                fields,
            });
        }
        Ok(ErrorPatternSet {
            patterns,
            op_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("pattern file line {0} is malformed")]
    BadLine(usize),
    #[error("pattern file line {0}: bad regex: {1}")]
    BadRegex(usize, regex::Error),
    #[error("pattern file line {0}: unknown correction kind")]
    BadKind(usize),
}

/// Map an interpreter error message onto a correction. `None` means
/// unrecognized, which by contract leaves the model untouched.
pub fn parse_error(message: &str, patterns: &ErrorPatternSet) -> Option<Correction> {
    for pattern in &patterns.patterns {
        let Some(caps) = pattern.regex.captures(message) else {
            continue;
        };
        let field = |name: &str| -> Option<String> {
            let template = pattern
                .fields
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v.as_str())?;
            let mut out = String::new();
            let mut chars = template.chars().peekable();
            while let Some(c) = chars.next() {
                if c == '$' {
                    let mut num = String::new();
                    while chars.peek().is_some_and(|d| d.is_ascii_digit()) {
                        num.push(chars.next().unwrap());
                    }
                    let idx: usize = num.parse().ok()?;
                    out.push_str(caps.get(idx)?.as_str());
                } else {
                    out.push(c);
                }
            }
            Some(out)
        };
        let built: Option<Correction> = (|| match pattern.kind {
            CorrectionKind::RemoveOpType => {
                let class = field("op_class")?;
                let token = field("op")?;
                let type_name = field("type")?;
                patterns
                    .op_tokens
                    .resolve(&class, &token)
                    .map(|op| Correction::RemoveOpType { op, type_name })
            }
            CorrectionKind::EvictProperty => Some(Correction::EvictProperty {
                type_name: field("type")?,
                prop: field("prop")?,
            }),
            CorrectionKind::FixParamType => {
                let position = field("pos")?.parse().ok()?;
                Some(Correction::FixParamType {
                    func: field("func")?,
                    position,
                    type_name: field("type")?,
                })
            }
            CorrectionKind::FixArity => {
                let min: usize = field("min")?.parse().ok()?;
                let max: usize = field("max")?.parse().ok()?;
                if min > max {
                    return None;
                }
                Some(Correction::FixArity {
                    func: field("func")?,
                    min,
                    max,
                })
            }
        })();
        // A matched pattern with unusable captures falls through to the
        // next recognizer rather than poisoning the model.
        if built.is_some() {
            return built;
        }
    }
    None
}

// ---------------------------------------------------------------------------
// built-in pool
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MemberKind {
    Function(Signature),
    Constant(String),
    /// A class exported by a module; its override surface lives in
    /// `BuiltinPool::overrideables` under the class name.
    Class,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleMember {
    pub name: String,
    pub kind: MemberKind,
}

/// What the startup scan discovered: importable modules with their members,
/// and the override entry points per base type or library class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuiltinPool {
    pub modules: IndexMap<String, Vec<ModuleMember>>,
    pub overrideables: IndexMap<String, Vec<(String, Signature)>>,
}

impl BuiltinPool {
    pub fn base_names(&self) -> impl Iterator<Item = &str> {
        self.overrideables.keys().map(String::as_str)
    }

    pub fn overrides_of(&self, base: &str) -> &[(String, Signature)] {
        self.overrideables
            .get(base)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Structured text export, also used as the SCAN wire payload.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (module, members) in &self.modules {
            out.push_str(&format!("module {module}\n"));
            for m in members {
                match &m.kind {
                    MemberKind::Function(sig) => {
                        out.push_str(&format!(
                            "func {module} {} {}\n",
                            m.name,
                            render_sig(sig)
                        ));
                    }
                    MemberKind::Constant(ty) => {
                        out.push_str(&format!("const {module} {} {ty}\n", m.name));
                    }
                    MemberKind::Class => {
                        out.push_str(&format!("class {module} {}\n", m.name));
                    }
                }
            }
        }
        for (base, methods) in &self.overrideables {
            out.push_str(&format!("base {base}\n"));
            for (name, sig) in methods {
                out.push_str(&format!("override {base} {name} {}\n", render_sig(sig)));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PatternError> {
        let mut pool = BuiltinPool::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = || PatternError::BadLine(idx + 1);
            match toks.as_slice() {
                ["module", name] => {
                    pool.modules.entry((*name).to_owned()).or_default();
                }
                ["func", module, name, rest @ ..] => {
                    let sig = parse_sig(rest).ok_or_else(bad)?;
                    pool.modules
                        .entry((*module).to_owned())
                        .or_default()
                        .push(ModuleMember {
                            name: (*name).to_owned(),
                            kind: MemberKind::Function(sig),
                        });
                }
                ["const", module, name, ty] => {
                    pool.modules
                        .entry((*module).to_owned())
                        .or_default()
                        .push(ModuleMember {
                            name: (*name).to_owned(),
                            kind: MemberKind::Constant((*ty).to_owned()),
                        });
                }
                ["class", module, name] => {
                    pool.modules
                        .entry((*module).to_owned())
                        .or_default()
                        .push(ModuleMember {
                            name: (*name).to_owned(),
                            kind: MemberKind::Class,
                        });
                }
                ["base", name] => {
                    pool.overrideables.entry((*name).to_owned()).or_default();
                }
                ["override", base, name, rest @ ..] => {
                    let sig = parse_sig(rest).ok_or_else(bad)?;
                    pool.overrideables
                        .entry((*base).to_owned())
                        .or_default()
                        .push(((*name).to_owned(), sig));
                }
                _ => return Err(bad()),
            }
        }
        Ok(pool)
    }
}

impl BuiltinView for BuiltinPool {
    fn module_member_names(&self, module: &str) -> Vec<String> {
        self.modules
            .get(module)
            .map(|members| members.iter().map(|m| m.name.clone()).collect())
            .unwrap_or_default()
    }

    fn is_base_type(&self, name: &str) -> bool {
        self.overrideables.contains_key(name)
    }
}

fn render_sig(sig: &Signature) -> String {
    let mut s = format!("{} {}", sig.min_arity(), sig.max_arity());
    for p in sig.params() {
        s.push(' ');
        s.push_str(p.as_deref().unwrap_or("?"));
    }
    s
}

fn parse_sig(tokens: &[&str]) -> Option<Signature> {
    let min: usize = tokens.first()?.parse().ok()?;
    let max: usize = tokens.get(1)?.parse().ok()?;
    if min > max {
        return None;
    }
    let rest = &tokens[2..];
    if rest.is_empty() {
        return Some(Signature::range(min, max));
    }
    if rest.len() != max {
        return None;
    }
    let params = rest
        .iter()
        .map(|t| (*t != "?").then(|| (*t).to_owned()))
        .collect();
    Some(Signature::with_params(min, params))
}

// ---------------------------------------------------------------------------
// active reflection
// ---------------------------------------------------------------------------

/// Read the runtime type of every in-scope variable back into the binding
/// table and promote bindings the target reports as callable. `names` is the
/// query list (callers on the hot path keep it incrementally updated).
pub fn readback_types_for(
    driver: &mut dyn Driver,
    names: &[String],
    ctx: &mut BindingContext,
) -> Result<(), DriverError> {
    if names.is_empty() {
        return Ok(());
    }
    let mut updates: Vec<(usize, Option<String>)> = Vec::new();
    driver.query_types_into(names, &mut |idx, ty| {
        let Some(record) = ctx.resolve(&names[idx]) else {
            return;
        };
        if record.type_name.as_deref() != ty {
            updates.push((idx, ty.map(str::to_owned)));
        }
    })?;
    for (idx, ty) in updates {
        let promote = ty.as_deref().is_some_and(|t| driver.is_callable_type(t));
        if let Some(record) = ctx.resolve_mut(&names[idx]) {
            record.type_name = ty;
            if promote && record.kind == BindingKind::Variable {
                record.kind = BindingKind::Function;
                if record.signature.is_none() {
                    record.signature = Some(Signature::range(0, 2));
                }
            }
        }
    }
    Ok(())
}

/// Full-sweep variant matching the per-operation contract: queries every
/// in-scope variable binding.
pub fn readback_types(
    driver: &mut dyn Driver,
    ctx: &mut BindingContext,
) -> Result<(), DriverError> {
    let names: Vec<String> = ctx
        .iter()
        .filter(|(_, r)| r.kind == BindingKind::Variable || r.kind == BindingKind::Function)
        .map(|(n, _)| n.as_str().to_owned())
        .collect();
    readback_types_for(driver, &names, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpython_style_patterns() -> ErrorPatternSet {
        let mut ops = OpTokenMap::default();
        ops.add_unary("~", UnaryOperator::BitNot);
        ops.add_unary("-", UnaryOperator::Neg);
        ops.add_binary("+", BinaryOperator::Add);
        ErrorPatternSet::parse(
            "bad operand type for unary (\\S+): '([^']+)'\top_class=unary;op=$1;type=$2\tremove_op_type\n\
             unsupported operand type\\(s\\) for (\\S+): '([^']+)' and '([^']+)'\top_class=binary;op=$1;type=$2\tremove_op_type\n\
             '([^']+)' object has no attribute '([^']+)'\ttype=$1;prop=$2\tevict_property\n\
             (\\w+)\\(\\) argument (\\d+) must be (\\w+), not\tfunc=$1;pos=$2;type=$3\tfix_param_type\n\
             (\\w+)\\(\\) takes from (\\d+) to (\\d+) positional arguments\tfunc=$1;min=$2;max=$3\tfix_arity\n",
            ops,
        )
        .unwrap()
    }

    #[test]
    fn reference_messages_map_to_exact_corrections() {
        let pats = cpython_style_patterns();
        assert_eq!(
            parse_error("bad operand type for unary ~: 'str'", &pats),
            Some(Correction::RemoveOpType {
                op: OpRef::Unary(UnaryOperator::BitNot),
                type_name: "str".into()
            })
        );
        assert_eq!(
            parse_error("'dict' object has no attribute 'find'", &pats),
            Some(Correction::EvictProperty {
                type_name: "dict".into(),
                prop: "find".into()
            })
        );
        assert_eq!(
            parse_error("replace() argument 1 must be str, not None", &pats),
            Some(Correction::FixParamType {
                func: "replace".into(),
                position: 1,
                type_name: "str".into()
            })
        );
        assert_eq!(
            parse_error(
                "iter() takes from 1 to 2 positional arguments but 0 were given",
                &pats
            ),
            Some(Correction::FixArity {
                func: "iter".into(),
                min: 1,
                max: 2
            })
        );
    }

    #[test]
    fn unrecognized_message_leaves_model_identical() {
        let pats = cpython_style_patterns();
        let mut model = ContextModel::new();
        model.seed_type_props("bytes", ["rstrip", "find"]);
        let before = model.clone();
        assert_eq!(parse_error("maximum recursion depth exceeded", &pats), None);
        assert_eq!(model, before);
    }

    #[test]
    fn corrections_are_idempotent_and_permanent() {
        let mut model = ContextModel::new();
        model.seed_type_props("dict", ["items", "find"]);
        let evict = Correction::EvictProperty {
            type_name: "dict".into(),
            prop: "find".into(),
        };
        model.apply_correction(&evict);
        let once = model.clone();
        model.apply_correction(&evict);
        assert_eq!(model, once);
        assert!(model.props("dict").all(|p| p != "find"));

        let deny = Correction::RemoveOpType {
            op: OpRef::Unary(UnaryOperator::BitNot),
            type_name: "str".into(),
        };
        assert!(model.is_op_allowed(OpRef::Unary(UnaryOperator::BitNot), "str"));
        model.apply_correction(&deny);
        assert!(!model.is_op_allowed(OpRef::Unary(UnaryOperator::BitNot), "str"));
    }

    #[test]
    fn contradictory_param_messages_last_writer_wins() {
        let mut model = ContextModel::new();
        model.apply_correction(&Correction::FixParamType {
            func: "replace".into(),
            position: 1,
            type_name: "str".into(),
        });
        model.apply_correction(&Correction::FixParamType {
            func: "replace".into(),
            position: 1,
            type_name: "bytes".into(),
        });
        assert_eq!(
            model.signature_override("replace").unwrap().param(0),
            Some("bytes")
        );
    }

    #[test]
    fn fix_arity_resizes_signature() {
        let mut model = ContextModel::new();
        model.apply_correction(&Correction::FixArity {
            func: "iter".into(),
            min: 1,
            max: 2,
        });
        let sig = model.signature_override("iter").unwrap();
        assert_eq!((sig.min_arity(), sig.max_arity()), (1, 2));
        assert_eq!(sig.params().len(), 2);
    }

    #[test]
    fn pool_text_round_trips() {
        let mut pool = BuiltinPool::default();
        pool.modules.insert(
            "math".into(),
            vec![
                ModuleMember {
                    name: "sin".into(),
                    kind: MemberKind::Function(Signature::with_params(
                        1,
                        vec![Some("float".into())],
                    )),
                },
                ModuleMember {
                    name: "pi".into(),
                    kind: MemberKind::Constant("float".into()),
                },
            ],
        );
        pool.overrideables.insert(
            "bytes".into(),
            vec![
                ("rstrip".into(), Signature::exact(2)),
                ("__getitem__".into(), Signature::range(2, 2)),
            ],
        );
        let text = pool.to_text();
        let parsed = BuiltinPool::from_text(&text).unwrap();
        assert_eq!(parsed, pool);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn binary_op_token_resolution() {
        let pats = cpython_style_patterns();
        assert_eq!(
            parse_error(
                "unsupported operand type(s) for +: 'dict' and 'int'",
                &pats
            ),
            Some(Correction::RemoveOpType {
                op: OpRef::Binary(BinaryOperator::Add),
                type_name: "dict".into()
            })
        );
    }
}
