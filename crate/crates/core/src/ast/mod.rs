//! Language-agnostic program tree shared by both mutation phases, plus the
//! binding table that maps every visible identifier to what is known about it.
//!
//! Programs are two-phase by construction: a scope carries declarations
//! (classes, override methods, variables, imports) that build up bindings, and
//! executions (calls, item/property access, operators, instantiations) that
//! dispatch through them. Nested scopes exist only as function bodies.

use std::borrow::Borrow;
use std::fmt;

use indexmap::IndexMap;
use rand::Rng;

pub mod canon;
pub mod validate;

pub use validate::{validate, ValidateError};

/// A token usable as a name in every supported target syntax.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Identifier(String);

impl Identifier {
    pub fn new(name: impl Into<String>) -> Result<Self, AstError> {
        let name = name.into();
        if is_valid_identifier(&name) {
            Ok(Identifier(name))
        } else {
            Err(AstError::BadIdentifier(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for Identifier {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// First character alphabetic or underscore, remainder alphanumeric or
/// underscore, nonempty.
pub fn is_valid_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Hands out session-unique names as `prefix + decimal counter`. The counter
/// is shared across prefixes, so two names can never collide even when their
/// prefixes differ.
#[derive(Debug, Clone, Default)]
pub struct IdentifierGen {
    counter: u64,
}

impl IdentifierGen {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resume from a persisted counter value.
    pub fn from_counter(counter: u64) -> Self {
        IdentifierGen { counter }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn fresh(&mut self, prefix: &str) -> Identifier {
        debug_assert!(is_valid_identifier(prefix), "bad prefix {prefix:?}");
        let id = Identifier(format!("{prefix}{}", self.counter));
        self.counter += 1;
        id
    }
}

/// A literal value carried by a variable declaration or fed inline as an
/// operand.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstantValue {
    Integer(i64),
    Float(f64),
    Boolean(bool),
    /// Byte sequence rendered as a string literal by the target serializer.
    Text(Vec<u8>),
    /// Byte sequence rendered as a bytes/buffer literal.
    Raw(Vec<u8>),
}

impl ConstantValue {
    pub fn primitive(&self) -> PrimitiveKind {
        match self {
            ConstantValue::Integer(_) => PrimitiveKind::Int,
            ConstantValue::Float(_) => PrimitiveKind::Float,
            ConstantValue::Boolean(_) => PrimitiveKind::Bool,
            ConstantValue::Text(_) => PrimitiveKind::Text,
            ConstantValue::Raw(_) => PrimitiveKind::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Int,
    Float,
    Bool,
    Text,
    Raw,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 5] = [
        PrimitiveKind::Int,
        PrimitiveKind::Float,
        PrimitiveKind::Bool,
        PrimitiveKind::Text,
        PrimitiveKind::Raw,
    ];
}

macro_rules! op_enum {
    ($name:ident { $($variant:ident => $tag:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $tag,)+
                }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s {
                    $($tag => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

op_enum!(BinaryOperator {
    Add => "Add",
    Sub => "Sub",
    Mul => "Mul",
    Div => "Div",
    Mod => "Mod",
    Pow => "Pow",
    Eq => "Eq",
    NotEq => "NotEq",
    Lt => "Lt",
    Gt => "Gt",
    LtE => "LtE",
    GtE => "GtE",
    BitAnd => "BitAnd",
    BitOr => "BitOr",
    BitXor => "BitXor",
    LShift => "LShift",
    RShift => "RShift",
});

op_enum!(UnaryOperator {
    Neg => "Neg",
    Not => "Not",
    BitNot => "BitNot",
});

/// An operand slot in an execution statement: a live binding, a nested call
/// expression, or an inline literal.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Ident(Identifier),
    Call(CallExpr),
    Const(ConstantValue),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallExpr {
    pub callee: Identifier,
    pub args: Vec<Operand>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeclarationStmt {
    Function(FunctionDecl),
    Class(ClassDecl),
    Var(VarDecl),
    Import(ImportDecl),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDecl {
    pub name: Identifier,
    pub args: Vec<Identifier>,
    pub body: Scope,
}

/// A class inheriting from a base drawn from the built-in/library pool or a
/// previously declared class. `nested` mirrors the schema but is never
/// generated (weight zero); `methods` hold the override hooks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDecl {
    pub name: Identifier,
    pub base: Identifier,
    pub nested: Vec<ClassDecl>,
    pub methods: Vec<FunctionDecl>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub name: Identifier,
    pub value: ConstantValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportDecl {
    pub module: Identifier,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionStmt {
    GetProp {
        dst: Identifier,
        obj: Identifier,
        /// Property name; restricted to `Operand::Ident` at generation time.
        attr: Operand,
    },
    SetProp {
        obj: Identifier,
        value: Operand,
        attr: Operand,
    },
    Call {
        dst: Identifier,
        callee: Identifier,
        args: Vec<Operand>,
    },
    Return {
        value: Option<Operand>,
    },
    Binary {
        dst: Identifier,
        lhs: Identifier,
        op: BinaryOperator,
        rhs: Identifier,
    },
    Unary {
        dst: Identifier,
        op: UnaryOperator,
        operand: Identifier,
    },
    NewInstance {
        dst: Identifier,
        class_name: Identifier,
        args: Vec<Operand>,
    },
    GetItem {
        dst: Identifier,
        obj: Identifier,
        idx: Operand,
    },
    SetItem {
        obj: Identifier,
        idx: Operand,
        value: Operand,
    },
}

impl ExecutionStmt {
    /// The freshly bound destination, when the statement has one.
    pub fn dst(&self) -> Option<&Identifier> {
        match self {
            ExecutionStmt::GetProp { dst, .. }
            | ExecutionStmt::Call { dst, .. }
            | ExecutionStmt::Binary { dst, .. }
            | ExecutionStmt::Unary { dst, .. }
            | ExecutionStmt::NewInstance { dst, .. }
            | ExecutionStmt::GetItem { dst, .. } => Some(dst),
            ExecutionStmt::SetProp { .. }
            | ExecutionStmt::Return { .. }
            | ExecutionStmt::SetItem { .. } => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ExecutionStmt::GetProp { .. } => "getprop",
            ExecutionStmt::SetProp { .. } => "setprop",
            ExecutionStmt::Call { .. } => "call",
            ExecutionStmt::Return { .. } => "return",
            ExecutionStmt::Binary { .. } => "binop",
            ExecutionStmt::Unary { .. } => "unop",
            ExecutionStmt::NewInstance { .. } => "new",
            ExecutionStmt::GetItem { .. } => "getitem",
            ExecutionStmt::SetItem { .. } => "setitem",
        }
    }
}

/// One lexical scope: captured outer names, the declarations built so far,
/// and the execution statements generated against them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scope {
    pub global_refs: Vec<Identifier>,
    pub declarations: Vec<DeclarationStmt>,
    pub executions: Vec<ExecutionStmt>,
}

impl Scope {
    pub fn is_empty(&self) -> bool {
        self.global_refs.is_empty() && self.declarations.is_empty() && self.executions.is_empty()
    }
}

/// Total scope count: the scope itself plus every function body reachable
/// through its declarations (class methods included, recursively).
pub fn count_scopes(root: &Scope) -> usize {
    fn class_scopes(class: &ClassDecl) -> usize {
        class.methods.iter().map(|m| count_scopes(&m.body)).sum::<usize>()
            + class.nested.iter().map(class_scopes).sum::<usize>()
    }
    1 + root
        .declarations
        .iter()
        .map(|d| match d {
            DeclarationStmt::Function(f) => count_scopes(&f.body),
            DeclarationStmt::Class(c) => class_scopes(c),
            DeclarationStmt::Var(_) | DeclarationStmt::Import(_) => 0,
        })
        .sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BindingKind {
    Class,
    Function,
    Variable,
    Module,
}

impl BindingKind {
    pub fn name(self) -> &'static str {
        match self {
            BindingKind::Class => "class",
            BindingKind::Function => "function",
            BindingKind::Variable => "variable",
            BindingKind::Module => "module",
        }
    }
}

/// Call shape of a function: per-position type hints plus the accepted arity
/// range. `params` always has `max_arity` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    params: Vec<Option<String>>,
    min_arity: usize,
    max_arity: usize,
}

impl Signature {
    pub fn exact(arity: usize) -> Self {
        Signature {
            params: vec![None; arity],
            min_arity: arity,
            max_arity: arity,
        }
    }

    pub fn range(min_arity: usize, max_arity: usize) -> Self {
        assert!(min_arity <= max_arity);
        Signature {
            params: vec![None; max_arity],
            min_arity,
            max_arity,
        }
    }

    pub fn with_params(min_arity: usize, params: Vec<Option<String>>) -> Self {
        assert!(min_arity <= params.len());
        Signature {
            min_arity,
            max_arity: params.len(),
            params,
        }
    }

    pub fn min_arity(&self) -> usize {
        self.min_arity
    }

    pub fn max_arity(&self) -> usize {
        self.max_arity
    }

    pub fn params(&self) -> &[Option<String>] {
        &self.params
    }

    pub fn param(&self, position: usize) -> Option<&str> {
        self.params.get(position).and_then(|p| p.as_deref())
    }

    /// Point-update one positional type hint, growing the signature when the
    /// reported position lies past the current arity.
    pub fn set_param(&mut self, position: usize, type_name: String) {
        if position >= self.params.len() {
            self.params.resize(position + 1, None);
            self.max_arity = self.params.len();
        }
        self.params[position] = Some(type_name);
    }

    /// Replace the arity range, keeping existing hints where they survive.
    pub fn set_arity(&mut self, min_arity: usize, max_arity: usize) {
        assert!(min_arity <= max_arity);
        self.min_arity = min_arity;
        self.max_arity = max_arity;
        self.params.resize(max_arity, None);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BindingRecord {
    pub kind: BindingKind,
    /// Most recent runtime type read-back, or the statically known type.
    pub type_name: Option<String>,
    pub signature: Option<Signature>,
}

impl BindingRecord {
    pub fn variable(type_name: Option<String>) -> Self {
        BindingRecord {
            kind: BindingKind::Variable,
            type_name,
            signature: None,
        }
    }

    pub fn function(signature: Signature) -> Self {
        BindingRecord {
            kind: BindingKind::Function,
            type_name: None,
            signature: Some(signature),
        }
    }

    pub fn class(name: &Identifier) -> Self {
        BindingRecord {
            kind: BindingKind::Class,
            type_name: Some(name.as_str().to_owned()),
            signature: None,
        }
    }

    pub fn module() -> Self {
        BindingRecord {
            kind: BindingKind::Module,
            type_name: None,
            signature: None,
        }
    }
}

/// Symbol table for the current generation point. Insertion order is
/// preserved so candidate sampling stays deterministic under a fixed seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BindingContext {
    entries: IndexMap<Identifier, BindingRecord>,
}

impl BindingContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: Identifier, record: BindingRecord) {
        self.entries.insert(name, record);
    }

    /// Lookup without mutation; absence is a value, not an error.
    pub fn resolve(&self, name: &str) -> Option<&BindingRecord> {
        self.entries.get(name)
    }

    pub fn resolve_mut(&mut self, name: &str) -> Option<&mut BindingRecord> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Identifier, &BindingRecord)> {
        self.entries.iter()
    }

    /// Positional access; bindings keep their insertion index for the
    /// session, which the incremental read-back sync relies on.
    pub fn entry_at(&self, index: usize) -> Option<(&Identifier, &BindingRecord)> {
        self.entries.get_index(index)
    }

    pub fn names(&self) -> impl Iterator<Item = &Identifier> {
        self.entries.keys()
    }
}

/// Sample the subset of outer bindings an inner function body may touch and
/// record it in the body's capture list. Generation inside the body restricts
/// non-local references to exactly this list, so the subset condition holds by
/// construction.
pub fn collect_global_refs(
    inner: &mut Scope,
    outer: &BindingContext,
    rng: &mut impl Rng,
) -> Vec<Identifier> {
    const CAPTURE_PROB: f64 = 0.25;
    const CAPTURE_CAP: usize = 16;

    let mut refs = Vec::new();
    for name in outer.names() {
        if refs.len() >= CAPTURE_CAP {
            break;
        }
        if rng.gen_bool(CAPTURE_PROB) {
            refs.push(name.clone());
        }
    }
    inner.global_refs = refs.clone();
    refs
}

#[derive(Debug, thiserror::Error)]
pub enum AstError {
    #[error("invalid identifier {0:?}")]
    BadIdentifier(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identifier_lexical_rules() {
        assert!(is_valid_identifier("z50"));
        assert!(is_valid_identifier("_use_args_"));
        assert!(!is_valid_identifier(""));
        assert!(!is_valid_identifier("9lives"));
        assert!(!is_valid_identifier("a.b"));
        assert!(Identifier::new("int_a").is_ok());
        assert!(Identifier::new("1bad").is_err());
    }

    #[test]
    fn fresh_identifier_renders_prefix_and_counter() {
        let mut gen = IdentifierGen::from_counter(50);
        assert_eq!(gen.fresh("z").as_str(), "z50");
        let mut gen = IdentifierGen::new();
        assert_eq!(gen.fresh("x").as_str(), "x0");
    }

    #[test]
    fn fresh_identifier_never_repeats() {
        let mut gen = IdentifierGen::new();
        let a = gen.fresh("v");
        let b = gen.fresh("v");
        assert_ne!(a, b);

        // Mixed prefixes stay unique too: the counter is session-global.
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            let prefix = ["v", "o", "ah", "v0"][i % 4];
            assert!(seen.insert(gen.fresh(prefix)));
        }
    }

    #[test]
    fn resolve_reflects_binding_kind() {
        let mut ctx = BindingContext::new();
        ctx.bind(
            Identifier::new("int_a").unwrap(),
            BindingRecord::variable(Some("int".into())),
        );
        ctx.bind(Identifier::new("math").unwrap(), BindingRecord::module());

        assert_eq!(ctx.resolve("int_a").unwrap().kind, BindingKind::Variable);
        assert_eq!(ctx.resolve("math").unwrap().kind, BindingKind::Module);
        assert!(ctx.resolve("never_bound").is_none());
    }

    fn method(name: &str, body: Scope) -> FunctionDecl {
        FunctionDecl {
            name: Identifier::new(name).unwrap(),
            args: vec![],
            body,
        }
    }

    #[test]
    fn count_scopes_blank_program() {
        assert_eq!(count_scopes(&Scope::default()), 1);
    }

    #[test]
    fn count_scopes_class_with_two_methods() {
        // Recursive hand count: root + two method bodies = 3.
        let class = ClassDecl {
            name: Identifier::new("aa0").unwrap(),
            base: Identifier::new("bytes").unwrap(),
            nested: vec![],
            methods: vec![method("rstrip", Scope::default()), method("removeprefix", Scope::default())],
        };
        let root = Scope {
            declarations: vec![DeclarationStmt::Class(class)],
            ..Scope::default()
        };
        assert_eq!(count_scopes(&root), 3);
    }

    #[test]
    fn count_scopes_sees_nested_function_bodies() {
        // A method whose body declares a nested function: root + method body
        // + nested body = 3, plus a sibling method = 4.
        let nested = FunctionDecl {
            name: Identifier::new("inner0").unwrap(),
            args: vec![],
            body: Scope::default(),
        };
        let body_with_nested = Scope {
            declarations: vec![DeclarationStmt::Function(nested)],
            ..Scope::default()
        };
        let class = ClassDecl {
            name: Identifier::new("aa0").unwrap(),
            base: Identifier::new("bytes").unwrap(),
            nested: vec![],
            methods: vec![method("rstrip", body_with_nested), method("find", Scope::default())],
        };
        let root = Scope {
            declarations: vec![DeclarationStmt::Class(class)],
            ..Scope::default()
        };
        assert_eq!(count_scopes(&root), 4);
    }

    #[test]
    fn global_refs_sample_is_subset_and_stored() {
        let mut ctx = BindingContext::new();
        for name in ["second", "_use_args_", "dict_a", "int_b"] {
            ctx.bind(
                Identifier::new(name).unwrap(),
                BindingRecord::variable(None),
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut inner = Scope::default();
        let refs = collect_global_refs(&mut inner, &ctx, &mut rng);
        assert_eq!(refs, inner.global_refs);
        for r in &refs {
            assert!(ctx.contains(r.as_str()));
        }
    }

    #[test]
    fn global_refs_empty_outer_context() {
        let ctx = BindingContext::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut inner = Scope::default();
        assert!(collect_global_refs(&mut inner, &ctx, &mut rng).is_empty());
    }

    #[test]
    fn signature_invariant_params_match_max_arity() {
        let mut sig = Signature::range(1, 2);
        assert_eq!(sig.params().len(), 2);
        sig.set_param(3, "str".into());
        assert_eq!(sig.max_arity(), 4);
        assert_eq!(sig.params().len(), 4);
        sig.set_arity(1, 2);
        assert_eq!(sig.params().len(), 2);
    }
}
