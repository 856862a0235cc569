//! The two mutator families. Declaration mutators grow the binding surface
//! (classes with override methods, variables, imports); execution mutators
//! generate the per-line operations that dispatch through it. Everything is a
//! pure function of (tree, context, model, rng), so a fixed seed reproduces a
//! campaign exactly.

use indexmap::IndexSet;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::ast::{
    collect_global_refs, BindingContext, BindingKind, BindingRecord, CallExpr, ClassDecl,
    ConstantValue, DeclarationStmt, ExecutionStmt, FunctionDecl, Identifier, IdentifierGen,
    ImportDecl, Operand, PrimitiveKind, Scope, Signature, VarDecl,
};
use crate::ast::{BinaryOperator, UnaryOperator};
use crate::config::{Config, WeightTable};
use crate::reflection::{BuiltinPool, ContextModel, MemberKind, OpRef};

macro_rules! kind_enum {
    ($name:ident { $($variant:ident),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => stringify!($variant),)+
                }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s {
                    $(stringify!($variant) => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

kind_enum!(DeclKind {
    AddFunction,
    AddVariable,
    AddClass,
    AddImport,
});

kind_enum!(ExecKind {
    GetItem,
    SetItem,
    Call,
    SetProp,
    GetProp,
    NewInstance,
    BinaryOp,
    Return,
    UnaryOp,
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutatorKind {
    Decl(DeclKind),
    Exec(ExecKind),
}

/// Weighted mutator selection; consumes exactly one RNG draw.
pub fn select_mutator<K: Copy + PartialEq>(weights: &WeightTable<K>, rng: &mut impl RngCore) -> K {
    weights.pick(rng)
}

/// Random byte buffer with bit-level perturbations layered on top.
pub fn havoc(length: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut buf = vec![0u8; length];
    rng.fill_bytes(&mut buf);
    if length > 0 {
        let flips = rng.gen_range(0..=8u32);
        for _ in 0..flips {
            let byte = rng.gen_range(0..length);
            let bit = rng.gen_range(0..8u32);
            buf[byte] ^= 1 << bit;
        }
    }
    buf
}

/// Boundary-heavy integer mixture for interpreter value handling.
pub fn structured_int(rng: &mut impl Rng) -> i64 {
    match rng.gen_range(0..8u32) {
        0 => 0,
        1 => 1,
        2 => -1,
        3 => i64::MIN,
        4 => i64::MAX,
        5 => 1i64 << rng.gen_range(1..63u32),
        6 => {
            let base = 1i64 << rng.gen_range(1..63u32);
            if rng.gen_bool(0.5) {
                base.wrapping_add(1)
            } else {
                base.wrapping_sub(1)
            }
        }
        _ => rng.gen(),
    }
}

pub fn structured_float(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..8u32) {
        0 => 0.0,
        1 => 1.0,
        2 => -1.0,
        3 => 1e308,
        4 => -1e308,
        5 => 1e-308,
        _ => rng.gen_range(-1e6..1e6),
    }
}

/// The driver's type tokens for primitive constants, so statically known
/// types use the same vocabulary runtime read-back does.
#[derive(Debug, Clone, Copy)]
pub struct TypeTokens {
    pub int: &'static str,
    pub float: &'static str,
    pub bool: &'static str,
    pub text: &'static str,
    pub raw: &'static str,
}

impl TypeTokens {
    pub fn token(&self, kind: PrimitiveKind) -> &'static str {
        match kind {
            PrimitiveKind::Int => self.int,
            PrimitiveKind::Float => self.float,
            PrimitiveKind::Bool => self.bool,
            PrimitiveKind::Text => self.text,
            PrimitiveKind::Raw => self.raw,
        }
    }

    pub fn primitive(&self, token: &str) -> Option<PrimitiveKind> {
        // Targets may map several primitives onto one token; first match wins.
        for kind in PrimitiveKind::ALL {
            if self.token(kind) == token {
                return Some(kind);
            }
        }
        None
    }
}

/// Everything generation shares beyond the per-scope binding context.
pub struct GenState<'a> {
    pub cfg: &'a Config,
    pub model: &'a mut ContextModel,
    pub pool: &'a BuiltinPool,
    pub ids: &'a mut IdentifierGen,
    pub rng: &'a mut ChaCha8Rng,
    pub tokens: TypeTokens,
    /// How many more function bodies the tree may grow before hitting the
    /// scope cap.
    pub scope_budget: usize,
}

impl GenState<'_> {
    fn fresh(&mut self, pool: &[&str]) -> Identifier {
        let prefix = pool[self.rng.gen_range(0..pool.len())];
        self.ids.fresh(prefix)
    }

    fn fresh_result(&mut self) -> Identifier {
        self.fresh(&["ah", "l", "e", "z"])
    }

    fn gen_const(&mut self, kind: PrimitiveKind) -> ConstantValue {
        match kind {
            PrimitiveKind::Int => ConstantValue::Integer(structured_int(self.rng)),
            PrimitiveKind::Float => ConstantValue::Float(structured_float(self.rng)),
            PrimitiveKind::Bool => ConstantValue::Boolean(self.rng.gen_bool(0.5)),
            PrimitiveKind::Text => {
                let len = self.rng.gen_range(0..=self.cfg.mutation.havoc_max_len);
                ConstantValue::Text(havoc(len, self.rng))
            }
            PrimitiveKind::Raw => {
                let len = self.rng.gen_range(0..=self.cfg.mutation.havoc_max_len);
                ConstantValue::Raw(havoc(len, self.rng))
            }
        }
    }

    fn random_primitive(&mut self) -> PrimitiveKind {
        PrimitiveKind::ALL[self.rng.gen_range(0..PrimitiveKind::ALL.len())]
    }
}

// ---------------------------------------------------------------------------
// argument sourcing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArgCategory {
    NonConst,
    Const,
    FnCall,
}

/// Pick an operand for a parameter slot. Category odds follow `w_var`; when a
/// type hint is present the value honors it with probability
/// `w_respectType` and deliberately mismatches otherwise.
pub fn source_argument(
    expected: Option<&str>,
    g: &mut GenState<'_>,
    ctx: &BindingContext,
) -> Operand {
    let (w_nc, w_c, w_fc) = g.cfg.mutation.w_var;
    let total = w_nc + w_c + w_fc;
    let draw = g.rng.next_u64() % total;
    let category = if draw < w_nc {
        ArgCategory::NonConst
    } else if draw < w_nc + w_c {
        ArgCategory::Const
    } else {
        ArgCategory::FnCall
    };

    if category == ArgCategory::FnCall {
        if let Some(call) = gen_call_operand(g, ctx) {
            return Operand::Call(call);
        }
    }

    // Call results carry no recorded type, so the respect decision applies
    // to the value-bearing categories only.
    let respect = expected.map(|_| g.rng.gen_bool(g.cfg.mutation.w_respect_type));

    if category == ArgCategory::NonConst {
        let candidates: Vec<&Identifier> = ctx
            .iter()
            .filter(|(_, r)| r.kind == BindingKind::Variable)
            .filter(|(_, r)| match (expected, respect) {
                (Some(want), Some(true)) => r.type_name.as_deref() == Some(want),
                (Some(want), Some(false)) => {
                    r.type_name.is_some() && r.type_name.as_deref() != Some(want)
                }
                _ => true,
            })
            .map(|(n, _)| n)
            .collect();
        if !candidates.is_empty() {
            let pick = candidates[g.rng.gen_range(0..candidates.len())].clone();
            return Operand::Ident(pick);
        }
        // No viable binding in this category: fall back to a constant
        // literal that preserves the respect decision.
    }

    let kind = match (expected.and_then(|t| g.tokens.primitive(t)), respect) {
        (Some(want), Some(true)) => want,
        (Some(want), Some(false)) => {
            let mut k = g.random_primitive();
            while k == want {
                k = g.random_primitive();
            }
            k
        }
        _ => g.random_primitive(),
    };
    Operand::Const(g.gen_const(kind))
}

/// A call expression usable as an argument: known callable, signature-shaped
/// arity, identifier/constant arguments only (no further nesting).
fn gen_call_operand(g: &mut GenState<'_>, ctx: &BindingContext) -> Option<CallExpr> {
    let callables: Vec<&Identifier> = ctx
        .iter()
        .filter(|(_, r)| r.kind == BindingKind::Function)
        .map(|(n, _)| n)
        .collect();
    if callables.is_empty() {
        return None;
    }
    let callee = callables[g.rng.gen_range(0..callables.len())].clone();
    let sig = effective_signature(g.model, ctx, callee.as_str());
    let arity = g.rng.gen_range(sig.min_arity()..=sig.max_arity());
    let mut args = Vec::with_capacity(arity);
    for i in 0..arity {
        let expected = sig.param(i).map(str::to_owned);
        let variables: Vec<&Identifier> = ctx
            .iter()
            .filter(|(_, r)| r.kind == BindingKind::Variable)
            .filter(|(_, r)| match &expected {
                Some(want) => r.type_name.as_deref() == Some(want.as_str()),
                None => true,
            })
            .map(|(n, _)| n)
            .collect();
        if !variables.is_empty() {
            let pick = variables[g.rng.gen_range(0..variables.len())].clone();
            args.push(Operand::Ident(pick));
        } else {
            let kind = expected
                .as_deref()
                .and_then(|t| g.tokens.primitive(t))
                .unwrap_or_else(|| g.random_primitive());
            args.push(Operand::Const(g.gen_const(kind)));
        }
    }
    Some(CallExpr { callee, args })
}

/// The signature generation must honor for a callee: passive-reflection
/// corrections shadow whatever the binding recorded.
pub fn effective_signature(
    model: &ContextModel,
    ctx: &BindingContext,
    callee: &str,
) -> Signature {
    if let Some(sig) = model.signature_override(callee) {
        return sig.clone();
    }
    if let Some(sig) = ctx.resolve(callee).and_then(|r| r.signature.clone()) {
        return sig;
    }
    Signature::range(0, 2)
}

// ---------------------------------------------------------------------------
// execution mutators
// ---------------------------------------------------------------------------

/// Generate one statement of the requested kind, or `None` when the context
/// offers no viable operands for it.
pub fn gen_execution_stmt(
    kind: ExecKind,
    g: &mut GenState<'_>,
    ctx: &mut BindingContext,
    in_function: bool,
) -> Option<ExecutionStmt> {
    let stmt = match kind {
        ExecKind::GetItem => {
            let obj = pick_variable(g, ctx)?;
            let idx = source_argument(Some(g.tokens.int), g, ctx);
            ExecutionStmt::GetItem {
                dst: g.fresh_result(),
                obj,
                idx,
            }
        }
        ExecKind::SetItem => {
            let obj = pick_variable(g, ctx)?;
            let idx = source_argument(Some(g.tokens.int), g, ctx);
            let value = source_argument(None, g, ctx);
            ExecutionStmt::SetItem { obj, idx, value }
        }
        ExecKind::Call => {
            let callables: Vec<&Identifier> = ctx
                .iter()
                .filter(|(_, r)| r.kind == BindingKind::Function)
                .map(|(n, _)| n)
                .collect();
            if callables.is_empty() {
                return None;
            }
            let callee = callables[g.rng.gen_range(0..callables.len())].clone();
            let sig = effective_signature(g.model, ctx, callee.as_str());
            let arity = g.rng.gen_range(sig.min_arity()..=sig.max_arity());
            let mut args = Vec::with_capacity(arity);
            for i in 0..arity {
                let expected = sig.param(i).map(str::to_owned);
                args.push(source_argument(expected.as_deref(), g, ctx));
            }
            ExecutionStmt::Call {
                dst: g.fresh_result(),
                callee,
                args,
            }
        }
        ExecKind::SetProp => {
            let (obj, attr) = pick_prop_site(g, ctx)?;
            let value = source_argument(None, g, ctx);
            ExecutionStmt::SetProp {
                obj,
                value,
                attr: Operand::Ident(attr),
            }
        }
        ExecKind::GetProp => {
            let (obj, attr) = pick_prop_site(g, ctx)?;
            ExecutionStmt::GetProp {
                dst: g.fresh_result(),
                obj,
                attr: Operand::Ident(attr),
            }
        }
        ExecKind::NewInstance => {
            let classes: Vec<&Identifier> = ctx
                .iter()
                .filter(|(_, r)| r.kind == BindingKind::Class)
                .map(|(n, _)| n)
                .collect();
            if classes.is_empty() {
                return None;
            }
            let class_name = classes[g.rng.gen_range(0..classes.len())].clone();
            let arity = g.rng.gen_range(0..=2usize);
            let args = (0..arity).map(|_| source_argument(None, g, ctx)).collect();
            let dst = g.fresh(&["o", "q"]);
            ctx.bind(dst.clone(), {
                // Instance type is known statically; read-back confirms it.
                BindingRecord::variable(Some(class_name.as_str().to_owned()))
            });
            return Some(ExecutionStmt::NewInstance {
                dst,
                class_name,
                args,
            });
        }
        ExecKind::BinaryOp => {
            let mut found = None;
            for _ in 0..8 {
                let op = BinaryOperator::ALL[g.rng.gen_range(0..BinaryOperator::ALL.len())];
                let Some(lhs) = pick_variable(g, ctx) else {
                    return None;
                };
                let Some(rhs) = pick_variable(g, ctx) else {
                    return None;
                };
                if op_pair_allowed(g.model, OpRef::Binary(op), ctx, &lhs)
                    && op_pair_allowed(g.model, OpRef::Binary(op), ctx, &rhs)
                {
                    found = Some((op, lhs, rhs));
                    break;
                }
            }
            let (op, lhs, rhs) = found?;
            ExecutionStmt::Binary {
                dst: g.fresh_result(),
                lhs,
                op,
                rhs,
            }
        }
        ExecKind::UnaryOp => {
            let mut found = None;
            for _ in 0..8 {
                let op = UnaryOperator::ALL[g.rng.gen_range(0..UnaryOperator::ALL.len())];
                let Some(operand) = pick_variable(g, ctx) else {
                    return None;
                };
                if op_pair_allowed(g.model, OpRef::Unary(op), ctx, &operand) {
                    found = Some((op, operand));
                    break;
                }
            }
            let (op, operand) = found?;
            ExecutionStmt::Unary {
                dst: g.fresh_result(),
                op,
                operand,
            }
        }
        ExecKind::Return => {
            if !in_function {
                return None;
            }
            let value = if g.rng.gen_bool(0.5) {
                Some(source_argument(None, g, ctx))
            } else {
                None
            };
            return Some(ExecutionStmt::Return { value });
        }
    };
    if let Some(dst) = stmt.dst() {
        // Destination type is unknown until the next read-back.
        ctx.bind(dst.clone(), BindingRecord::variable(None));
    }
    Some(stmt)
}

/// Draw kinds from the weight table until one produces a statement; after
/// `resample_limit` misses the line becomes a generation skip.
pub fn gen_execution_line(
    g: &mut GenState<'_>,
    ctx: &mut BindingContext,
    in_function: bool,
) -> Option<ExecutionStmt> {
    for _ in 0..=g.cfg.mutation.resample_limit {
        let kind = g.cfg.exec_weights.pick(g.rng);
        if let Some(stmt) = gen_execution_stmt(kind, g, ctx, in_function) {
            return Some(stmt);
        }
    }
    None
}

fn pick_variable(g: &mut GenState<'_>, ctx: &BindingContext) -> Option<Identifier> {
    let candidates: Vec<&Identifier> = ctx
        .iter()
        .filter(|(_, r)| r.kind == BindingKind::Variable)
        .map(|(n, _)| n)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[g.rng.gen_range(0..candidates.len())].clone())
}

fn op_pair_allowed(
    model: &ContextModel,
    op: OpRef,
    ctx: &BindingContext,
    operand: &Identifier,
) -> bool {
    if !model.has_denials() {
        return true;
    }
    match ctx.resolve(operand.as_str()).and_then(|r| r.type_name.as_deref()) {
        Some(ty) => model.is_op_allowed(op, ty),
        None => true,
    }
}

/// An attribute access site: an object binding plus a property name from the
/// reflection-known surface of its type. Objects with an empty (or fully
/// evicted) property list are not candidates.
fn pick_prop_site(
    g: &mut GenState<'_>,
    ctx: &BindingContext,
) -> Option<(Identifier, Identifier)> {
    let candidates: Vec<(&Identifier, Vec<String>)> = ctx
        .iter()
        .filter_map(|(name, record)| {
            let props: Vec<String> = match record.kind {
                BindingKind::Module => g
                    .pool
                    .modules
                    .get(name.as_str())
                    .map(|members| members.iter().map(|m| m.name.clone()).collect())
                    .unwrap_or_default(),
                BindingKind::Class => g.model.props(name.as_str()).map(str::to_owned).collect(),
                BindingKind::Variable => match record.type_name.as_deref() {
                    Some(ty) => g.model.props(ty).map(str::to_owned).collect(),
                    None => Vec::new(),
                },
                BindingKind::Function => Vec::new(),
            };
            (!props.is_empty()).then_some((name, props))
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let (obj, props) = &candidates[g.rng.gen_range(0..candidates.len())];
    let prop = &props[g.rng.gen_range(0..props.len())];
    let attr = Identifier::new(prop.clone()).ok()?;
    Some(((*obj).clone(), attr))
}

// ---------------------------------------------------------------------------
// declaration mutators
// ---------------------------------------------------------------------------

/// What a declaration pass changed, for delta serialization: indices into the
/// mutated scope's declaration list that must be (re)submitted.
#[derive(Debug, Clone, Default)]
pub struct DeclOutcome {
    pub kind: Option<DeclKind>,
    pub changed_decls: Vec<usize>,
    /// Set when the mutator had nothing to do (e.g. import registry
    /// exhausted); the round is reported instead of silently dropped.
    pub no_op: bool,
}

/// Apply one weighted declaration mutation to `scope`, updating the binding
/// context alongside the tree.
pub fn apply_declaration_mutation(
    kind: DeclKind,
    scope: &mut Scope,
    g: &mut GenState<'_>,
    ctx: &mut BindingContext,
) -> DeclOutcome {
    match kind {
        DeclKind::AddVariable => {
            let prim = g.random_primitive();
            let prefix = match prim {
                PrimitiveKind::Int => "int_",
                PrimitiveKind::Float => "float_",
                PrimitiveKind::Bool => "bool_",
                PrimitiveKind::Text => "str_",
                PrimitiveKind::Raw => "byte_",
            };
            let name = g.ids.fresh(prefix);
            let value = g.gen_const(prim);
            ctx.bind(
                name.clone(),
                BindingRecord::variable(Some(g.tokens.token(prim).to_owned())),
            );
            scope
                .declarations
                .push(DeclarationStmt::Var(VarDecl { name, value }));
            DeclOutcome {
                kind: Some(DeclKind::AddVariable),
                changed_decls: vec![scope.declarations.len() - 1],
                no_op: false,
            }
        }
        DeclKind::AddImport => {
            let available: Vec<&String> = g
                .pool
                .modules
                .keys()
                .filter(|m| !ctx.contains(m.as_str()))
                .collect();
            if available.is_empty() {
                return DeclOutcome {
                    kind: Some(DeclKind::AddImport),
                    changed_decls: Vec::new(),
                    no_op: true,
                };
            }
            let module = available[g.rng.gen_range(0..available.len())].clone();
            let module_id = Identifier::new(module.clone()).expect("module names are identifiers");
            ctx.bind(module_id.clone(), BindingRecord::module());
            merge_module_members_into(&module, g.pool, g.model, ctx);
            scope
                .declarations
                .push(DeclarationStmt::Import(ImportDecl { module: module_id }));
            DeclOutcome {
                kind: Some(DeclKind::AddImport),
                changed_decls: vec![scope.declarations.len() - 1],
                no_op: false,
            }
        }
        DeclKind::AddClass => {
            let idx = add_class(scope, g, ctx);
            DeclOutcome {
                kind: Some(DeclKind::AddClass),
                changed_decls: idx.into_iter().collect(),
                no_op: false,
            }
        }
        DeclKind::AddFunction => {
            let changed = add_function(scope, g, ctx);
            DeclOutcome {
                kind: Some(DeclKind::AddFunction),
                changed_decls: changed.into_iter().collect(),
                no_op: false,
            }
        }
    }
}

/// Flatten an imported module's surface into a binding context, mirroring
/// how the serializers lower imports.
pub fn merge_module_members_into(
    module: &str,
    pool: &BuiltinPool,
    model: &mut ContextModel,
    ctx: &mut BindingContext,
) {
    let Some(members) = pool.modules.get(module) else {
        return;
    };
    for member in members {
        let Ok(name) = Identifier::new(member.name.clone()) else {
            continue;
        };
        match &member.kind {
            MemberKind::Function(sig) => ctx.bind(name, BindingRecord::function(sig.clone())),
            MemberKind::Constant(ty) => ctx.bind(name, BindingRecord::variable(Some(ty.clone()))),
            MemberKind::Class => {
                // Seed the class's override surface so instances of (and
                // subclasses built on) it have a property pool.
                let props: Vec<String> = pool
                    .overrides_of(&member.name)
                    .iter()
                    .map(|(n, _)| n.clone())
                    .collect();
                model.seed_type_props(&member.name, props);
                ctx.bind(name.clone(), BindingRecord::class(&name));
            }
        }
    }
}

/// Base candidates currently usable by AddClass: built-in bases plus classes
/// of modules that have been imported into this context.
fn available_bases(g: &GenState<'_>, ctx: &BindingContext) -> Vec<String> {
    let mut module_of: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for (module, members) in &g.pool.modules {
        for m in members {
            if matches!(m.kind, MemberKind::Class) {
                module_of.insert(m.name.as_str(), module.as_str());
            }
        }
    }
    g.pool
        .base_names()
        .filter(|base| match module_of.get(base) {
            Some(module) => ctx.contains(module),
            None => true,
        })
        .map(str::to_owned)
        .collect()
}

fn add_class(scope: &mut Scope, g: &mut GenState<'_>, ctx: &mut BindingContext) -> Option<usize> {
    let bases = available_bases(g, ctx);
    if bases.is_empty() {
        return None;
    }
    let base = bases[g.rng.gen_range(0..bases.len())].clone();
    let name = g.fresh(&["aa", "bb", "cc"]);
    // The subclass starts with its base's current property surface.
    let inherited: Vec<String> = g.model.props(&base).map(str::to_owned).collect();
    g.model.seed_type_props(name.as_str(), inherited);
    ctx.bind(name.clone(), BindingRecord::class(&name));
    scope.declarations.push(DeclarationStmt::Class(ClassDecl {
        name,
        base: Identifier::new(base).expect("base names are identifiers"),
        nested: Vec::new(),
        methods: Vec::new(),
    }));
    Some(scope.declarations.len() - 1)
}

/// Append an overriding method to a class drawn from all custom class nodes,
/// then recursively run one declaration mutation and a batch of execution
/// mutations inside the new body.
fn add_function(
    scope: &mut Scope,
    g: &mut GenState<'_>,
    ctx: &mut BindingContext,
) -> Option<usize> {
    if g.scope_budget == 0 {
        return None;
    }
    let mut ensured_idx = None;
    if count_class_sites(scope) == 0 {
        // The override needs a host: synthesize a class first.
        ensured_idx = add_class(scope, g, ctx);
        ensured_idx?;
    }

    let site_count = count_class_sites(scope);
    let target = g.rng.gen_range(0..site_count);

    // Everything the body needs is computed against the class's base before
    // taking the mutable path to the node.
    let (class_name, base) = class_site_info(scope, target)?;
    let overrides = g.pool.overrides_of(&base);
    if overrides.is_empty() {
        return None;
    }
    let existing = class_site_methods(scope, target)?;
    let unused: Vec<usize> = (0..overrides.len())
        .filter(|&i| !existing.iter().any(|m| m == &overrides[i].0))
        .collect();
    let pick = if unused.is_empty() {
        g.rng.gen_range(0..overrides.len())
    } else {
        unused[g.rng.gen_range(0..unused.len())]
    };
    let (method_name, sig) = overrides[pick].clone();
    let arity = g.rng.gen_range(sig.min_arity()..=sig.max_arity());
    let args: Vec<Identifier> = (0..arity).map(|_| g.ids.fresh("arg")).collect();

    g.scope_budget -= 1;
    let mut body = Scope::default();
    let captures = collect_global_refs(&mut body, ctx, g.rng);

    // The body generates against its own view: captured outers plus params.
    let mut body_ctx = BindingContext::new();
    for cap in &captures {
        if let Some(record) = ctx.resolve(cap.as_str()) {
            body_ctx.bind(cap.clone(), record.clone());
        }
    }
    for arg in &args {
        body_ctx.bind(arg.clone(), BindingRecord::variable(None));
    }

    // Declaration mutation first, then execution mutation, same weights as
    // the outer pass.
    let nested_kind = g.cfg.decl_weights.pick(g.rng);
    let viable = nested_kind != DeclKind::AddFunction || g.scope_budget > 0;
    if viable {
        apply_declaration_mutation(nested_kind, &mut body, g, &mut body_ctx);
    }
    for _ in 0..g.cfg.mutation.override_body_stmts {
        match gen_execution_line(g, &mut body_ctx, true) {
            Some(stmt) => {
                let is_return = matches!(stmt, ExecutionStmt::Return { .. });
                body.executions.push(stmt);
                if is_return {
                    break;
                }
            }
            None => break,
        }
    }

    g.model.add_type_prop(class_name.as_str(), method_name.as_str());
    let method = FunctionDecl {
        name: Identifier::new(method_name).expect("override names are identifiers"),
        args,
        body,
    };
    let root_idx = attach_method(scope, target, method)?;
    Some(ensured_idx.unwrap_or(root_idx))
}

// Class-site traversal: sites are numbered in tree order so one uniform draw
// picks among every custom class node, nested ones included.

fn count_class_sites(scope: &Scope) -> usize {
    fn in_class(c: &ClassDecl) -> usize {
        1 + c.nested.iter().map(in_class).sum::<usize>()
            + c
                .methods
                .iter()
                .map(|m| count_class_sites(&m.body))
                .sum::<usize>()
    }
    scope
        .declarations
        .iter()
        .map(|d| match d {
            DeclarationStmt::Class(c) => in_class(c),
            DeclarationStmt::Function(f) => count_class_sites(&f.body),
            _ => 0,
        })
        .sum()
}

fn class_site_info(scope: &Scope, target: usize) -> Option<(Identifier, String)> {
    fn visit_scope(scope: &Scope, n: &mut usize, target: usize) -> Option<(Identifier, String)> {
        for d in &scope.declarations {
            match d {
                DeclarationStmt::Class(c) => {
                    if let Some(hit) = visit_class(c, n, target) {
                        return Some(hit);
                    }
                }
                DeclarationStmt::Function(f) => {
                    if let Some(hit) = visit_scope(&f.body, n, target) {
                        return Some(hit);
                    }
                }
                _ => {}
            }
        }
        None
    }
    fn visit_class(c: &ClassDecl, n: &mut usize, target: usize) -> Option<(Identifier, String)> {
        if *n == target {
            return Some((c.name.clone(), c.base.as_str().to_owned()));
        }
        *n += 1;
        for nested in &c.nested {
            if let Some(hit) = visit_class(nested, n, target) {
                return Some(hit);
            }
        }
        for m in &c.methods {
            if let Some(hit) = visit_scope(&m.body, n, target) {
                return Some(hit);
            }
        }
        None
    }
    let mut n = 0;
    visit_scope(scope, &mut n, target)
}

fn class_site_methods(scope: &Scope, target: usize) -> Option<Vec<String>> {
    fn visit_scope(scope: &Scope, n: &mut usize, target: usize) -> Option<Vec<String>> {
        for d in &scope.declarations {
            match d {
                DeclarationStmt::Class(c) => {
                    if let Some(hit) = visit_class(c, n, target) {
                        return Some(hit);
                    }
                }
                DeclarationStmt::Function(f) => {
                    if let Some(hit) = visit_scope(&f.body, n, target) {
                        return Some(hit);
                    }
                }
                _ => {}
            }
        }
        None
    }
    fn visit_class(c: &ClassDecl, n: &mut usize, target: usize) -> Option<Vec<String>> {
        if *n == target {
            return Some(c.methods.iter().map(|m| m.name.as_str().to_owned()).collect());
        }
        *n += 1;
        for nested in &c.nested {
            if let Some(hit) = visit_class(nested, n, target) {
                return Some(hit);
            }
        }
        for m in &c.methods {
            if let Some(hit) = visit_scope(&m.body, n, target) {
                return Some(hit);
            }
        }
        None
    }
    let mut n = 0;
    visit_scope(scope, &mut n, target)
}

/// Attach the method to class site `target`, returning the index of the
/// top-level declaration that now needs re-serialization.
fn attach_method(scope: &mut Scope, target: usize, method: FunctionDecl) -> Option<usize> {
    fn visit_scope(scope: &mut Scope, n: &mut usize, target: usize, method: &mut Option<FunctionDecl>) -> bool {
        for d in scope.declarations.iter_mut() {
            match d {
                DeclarationStmt::Class(c) => {
                    if visit_class(c, n, target, method) {
                        return true;
                    }
                }
                DeclarationStmt::Function(f) => {
                    if visit_scope(&mut f.body, n, target, method) {
                        return true;
                    }
                }
                _ => {}
            }
        }
        false
    }
    fn visit_class(c: &mut ClassDecl, n: &mut usize, target: usize, method: &mut Option<FunctionDecl>) -> bool {
        if *n == target {
            c.methods.push(method.take().expect("method taken once"));
            return true;
        }
        *n += 1;
        for nested in c.nested.iter_mut() {
            if visit_class(nested, n, target, method) {
                return true;
            }
        }
        for m in c.methods.iter_mut() {
            if visit_scope(&mut m.body, n, target, method) {
                return true;
            }
        }
        false
    }

    // Single pass with a running counter; record which top-level declaration
    // contained the hit.
    let mut slot = Some(method);
    let mut n = 0;
    for (idx, d) in scope.declarations.iter_mut().enumerate() {
        let hit = match d {
            DeclarationStmt::Class(c) => visit_class(c, &mut n, target, &mut slot),
            DeclarationStmt::Function(f) => visit_scope(&mut f.body, &mut n, target, &mut slot),
            _ => false,
        };
        if hit {
            return Some(idx);
        }
    }
    None
}

/// Imported-set view used when rebuilding contexts from a snapshot.
pub fn imported_modules(ctx: &BindingContext) -> IndexSet<String> {
    ctx.iter()
        .filter(|(_, r)| r.kind == BindingKind::Module)
        .map(|(n, _)| n.as_str().to_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::validate::{validate, NoBuiltins};
    use crate::driver::mock;
    use rand::SeedableRng;

    fn mock_tokens() -> TypeTokens {
        TypeTokens {
            int: "int",
            float: "float",
            bool: "bool",
            text: "str",
            raw: "bytes",
        }
    }

    struct Harness {
        cfg: Config,
        model: ContextModel,
        pool: BuiltinPool,
        ids: IdentifierGen,
        rng: ChaCha8Rng,
    }

    impl Harness {
        fn new(seed: u64) -> Self {
            let pool = mock::fixture_pool();
            let mut model = ContextModel::new();
            for base in pool.base_names() {
                let props: Vec<String> = pool
                    .overrides_of(base)
                    .iter()
                    .map(|(n, _)| n.clone())
                    .collect();
                model.seed_type_props(base, props);
            }
            Harness {
                cfg: Config::default(),
                model,
                pool,
                ids: IdentifierGen::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }
        }

        fn gen(&mut self) -> GenState<'_> {
            GenState {
                cfg: &self.cfg,
                model: &mut self.model,
                pool: &self.pool,
                ids: &mut self.ids,
                rng: &mut self.rng,
                tokens: mock_tokens(),
                scope_budget: 49,
            }
        }
    }

    #[test]
    fn select_mutator_consumes_one_draw() {
        let cfg = Config::default();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        select_mutator(&cfg.decl_weights, &mut a);
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn havoc_is_deterministic_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(havoc(0, &mut rng).is_empty());
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(havoc(8, &mut r1), havoc(8, &mut r2));
        assert_eq!(havoc(64, &mut r1).len(), 64);
    }

    #[test]
    fn havoc_bits_are_near_uniform() {
        // Chi-square-style check computed here: per-bit set frequency over
        // 10k buffers of 64 bytes stays within 0.5 +/- 0.02.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0u32; 512];
        const N: usize = 10_000;
        for _ in 0..N {
            let buf = havoc(64, &mut rng);
            for (byte_idx, byte) in buf.iter().enumerate() {
                for bit in 0..8 {
                    if byte & (1 << bit) != 0 {
                        counts[byte_idx * 8 + bit] += 1;
                    }
                }
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / N as f64;
            assert!(
                (freq - 0.5).abs() <= 0.02,
                "bit {i} frequency {freq} out of tolerance"
            );
        }
    }

    #[test]
    fn empty_context_forces_constant_argument() {
        let mut h = Harness::new(11);
        let ctx = BindingContext::new();
        let mut g = h.gen();
        for _ in 0..50 {
            match source_argument(None, &mut g, &ctx) {
                Operand::Const(_) => {}
                other => panic!("expected constant, got {other:?}"),
            }
        }
    }

    #[test]
    fn argument_category_frequencies_follow_weights() {
        let mut h = Harness::new(13);
        let mut ctx = BindingContext::new();
        ctx.bind(
            Identifier::new("int_0").unwrap(),
            BindingRecord::variable(Some("int".into())),
        );
        ctx.bind(
            Identifier::new("sin").unwrap(),
            BindingRecord::function(Signature::exact(1)),
        );
        let mut g = h.gen();
        let (mut nc, mut c, mut fc) = (0u32, 0u32, 0u32);
        const N: u32 = 160_000;
        for _ in 0..N {
            match source_argument(None, &mut g, &ctx) {
                Operand::Ident(_) => nc += 1,
                Operand::Const(_) => c += 1,
                Operand::Call(_) => fc += 1,
            }
        }
        let pct = |x: u32| 100.0 * x as f64 / N as f64;
        assert!((pct(nc) - 56.25).abs() < 1.0, "non-const {}", pct(nc));
        assert!((pct(c) - 6.25).abs() < 1.0, "const {}", pct(c));
        assert!((pct(fc) - 37.5).abs() < 1.0, "call {}", pct(fc));
    }

    #[test]
    fn typed_draws_mismatch_at_the_configured_rate() {
        let mut h = Harness::new(17);
        let mut ctx = BindingContext::new();
        for (name, ty) in [("int_0", "int"), ("int_1", "int"), ("str_0", "str"), ("float_0", "float")] {
            ctx.bind(
                Identifier::new(name).unwrap(),
                BindingRecord::variable(Some(ty.into())),
            );
        }
        let mut g = h.gen();
        let (mut matches, mut mismatches) = (0u32, 0u32);
        for _ in 0..50_000 {
            let op = source_argument(Some("int"), &mut g, &ctx);
            let ty: Option<String> = match &op {
                Operand::Ident(name) => ctx
                    .resolve(name.as_str())
                    .and_then(|r| r.type_name.clone()),
                Operand::Const(c) => Some(mock_tokens().token(c.primitive()).to_owned()),
                Operand::Call(_) => None,
            };
            match ty.as_deref() {
                Some("int") => matches += 1,
                Some(_) => mismatches += 1,
                None => {}
            }
        }
        let rate = 100.0 * mismatches as f64 / (matches + mismatches) as f64;
        assert!((rate - 20.0).abs() <= 2.0, "mismatch rate {rate}");
    }

    #[test]
    fn add_function_synthesizes_class_when_none_exists() {
        let mut h = Harness::new(19);
        let mut scope = Scope::default();
        let mut ctx = BindingContext::new();
        let mut g = h.gen();
        let outcome =
            apply_declaration_mutation(DeclKind::AddFunction, &mut scope, &mut g, &mut ctx);
        assert!(!outcome.no_op);
        let class = scope
            .declarations
            .iter()
            .find_map(|d| match d {
                DeclarationStmt::Class(c) => Some(c),
                _ => None,
            })
            .expect("class synthesized");
        assert_eq!(class.methods.len(), 1);
        assert!(ctx.resolve(class.name.as_str()).is_some());
        // The override name came from the base's pool.
        let names: Vec<&str> = h
            .pool
            .overrides_of(class.base.as_str())
            .iter()
            .map(|(n, _)| n.as_str())
            .collect();
        assert!(names.contains(&class.methods[0].name.as_str()));
    }

    #[test]
    fn add_import_merges_members_then_exhausts() {
        let mut h = Harness::new(23);
        let mut scope = Scope::default();
        let mut ctx = BindingContext::new();
        let module_count = h.pool.modules.len();
        for _ in 0..module_count {
            let mut g = h.gen();
            let out = apply_declaration_mutation(DeclKind::AddImport, &mut scope, &mut g, &mut ctx);
            assert!(!out.no_op);
        }
        assert!(ctx.contains("math") && ctx.contains("json") && ctx.contains("time"));
        assert_eq!(ctx.resolve("sin").unwrap().kind, BindingKind::Function);
        assert_eq!(
            ctx.resolve("pi").unwrap().type_name.as_deref(),
            Some("float")
        );
        assert_eq!(ctx.resolve("JSONEncoder").unwrap().kind, BindingKind::Class);

        let mut g = h.gen();
        let out = apply_declaration_mutation(DeclKind::AddImport, &mut scope, &mut g, &mut ctx);
        assert!(out.no_op, "registry exhausted must be a reported no-op");
    }

    #[test]
    fn mutation_sequences_preserve_well_formedness_and_scope_cap() {
        for seed in 0..40u64 {
            let mut h = Harness::new(seed);
            let mut scope = Scope::default();
            let mut ctx = BindingContext::new();
            let mut scopes_before = 1;
            for _ in 0..30 {
                let mut g = h.gen();
                g.scope_budget = 50 - crate::ast::count_scopes(&scope);
                let kind = g.cfg.decl_weights.pick(g.rng);
                apply_declaration_mutation(kind, &mut scope, &mut g, &mut ctx);
                let scopes_after = crate::ast::count_scopes(&scope);
                assert!(scopes_after >= scopes_before, "scope count is monotone");
                scopes_before = scopes_after;
                assert!(scopes_after <= 50, "scope cap violated");
                validate(&scope, &h.pool, Some(50)).unwrap_or_else(|e| {
                    panic!("seed {seed}: {e}\n{}", crate::ast::canon::write_scope(&scope))
                });
            }
            // Execution mutation never adds scopes.
            let mut g = h.gen();
            for _ in 0..50 {
                if let Some(stmt) = gen_execution_line(&mut g, &mut ctx, false) {
                    scope.executions.push(stmt);
                }
            }
            assert_eq!(crate::ast::count_scopes(&scope), scopes_before);
            validate(&scope, &h.pool, Some(50)).unwrap();
            let _ = NoBuiltins;
        }
    }

    #[test]
    fn denied_op_type_pairs_are_never_generated() {
        let mut h = Harness::new(31);
        let mut ctx = BindingContext::new();
        ctx.bind(
            Identifier::new("str_0").unwrap(),
            BindingRecord::variable(Some("str".into())),
        );
        ctx.bind(
            Identifier::new("int_0").unwrap(),
            BindingRecord::variable(Some("int".into())),
        );
        h.model.apply_correction(&crate::reflection::Correction::RemoveOpType {
            op: OpRef::Unary(UnaryOperator::BitNot),
            type_name: "str".into(),
        });
        let mut g = h.gen();
        for _ in 0..2000 {
            if let Some(ExecutionStmt::Unary { op, operand, .. }) =
                gen_execution_stmt(ExecKind::UnaryOp, &mut g, &mut ctx.clone(), false)
            {
                if op == UnaryOperator::BitNot {
                    assert_ne!(operand.as_str(), "str_0");
                }
            }
        }
    }

    #[test]
    fn return_only_inside_function_bodies() {
        let mut h = Harness::new(37);
        let mut ctx = BindingContext::new();
        let mut g = h.gen();
        assert!(gen_execution_stmt(ExecKind::Return, &mut g, &mut ctx, false).is_none());
        assert!(matches!(
            gen_execution_stmt(ExecKind::Return, &mut g, &mut ctx, true),
            Some(ExecutionStmt::Return { .. })
        ));
    }
}
