//! Deterministic in-process target for scheduler, reflection, and
//! persistence testing.
//!
//! The mock keeps a real binding table and enforces a small semantic model
//! (attribute existence, operator/type compatibility, arities, parameter
//! types), emitting CPython-style error messages, so the whole passive
//! reflection loop runs against it unchanged. Edge ids are a pure function of
//! a line's structural features: identifiers lose their counter digits and
//! literals collapse, so two lines with the same shape hit the same guards,
//! which gives the campaign realistic saturation behavior. A script can
//! additionally inject timeouts, delays, fixed error texts, a crash, or a
//! coverage plateau at chosen submission ordinals.

use std::time::Duration;

use indexmap::IndexMap;

use crate::ast::canon::quote_bytes;
use crate::ast::{
    BinaryOperator, ConstantValue, DeclarationStmt, ExecutionStmt, Operand, PrimitiveKind, Scope,
    UnaryOperator,
};
use crate::config::fnv1a;
use crate::ast::Signature;
use crate::reflection::{BuiltinPool, ErrorPatternSet, MemberKind, ModuleMember, OpTokenMap};

use super::{
    Driver, DriverDescriptor, DriverError, GuardTable, LineResult, StmtRef, Transport,
};

/// Guard slots the mock pretends to have instrumented.
const GUARD_SPACE: usize = 1 << 16;

/// Scripted behavior by 1-based `run_line` ordinal (counted across the whole
/// campaign, replays included).
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    pub timeout_at: Vec<u64>,
    pub error_at: Vec<(u64, String)>,
    pub delay_at: Vec<(u64, Duration)>,
    pub crash_at: Option<u64>,
    /// After this many submissions the mock stops reporting new edges.
    pub plateau_after: Option<u64>,
}

#[derive(Debug, Clone)]
struct MockClass {
    base: String,
    methods: Vec<String>,
}

pub struct MockDriver {
    descriptor: DriverDescriptor,
    patterns: ErrorPatternSet,
    fixture: BuiltinPool,
    script: MockScript,
    guards: GuardTable,
    bindings: IndexMap<String, String>,
    classes: IndexMap<String, MockClass>,
    calls: u64,
}

impl MockDriver {
    pub fn new(script: MockScript) -> Self {
        Self::with_descriptor(default_descriptor(), script)
    }

    pub fn with_descriptor(descriptor: DriverDescriptor, script: MockScript) -> Self {
        let mut guards = GuardTable::new();
        guards.init(GUARD_SPACE);
        MockDriver {
            descriptor,
            patterns: builtin_patterns(),
            fixture: fixture_pool(),
            script,
            guards,
            bindings: IndexMap::new(),
            classes: IndexMap::new(),
            calls: 0,
        }
    }

    pub fn script_mut(&mut self) -> &mut MockScript {
        &mut self.script
    }

    /// Submission ordinal of the next `run_line` call (1-based).
    pub fn next_ordinal(&self) -> u64 {
        self.calls + 1
    }

    fn type_of(&self, name: &str) -> Option<&str> {
        self.bindings.get(name).map(String::as_str)
    }

    /// Property surface of a type: fixture overrides for built-ins, methods
    /// plus the base chain for generated classes, members for modules.
    fn props_of(&self, type_name: &str) -> Vec<&str> {
        let mut props: Vec<&str> = Vec::new();
        let mut cursor = Some(type_name);
        while let Some(ty) = cursor.take() {
            for (name, _) in self.fixture.overrides_of(ty) {
                props.push(name);
            }
            if let Some(class) = self.classes.get(ty) {
                props.extend(class.methods.iter().map(String::as_str));
                cursor = Some(&class.base);
            }
        }
        props
    }

    fn module_member(&self, module: &str, name: &str) -> Option<&ModuleMember> {
        self.fixture
            .modules
            .get(module)?
            .iter()
            .find(|m| m.name == name)
    }

    /// Signature lookup by bare name: module functions first (call shape),
    /// then override methods (declaration shape, receiver slot included).
    fn function_sig(&self, name: &str) -> Option<(&Signature, bool)> {
        for members in self.fixture.modules.values() {
            for m in members {
                if m.name == name {
                    if let MemberKind::Function(sig) = &m.kind {
                        return Some((sig, false));
                    }
                }
            }
        }
        for methods in self.fixture.overrideables.values() {
            for (mname, sig) in methods {
                if mname == name {
                    return Some((sig, true));
                }
            }
        }
        None
    }

    fn ret_type(&self, callee: &str) -> String {
        match callee {
            "loads" => "dict".into(),
            "dumps" => "str".into(),
            "sin" | "cos" | "sqrt" | "pow" | "time" | "monotonic" => "float".into(),
            "floor" => "int".into(),
            "sleep" => "NoneType".into(),
            _ => {
                const POOL: [&str; 7] = ["int", "str", "bytes", "list", "dict", "bool", "float"];
                POOL[(fnv1a(callee.as_bytes()) % POOL.len() as u64) as usize].into()
            }
        }
    }

    fn operand_type(&self, op: &ParsedOperand) -> Option<String> {
        match op {
            ParsedOperand::Ident(name) => self.type_of(name).map(str::to_owned),
            ParsedOperand::Const(kind) => Some(prim_token(*kind).to_owned()),
            ParsedOperand::Call { callee, .. } => Some(self.ret_type(callee)),
        }
    }

    fn check_ident(&self, name: &str) -> Result<(), String> {
        if self.bindings.contains_key(name) {
            Ok(())
        } else {
            Err(format!("name '{name}' is not defined"))
        }
    }

    fn check_operand(&self, op: &ParsedOperand) -> Result<(), String> {
        match op {
            ParsedOperand::Ident(name) => self.check_ident(name),
            ParsedOperand::Const(_) => Ok(()),
            ParsedOperand::Call { callee, args } => {
                self.check_ident(callee)?;
                args.iter().try_for_each(|a| self.check_operand(a))
            }
        }
    }

    fn is_instance(&self, type_name: &str) -> bool {
        self.classes.contains_key(type_name)
    }

    /// Execute one top-level statement against the binding table. `Ok` binds
    /// the destination (when any); `Err` carries the interpreter message.
    fn execute(&mut self, stmt: ParsedStmt) -> Result<(), String> {
        match stmt {
            ParsedStmt::Var { name, kind } => {
                self.bindings.insert(name, prim_token(kind).to_owned());
                Ok(())
            }
            ParsedStmt::Import { module } => {
                let members = self
                    .fixture
                    .modules
                    .get(&module)
                    .cloned()
                    .ok_or_else(|| format!("no module named '{module}'"))?;
                self.bindings.insert(module, "module".into());
                for m in members {
                    let ty = match &m.kind {
                        MemberKind::Function(_) => "builtin_function_or_method".to_owned(),
                        MemberKind::Constant(ty) => ty.clone(),
                        MemberKind::Class => "type".to_owned(),
                    };
                    self.bindings.insert(m.name, ty);
                }
                Ok(())
            }
            ParsedStmt::Class { name, base } => {
                let known_base = self.fixture.overrideables.contains_key(&base)
                    || self.classes.contains_key(&base)
                    || self
                        .bindings
                        .get(&base)
                        .is_some_and(|t| t == "type");
                if !known_base {
                    return Err(format!("name '{base}' is not defined"));
                }
                self.classes.insert(
                    name.clone(),
                    MockClass {
                        base,
                        methods: Vec::new(),
                    },
                );
                self.bindings.insert(name, "type".into());
                Ok(())
            }
            ParsedStmt::Method { class, name } => {
                match self.classes.get_mut(&class) {
                    Some(c) => {
                        if !c.methods.contains(&name) {
                            c.methods.push(name);
                        }
                        Ok(())
                    }
                    None => Err(format!("name '{class}' is not defined")),
                }
            }
            ParsedStmt::BareFn { name } => {
                self.bindings.insert(name, "function".into());
                Ok(())
            }
            ParsedStmt::GetProp { dst, obj, attr } => {
                self.check_ident(&obj)?;
                let ty = self.type_of(&obj).unwrap().to_owned();
                let dst_ty = if ty == "module" {
                    match self.module_member(&obj, &attr) {
                        Some(m) => match &m.kind {
                            MemberKind::Function(_) => "builtin_function_or_method".to_owned(),
                            MemberKind::Constant(t) => t.clone(),
                            MemberKind::Class => "type".to_owned(),
                        },
                        None => return Err(format!("module '{obj}' has no attribute '{attr}'")),
                    }
                } else if self.props_of(&ty).contains(&attr.as_str()) {
                    "builtin_function_or_method".to_owned()
                } else {
                    return Err(format!("'{ty}' object has no attribute '{attr}'"));
                };
                self.bindings.insert(dst, dst_ty);
                Ok(())
            }
            ParsedStmt::SetProp { obj, attr, value } => {
                self.check_ident(&obj)?;
                self.check_operand(&value)?;
                let ty = self.type_of(&obj).unwrap().to_owned();
                if ty == "module" || self.is_instance(&ty) {
                    return Ok(());
                }
                if self.props_of(&ty).contains(&attr.as_str()) {
                    Err(format!("'{ty}' object attribute '{attr}' is read-only"))
                } else {
                    Err(format!("'{ty}' object has no attribute '{attr}'"))
                }
            }
            ParsedStmt::Call { dst, callee, args } => {
                self.check_ident(&callee)?;
                for a in &args {
                    self.check_operand(a)?;
                }
                let dst_ty = self.call_result(&callee, &args)?;
                self.bindings.insert(dst, dst_ty);
                Ok(())
            }
            ParsedStmt::New { dst, class, args } => {
                self.check_ident(&class)?;
                for a in &args {
                    self.check_operand(a)?;
                }
                let ty = self.type_of(&class).unwrap().to_owned();
                if ty != "type" {
                    return Err(format!("'{ty}' object is not callable"));
                }
                self.bindings.insert(dst, class);
                Ok(())
            }
            ParsedStmt::GetItem { dst, obj, idx } => {
                self.check_ident(&obj)?;
                self.check_operand(&idx)?;
                let ty = self.type_of(&obj).unwrap().to_owned();
                let elem = self.index_result(&ty, &idx, false)?;
                self.bindings.insert(dst, elem);
                Ok(())
            }
            ParsedStmt::SetItem { obj, idx, value } => {
                self.check_ident(&obj)?;
                self.check_operand(&idx)?;
                self.check_operand(&value)?;
                let ty = self.type_of(&obj).unwrap().to_owned();
                self.index_result(&ty, &idx, true).map(|_| ())
            }
            ParsedStmt::Binary { dst, lhs, op, rhs } => {
                self.check_ident(&lhs)?;
                self.check_ident(&rhs)?;
                let lt = self.type_of(&lhs).unwrap().to_owned();
                let rt = self.type_of(&rhs).unwrap().to_owned();
                let out = self.binop_result(op, &lt, &rt)?;
                self.bindings.insert(dst, out);
                Ok(())
            }
            ParsedStmt::Unary { dst, op, operand } => {
                self.check_ident(&operand)?;
                let ty = self.type_of(&operand).unwrap().to_owned();
                let out = self.unop_result(op, &ty)?;
                self.bindings.insert(dst, out);
                Ok(())
            }
            ParsedStmt::Return => Err("'return' outside function".into()),
            ParsedStmt::Structural => Ok(()),
        }
    }

    fn call_result(&self, callee: &str, args: &[ParsedOperand]) -> Result<String, String> {
        let callee_ty = self.type_of(callee).unwrap_or("NoneType");
        if callee_ty == "type" {
            // Calling a class binding constructs an instance.
            return Ok(callee.to_owned());
        }
        if !matches!(
            callee_ty,
            "builtin_function_or_method" | "function" | "method"
        ) {
            return Err(format!("'{callee_ty}' object is not callable"));
        }
        if let Some((sig, bound)) = self.function_sig(callee) {
            let skip = usize::from(bound);
            let min = sig.min_arity().saturating_sub(skip);
            let max = sig.max_arity().saturating_sub(skip);
            if args.len() < min || args.len() > max {
                return Err(format!(
                    "{callee}() takes from {min} to {max} positional arguments but {} were given",
                    args.len()
                ));
            }
            for (i, arg) in args.iter().enumerate() {
                if let Some(expected) = sig.param(i + skip) {
                    if let Some(actual) = self.operand_type(arg) {
                        if actual != expected && !self.is_instance(&actual) {
                            return Err(format!(
                                "{callee}() argument {} must be {expected}, not {actual}",
                                i + 1
                            ));
                        }
                    }
                }
            }
        }
        Ok(self.ret_type(callee))
    }

    fn index_result(
        &self,
        obj_ty: &str,
        idx: &ParsedOperand,
        write: bool,
    ) -> Result<String, String> {
        let idx_ty = self.operand_type(idx);
        match obj_ty {
            "bytes" | "str" | "list" => {
                if write && matches!(obj_ty, "bytes" | "str") {
                    return Err(format!("'{obj_ty}' object does not support item assignment"));
                }
                if let Some(t) = idx_ty {
                    if t != "int" && t != "bool" {
                        return Err(format!(
                            "{obj_ty} indices must be integers or slices, not {t}"
                        ));
                    }
                }
                Ok(match obj_ty {
                    "bytes" => "int".to_owned(),
                    "str" => "str".to_owned(),
                    _ => "object".to_owned(),
                })
            }
            "dict" => Ok("object".to_owned()),
            ty if self.is_instance(ty) => {
                let hook = if write { "__setitem__" } else { "__getitem__" };
                if self.props_of(ty).contains(&hook) {
                    Ok("object".to_owned())
                } else if write {
                    Err(format!("'{ty}' object does not support item assignment"))
                } else {
                    Err(format!("'{ty}' object is not subscriptable"))
                }
            }
            ty => {
                if write {
                    Err(format!("'{ty}' object does not support item assignment"))
                } else {
                    Err(format!("'{ty}' object is not subscriptable"))
                }
            }
        }
    }

    fn binop_result(&self, op: BinaryOperator, lt: &str, rt: &str) -> Result<String, String> {
        use BinaryOperator::*;
        let tok = binary_token(op);
        let numeric = |t: &str| matches!(t, "int" | "float" | "bool");
        let promote = |a: &str, b: &str| {
            if a == "float" || b == "float" {
                "float".to_owned()
            } else {
                "int".to_owned()
            }
        };
        if matches!(op, Eq | NotEq) {
            return Ok("bool".to_owned());
        }
        // A user-defined dunder on either side routes through the override.
        let dunder = dunder_for(op);
        for t in [lt, rt] {
            if self.is_instance(t) && self.props_of(t).contains(&dunder) {
                return Ok("object".to_owned());
            }
        }
        match op {
            Add => match (lt, rt) {
                _ if numeric(lt) && numeric(rt) => Ok(promote(lt, rt)),
                ("str", "str") => Ok("str".to_owned()),
                ("bytes", "bytes") => Ok("bytes".to_owned()),
                ("list", "list") => Ok("list".to_owned()),
                _ => Err(format!(
                    "unsupported operand type(s) for {tok}: '{lt}' and '{rt}'"
                )),
            },
            Sub | Mod | Pow => {
                if numeric(lt) && numeric(rt) {
                    Ok(promote(lt, rt))
                } else {
                    Err(format!(
                        "unsupported operand type(s) for {tok}: '{lt}' and '{rt}'"
                    ))
                }
            }
            Div => {
                if numeric(lt) && numeric(rt) {
                    Ok("float".to_owned())
                } else {
                    Err(format!(
                        "unsupported operand type(s) for {tok}: '{lt}' and '{rt}'"
                    ))
                }
            }
            Mul => match (lt, rt) {
                _ if numeric(lt) && numeric(rt) => Ok(promote(lt, rt)),
                ("str", "int") | ("int", "str") => Ok("str".to_owned()),
                ("bytes", "int") | ("int", "bytes") => Ok("bytes".to_owned()),
                ("list", "int") | ("int", "list") => Ok("list".to_owned()),
                _ => Err(format!(
                    "unsupported operand type(s) for {tok}: '{lt}' and '{rt}'"
                )),
            },
            Lt | Gt | LtE | GtE => {
                let comparable = (numeric(lt) && numeric(rt)) || (lt == rt && lt != "dict");
                if comparable {
                    Ok("bool".to_owned())
                } else {
                    Err(format!(
                        "'{tok}' not supported between instances of '{lt}' and '{rt}'"
                    ))
                }
            }
            BitAnd | BitOr | BitXor | LShift | RShift => {
                let intish = |t: &str| matches!(t, "int" | "bool");
                if intish(lt) && intish(rt) {
                    Ok("int".to_owned())
                } else {
                    Err(format!(
                        "unsupported operand type(s) for {tok}: '{lt}' and '{rt}'"
                    ))
                }
            }
            Eq | NotEq => unreachable!(),
        }
    }

    fn unop_result(&self, op: UnaryOperator, ty: &str) -> Result<String, String> {
        match op {
            UnaryOperator::Not => Ok("bool".to_owned()),
            UnaryOperator::Neg => match ty {
                "int" | "bool" => Ok("int".to_owned()),
                "float" => Ok("float".to_owned()),
                t if self.is_instance(t) && self.props_of(t).contains(&"__neg__") => {
                    Ok("object".to_owned())
                }
                t => Err(format!("bad operand type for unary -: '{t}'")),
            },
            UnaryOperator::BitNot => match ty {
                "int" | "bool" => Ok("int".to_owned()),
                t if self.is_instance(t) && self.props_of(t).contains(&"__invert__") => {
                    Ok("object".to_owned())
                }
                t => Err(format!("bad operand type for unary ~: '{t}'")),
            },
        }
    }
}

impl Driver for MockDriver {
    fn descriptor(&self) -> &DriverDescriptor {
        &self.descriptor
    }

    fn serialize_stmt(&self, stmt: StmtRef<'_>) -> Result<String, DriverError> {
        Ok(match stmt {
            StmtRef::Exec(e) => serialize_exec(e),
            StmtRef::Decl(d) => serialize_decl(d, 0),
        })
    }

    fn serialize_scope(&self, scope: &Scope) -> Result<String, DriverError> {
        Ok(serialize_scope_at(scope, 0))
    }

    fn run_line(&mut self, text: &str, _budget: Duration) -> Result<LineResult, DriverError> {
        self.calls += 1;
        let ordinal = self.calls;

        if self.script.crash_at == Some(ordinal) {
            return Err(DriverError::Dead("scripted crash".into()));
        }
        if let Some((_, d)) = self.script.delay_at.iter().find(|(o, _)| *o == ordinal) {
            std::thread::sleep(*d);
        }
        if self.script.timeout_at.contains(&ordinal) {
            return Ok(LineResult {
                timed_out: true,
                ..LineResult::default()
            });
        }
        if let Some((_, msg)) = self.script.error_at.iter().find(|(o, _)| *o == ordinal) {
            return Ok(LineResult {
                error: Some(msg.clone()),
                ..LineResult::default()
            });
        }

        let mut edges: Vec<u32> = Vec::new();
        let mut error = None;
        for raw in text.lines() {
            if raw.trim().is_empty() {
                continue;
            }
            let indented = raw.starts_with(' ');
            let stmt = if indented {
                ParsedStmt::Structural
            } else {
                match parse_line(raw) {
                    Ok(s) => s,
                    Err(msg) => {
                        error = Some(msg);
                        break;
                    }
                }
            };
            let kind_tag = stmt.tag();
            if let Err(msg) = self.execute(stmt) {
                error = Some(msg);
                break;
            }
            for feature in [
                fnv1a(normalize(raw).as_bytes()),
                fnv1a(format!("kind:{kind_tag}").as_bytes()),
            ] {
                let idx = (feature % GUARD_SPACE as u64) as usize;
                if let Some(id) = self.guards.record_edge(idx)? {
                    edges.push(id);
                }
            }
        }

        if self
            .script
            .plateau_after
            .is_some_and(|after| ordinal > after)
        {
            edges.clear();
        }
        Ok(LineResult {
            new_edge_ids: edges,
            error,
            timed_out: false,
        })
    }

    fn restart(&mut self) -> Result<(), DriverError> {
        // Fresh interpreter state; campaign-global guard state survives.
        self.bindings.clear();
        self.classes.clear();
        Ok(())
    }

    fn query_types_into(
        &mut self,
        names: &[String],
        sink: &mut dyn FnMut(usize, Option<&str>),
    ) -> Result<(), DriverError> {
        for (i, name) in names.iter().enumerate() {
            sink(i, self.bindings.get(name.as_str()).map(String::as_str));
        }
        Ok(())
    }

    fn scan_builtins(&mut self) -> Result<BuiltinPool, DriverError> {
        Ok(self.fixture.clone())
    }

    fn primitive_token(&self, kind: PrimitiveKind) -> &'static str {
        match kind {
            PrimitiveKind::Int => "int",
            PrimitiveKind::Float => "float",
            PrimitiveKind::Bool => "bool",
            PrimitiveKind::Text => "str",
            PrimitiveKind::Raw => "bytes",
        }
    }

    fn is_callable_type(&self, token: &str) -> bool {
        matches!(
            token,
            "builtin_function_or_method" | "function" | "method" | "type"
        )
    }

    fn error_patterns(&self) -> &ErrorPatternSet {
        &self.patterns
    }
}

pub fn default_descriptor() -> DriverDescriptor {
    DriverDescriptor {
        name: "mock".into(),
        transport: Transport::Embedded,
        command: Vec::new(),
        pattern_path: "<builtin>".into(),
        enabled_modules: vec!["math".into(), "json".into(), "time".into()],
        extension: "mock".into(),
    }
}

pub fn builtin_patterns() -> ErrorPatternSet {
    let mut ops = OpTokenMap::default();
    ops.add_unary("-", UnaryOperator::Neg);
    ops.add_unary("not", UnaryOperator::Not);
    ops.add_unary("~", UnaryOperator::BitNot);
    for op in BinaryOperator::ALL {
        ops.add_binary(binary_token(*op), *op);
    }
    ErrorPatternSet::parse(include_str!("../../data/mock.patterns"), ops)
        .expect("builtin mock patterns parse")
}

/// Fixed introspection surface: three importable modules and the override
/// pools of the buffer-ish built-in bases.
pub fn fixture_pool() -> BuiltinPool {
    fn func(name: &str, min: usize, params: &[Option<&str>]) -> ModuleMember {
        ModuleMember {
            name: name.into(),
            kind: MemberKind::Function(Signature::with_params(
                min,
                params.iter().map(|p| p.map(str::to_owned)).collect(),
            )),
        }
    }
    fn constant(name: &str, ty: &str) -> ModuleMember {
        ModuleMember {
            name: name.into(),
            kind: MemberKind::Constant(ty.into()),
        }
    }
    fn m(name: &str, min: usize, params: &[Option<&str>]) -> (String, Signature) {
        (
            name.into(),
            Signature::with_params(min, params.iter().map(|p| p.map(str::to_owned)).collect()),
        )
    }

    let mut pool = BuiltinPool::default();
    pool.modules.insert(
        "math".into(),
        vec![
            func("sin", 1, &[Some("float")]),
            func("cos", 1, &[Some("float")]),
            func("sqrt", 1, &[Some("float")]),
            func("floor", 1, &[None]),
            func("pow", 2, &[Some("float"), Some("float")]),
            constant("pi", "float"),
            constant("tau", "float"),
        ],
    );
    pool.modules.insert(
        "json".into(),
        vec![
            func("dumps", 1, &[None]),
            func("loads", 1, &[Some("str")]),
            ModuleMember {
                name: "JSONEncoder".into(),
                kind: MemberKind::Class,
            },
        ],
    );
    pool.modules.insert(
        "time".into(),
        vec![
            func("time", 0, &[]),
            func("monotonic", 0, &[]),
            func("sleep", 1, &[Some("float")]),
        ],
    );

    // Override signatures are declaration-shaped: the receiver slot counts.
    pool.overrideables.insert(
        "bytes".into(),
        vec![
            m("rstrip", 2, &[None, None]),
            m("removeprefix", 2, &[None, Some("bytes")]),
            m("__getitem__", 2, &[None, None]),
            m("__setitem__", 3, &[None, None, None]),
            m("__index__", 1, &[None]),
            m("__add__", 2, &[None, None]),
            m("__len__", 1, &[None]),
            m("__eq__", 2, &[None, None]),
        ],
    );
    pool.overrideables.insert(
        "list".into(),
        vec![
            m("append", 2, &[None, None]),
            m("__getitem__", 2, &[None, None]),
            m("__setitem__", 3, &[None, None, None]),
            m("__len__", 1, &[None]),
            m("__eq__", 2, &[None, None]),
            m("__lt__", 2, &[None, None]),
        ],
    );
    pool.overrideables.insert(
        "dict".into(),
        vec![
            m("items", 1, &[None]),
            m("keys", 1, &[None]),
            m("__getitem__", 2, &[None, None]),
            m("__setitem__", 3, &[None, None, None]),
            m("__eq__", 2, &[None, None]),
        ],
    );
    pool.overrideables.insert(
        "str".into(),
        vec![
            m("replace", 3, &[None, Some("str"), Some("str"), Some("int")]),
            m("find", 2, &[None, Some("str"), Some("int")]),
            m("__getitem__", 2, &[None, None]),
            m("__add__", 2, &[None, None]),
            m("__eq__", 2, &[None, None]),
            m("__lt__", 2, &[None, None]),
        ],
    );
    pool.overrideables.insert(
        "JSONEncoder".into(),
        vec![
            m("default", 2, &[None, None]),
            m("encode", 2, &[None, None]),
        ],
    );
    pool
}

fn prim_token(kind: PrimitiveKind) -> &'static str {
    match kind {
        PrimitiveKind::Int => "int",
        PrimitiveKind::Float => "float",
        PrimitiveKind::Bool => "bool",
        PrimitiveKind::Text => "str",
        PrimitiveKind::Raw => "bytes",
    }
}

pub fn binary_token(op: BinaryOperator) -> &'static str {
    use BinaryOperator::*;
    match op {
        Add => "+",
        Sub => "-",
        Mul => "*",
        Div => "/",
        Mod => "%",
        Pow => "**",
        Eq => "==",
        NotEq => "!=",
        Lt => "<",
        Gt => ">",
        LtE => "<=",
        GtE => ">=",
        BitAnd => "&",
        BitOr => "|",
        BitXor => "^",
        LShift => "<<",
        RShift => ">>",
    }
}

fn unary_token(op: UnaryOperator) -> &'static str {
    match op {
        UnaryOperator::Neg => "-",
        UnaryOperator::Not => "not",
        UnaryOperator::BitNot => "~",
    }
}

fn dunder_for(op: BinaryOperator) -> &'static str {
    use BinaryOperator::*;
    match op {
        Add => "__add__",
        Sub => "__sub__",
        Mul => "__mul__",
        Div => "__truediv__",
        Mod => "__mod__",
        Pow => "__pow__",
        Eq | NotEq => "__eq__",
        Lt | Gt | LtE | GtE => "__lt__",
        BitAnd => "__and__",
        BitOr => "__or__",
        BitXor => "__xor__",
        LShift => "__lshift__",
        RShift => "__rshift__",
    }
}

// ---------------------------------------------------------------------------
// serialization (mock surface syntax)
// ---------------------------------------------------------------------------

fn render_const(c: &ConstantValue) -> String {
    match c {
        ConstantValue::Integer(v) => v.to_string(),
        ConstantValue::Float(v) => format!("{v:?}"),
        ConstantValue::Boolean(v) => v.to_string(),
        ConstantValue::Text(b) => quote_bytes(b),
        ConstantValue::Raw(b) => format!("b{}", quote_bytes(b)),
    }
}

fn render_operand(op: &Operand) -> String {
    match op {
        Operand::Ident(name) => name.as_str().to_owned(),
        Operand::Const(c) => render_const(c),
        Operand::Call(call) => {
            let args: Vec<String> = call.args.iter().map(render_operand).collect();
            format!("{} ( {} )", call.callee, args.join(" , "))
        }
    }
}

pub(crate) fn serialize_exec(stmt: &ExecutionStmt) -> String {
    match stmt {
        ExecutionStmt::GetProp { dst, obj, attr } => {
            format!("{dst} = {obj} . {}", render_operand(attr))
        }
        ExecutionStmt::SetProp { obj, value, attr } => {
            format!("{obj} . {} = {}", render_operand(attr), render_operand(value))
        }
        ExecutionStmt::Call { dst, callee, args } => {
            let args: Vec<String> = args.iter().map(render_operand).collect();
            format!("{dst} = {callee} ( {} )", args.join(" , "))
        }
        ExecutionStmt::Return { value } => match value {
            Some(v) => format!("return {}", render_operand(v)),
            None => "return".to_owned(),
        },
        ExecutionStmt::Binary { dst, lhs, op, rhs } => {
            format!("{dst} = {lhs} {} {rhs}", binary_token(*op))
        }
        ExecutionStmt::Unary { dst, op, operand } => {
            format!("{dst} = {} {operand}", unary_token(*op))
        }
        ExecutionStmt::NewInstance {
            dst,
            class_name,
            args,
        } => {
            let args: Vec<String> = args.iter().map(render_operand).collect();
            format!("{dst} = new {class_name} ( {} )", args.join(" , "))
        }
        ExecutionStmt::GetItem { dst, obj, idx } => {
            format!("{dst} = {obj} [ {} ]", render_operand(idx))
        }
        ExecutionStmt::SetItem { obj, idx, value } => {
            format!(
                "{obj} [ {} ] = {}",
                render_operand(idx),
                render_operand(value)
            )
        }
    }
}

fn indent_of(depth: usize) -> String {
    "  ".repeat(depth)
}

fn serialize_decl(decl: &DeclarationStmt, depth: usize) -> String {
    let pad = indent_of(depth);
    match decl {
        DeclarationStmt::Var(v) => format!("{pad}var {} = {}", v.name, render_const(&v.value)),
        DeclarationStmt::Import(i) => format!("{pad}import {}", i.module),
        DeclarationStmt::Class(c) => {
            let mut out = format!("{pad}class {} : {}", c.name, c.base);
            for nested in &c.nested {
                out.push('\n');
                out.push_str(&serialize_decl(
                    &DeclarationStmt::Class(nested.clone()),
                    depth + 1,
                ));
            }
            for method in &c.methods {
                let args: Vec<&str> = method.args.iter().map(|a| a.as_str()).collect();
                out.push('\n');
                out.push_str(&format!(
                    "{pad}def {} . {} ( {} ) :",
                    c.name,
                    method.name,
                    args.join(" , ")
                ));
                let body = serialize_scope_at(&method.body, depth + 1);
                if !body.is_empty() {
                    out.push('\n');
                    out.push_str(&body);
                }
            }
            out
        }
        DeclarationStmt::Function(f) => {
            let args: Vec<&str> = f.args.iter().map(|a| a.as_str()).collect();
            let mut out = format!("{pad}def {} ( {} ) :", f.name, args.join(" , "));
            let body = serialize_scope_at(&f.body, depth + 1);
            if !body.is_empty() {
                out.push('\n');
                out.push_str(&body);
            }
            out
        }
    }
}

fn serialize_scope_at(scope: &Scope, depth: usize) -> String {
    let pad = indent_of(depth);
    let mut lines: Vec<String> = Vec::new();
    if !scope.global_refs.is_empty() {
        let names: Vec<&str> = scope.global_refs.iter().map(|r| r.as_str()).collect();
        lines.push(format!("{pad}global {}", names.join(" ")));
    }
    for decl in &scope.declarations {
        lines.push(serialize_decl(decl, depth));
    }
    for stmt in &scope.executions {
        lines.push(format!("{pad}{}", serialize_exec(stmt)));
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// parsing (the mock accepts exactly what its serializer emits)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum ParsedOperand {
    Ident(String),
    Const(PrimitiveKind),
    Call {
        callee: String,
        args: Vec<ParsedOperand>,
    },
}

#[derive(Debug)]
enum ParsedStmt {
    Var { name: String, kind: PrimitiveKind },
    Import { module: String },
    Class { name: String, base: String },
    Method { class: String, name: String },
    BareFn { name: String },
    GetProp { dst: String, obj: String, attr: String },
    SetProp { obj: String, attr: String, value: ParsedOperand },
    Call { dst: String, callee: String, args: Vec<ParsedOperand> },
    New { dst: String, class: String, args: Vec<ParsedOperand> },
    GetItem { dst: String, obj: String, idx: ParsedOperand },
    SetItem { obj: String, idx: ParsedOperand, value: ParsedOperand },
    Binary { dst: String, lhs: String, op: BinaryOperator, rhs: String },
    Unary { dst: String, op: UnaryOperator, operand: String },
    Return,
    Structural,
}

impl ParsedStmt {
    fn tag(&self) -> &'static str {
        match self {
            ParsedStmt::Var { .. } => "var",
            ParsedStmt::Import { .. } => "import",
            ParsedStmt::Class { .. } => "class",
            ParsedStmt::Method { .. } | ParsedStmt::BareFn { .. } => "def",
            ParsedStmt::GetProp { .. } => "getprop",
            ParsedStmt::SetProp { .. } => "setprop",
            ParsedStmt::Call { .. } => "call",
            ParsedStmt::New { .. } => "new",
            ParsedStmt::GetItem { .. } => "getitem",
            ParsedStmt::SetItem { .. } => "setitem",
            ParsedStmt::Binary { .. } => "binop",
            ParsedStmt::Unary { .. } => "unop",
            ParsedStmt::Return => "return",
            ParsedStmt::Structural => "structural",
        }
    }
}

/// Split on spaces, keeping quoted literals (with optional `b` prefix) whole.
fn tokenize(line: &str) -> Vec<&str> {
    let bytes = line.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b' ' {
            i += 1;
            continue;
        }
        let start = i;
        let quote_at = if bytes[i] == b'"' {
            Some(i)
        } else if bytes[i] == b'b' && bytes.get(i + 1) == Some(&b'"') {
            Some(i + 1)
        } else {
            None
        };
        if let Some(q) = quote_at {
            i = q + 1;
            while i < bytes.len() {
                match bytes[i] {
                    b'\\' => i += 2,
                    b'"' => {
                        i += 1;
                        break;
                    }
                    _ => i += 1,
                }
            }
            tokens.push(&line[start..i.min(bytes.len())]);
        } else {
            while i < bytes.len() && bytes[i] != b' ' {
                i += 1;
            }
            tokens.push(&line[start..i]);
        }
    }
    tokens
}

fn literal_kind(tok: &str) -> Option<PrimitiveKind> {
    if tok.starts_with('"') {
        return Some(PrimitiveKind::Text);
    }
    if tok.starts_with("b\"") {
        return Some(PrimitiveKind::Raw);
    }
    if tok == "true" || tok == "false" {
        return Some(PrimitiveKind::Bool);
    }
    if tok.parse::<i64>().is_ok() {
        return Some(PrimitiveKind::Int);
    }
    if tok.parse::<f64>().is_ok() {
        return Some(PrimitiveKind::Float);
    }
    None
}

fn parse_operand(tokens: &[&str]) -> Result<ParsedOperand, String> {
    if tokens.is_empty() {
        return Err("invalid syntax".into());
    }
    if tokens.len() == 1 {
        let tok = tokens[0];
        return Ok(match literal_kind(tok) {
            Some(kind) => ParsedOperand::Const(kind),
            None => ParsedOperand::Ident(tok.to_owned()),
        });
    }
    if tokens.len() >= 3 && tokens[1] == "(" && tokens[tokens.len() - 1] == ")" {
        let callee = tokens[0].to_owned();
        let args = split_args(&tokens[2..tokens.len() - 1])?
            .into_iter()
            .map(|slice| parse_operand(slice))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(ParsedOperand::Call { callee, args });
    }
    Err("invalid syntax".into())
}

/// Split an argument token run on top-level commas.
fn split_args<'a, 'b>(tokens: &'b [&'a str]) -> Result<Vec<&'b [&'a str]>, String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        match *tok {
            "(" => depth += 1,
            ")" => depth = depth.checked_sub(1).ok_or("invalid syntax")?,
            "," if depth == 0 => {
                out.push(&tokens[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out.retain(|s| !s.is_empty());
    Ok(out)
}

fn parse_line(line: &str) -> Result<ParsedStmt, String> {
    let tokens = tokenize(line);
    if tokens.is_empty() {
        return Ok(ParsedStmt::Structural);
    }
    match tokens[0] {
        "var" if tokens.len() >= 4 && tokens[2] == "=" => {
            let kind = literal_kind(tokens[3]).ok_or("invalid literal")?;
            return Ok(ParsedStmt::Var {
                name: tokens[1].to_owned(),
                kind,
            });
        }
        "import" if tokens.len() == 2 => {
            return Ok(ParsedStmt::Import {
                module: tokens[1].to_owned(),
            });
        }
        "class" if tokens.len() == 4 && tokens[2] == ":" => {
            return Ok(ParsedStmt::Class {
                name: tokens[1].to_owned(),
                base: tokens[3].to_owned(),
            });
        }
        "def" => {
            if tokens.len() >= 4 && tokens[2] == "." {
                return Ok(ParsedStmt::Method {
                    class: tokens[1].to_owned(),
                    name: tokens[3].to_owned(),
                });
            }
            if tokens.len() >= 2 {
                return Ok(ParsedStmt::BareFn {
                    name: tokens[1].to_owned(),
                });
            }
            return Err("invalid syntax".into());
        }
        "return" => return Ok(ParsedStmt::Return),
        "global" => return Ok(ParsedStmt::Structural),
        _ => {}
    }

    // Destination-less writes: `obj . attr = v` and `obj [ idx ] = v`.
    if tokens.len() >= 5 && tokens[1] == "." && tokens[3] == "=" {
        return Ok(ParsedStmt::SetProp {
            obj: tokens[0].to_owned(),
            attr: tokens[2].to_owned(),
            value: parse_operand(&tokens[4..])?,
        });
    }
    if tokens.len() >= 6 && tokens[1] == "[" {
        let close = tokens
            .iter()
            .position(|t| *t == "]")
            .ok_or("invalid syntax")?;
        if tokens.get(close + 1) == Some(&"=") {
            return Ok(ParsedStmt::SetItem {
                obj: tokens[0].to_owned(),
                idx: parse_operand(&tokens[2..close])?,
                value: parse_operand(&tokens[close + 2..])?,
            });
        }
    }

    // Everything else binds a destination: `dst = <rhs>`.
    if tokens.len() < 3 || tokens[1] != "=" {
        return Err("invalid syntax".into());
    }
    let dst = tokens[0].to_owned();
    let rhs = &tokens[2..];
    match rhs {
        ["new", class, "(", rest @ ..] if rest.last() == Some(&")") => {
            let args = split_args(&rest[..rest.len() - 1])?
                .into_iter()
                .map(parse_operand)
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ParsedStmt::New {
                dst,
                class: (*class).to_owned(),
                args,
            })
        }
        [obj, ".", attr] => Ok(ParsedStmt::GetProp {
            dst,
            obj: (*obj).to_owned(),
            attr: (*attr).to_owned(),
        }),
        [obj, "[", rest @ ..] if rest.last() == Some(&"]") => Ok(ParsedStmt::GetItem {
            dst,
            obj: (*obj).to_owned(),
            idx: parse_operand(&rest[..rest.len() - 1])?,
        }),
        [callee, "(", rest @ ..] if rest.last() == Some(&")") => {
            let args = split_args(&rest[..rest.len() - 1])?
                .into_iter()
                .map(parse_operand)
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ParsedStmt::Call {
                dst,
                callee: (*callee).to_owned(),
                args,
            })
        }
        [op, operand] if ["-", "not", "~"].contains(op) => {
            let op = match *op {
                "-" => UnaryOperator::Neg,
                "not" => UnaryOperator::Not,
                _ => UnaryOperator::BitNot,
            };
            Ok(ParsedStmt::Unary {
                dst,
                op,
                operand: (*operand).to_owned(),
            })
        }
        [lhs, op, rhs_tok] => {
            let op = BinaryOperator::ALL
                .iter()
                .copied()
                .find(|o| binary_token(*o) == *op)
                .ok_or("invalid syntax")?;
            Ok(ParsedStmt::Binary {
                dst,
                lhs: (*lhs).to_owned(),
                op,
                rhs: (*rhs_tok).to_owned(),
            })
        }
        _ => Err("invalid syntax".into()),
    }
}

/// Structural normalization behind edge identity: identifier counters and
/// literal payloads vanish, statement shape and type-bearing prefixes remain.
fn normalize(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'"' {
            out.push_str("\"\"");
            i += 1;
            while i < bytes.len() {
                match bytes[i] {
                    b'\\' => i += 2,
                    b'"' => {
                        i += 1;
                        break;
                    }
                    _ => i += 1,
                }
            }
            continue;
        }
        if !b.is_ascii_digit() {
            out.push(b as char);
        }
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::Identifier;

    fn run(driver: &mut MockDriver, line: &str) -> LineResult {
        driver.run_line(line, Duration::from_millis(500)).unwrap()
    }

    #[test]
    fn bindings_persist_across_lines() {
        let mut d = MockDriver::new(MockScript::default());
        assert!(run(&mut d, "var int_0 = 42").ok());
        let r = run(&mut d, "r1 = int_0 + int_0");
        assert!(r.ok(), "{r:?}");
        assert_eq!(d.query_type("r1").unwrap().as_deref(), Some("int"));
        assert_eq!(d.query_type("never").unwrap(), None);
    }

    #[test]
    fn identical_line_reports_no_new_edges_second_time() {
        let mut d = MockDriver::new(MockScript::default());
        let first = run(&mut d, "var int_0 = 42");
        assert!(!first.new_edge_ids.is_empty());
        // Different counter digits, same structure: guards already zeroed.
        assert!(run(&mut d, "var int_1 = 17").new_edge_ids.is_empty());
    }

    #[test]
    fn restart_clears_bindings_but_not_guard_state() {
        let mut d = MockDriver::new(MockScript::default());
        let first = run(&mut d, "var int_0 = 42");
        assert!(!first.new_edge_ids.is_empty());
        d.restart().unwrap();
        assert_eq!(d.query_type("int_0").unwrap(), None);
        assert!(run(&mut d, "var int_0 = 42").new_edge_ids.is_empty());
    }

    #[test]
    fn natural_errors_match_reference_messages() {
        let mut d = MockDriver::new(MockScript::default());
        run(&mut d, "var str_0 = \"hi\"");
        let r = run(&mut d, "r0 = ~ str_0");
        assert_eq!(
            r.error.as_deref(),
            Some("bad operand type for unary ~: 'str'")
        );
        // An errored line binds nothing.
        assert_eq!(d.query_type("r0").unwrap(), None);

        run(&mut d, "var dict_0 = 1");
        let r = run(&mut d, "x0 = str_0 . no_such_prop");
        assert_eq!(
            r.error.as_deref(),
            Some("'str' object has no attribute 'no_such_prop'")
        );

        run(&mut d, "import json");
        let r = run(&mut d, "x1 = loads ( str_0 , str_0 )");
        assert_eq!(
            r.error.as_deref(),
            Some("loads() takes from 1 to 1 positional arguments but 2 were given")
        );
        let r = run(&mut d, "var int_9 = 3");
        assert!(r.ok());
        let r = run(&mut d, "x2 = loads ( int_9 )");
        assert_eq!(
            r.error.as_deref(),
            Some("loads() argument 1 must be str, not int")
        );
    }

    #[test]
    fn declaration_block_defines_class_and_methods() {
        let mut d = MockDriver::new(MockScript::default());
        let block = "class aa0 : bytes\n\
                     def aa0 . rstrip ( arg0 , arg1 ) :\n\
                     \u{20} global x\n\
                     \u{20} z1 = arg0 + arg1";
        assert!(run(&mut d, block).ok());
        assert_eq!(d.query_type("aa0").unwrap().as_deref(), Some("type"));
        assert!(run(&mut d, "o0 = new aa0 ( )").ok());
        assert_eq!(d.query_type("o0").unwrap().as_deref(), Some("aa0"));
        // The subclass inherits the base's override surface.
        assert!(d.props_of("aa0").contains(&"__getitem__"));
        assert!(d.props_of("aa0").contains(&"rstrip"));
    }

    #[test]
    fn script_injection_controls_outcomes() {
        let mut d = MockDriver::new(MockScript {
            timeout_at: vec![2],
            error_at: vec![(3, "bad operand type for unary ~: 'str'".into())],
            plateau_after: Some(3),
            ..MockScript::default()
        });
        assert!(run(&mut d, "var int_0 = 1").ok());
        assert!(run(&mut d, "var int_1 = 1").timed_out);
        assert_eq!(
            run(&mut d, "var int_2 = 1").error.as_deref(),
            Some("bad operand type for unary ~: 'str'")
        );
        // Past the plateau no new edges surface even for fresh structure.
        let r = run(&mut d, "var float_0 = 1.5");
        assert!(r.ok() && r.new_edge_ids.is_empty());
    }

    #[test]
    fn scripted_crash_kills_the_driver() {
        let mut d = MockDriver::new(MockScript {
            crash_at: Some(1),
            ..MockScript::default()
        });
        assert!(matches!(
            d.run_line("var int_0 = 1", Duration::from_millis(500)),
            Err(DriverError::Dead(_))
        ));
    }

    #[test]
    fn serializer_output_parses_back() {
        let d = MockDriver::new(MockScript::default());
        let stmt = ExecutionStmt::SetItem {
            obj: Identifier::new("l82").unwrap(),
            idx: Operand::Const(ConstantValue::Integer(110)),
            value: Operand::Ident(Identifier::new("z44").unwrap()),
        };
        let line = d.serialize_stmt(StmtRef::Exec(&stmt)).unwrap();
        assert_eq!(line, "l82 [ 110 ] = z44");
        assert!(matches!(
            parse_line(&line),
            Ok(ParsedStmt::SetItem { .. })
        ));

        let call = ExecutionStmt::Call {
            dst: Identifier::new("ah52").unwrap(),
            callee: Identifier::new("minute").unwrap(),
            args: vec![],
        };
        assert_eq!(
            d.serialize_stmt(StmtRef::Exec(&call)).unwrap(),
            "ah52 = minute ( )"
        );
    }

    #[test]
    fn error_with_earlier_block_edges_coexist() {
        let mut d = MockDriver::new(MockScript::default());
        let block = "var int_0 = 1\nr0 = ghost + int_0";
        let r = run(&mut d, block);
        assert!(r.error.is_some());
        assert!(!r.new_edge_ids.is_empty());
        // The successful first line took effect.
        assert_eq!(d.query_type("int_0").unwrap().as_deref(), Some("int"));
    }

    #[test]
    fn normalization_strips_counters_and_literals() {
        assert_eq!(normalize("var int_12 = 42"), "var int_ = ");
        assert_eq!(normalize("x1 = \"a b\\\" c\""), "x = \"\"");
        assert_eq!(normalize("r5 = a7 + b9"), "r = a + b");
    }
}
