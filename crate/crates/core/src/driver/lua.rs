//! Engine-side Lua target: lowers the internal tree to Lua source and talks
//! to the instrumented out-of-process wrapper over the wire protocol.
//! Class constructs are lowered to the metatable-backed constructor pattern;
//! imports are flattened into plain globals so call sites stay uniform
//! across targets.

use std::time::Duration;

use indexmap::IndexSet;

use crate::ast::{
    BinaryOperator, ConstantValue, DeclarationStmt, ExecutionStmt, FunctionDecl, Operand,
    PrimitiveKind, Scope, UnaryOperator,
};
use crate::reflection::{BuiltinPool, ErrorPatternSet, OpTokenMap};

use super::proto::{Request, Response};
use super::subprocess::{grace, Exchange, SubprocessTransport};
use super::{Driver, DriverDescriptor, DriverError, LineResult, StmtRef, Transport};

pub struct LuaDriver {
    descriptor: DriverDescriptor,
    patterns: ErrorPatternSet,
    transport: SubprocessTransport,
    /// Edge ids already reported this campaign; the wrapper re-arms guards
    /// per request, so novelty is decided here.
    seen: IndexSet<u32>,
}

impl LuaDriver {
    pub fn spawn(descriptor: DriverDescriptor) -> Result<Self, DriverError> {
        let patterns = match descriptor.pattern_path.as_str() {
            "<builtin>" => builtin_patterns(),
            path => ErrorPatternSet::parse(&std::fs::read_to_string(path)?, lua_op_tokens())
                .map_err(|e| DriverError::BadDescriptor(e.to_string()))?,
        };
        let mut transport = SubprocessTransport::new(descriptor.command.clone());
        transport.spawn()?;
        Ok(LuaDriver {
            descriptor,
            patterns,
            transport,
            seen: IndexSet::new(),
        })
    }

    pub fn spawn_default(line_budget: Duration) -> Result<Self, DriverError> {
        Self::spawn(default_descriptor(line_budget))
    }

    fn exchange_ok(
        &mut self,
        request: &Request,
        deadline: Option<Duration>,
    ) -> Result<Response, DriverError> {
        match self.transport.exchange(request, deadline)? {
            Exchange::Reply(resp) => Ok(resp),
            Exchange::Hung => Err(DriverError::Dead("wrapper hung".into())),
            Exchange::Died => Err(DriverError::Dead("wrapper died".into())),
        }
    }
}

/// Locate the wrapper binary: explicit override, then next to the engine.
pub fn default_descriptor(line_budget: Duration) -> DriverDescriptor {
    let wrapper = std::env::var("HOOKFUZZ_LUA_BIN").unwrap_or_else(|_| {
        std::env::current_exe()
            .ok()
            .and_then(|p| p.parent().map(|d| d.join("hookfuzz-lua")))
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|| "hookfuzz-lua".to_owned())
    });
    let modules = vec!["math".to_owned(), "string".to_owned(), "table".to_owned()];
    DriverDescriptor {
        name: "lua".into(),
        transport: Transport::Subprocess,
        command: vec![
            wrapper,
            "--line-budget-ms".into(),
            line_budget.as_millis().to_string(),
            "--modules".into(),
            modules.join(","),
        ],
        pattern_path: "<builtin>".into(),
        enabled_modules: modules,
        extension: "lua".into(),
    }
}

pub fn lua_op_tokens() -> OpTokenMap {
    let mut ops = OpTokenMap::default();
    ops.add_unary("-", UnaryOperator::Neg);
    ops.add_unary("not", UnaryOperator::Not);
    ops.add_unary("~", UnaryOperator::BitNot);
    for op in BinaryOperator::ALL {
        ops.add_binary(binary_token(*op), *op);
    }
    ops
}

pub fn builtin_patterns() -> ErrorPatternSet {
    ErrorPatternSet::parse(include_str!("../../data/lua.patterns"), lua_op_tokens())
        .expect("builtin lua patterns parse")
}

impl Driver for LuaDriver {
    fn descriptor(&self) -> &DriverDescriptor {
        &self.descriptor
    }

    fn serialize_stmt(&self, stmt: StmtRef<'_>) -> Result<String, DriverError> {
        match stmt {
            StmtRef::Exec(e) => Ok(serialize_exec(e)),
            StmtRef::Decl(d) => serialize_decl(d, 0),
        }
    }

    fn serialize_scope(&self, scope: &Scope) -> Result<String, DriverError> {
        serialize_scope_at(scope, 0)
    }

    fn run_line(&mut self, text: &str, budget: Duration) -> Result<LineResult, DriverError> {
        if !self.transport.is_live() {
            return Err(DriverError::Dead("wrapper not running".into()));
        }
        let req = Request::Run(text.to_owned());
        match self.transport.exchange(&req, Some(grace(budget)))? {
            Exchange::Reply(resp) => {
                if resp.timed_out {
                    return Ok(LineResult {
                        timed_out: true,
                        ..LineResult::default()
                    });
                }
                let mut novel = Vec::new();
                for id in resp.edge_ids {
                    if self.seen.insert(id) {
                        novel.push(id);
                    }
                }
                let error = (!resp.payload.is_empty()).then(|| resp.payload);
                Ok(LineResult {
                    new_edge_ids: novel,
                    error,
                    timed_out: false,
                })
            }
            // No reply inside budget + grace: the engine killed the wrapper.
            // The scheduler's timeout path restarts and replays.
            Exchange::Hung => Ok(LineResult {
                timed_out: true,
                ..LineResult::default()
            }),
            Exchange::Died => Err(DriverError::Dead("wrapper died mid-line".into())),
        }
    }

    fn restart(&mut self) -> Result<(), DriverError> {
        if self.transport.is_live() {
            match self
                .transport
                .exchange(&Request::Restart, Some(Duration::from_secs(10)))
            {
                Ok(Exchange::Reply(_)) => return Ok(()),
                // Unresponsive or dead: fall through to a full respawn.
                _ => {}
            }
        }
        self.transport.spawn()
    }

    fn query_types_into(
        &mut self,
        names: &[String],
        sink: &mut dyn FnMut(usize, Option<&str>),
    ) -> Result<(), DriverError> {
        if names.is_empty() {
            return Ok(());
        }
        let resp = self.exchange_ok(
            &Request::TypeOf(names.to_vec()),
            Some(Duration::from_secs(10)),
        )?;
        let mut types: Vec<Option<&str>> = vec![None; names.len()];
        for line in resp.payload.lines() {
            if let Some((name, ty)) = line.split_once('=') {
                if let Some(pos) = names.iter().position(|n| n == name) {
                    types[pos] = (!ty.is_empty()).then_some(ty);
                }
            }
        }
        for (i, ty) in types.into_iter().enumerate() {
            sink(i, ty);
        }
        Ok(())
    }

    fn scan_builtins(&mut self) -> Result<BuiltinPool, DriverError> {
        let resp = self.exchange_ok(&Request::Scan, Some(Duration::from_secs(30)))?;
        BuiltinPool::from_text(&resp.payload)
            .map_err(|e| DriverError::Protocol(format!("bad scan payload: {e}")))
    }

    fn primitive_token(&self, kind: PrimitiveKind) -> &'static str {
        match kind {
            PrimitiveKind::Int | PrimitiveKind::Float => "number",
            PrimitiveKind::Bool => "boolean",
            PrimitiveKind::Text | PrimitiveKind::Raw => "string",
        }
    }

    fn is_callable_type(&self, token: &str) -> bool {
        token == "function"
    }

    fn error_patterns(&self) -> &ErrorPatternSet {
        &self.patterns
    }
}

// ---------------------------------------------------------------------------
// Lua lowering
// ---------------------------------------------------------------------------

pub fn binary_token(op: BinaryOperator) -> &'static str {
    use BinaryOperator::*;
    match op {
        Add => "+",
        Sub => "-",
        Mul => "*",
        Div => "/",
        Mod => "%",
        Pow => "^",
        Eq => "==",
        NotEq => "~=",
        Lt => "<",
        Gt => ">",
        LtE => "<=",
        GtE => ">=",
        BitAnd => "&",
        BitOr => "|",
        BitXor => "~",
        LShift => "<<",
        RShift => ">>",
    }
}

fn unary_token(op: UnaryOperator) -> &'static str {
    match op {
        UnaryOperator::Neg => "-",
        UnaryOperator::Not => "not ",
        UnaryOperator::BitNot => "~",
    }
}

fn render_const(c: &ConstantValue) -> String {
    match c {
        // The most negative integer literal would parse as a float.
        ConstantValue::Integer(i64::MIN) => "(-9223372036854775807 - 1)".to_owned(),
        ConstantValue::Integer(v) => v.to_string(),
        ConstantValue::Float(v) => format!("{v:?}"),
        ConstantValue::Boolean(v) => v.to_string(),
        // Lua has no separate bytes type; both buffer kinds are strings.
        ConstantValue::Text(b) | ConstantValue::Raw(b) => quote_lua(b),
    }
}

fn quote_lua(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() + 2);
    s.push('"');
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            b'\r' => s.push_str("\\r"),
            b'\t' => s.push_str("\\t"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02X}")),
        }
    }
    s.push('"');
    s
}

fn render_operand(op: &Operand) -> String {
    match op {
        Operand::Ident(name) => name.as_str().to_owned(),
        Operand::Const(c) => render_const(c),
        Operand::Call(call) => {
            let args: Vec<String> = call.args.iter().map(render_operand).collect();
            format!("{}({})", call.callee, args.join(", "))
        }
    }
}

/// Attribute operands lower to dot access for plain names and bracket access
/// otherwise.
fn render_attr_access(obj: &str, attr: &Operand) -> String {
    match attr {
        Operand::Ident(name) => format!("{obj}.{name}"),
        other => format!("{obj}[{}]", render_operand(other)),
    }
}

fn serialize_exec(stmt: &ExecutionStmt) -> String {
    match stmt {
        ExecutionStmt::GetProp { dst, obj, attr } => {
            format!("{dst} = {}", render_attr_access(obj.as_str(), attr))
        }
        ExecutionStmt::SetProp { obj, value, attr } => {
            format!(
                "{} = {}",
                render_attr_access(obj.as_str(), attr),
                render_operand(value)
            )
        }
        ExecutionStmt::Call { dst, callee, args } => {
            let args: Vec<String> = args.iter().map(render_operand).collect();
            format!("{dst} = {callee}({})", args.join(", "))
        }
        ExecutionStmt::Return { value } => match value {
            Some(v) => format!("return {}", render_operand(v)),
            None => "return".to_owned(),
        },
        ExecutionStmt::Binary { dst, lhs, op, rhs } => {
            format!("{dst} = {lhs} {} {rhs}", binary_token(*op))
        }
        ExecutionStmt::Unary { dst, op, operand } => {
            format!("{dst} = {}{operand}", unary_token(*op))
        }
        ExecutionStmt::NewInstance {
            dst,
            class_name,
            args,
        } => {
            let args: Vec<String> = args.iter().map(render_operand).collect();
            format!("{dst} = {class_name}({})", args.join(", "))
        }
        ExecutionStmt::GetItem { dst, obj, idx } => {
            format!("{dst} = {obj}[{}]", render_operand(idx))
        }
        ExecutionStmt::SetItem { obj, idx, value } => {
            format!("{obj}[{}] = {}", render_operand(idx), render_operand(value))
        }
    }
}

fn indent(depth: usize) -> String {
    "  ".repeat(depth)
}

fn serialize_decl(decl: &DeclarationStmt, depth: usize) -> Result<String, DriverError> {
    let pad = indent(depth);
    match decl {
        DeclarationStmt::Var(v) => Ok(format!("{pad}{} = {}", v.name, render_const(&v.value))),
        DeclarationStmt::Import(i) => Ok(format!(
            "{pad}{m} = require(\"{m}\")\n{pad}for _k, _v in pairs({m}) do _G[_k] = _v end",
            m = i.module
        )),
        DeclarationStmt::Class(c) => {
            if !c.nested.is_empty() {
                // No Lua surface form exists for a class nested inside a
                // class body; generation keeps these at weight zero.
                return Err(DriverError::Unsupported {
                    target: "lua".into(),
                    what: "nested class declarations".into(),
                });
            }
            let mut out = String::new();
            out.push_str(&format!("{pad}{0} = {{}}\n", c.name));
            out.push_str(&format!("{pad}{0}.__index = {0}\n", c.name));
            out.push_str(&format!("{pad}{0}.__name = \"{0}\"\n", c.name));
            out.push_str(&format!(
                "{pad}setmetatable({0}, {{ __index = {1}, __call = function(_c, ...) return setmetatable({{}}, _c) end }})",
                c.name, c.base
            ));
            for m in &c.methods {
                out.push('\n');
                out.push_str(&serialize_method(c.name.as_str(), m, depth)?);
            }
            Ok(out)
        }
        DeclarationStmt::Function(f) => {
            let args: Vec<&str> = f.args.iter().map(|a| a.as_str()).collect();
            let mut out = format!("{pad}function {}({})\n", f.name, args.join(", "));
            let body = serialize_scope_at(&f.body, depth + 1)?;
            if !body.is_empty() {
                out.push_str(&body);
                out.push('\n');
            }
            out.push_str(&format!("{pad}end"));
            Ok(out)
        }
    }
}

fn serialize_method(
    class: &str,
    method: &FunctionDecl,
    depth: usize,
) -> Result<String, DriverError> {
    let pad = indent(depth);
    let args: Vec<&str> = method.args.iter().map(|a| a.as_str()).collect();
    let mut out = format!("{pad}{class}.{} = function({})\n", method.name, args.join(", "));
    // Assignments to captured names hit the global table by default, which is
    // exactly the capture semantics the tree records; no preamble required.
    let body = serialize_scope_at(&method.body, depth + 1)?;
    if !body.is_empty() {
        out.push_str(&body);
        out.push('\n');
    }
    out.push_str(&format!("{pad}end"));
    Ok(out)
}

fn serialize_scope_at(scope: &Scope, depth: usize) -> Result<String, DriverError> {
    let pad = indent(depth);
    let mut lines: Vec<String> = Vec::new();
    for decl in &scope.declarations {
        lines.push(serialize_decl(decl, depth)?);
    }
    for stmt in &scope.executions {
        lines.push(format!("{pad}{}", serialize_exec(stmt)));
    }
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{CallExpr, ClassDecl, Identifier, VarDecl};

    fn ident(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    #[test]
    fn statement_lowering_matches_lua_surface() {
        assert_eq!(
            serialize_exec(&ExecutionStmt::Call {
                dst: ident("ah52"),
                callee: ident("minute"),
                args: vec![],
            }),
            "ah52 = minute()"
        );
        assert_eq!(
            serialize_exec(&ExecutionStmt::SetItem {
                obj: ident("l82"),
                idx: Operand::Const(ConstantValue::Integer(110)),
                value: Operand::Ident(ident("z44")),
            }),
            "l82[110] = z44"
        );
        assert_eq!(
            serialize_exec(&ExecutionStmt::Binary {
                dst: ident("r0"),
                lhs: ident("a1"),
                op: BinaryOperator::NotEq,
                rhs: ident("b2"),
            }),
            "r0 = a1 ~= b2"
        );
        assert_eq!(
            serialize_exec(&ExecutionStmt::Unary {
                dst: ident("r1"),
                op: UnaryOperator::Not,
                operand: ident("a1"),
            }),
            "r1 = not a1"
        );
        assert_eq!(
            serialize_exec(&ExecutionStmt::GetProp {
                dst: ident("x0"),
                obj: ident("o1"),
                attr: Operand::Ident(ident("__index")),
            }),
            "x0 = o1.__index"
        );
    }

    #[test]
    fn var_lowering_handles_extremes() {
        let d = |v: ConstantValue| {
            serialize_decl(
                &DeclarationStmt::Var(VarDecl {
                    name: ident("int_b"),
                    value: v,
                }),
                0,
            )
            .unwrap()
        };
        assert_eq!(d(ConstantValue::Integer(-17)), "int_b = -17");
        assert_eq!(
            d(ConstantValue::Integer(i64::MIN)),
            "int_b = (-9223372036854775807 - 1)"
        );
        assert_eq!(
            d(ConstantValue::Raw(vec![0x00, 0x41, 0xff])),
            "int_b = \"\\x00A\\xFF\""
        );
    }

    #[test]
    fn class_block_uses_metatable_constructor_pattern() {
        let class = ClassDecl {
            name: ident("aa0"),
            base: ident("string"),
            nested: vec![],
            methods: vec![FunctionDecl {
                name: ident("__add"),
                args: vec![ident("arg0"), ident("arg1")],
                body: Scope {
                    executions: vec![ExecutionStmt::Return {
                        value: Some(Operand::Call(CallExpr {
                            callee: ident("rep"),
                            args: vec![Operand::Ident(ident("arg0"))],
                        })),
                    }],
                    ..Scope::default()
                },
            }],
        };
        let text = serialize_decl(&DeclarationStmt::Class(class), 0).unwrap();
        assert!(text.contains("aa0 = {}"));
        assert!(text.contains("aa0.__index = aa0"));
        assert!(text.contains("setmetatable(aa0, { __index = string"));
        assert!(text.contains("aa0.__add = function(arg0, arg1)"));
        assert!(text.contains("  return rep(arg0)"));
        assert!(text.ends_with("end"));
    }

    #[test]
    fn import_flattens_into_globals() {
        let text = serialize_decl(
            &DeclarationStmt::Import(crate::ast::ImportDecl {
                module: ident("math"),
            }),
            0,
        )
        .unwrap();
        assert!(text.contains("math = require(\"math\")"));
        assert!(text.contains("for _k, _v in pairs(math) do _G[_k] = _v end"));
    }
}
