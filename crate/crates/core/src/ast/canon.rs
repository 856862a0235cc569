//! Canonical tree text format: one node per line, two-space depth prefix,
//! self-describing tags. Writing the same tree always yields the same bytes,
//! and every written tree parses back to an equal tree.

use super::{
    BinaryOperator, CallExpr, ClassDecl, ConstantValue, DeclarationStmt, ExecutionStmt,
    FunctionDecl, Identifier, ImportDecl, Operand, Scope, UnaryOperator, VarDecl,
};

pub fn write_scope(scope: &Scope) -> String {
    let mut out = String::new();
    emit_scope(&mut out, scope, 0);
    out
}

pub fn parse_scope(text: &str) -> Result<Scope, CanonError> {
    let lines = lex(text)?;
    let mut pos = 0;
    let scope = parse_scope_at(&lines, &mut pos, 0)?;
    if pos != lines.len() {
        return Err(CanonError::at(lines[pos].number, "trailing content"));
    }
    Ok(scope)
}

#[derive(Debug, thiserror::Error)]
#[error("canonical tree, line {line}: {message}")]
pub struct CanonError {
    pub line: usize,
    pub message: String,
}

impl CanonError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        CanonError {
            line,
            message: message.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// writing
// ---------------------------------------------------------------------------

fn push_line(out: &mut String, depth: usize, body: &str) {
    for _ in 0..depth {
        out.push_str("  ");
    }
    out.push_str(body);
    out.push('\n');
}

fn emit_scope(out: &mut String, scope: &Scope, depth: usize) {
    push_line(out, depth, "scope");
    let mut refline = String::from("ref");
    for r in &scope.global_refs {
        refline.push(' ');
        refline.push_str(r.as_str());
    }
    push_line(out, depth + 1, &refline);
    for decl in &scope.declarations {
        emit_declaration(out, decl, depth + 1);
    }
    for stmt in &scope.executions {
        emit_execution(out, stmt, depth + 1);
    }
}

fn emit_declaration(out: &mut String, decl: &DeclarationStmt, depth: usize) {
    match decl {
        DeclarationStmt::Var(v) => {
            push_line(out, depth, &format!("var {}", v.name));
            push_line(out, depth + 1, &render_const(&v.value));
        }
        DeclarationStmt::Import(i) => {
            push_line(out, depth, &format!("import {}", i.module));
        }
        DeclarationStmt::Function(f) => {
            emit_function(out, "fn", f, depth);
        }
        DeclarationStmt::Class(c) => emit_class(out, c, depth),
    }
}

fn emit_class(out: &mut String, class: &ClassDecl, depth: usize) {
    push_line(out, depth, &format!("class {} {}", class.name, class.base));
    for nested in &class.nested {
        emit_class(out, nested, depth + 1);
    }
    for method in &class.methods {
        emit_function(out, "method", method, depth + 1);
    }
}

fn emit_function(out: &mut String, tag: &str, f: &FunctionDecl, depth: usize) {
    let mut line = format!("{tag} {}", f.name);
    for a in &f.args {
        line.push(' ');
        line.push_str(a.as_str());
    }
    push_line(out, depth, &line);
    emit_scope(out, &f.body, depth + 1);
}

fn emit_execution(out: &mut String, stmt: &ExecutionStmt, depth: usize) {
    match stmt {
        ExecutionStmt::GetProp { dst, obj, attr } => {
            push_line(out, depth, &format!("getprop {dst} {obj}"));
            emit_operand(out, "attr", attr, depth + 1);
        }
        ExecutionStmt::SetProp { obj, value, attr } => {
            push_line(out, depth, &format!("setprop {obj}"));
            emit_operand(out, "attr", attr, depth + 1);
            emit_operand(out, "value", value, depth + 1);
        }
        ExecutionStmt::Call { dst, callee, args } => {
            push_line(out, depth, &format!("call {dst} {callee}"));
            for a in args {
                emit_operand(out, "arg", a, depth + 1);
            }
        }
        ExecutionStmt::Return { value } => {
            push_line(out, depth, "return");
            if let Some(v) = value {
                emit_operand(out, "value", v, depth + 1);
            }
        }
        ExecutionStmt::Binary { dst, lhs, op, rhs } => {
            push_line(out, depth, &format!("binop {dst} {lhs} {op} {rhs}"));
        }
        ExecutionStmt::Unary { dst, op, operand } => {
            push_line(out, depth, &format!("unop {dst} {op} {operand}"));
        }
        ExecutionStmt::NewInstance {
            dst,
            class_name,
            args,
        } => {
            push_line(out, depth, &format!("new {dst} {class_name}"));
            for a in args {
                emit_operand(out, "arg", a, depth + 1);
            }
        }
        ExecutionStmt::GetItem { dst, obj, idx } => {
            push_line(out, depth, &format!("getitem {dst} {obj}"));
            emit_operand(out, "idx", idx, depth + 1);
        }
        ExecutionStmt::SetItem { obj, idx, value } => {
            push_line(out, depth, &format!("setitem {obj}"));
            emit_operand(out, "idx", idx, depth + 1);
            emit_operand(out, "value", value, depth + 1);
        }
    }
}

fn emit_operand(out: &mut String, slot: &str, op: &Operand, depth: usize) {
    match op {
        Operand::Ident(name) => push_line(out, depth, &format!("{slot} ident {name}")),
        Operand::Const(c) => push_line(out, depth, &format!("{slot} {}", render_const(c))),
        Operand::Call(call) => {
            push_line(out, depth, &format!("{slot} callx {}", call.callee));
            for a in &call.args {
                emit_operand(out, "arg", a, depth + 1);
            }
        }
    }
}

fn render_const(c: &ConstantValue) -> String {
    match c {
        ConstantValue::Integer(v) => format!("const int {v}"),
        ConstantValue::Float(v) => format!("const float {v:?}"),
        ConstantValue::Boolean(v) => format!("const bool {v}"),
        ConstantValue::Text(b) => format!("const text {}", quote_bytes(b)),
        ConstantValue::Raw(b) => format!("const raw {}", quote_bytes(b)),
    }
}

/// Bijective byte-sequence quoting: printable ASCII stays literal, everything
/// else (plus quote and backslash) becomes an escape.
pub fn quote_bytes(bytes: &[u8]) -> String {
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
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s.push('"');
    s
}

pub fn unquote_bytes(s: &str) -> Option<Vec<u8>> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::with_capacity(inner.len());
    let mut it = inner.bytes();
    while let Some(b) = it.next() {
        if b != b'\\' {
            if !(0x20..=0x7e).contains(&b) {
                return None;
            }
            out.push(b);
            continue;
        }
        match it.next()? {
            b'"' => out.push(b'"'),
            b'\\' => out.push(b'\\'),
            b'n' => out.push(b'\n'),
            b'r' => out.push(b'\r'),
            b't' => out.push(b'\t'),
            b'x' => {
                let hi = hex_val(it.next()?)?;
                let lo = hex_val(it.next()?)?;
                out.push(hi * 16 + lo);
            }
            _ => return None,
        }
    }
    Some(out)
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

struct Line<'a> {
    number: usize,
    depth: usize,
    tokens: Vec<&'a str>,
}

fn lex(text: &str) -> Result<Vec<Line<'_>>, CanonError> {
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let stripped = raw.trim_start_matches(' ');
        let spaces = raw.len() - stripped.len();
        if spaces % 2 != 0 {
            return Err(CanonError::at(number, "odd indentation"));
        }
        // Quoted fields are always the final token; split only outside them.
        let tokens = split_tokens(stripped)
            .ok_or_else(|| CanonError::at(number, "unterminated quote"))?;
        lines.push(Line {
            number,
            depth: spaces / 2,
            tokens,
        });
    }
    Ok(lines)
}

fn split_tokens(s: &str) -> Option<Vec<&str>> {
    let mut tokens = Vec::new();
    let mut rest = s;
    loop {
        rest = rest.trim_start_matches(' ');
        if rest.is_empty() {
            return Some(tokens);
        }
        if rest.starts_with('"') {
            // Consumes through the closing quote, honoring escapes.
            let bytes = rest.as_bytes();
            let mut i = 1;
            while i < bytes.len() {
                match bytes[i] {
                    b'\\' => i += 2,
                    b'"' => {
                        tokens.push(&rest[..=i]);
                        rest = &rest[i + 1..];
                        break;
                    }
                    _ => i += 1,
                }
            }
            if i >= bytes.len() {
                return None;
            }
        } else {
            let end = rest.find(' ').unwrap_or(rest.len());
            tokens.push(&rest[..end]);
            rest = &rest[end..];
        }
    }
}

fn ident_tok(line: &Line<'_>, tok: &str) -> Result<Identifier, CanonError> {
    Identifier::new(tok).map_err(|_| CanonError::at(line.number, format!("bad identifier {tok:?}")))
}

fn parse_scope_at(lines: &[Line<'_>], pos: &mut usize, depth: usize) -> Result<Scope, CanonError> {
    let header = lines
        .get(*pos)
        .ok_or_else(|| CanonError::at(0, "missing scope header"))?;
    if header.depth != depth || header.tokens != ["scope"] {
        return Err(CanonError::at(header.number, "expected scope"));
    }
    *pos += 1;

    let refline = lines
        .get(*pos)
        .filter(|l| l.depth == depth + 1 && l.tokens.first() == Some(&"ref"))
        .ok_or_else(|| CanonError::at(header.number, "scope missing ref line"))?;
    let mut scope = Scope::default();
    for tok in &refline.tokens[1..] {
        scope.global_refs.push(ident_tok(refline, tok)?);
    }
    *pos += 1;

    while let Some(line) = lines.get(*pos) {
        if line.depth <= depth {
            break;
        }
        if line.depth != depth + 1 {
            return Err(CanonError::at(line.number, "unexpected indentation"));
        }
        match line.tokens[0] {
            "var" | "import" | "fn" | "class" => {
                scope.declarations.push(parse_declaration(lines, pos)?)
            }
            _ => scope.executions.push(parse_execution(lines, pos)?),
        }
    }
    Ok(scope)
}

fn parse_declaration(lines: &[Line<'_>], pos: &mut usize) -> Result<DeclarationStmt, CanonError> {
    let line = &lines[*pos];
    let depth = line.depth;
    match line.tokens.as_slice() {
        ["var", name] => {
            let name = ident_tok(line, name)?;
            *pos += 1;
            let value = parse_const_line(lines, pos, depth + 1)?;
            Ok(DeclarationStmt::Var(VarDecl { name, value }))
        }
        ["import", module] => {
            let module = ident_tok(line, module)?;
            *pos += 1;
            Ok(DeclarationStmt::Import(ImportDecl { module }))
        }
        toks if toks.first() == Some(&"fn") => {
            Ok(DeclarationStmt::Function(parse_function(lines, pos)?))
        }
        ["class", _, _] => Ok(DeclarationStmt::Class(parse_class(lines, pos)?)),
        _ => Err(CanonError::at(line.number, "malformed declaration")),
    }
}

fn parse_class(lines: &[Line<'_>], pos: &mut usize) -> Result<ClassDecl, CanonError> {
    let line = &lines[*pos];
    let depth = line.depth;
    let (name, base) = match line.tokens.as_slice() {
        ["class", name, base] => (ident_tok(line, name)?, ident_tok(line, base)?),
        _ => return Err(CanonError::at(line.number, "malformed class")),
    };
    *pos += 1;
    let mut class = ClassDecl {
        name,
        base,
        nested: Vec::new(),
        methods: Vec::new(),
    };
    while let Some(child) = lines.get(*pos) {
        if child.depth != depth + 1 {
            break;
        }
        match child.tokens[0] {
            "class" => class.nested.push(parse_class(lines, pos)?),
            "method" => class.methods.push(parse_function(lines, pos)?),
            _ => return Err(CanonError::at(child.number, "unexpected class child")),
        }
    }
    Ok(class)
}

fn parse_function(lines: &[Line<'_>], pos: &mut usize) -> Result<FunctionDecl, CanonError> {
    let line = &lines[*pos];
    let depth = line.depth;
    if line.tokens.len() < 2 {
        return Err(CanonError::at(line.number, "malformed function"));
    }
    let name = ident_tok(line, line.tokens[1])?;
    let mut args = Vec::new();
    for tok in &line.tokens[2..] {
        args.push(ident_tok(line, tok)?);
    }
    *pos += 1;
    let body = parse_scope_at(lines, pos, depth + 1)?;
    Ok(FunctionDecl { name, args, body })
}

fn parse_execution(lines: &[Line<'_>], pos: &mut usize) -> Result<ExecutionStmt, CanonError> {
    let line = &lines[*pos];
    let depth = line.depth;
    let number = line.number;
    let stmt = match line.tokens.as_slice() {
        ["getprop", dst, obj] => {
            let (dst, obj) = (ident_tok(line, dst)?, ident_tok(line, obj)?);
            *pos += 1;
            let attr = parse_operand(lines, pos, depth + 1, "attr")?;
            ExecutionStmt::GetProp { dst, obj, attr }
        }
        ["setprop", obj] => {
            let obj = ident_tok(line, obj)?;
            *pos += 1;
            let attr = parse_operand(lines, pos, depth + 1, "attr")?;
            let value = parse_operand(lines, pos, depth + 1, "value")?;
            ExecutionStmt::SetProp { obj, value, attr }
        }
        ["call", dst, callee] => {
            let (dst, callee) = (ident_tok(line, dst)?, ident_tok(line, callee)?);
            *pos += 1;
            let args = parse_args(lines, pos, depth + 1)?;
            ExecutionStmt::Call { dst, callee, args }
        }
        ["return"] => {
            *pos += 1;
            let value = match lines.get(*pos) {
                Some(l) if l.depth == depth + 1 && l.tokens.first() == Some(&"value") => {
                    Some(parse_operand(lines, pos, depth + 1, "value")?)
                }
                _ => None,
            };
            ExecutionStmt::Return { value }
        }
        ["binop", dst, lhs, op, rhs] => {
            let op = BinaryOperator::from_name(op)
                .ok_or_else(|| CanonError::at(number, format!("unknown operator {op:?}")))?;
            let stmt = ExecutionStmt::Binary {
                dst: ident_tok(line, dst)?,
                lhs: ident_tok(line, lhs)?,
                op,
                rhs: ident_tok(line, rhs)?,
            };
            *pos += 1;
            stmt
        }
        ["unop", dst, op, operand] => {
            let op = UnaryOperator::from_name(op)
                .ok_or_else(|| CanonError::at(number, format!("unknown operator {op:?}")))?;
            let stmt = ExecutionStmt::Unary {
                dst: ident_tok(line, dst)?,
                op,
                operand: ident_tok(line, operand)?,
            };
            *pos += 1;
            stmt
        }
        ["new", dst, class_name] => {
            let (dst, class_name) = (ident_tok(line, dst)?, ident_tok(line, class_name)?);
            *pos += 1;
            let args = parse_args(lines, pos, depth + 1)?;
            ExecutionStmt::NewInstance {
                dst,
                class_name,
                args,
            }
        }
        ["getitem", dst, obj] => {
            let (dst, obj) = (ident_tok(line, dst)?, ident_tok(line, obj)?);
            *pos += 1;
            let idx = parse_operand(lines, pos, depth + 1, "idx")?;
            ExecutionStmt::GetItem { dst, obj, idx }
        }
        ["setitem", obj] => {
            let obj = ident_tok(line, obj)?;
            *pos += 1;
            let idx = parse_operand(lines, pos, depth + 1, "idx")?;
            let value = parse_operand(lines, pos, depth + 1, "value")?;
            ExecutionStmt::SetItem { obj, idx, value }
        }
        _ => return Err(CanonError::at(number, "malformed statement")),
    };
    Ok(stmt)
}

fn parse_args(lines: &[Line<'_>], pos: &mut usize, depth: usize) -> Result<Vec<Operand>, CanonError> {
    let mut args = Vec::new();
    while let Some(l) = lines.get(*pos) {
        if l.depth != depth || l.tokens.first() != Some(&"arg") {
            break;
        }
        args.push(parse_operand(lines, pos, depth, "arg")?);
    }
    Ok(args)
}

fn parse_operand(
    lines: &[Line<'_>],
    pos: &mut usize,
    depth: usize,
    slot: &str,
) -> Result<Operand, CanonError> {
    let line = lines
        .get(*pos)
        .ok_or_else(|| CanonError::at(0, format!("missing {slot} operand")))?;
    if line.depth != depth || line.tokens.first() != Some(&slot) {
        return Err(CanonError::at(
            line.number,
            format!("expected {slot} operand"),
        ));
    }
    match line.tokens.as_slice() {
        [_, "ident", name] => {
            let op = Operand::Ident(ident_tok(line, name)?);
            *pos += 1;
            Ok(op)
        }
        [_, "callx", callee] => {
            let callee = ident_tok(line, callee)?;
            *pos += 1;
            let args = parse_args(lines, pos, depth + 1)?;
            Ok(Operand::Call(CallExpr { callee, args }))
        }
        [_, "const", ..] => {
            let c = const_from_tokens(line, &line.tokens[1..])?;
            *pos += 1;
            Ok(Operand::Const(c))
        }
        _ => Err(CanonError::at(line.number, "malformed operand")),
    }
}

fn parse_const_line(
    lines: &[Line<'_>],
    pos: &mut usize,
    depth: usize,
) -> Result<ConstantValue, CanonError> {
    let line = lines
        .get(*pos)
        .ok_or_else(|| CanonError::at(0, "missing constant"))?;
    if line.depth != depth {
        return Err(CanonError::at(line.number, "expected constant"));
    }
    let c = const_from_tokens(line, &line.tokens)?;
    *pos += 1;
    Ok(c)
}

fn const_from_tokens(line: &Line<'_>, tokens: &[&str]) -> Result<ConstantValue, CanonError> {
    let err = |m: &str| CanonError::at(line.number, m.to_owned());
    match tokens {
        ["const", "int", v] => v
            .parse()
            .map(ConstantValue::Integer)
            .map_err(|_| err("bad integer")),
        ["const", "float", v] => v
            .parse()
            .map(ConstantValue::Float)
            .map_err(|_| err("bad float")),
        ["const", "bool", v] => v
            .parse()
            .map(ConstantValue::Boolean)
            .map_err(|_| err("bad bool")),
        ["const", "text", q] => unquote_bytes(q)
            .map(ConstantValue::Text)
            .ok_or_else(|| err("bad text literal")),
        ["const", "raw", q] => unquote_bytes(q)
            .map(ConstantValue::Raw)
            .ok_or_else(|| err("bad raw literal")),
        _ => Err(err("malformed constant")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn sample_scope() -> Scope {
        let body = Scope {
            global_refs: vec![ident("dict_a")],
            declarations: vec![DeclarationStmt::Import(ImportDecl {
                module: ident("math"),
            })],
            executions: vec![
                ExecutionStmt::SetItem {
                    obj: ident("l82"),
                    idx: Operand::Const(ConstantValue::Integer(110)),
                    value: Operand::Ident(ident("dict_a")),
                },
                ExecutionStmt::Return {
                    value: Some(Operand::Call(CallExpr {
                        callee: ident("minute"),
                        args: vec![Operand::Const(ConstantValue::Text(b"a\"b\\\x01".to_vec()))],
                    })),
                },
            ],
        };
        Scope {
            global_refs: vec![],
            declarations: vec![
                DeclarationStmt::Var(VarDecl {
                    name: ident("int_a"),
                    value: ConstantValue::Integer(831522344197812962),
                }),
                DeclarationStmt::Var(VarDecl {
                    name: ident("float_a"),
                    value: ConstantValue::Float(-0.5),
                }),
                DeclarationStmt::Class(ClassDecl {
                    name: ident("aaa"),
                    base: ident("bytes"),
                    nested: vec![],
                    methods: vec![FunctionDecl {
                        name: ident("rstrip"),
                        args: vec![ident("arg_a"), ident("arg_b")],
                        body,
                    }],
                }),
            ],
            executions: vec![ExecutionStmt::Binary {
                dst: ident("r0"),
                lhs: ident("int_a"),
                op: BinaryOperator::Pow,
                rhs: ident("int_a"),
            }],
        }
    }

    #[test]
    fn round_trip_equals_original() {
        let scope = sample_scope();
        let text = write_scope(&scope);
        let parsed = parse_scope(&text).unwrap();
        assert_eq!(parsed, scope);
        // Writing again is byte-identical.
        assert_eq!(write_scope(&parsed), text);
    }

    #[test]
    fn quoting_is_bijective_over_all_bytes() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(unquote_bytes(&quote_bytes(&all)).unwrap(), all);
        assert_eq!(unquote_bytes("\"\"").unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_scope("scope\n   ref\n").is_err()); // odd indent
        assert!(parse_scope("scope\n").is_err()); // missing ref
        assert!(parse_scope("scope\n  ref\n  binop a b Wat c\n").is_err());
    }
}
