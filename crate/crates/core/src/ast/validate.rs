//! Well-formedness checker run after every mutation in test builds.
//!
//! Checks the closure properties the mutators must preserve: every identifier
//! operand resolves at its use site, `return` appears only as the final
//! statement of a function body, capture lists are subsets of enclosing
//! bindings, and the scope count stays under the cap.

use std::collections::HashSet;

use super::{
    count_scopes, ClassDecl, DeclarationStmt, ExecutionStmt, FunctionDecl, Operand, Scope,
};

/// What the validator needs to know about the driver's built-in surface:
/// which names a module import makes visible and which names are legal
/// class bases.
pub trait BuiltinView {
    fn module_member_names(&self, module: &str) -> Vec<String>;
    fn is_base_type(&self, name: &str) -> bool;
}

/// Empty built-in surface, for trees that use no imports or built-in bases.
pub struct NoBuiltins;

impl BuiltinView for NoBuiltins {
    fn module_member_names(&self, _module: &str) -> Vec<String> {
        Vec::new()
    }
    fn is_base_type(&self, _name: &str) -> bool {
        false
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ValidateError {
    #[error("unresolved identifier {name:?} in {context}")]
    Unresolved { name: String, context: &'static str },
    #[error("return outside a function body")]
    ReturnOutsideFunction,
    #[error("return is not the final statement of its scope")]
    ReturnNotLast,
    #[error("capture {name:?} is not bound in an enclosing scope")]
    BadCapture { name: String },
    #[error("class base {base:?} is neither a built-in base nor a declared class")]
    BadClassBase { base: String },
    #[error("scope count {count} exceeds cap {cap}")]
    ScopeCapExceeded { count: usize, cap: usize },
}

pub fn validate(
    root: &Scope,
    builtins: &dyn BuiltinView,
    scope_cap: Option<usize>,
) -> Result<(), ValidateError> {
    if let Some(cap) = scope_cap {
        let count = count_scopes(root);
        if count > cap {
            return Err(ValidateError::ScopeCapExceeded { count, cap });
        }
    }
    let empty = HashSet::new();
    walk_scope(root, &empty, &[], false, builtins)
}

fn walk_scope(
    scope: &Scope,
    outer: &HashSet<String>,
    args: &[super::Identifier],
    is_function_body: bool,
    builtins: &dyn BuiltinView,
) -> Result<(), ValidateError> {
    for cap in &scope.global_refs {
        if !outer.contains(cap.as_str()) {
            return Err(ValidateError::BadCapture {
                name: cap.as_str().to_owned(),
            });
        }
    }

    // Visible set starts from the declared captures plus the function's own
    // parameters; everything else must be bound inside this scope before use.
    let mut visible: HashSet<String> = scope
        .global_refs
        .iter()
        .map(|i| i.as_str().to_owned())
        .collect();
    visible.extend(args.iter().map(|i| i.as_str().to_owned()));

    for decl in &scope.declarations {
        walk_declaration(decl, &mut visible, builtins)?;
    }

    let last = scope.executions.len().saturating_sub(1);
    for (idx, stmt) in scope.executions.iter().enumerate() {
        if matches!(stmt, ExecutionStmt::Return { .. }) {
            if !is_function_body {
                return Err(ValidateError::ReturnOutsideFunction);
            }
            if idx != last {
                return Err(ValidateError::ReturnNotLast);
            }
        }
        walk_execution(stmt, &visible)?;
        if let Some(dst) = stmt.dst() {
            visible.insert(dst.as_str().to_owned());
        }
    }
    Ok(())
}

fn walk_declaration(
    decl: &DeclarationStmt,
    visible: &mut HashSet<String>,
    builtins: &dyn BuiltinView,
) -> Result<(), ValidateError> {
    match decl {
        DeclarationStmt::Var(v) => {
            visible.insert(v.name.as_str().to_owned());
        }
        DeclarationStmt::Import(i) => {
            visible.insert(i.module.as_str().to_owned());
            // Imports are flattened into plain names by the serializers.
            for member in builtins.module_member_names(i.module.as_str()) {
                visible.insert(member);
            }
        }
        DeclarationStmt::Function(f) => {
            visible.insert(f.name.as_str().to_owned());
            walk_scope(&f.body, visible, &f.args, true, builtins)?;
        }
        DeclarationStmt::Class(c) => {
            walk_class(c, visible, builtins)?;
        }
    }
    Ok(())
}

fn walk_class(
    class: &ClassDecl,
    visible: &mut HashSet<String>,
    builtins: &dyn BuiltinView,
) -> Result<(), ValidateError> {
    if !builtins.is_base_type(class.base.as_str()) && !visible.contains(class.base.as_str()) {
        return Err(ValidateError::BadClassBase {
            base: class.base.as_str().to_owned(),
        });
    }
    visible.insert(class.name.as_str().to_owned());
    for nested in &class.nested {
        walk_class(nested, visible, builtins)?;
    }
    for method in &class.methods {
        // Method names live on the class, not in the scope's namespace.
        walk_method(method, visible, builtins)?;
    }
    Ok(())
}

fn walk_method(
    method: &FunctionDecl,
    visible: &HashSet<String>,
    builtins: &dyn BuiltinView,
) -> Result<(), ValidateError> {
    walk_scope(&method.body, visible, &method.args, true, builtins)
}

fn walk_execution(stmt: &ExecutionStmt, visible: &HashSet<String>) -> Result<(), ValidateError> {
    let check = |name: &super::Identifier, context: &'static str| {
        if visible.contains(name.as_str()) {
            Ok(())
        } else {
            Err(ValidateError::Unresolved {
                name: name.as_str().to_owned(),
                context,
            })
        }
    };
    // `attr` slots carry property names, not bindings, so they are exempt
    // from resolution; nested calls inside them still get checked.
    let check_attr = |attr: &Operand| match attr {
        Operand::Ident(_) | Operand::Const(_) => Ok(()),
        Operand::Call(call) => walk_operand(&Operand::Call(call.clone()), visible),
    };

    match stmt {
        ExecutionStmt::GetProp { obj, attr, .. } => {
            check(obj, "getprop object")?;
            check_attr(attr)
        }
        ExecutionStmt::SetProp { obj, value, attr } => {
            check(obj, "setprop object")?;
            walk_operand(value, visible)?;
            check_attr(attr)
        }
        ExecutionStmt::Call { callee, args, .. } => {
            check(callee, "callee")?;
            args.iter().try_for_each(|a| walk_operand(a, visible))
        }
        ExecutionStmt::Return { value } => match value {
            Some(v) => walk_operand(v, visible),
            None => Ok(()),
        },
        ExecutionStmt::Binary { lhs, rhs, .. } => {
            check(lhs, "binary lhs")?;
            check(rhs, "binary rhs")
        }
        ExecutionStmt::Unary { operand, .. } => check(operand, "unary operand"),
        ExecutionStmt::NewInstance {
            class_name, args, ..
        } => {
            check(class_name, "instantiated class")?;
            args.iter().try_for_each(|a| walk_operand(a, visible))
        }
        ExecutionStmt::GetItem { obj, idx, .. } => {
            check(obj, "getitem object")?;
            walk_operand(idx, visible)
        }
        ExecutionStmt::SetItem { obj, idx, value } => {
            check(obj, "setitem object")?;
            walk_operand(idx, visible)?;
            walk_operand(value, visible)
        }
    }
}

fn walk_operand(op: &Operand, visible: &HashSet<String>) -> Result<(), ValidateError> {
    match op {
        Operand::Ident(name) => {
            if visible.contains(name.as_str()) {
                Ok(())
            } else {
                Err(ValidateError::Unresolved {
                    name: name.as_str().to_owned(),
                    context: "operand",
                })
            }
        }
        Operand::Const(_) => Ok(()),
        Operand::Call(call) => {
            if !visible.contains(call.callee.as_str()) {
                return Err(ValidateError::Unresolved {
                    name: call.callee.as_str().to_owned(),
                    context: "nested callee",
                });
            }
            call.args.iter().try_for_each(|a| walk_operand(a, visible))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{ConstantValue, Identifier, VarDecl};

    fn ident(s: &str) -> Identifier {
        Identifier::new(s).unwrap()
    }

    fn var(name: &str) -> DeclarationStmt {
        DeclarationStmt::Var(VarDecl {
            name: ident(name),
            value: ConstantValue::Integer(0),
        })
    }

    #[test]
    fn unresolved_operand_rejected() {
        let root = Scope {
            executions: vec![ExecutionStmt::Unary {
                dst: ident("r0"),
                op: crate::ast::UnaryOperator::Neg,
                operand: ident("ghost"),
            }],
            ..Scope::default()
        };
        assert!(matches!(
            validate(&root, &NoBuiltins, None),
            Err(ValidateError::Unresolved { .. })
        ));
    }

    #[test]
    fn dst_of_earlier_line_is_usable_later() {
        let root = Scope {
            declarations: vec![var("int_0")],
            executions: vec![
                ExecutionStmt::Unary {
                    dst: ident("r0"),
                    op: crate::ast::UnaryOperator::Neg,
                    operand: ident("int_0"),
                },
                ExecutionStmt::Binary {
                    dst: ident("r1"),
                    lhs: ident("r0"),
                    op: crate::ast::BinaryOperator::Add,
                    rhs: ident("int_0"),
                },
            ],
            ..Scope::default()
        };
        validate(&root, &NoBuiltins, None).unwrap();
    }

    #[test]
    fn return_must_be_final_and_inside_function() {
        let top_level_return = Scope {
            executions: vec![ExecutionStmt::Return { value: None }],
            ..Scope::default()
        };
        assert_eq!(
            validate(&top_level_return, &NoBuiltins, None),
            Err(ValidateError::ReturnOutsideFunction)
        );

        let body = Scope {
            declarations: vec![var("int_0")],
            executions: vec![
                ExecutionStmt::Return { value: None },
                ExecutionStmt::Unary {
                    dst: ident("r0"),
                    op: crate::ast::UnaryOperator::Neg,
                    operand: ident("int_0"),
                },
            ],
            ..Scope::default()
        };
        let root = Scope {
            declarations: vec![DeclarationStmt::Function(FunctionDecl {
                name: ident("f0"),
                args: vec![],
                body,
            })],
            ..Scope::default()
        };
        assert_eq!(
            validate(&root, &NoBuiltins, None),
            Err(ValidateError::ReturnNotLast)
        );
    }

    #[test]
    fn capture_must_exist_in_enclosing_scope() {
        let body = Scope {
            global_refs: vec![ident("missing")],
            ..Scope::default()
        };
        let root = Scope {
            declarations: vec![DeclarationStmt::Function(FunctionDecl {
                name: ident("f0"),
                args: vec![],
                body,
            })],
            ..Scope::default()
        };
        assert!(matches!(
            validate(&root, &NoBuiltins, None),
            Err(ValidateError::BadCapture { .. })
        ));
    }

    #[test]
    fn scope_cap_enforced() {
        let body = Scope::default();
        let root = Scope {
            declarations: vec![DeclarationStmt::Function(FunctionDecl {
                name: ident("f0"),
                args: vec![],
                body,
            })],
            ..Scope::default()
        };
        assert!(validate(&root, &NoBuiltins, Some(2)).is_ok());
        assert_eq!(
            validate(&root, &NoBuiltins, Some(1)),
            Err(ValidateError::ScopeCapExceeded { count: 2, cap: 1 })
        );
    }
}
