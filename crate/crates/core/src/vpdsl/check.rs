use std::collections::HashSet;

use super::ast::*;
use super::CompileError;

/// Global names available to every program.
pub(super) const BUILTINS: [&str; 25] = [
    "ImagePatch",
    "bool_to_yesno",
    "best_image_match",
    "distance",
    "len",
    "any",
    "all",
    "abs",
    "min",
    "max",
    "sorted",
    "reversed",
    "sum",
    "range",
    "enumerate",
    "zip",
    "list",
    "tuple",
    "str",
    "int",
    "float",
    "bool",
    "round",
    "print",
    "isinstance",
];

/// Static checks performed after parsing: every referenced name must be
/// bound somewhere in the function or be a builtin, and `break`/`continue`
/// must sit inside a loop.
pub(super) fn check(ast: &ProgramAst) -> Result<(), CompileError> {
    let mut bound: HashSet<&str> = BUILTINS.iter().copied().collect();
    bound.insert(&ast.param);
    collect_stmts(&ast.body, &mut bound);
    let c = Checker { bound };
    c.stmts(&ast.body, 0)
}

fn collect_target<'a>(t: &'a Target, out: &mut HashSet<&'a str>) {
    match t {
        Target::Name(n) => {
            out.insert(n);
        }
        Target::Tuple(items) => items.iter().for_each(|i| collect_target(i, out)),
        Target::Index(..) => {}
    }
}

fn collect_stmts<'a>(body: &'a [Stmt], out: &mut HashSet<&'a str>) {
    for s in body {
        match s {
            Stmt::Assign { targets, value, .. } => {
                targets.iter().for_each(|t| collect_target(t, out));
                collect_expr(value, out);
            }
            Stmt::AugAssign { target, value, .. } => {
                collect_target(target, out);
                collect_expr(value, out);
            }
            Stmt::For { target, iter, body, .. } => {
                collect_target(target, out);
                collect_expr(iter, out);
                collect_stmts(body, out);
            }
            Stmt::While { cond, body, .. } => {
                collect_expr(cond, out);
                collect_stmts(body, out);
            }
            Stmt::If { branches, orelse, .. } => {
                for (c, b) in branches {
                    collect_expr(c, out);
                    collect_stmts(b, out);
                }
                collect_stmts(orelse, out);
            }
            Stmt::Expr(e) | Stmt::Return(Some(e), _) => collect_expr(e, out),
            Stmt::Return(None, _) | Stmt::Pass | Stmt::Break(_) | Stmt::Continue(_) => {}
        }
    }
}

/// Lambda parameters and comprehension targets also count as bindings.
fn collect_expr<'a>(e: &'a Expr, out: &mut HashSet<&'a str>) {
    visit(e, &mut |e| match &e.kind {
        ExprKind::Lambda { params, .. } => params.iter().for_each(|p| {
            out.insert(p);
        }),
        ExprKind::Comp { generators, .. } => generators.iter().for_each(|g| collect_target(&g.target, out)),
        _ => {}
    });
}

fn visit<'a>(e: &'a Expr, f: &mut impl FnMut(&'a Expr)) {
    f(e);
    match &e.kind {
        ExprKind::None
        | ExprKind::Bool(_)
        | ExprKind::Int(_)
        | ExprKind::Float(_)
        | ExprKind::Str(_)
        | ExprKind::Name(_) => {}
        ExprKind::FStr(parts) => {
            for p in parts {
                if let FPart::Expr(x, _) = p {
                    visit(x, f);
                }
            }
        }
        ExprKind::List(items) | ExprKind::Tuple(items) => items.iter().for_each(|x| visit(x, f)),
        ExprKind::Attr(v, _) => visit(v, f),
        ExprKind::Index(v, i) => {
            visit(v, f);
            visit(i, f);
        }
        ExprKind::Slice { value, lower, upper, step } => {
            visit(value, f);
            for x in [lower, upper, step].into_iter().flatten() {
                visit(x, f);
            }
        }
        ExprKind::Call { func, args, kwargs } => {
            visit(func, f);
            args.iter().for_each(|x| visit(x, f));
            kwargs.iter().for_each(|(_, x)| visit(x, f));
        }
        ExprKind::Unary(_, x) => visit(x, f),
        ExprKind::Binary(_, a, b) | ExprKind::And(a, b) | ExprKind::Or(a, b) => {
            visit(a, f);
            visit(b, f);
        }
        ExprKind::Compare(a, rest) => {
            visit(a, f);
            rest.iter().for_each(|(_, x)| visit(x, f));
        }
        ExprKind::IfExp { cond, then, orelse } => {
            visit(cond, f);
            visit(then, f);
            visit(orelse, f);
        }
        ExprKind::Lambda { body, .. } => visit(body, f),
        ExprKind::Comp { elt, generators } => {
            visit(elt, f);
            for g in generators {
                visit(&g.iter, f);
                g.conds.iter().for_each(|x| visit(x, f));
                target_exprs(&g.target, f);
            }
        }
    }
}

fn target_exprs<'a>(t: &'a Target, f: &mut impl FnMut(&'a Expr)) {
    match t {
        Target::Name(_) => {}
        Target::Index(v, i) => {
            visit(v, f);
            visit(i, f);
        }
        Target::Tuple(items) => items.iter().for_each(|i| target_exprs(i, f)),
    }
}

struct Checker<'a> {
    bound: HashSet<&'a str>,
}

impl<'a> Checker<'a> {
    fn stmts(&self, body: &'a [Stmt], loops: usize) -> Result<(), CompileError> {
        for s in body {
            match s {
                Stmt::Assign { targets, value, .. } => {
                    targets.iter().try_for_each(|t| self.target(t))?;
                    self.expr(value)?;
                }
                Stmt::AugAssign { target, value, .. } => {
                    self.target(target)?;
                    self.expr(value)?;
                }
                Stmt::Expr(e) | Stmt::Return(Some(e), _) => self.expr(e)?,
                Stmt::If { branches, orelse, .. } => {
                    for (c, b) in branches {
                        self.expr(c)?;
                        self.stmts(b, loops)?;
                    }
                    self.stmts(orelse, loops)?;
                }
                Stmt::For { target, iter, body, .. } => {
                    self.target(target)?;
                    self.expr(iter)?;
                    self.stmts(body, loops + 1)?;
                }
                Stmt::While { cond, body, .. } => {
                    self.expr(cond)?;
                    self.stmts(body, loops + 1)?;
                }
                Stmt::Break(pos) if loops == 0 => return Err(CompileError::new(*pos, "'break' outside loop")),
                Stmt::Continue(pos) if loops == 0 => {
                    return Err(CompileError::new(*pos, "'continue' not properly in loop"))
                }
                Stmt::Return(None, _) | Stmt::Pass | Stmt::Break(_) | Stmt::Continue(_) => {}
            }
        }
        Ok(())
    }

    fn target(&self, t: &'a Target) -> Result<(), CompileError> {
        let mut err = None;
        target_exprs(t, &mut |e| {
            if err.is_none() {
                err = self.name_ok(e).err();
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn expr(&self, e: &'a Expr) -> Result<(), CompileError> {
        let mut err = None;
        visit(e, &mut |e| {
            if err.is_none() {
                err = self.name_ok(e).err();
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn name_ok(&self, e: &Expr) -> Result<(), CompileError> {
        if let ExprKind::Name(n) = &e.kind {
            if !self.bound.contains(n.as_str()) {
                return Err(CompileError::new(e.pos, format!("name '{n}' is not defined")));
            }
        }
        Ok(())
    }
}
