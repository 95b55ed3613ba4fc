use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::CompileError;

pub const ENTRY_POINT: &str = "execute_command";
const MAX_DEPTH: usize = 100;

const FORBIDDEN_STATEMENTS: [&str; 15] = [
    "import", "from", "class", "try", "except", "finally", "with", "global", "nonlocal", "del", "raise", "assert",
    "yield", "async", "await",
];

const KEYWORDS: [&str; 32] = [
    "def", "return", "if", "elif", "else", "for", "in", "while", "break", "continue", "pass", "and", "or", "not",
    "is", "None", "True", "False", "lambda", "import", "from", "class", "try", "except", "finally", "with",
    "global", "nonlocal", "del", "raise", "assert", "yield",
];

pub fn parse(src: &str) -> Result<ProgramAst, CompileError> {
    let tokens = tokenize(src)?;
    let mut p = Parser { toks: tokens, i: 0, depth: 0 };
    p.program()
}

struct Parser {
    toks: Vec<Token>,
    i: usize,
    depth: usize,
}

type PResult<T> = Result<T, CompileError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.i].tok
    }

    fn peek_at(&self, off: usize) -> &Tok {
        let j = (self.i + off).min(self.toks.len() - 1);
        &self.toks[j].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.i].pos
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i < self.toks.len() - 1 {
            self.i += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        Err(CompileError::new(self.pos(), msg))
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Name(n) => format!("'{n}'"),
            Tok::Int(v) => v.to_string(),
            Tok::Float(v) => v.to_string(),
            Tok::Str(_) | Tok::FStr(_) => "string literal".into(),
            Tok::Op(o) => format!("'{o}'"),
            Tok::Newline => "end of line".into(),
            Tok::Indent => "indent".into(),
            Tok::Dedent => "dedent".into(),
            Tok::Eof => "end of input".into(),
        }
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(self.peek(), Tok::Op(o) if *o == op)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Name(n) if n == kw)
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.is_op(op) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> PResult<()> {
        if self.eat_op(op) {
            Ok(())
        } else {
            self.err(format!("expected '{op}', found {}", self.describe()))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected '{kw}', found {}", self.describe()))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Name(n) if !KEYWORDS.contains(&n.as_str()) => {
                self.advance();
                Ok(n)
            }
            _ => self.err(format!("expected a name, found {}", self.describe())),
        }
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Tok::Newline) {
            self.advance();
        }
    }

    fn check_forbidden(&self) -> PResult<()> {
        if let Tok::Name(n) = self.peek() {
            if FORBIDDEN_STATEMENTS.contains(&n.as_str()) {
                return self.err(format!("'{n}' is not supported"));
            }
        }
        Ok(())
    }

    fn program(&mut self) -> PResult<ProgramAst> {
        self.skip_newlines();
        self.check_forbidden()?;
        if !self.is_kw("def") {
            return self.err(format!("expected 'def {ENTRY_POINT}(image):', found {}", self.describe()));
        }
        self.advance();
        let name = self.ident()?;
        if name != ENTRY_POINT {
            return self.err(format!("the program must define {ENTRY_POINT}, found {name}"));
        }
        self.expect_op("(")?;
        let param = self.ident()?;
        if self.eat_op(":") {
            self.test()?;
        }
        if !self.is_op(")") {
            return self.err(format!("{ENTRY_POINT} takes exactly one parameter"));
        }
        self.advance();
        if self.eat_op("->") {
            self.test()?;
        }
        self.expect_op(":")?;
        let body = self.suite()?;
        self.skip_newlines();
        if !matches!(self.peek(), Tok::Eof) {
            self.check_forbidden()?;
            return self.err(format!("only {ENTRY_POINT} may be defined at top level, found {}", self.describe()));
        }
        Ok(ProgramAst { param, body })
    }

    fn suite(&mut self) -> PResult<Vec<Stmt>> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.err("blocks nested too deeply");
        }
        let r = self.suite_inner();
        self.depth -= 1;
        r
    }

    fn suite_inner(&mut self) -> PResult<Vec<Stmt>> {
        if !matches!(self.peek(), Tok::Newline) {
            return self.simple_statements();
        }
        self.skip_newlines();
        if !matches!(self.peek(), Tok::Indent) {
            return self.err("expected an indented block");
        }
        self.advance();
        let mut body = Vec::new();
        loop {
            self.skip_newlines();
            if matches!(self.peek(), Tok::Dedent) {
                self.advance();
                break;
            }
            if matches!(self.peek(), Tok::Eof) {
                break;
            }
            body.extend(self.statement()?);
        }
        Ok(body)
    }

    fn statement(&mut self) -> PResult<Vec<Stmt>> {
        self.check_forbidden()?;
        let pos = self.pos();
        if matches!(self.peek(), Tok::Indent) {
            return self.err("unexpected indent");
        }
        if self.eat_kw("def") {
            return Err(CompileError::new(pos, "nested function definitions are not supported"));
        }
        if self.eat_kw("if") {
            return Ok(vec![self.if_rest(pos)?]);
        }
        if self.eat_kw("for") {
            let target = self.target_list()?;
            self.expect_kw("in")?;
            let iter = self.testlist()?;
            self.expect_op(":")?;
            let body = self.suite()?;
            if self.is_kw("else") {
                return self.err("for/else is not supported");
            }
            return Ok(vec![Stmt::For { target, iter, body, pos }]);
        }
        if self.eat_kw("while") {
            let cond = self.test()?;
            self.expect_op(":")?;
            let body = self.suite()?;
            if self.is_kw("else") {
                return self.err("while/else is not supported");
            }
            return Ok(vec![Stmt::While { cond, body, pos }]);
        }
        self.simple_statements()
    }

    fn if_rest(&mut self, pos: Pos) -> PResult<Stmt> {
        let mut branches = Vec::new();
        let cond = self.test()?;
        self.expect_op(":")?;
        branches.push((cond, self.suite()?));
        let mut orelse = Vec::new();
        loop {
            self.skip_newlines_before_continuation();
            if self.eat_kw("elif") {
                let cond = self.test()?;
                self.expect_op(":")?;
                branches.push((cond, self.suite()?));
            } else if self.eat_kw("else") {
                self.expect_op(":")?;
                orelse = self.suite()?;
                break;
            } else {
                break;
            }
        }
        Ok(Stmt::If { branches, orelse, pos })
    }

    /// `elif`/`else` follow a dedent-free newline when the preceding suite
    /// was a one-liner.
    fn skip_newlines_before_continuation(&mut self) {
        let mut j = self.i;
        while matches!(self.toks[j].tok, Tok::Newline) {
            j += 1;
        }
        if matches!(&self.toks[j].tok, Tok::Name(n) if n == "elif" || n == "else") {
            self.i = j;
        }
    }

    fn simple_statements(&mut self) -> PResult<Vec<Stmt>> {
        let mut out = vec![self.simple_statement()?];
        while self.eat_op(";") {
            if matches!(self.peek(), Tok::Newline | Tok::Eof) {
                break;
            }
            out.push(self.simple_statement()?);
        }
        match self.peek() {
            Tok::Newline => {
                self.advance();
            }
            Tok::Eof | Tok::Dedent => {}
            _ => return self.err(format!("invalid syntax near {}", self.describe())),
        }
        Ok(out)
    }

    fn simple_statement(&mut self) -> PResult<Stmt> {
        self.check_forbidden()?;
        let pos = self.pos();
        if self.eat_kw("pass") {
            return Ok(Stmt::Pass);
        }
        if self.eat_kw("break") {
            return Ok(Stmt::Break(pos));
        }
        if self.eat_kw("continue") {
            return Ok(Stmt::Continue(pos));
        }
        if self.eat_kw("return") {
            if matches!(self.peek(), Tok::Newline | Tok::Eof | Tok::Dedent) || self.is_op(";") {
                return Ok(Stmt::Return(None, pos));
            }
            return Ok(Stmt::Return(Some(self.testlist()?), pos));
        }
        for kw in ["def", "if", "for", "while", "elif", "else"] {
            if self.is_kw(kw) {
                return self.err(format!("invalid syntax: unexpected '{kw}'"));
            }
        }
        let first = self.testlist()?;
        if self.is_op("=") {
            let mut exprs = vec![first];
            while self.eat_op("=") {
                exprs.push(self.testlist()?);
            }
            let value = exprs.pop().expect("at least two expressions");
            let targets = exprs.into_iter().map(to_target).collect::<PResult<Vec<_>>>()?;
            return Ok(Stmt::Assign { targets, value, pos });
        }
        let aug = match self.peek() {
            Tok::Op("+=") => Some(BinOp::Add),
            Tok::Op("-=") => Some(BinOp::Sub),
            Tok::Op("*=") => Some(BinOp::Mul),
            Tok::Op("/=") => Some(BinOp::Div),
            Tok::Op("//=") => Some(BinOp::FloorDiv),
            Tok::Op("%=") => Some(BinOp::Mod),
            Tok::Op("**=") => Some(BinOp::Pow),
            Tok::Op(o @ ("&=" | "|=" | ":=")) => return self.err(format!("operator '{o}' is not supported")),
            _ => None,
        };
        if let Some(op) = aug {
            self.advance();
            let target = to_target(first)?;
            if matches!(target, Target::Tuple(_)) {
                return Err(CompileError::new(pos, "illegal expression for augmented assignment"));
            }
            let value = self.testlist()?;
            return Ok(Stmt::AugAssign { target, op, value, pos });
        }
        Ok(Stmt::Expr(first))
    }

    /// Comma-separated targets of a `for` or comprehension, parsed below the
    /// comparison level so that `in` is left for the caller.
    fn target_list(&mut self) -> PResult<Target> {
        let pos = self.pos();
        let mut items = vec![self.arith()?];
        let mut trailing = false;
        while self.eat_op(",") {
            trailing = true;
            if self.is_kw("in") {
                break;
            }
            items.push(self.arith()?);
            trailing = false;
        }
        let _ = trailing;
        if items.len() == 1 && !self.toks[self.i - 1].tok.eq(&Tok::Op(",")) {
            return to_target(items.pop().expect("one item"));
        }
        to_target(Expr::new(ExprKind::Tuple(items), pos))
    }

    fn testlist(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let first = self.test()?;
        if !self.is_op(",") {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if self.starts_expression() {
                items.push(self.test()?);
            } else {
                break;
            }
        }
        Ok(Expr::new(ExprKind::Tuple(items), pos))
    }

    fn starts_expression(&self) -> bool {
        match self.peek() {
            Tok::Name(n) => !matches!(n.as_str(), "in" | "for" | "if" | "else" | "and" | "or" | "is"),
            Tok::Int(_) | Tok::Float(_) | Tok::Str(_) | Tok::FStr(_) => true,
            Tok::Op(o) => matches!(*o, "(" | "[" | "-" | "+" | "{"),
            _ => false,
        }
    }

    fn test(&mut self) -> PResult<Expr> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.err("expression nested too deeply");
        }
        let r = self.test_inner();
        self.depth -= 1;
        r
    }

    fn test_inner(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        if self.eat_kw("lambda") {
            let mut params = Vec::new();
            if !self.is_op(":") {
                params.push(self.ident()?);
                while self.eat_op(",") {
                    params.push(self.ident()?);
                }
            }
            self.expect_op(":")?;
            let body = self.test()?;
            return Ok(Expr::new(ExprKind::Lambda { params, body: Box::new(body) }, pos));
        }
        let value = self.or_test()?;
        if self.is_kw("if") {
            // Inside comprehensions `if` starts a filter, not a conditional
            // expression; a conditional expression always has an `else`.
            let save = self.i;
            self.advance();
            let cond = self.or_test()?;
            if self.eat_kw("else") {
                let orelse = self.test()?;
                return Ok(Expr::new(
                    ExprKind::IfExp { cond: Box::new(cond), then: Box::new(value), orelse: Box::new(orelse) },
                    pos,
                ));
            }
            self.i = save;
        }
        Ok(value)
    }

    /// `or`-level expression without conditional/lambda (used for
    /// comprehension conditions).
    fn or_test(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let mut left = self.and_test()?;
        while self.eat_kw("or") {
            let right = self.and_test()?;
            left = Expr::new(ExprKind::Or(Box::new(left), Box::new(right)), pos);
        }
        Ok(left)
    }

    fn and_test(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let mut left = self.not_test()?;
        while self.eat_kw("and") {
            let right = self.not_test()?;
            left = Expr::new(ExprKind::And(Box::new(left), Box::new(right)), pos);
        }
        Ok(left)
    }

    fn not_test(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        if self.eat_kw("not") {
            self.depth += 1;
            if self.depth > MAX_DEPTH {
                return self.err("expression nested too deeply");
            }
            let inner = self.not_test()?;
            self.depth -= 1;
            return Ok(Expr::new(ExprKind::Unary(UnaryOp::Not, Box::new(inner)), pos));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let left = self.arith()?;
        let mut ops = Vec::new();
        loop {
            let op = match self.peek() {
                Tok::Op("<") => CmpOp::Lt,
                Tok::Op(">") => CmpOp::Gt,
                Tok::Op("<=") => CmpOp::Le,
                Tok::Op(">=") => CmpOp::Ge,
                Tok::Op("==") => CmpOp::Eq,
                Tok::Op("!=") => CmpOp::Ne,
                Tok::Name(n) if n == "in" => CmpOp::In,
                Tok::Name(n) if n == "is" => {
                    if matches!(self.peek_at(1), Tok::Name(m) if m == "not") {
                        self.advance();
                        CmpOp::IsNot
                    } else {
                        CmpOp::Is
                    }
                }
                Tok::Name(n) if n == "not" && matches!(self.peek_at(1), Tok::Name(m) if m == "in") => {
                    self.advance();
                    CmpOp::NotIn
                }
                _ => break,
            };
            self.advance();
            ops.push((op, self.arith()?));
        }
        if ops.is_empty() {
            Ok(left)
        } else {
            Ok(Expr::new(ExprKind::Compare(Box::new(left), ops), pos))
        }
    }

    fn arith(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let mut left = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op("+") => BinOp::Add,
                Tok::Op("-") => BinOp::Sub,
                Tok::Op(o @ ("&" | "|" | "^" | "<<" | ">>")) => {
                    return self.err(format!("operator '{o}' is not supported"));
                }
                _ => break,
            };
            self.advance();
            let right = self.term()?;
            left = Expr::new(ExprKind::Binary(op, Box::new(left), Box::new(right)), pos);
        }
        Ok(left)
    }

    fn term(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let mut left = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Op("*") => BinOp::Mul,
                Tok::Op("/") => BinOp::Div,
                Tok::Op("//") => BinOp::FloorDiv,
                Tok::Op("%") => BinOp::Mod,
                _ => break,
            };
            self.advance();
            let right = self.factor()?;
            left = Expr::new(ExprKind::Binary(op, Box::new(left), Box::new(right)), pos);
        }
        Ok(left)
    }

    fn factor(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let op = match self.peek() {
            Tok::Op("-") => Some(UnaryOp::Neg),
            Tok::Op("+") => Some(UnaryOp::Plus),
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            self.depth += 1;
            if self.depth > MAX_DEPTH {
                return self.err("expression nested too deeply");
            }
            let inner = self.factor()?;
            self.depth -= 1;
            return Ok(Expr::new(ExprKind::Unary(op, Box::new(inner)), pos));
        }
        self.power()
    }

    fn power(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let base = self.primary()?;
        if self.eat_op("**") {
            let exp = self.factor()?;
            return Ok(Expr::new(ExprKind::Binary(BinOp::Pow, Box::new(base), Box::new(exp)), pos));
        }
        Ok(base)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let mut e = self.atom()?;
        loop {
            let pos = self.pos();
            if self.eat_op(".") {
                let name = match self.peek().clone() {
                    Tok::Name(n) => {
                        self.advance();
                        n
                    }
                    _ => return self.err(format!("expected attribute name, found {}", self.describe())),
                };
                e = Expr::new(ExprKind::Attr(Box::new(e), name), pos);
            } else if self.eat_op("(") {
                e = self.call_rest(e, pos)?;
            } else if self.eat_op("[") {
                e = self.subscript_rest(e, pos)?;
            } else {
                break;
            }
        }
        Ok(e)
    }

    fn call_rest(&mut self, func: Expr, pos: Pos) -> PResult<Expr> {
        let mut args = Vec::new();
        let mut kwargs: Vec<(String, Expr)> = Vec::new();
        while !self.is_op(")") {
            if self.is_op("*") || self.is_op("**") {
                return self.err("argument unpacking is not supported");
            }
            let is_kw = matches!(self.peek(), Tok::Name(_)) && matches!(self.peek_at(1), Tok::Op("="));
            if is_kw {
                let name = self.ident()?;
                self.advance();
                if kwargs.iter().any(|(k, _)| *k == name) {
                    return self.err(format!("keyword argument repeated: {name}"));
                }
                kwargs.push((name, self.test()?));
            } else {
                if !kwargs.is_empty() {
                    return self.err("positional argument follows keyword argument");
                }
                let arg = self.test()?;
                if self.is_kw("for") {
                    let arg_pos = arg.pos;
                    let generators = self.comp_for()?;
                    args.push(Expr::new(ExprKind::Comp { elt: Box::new(arg), generators }, arg_pos));
                    if !self.is_op(")") {
                        return self.err("generator expression must be parenthesized");
                    }
                    break;
                }
                args.push(arg);
            }
            if !self.eat_op(",") {
                break;
            }
        }
        self.expect_op(")")?;
        Ok(Expr::new(ExprKind::Call { func: Box::new(func), args, kwargs }, pos))
    }

    fn subscript_rest(&mut self, value: Expr, pos: Pos) -> PResult<Expr> {
        let mut parts: [Option<Box<Expr>>; 3] = [None, None, None];
        let mut colons = 0;
        loop {
            if self.is_op("]") {
                break;
            }
            if self.eat_op(":") {
                colons += 1;
                if colons > 2 {
                    return self.err("invalid slice");
                }
                continue;
            }
            if parts[colons].is_some() {
                return self.err("invalid subscript");
            }
            parts[colons] = Some(Box::new(self.test()?));
            if self.is_op(",") {
                return self.err("tuple subscripts are not supported");
            }
        }
        self.expect_op("]")?;
        let [lower, upper, step] = parts;
        if colons == 0 {
            let Some(index) = lower else {
                return Err(CompileError::new(pos, "empty subscript"));
            };
            return Ok(Expr::new(ExprKind::Index(Box::new(value), index), pos));
        }
        Ok(Expr::new(ExprKind::Slice { value: Box::new(value), lower, upper, step }, pos))
    }

    fn comp_for(&mut self) -> PResult<Vec<Comprehension>> {
        let mut gens = Vec::new();
        while self.eat_kw("for") {
            let target = self.target_list()?;
            self.expect_kw("in")?;
            let iter = self.or_test()?;
            let mut conds = Vec::new();
            while self.eat_kw("if") {
                conds.push(self.or_test()?);
            }
            gens.push(Comprehension { target, iter, conds });
        }
        Ok(gens)
    }

    fn atom(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let tok = self.peek().clone();
        match tok {
            Tok::Int(v) => {
                self.advance();
                Ok(Expr::new(ExprKind::Int(v), pos))
            }
            Tok::Float(v) => {
                self.advance();
                Ok(Expr::new(ExprKind::Float(v), pos))
            }
            Tok::Str(_) | Tok::FStr(_) => self.strings(),
            Tok::Name(n) => match n.as_str() {
                "None" => {
                    self.advance();
                    Ok(Expr::new(ExprKind::None, pos))
                }
                "True" | "False" => {
                    self.advance();
                    Ok(Expr::new(ExprKind::Bool(n == "True"), pos))
                }
                _ if FORBIDDEN_STATEMENTS.contains(&n.as_str()) => self.err(format!("'{n}' is not supported")),
                _ if KEYWORDS.contains(&n.as_str()) => self.err(format!("invalid syntax near '{n}'")),
                _ => {
                    self.advance();
                    Ok(Expr::new(ExprKind::Name(n), pos))
                }
            },
            Tok::Op("(") => {
                self.advance();
                if self.eat_op(")") {
                    return Ok(Expr::new(ExprKind::Tuple(Vec::new()), pos));
                }
                let first = self.test()?;
                if self.is_kw("for") {
                    let generators = self.comp_for()?;
                    self.expect_op(")")?;
                    return Ok(Expr::new(ExprKind::Comp { elt: Box::new(first), generators }, pos));
                }
                if self.eat_op(")") {
                    return Ok(first);
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.is_op(")") {
                        break;
                    }
                    items.push(self.test()?);
                }
                self.expect_op(")")?;
                Ok(Expr::new(ExprKind::Tuple(items), pos))
            }
            Tok::Op("[") => {
                self.advance();
                if self.eat_op("]") {
                    return Ok(Expr::new(ExprKind::List(Vec::new()), pos));
                }
                let first = self.test()?;
                if self.is_kw("for") {
                    let generators = self.comp_for()?;
                    self.expect_op("]")?;
                    return Ok(Expr::new(ExprKind::Comp { elt: Box::new(first), generators }, pos));
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if self.is_op("]") {
                        break;
                    }
                    items.push(self.test()?);
                }
                self.expect_op("]")?;
                Ok(Expr::new(ExprKind::List(items), pos))
            }
            Tok::Op("{") => self.err("dict and set literals are not supported"),
            Tok::Op("...") => self.err("ellipsis is not supported"),
            _ => self.err(format!("invalid syntax near {}", self.describe())),
        }
    }

    /// Adjacent string literals concatenate, including f-strings.
    fn strings(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        let mut parts: Vec<FPart> = Vec::new();
        let mut any_f = false;
        loop {
            let tok_pos = self.pos();
            match self.peek().clone() {
                Tok::Str(s) => {
                    self.advance();
                    parts.push(FPart::Lit(s));
                }
                Tok::FStr(body) => {
                    self.advance();
                    any_f = true;
                    parts.extend(parse_fstring(&body, tok_pos)?);
                }
                _ => break,
            }
        }
        if !any_f {
            let s = parts
                .into_iter()
                .map(|p| match p {
                    FPart::Lit(s) => s,
                    FPart::Expr(..) => unreachable!("no f-string parts"),
                })
                .collect();
            return Ok(Expr::new(ExprKind::Str(s), pos));
        }
        Ok(Expr::new(ExprKind::FStr(parts), pos))
    }
}

fn parse_fstring(body: &str, pos: Pos) -> PResult<Vec<FPart>> {
    let chars: Vec<char> = body.chars().collect();
    let mut parts = Vec::new();
    let mut lit = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '{' {
            if chars.get(i + 1) == Some(&'{') {
                lit.push('{');
                i += 2;
                continue;
            }
            let mut depth = 1;
            let mut j = i + 1;
            let mut quote: Option<char> = None;
            while j < chars.len() {
                let d = chars[j];
                match quote {
                    Some(q) if d == q => quote = None,
                    Some(_) => {}
                    None => match d {
                        '\'' | '"' => quote = Some(d),
                        '{' | '[' | '(' => depth += 1,
                        '}' | ']' | ')' => {
                            depth -= 1;
                            if depth == 0 {
                                break;
                            }
                        }
                        _ => {}
                    },
                }
                j += 1;
            }
            if j >= chars.len() {
                return Err(CompileError::new(pos, "f-string: expecting '}'"));
            }
            let inner: String = chars[i + 1..j].iter().collect();
            let (expr_src, spec) = split_format_spec(&inner);
            if expr_src.trim().is_empty() {
                return Err(CompileError::new(pos, "f-string: empty expression not allowed"));
            }
            let tokens = tokenize(&format!("({})", expr_src.trim())).map_err(|e| CompileError::new(pos, e.message))?;
            let mut p = Parser { toks: tokens, i: 0, depth: 0 };
            let expr = p.test().map_err(|e| CompileError::new(pos, format!("f-string: {}", e.message)))?;
            p.skip_newlines();
            if !matches!(p.peek(), Tok::Eof) {
                return Err(CompileError::new(pos, "f-string: invalid expression"));
            }
            if !lit.is_empty() {
                parts.push(FPart::Lit(std::mem::take(&mut lit)));
            }
            parts.push(FPart::Expr(Box::new(relocate(expr, pos)), spec));
            i = j + 1;
        } else if c == '}' {
            if chars.get(i + 1) == Some(&'}') {
                lit.push('}');
                i += 2;
                continue;
            }
            return Err(CompileError::new(pos, "f-string: single '}' is not allowed"));
        } else {
            lit.push(c);
            i += 1;
        }
    }
    if !lit.is_empty() {
        parts.push(FPart::Lit(lit));
    }
    Ok(parts)
}

fn split_format_spec(inner: &str) -> (String, Option<String>) {
    let mut depth = 0;
    let mut quote: Option<char> = None;
    for (idx, c) in inner.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' => quote = Some(c),
                '[' | '(' | '{' => depth += 1,
                ']' | ')' | '}' => depth -= 1,
                ':' if depth == 0 => {
                    let spec = inner[idx + 1..].to_string();
                    return (inner[..idx].to_string(), Some(spec));
                }
                _ => {}
            },
        }
    }
    let expr = inner.trim_end();
    let expr = expr.strip_suffix("!r").or_else(|| expr.strip_suffix("!s")).unwrap_or(expr);
    (expr.to_string(), None)
}

/// Expressions inside f-strings report the position of the literal.
fn relocate(mut e: Expr, pos: Pos) -> Expr {
    e.pos = pos;
    e
}

fn to_target(e: Expr) -> PResult<Target> {
    match e.kind {
        ExprKind::Name(n) => Ok(Target::Name(n)),
        ExprKind::Index(v, i) => Ok(Target::Index(v, i)),
        ExprKind::Tuple(items) | ExprKind::List(items) => {
            Ok(Target::Tuple(items.into_iter().map(to_target).collect::<PResult<Vec<_>>>()?))
        }
        ExprKind::Attr(..) => Err(CompileError::new(e.pos, "assignment to attributes is not supported")),
        _ => Err(CompileError::new(e.pos, "cannot assign to expression")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_program() {
        let ast = parse("def execute_command(image) -> str:\n    return 'yes'\n").unwrap();
        assert_eq!(ast.param, "image");
        assert_eq!(ast.body.len(), 1);
    }

    #[test]
    fn rejects_malformed() {
        let e = parse("def f(:").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(parse("import os\ndef execute_command(image):\n    return 1\n").unwrap_err().message.contains("import"));
        assert!(parse("def execute_command(image):\n    import os\n    return 1\n").is_err());
        assert!(parse("def execute_command(a, b):\n    return 1\n").is_err());
        assert!(parse("def other(image):\n    return 1\n").is_err());
        assert!(parse("def execute_command(image):\n    def g():\n        return 1\n    return 1\n").is_err());
        assert!(parse("def execute_command(image):\n    return 1\ndef helper(x):\n    return x\n").is_err());
        assert!(parse("def execute_command(image):\n    x = {1: 2}\n").is_err());
        assert!(parse("def execute_command(image):\n    try:\n        pass\n    except:\n        pass\n").is_err());
        assert!(parse("def execute_command(image):\n    return 1 & 2\n").is_err());
    }

    #[test]
    fn parses_expressions() {
        let src = r#"def execute_command(image):
    xs = [p for p in image_patch.find("x") if p.area > 3]
    ok = a <= b.c <= d and not e or f if g else h
    ys.sort(key=lambda x: x.area, reverse=True)
    z = any(a > b for a in xs for b in ys)
    i, j = (1, 2)
    s = f"{a} and {b:.2f}"
    t = xs[1:][::-1]
    return "yes" if ok else "no"
"#;
        let ast = parse(src).unwrap();
        assert_eq!(ast.body.len(), 8);
    }

    #[test]
    fn elif_else_chain_and_one_liners() {
        let src = "def execute_command(image):\n    if a: return 1\n    elif b: return 2\n    else: return 3\n";
        let ast = parse(src).unwrap();
        match &ast.body[0] {
            Stmt::If { branches, orelse, .. } => {
                assert_eq!(branches.len(), 2);
                assert_eq!(orelse.len(), 1);
            }
            other => panic!("expected if, got {other:?}"),
        }
    }

    #[test]
    fn deep_nesting_is_a_compile_error() {
        let mut blocks = String::from("def execute_command(image):\n");
        for d in 1..=150 {
            blocks.push_str(&format!("{}if x:\n", "    ".repeat(d)));
        }
        blocks.push_str(&format!("{}pass\n", "    ".repeat(151)));
        assert!(parse(&blocks).unwrap_err().message.contains("nested"));
        let src = format!("def execute_command(image):\n    return {}1{}\n", "(".repeat(500), ")".repeat(500));
        assert!(parse(&src).unwrap_err().message.contains("nested"));
    }
}
