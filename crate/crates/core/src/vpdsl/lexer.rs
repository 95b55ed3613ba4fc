use super::ast::Pos;
use super::CompileError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Name(String),
    Int(i64),
    Float(f64),
    Str(String),
    /// Raw body of an f-string; parsed into parts by the parser.
    FStr(String),
    Op(&'static str),
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub pos: Pos,
}

const OPS3: [&str; 3] = ["**=", "//=", "..."];
const OPS2: [&str; 17] =
    ["->", "**", "//", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=", "<<", ">>", "&=", "|=", ":="];
const OPS1: [&str; 21] =
    ["+", "-", "*", "/", "%", "<", ">", "=", "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "&", "|", "^"];

struct Lexer {
    chars: Vec<char>,
    i: usize,
    line: u32,
    col: u32,
    depth: usize,
    indents: Vec<usize>,
    out: Vec<Token>,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, CompileError> {
    let mut lx = Lexer { chars: src.chars().collect(), i: 0, line: 1, col: 1, depth: 0, indents: vec![0], out: Vec::new() };
    lx.run()?;
    Ok(lx.out)
}

impl Lexer {
    fn pos(&self) -> Pos {
        Pos { line: self.line, col: self.col }
    }

    fn peek(&self, off: usize) -> Option<char> {
        self.chars.get(self.i + off).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.i).copied()?;
        self.i += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn err<T>(&self, pos: Pos, msg: impl Into<String>) -> Result<T, CompileError> {
        Err(CompileError::new(pos, msg))
    }

    fn push(&mut self, tok: Tok, pos: Pos) {
        self.out.push(Token { tok, pos });
    }

    fn run(&mut self) -> Result<(), CompileError> {
        let mut at_line_start = true;
        loop {
            if at_line_start && self.depth == 0 {
                if !self.handle_indent()? {
                    break;
                }
                at_line_start = false;
            }
            let Some(c) = self.peek(0) else { break };
            match c {
                '\n' => {
                    let pos = self.pos();
                    self.bump();
                    if self.depth == 0 {
                        self.push(Tok::Newline, pos);
                        at_line_start = true;
                    }
                }
                ' ' | '\t' | '\r' | '\x0c' => {
                    self.bump();
                }
                '#' => {
                    while self.peek(0).is_some_and(|c| c != '\n') {
                        self.bump();
                    }
                }
                '\\' if self.peek(1) == Some('\n') => {
                    self.bump();
                    self.bump();
                }
                c if c.is_ascii_digit() || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit())) => self.number()?,
                c if c == '_' || c.is_alphabetic() => self.name_or_string()?,
                '"' | '\'' => {
                    let pos = self.pos();
                    let s = self.string_body(false)?;
                    self.push(Tok::Str(s), pos);
                }
                _ => self.op()?,
            }
        }
        let pos = self.pos();
        if self.depth > 0 {
            return self.err(pos, "unexpected end of input inside brackets");
        }
        if !matches!(self.out.last().map(|t| &t.tok), None | Some(Tok::Newline) | Some(Tok::Dedent)) {
            self.push(Tok::Newline, pos);
        }
        while self.indents.len() > 1 {
            self.indents.pop();
            self.push(Tok::Dedent, pos);
        }
        self.push(Tok::Eof, pos);
        Ok(())
    }

    /// Consumes leading whitespace of a logical line and emits INDENT or
    /// DEDENT tokens. Blank and comment-only lines are skipped. Returns
    /// false at end of input.
    fn handle_indent(&mut self) -> Result<bool, CompileError> {
        loop {
            let mut width = 0usize;
            while let Some(c) = self.peek(0) {
                match c {
                    ' ' => width += 1,
                    '\t' => width = (width / 8 + 1) * 8,
                    '\r' | '\x0c' => {}
                    _ => break,
                }
                self.bump();
            }
            match self.peek(0) {
                None => return Ok(false),
                Some('\n') => {
                    self.bump();
                    continue;
                }
                Some('#') => {
                    while self.peek(0).is_some_and(|c| c != '\n') {
                        self.bump();
                    }
                    continue;
                }
                _ => {}
            }
            let pos = self.pos();
            let current = *self.indents.last().expect("indent stack never empty");
            if width > current {
                self.indents.push(width);
                self.push(Tok::Indent, pos);
            } else {
                while width < *self.indents.last().expect("indent stack never empty") {
                    self.indents.pop();
                    self.push(Tok::Dedent, pos);
                }
                if width != *self.indents.last().expect("indent stack never empty") {
                    return self.err(pos, "unindent does not match any outer indentation level");
                }
            }
            return Ok(true);
        }
    }

    fn number(&mut self) -> Result<(), CompileError> {
        let pos = self.pos();
        let mut text = String::new();
        let mut is_float = false;
        while let Some(c) = self.peek(0) {
            if c.is_ascii_digit() || c == '_' {
                if c != '_' {
                    text.push(c);
                }
            } else if c == '.' && !is_float && !text.contains(['e', 'E']) {
                is_float = true;
                text.push(c);
            } else if (c == 'e' || c == 'E') && !text.contains(['e', 'E']) {
                is_float = true;
                text.push(c);
                if matches!(self.peek(1), Some('+') | Some('-')) {
                    self.bump();
                    text.push(self.peek(0).unwrap_or('+'));
                }
            } else {
                break;
            }
            self.bump();
        }
        if self.peek(0).is_some_and(|c| c.is_alphabetic() || c == '_') {
            return self.err(pos, "invalid number literal");
        }
        let tok = if is_float {
            Tok::Float(text.parse().map_err(|_| CompileError::new(pos, format!("invalid float literal {text:?}")))?)
        } else {
            Tok::Int(text.parse().map_err(|_| CompileError::new(pos, format!("integer literal {text} is too large")))?)
        };
        self.push(tok, pos);
        Ok(())
    }

    fn name_or_string(&mut self) -> Result<(), CompileError> {
        let pos = self.pos();
        let mut name = String::new();
        while let Some(c) = self.peek(0) {
            if c == '_' || c.is_alphanumeric() {
                name.push(c);
                self.bump();
            } else {
                break;
            }
        }
        if matches!(self.peek(0), Some('"') | Some('\'')) {
            let lower = name.to_ascii_lowercase();
            match lower.as_str() {
                "f" | "rf" | "fr" => {
                    let body = self.string_body(lower.contains('r'))?;
                    self.push(Tok::FStr(body), pos);
                    return Ok(());
                }
                "r" => {
                    let body = self.string_body(true)?;
                    self.push(Tok::Str(body), pos);
                    return Ok(());
                }
                "u" => {
                    let body = self.string_body(false)?;
                    self.push(Tok::Str(body), pos);
                    return Ok(());
                }
                "b" | "rb" | "br" => return self.err(pos, "bytes literals are not supported"),
                _ => {}
            }
        }
        self.push(Tok::Name(name), pos);
        Ok(())
    }

    fn string_body(&mut self, raw: bool) -> Result<String, CompileError> {
        let pos = self.pos();
        let quote = self.bump().expect("caller checked quote");
        let triple = self.peek(0) == Some(quote) && self.peek(1) == Some(quote);
        if triple {
            self.bump();
            self.bump();
        }
        let mut out = String::new();
        loop {
            let Some(c) = self.bump() else {
                return self.err(pos, "unterminated string literal");
            };
            if c == quote {
                if !triple {
                    break;
                }
                if self.peek(0) == Some(quote) && self.peek(1) == Some(quote) {
                    self.bump();
                    self.bump();
                    break;
                }
                out.push(c);
                continue;
            }
            if c == '\n' && !triple {
                return self.err(pos, "unterminated string literal");
            }
            if c == '\\' && !raw {
                let Some(e) = self.bump() else {
                    return self.err(pos, "unterminated string literal");
                };
                match e {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    '0' => out.push('\0'),
                    '\\' => out.push('\\'),
                    '\'' => out.push('\''),
                    '"' => out.push('"'),
                    '\n' => {}
                    other => {
                        out.push('\\');
                        out.push(other);
                    }
                }
                continue;
            }
            if c == '\\' && raw {
                out.push(c);
                if let Some(n) = self.bump() {
                    out.push(n);
                }
                continue;
            }
            out.push(c);
        }
        Ok(out)
    }

    fn op(&mut self) -> Result<(), CompileError> {
        let pos = self.pos();
        let rest: String = self.chars[self.i..].iter().take(3).collect();
        let found = OPS3
            .iter()
            .chain(OPS2.iter())
            .chain(OPS1.iter())
            .find(|op| rest.starts_with(**op))
            .copied();
        let Some(op) = found else {
            let c = self.peek(0).unwrap_or(' ');
            return self.err(pos, format!("invalid character {c:?}"));
        };
        for _ in 0..op.chars().count() {
            self.bump();
        }
        match op {
            "(" | "[" | "{" => self.depth += 1,
            ")" | "]" | "}" => {
                if self.depth == 0 {
                    return self.err(pos, format!("unmatched {op:?}"));
                }
                self.depth -= 1;
            }
            _ => {}
        }
        self.push(Tok::Op(op), pos);
        Ok(())
    }
}
