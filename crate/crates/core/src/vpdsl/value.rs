use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::HashMap;
use std::rc::Rc;

use super::ast::Expr;
use crate::perception::{BBox, ImageHandle, PerceptionError};

/// Upper bound on list, tuple and range lengths.
pub(super) const MAX_ELEMENTS: usize = 1_000_000;
/// Upper bound on string lengths, in bytes.
pub(super) const MAX_STR_BYTES: usize = 10_000_000;
const MAX_NESTING: usize = 200;

#[derive(Debug)]
pub(super) struct PatchValue {
    pub image: Rc<ImageHandle>,
    pub bbox: BBox,
    pub category: Option<Rc<str>>,
}

#[derive(Debug)]
pub(super) struct LambdaValue<'a> {
    pub params: &'a [String],
    pub body: &'a Expr,
    pub captured: Vec<HashMap<&'a str, Value<'a>>>,
}

#[derive(Debug, Clone)]
pub(super) enum Value<'a> {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(Rc<str>),
    List(Rc<RefCell<Vec<Value<'a>>>>),
    Tuple(Rc<Vec<Value<'a>>>),
    Patch(Rc<PatchValue>),
    Image(Rc<ImageHandle>),
    Lambda(Rc<LambdaValue<'a>>),
    Builtin(&'static str),
    Method(Rc<(Value<'a>, String)>),
}

/// Non-local exits from evaluation.
#[derive(Debug)]
pub(super) enum Exc {
    Runtime(String),
    Timeout(String),
    Backend(PerceptionError),
}

pub(super) type VResult<T> = Result<T, Exc>;

pub(super) fn rt<T>(msg: impl Into<String>) -> VResult<T> {
    Err(Exc::Runtime(msg.into()))
}

pub(super) fn type_error<T>(msg: impl Into<String>) -> VResult<T> {
    rt(format!("TypeError: {}", msg.into()))
}

impl<'a> Value<'a> {
    pub fn str(s: impl Into<Rc<str>>) -> Self {
        Value::Str(s.into())
    }

    pub fn list(items: Vec<Value<'a>>) -> Self {
        Value::List(Rc::new(RefCell::new(items)))
    }

    pub fn tuple(items: Vec<Value<'a>>) -> Self {
        Value::Tuple(Rc::new(items))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::None => "NoneType",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "str",
            Value::List(_) => "list",
            Value::Tuple(_) => "tuple",
            Value::Patch(_) => "ImagePatch",
            Value::Image(_) => "Image",
            Value::Lambda(_) => "function",
            Value::Builtin(_) => "builtin_function_or_method",
            Value::Method(_) => "method",
        }
    }

    pub fn truthy(&self) -> bool {
        match self {
            Value::None => false,
            Value::Bool(b) => *b,
            Value::Int(i) => *i != 0,
            Value::Float(f) => *f != 0.0,
            Value::Str(s) => !s.is_empty(),
            Value::List(l) => !l.borrow().is_empty(),
            Value::Tuple(t) => !t.is_empty(),
            _ => true,
        }
    }

    /// Numeric view; booleans count as integers.
    pub fn as_number(&self) -> Option<Num> {
        match self {
            Value::Bool(b) => Some(Num::Int(*b as i64)),
            Value::Int(i) => Some(Num::Int(*i)),
            Value::Float(f) => Some(Num::Float(*f)),
            _ => None,
        }
    }

    pub fn as_index(&self, what: &str) -> VResult<i64> {
        match self {
            Value::Bool(b) => Ok(*b as i64),
            Value::Int(i) => Ok(*i),
            other => type_error(format!("{what} must be integers, not {}", other.type_name())),
        }
    }

    pub fn as_f64(&self, what: &str) -> VResult<f64> {
        match self.as_number() {
            Some(n) => Ok(n.to_f64()),
            None => type_error(format!("{what} must be a number, not {}", self.type_name())),
        }
    }

    pub fn as_str(&self, what: &str) -> VResult<Rc<str>> {
        match self {
            Value::Str(s) => Ok(s.clone()),
            other => type_error(format!("{what} must be str, not {}", other.type_name())),
        }
    }

    /// Elements of an iterable, snapshotted.
    pub fn iterate(&self) -> VResult<Vec<Value<'a>>> {
        match self {
            Value::List(l) => Ok(l.borrow().clone()),
            Value::Tuple(t) => Ok(t.as_ref().clone()),
            Value::Str(s) => Ok(s.chars().map(|c| Value::str(c.to_string())).collect()),
            other => type_error(format!("'{}' object is not iterable", other.type_name())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(super) enum Num {
    Int(i64),
    Float(f64),
}

impl Num {
    pub fn to_f64(self) -> f64 {
        match self {
            Num::Int(i) => i as f64,
            Num::Float(f) => f,
        }
    }
}

fn nesting_guard(depth: usize) -> VResult<()> {
    if depth > MAX_NESTING {
        return rt("RecursionError: maximum recursion depth exceeded");
    }
    Ok(())
}

/// Python `==`.
pub(super) fn py_eq<'a>(a: &Value<'a>, b: &Value<'a>) -> VResult<bool> {
    eq_at(a, b, 0)
}

fn eq_at<'a>(a: &Value<'a>, b: &Value<'a>, depth: usize) -> VResult<bool> {
    nesting_guard(depth)?;
    if let (Some(x), Some(y)) = (a.as_number(), b.as_number()) {
        return Ok(match (x, y) {
            (Num::Int(x), Num::Int(y)) => x == y,
            _ => x.to_f64() == y.to_f64(),
        });
    }
    Ok(match (a, b) {
        (Value::None, Value::None) => true,
        (Value::Str(x), Value::Str(y)) => x == y,
        (Value::List(x), Value::List(y)) => {
            if Rc::ptr_eq(x, y) {
                return Ok(true);
            }
            seq_eq(&x.borrow(), &y.borrow(), depth)?
        }
        (Value::Tuple(x), Value::Tuple(y)) => seq_eq(x, y, depth)?,
        (Value::Patch(x), Value::Patch(y)) => Rc::ptr_eq(x, y),
        (Value::Image(x), Value::Image(y)) => x.id == y.id,
        (Value::Lambda(x), Value::Lambda(y)) => Rc::ptr_eq(x, y),
        (Value::Builtin(x), Value::Builtin(y)) => x == y,
        _ => false,
    })
}

fn seq_eq<'a>(x: &[Value<'a>], y: &[Value<'a>], depth: usize) -> VResult<bool> {
    if x.len() != y.len() {
        return Ok(false);
    }
    for (a, b) in x.iter().zip(y) {
        if !eq_at(a, b, depth + 1)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Python `is`.
pub(super) fn py_is<'a>(a: &Value<'a>, b: &Value<'a>) -> bool {
    match (a, b) {
        (Value::None, Value::None) => true,
        (Value::Bool(x), Value::Bool(y)) => x == y,
        (Value::Int(x), Value::Int(y)) => x == y,
        (Value::Str(x), Value::Str(y)) => Rc::ptr_eq(x, y) || x == y,
        (Value::List(x), Value::List(y)) => Rc::ptr_eq(x, y),
        (Value::Tuple(x), Value::Tuple(y)) => Rc::ptr_eq(x, y),
        (Value::Patch(x), Value::Patch(y)) => Rc::ptr_eq(x, y),
        (Value::Lambda(x), Value::Lambda(y)) => Rc::ptr_eq(x, y),
        (Value::Builtin(x), Value::Builtin(y)) => x == y,
        _ => false,
    }
}

/// Python ordering for `<` and friends. `Ok(None)` means unordered (NaN).
pub(super) fn py_cmp<'a>(a: &Value<'a>, b: &Value<'a>, op: &str) -> VResult<Option<Ordering>> {
    cmp_at(a, b, op, 0)
}

fn cmp_at<'a>(a: &Value<'a>, b: &Value<'a>, op: &str, depth: usize) -> VResult<Option<Ordering>> {
    nesting_guard(depth)?;
    if let (Some(x), Some(y)) = (a.as_number(), b.as_number()) {
        return Ok(match (x, y) {
            (Num::Int(x), Num::Int(y)) => Some(x.cmp(&y)),
            _ => x.to_f64().partial_cmp(&y.to_f64()),
        });
    }
    match (a, b) {
        (Value::Str(x), Value::Str(y)) => Ok(Some(x.cmp(y))),
        (Value::List(x), Value::List(y)) => {
            let (x, y) = (x.borrow().clone(), y.borrow().clone());
            seq_cmp(&x, &y, op, depth)
        }
        (Value::Tuple(x), Value::Tuple(y)) => seq_cmp(x, y, op, depth),
        _ => type_error(format!(
            "'{op}' not supported between instances of '{}' and '{}'",
            a.type_name(),
            b.type_name()
        )),
    }
}

fn seq_cmp<'a>(x: &[Value<'a>], y: &[Value<'a>], op: &str, depth: usize) -> VResult<Option<Ordering>> {
    for (a, b) in x.iter().zip(y) {
        if !eq_at(a, b, depth + 1)? {
            return cmp_at(a, b, op, depth + 1);
        }
    }
    Ok(Some(x.len().cmp(&y.len())))
}

/// Python `repr` of a float.
pub(super) fn float_repr(f: f64) -> String {
    if f.is_nan() {
        return "nan".into();
    }
    if f.is_infinite() {
        return if f > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let a = f.abs();
    if a != 0.0 && !(1e-4..1e16).contains(&a) {
        return python_exponent(&format!("{f:e}"));
    }
    if f == f.trunc() {
        format!("{f:.1}")
    } else {
        format!("{f}")
    }
}

/// Rewrites Rust's `1.5e3` exponent form into Python's `1.5e+03`.
pub(super) fn python_exponent(s: &str) -> String {
    let Some((mant, exp)) = s.split_once('e') else {
        return s.to_string();
    };
    let (sign, digits) = match exp.strip_prefix('-') {
        Some(d) => ('-', d),
        None => ('+', exp.trim_start_matches('+')),
    };
    format!("{mant}e{sign}{digits:0>2}")
}

fn str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn patch_repr(p: &PatchValue) -> String {
    format!("ImagePatch({}, {}, {}, {})", p.bbox.left, p.bbox.lower, p.bbox.right, p.bbox.upper)
}

/// Python `repr`.
pub(super) fn py_repr(v: &Value) -> VResult<String> {
    repr_at(v, 0)
}

fn repr_at(v: &Value, depth: usize) -> VResult<String> {
    nesting_guard(depth)?;
    Ok(match v {
        Value::Str(s) => str_repr(s),
        Value::List(l) => {
            let items = l.borrow().iter().map(|x| repr_at(x, depth + 1)).collect::<VResult<Vec<_>>>()?;
            format!("[{}]", items.join(", "))
        }
        Value::Tuple(t) => {
            let items = t.iter().map(|x| repr_at(x, depth + 1)).collect::<VResult<Vec<_>>>()?;
            if items.len() == 1 {
                format!("({},)", items[0])
            } else {
                format!("({})", items.join(", "))
            }
        }
        other => scalar_str(other),
    })
}

fn scalar_str(v: &Value) -> String {
    match v {
        Value::None => "None".into(),
        Value::Bool(true) => "True".into(),
        Value::Bool(false) => "False".into(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => float_repr(*f),
        Value::Str(s) => s.to_string(),
        Value::Patch(p) => patch_repr(p),
        Value::Image(i) => format!("<image {}>", i.id),
        Value::Lambda(_) => "<function <lambda>>".into(),
        Value::Builtin(n) => format!("<built-in function {n}>"),
        Value::Method(m) => format!("<bound method {} of {}>", m.1, m.0.type_name()),
        Value::List(_) | Value::Tuple(_) => unreachable!("containers handled by repr"),
    }
}

/// Python `str`.
pub(super) fn py_str(v: &Value) -> VResult<String> {
    match v {
        Value::List(_) | Value::Tuple(_) => py_repr(v),
        other => Ok(scalar_str(other)),
    }
}

/// Text form of a program's return value: booleans become yes/no and
/// sequences are comma-joined.
pub(super) fn to_answer(v: &Value) -> VResult<String> {
    answer_at(v, 0)
}

fn answer_at(v: &Value, depth: usize) -> VResult<String> {
    nesting_guard(depth)?;
    Ok(match v {
        Value::Bool(b) => if *b { "yes" } else { "no" }.into(),
        Value::List(l) => {
            let items = l.borrow().iter().map(|x| answer_at(x, depth + 1)).collect::<VResult<Vec<_>>>()?;
            items.join(", ")
        }
        Value::Tuple(t) => t.iter().map(|x| answer_at(x, depth + 1)).collect::<VResult<Vec<_>>>()?.join(", "),
        other => scalar_str(other),
    })
}

/// Applies a format specification (`[[fill]align][sign][0][width][,][.precision][type]`).
pub(super) fn format_spec(v: &Value, spec: &str) -> VResult<String> {
    if spec.is_empty() {
        return py_str(v);
    }
    let bad = || rt::<String>(format!("ValueError: Invalid format specifier '{spec}' for object of type '{}'", v.type_name()));
    let chars: Vec<char> = spec.chars().collect();
    let mut i = 0;
    let mut fill = ' ';
    let mut align = None;
    if chars.len() >= 2 && matches!(chars[1], '<' | '>' | '^') {
        fill = chars[0];
        align = Some(chars[1]);
        i = 2;
    } else if matches!(chars[0], '<' | '>' | '^') {
        align = Some(chars[0]);
        i = 1;
    }
    let mut sign = '-';
    if i < chars.len() && matches!(chars[i], '+' | '-' | ' ') {
        sign = chars[i];
        i += 1;
    }
    let mut zero = false;
    if i < chars.len() && chars[i] == '0' {
        zero = true;
        i += 1;
    }
    let mut width = 0usize;
    while i < chars.len() && chars[i].is_ascii_digit() {
        width = width * 10 + chars[i].to_digit(10).unwrap_or(0) as usize;
        i += 1;
    }
    let mut grouping = false;
    if i < chars.len() && (chars[i] == ',' || chars[i] == '_') {
        grouping = true;
        i += 1;
    }
    let mut precision = None;
    if i < chars.len() && chars[i] == '.' {
        i += 1;
        let start = i;
        let mut p = 0usize;
        while i < chars.len() && chars[i].is_ascii_digit() {
            p = p * 10 + chars[i].to_digit(10).unwrap_or(0) as usize;
            i += 1;
        }
        if i == start {
            return bad();
        }
        precision = Some(p);
    }
    let ty = match chars.len() - i {
        0 => None,
        1 => Some(chars[i]),
        _ => return bad(),
    };
    if width > 1000 || precision.is_some_and(|p| p > 100) {
        return bad();
    }

    let numeric = v.as_number().is_some() && !matches!(ty, Some('s'));
    let body = match (v, ty) {
        (Value::Str(s), None | Some('s')) => match precision {
            Some(p) => s.chars().take(p).collect(),
            None => s.to_string(),
        },
        (_, Some('s')) if precision.is_none() => py_str(v)?,
        _ => match v.as_number() {
            Some(n) => format_number(n, ty, precision, sign, grouping).ok_or(()).or_else(|_| bad())?,
            None => return bad(),
        },
    };
    let len = body.chars().count();
    if len >= width {
        return Ok(body);
    }
    let pad = width - len;
    if zero && numeric && align.is_none() {
        let (sign_part, digits) = match body.strip_prefix(['-', '+', ' ']) {
            Some(rest) => (&body[..1], rest),
            None => ("", body.as_str()),
        };
        return Ok(format!("{sign_part}{}{digits}", "0".repeat(pad)));
    }
    let fill_s = |n: usize| fill.to_string().repeat(n);
    Ok(match align.unwrap_or(if numeric { '>' } else { '<' }) {
        '<' => format!("{body}{}", fill_s(pad)),
        '^' => format!("{}{body}{}", fill_s(pad / 2), fill_s(pad - pad / 2)),
        _ => format!("{}{body}", fill_s(pad)),
    })
}

fn format_number(n: Num, ty: Option<char>, precision: Option<usize>, sign: char, grouping: bool) -> Option<String> {
    let (neg, mut body) = match (ty, n) {
        (Some('d'), Num::Int(i)) => (i < 0, i.unsigned_abs().to_string()),
        (None, Num::Int(i)) => match precision {
            None => (i < 0, i.unsigned_abs().to_string()),
            Some(p) => (i < 0, general((i as f64).abs(), p)),
        },
        (Some('d'), Num::Float(_)) => return None,
        (Some('f' | 'F'), n) => {
            let f = n.to_f64();
            (f.is_sign_negative() && f != 0.0, format!("{:.*}", precision.unwrap_or(6), f.abs()))
        }
        (Some('%'), n) => {
            let f = n.to_f64() * 100.0;
            (f < 0.0, format!("{:.*}%", precision.unwrap_or(6), f.abs()))
        }
        (Some('e' | 'E'), n) => {
            let f = n.to_f64();
            let s = python_exponent(&format!("{:.*e}", precision.unwrap_or(6), f.abs()));
            (f < 0.0, if ty == Some('E') { s.to_uppercase() } else { s })
        }
        (Some('g' | 'G'), n) => {
            let f = n.to_f64();
            (f < 0.0, general(f.abs(), precision.unwrap_or(6)))
        }
        (None, Num::Float(f)) => match precision {
            Some(p) => (f < 0.0, general(f.abs(), p)),
            None => (f.is_sign_negative() && f != 0.0, float_repr(f.abs())),
        },
        _ => return None,
    };
    if grouping {
        let (int_part, rest) = match body.find(|c: char| !c.is_ascii_digit()) {
            Some(idx) => (body[..idx].to_string(), body[idx..].to_string()),
            None => (body.clone(), String::new()),
        };
        let mut grouped = String::new();
        for (k, c) in int_part.chars().enumerate() {
            if k > 0 && (int_part.len() - k) % 3 == 0 {
                grouped.push(',');
            }
            grouped.push(c);
        }
        body = grouped + &rest;
    }
    let prefix = match (neg, sign) {
        (true, _) => "-",
        (false, '+') => "+",
        (false, ' ') => " ",
        _ => "",
    };
    Some(format!("{prefix}{body}"))
}

/// `%g`-style formatting of a non-negative float.
fn general(f: f64, precision: usize) -> String {
    if !f.is_finite() {
        return float_repr(f);
    }
    let p = precision.max(1);
    if f == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", p - 1, f);
    let exp: i32 = sci.split_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    let strip = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if exp >= -4 && exp < p as i32 {
        strip(format!("{:.*}", (p as i32 - 1 - exp).max(0) as usize, f))
    } else {
        let (mant, _) = sci.split_once('e').unwrap_or((&sci, ""));
        python_exponent(&format!("{}e{exp}", strip(mant.to_string())))
    }
}
