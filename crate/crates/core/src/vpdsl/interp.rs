use std::cmp::Ordering;
use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ast::*;
use super::check::BUILTINS;
use super::value::*;
use super::{ExecutionOutcome, OutcomeKind};
use crate::perception::{BBox, ImageHandle, Perception, PerceptionError};

/// Interpreter steps allowed per execution, on top of the wall-clock budget.
pub const STEP_BUDGET: u64 = 1_000_000;
const DEADLINE_CHECK_EVERY: u64 = 256;
const MAX_CALL_DEPTH: usize = 64;

const PATCH_METHODS: [&str; 10] = [
    "find",
    "exists",
    "verify_property",
    "simple_query",
    "crop_left_of_bbox",
    "crop_right_of_bbox",
    "crop_above_bbox",
    "crop_below_bbox",
    "crop_above_of_bbox",
    "crop_below_of_bbox",
];
const LIST_METHODS: [&str; 11] =
    ["append", "extend", "sort", "index", "count", "pop", "insert", "reverse", "remove", "copy", "clear"];
const TUPLE_METHODS: [&str; 2] = ["index", "count"];
const STR_METHODS: [&str; 18] = [
    "lower",
    "upper",
    "strip",
    "lstrip",
    "rstrip",
    "split",
    "join",
    "startswith",
    "endswith",
    "replace",
    "capitalize",
    "title",
    "format",
    "count",
    "find",
    "isdigit",
    "isalpha",
    "islower",
];

/// Evaluated positional and keyword arguments.
type CallArgs<'a> = (Vec<Value<'a>>, Vec<(String, Value<'a>)>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Above,
    Below,
}

/// Region of `patch` strictly on `side` of `bbox`, clamped to the patch.
/// Empty results keep a one-pixel extent against the relevant patch edge.
pub fn crop_directional(patch: BBox, side: Side, bbox: BBox) -> BBox {
    let mut out = patch;
    match side {
        Side::Left => {
            out.right = bbox.left.clamp(patch.left, patch.right);
            if out.right <= out.left {
                out.right = out.left + 1;
            }
        }
        Side::Right => {
            out.left = bbox.right.clamp(patch.left, patch.right);
            if out.left >= out.right {
                out.left = out.right - 1;
            }
        }
        Side::Above => {
            out.lower = bbox.upper.clamp(patch.lower, patch.upper);
            if out.lower >= out.upper {
                out.lower = out.upper - 1;
            }
        }
        Side::Below => {
            out.upper = bbox.lower.clamp(patch.lower, patch.upper);
            if out.upper <= out.lower {
                out.upper = out.lower + 1;
            }
        }
    }
    out
}

enum Flow<'a> {
    Normal,
    Break,
    Continue,
    Return(Value<'a>),
}

type Scope<'a> = HashMap<&'a str, Value<'a>>;

struct Interp<'a, 'b> {
    backend: &'b dyn Perception,
    deadline: Instant,
    steps: u64,
    polls: u64,
    locals: Scope<'a>,
    scopes: Vec<Scope<'a>>,
    call_depth: usize,
    line: u32,
}

pub(super) fn run(
    ast: &ProgramAst,
    image: &ImageHandle,
    backend: &dyn Perception,
    deadline: Instant,
) -> Result<ExecutionOutcome, PerceptionError> {
    let mut it = Interp {
        backend,
        deadline,
        steps: 0,
        polls: 0,
        locals: HashMap::new(),
        scopes: Vec::new(),
        call_depth: 0,
        line: 1,
    };
    it.locals.insert(&ast.param, Value::Image(Rc::new(image.clone())));
    let result = it.exec_block(&ast.body).and_then(|flow| match flow {
        Flow::Return(v) => to_answer(&v),
        _ => Ok("None".to_string()),
    });
    match result {
        Ok(answer) => Ok(ExecutionOutcome::answer(answer)),
        Err(Exc::Runtime(msg)) => {
            Ok(ExecutionOutcome::failure(OutcomeKind::RuntimeError, format!("{msg} (line {})", it.line)))
        }
        Err(Exc::Timeout(msg)) => Ok(ExecutionOutcome::failure(OutcomeKind::Timeout, msg)),
        Err(Exc::Backend(e)) => Err(e),
    }
}

fn plural(n: usize, word: &str) -> String {
    if n == 1 {
        format!("{n} {word}")
    } else {
        format!("{n} {word}s")
    }
}

fn quoted_list(names: &[&str]) -> String {
    let q: Vec<String> = names.iter().map(|n| format!("'{n}'")).collect();
    match q.len() {
        0 => String::new(),
        1 => q[0].clone(),
        2 => format!("{} and {}", q[0], q[1]),
        n => format!("{}, and {}", q[..n - 1].join(", "), q[n - 1]),
    }
}

/// Binds call arguments to named parameters, producing Python-style
/// arity diagnostics.
fn bind<'a>(
    fname: &str,
    params: &[&str],
    required: usize,
    pos: Vec<Value<'a>>,
    kw: Vec<(String, Value<'a>)>,
) -> VResult<Vec<Option<Value<'a>>>> {
    if pos.len() > params.len() {
        let takes = if required == params.len() {
            plural(params.len(), "positional argument")
        } else {
            format!("from {} to {} positional arguments", required, params.len())
        };
        let were = if pos.len() == 1 { "was" } else { "were" };
        return type_error(format!("{fname}() takes {takes} but {} {were} given", pos.len()));
    }
    let mut slots: Vec<Option<Value<'a>>> = vec![None; params.len()];
    let npos = pos.len();
    for (i, v) in pos.into_iter().enumerate() {
        slots[i] = Some(v);
    }
    for (k, v) in kw {
        let Some(i) = params.iter().position(|p| *p == k) else {
            return type_error(format!("{fname}() got an unexpected keyword argument '{k}'"));
        };
        if i < npos || slots[i].is_some() {
            return type_error(format!("{fname}() got multiple values for argument '{k}'"));
        }
        slots[i] = Some(v);
    }
    let missing: Vec<&str> = (0..required).filter(|&i| slots[i].is_none()).map(|i| params[i]).collect();
    if !missing.is_empty() {
        return type_error(format!(
            "{fname}() missing {} required positional argument{}: {}",
            missing.len(),
            if missing.len() == 1 { "" } else { "s" },
            quoted_list(&missing)
        ));
    }
    Ok(slots)
}

fn no_kwargs(fname: &str, kw: &[(String, Value)]) -> VResult<()> {
    match kw.first() {
        Some((k, _)) => type_error(format!("{fname}() got an unexpected keyword argument '{k}'")),
        None => Ok(()),
    }
}

fn binop_symbol(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::FloorDiv => "//",
        BinOp::Mod => "%",
        BinOp::Pow => "**",
    }
}

fn overflow<T>() -> VResult<T> {
    rt("OverflowError: integer overflow")
}

fn int_binop<'a>(op: BinOp, a: i64, b: i64) -> VResult<Value<'a>> {
    let r = match op {
        BinOp::Add => a.checked_add(b),
        BinOp::Sub => a.checked_sub(b),
        BinOp::Mul => a.checked_mul(b),
        BinOp::Div => {
            if b == 0 {
                return rt("ZeroDivisionError: division by zero");
            }
            return Ok(Value::Float(a as f64 / b as f64));
        }
        BinOp::FloorDiv => {
            if b == 0 {
                return rt("ZeroDivisionError: integer division or modulo by zero");
            }
            a.checked_div(b).map(|q| if a % b != 0 && ((a < 0) != (b < 0)) { q - 1 } else { q })
        }
        BinOp::Mod => {
            if b == 0 {
                return rt("ZeroDivisionError: integer division or modulo by zero");
            }
            a.checked_rem(b).map(|r| if r != 0 && ((r < 0) != (b < 0)) { r + b } else { r })
        }
        BinOp::Pow => {
            if b < 0 {
                if a == 0 {
                    return rt("ZeroDivisionError: 0.0 cannot be raised to a negative power");
                }
                return Ok(Value::Float((a as f64).powf(b as f64)));
            }
            u32::try_from(b).ok().and_then(|e| a.checked_pow(e))
        }
    };
    r.map(Value::Int).map_or_else(overflow, Ok)
}

fn float_binop<'a>(op: BinOp, a: f64, b: f64) -> VResult<Value<'a>> {
    let r = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return rt("ZeroDivisionError: float division by zero");
            }
            a / b
        }
        BinOp::FloorDiv => {
            if b == 0.0 {
                return rt("ZeroDivisionError: float floor division by zero");
            }
            (a / b).floor()
        }
        BinOp::Mod => {
            if b == 0.0 {
                return rt("ZeroDivisionError: float modulo");
            }
            let r = a % b;
            if r != 0.0 && ((r < 0.0) != (b < 0.0)) {
                r + b
            } else {
                r
            }
        }
        BinOp::Pow => {
            if a == 0.0 && b < 0.0 {
                return rt("ZeroDivisionError: 0.0 cannot be raised to a negative power");
            }
            if a < 0.0 && b.fract() != 0.0 {
                return rt("ValueError: math domain error");
            }
            a.powf(b)
        }
    };
    if r.is_infinite() && a.is_finite() && b.is_finite() {
        return rt("OverflowError: numerical result out of range");
    }
    Ok(Value::Float(r))
}

fn repeat<'a>(items: &[Value<'a>], n: i64) -> VResult<Vec<Value<'a>>> {
    let n = n.max(0) as usize;
    if items.len().saturating_mul(n) > MAX_ELEMENTS {
        return rt("MemoryError: sequence too large");
    }
    let mut out = Vec::with_capacity(items.len() * n);
    for _ in 0..n {
        out.extend(items.iter().cloned());
    }
    Ok(out)
}

fn concat<'a>(a: &[Value<'a>], b: &[Value<'a>]) -> VResult<Vec<Value<'a>>> {
    if a.len() + b.len() > MAX_ELEMENTS {
        return rt("MemoryError: sequence too large");
    }
    Ok(a.iter().chain(b).cloned().collect())
}

fn binop<'a>(op: BinOp, a: &Value<'a>, b: &Value<'a>) -> VResult<Value<'a>> {
    if let (Some(x), Some(y)) = (a.as_number(), b.as_number()) {
        return match (x, y) {
            (Num::Int(x), Num::Int(y)) => int_binop(op, x, y),
            _ => float_binop(op, x.to_f64(), y.to_f64()),
        };
    }
    match (op, a, b) {
        (BinOp::Add, Value::Str(x), Value::Str(y)) => {
            if x.len() + y.len() > MAX_STR_BYTES {
                return rt("MemoryError: string too large");
            }
            Ok(Value::str(format!("{x}{y}")))
        }
        (BinOp::Mul, Value::Str(s), n) | (BinOp::Mul, n, Value::Str(s)) if matches!(n, Value::Int(_) | Value::Bool(_)) => {
            let n = n.as_index("repeat count")?.max(0) as usize;
            if s.len().saturating_mul(n) > MAX_STR_BYTES {
                return rt("MemoryError: string too large");
            }
            Ok(Value::str(s.repeat(n)))
        }
        (BinOp::Add, Value::List(x), Value::List(y)) => {
            let joined = concat(&x.borrow(), &y.borrow())?;
            Ok(Value::list(joined))
        }
        (BinOp::Add, Value::Tuple(x), Value::Tuple(y)) => Ok(Value::tuple(concat(x, y)?)),
        (BinOp::Mul, Value::List(l), n) | (BinOp::Mul, n, Value::List(l)) if matches!(n, Value::Int(_) | Value::Bool(_)) => {
            let items = l.borrow().clone();
            Ok(Value::list(repeat(&items, n.as_index("repeat count")?)?))
        }
        (BinOp::Mul, Value::Tuple(t), n) | (BinOp::Mul, n, Value::Tuple(t)) if matches!(n, Value::Int(_) | Value::Bool(_)) => {
            Ok(Value::tuple(repeat(t, n.as_index("repeat count")?)?))
        }
        (BinOp::Add, Value::Str(_), other) => {
            type_error(format!("can only concatenate str (not \"{}\") to str", other.type_name()))
        }
        (BinOp::Add, Value::List(_), other) => {
            type_error(format!("can only concatenate list (not \"{}\") to list", other.type_name()))
        }
        _ => type_error(format!(
            "unsupported operand type(s) for {}: '{}' and '{}'",
            binop_symbol(op),
            a.type_name(),
            b.type_name()
        )),
    }
}

/// Python slice index computation.
fn slice_indices(len: usize, lower: Option<i64>, upper: Option<i64>, step: Option<i64>) -> VResult<Vec<usize>> {
    let step = step.unwrap_or(1);
    if step == 0 {
        return rt("ValueError: slice step cannot be zero");
    }
    let len = len as i64;
    let norm = |v: i64, lo: i64, hi: i64| -> i64 {
        let v = if v < 0 { v + len } else { v };
        v.clamp(lo, hi)
    };
    let mut out = Vec::new();
    if step > 0 {
        let start = lower.map_or(0, |v| norm(v, 0, len));
        let stop = upper.map_or(len, |v| norm(v, 0, len));
        let mut i = start;
        while i < stop {
            out.push(i as usize);
            i += step;
        }
    } else {
        let start = lower.map_or(len - 1, |v| norm(v, -1, len - 1));
        let stop = upper.map_or(-1, |v| norm(v, -1, len - 1));
        let mut i = start;
        while i > stop {
            out.push(i as usize);
            i += step;
        }
    }
    Ok(out)
}

fn normalize_index(i: i64, len: usize) -> Option<usize> {
    let len = len as i64;
    let j = if i < 0 { i + len } else { i };
    (0..len).contains(&j).then_some(j as usize)
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn has_method(v: &Value, name: &str) -> bool {
    match v {
        Value::Patch(_) => PATCH_METHODS.contains(&name),
        Value::List(_) => LIST_METHODS.contains(&name),
        Value::Tuple(_) => TUPLE_METHODS.contains(&name),
        Value::Str(_) => STR_METHODS.contains(&name),
        _ => false,
    }
}

fn no_attr<T>(v: &Value, name: &str) -> VResult<T> {
    rt(format!("AttributeError: '{}' object has no attribute '{name}'", v.type_name()))
}

fn patch_attr<'a>(p: &PatchValue, name: &str) -> Option<Value<'a>> {
    let b = &p.bbox;
    Some(match name {
        "left" => Value::Int(b.left),
        "lower" => Value::Int(b.lower),
        "right" => Value::Int(b.right),
        "upper" => Value::Int(b.upper),
        "width" => Value::Int(b.width()),
        "height" => Value::Int(b.height()),
        "area" => Value::Int(b.area()),
        "horizontal_center" => Value::Float((b.left + b.right) as f64 / 2.0),
        "vertical_center" => Value::Float((b.lower + b.upper) as f64 / 2.0),
        "category" => p.category.clone().map_or(Value::None, Value::Str),
        "cropped_image" => Value::Image(p.image.clone()),
        _ => return None,
    })
}

fn get_attr<'a>(v: &Value<'a>, name: &str) -> VResult<Value<'a>> {
    let data = match v {
        Value::Patch(p) => patch_attr(p, name),
        Value::Image(img) => match name {
            "width" => Some(Value::Int(img.width)),
            "height" => Some(Value::Int(img.height)),
            _ => None,
        },
        _ => None,
    };
    if let Some(d) = data {
        return Ok(d);
    }
    if has_method(v, name) {
        return Ok(Value::Method(Rc::new((v.clone(), name.to_string()))));
    }
    no_attr(v, name)
}

fn strip_chars<'s>(s: &'s str, chars: Option<&str>, left: bool, right: bool) -> &'s str {
    let pred = |c: char| match chars {
        Some(set) => set.contains(c),
        None => c.is_whitespace(),
    };
    let s = if left { s.trim_start_matches(pred) } else { s };
    if right {
        s.trim_end_matches(pred)
    } else {
        s
    }
}

fn split_whitespace_max(s: &str, maxsplit: i64) -> Vec<String> {
    if maxsplit < 0 {
        return s.split_whitespace().map(str::to_string).collect();
    }
    let mut out = Vec::new();
    let mut rest = s.trim_start();
    while !rest.is_empty() {
        if out.len() as i64 == maxsplit {
            out.push(rest.to_string());
            break;
        }
        match rest.find(char::is_whitespace) {
            Some(i) => {
                out.push(rest[..i].to_string());
                rest = rest[i..].trim_start();
            }
            None => {
                out.push(rest.to_string());
                break;
            }
        }
    }
    out
}

fn title_case(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut prev_cased = false;
    for c in s.chars() {
        if c.is_alphabetic() {
            if prev_cased {
                out.extend(c.to_lowercase());
            } else {
                out.extend(c.to_uppercase());
            }
            prev_cased = true;
        } else {
            out.push(c);
            prev_cased = false;
        }
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect(),
        None => String::new(),
    }
}

fn to_coord(v: &Value, what: &str) -> VResult<i64> {
    let f = v.as_f64(what)?;
    if !f.is_finite() {
        return rt(format!("ValueError: {what} must be finite"));
    }
    Ok(f.round() as i64)
}

impl<'a, 'b> Interp<'a, 'b> {
    fn tick(&mut self) -> VResult<()> {
        self.steps += 1;
        if self.steps > STEP_BUDGET {
            return Err(Exc::Timeout(format!("TimeoutError: step budget of {STEP_BUDGET} exhausted")));
        }
        if self.steps.is_multiple_of(DEADLINE_CHECK_EVERY) {
            self.check_deadline()?;
        }
        Ok(())
    }

    /// Deadline check for long-running builtins; does not consume steps.
    fn poll(&mut self) -> VResult<()> {
        self.polls += 1;
        if self.polls.is_multiple_of(4096) {
            self.check_deadline()?;
        }
        Ok(())
    }

    fn check_deadline(&self) -> VResult<()> {
        if Instant::now() > self.deadline {
            return Err(Exc::Timeout("TimeoutError: wall-clock budget exceeded".into()));
        }
        Ok(())
    }

    fn host<T>(&mut self, r: Result<T, PerceptionError>) -> VResult<T> {
        let v = r.map_err(Exc::Backend)?;
        self.check_deadline()?;
        Ok(v)
    }

    fn exec_block(&mut self, body: &'a [Stmt]) -> VResult<Flow<'a>> {
        for s in body {
            match self.exec(s)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Normal)
    }

    fn exec(&mut self, s: &'a Stmt) -> VResult<Flow<'a>> {
        self.tick()?;
        match s {
            Stmt::Assign { targets, value, pos } => {
                self.line = pos.line;
                let v = self.eval(value)?;
                for t in targets {
                    self.assign(t, v.clone(), false)?;
                }
            }
            Stmt::AugAssign { target, op, value, pos } => {
                self.line = pos.line;
                self.aug_assign(target, *op, value)?;
            }
            Stmt::Expr(e) => {
                self.line = e.pos.line;
                self.eval(e)?;
            }
            Stmt::If { branches, orelse, pos } => {
                self.line = pos.line;
                for (cond, body) in branches {
                    self.line = cond.pos.line;
                    if self.eval(cond)?.truthy() {
                        return self.exec_block(body);
                    }
                }
                return self.exec_block(orelse);
            }
            Stmt::For { target, iter, body, pos } => {
                self.line = pos.line;
                let items = self.eval(iter)?.iterate()?;
                for item in items {
                    self.tick()?;
                    self.line = pos.line;
                    self.assign(target, item, false)?;
                    match self.exec_block(body)? {
                        Flow::Break => break,
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Normal | Flow::Continue => {}
                    }
                }
            }
            Stmt::While { cond, body, pos } => loop {
                self.tick()?;
                self.line = pos.line;
                if !self.eval(cond)?.truthy() {
                    break;
                }
                match self.exec_block(body)? {
                    Flow::Break => break,
                    Flow::Return(v) => return Ok(Flow::Return(v)),
                    Flow::Normal | Flow::Continue => {}
                }
            },
            Stmt::Return(value, pos) => {
                self.line = pos.line;
                let v = match value {
                    Some(e) => self.eval(e)?,
                    None => Value::None,
                };
                return Ok(Flow::Return(v));
            }
            Stmt::Pass => {}
            Stmt::Break(_) => return Ok(Flow::Break),
            Stmt::Continue(_) => return Ok(Flow::Continue),
        }
        Ok(Flow::Normal)
    }

    fn lookup(&self, name: &'a str) -> VResult<Value<'a>> {
        for scope in self.scopes.iter().rev() {
            if let Some(v) = scope.get(name) {
                return Ok(v.clone());
            }
        }
        if let Some(v) = self.locals.get(name) {
            return Ok(v.clone());
        }
        if let Some(b) = BUILTINS.iter().find(|b| **b == name) {
            return Ok(Value::Builtin(b));
        }
        rt(format!("NameError: name '{name}' is not defined"))
    }

    fn bind_name(&mut self, name: &'a str, v: Value<'a>, inner: bool) {
        match self.scopes.last_mut() {
            Some(scope) if inner => {
                scope.insert(name, v);
            }
            _ => {
                self.locals.insert(name, v);
            }
        }
    }

    fn assign(&mut self, t: &'a Target, v: Value<'a>, inner: bool) -> VResult<()> {
        match t {
            Target::Name(n) => {
                self.bind_name(n, v, inner);
                Ok(())
            }
            Target::Index(container, index) => {
                let c = self.eval(container)?;
                let i = self.eval(index)?;
                self.set_item(&c, &i, v)
            }
            Target::Tuple(targets) => {
                let items = match &v {
                    Value::List(_) | Value::Tuple(_) | Value::Str(_) => v.iterate()?,
                    other => return type_error(format!("cannot unpack non-iterable {} object", other.type_name())),
                };
                if items.len() > targets.len() {
                    return rt(format!("ValueError: too many values to unpack (expected {})", targets.len()));
                }
                if items.len() < targets.len() {
                    return rt(format!(
                        "ValueError: not enough values to unpack (expected {}, got {})",
                        targets.len(),
                        items.len()
                    ));
                }
                for (t, item) in targets.iter().zip(items) {
                    self.assign(t, item, inner)?;
                }
                Ok(())
            }
        }
    }

    fn set_item(&mut self, c: &Value<'a>, i: &Value<'a>, v: Value<'a>) -> VResult<()> {
        match c {
            Value::List(l) => {
                let idx = match i {
                    Value::Int(_) | Value::Bool(_) => i.as_index("list indices")?,
                    other => return type_error(format!("list indices must be integers or slices, not {}", other.type_name())),
                };
                let len = l.borrow().len();
                let Some(j) = normalize_index(idx, len) else {
                    return rt("IndexError: list assignment index out of range");
                };
                l.borrow_mut()[j] = v;
                Ok(())
            }
            other => type_error(format!("'{}' object does not support item assignment", other.type_name())),
        }
    }

    fn aug_assign(&mut self, target: &'a Target, op: BinOp, value: &'a Expr) -> VResult<()> {
        match target {
            Target::Name(n) => {
                let current = self.lookup(n)?;
                let rhs = self.eval(value)?;
                let new = self.inplace(op, &current, &rhs)?;
                self.bind_name(n, new, false);
                Ok(())
            }
            Target::Index(container, index) => {
                let c = self.eval(container)?;
                let i = self.eval(index)?;
                let current = self.get_item(&c, &i)?;
                let rhs = self.eval(value)?;
                let new = self.inplace(op, &current, &rhs)?;
                self.set_item(&c, &i, new)
            }
            Target::Tuple(_) => rt("SyntaxError: illegal expression for augmented assignment"),
        }
    }

    /// `+=` on a list extends it in place, preserving aliasing.
    fn inplace(&mut self, op: BinOp, current: &Value<'a>, rhs: &Value<'a>) -> VResult<Value<'a>> {
        if let (BinOp::Add, Value::List(l)) = (op, current) {
            let extra = match rhs {
                Value::List(_) | Value::Tuple(_) | Value::Str(_) => rhs.iterate()?,
                other => return type_error(format!("'{}' object is not iterable", other.type_name())),
            };
            if l.borrow().len() + extra.len() > MAX_ELEMENTS {
                return rt("MemoryError: sequence too large");
            }
            l.borrow_mut().extend(extra);
            return Ok(current.clone());
        }
        binop(op, current, rhs)
    }

    fn get_item(&mut self, c: &Value<'a>, i: &Value<'a>) -> VResult<Value<'a>> {
        let (kind, len) = match c {
            Value::List(l) => ("list", l.borrow().len()),
            Value::Tuple(t) => ("tuple", t.len()),
            Value::Str(s) => ("string", char_len(s)),
            other => return type_error(format!("'{}' object is not subscriptable", other.type_name())),
        };
        let idx = match i {
            Value::Int(_) | Value::Bool(_) => i.as_index("indices")?,
            other => {
                let k = if kind == "string" { "string" } else { kind };
                return type_error(format!("{k} indices must be integers or slices, not {}", other.type_name()));
            }
        };
        let Some(j) = normalize_index(idx, len) else {
            return rt(format!("IndexError: {kind} index out of range"));
        };
        Ok(match c {
            Value::List(l) => l.borrow()[j].clone(),
            Value::Tuple(t) => t[j].clone(),
            Value::Str(s) => Value::str(s.chars().nth(j).map(String::from).unwrap_or_default()),
            _ => unreachable!("checked above"),
        })
    }

    fn slice_bound(&mut self, e: &'a Option<Box<Expr>>) -> VResult<Option<i64>> {
        match e {
            None => Ok(None),
            Some(e) => match self.eval(e)? {
                Value::None => Ok(None),
                v @ (Value::Int(_) | Value::Bool(_)) => Ok(Some(v.as_index("slice indices")?)),
                other => type_error(format!(
                    "slice indices must be integers or None or have an __index__ method, not {}",
                    other.type_name()
                )),
            },
        }
    }

    fn eval(&mut self, e: &'a Expr) -> VResult<Value<'a>> {
        Ok(match &e.kind {
            ExprKind::None => Value::None,
            ExprKind::Bool(b) => Value::Bool(*b),
            ExprKind::Int(i) => Value::Int(*i),
            ExprKind::Float(f) => Value::Float(*f),
            ExprKind::Str(s) => Value::str(s.as_str()),
            ExprKind::FStr(parts) => {
                let mut out = String::new();
                for p in parts {
                    match p {
                        FPart::Lit(s) => out.push_str(s),
                        FPart::Expr(x, spec) => {
                            let v = self.eval(x)?;
                            match spec {
                                Some(spec) => out.push_str(&format_spec(&v, spec)?),
                                None => out.push_str(&py_str(&v)?),
                            }
                        }
                    }
                    if out.len() > MAX_STR_BYTES {
                        return rt("MemoryError: string too large");
                    }
                }
                Value::str(out)
            }
            ExprKind::Name(n) => self.lookup(n)?,
            ExprKind::List(items) => {
                let vals = items.iter().map(|x| self.eval(x)).collect::<VResult<Vec<_>>>()?;
                Value::list(vals)
            }
            ExprKind::Tuple(items) => {
                let vals = items.iter().map(|x| self.eval(x)).collect::<VResult<Vec<_>>>()?;
                Value::tuple(vals)
            }
            ExprKind::Attr(obj, name) => {
                let o = self.eval(obj)?;
                get_attr(&o, name)?
            }
            ExprKind::Index(c, i) => {
                let c = self.eval(c)?;
                let i = self.eval(i)?;
                self.get_item(&c, &i)?
            }
            ExprKind::Slice { value, lower, upper, step } => {
                let v = self.eval(value)?;
                let (lo, up, st) = (self.slice_bound(lower)?, self.slice_bound(upper)?, self.slice_bound(step)?);
                match &v {
                    Value::List(l) => {
                        let items = l.borrow();
                        let idx = slice_indices(items.len(), lo, up, st)?;
                        Value::list(idx.into_iter().map(|i| items[i].clone()).collect())
                    }
                    Value::Tuple(t) => {
                        let idx = slice_indices(t.len(), lo, up, st)?;
                        Value::tuple(idx.into_iter().map(|i| t[i].clone()).collect())
                    }
                    Value::Str(s) => {
                        let chars: Vec<char> = s.chars().collect();
                        let idx = slice_indices(chars.len(), lo, up, st)?;
                        Value::str(idx.into_iter().map(|i| chars[i]).collect::<String>())
                    }
                    other => return type_error(format!("'{}' object is not subscriptable", other.type_name())),
                }
            }
            ExprKind::Call { func, args, kwargs } => return self.eval_call(func, args, kwargs),
            ExprKind::Unary(op, x) => {
                let v = self.eval(x)?;
                match op {
                    UnaryOp::Not => Value::Bool(!v.truthy()),
                    UnaryOp::Neg => match v.as_number() {
                        Some(Num::Int(i)) => Value::Int(i.checked_neg().map_or_else(overflow, Ok)?),
                        Some(Num::Float(f)) => Value::Float(-f),
                        None => return type_error(format!("bad operand type for unary -: '{}'", v.type_name())),
                    },
                    UnaryOp::Plus => match v.as_number() {
                        Some(Num::Int(i)) => Value::Int(i),
                        Some(Num::Float(f)) => Value::Float(f),
                        None => return type_error(format!("bad operand type for unary +: '{}'", v.type_name())),
                    },
                }
            }
            ExprKind::Binary(op, a, b) => {
                let a = self.eval(a)?;
                let b = self.eval(b)?;
                binop(*op, &a, &b)?
            }
            ExprKind::And(a, b) => {
                let a = self.eval(a)?;
                if !a.truthy() {
                    a
                } else {
                    self.eval(b)?
                }
            }
            ExprKind::Or(a, b) => {
                let a = self.eval(a)?;
                if a.truthy() {
                    a
                } else {
                    self.eval(b)?
                }
            }
            ExprKind::Compare(first, rest) => {
                let mut left = self.eval(first)?;
                for (op, rhs) in rest {
                    let right = self.eval(rhs)?;
                    if !self.compare(*op, &left, &right)? {
                        return Ok(Value::Bool(false));
                    }
                    left = right;
                }
                Value::Bool(true)
            }
            ExprKind::IfExp { cond, then, orelse } => {
                if self.eval(cond)?.truthy() {
                    self.eval(then)?
                } else {
                    self.eval(orelse)?
                }
            }
            ExprKind::Lambda { params, body } => {
                Value::Lambda(Rc::new(LambdaValue { params, body, captured: self.scopes.clone() }))
            }
            ExprKind::Comp { elt, generators } => {
                let mut out = Vec::new();
                self.comprehension(generators, elt, &mut |v| {
                    out.push(v);
                    true
                })?;
                Value::list(out)
            }
        })
    }

    /// Runs a comprehension, feeding each element to `sink` until it
    /// returns false.
    fn comprehension(
        &mut self,
        gens: &'a [Comprehension],
        elt: &'a Expr,
        sink: &mut dyn FnMut(Value<'a>) -> bool,
    ) -> VResult<()> {
        self.scopes.push(HashMap::new());
        let r = self.comp_level(gens, 0, elt, sink);
        self.scopes.pop();
        r.map(|_| ())
    }

    fn comp_level(
        &mut self,
        gens: &'a [Comprehension],
        level: usize,
        elt: &'a Expr,
        sink: &mut dyn FnMut(Value<'a>) -> bool,
    ) -> VResult<bool> {
        if level == gens.len() {
            let v = self.eval(elt)?;
            return Ok(sink(v));
        }
        let g = &gens[level];
        let items = self.eval(&g.iter)?.iterate()?;
        'items: for item in items {
            self.tick()?;
            self.assign(&g.target, item, true)?;
            for c in &g.conds {
                if !self.eval(c)?.truthy() {
                    continue 'items;
                }
            }
            if !self.comp_level(gens, level + 1, elt, sink)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn compare(&mut self, op: CmpOp, a: &Value<'a>, b: &Value<'a>) -> VResult<bool> {
        let ord = |sym: &str, f: fn(Ordering) -> bool| -> VResult<bool> { Ok(py_cmp(a, b, sym)?.is_some_and(f)) };
        match op {
            CmpOp::Eq => py_eq(a, b),
            CmpOp::Ne => Ok(!py_eq(a, b)?),
            CmpOp::Lt => ord("<", Ordering::is_lt),
            CmpOp::Gt => ord(">", Ordering::is_gt),
            CmpOp::Le => ord("<=", Ordering::is_le),
            CmpOp::Ge => ord(">=", Ordering::is_ge),
            CmpOp::In => self.contains(b, a),
            CmpOp::NotIn => Ok(!self.contains(b, a)?),
            CmpOp::Is => Ok(py_is(a, b)),
            CmpOp::IsNot => Ok(!py_is(a, b)),
        }
    }

    fn contains(&mut self, container: &Value<'a>, item: &Value<'a>) -> VResult<bool> {
        match container {
            Value::List(_) | Value::Tuple(_) => {
                for x in container.iterate()? {
                    self.poll()?;
                    if py_eq(&x, item)? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
            Value::Str(s) => match item {
                Value::Str(sub) => Ok(s.contains(sub.as_ref())),
                other => type_error(format!("'in <string>' requires string as left operand, not {}", other.type_name())),
            },
            other => type_error(format!("argument of type '{}' is not iterable", other.type_name())),
        }
    }

    fn eval_args(
        &mut self,
        args: &'a [Expr],
        kwargs: &'a [(String, Expr)],
    ) -> VResult<CallArgs<'a>> {
        let pos = args.iter().map(|a| self.eval(a)).collect::<VResult<Vec<_>>>()?;
        let kw = kwargs.iter().map(|(k, v)| Ok((k.clone(), self.eval(v)?))).collect::<VResult<Vec<_>>>()?;
        Ok((pos, kw))
    }

    fn eval_call(&mut self, func: &'a Expr, args: &'a [Expr], kwargs: &'a [(String, Expr)]) -> VResult<Value<'a>> {
        self.tick()?;
        if let ExprKind::Attr(obj, name) = &func.kind {
            let o = self.eval(obj)?;
            if let Value::Patch(p) = &o {
                if patch_attr(p, name).is_some() {
                    return type_error(format!("'{}' object is not callable", get_attr(&o, name)?.type_name()));
                }
            }
            if !has_method(&o, name) {
                return no_attr(&o, name);
            }
            let (pos, kw) = self.eval_args(args, kwargs)?;
            return self.call_method(o, name, pos, kw);
        }
        let f = self.eval(func)?;
        // any/all over a generator short-circuit like Python's lazy generators.
        if let (Value::Builtin(name @ ("any" | "all")), [arg], true) = (&f, args, kwargs.is_empty()) {
            if let ExprKind::Comp { elt, generators } = &arg.kind {
                let want = *name == "any";
                let mut found = false;
                self.comprehension(generators, elt, &mut |v| {
                    if v.truthy() == want {
                        found = true;
                        false
                    } else {
                        true
                    }
                })?;
                return Ok(Value::Bool(if want { found } else { !found }));
            }
        }
        let (pos, kw) = self.eval_args(args, kwargs)?;
        self.call_value(&f, pos, kw)
    }

    fn call_value(&mut self, f: &Value<'a>, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        match f {
            Value::Builtin(name) => self.call_builtin(name, pos, kw),
            Value::Lambda(l) => self.call_lambda(l, pos, kw),
            Value::Method(m) => self.call_method(m.0.clone(), &m.1, pos, kw),
            other => type_error(format!("'{}' object is not callable", other.type_name())),
        }
    }

    fn call_lambda(&mut self, l: &Rc<LambdaValue<'a>>, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        if self.call_depth >= MAX_CALL_DEPTH {
            return rt("RecursionError: maximum recursion depth exceeded");
        }
        let params: Vec<&str> = l.params.iter().map(String::as_str).collect();
        let slots = bind("<lambda>", &params, params.len(), pos, kw)?;
        let mut scope: Scope<'a> = HashMap::new();
        for (p, v) in l.params.iter().zip(slots) {
            scope.insert(p.as_str(), v.unwrap_or(Value::None));
        }
        let mut frames = l.captured.clone();
        frames.push(scope);
        let saved = std::mem::replace(&mut self.scopes, frames);
        self.call_depth += 1;
        let r = self.eval(l.body);
        self.call_depth -= 1;
        self.scopes = saved;
        r
    }

    fn key_of(&mut self, key: &Option<Value<'a>>, v: &Value<'a>) -> VResult<Value<'a>> {
        match key {
            None | Some(Value::None) => Ok(v.clone()),
            Some(f) => self.call_value(f, vec![v.clone()], vec![]),
        }
    }

    /// Stable merge sort with a fallible comparison.
    fn sort_values(&mut self, items: Vec<Value<'a>>, key: &Option<Value<'a>>, reverse: bool) -> VResult<Vec<Value<'a>>> {
        let mut keyed = Vec::with_capacity(items.len());
        for v in items {
            let k = self.key_of(key, &v)?;
            keyed.push((k, v));
        }
        let sorted = self.merge_sort(keyed, reverse)?;
        Ok(sorted.into_iter().map(|(_, v)| v).collect())
    }

    fn merge_sort(&mut self, mut v: Vec<(Value<'a>, Value<'a>)>, reverse: bool) -> VResult<Vec<(Value<'a>, Value<'a>)>> {
        if v.len() <= 1 {
            return Ok(v);
        }
        let right = v.split_off(v.len() / 2);
        let left = self.merge_sort(v, reverse)?;
        let right = self.merge_sort(right, reverse)?;
        let mut out = Vec::with_capacity(left.len() + right.len());
        let mut li = left.into_iter().peekable();
        let mut ri = right.into_iter().peekable();
        while let (Some(l), Some(r)) = (li.peek(), ri.peek()) {
            self.poll()?;
            let take_right = if reverse {
                py_cmp(&l.0, &r.0, "<")? == Some(Ordering::Less)
            } else {
                py_cmp(&r.0, &l.0, "<")? == Some(Ordering::Less)
            };
            let next = if take_right { ri.next() } else { li.next() };
            out.extend(next);
        }
        out.extend(li);
        out.extend(ri);
        Ok(out)
    }

    fn make_patch(&self, image: Rc<ImageHandle>, bbox: BBox, category: Option<Rc<str>>) -> Value<'a> {
        Value::Patch(Rc::new(PatchValue { image, bbox, category }))
    }

    fn call_builtin(&mut self, name: &str, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        match name {
            "len" => {
                let [x] = take(bind(name, &["obj"], 1, pos, kw)?);
                let x = x.unwrap_or(Value::None);
                Ok(Value::Int(match &x {
                    Value::List(l) => l.borrow().len() as i64,
                    Value::Tuple(t) => t.len() as i64,
                    Value::Str(s) => char_len(s) as i64,
                    other => return type_error(format!("object of type '{}' has no len()", other.type_name())),
                }))
            }
            "any" | "all" => {
                let [x] = take(bind(name, &["iterable"], 1, pos, kw)?);
                let items = x.unwrap_or(Value::None).iterate()?;
                Ok(Value::Bool(if name == "any" {
                    items.iter().any(Value::truthy)
                } else {
                    items.iter().all(Value::truthy)
                }))
            }
            "abs" => {
                let [x] = take(bind(name, &["x"], 1, pos, kw)?);
                let x = x.unwrap_or(Value::None);
                match x.as_number() {
                    Some(Num::Int(i)) => Ok(Value::Int(i.checked_abs().map_or_else(overflow, Ok)?)),
                    Some(Num::Float(f)) => Ok(Value::Float(f.abs())),
                    None => type_error(format!("bad operand type for abs(): '{}'", x.type_name())),
                }
            }
            "min" | "max" => self.min_max(name, pos, kw),
            "sorted" => {
                let [it, key, reverse] = take(bind(name, &["iterable", "key", "reverse"], 1, pos, kw)?);
                let items = it.unwrap_or(Value::None).iterate()?;
                let reverse = reverse.is_some_and(|r| r.truthy());
                Ok(Value::list(self.sort_values(items, &key, reverse)?))
            }
            "reversed" => {
                let [seq] = take(bind(name, &["sequence"], 1, pos, kw)?);
                let mut items = seq.unwrap_or(Value::None).iterate()?;
                items.reverse();
                Ok(Value::list(items))
            }
            "sum" => {
                let [it, start] = take(bind(name, &["iterable", "start"], 1, pos, kw)?);
                let mut acc = start.unwrap_or(Value::Int(0));
                if matches!(acc, Value::Str(_)) {
                    return type_error("sum() can't sum strings [use ''.join(seq) instead]");
                }
                for x in it.unwrap_or(Value::None).iterate()? {
                    self.poll()?;
                    acc = binop(BinOp::Add, &acc, &x)?;
                }
                Ok(acc)
            }
            "range" => {
                no_kwargs(name, &kw)?;
                let nums = pos.iter().map(|v| v.as_index("range() arguments")).collect::<VResult<Vec<_>>>()?;
                let (start, stop, step) = match nums.as_slice() {
                    [stop] => (0, *stop, 1),
                    [start, stop] => (*start, *stop, 1),
                    [start, stop, step] => (*start, *stop, *step),
                    [] => return type_error("range expected at least 1 argument, got 0"),
                    _ => return type_error(format!("range expected at most 3 arguments, got {}", nums.len())),
                };
                if step == 0 {
                    return rt("ValueError: range() arg 3 must not be zero");
                }
                let span = if step > 0 { stop as i128 - start as i128 } else { start as i128 - stop as i128 };
                let len = if span <= 0 { 0 } else { (span + step.unsigned_abs() as i128 - 1) / step.unsigned_abs() as i128 };
                if len > MAX_ELEMENTS as i128 {
                    return rt("MemoryError: range too large");
                }
                Ok(Value::list((0..len as i64).map(|k| Value::Int(start + k * step)).collect()))
            }
            "enumerate" => {
                let [it, start] = take(bind(name, &["iterable", "start"], 1, pos, kw)?);
                let start = start.map_or(Ok(0), |s| s.as_index("enumerate start"))?;
                let items = it.unwrap_or(Value::None).iterate()?;
                let mut out = Vec::with_capacity(items.len());
                for (k, v) in items.into_iter().enumerate() {
                    let idx = start.checked_add(k as i64).map_or_else(overflow, Ok)?;
                    out.push(Value::tuple(vec![Value::Int(idx), v]));
                }
                Ok(Value::list(out))
            }
            "zip" => {
                no_kwargs(name, &kw)?;
                let seqs = pos.iter().map(Value::iterate).collect::<VResult<Vec<_>>>()?;
                let n = seqs.iter().map(Vec::len).min().unwrap_or(0);
                Ok(Value::list((0..n).map(|i| Value::tuple(seqs.iter().map(|s| s[i].clone()).collect())).collect()))
            }
            "list" | "tuple" => {
                let [it] = take(bind(name, &["iterable"], 0, pos, kw)?);
                let items = match it {
                    Some(v) => v.iterate()?,
                    None => Vec::new(),
                };
                Ok(if name == "list" { Value::list(items) } else { Value::tuple(items) })
            }
            "str" => {
                let [x] = take(bind(name, &["object"], 0, pos, kw)?);
                Ok(Value::str(match x {
                    Some(v) => py_str(&v)?,
                    None => String::new(),
                }))
            }
            "bool" => {
                let [x] = take(bind(name, &["x"], 0, pos, kw)?);
                Ok(Value::Bool(x.is_some_and(|v| v.truthy())))
            }
            "int" => {
                let [x] = take(bind(name, &["x"], 0, pos, kw)?);
                match x.unwrap_or(Value::Int(0)) {
                    Value::Bool(b) => Ok(Value::Int(b as i64)),
                    Value::Int(i) => Ok(Value::Int(i)),
                    Value::Float(f) => {
                        if f.is_nan() {
                            return rt("ValueError: cannot convert float NaN to integer");
                        }
                        if f.is_infinite() || f.abs() >= 9.2e18 {
                            return rt("OverflowError: cannot convert float infinity to integer");
                        }
                        Ok(Value::Int(f.trunc() as i64))
                    }
                    Value::Str(s) => match s.trim().replace('_', "").parse::<i64>() {
                        Ok(i) if !s.trim().is_empty() => Ok(Value::Int(i)),
                        _ => rt(format!("ValueError: invalid literal for int() with base 10: {}", py_repr(&Value::Str(s.clone()))?)),
                    },
                    other => type_error(format!(
                        "int() argument must be a string, a bytes-like object or a real number, not '{}'",
                        other.type_name()
                    )),
                }
            }
            "float" => {
                let [x] = take(bind(name, &["x"], 0, pos, kw)?);
                match x.unwrap_or(Value::Float(0.0)) {
                    Value::Str(s) => {
                        let t = s.trim().to_ascii_lowercase();
                        let parsed = match t.as_str() {
                            "inf" | "+inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
                            "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
                            "nan" | "+nan" | "-nan" => Some(f64::NAN),
                            _ if t.chars().any(|c| c.is_ascii_digit()) => t.parse::<f64>().ok(),
                            _ => None,
                        };
                        match parsed {
                            Some(f) => Ok(Value::Float(f)),
                            None => rt(format!("ValueError: could not convert string to float: {}", py_repr(&Value::Str(s.clone()))?)),
                        }
                    }
                    other => match other.as_number() {
                        Some(n) => Ok(Value::Float(n.to_f64())),
                        None => type_error(format!("float() argument must be a string or a real number, not '{}'", other.type_name())),
                    },
                }
            }
            "round" => {
                let [x, nd] = take(bind(name, &["number", "ndigits"], 1, pos, kw)?);
                let x = x.unwrap_or(Value::None);
                let nd = match nd {
                    None | Some(Value::None) => None,
                    Some(v) => Some(v.as_index("ndigits")?),
                };
                match (x.as_number(), nd) {
                    (Some(Num::Int(i)), None) => Ok(Value::Int(i)),
                    (Some(Num::Int(i)), Some(d)) if d >= 0 => Ok(Value::Int(i)),
                    (Some(Num::Int(i)), Some(d)) => {
                        let m = 10f64.powi((-d).min(18) as i32);
                        Ok(Value::Int(((i as f64 / m).round_ties_even() * m) as i64))
                    }
                    (Some(Num::Float(f)), None) => {
                        if !f.is_finite() {
                            return rt("ValueError: cannot convert float NaN or infinity to integer");
                        }
                        Ok(Value::Int(f.round_ties_even() as i64))
                    }
                    (Some(Num::Float(f)), Some(d)) => {
                        let m = 10f64.powi(d.clamp(-300, 300) as i32);
                        let r = (f * m).round_ties_even() / m;
                        Ok(Value::Float(if r.is_finite() { r } else { f }))
                    }
                    (None, _) => type_error(format!("type {} doesn't define __round__ method", x.type_name())),
                }
            }
            "print" => Ok(Value::None),
            "isinstance" => {
                let [obj, cls] = take(bind(name, &["obj", "class_or_tuple"], 2, pos, kw)?);
                let (obj, cls) = (obj.unwrap_or(Value::None), cls.unwrap_or(Value::None));
                let classes = match &cls {
                    Value::Tuple(t) => t.as_ref().clone(),
                    other => vec![other.clone()],
                };
                let mut hit = false;
                for c in classes {
                    let Value::Builtin(cname) = c else {
                        return type_error("isinstance() arg 2 must be a type or tuple of types");
                    };
                    hit |= match cname {
                        "int" => matches!(obj, Value::Int(_) | Value::Bool(_)),
                        "float" => matches!(obj, Value::Float(_)),
                        "bool" => matches!(obj, Value::Bool(_)),
                        "str" => matches!(obj, Value::Str(_)),
                        "list" => matches!(obj, Value::List(_)),
                        "tuple" => matches!(obj, Value::Tuple(_)),
                        "ImagePatch" => matches!(obj, Value::Patch(_)),
                        _ => return type_error("isinstance() arg 2 must be a type or tuple of types"),
                    };
                }
                Ok(Value::Bool(hit))
            }
            "bool_to_yesno" => {
                let [x] = take(bind(name, &["bool_answer"], 1, pos, kw)?);
                Ok(Value::str(if x.is_some_and(|v| v.truthy()) { "yes" } else { "no" }))
            }
            "ImagePatch" => self.image_patch(pos, kw),
            "distance" => {
                let [a, b] = take(bind(name, &["patch_a", "patch_b"], 2, pos, kw)?);
                match (a.unwrap_or(Value::None), b.unwrap_or(Value::None)) {
                    (Value::Patch(a), Value::Patch(b)) => {
                        let dx = (a.bbox.left + a.bbox.right - b.bbox.left - b.bbox.right) as f64 / 2.0;
                        let dy = (a.bbox.lower + a.bbox.upper - b.bbox.lower - b.bbox.upper) as f64 / 2.0;
                        Ok(Value::Float(dx.hypot(dy)))
                    }
                    (a, b) => type_error(format!(
                        "distance() arguments must be ImagePatch, not '{}' and '{}'",
                        a.type_name(),
                        b.type_name()
                    )),
                }
            }
            "best_image_match" => self.best_image_match(pos, kw),
            other => rt(format!("NameError: name '{other}' is not defined")),
        }
    }

    fn min_max(&mut self, name: &str, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        let mut key = None;
        let mut default = None;
        for (k, v) in kw {
            match k.as_str() {
                "key" => key = Some(v),
                "default" => default = Some(v),
                _ => return type_error(format!("{name}() got an unexpected keyword argument '{k}'")),
            }
        }
        let items = match pos.len() {
            0 => return type_error(format!("{name} expected at least 1 argument, got 0")),
            1 => pos[0].iterate()?,
            _ => {
                if default.is_some() {
                    return type_error(format!(
                        "Cannot specify a default for {name}() with multiple positional arguments"
                    ));
                }
                pos
            }
        };
        let mut best: Option<(Value<'a>, Value<'a>)> = None;
        for v in items {
            self.poll()?;
            let k = self.key_of(&key, &v)?;
            let replace = match &best {
                None => true,
                Some((bk, _)) => {
                    let want = if name == "max" { Ordering::Greater } else { Ordering::Less };
                    py_cmp(&k, bk, if name == "max" { ">" } else { "<" })? == Some(want)
                }
            };
            if replace {
                best = Some((k, v));
            }
        }
        match (best, default) {
            (Some((_, v)), _) => Ok(v),
            (None, Some(d)) => Ok(d),
            (None, None) => rt(format!("ValueError: {name}() arg is an empty sequence")),
        }
    }

    fn image_patch(&mut self, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        let [image, left, lower, right, upper, category] =
            take(bind("ImagePatch", &["image", "left", "lower", "right", "upper", "category"], 1, pos, kw)?);
        let image = match image.unwrap_or(Value::None) {
            Value::Image(img) => img,
            Value::Patch(p) => p.image.clone(),
            other => {
                return type_error(format!("ImagePatch() argument 'image' must be an image, not '{}'", other.type_name()))
            }
        };
        let coord = |v: Option<Value<'a>>, default: i64, what: &str| -> VResult<i64> {
            match v {
                None | Some(Value::None) => Ok(default),
                Some(v) => to_coord(&v, what),
            }
        };
        let (w, h) = (image.width as i64, image.height as i64);
        let bbox = BBox::new(
            coord(left, 0, "left")?.clamp(0, w),
            coord(lower, 0, "lower")?.clamp(0, h),
            coord(right, w, "right")?.clamp(0, w),
            coord(upper, h, "upper")?.clamp(0, h),
        );
        if !bbox.is_valid() {
            return rt("ValueError: ImagePatch coordinates must satisfy left < right and lower < upper");
        }
        let category = match category {
            None | Some(Value::None) => None,
            Some(v) => Some(v.as_str("category")?),
        };
        Ok(self.make_patch(image, bbox, category))
    }

    fn best_image_match(&mut self, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        let [patches, content, return_index] =
            take(bind("best_image_match", &["list_patches", "content", "return_index"], 2, pos, kw)?);
        let patches = patches.unwrap_or(Value::None).iterate()?;
        let texts: Vec<Rc<str>> = match content.unwrap_or(Value::None) {
            Value::Str(s) => vec![s],
            other => other.iterate()?.iter().map(|v| v.as_str("content items")).collect::<VResult<_>>()?,
        };
        let return_index = return_index.is_some_and(|v| v.truthy());
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in patches.iter().enumerate() {
            let Value::Patch(p) = p else {
                return type_error(format!("best_image_match() expects ImagePatch items, not '{}'", p.type_name()));
            };
            let mut score = f64::NEG_INFINITY;
            for t in &texts {
                let s = self.host(self.backend.itm_score(&p.image, p.bbox, t))?;
                score = score.max(s);
            }
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        Ok(match best {
            None => Value::None,
            Some((i, _)) if return_index => Value::Int(i as i64),
            Some((i, _)) => patches[i].clone(),
        })
    }

    fn call_method(&mut self, obj: Value<'a>, name: &str, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        match &obj {
            Value::Patch(p) => self.patch_method(p.clone(), name, pos, kw),
            Value::List(_) => self.list_method(&obj, name, pos, kw),
            Value::Tuple(t) => {
                let [x] = take(bind(name, &["value"], 1, pos, kw)?);
                let x = x.unwrap_or(Value::None);
                let mut hits = Vec::new();
                for (i, v) in t.iter().enumerate() {
                    if py_eq(v, &x)? {
                        hits.push(i);
                    }
                }
                match name {
                    "count" => Ok(Value::Int(hits.len() as i64)),
                    _ => match hits.first() {
                        Some(i) => Ok(Value::Int(*i as i64)),
                        None => rt("ValueError: tuple.index(x): x not in tuple"),
                    },
                }
            }
            Value::Str(s) => self.str_method(s.clone(), name, pos, kw),
            other => no_attr(other, name),
        }
    }

    fn patch_method(&mut self, p: Rc<PatchValue>, name: &str, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        let backend = self.backend;
        match name {
            "find" | "exists" => {
                let [obj] = take(bind(name, &["object_name"], 1, pos, kw)?);
                let obj = obj.unwrap_or(Value::None).as_str("object_name")?;
                let found = self.host(backend.detect(&p.image, p.bbox, &obj))?;
                if name == "exists" {
                    return Ok(Value::Bool(!found.is_empty()));
                }
                let patches = found
                    .into_iter()
                    .map(|d| self.make_patch(p.image.clone(), d.bbox, Some(Rc::from(d.category.as_str()))))
                    .collect();
                Ok(Value::list(patches))
            }
            "verify_property" => {
                let [obj, prop] = take(bind(name, &["object_name", "visual_property"], 2, pos, kw)?);
                let obj = obj.unwrap_or(Value::None).as_str("object_name")?;
                let prop = prop.unwrap_or(Value::None).as_str("visual_property")?;
                Ok(Value::Bool(self.host(backend.verify_property(&p.image, p.bbox, &obj, &prop))?))
            }
            "simple_query" => {
                let [q] = take(bind(name, &["question"], 0, pos, kw)?);
                let q = match q {
                    None | Some(Value::None) => Rc::from("What is this?"),
                    Some(v) => v.as_str("question")?,
                };
                Ok(Value::str(self.host(backend.simple_query(&p.image, p.bbox, &q))?))
            }
            _ => {
                let side = match name {
                    "crop_left_of_bbox" => Side::Left,
                    "crop_right_of_bbox" => Side::Right,
                    "crop_above_bbox" | "crop_above_of_bbox" => Side::Above,
                    _ => Side::Below,
                };
                let [l, lo, r, u] = take(bind(name, &["left", "lower", "right", "upper"], 4, pos, kw)?);
                let c = |v: Option<Value<'a>>, w: &str| to_coord(&v.unwrap_or(Value::None), w);
                let bbox = BBox::new(c(l, "left")?, c(lo, "lower")?, c(r, "right")?, c(u, "upper")?);
                let cropped = crop_directional(p.bbox, side, bbox);
                Ok(self.make_patch(p.image.clone(), cropped, None))
            }
        }
    }

    fn list_method(&mut self, obj: &Value<'a>, name: &str, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        let Value::List(l) = obj else { unreachable!("caller checked list") };
        match name {
            "append" => {
                let [x] = take(bind(name, &["object"], 1, pos, kw)?);
                if l.borrow().len() >= MAX_ELEMENTS {
                    return rt("MemoryError: list too large");
                }
                l.borrow_mut().push(x.unwrap_or(Value::None));
                Ok(Value::None)
            }
            "extend" => {
                let [x] = take(bind(name, &["iterable"], 1, pos, kw)?);
                let items = x.unwrap_or(Value::None).iterate()?;
                if l.borrow().len() + items.len() > MAX_ELEMENTS {
                    return rt("MemoryError: list too large");
                }
                l.borrow_mut().extend(items);
                Ok(Value::None)
            }
            "sort" => {
                if let Some(v) = pos.first() {
                    return type_error(format!("sort() takes no positional arguments (got {})", v.type_name()));
                }
                let [key, reverse] = take(bind(name, &["key", "reverse"], 0, pos, kw)?);
                let items = l.borrow().clone();
                let sorted = self.sort_values(items, &key, reverse.is_some_and(|r| r.truthy()))?;
                *l.borrow_mut() = sorted;
                Ok(Value::None)
            }
            "index" | "count" | "remove" => {
                let [x] = take(bind(name, &["value"], 1, pos, kw)?);
                let x = x.unwrap_or(Value::None);
                let items = l.borrow().clone();
                let mut hits = Vec::new();
                for (i, v) in items.iter().enumerate() {
                    self.poll()?;
                    if py_eq(v, &x)? {
                        hits.push(i);
                    }
                }
                match name {
                    "count" => Ok(Value::Int(hits.len() as i64)),
                    "index" => match hits.first() {
                        Some(i) => Ok(Value::Int(*i as i64)),
                        None => rt(format!("ValueError: {} is not in list", py_repr(&x)?)),
                    },
                    _ => match hits.first() {
                        Some(i) => {
                            l.borrow_mut().remove(*i);
                            Ok(Value::None)
                        }
                        None => rt("ValueError: list.remove(x): x not in list"),
                    },
                }
            }
            "pop" => {
                let [i] = take(bind(name, &["index"], 0, pos, kw)?);
                let len = l.borrow().len();
                if len == 0 {
                    return rt("IndexError: pop from empty list");
                }
                let idx = i.map_or(Ok(-1), |v| v.as_index("list indices"))?;
                match normalize_index(idx, len) {
                    Some(j) => Ok(l.borrow_mut().remove(j)),
                    None => rt("IndexError: pop index out of range"),
                }
            }
            "insert" => {
                let [i, x] = take(bind(name, &["index", "object"], 2, pos, kw)?);
                let idx = i.unwrap_or(Value::None).as_index("list indices")?;
                let len = l.borrow().len() as i64;
                if len as usize >= MAX_ELEMENTS {
                    return rt("MemoryError: list too large");
                }
                let j = if idx < 0 { (idx + len).max(0) } else { idx.min(len) };
                l.borrow_mut().insert(j as usize, x.unwrap_or(Value::None));
                Ok(Value::None)
            }
            "reverse" => {
                take::<0>(bind(name, &[], 0, pos, kw)?);
                l.borrow_mut().reverse();
                Ok(Value::None)
            }
            "copy" => {
                take::<0>(bind(name, &[], 0, pos, kw)?);
                let items = l.borrow().clone();
                Ok(Value::list(items))
            }
            "clear" => {
                take::<0>(bind(name, &[], 0, pos, kw)?);
                l.borrow_mut().clear();
                Ok(Value::None)
            }
            _ => no_attr(obj, name),
        }
    }

    fn str_method(&mut self, s: Rc<str>, name: &str, pos: Vec<Value<'a>>, kw: Vec<(String, Value<'a>)>) -> VResult<Value<'a>> {
        let opt_str = |v: Option<Value<'a>>, what: &str| -> VResult<Option<Rc<str>>> {
            match v {
                None | Some(Value::None) => Ok(None),
                Some(v) => v.as_str(what).map(Some),
            }
        };
        match name {
            "lower" | "upper" | "capitalize" | "title" | "isdigit" | "isalpha" | "islower" => {
                take::<0>(bind(name, &[], 0, pos, kw)?);
                Ok(match name {
                    "lower" => Value::str(s.to_lowercase()),
                    "upper" => Value::str(s.to_uppercase()),
                    "capitalize" => Value::str(capitalize(&s)),
                    "title" => Value::str(title_case(&s)),
                    "isdigit" => Value::Bool(!s.is_empty() && s.chars().all(|c| c.is_ascii_digit())),
                    "isalpha" => Value::Bool(!s.is_empty() && s.chars().all(char::is_alphabetic)),
                    _ => Value::Bool(s.chars().any(char::is_alphabetic) && !s.chars().any(char::is_uppercase)),
                })
            }
            "strip" | "lstrip" | "rstrip" => {
                let [chars] = take(bind(name, &["chars"], 0, pos, kw)?);
                let chars = opt_str(chars, "chars")?;
                let out = strip_chars(&s, chars.as_deref(), name != "rstrip", name != "lstrip");
                Ok(Value::str(out))
            }
            "split" => {
                let [sep, maxsplit] = take(bind(name, &["sep", "maxsplit"], 0, pos, kw)?);
                let sep = opt_str(sep, "sep")?;
                let maxsplit = maxsplit.map_or(Ok(-1), |v| v.as_index("maxsplit"))?;
                let parts: Vec<String> = match sep {
                    None => split_whitespace_max(&s, maxsplit),
                    Some(sep) if sep.is_empty() => return rt("ValueError: empty separator"),
                    Some(sep) if maxsplit < 0 => s.split(sep.as_ref()).map(str::to_string).collect(),
                    Some(sep) => s.splitn(maxsplit as usize + 1, sep.as_ref()).map(str::to_string).collect(),
                };
                Ok(Value::list(parts.into_iter().map(Value::str).collect()))
            }
            "join" => {
                let [it] = take(bind(name, &["iterable"], 1, pos, kw)?);
                let items = it.unwrap_or(Value::None).iterate()?;
                let mut parts = Vec::with_capacity(items.len());
                for (i, v) in items.iter().enumerate() {
                    match v {
                        Value::Str(x) => parts.push(x.to_string()),
                        other => {
                            return type_error(format!(
                                "sequence item {i}: expected str instance, {} found",
                                other.type_name()
                            ))
                        }
                    }
                }
                let out = parts.join(&s);
                if out.len() > MAX_STR_BYTES {
                    return rt("MemoryError: string too large");
                }
                Ok(Value::str(out))
            }
            "startswith" | "endswith" => {
                let [affix] = take(bind(name, &["prefix"], 1, pos, kw)?);
                let options: Vec<Rc<str>> = match affix.unwrap_or(Value::None) {
                    Value::Tuple(t) => t.iter().map(|v| v.as_str(name)).collect::<VResult<_>>()?,
                    other => vec![other.as_str(name)?],
                };
                Ok(Value::Bool(options.iter().any(|o| {
                    if name == "startswith" {
                        s.starts_with(o.as_ref())
                    } else {
                        s.ends_with(o.as_ref())
                    }
                })))
            }
            "replace" => {
                let [old, new, count] = take(bind(name, &["old", "new", "count"], 2, pos, kw)?);
                let old = old.unwrap_or(Value::None).as_str("replace() argument 1")?;
                let new = new.unwrap_or(Value::None).as_str("replace() argument 2")?;
                let count = count.map_or(Ok(-1), |v| v.as_index("count"))?;
                let out = if count < 0 { s.replace(old.as_ref(), &new) } else { s.replacen(old.as_ref(), &new, count as usize) };
                if out.len() > MAX_STR_BYTES {
                    return rt("MemoryError: string too large");
                }
                Ok(Value::str(out))
            }
            "count" | "find" => {
                let [sub] = take(bind(name, &["sub"], 1, pos, kw)?);
                let sub = sub.unwrap_or(Value::None).as_str(name)?;
                if name == "count" {
                    let n = if sub.is_empty() { char_len(&s) + 1 } else { s.matches(sub.as_ref()).count() };
                    return Ok(Value::Int(n as i64));
                }
                Ok(Value::Int(match s.find(sub.as_ref()) {
                    Some(b) => char_len(&s[..b]) as i64,
                    None => -1,
                }))
            }
            "format" => Ok(Value::str(str_format(&s, &pos, &kw)?)),
            _ => no_attr(&Value::Str(s), name),
        }
    }
}

fn take<const N: usize>(slots: Vec<Option<Value<'_>>>) -> [Option<Value<'_>>; N] {
    slots.try_into().unwrap_or_else(|_| unreachable!("bind returns one slot per parameter"))
}

/// `str.format` with automatic, positional and keyword fields.
fn str_format<'a>(template: &str, pos: &[Value<'a>], kw: &[(String, Value<'a>)]) -> VResult<String> {
    let chars: Vec<char> = template.chars().collect();
    let mut out = String::new();
    let mut auto = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '{' {
            if chars.get(i + 1) == Some(&'{') {
                out.push('{');
                i += 2;
                continue;
            }
            let Some(close) = chars[i..].iter().position(|&c| c == '}') else {
                return rt("ValueError: Single '{' encountered in format string");
            };
            let field: String = chars[i + 1..i + close].iter().collect();
            let (head, spec) = match field.split_once(':') {
                Some((h, s)) => (h.to_string(), s.to_string()),
                None => (field.clone(), String::new()),
            };
            let (head, conv) = match head.split_once('!') {
                Some((h, c)) => (h.to_string(), Some(c.to_string())),
                None => (head, None),
            };
            let value = if head.is_empty() {
                let v = pos.get(auto).cloned();
                auto += 1;
                v.ok_or(()).or_else(|_| {
                    rt(format!("IndexError: Replacement index {} out of range for positional args tuple", auto - 1))
                })?
            } else if let Ok(n) = head.parse::<usize>() {
                pos.get(n).cloned().ok_or(()).or_else(|_| {
                    rt(format!("IndexError: Replacement index {n} out of range for positional args tuple"))
                })?
            } else {
                match kw.iter().find(|(k, _)| *k == head) {
                    Some((_, v)) => v.clone(),
                    None => return rt(format!("KeyError: '{head}'")),
                }
            };
            let value = match conv.as_deref() {
                Some("r") => Value::str(py_repr(&value)?),
                Some("s") => Value::str(py_str(&value)?),
                Some(other) => return rt(format!("ValueError: Unknown conversion specifier {other}")),
                None => value,
            };
            out.push_str(&format_spec(&value, &spec)?);
            if out.len() > MAX_STR_BYTES {
                return rt("MemoryError: string too large");
            }
            i += close + 1;
        } else if c == '}' {
            if chars.get(i + 1) == Some(&'}') {
                out.push('}');
                i += 2;
                continue;
            }
            return rt("ValueError: Single '}' encountered in format string");
        } else {
            out.push(c);
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_directional_clamps() {
        let full = BBox::new(0, 0, 512, 512);
        let b = BBox::new(300, 100, 400, 200);
        assert_eq!(crop_directional(full, Side::Left, b), BBox::new(0, 0, 300, 512));
        assert_eq!(crop_directional(full, Side::Right, b), BBox::new(400, 0, 512, 512));
        assert_eq!(crop_directional(full, Side::Above, b), BBox::new(0, 200, 512, 512));
        assert_eq!(crop_directional(full, Side::Below, b), BBox::new(0, 0, 512, 100));
        let at_left = BBox::new(0, 100, 50, 200);
        assert_eq!(crop_directional(full, Side::Left, at_left), BBox::new(0, 0, 1, 512));
        let at_top = BBox::new(10, 400, 50, 512);
        assert_eq!(crop_directional(full, Side::Above, at_top), BBox::new(0, 511, 512, 512));
    }

    #[test]
    fn slices_follow_python() {
        assert_eq!(slice_indices(5, None, None, Some(-1)).unwrap(), vec![4, 3, 2, 1, 0]);
        assert_eq!(slice_indices(5, Some(1), Some(-1), None).unwrap(), vec![1, 2, 3]);
        assert_eq!(slice_indices(5, Some(-2), None, None).unwrap(), vec![3, 4]);
        assert_eq!(slice_indices(5, Some(10), None, None).unwrap(), Vec::<usize>::new());
        assert!(slice_indices(5, None, None, Some(0)).is_err());
    }

    #[test]
    fn floor_semantics() {
        assert!(matches!(int_binop(BinOp::FloorDiv, -7, 2).unwrap(), Value::Int(-4)));
        assert!(matches!(int_binop(BinOp::Mod, -7, 2).unwrap(), Value::Int(1)));
        assert!(matches!(int_binop(BinOp::Mod, 7, -2).unwrap(), Value::Int(-1)));
        assert!(int_binop(BinOp::Add, i64::MAX, 1).is_err());
        assert!(matches!(float_binop(BinOp::Mod, -7.0, 2.0).unwrap(), Value::Float(f) if f == 1.0));
    }

    #[test]
    fn format_fields() {
        let pos = [Value::Int(1), Value::str("a")];
        let kw = [("x".to_string(), Value::Float(0.5))];
        assert_eq!(str_format("{} {} {x:.2f} {{}}", &pos, &kw).unwrap(), "1 a 0.50 {}");
        assert_eq!(str_format("{1}{0}", &pos, &kw).unwrap(), "a1");
        assert!(str_format("{5}", &pos, &kw).is_err());
    }
}
