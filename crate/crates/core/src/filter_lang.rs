//! Textual filter language.
//!
//! ```text
//! or    := and ("or" and)*
//! and   := unary ("and" unary)*
//! unary := "not" unary | "(" or ")" | cmp
//! cmp   := path ("=" | "!=" | "<" | "<=" | ">" | ">=" | "~") scalar
//!        | path "in" "[" (scalar ("," scalar)*)? "]"
//!        | path "exists" (true | false)?
//! path  := ident ("." ident)*        ident := [A-Za-z0-9_-]+
//! ```
//!
//! Keywords are case-insensitive. Pure conjunctions compile to a server-side
//! [`JsonFilter`]; anything with `or`/`not` is evaluated client-side.

use std::cmp::Ordering;
use std::fmt;

use serde_json::{Number, Value};
use thiserror::Error;

use crate::store::{Condition, JsonFilter, Operator};
use crate::value::{cmp_num, Num};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
    In,
    Exists,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Contains => "~",
            CmpOp::In => "in",
            CmpOp::Exists => "exists",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Literal>),
}

impl Literal {
    pub fn to_json(&self) -> Value {
        match self {
            Literal::Null => Value::Null,
            Literal::Bool(b) => Value::Bool(*b),
            Literal::Int(i) => Value::from(*i),
            Literal::Float(f) => Number::from_f64(*f).map_or(Value::Null, Value::Number),
            Literal::Str(s) => Value::String(s.clone()),
            Literal::List(items) => Value::Array(items.iter().map(Literal::to_json).collect()),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Null => f.write_str("null"),
            Literal::Bool(b) => write!(f, "{b}"),
            Literal::Int(i) => write!(f, "{i}"),
            // Debug keeps a '.' or exponent, so the literal re-parses as a float
            Literal::Float(x) => write!(f, "{x:?}"),
            Literal::Str(s) => f.write_str(&serde_json::to_string(s).expect("string serializes")),
            Literal::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub path: String,
    pub op: CmpOp,
    pub value: Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterExpr {
    Or(Vec<FilterExpr>),
    And(Vec<FilterExpr>),
    Not(Box<FilterExpr>),
    Cmp(Comparison),
}

impl FilterExpr {
    pub fn cmp(path: impl Into<String>, op: CmpOp, value: Literal) -> Self {
        FilterExpr::Cmp(Comparison { path: path.into(), op, value })
    }

    pub fn negate(inner: FilterExpr) -> Self {
        FilterExpr::Not(Box::new(inner))
    }

    fn is_junction(&self) -> bool {
        matches!(self, FilterExpr::And(_) | FilterExpr::Or(_))
    }
}

fn write_joined(
    f: &mut fmt::Formatter<'_>,
    items: &[FilterExpr],
    sep: &str,
    needs_parens: impl Fn(&FilterExpr) -> bool,
) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(sep)?;
        }
        if needs_parens(item) {
            write!(f, "({item})")?;
        } else {
            write!(f, "{item}")?;
        }
    }
    Ok(())
}

/// Prints the canonical form; parsing it yields the same tree.
impl fmt::Display for FilterExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterExpr::Or(items) => {
                write_joined(f, items, " or ", |e| matches!(e, FilterExpr::Or(_)))
            }
            FilterExpr::And(items) => write_joined(f, items, " and ", FilterExpr::is_junction),
            FilterExpr::Not(inner) if inner.is_junction() => write!(f, "not ({inner})"),
            FilterExpr::Not(inner) => write!(f, "not {inner}"),
            FilterExpr::Cmp(c) => match (c.op, &c.value) {
                (CmpOp::Exists, Literal::Bool(true)) => write!(f, "{} exists", c.path),
                _ => write!(f, "{} {} {}", c.path, c.op.symbol(), c.value),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: expected {}, found {found}", expected.join(" | "))]
pub struct SyntaxError {
    /// 1-based byte offset of the offending token.
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'-'
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.bytes()[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes().get(self.pos).copied()
    }

    fn error(&self, expected: &[&'static str]) -> SyntaxError {
        let found = match self.src[self.pos..].chars().next() {
            None => "end of input".to_string(),
            Some(_) => {
                let rest = &self.src[self.pos..];
                let end = rest
                    .char_indices()
                    .find(|(_, c)| c.is_whitespace())
                    .map_or(rest.len(), |(i, _)| i)
                    .max(rest.chars().next().map_or(0, char::len_utf8));
                format!("{:?}", &rest[..end])
            }
        };
        SyntaxError { offset: self.pos + 1, expected: expected.to_vec(), found }
    }

    /// The identifier run at the cursor, without consuming it.
    fn peek_word(&self) -> &'a str {
        let start = self.pos;
        let mut end = start;
        while end < self.src.len() && is_ident_byte(self.bytes()[end]) {
            end += 1;
        }
        &self.src[start..end]
    }

    /// Consumes `kw` if it stands alone at the cursor (not the head of a dotted path).
    fn eat_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let word = self.peek_word();
        if !word.eq_ignore_ascii_case(kw) {
            return false;
        }
        let next = self.bytes().get(self.pos + word.len()).copied();
        if next == Some(b'.') {
            return false;
        }
        self.pos += word.len();
        true
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn parse_or(&mut self, depth: usize) -> Result<FilterExpr, SyntaxError> {
        let mut items = vec![self.parse_and(depth)?];
        while self.eat_keyword("or") {
            items.push(self.parse_and(depth)?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { FilterExpr::Or(items) })
    }

    fn parse_and(&mut self, depth: usize) -> Result<FilterExpr, SyntaxError> {
        let mut items = vec![self.parse_unary(depth)?];
        while self.eat_keyword("and") {
            items.push(self.parse_unary(depth)?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { FilterExpr::And(items) })
    }

    fn parse_unary(&mut self, depth: usize) -> Result<FilterExpr, SyntaxError> {
        const MAX_NESTING: usize = 128;
        if depth > MAX_NESTING {
            return Err(self.error(&["shallower nesting"]));
        }
        if self.eat_keyword("not") {
            return Ok(FilterExpr::negate(self.parse_unary(depth + 1)?));
        }
        if self.eat("(") {
            let inner = self.parse_or(depth + 1)?;
            if !self.eat(")") {
                return Err(self.error(&["and", "or", ")"]));
            }
            return Ok(inner);
        }
        self.parse_cmp().map(FilterExpr::Cmp)
    }

    fn parse_path(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws();
        let start = self.pos;
        loop {
            let word = self.peek_word();
            if word.is_empty() {
                let expected: &[&str] =
                    if self.pos == start { &["not", "(", "path"] } else { &["identifier"] };
                return Err(self.error(expected));
            }
            self.pos += word.len();
            if self.peek() == Some(b'.') {
                self.pos += 1;
            } else {
                return Ok(self.src[start..self.pos].to_string());
            }
        }
    }

    fn parse_cmp(&mut self) -> Result<Comparison, SyntaxError> {
        let path = self.parse_path()?;
        self.skip_ws();
        let op = if self.eat("!=") {
            CmpOp::Ne
        } else if self.eat("<=") {
            CmpOp::Le
        } else if self.eat(">=") {
            CmpOp::Ge
        } else if self.eat("=") {
            CmpOp::Eq
        } else if self.eat("<") {
            CmpOp::Lt
        } else if self.eat(">") {
            CmpOp::Gt
        } else if self.eat("~") {
            CmpOp::Contains
        } else if self.eat_keyword("in") {
            CmpOp::In
        } else if self.eat_keyword("exists") {
            let value = if self.eat_keyword("true") {
                true
            } else {
                !self.eat_keyword("false")
            };
            return Ok(Comparison { path, op: CmpOp::Exists, value: Literal::Bool(value) });
        } else {
            return Err(self.error(&["=", "!=", "<", "<=", ">", ">=", "~", "in", "exists"]));
        };
        let value = if op == CmpOp::In { self.parse_list()? } else { self.parse_scalar()? };
        Ok(Comparison { path, op, value })
    }

    fn parse_list(&mut self) -> Result<Literal, SyntaxError> {
        if !self.eat("[") {
            return Err(self.error(&["["]));
        }
        let mut items = Vec::new();
        if self.eat("]") {
            return Ok(Literal::List(items));
        }
        loop {
            items.push(self.parse_scalar()?);
            if self.eat("]") {
                return Ok(Literal::List(items));
            }
            if !self.eat(",") {
                return Err(self.error(&[",", "]"]));
            }
        }
    }

    fn parse_scalar(&mut self) -> Result<Literal, SyntaxError> {
        const EXPECTED: &[&str] = &["number", "string", "true", "false", "null"];
        self.skip_ws();
        match self.peek() {
            Some(b'"') => self.parse_string(),
            Some(b'-' | b'0'..=b'9') => self.parse_number(),
            _ => {
                for (kw, lit) in
                    [("true", Literal::Bool(true)), ("false", Literal::Bool(false)), ("null", Literal::Null)]
                {
                    if self.eat_keyword(kw) {
                        return Ok(lit);
                    }
                }
                Err(self.error(EXPECTED))
            }
        }
    }

    fn parse_string(&mut self) -> Result<Literal, SyntaxError> {
        let start = self.pos;
        let mut i = start + 1;
        let bytes = self.bytes();
        loop {
            match bytes.get(i) {
                None => return Err(self.error(&["closing quote"])),
                Some(b'\\') => i += 2,
                Some(b'"') => break,
                Some(_) => i += 1,
            }
        }
        let raw = &self.src[start..=i];
        match serde_json::from_str::<String>(raw) {
            Ok(s) => {
                self.pos = i + 1;
                Ok(Literal::Str(s))
            }
            Err(_) => Err(self.error(&["valid string literal"])),
        }
    }

    fn parse_number(&mut self) -> Result<Literal, SyntaxError> {
        let start = self.pos;
        let bytes = self.bytes();
        let mut i = start;
        let digits = |i: &mut usize| {
            let from = *i;
            while bytes.get(*i).is_some_and(u8::is_ascii_digit) {
                *i += 1;
            }
            *i > from
        };
        if bytes.get(i) == Some(&b'-') {
            i += 1;
        }
        let mut float = false;
        let mut ok = digits(&mut i);
        if ok && bytes.get(i) == Some(&b'.') {
            i += 1;
            float = true;
            ok = digits(&mut i);
        }
        if ok && matches!(bytes.get(i), Some(b'e' | b'E')) {
            i += 1;
            float = true;
            if matches!(bytes.get(i), Some(b'+' | b'-')) {
                i += 1;
            }
            ok = digits(&mut i);
        }
        if !ok || bytes.get(i).is_some_and(|b| is_ident_byte(*b) || *b == b'.') {
            return Err(self.error(&["number"]));
        }
        let text = &self.src[start..i];
        let literal = if float {
            match text.parse::<f64>() {
                Ok(x) if x.is_finite() => Literal::Float(x),
                _ => return Err(self.error(&["finite number"])),
            }
        } else {
            match text.parse::<i64>() {
                Ok(n) => Literal::Int(n),
                Err(_) => return Err(self.error(&["64-bit integer"])),
            }
        };
        self.pos = i;
        Ok(literal)
    }
}

/// Parses filter text into an expression tree.
pub fn parse_filter(text: &str) -> Result<FilterExpr, SyntaxError> {
    let mut parser = Parser { src: text, pos: 0 };
    let expr = parser.parse_or(0)?;
    parser.skip_ws();
    if parser.pos < text.len() {
        return Err(parser.error(&["and", "or", "end of input"]));
    }
    Ok(expr)
}

/// Result of compiling an expression for the server.
#[derive(Debug, Clone, PartialEq)]
pub enum Compiled {
    /// Evaluated by the document store.
    Server(JsonFilter),
    /// Needs a full fetch and client-side [`evaluate`].
    Residual(FilterExpr),
}

fn collect_conjuncts<'e>(expr: &'e FilterExpr, out: &mut Vec<&'e Comparison>) -> bool {
    match expr {
        FilterExpr::Cmp(c) => {
            out.push(c);
            true
        }
        FilterExpr::And(items) => items.iter().all(|item| collect_conjuncts(item, out)),
        FilterExpr::Or(_) | FilterExpr::Not(_) => false,
    }
}

fn to_operator(c: &Comparison) -> Operator {
    let value = c.value.to_json();
    match c.op {
        CmpOp::Eq => Operator::Eq(value),
        CmpOp::Ne => Operator::Ne(value),
        CmpOp::Lt => Operator::Lt(value),
        CmpOp::Le => Operator::Lte(value),
        CmpOp::Gt => Operator::Gt(value),
        CmpOp::Ge => Operator::Gte(value),
        CmpOp::Contains => Operator::Contains(value),
        CmpOp::In => match value {
            Value::Array(items) => Operator::In(items),
            other => Operator::In(vec![other]),
        },
        CmpOp::Exists => Operator::Exists(matches!(c.value, Literal::Bool(true))),
    }
}

/// Compiles pure conjunctions of comparisons to a [`JsonFilter`].
///
/// Two comparisons with the same operator on the same path cannot share one
/// operator object, so such expressions stay residual as well.
pub fn compile_filter(expr: &FilterExpr) -> Compiled {
    let mut comparisons = Vec::new();
    if !collect_conjuncts(expr, &mut comparisons) {
        return Compiled::Residual(expr.clone());
    }
    let mut by_path: Vec<(&str, Vec<Operator>)> = Vec::new();
    for c in comparisons {
        let op = to_operator(c);
        match by_path.iter_mut().find(|(p, _)| *p == c.path) {
            Some((_, ops)) => {
                if ops.iter().any(|o| o.key() == op.key()) {
                    return Compiled::Residual(expr.clone());
                }
                ops.push(op);
            }
            None => by_path.push((&c.path, vec![op])),
        }
    }
    let mut filter = JsonFilter::all();
    for (path, mut ops) in by_path {
        let condition = match ops.as_slice() {
            [Operator::Eq(v)] if !v.is_array() => Condition::Equals(ops.pop().map(|o| match o {
                Operator::Eq(v) => v,
                _ => unreachable!(),
            }).unwrap()),
            _ => {
                ops.sort_by_key(Operator::key);
                Condition::Operators(ops)
            }
        };
        filter = filter.with(path, condition);
    }
    Compiled::Server(filter)
}

fn lookup<'v>(doc: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(doc, |node, segment| match node {
        Value::Object(map) => map.get(segment),
        Value::Array(items) if segment == "0" || !segment.starts_with('0') => {
            segment.parse::<usize>().ok().and_then(|i| items.get(i))
        }
        _ => None,
    })
}

fn number_of(v: &Value) -> Option<Num> {
    match v {
        Value::Number(n) => Some(Num::of(n)),
        _ => None,
    }
}

fn literal_num(lit: &Literal) -> Option<Num> {
    match lit {
        Literal::Int(i) => Some(Num::Int(*i)),
        Literal::Float(f) => Some(Num::Float(*f)),
        _ => None,
    }
}

fn equals_literal(v: &Value, lit: &Literal) -> bool {
    match (v, lit) {
        (Value::Null, Literal::Null) => true,
        (Value::Bool(a), Literal::Bool(b)) => a == b,
        (Value::String(a), Literal::Str(b)) => a == b,
        (Value::Array(items), Literal::List(lits)) => {
            items.len() == lits.len() && items.iter().zip(lits).all(|(i, l)| equals_literal(i, l))
        }
        _ => match (number_of(v), literal_num(lit)) {
            (Some(a), Some(b)) => cmp_num(a, b) == Ordering::Equal,
            _ => false,
        },
    }
}

fn order_against(v: &Value, lit: &Literal) -> Option<Ordering> {
    match (v, lit) {
        (Value::String(a), Literal::Str(b)) => Some(a.as_str().cmp(b.as_str())),
        _ => Some(cmp_num(number_of(v)?, literal_num(lit)?)),
    }
}

fn evaluate_cmp(c: &Comparison, doc: &Value) -> bool {
    let found = lookup(doc, &c.path);
    let ordered = |want: &[Ordering]| {
        found.and_then(|v| order_against(v, &c.value)).is_some_and(|o| want.contains(&o))
    };
    match c.op {
        CmpOp::Eq => found.is_some_and(|v| equals_literal(v, &c.value)),
        CmpOp::Ne => !found.is_some_and(|v| equals_literal(v, &c.value)),
        CmpOp::Lt => ordered(&[Ordering::Less]),
        CmpOp::Le => ordered(&[Ordering::Less, Ordering::Equal]),
        CmpOp::Gt => ordered(&[Ordering::Greater]),
        CmpOp::Ge => ordered(&[Ordering::Greater, Ordering::Equal]),
        CmpOp::Contains => match (found, &c.value) {
            (Some(Value::String(hay)), Literal::Str(needle)) => hay.contains(needle.as_str()),
            _ => false,
        },
        CmpOp::In => match (&c.value, found) {
            (Literal::List(options), Some(v)) => options.iter().any(|o| equals_literal(v, o)),
            (single, Some(v)) => equals_literal(v, single),
            (_, None) => false,
        },
        CmpOp::Exists => found.is_some() == matches!(c.value, Literal::Bool(true)),
    }
}

/// Client-side evaluation of any expression.
pub fn evaluate(expr: &FilterExpr, doc: &Value) -> bool {
    match expr {
        FilterExpr::Or(items) => items.iter().any(|e| evaluate(e, doc)),
        FilterExpr::And(items) => items.iter().all(|e| evaluate(e, doc)),
        FilterExpr::Not(inner) => !evaluate(inner, doc),
        FilterExpr::Cmp(c) => evaluate_cmp(c, doc),
    }
}
