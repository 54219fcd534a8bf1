//! Independent reference implementations and random generators shared by the
//! integration and acceptance tests. Nothing here calls into the query engine.
#![allow(dead_code)]

use std::cmp::Ordering;

use altar_core::filter_lang::{CmpOp, FilterExpr, Literal};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

// ---------------------------------------------------------------- oracle

fn lookup<'v>(doc: &'v Value, path: &str) -> Option<&'v Value> {
    let mut node = doc;
    for segment in path.split('.') {
        node = match node {
            Value::Object(map) => map.get(segment)?,
            Value::Array(items) => {
                if segment.len() > 1 && segment.starts_with('0') {
                    return None;
                }
                let index: usize = segment.parse().ok()?;
                items.get(index)?
            }
            _ => return None,
        };
    }
    Some(node)
}

/// Generated numbers are exactly representable as f64, so f64 arithmetic is exact here.
fn as_f64(v: &Value) -> Option<f64> {
    v.as_f64()
}

fn deep_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(_), Value::Number(_)) => as_f64(a) == as_f64(b),
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(l, r)| deep_eq(l, r))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len()
                && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| deep_eq(v, w)))
        }
        _ => a == b,
    }
}

fn ordered(found: Option<&Value>, operand: &Value) -> Option<Ordering> {
    match (found?, operand) {
        (Value::Number(_), Value::Number(_)) => as_f64(found?)?.partial_cmp(&as_f64(operand)?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn naive_operator(op: &str, operand: &Value, found: Option<&Value>) -> bool {
    match op {
        "$eq" => found.is_some_and(|f| deep_eq(f, operand)),
        "$ne" => !found.is_some_and(|f| deep_eq(f, operand)),
        "$gt" => ordered(found, operand) == Some(Ordering::Greater),
        "$gte" => matches!(ordered(found, operand), Some(Ordering::Greater | Ordering::Equal)),
        "$lt" => ordered(found, operand) == Some(Ordering::Less),
        "$lte" => matches!(ordered(found, operand), Some(Ordering::Less | Ordering::Equal)),
        "$in" => found.is_some_and(|f| operand.as_array().unwrap().iter().any(|o| deep_eq(f, o))),
        "$contains" => match (found, operand) {
            (Some(Value::String(hay)), Value::String(needle)) => hay.contains(needle.as_str()),
            _ => false,
        },
        "$exists" => found.is_some() == operand.as_bool().unwrap(),
        other => panic!("oracle does not know {other}"),
    }
}

/// Brute-force evaluation of a JSON filter object.
pub fn naive_matches(filter: &Value, doc: &Value) -> bool {
    filter.as_object().unwrap().iter().all(|(path, condition)| {
        let found = lookup(doc, path);
        match condition {
            Value::Object(ops) => ops.iter().all(|(op, operand)| naive_operator(op, operand, found)),
            scalar => found.is_some_and(|f| deep_eq(f, scalar)),
        }
    })
}

/// Sort key with a derived order mirroring null < bool < number < string < list < map.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
enum Key {
    Missing,
    Null,
    Bool(bool),
    Num(f64),
    Str(String),
    List(Vec<Key>),
    Map(Vec<(String, Key)>),
}

fn key_of(v: Option<&Value>) -> Key {
    match v {
        None => Key::Missing,
        Some(Value::Null) => Key::Null,
        Some(Value::Bool(b)) => Key::Bool(*b),
        Some(Value::Number(n)) => Key::Num(n.as_f64().unwrap()),
        Some(Value::String(s)) => Key::Str(s.clone()),
        Some(Value::Array(items)) => Key::List(items.iter().map(|i| key_of(Some(i))).collect()),
        Some(Value::Object(map)) => {
            let mut entries: Vec<_> = map.iter().map(|(k, v)| (k.clone(), key_of(Some(v)))).collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Key::Map(entries)
        }
    }
}

/// Full-scan filter, sort (`(path, descending)`), skip and limit; returns `(total, ids)`.
pub fn naive_query(
    docs: &[(i64, Value)],
    filter: &Value,
    sort: &[(String, bool)],
    skip: usize,
    limit: usize,
) -> (usize, Vec<i64>) {
    let mut hits: Vec<(i64, Vec<Key>)> = docs
        .iter()
        .filter(|(_, d)| naive_matches(filter, d))
        .map(|(id, d)| (*id, sort.iter().map(|(p, _)| key_of(lookup(d, p))).collect()))
        .collect();
    // insertion sort: slow but obviously stable and obviously correct
    let before = |a: &(i64, Vec<Key>), b: &(i64, Vec<Key>)| -> bool {
        for (i, (_, desc)) in sort.iter().enumerate() {
            let ord = a.1[i].partial_cmp(&b.1[i]).unwrap();
            let ord = if *desc { ord.reverse() } else { ord };
            if ord != Ordering::Equal {
                return ord == Ordering::Less;
            }
        }
        a.0 < b.0
    };
    let mut sorted: Vec<(i64, Vec<Key>)> = Vec::with_capacity(hits.len());
    for item in hits.drain(..) {
        let at = sorted.iter().position(|s| before(&item, s)).unwrap_or(sorted.len());
        sorted.insert(at, item);
    }
    let total = sorted.len();
    (total, sorted.into_iter().skip(skip).take(limit).map(|(id, _)| id).collect())
}

// ---------------------------------------------------------------- generators

pub const NAMES: [&str; 4] = ["get_movie", "calibrate", "scan", "get_movie_2"];
pub const STATUSES: [&str; 4] = ["RUNNING", "COMPLETED", "FAILED", "INTERRUPTED"];
const WORDS: [&str; 6] = ["alpha", "beta", "Alpha", "gamma ray", "", "β-decay"];

pub fn random_number(rng: &mut StdRng) -> Value {
    if rng.gen_bool(0.5) {
        json!(rng.gen_range(-20i64..=20))
    } else {
        // quarters are exact in binary
        json!(rng.gen_range(-80i64..=80) as f64 / 4.0)
    }
}

pub fn random_scalar(rng: &mut StdRng) -> Value {
    match rng.gen_range(0..10) {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2..=5 => random_number(rng),
        _ => json!(WORDS.choose(rng).unwrap()),
    }
}

pub fn random_value(rng: &mut StdRng, depth: usize) -> Value {
    match rng.gen_range(0..10) {
        0 if depth > 0 => {
            Value::Array((0..rng.gen_range(0..3)).map(|_| random_value(rng, depth - 1)).collect())
        }
        1 if depth > 0 => {
            let mut map = Map::new();
            for _ in 0..rng.gen_range(0..3) {
                map.insert(["x", "y", "z"].choose(rng).unwrap().to_string(), random_value(rng, depth - 1));
            }
            Value::Object(map)
        }
        _ => random_scalar(rng),
    }
}

/// A run-shaped document whose fields vary wildly from one document to the next.
pub fn random_document(rng: &mut StdRng, i: usize) -> Value {
    let mut config = Map::new();
    for key in ["gain", "exposure", "mode", "channels"] {
        if rng.gen_bool(0.6) {
            config.insert(key.to_string(), random_value(rng, 2));
        }
    }
    if rng.gen_bool(0.5) {
        config.insert(
            "frame_acquisition".into(),
            json!({"gain": random_number(rng), "frame_rate": rng.gen_range(1..=20)}),
        );
    }
    let mut doc = Map::new();
    doc.insert("run_id".into(), json!(i as i64 + 1));
    if rng.gen_bool(0.9) {
        doc.insert("experiment".into(), json!({"name": NAMES.choose(rng).unwrap()}));
    }
    doc.insert("status".into(), json!(STATUSES.choose(rng).unwrap()));
    doc.insert("config".into(), Value::Object(config));
    if rng.gen_bool(0.7) {
        doc.insert("result".into(), random_scalar(rng));
    }
    if rng.gen_bool(0.5) {
        doc.insert("tags".into(), Value::Array((0..rng.gen_range(0..3)).map(|_| random_scalar(rng)).collect()));
    }
    if rng.gen_bool(0.3) {
        doc.insert("extra".into(), random_value(rng, 3));
    }
    Value::Object(doc)
}

pub const PATHS: [&str; 14] = [
    "experiment.name",
    "status",
    "result",
    "config.gain",
    "config.exposure",
    "config.mode",
    "config.mode.x",
    "config.channels.0",
    "config.frame_acquisition.gain",
    "config.frame_acquisition.frame_rate",
    "tags",
    "tags.1",
    "extra",
    "missing.path",
];

fn random_operand(rng: &mut StdRng, path: &str) -> Value {
    match path {
        "experiment.name" if rng.gen_bool(0.7) => json!(NAMES.choose(rng).unwrap()),
        "status" if rng.gen_bool(0.7) => json!(STATUSES.choose(rng).unwrap()),
        _ => random_scalar(rng),
    }
}

fn random_condition(rng: &mut StdRng, path: &str) -> Value {
    if rng.gen_bool(0.3) {
        let v = random_operand(rng, path);
        if !v.is_object() && !v.is_array() {
            return v;
        }
    }
    let mut ops = Map::new();
    for _ in 0..rng.gen_range(1..=3) {
        let (key, operand) = match rng.gen_range(0..9) {
            0 => ("$eq", if rng.gen_bool(0.2) { random_value(rng, 2) } else { random_operand(rng, path) }),
            1 => ("$ne", random_operand(rng, path)),
            2 => ("$gt", random_operand(rng, path)),
            3 => ("$gte", random_operand(rng, path)),
            4 => ("$lt", random_operand(rng, path)),
            5 => ("$lte", random_operand(rng, path)),
            6 => ("$in", Value::Array((0..rng.gen_range(0..4)).map(|_| random_operand(rng, path)).collect())),
            7 => ("$contains", json!(["a", "lph", "get", "", "ING", "_"].choose(rng).unwrap())),
            _ => ("$exists", Value::Bool(rng.gen())),
        };
        ops.insert(key.to_string(), operand);
    }
    Value::Object(ops)
}

pub fn random_filter(rng: &mut StdRng) -> Value {
    let mut filter = Map::new();
    for _ in 0..rng.gen_range(0..=3) {
        let path = PATHS.choose(rng).unwrap();
        filter.insert(path.to_string(), random_condition(rng, path));
    }
    Value::Object(filter)
}

pub fn random_sort(rng: &mut StdRng) -> Vec<(String, bool)> {
    (0..rng.gen_range(0..=2))
        .map(|_| (PATHS.choose(rng).unwrap().to_string(), rng.gen_bool(0.5)))
        .collect()
}

// ---------------------------------------------------------------- filter ASTs

const IDENTS: [&str; 8] = ["a", "b", "config", "gain", "x-1", "status", "_n", "0"];

fn random_path(rng: &mut StdRng) -> String {
    (0..rng.gen_range(1..=3)).map(|_| *IDENTS.choose(rng).unwrap()).collect::<Vec<_>>().join(".")
}

fn random_literal(rng: &mut StdRng) -> Literal {
    match rng.gen_range(0..6) {
        0 => Literal::Null,
        1 => Literal::Bool(rng.gen()),
        2 => Literal::Int(rng.gen_range(-1_000_000i64..1_000_000) * if rng.gen_bool(0.1) { 1_000_000_000_000 } else { 1 }),
        3 => {
            let x: f64 = rng.gen_range(-1e6..1e6);
            Literal::Float(if rng.gen_bool(0.2) { x * 1e-30 } else if rng.gen_bool(0.2) { x.trunc() } else { x })
        }
        _ => {
            let pool = ["", "get_movie", "quote\"d", "back\\slash", "tab\there", "üñí", "new\nline", "and", "or"];
            Literal::Str(pool.choose(rng).unwrap().to_string())
        }
    }
}

fn random_cmp(rng: &mut StdRng, allow_exists_false: bool) -> FilterExpr {
    let path = random_path(rng);
    let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Contains, CmpOp::In, CmpOp::Exists];
    let op = *ops.choose(rng).unwrap();
    let value = match op {
        CmpOp::In => Literal::List((0..rng.gen_range(0..4)).map(|_| random_literal(rng)).collect()),
        CmpOp::Exists => Literal::Bool(!allow_exists_false || rng.gen()),
        CmpOp::Contains if rng.gen_bool(0.7) => Literal::Str(["a", "get", ""].choose(rng).unwrap().to_string()),
        _ => random_literal(rng),
    };
    FilterExpr::cmp(path, op, value)
}

/// Any AST the grammar can express (n-ary nodes have at least two children).
pub fn random_expr(rng: &mut StdRng, depth: usize) -> FilterExpr {
    if depth == 0 || rng.gen_bool(0.3) {
        return random_cmp(rng, true);
    }
    match rng.gen_range(0..3) {
        0 => FilterExpr::Or((0..rng.gen_range(2..=3)).map(|_| random_expr(rng, depth - 1)).collect()),
        1 => FilterExpr::And((0..rng.gen_range(2..=3)).map(|_| random_expr(rng, depth - 1)).collect()),
        _ => FilterExpr::negate(random_expr(rng, depth - 1)),
    }
}

const DOC_PATHS: [&str; 6] = ["a", "b", "a.x", "b.0", "c", "s"];

fn random_doc_literal(rng: &mut StdRng) -> Literal {
    match rng.gen_range(0..6) {
        0 => Literal::Null,
        1 => Literal::Bool(rng.gen()),
        2 | 3 => Literal::Int(rng.gen_range(-3..=3)),
        4 => Literal::Float(rng.gen_range(-12i64..=12) as f64 / 4.0),
        _ => Literal::Str(["", "a", "ab", "get_movie", "B"].choose(rng).unwrap().to_string()),
    }
}

/// Conjunctions over a small path set with operands that collide with
/// [`random_small_document`] values often; each (path, operator) pair at most once.
pub fn random_compilable_expr(rng: &mut StdRng) -> FilterExpr {
    let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Contains, CmpOp::In, CmpOp::Exists];
    let mut used = Vec::new();
    let mut items = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let path = *DOC_PATHS.choose(rng).unwrap();
        let op = *ops.choose(rng).unwrap();
        if used.contains(&(path, op)) {
            continue;
        }
        used.push((path, op));
        let value = match op {
            CmpOp::In => Literal::List((0..rng.gen_range(0..4)).map(|_| random_doc_literal(rng)).collect()),
            CmpOp::Exists => Literal::Bool(rng.gen()),
            CmpOp::Contains if rng.gen_bool(0.7) => Literal::Str(["a", "b", ""].choose(rng).unwrap().to_string()),
            _ => random_doc_literal(rng),
        };
        items.push(FilterExpr::cmp(path, op, value));
    }
    if items.len() == 1 {
        items.pop().unwrap()
    } else {
        FilterExpr::And(items)
    }
}

pub fn random_small_document(rng: &mut StdRng) -> Value {
    let leaf = |rng: &mut StdRng| random_doc_literal(rng).to_json();
    let mut doc = Map::new();
    if rng.gen_bool(0.8) {
        let a = if rng.gen_bool(0.5) { json!({"x": leaf(rng)}) } else { leaf(rng) };
        doc.insert("a".into(), a);
    }
    if rng.gen_bool(0.8) {
        let b = if rng.gen_bool(0.5) { json!([leaf(rng), leaf(rng)]) } else { leaf(rng) };
        doc.insert("b".into(), b);
    }
    for key in ["c", "s"] {
        if rng.gen_bool(0.7) {
            doc.insert(key.into(), leaf(rng));
        }
    }
    Value::Object(doc)
}
