//! JSON filter documents: `{"experiment.name": "get_movie", "config.gain": {"$gt": 5}}`.
//!
//! A filter is a conjunction of `path → condition` entries. A scalar condition
//! means equality; an object condition holds operators from a fixed set.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::value::{cmp_comparable, json_eq, resolve_path};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("filter must be a JSON object")]
    NotAnObject,
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("unknown operator {op:?} at {path:?}")]
    UnknownOperator { path: String, op: String },
    #[error("invalid operand for {op} at {path:?}: {reason}")]
    InvalidOperand { path: String, op: &'static str, reason: &'static str },
    #[error("condition at {0:?} must be a scalar or an operator object")]
    InvalidCondition(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Eq(Value),
    Ne(Value),
    Gt(Value),
    Gte(Value),
    Lt(Value),
    Lte(Value),
    In(Vec<Value>),
    Contains(Value),
    Exists(bool),
}

impl Operator {
    pub fn key(&self) -> &'static str {
        match self {
            Operator::Eq(_) => "$eq",
            Operator::Ne(_) => "$ne",
            Operator::Gt(_) => "$gt",
            Operator::Gte(_) => "$gte",
            Operator::Lt(_) => "$lt",
            Operator::Lte(_) => "$lte",
            Operator::In(_) => "$in",
            Operator::Contains(_) => "$contains",
            Operator::Exists(_) => "$exists",
        }
    }

    fn operand(&self) -> Value {
        match self {
            Operator::Eq(v)
            | Operator::Ne(v)
            | Operator::Gt(v)
            | Operator::Gte(v)
            | Operator::Lt(v)
            | Operator::Lte(v)
            | Operator::Contains(v) => v.clone(),
            Operator::In(items) => Value::Array(items.clone()),
            Operator::Exists(b) => Value::Bool(*b),
        }
    }

    fn parse(path: &str, key: &str, operand: &Value) -> Result<Operator, FilterError> {
        let op = match key {
            "$eq" => Operator::Eq(operand.clone()),
            "$ne" => Operator::Ne(operand.clone()),
            "$gt" => Operator::Gt(operand.clone()),
            "$gte" => Operator::Gte(operand.clone()),
            "$lt" => Operator::Lt(operand.clone()),
            "$lte" => Operator::Lte(operand.clone()),
            "$contains" => Operator::Contains(operand.clone()),
            "$in" => match operand {
                Value::Array(items) => Operator::In(items.clone()),
                _ => {
                    return Err(FilterError::InvalidOperand {
                        path: path.into(),
                        op: "$in",
                        reason: "expected a list",
                    })
                }
            },
            "$exists" => match operand {
                Value::Bool(b) => Operator::Exists(*b),
                _ => {
                    return Err(FilterError::InvalidOperand {
                        path: path.into(),
                        op: "$exists",
                        reason: "expected a bool",
                    })
                }
            },
            other => {
                return Err(FilterError::UnknownOperator { path: path.into(), op: other.into() })
            }
        };
        Ok(op)
    }

    /// Evaluates the operator against the value found at the path (`None` when absent).
    pub fn test(&self, found: Option<&Value>) -> bool {
        use std::cmp::Ordering::*;
        let ordered = |operand: &Value, accept: &[std::cmp::Ordering]| {
            found.and_then(|v| cmp_comparable(v, operand)).is_some_and(|o| accept.contains(&o))
        };
        match self {
            Operator::Eq(v) => found.is_some_and(|f| json_eq(f, v)),
            Operator::Ne(v) => !found.is_some_and(|f| json_eq(f, v)),
            Operator::Gt(v) => ordered(v, &[Greater]),
            Operator::Gte(v) => ordered(v, &[Greater, Equal]),
            Operator::Lt(v) => ordered(v, &[Less]),
            Operator::Lte(v) => ordered(v, &[Less, Equal]),
            Operator::In(items) => found.is_some_and(|f| items.iter().any(|i| json_eq(f, i))),
            Operator::Contains(needle) => match (found, needle) {
                (Some(Value::String(hay)), Value::String(needle)) => hay.contains(needle.as_str()),
                _ => false,
            },
            Operator::Exists(expected) => found.is_some() == *expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// Scalar equality shorthand.
    Equals(Value),
    /// One or more operators, all of which must hold. Operator keys are unique.
    Operators(Vec<Operator>),
}

impl Condition {
    pub fn test(&self, found: Option<&Value>) -> bool {
        match self {
            Condition::Equals(v) => found.is_some_and(|f| json_eq(f, v)),
            Condition::Operators(ops) => ops.iter().all(|op| op.test(found)),
        }
    }

    fn to_value(&self) -> Value {
        match self {
            Condition::Equals(v) => v.clone(),
            Condition::Operators(ops) => {
                Value::Object(ops.iter().map(|op| (op.key().to_string(), op.operand())).collect())
            }
        }
    }
}

pub(crate) fn valid_path(path: &str) -> bool {
    !path.is_empty() && path.split('.').all(|seg| !seg.is_empty())
}

/// A parsed JSON filter: the conjunction of its entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JsonFilter {
    clauses: BTreeMap<String, Condition>,
}

impl JsonFilter {
    /// The empty filter, matching every document.
    pub fn all() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn clauses(&self) -> impl Iterator<Item = (&str, &Condition)> {
        self.clauses.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds or replaces the condition for `path`.
    pub fn with(mut self, path: impl Into<String>, condition: Condition) -> Self {
        self.clauses.insert(path.into(), condition);
        self
    }

    pub fn eq(self, path: impl Into<String>, value: impl Into<Value>) -> Self {
        self.with(path, Condition::Equals(value.into()))
    }

    pub fn from_value(value: &Value) -> Result<Self, FilterError> {
        let Value::Object(map) = value else {
            return Err(FilterError::NotAnObject);
        };
        let mut clauses = BTreeMap::new();
        for (path, condition) in map {
            if !valid_path(path) {
                return Err(FilterError::InvalidPath(path.clone()));
            }
            let condition = match condition {
                Value::Array(_) => return Err(FilterError::InvalidCondition(path.clone())),
                Value::Object(ops) => {
                    if ops.is_empty() || !ops.keys().all(|k| k.starts_with('$')) {
                        return Err(FilterError::InvalidCondition(path.clone()));
                    }
                    Condition::Operators(
                        ops.iter()
                            .map(|(k, v)| Operator::parse(path, k, v))
                            .collect::<Result<_, _>>()?,
                    )
                }
                scalar => Condition::Equals(scalar.clone()),
            };
            clauses.insert(path.clone(), condition);
        }
        Ok(Self { clauses })
    }

    pub fn to_value(&self) -> Value {
        Value::Object(
            self.clauses.iter().map(|(k, c)| (k.clone(), c.to_value())).collect::<Map<_, _>>(),
        )
    }

    pub fn matches(&self, doc: &Value) -> bool {
        self.clauses.iter().all(|(path, cond)| cond.test(resolve_path(doc, path)))
    }
}

/// Conjunction over all entries of `filter`. Total: never fails.
pub fn matches(filter: &JsonFilter, doc: &Value) -> bool {
    filter.matches(doc)
}

impl fmt::Display for JsonFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_value().to_string())
    }
}

impl Serialize for JsonFilter {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for JsonFilter {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        JsonFilter::from_value(&value).map_err(serde::de::Error::custom)
    }
}
