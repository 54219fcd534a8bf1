use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde_json::Value;

use super::filter::valid_path;
use crate::value::{resolve_path, total_cmp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortKey {
    pub path: String,
    pub direction: Direction,
}

impl SortKey {
    pub fn asc(path: impl Into<String>) -> Self {
        Self { path: path.into(), direction: Direction::Asc }
    }

    pub fn desc(path: impl Into<String>) -> Self {
        Self { path: path.into(), direction: Direction::Desc }
    }

    /// Parses `path,-other` (a leading `-` means descending).
    pub fn parse_list(s: &str) -> Result<Vec<SortKey>, String> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }

    pub fn format_list(keys: &[SortKey]) -> String {
        keys.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }

    /// Ascending: absent values first, then the cross-type total order.
    fn compare(&self, a: &Value, b: &Value) -> Ordering {
        let ord = match (resolve_path(a, &self.path), resolve_path(b, &self.path)) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(x), Some(y)) => total_cmp(x, y),
        };
        match self.direction {
            Direction::Asc => ord,
            Direction::Desc => ord.reverse(),
        }
    }
}

impl FromStr for SortKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (path, direction) = match s.strip_prefix('-') {
            Some(rest) => (rest, Direction::Desc),
            None => (s.strip_prefix('+').unwrap_or(s), Direction::Asc),
        };
        if !valid_path(path) {
            return Err(format!("invalid sort path {path:?}"));
        }
        Ok(SortKey { path: path.to_string(), direction })
    }
}

impl fmt::Display for SortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction {
            Direction::Asc => f.write_str(&self.path),
            Direction::Desc => write!(f, "-{}", self.path),
        }
    }
}

/// Orders `(id, doc)` pairs by the sort keys, breaking ties by ascending id.
pub fn compare_entries(keys: &[SortKey], a: (i64, &Value), b: (i64, &Value)) -> Ordering {
    keys.iter()
        .map(|k| k.compare(a.1, b.1))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}
