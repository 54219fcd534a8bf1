use std::collections::BTreeSet;

use altar_core::model::{flatten_paths, validate_config, ConfigDocument, RawNode};
use proptest::prelude::*;
use serde_json::{Map, Number, Value};

fn key() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,6}"
}

fn leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        (-1e12f64..1e12).prop_map(|f| Value::Number(Number::from_f64(f).unwrap())),
        "[ -~]{0,8}".prop_map(Value::String),
    ]
}

fn tree() -> impl Strategy<Value = Value> {
    leaf().prop_recursive(5, 48, 5, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map(key(), inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect::<Map<_, _>>())),
        ]
    })
}

fn config() -> impl Strategy<Value = Value> {
    prop::collection::btree_map(key(), tree(), 0..5)
        .prop_map(|m| Value::Object(m.into_iter().collect::<Map<_, _>>()))
}

fn segments(path: &str) -> Vec<Segment> {
    path.split('.')
        .map(|s| match s.parse::<u64>() {
            Ok(n) => Segment::Index(n),
            Err(_) => Segment::Key(s.to_string()),
        })
        .collect()
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Segment {
    Index(u64),
    Key(String),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn config_round_trips_through_canonical_json(value in config()) {
        let doc = validate_config(&RawNode::from(&value)).unwrap();
        let text = doc.canonical_json();
        let back: ConfigDocument = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(back.canonical_json(), text);
        prop_assert_eq!(doc.to_value(), value);
    }

    #[test]
    fn flattened_paths_are_unique_and_ordered(value in config()) {
        let doc = validate_config(&RawNode::from(&value)).unwrap();
        let flat = flatten_paths(&doc);
        let unique: BTreeSet<&str> = flat.iter().map(|(p, _)| p.as_str()).collect();
        prop_assert_eq!(unique.len(), flat.len());
        let keys: Vec<Vec<Segment>> = flat.iter().map(|(p, _)| segments(p)).collect();
        for pair in keys.windows(2) {
            prop_assert!(pair[0] < pair[1], "{:?} !< {:?}", pair[0], pair[1]);
        }
        // every flattened path resolves back to its leaf
        for (path, leaf) in &flat {
            prop_assert_eq!(altar_core::value::resolve_path(&value, path), Some(leaf));
        }
    }
}
