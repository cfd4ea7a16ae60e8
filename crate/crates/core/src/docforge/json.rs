//! Canonical JSON rendering of nested entities.
//!
//! Keys keep schema order, child arrays follow the fields, and the target
//! (when given) is always the final key. Separators are `": "` and `", "`
//! with no other whitespace, so output is byte-reproducible.

use std::fmt::Write;

use crate::relstore::{format_timestamp, Value};

use super::NestedEntity;

fn write_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings serialize"));
}

/// Renders one scalar. Reals use the shortest representation that parses
/// back to the same `f64`; non-finite reals become `null`.
pub fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Float(x) if x.is_finite() => {
            out.push_str(&serde_json::to_string(x).expect("finite floats serialize"));
        }
        Value::Float(_) => out.push_str("null"),
        Value::Text(s) => write_str(out, s),
        Value::Timestamp(t) => write_str(out, &format_timestamp(*t)),
    }
}

pub fn value_to_json(v: &Value) -> String {
    let mut s = String::new();
    write_value(&mut s, v);
    s
}

fn write_entity(out: &mut String, e: &NestedEntity, target: Option<(&str, &Value)>) {
    out.push('{');
    let mut first = true;
    let mut sep = |out: &mut String| {
        if !first {
            out.push_str(", ");
        }
        first = false;
    };
    for (k, v) in &e.fields {
        sep(out);
        write_str(out, k);
        out.push_str(": ");
        write_value(out, v);
    }
    for (label, kids) in &e.children {
        sep(out);
        write_str(out, label);
        out.push_str(": [");
        for (i, kid) in kids.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write_entity(out, kid, None);
        }
        out.push(']');
    }
    if let Some((k, v)) = target {
        sep(out);
        write_str(out, k);
        out.push_str(": ");
        write_value(out, v);
    }
    out.push('}');
}

/// Serializes `entity`, appending `target` as the last key when present.
pub fn serialize_entity(entity: &NestedEntity, target: Option<(&str, &Value)>) -> String {
    let mut out = String::new();
    write_entity(&mut out, entity, target);
    out
}
