use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::StoreError;

/// Column data type as declared in a schema manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Bool,
    Int,
    Float,
    Text,
    Timestamp,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::Bool => "bool",
            DType::Int => "int",
            DType::Float => "float",
            DType::Text => "text",
            DType::Timestamp => "timestamp",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tagged scalar cell.
///
/// Timestamps are UTC seconds since the epoch. Equality and hashing treat
/// floats by bit pattern so that values can key hash indexes.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    Timestamp(i64),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Tag of a non-null value.
    pub fn dtype(&self) -> Option<DType> {
        match self {
            Value::Null => None,
            Value::Bool(_) => Some(DType::Bool),
            Value::Int(_) => Some(DType::Int),
            Value::Float(_) => Some(DType::Float),
            Value::Text(_) => Some(DType::Text),
            Value::Timestamp(_) => Some(DType::Timestamp),
        }
    }

    pub fn as_timestamp(&self) -> Option<i64> {
        match self {
            Value::Timestamp(t) => Some(*t),
            _ => None,
        }
    }

    /// Numeric view used for targets.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(x) => Some(*x),
            Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            _ => None,
        }
    }

    /// Ordering between two values of the same tag. Comparing across tags,
    /// or against null, is an error.
    pub fn try_cmp(&self, other: &Value) -> Result<Ordering, StoreError> {
        let ord = match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Float(a), Value::Float(b)) => a.total_cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Timestamp(a), Value::Timestamp(b)) => a.cmp(b),
            _ => {
                return Err(StoreError::TagMismatch {
                    left: self.tag_name(),
                    right: other.tag_name(),
                })
            }
        };
        Ok(ord)
    }

    fn tag_name(&self) -> &'static str {
        self.dtype().map(DType::as_str).unwrap_or("null")
    }

    /// Parses one CSV cell under `dtype`. The empty string is null.
    pub fn parse_cell(cell: &str, dtype: DType) -> Result<Value, String> {
        if cell.is_empty() {
            return Ok(Value::Null);
        }
        match dtype {
            DType::Bool => match cell.trim().to_ascii_lowercase().as_str() {
                "true" | "1" => Ok(Value::Bool(true)),
                "false" | "0" => Ok(Value::Bool(false)),
                other => Err(format!("`{other}` is not a boolean")),
            },
            DType::Int => cell
                .trim()
                .parse::<i64>()
                .map(Value::Int)
                .map_err(|e| format!("`{cell}` is not an integer: {e}")),
            DType::Float => {
                let x = cell
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format!("`{cell}` is not a real number: {e}"))?;
                if !x.is_finite() {
                    return Err(format!("`{cell}` is not finite"));
                }
                Ok(Value::Float(x))
            }
            DType::Text => Ok(Value::Text(cell.to_string())),
            DType::Timestamp => parse_timestamp(cell).map(Value::Timestamp),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Timestamp(a), Value::Timestamp(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Value::Null => {}
            Value::Bool(b) => b.hash(state),
            Value::Int(i) | Value::Timestamp(i) => i.hash(state),
            Value::Float(x) => x.to_bits().hash(state),
            Value::Text(s) => s.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
            Value::Timestamp(t) => f.write_str(&format_timestamp(*t)),
        }
    }
}

/// Parses RFC-3339, `YYYY-MM-DD[ HH:MM:SS]` (taken as UTC) or integer epoch
/// seconds.
pub fn parse_timestamp(cell: &str) -> Result<i64, String> {
    let s = cell.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return Ok(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp());
    }
    Err(format!("`{cell}` is not a timestamp"))
}

/// RFC-3339 rendering with second precision and a `Z` suffix.
pub fn format_timestamp(secs: i64) -> String {
    match DateTime::<Utc>::from_timestamp(secs, 0) {
        Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Secs, true),
        None => secs.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Days-from-civil, written out independently of chrono.
    fn civil_to_epoch(y: i64, m: i64, d: i64) -> i64 {
        let y = if m <= 2 { y - 1 } else { y };
        let era = y.div_euclid(400);
        let yoe = y - era * 400;
        let mp = (m + 9) % 12;
        let doy = (153 * mp + 2) / 5 + d - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        (era * 146_097 + doe - 719_468) * 86_400
    }

    #[test]
    fn rfc3339_timestamp_matches_calendar_oracle() {
        assert_eq!(civil_to_epoch(2015, 5, 8), 1_431_043_200);
        assert_eq!(parse_timestamp("2015-05-08T00:00:00Z").unwrap(), 1_431_043_200);
        assert_eq!(parse_timestamp("2015-05-08").unwrap(), 1_431_043_200);
        assert_eq!(parse_timestamp("1431043200").unwrap(), 1_431_043_200);
        for (y, m, d) in [(1950, 5, 13), (2000, 2, 29), (2021, 1, 1), (1969, 12, 31)] {
            let text = format!("{y:04}-{m:02}-{d:02}T00:00:00Z");
            assert_eq!(parse_timestamp(&text).unwrap(), civil_to_epoch(y, m, d), "{text}");
        }
    }

    #[test]
    fn timestamp_format_round_trips() {
        assert_eq!(format_timestamp(1_431_043_200), "2015-05-08T00:00:00Z");
        assert_eq!(parse_timestamp(&format_timestamp(-86_401)).unwrap(), -86_401);
    }

    #[test]
    fn empty_cell_is_null_for_every_dtype() {
        for dt in [DType::Bool, DType::Int, DType::Float, DType::Text, DType::Timestamp] {
            assert_eq!(Value::parse_cell("", dt).unwrap(), Value::Null);
        }
    }

    #[test]
    fn cross_tag_comparison_is_an_error() {
        assert!(Value::Int(1).try_cmp(&Value::Float(1.0)).is_err());
        assert!(Value::Null.try_cmp(&Value::Null).is_err());
        assert_eq!(Value::Int(1).try_cmp(&Value::Int(2)).unwrap(), Ordering::Less);
    }

    #[test]
    fn bad_cells_are_rejected() {
        assert!(Value::parse_cell("x", DType::Int).is_err());
        assert!(Value::parse_cell("NaN", DType::Float).is_err());
        assert!(Value::parse_cell("yes", DType::Bool).is_err());
        assert!(Value::parse_cell("05/08/2015", DType::Timestamp).is_err());
    }
}
