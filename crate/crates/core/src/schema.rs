//! Validation against a subset of JSON Schema: `type`, `properties`,
//! `required`, `items`, `enum`, `minimum` and `maximum`. Other keywords are
//! ignored.

use std::fmt;

use serde_json::{Map, Value};

use crate::error::{LcmError, Result};

const TYPES: &[&str] = &["null", "boolean", "integer", "number", "string", "array", "object"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    /// JSON-pointer-like location, `$` for the root.
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at {}: {}", self.path, self.message)
    }
}

impl std::error::Error for SchemaError {}

/// A schema that has been checked for well-formedness.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema(Value);

impl Schema {
    pub fn compile(schema: Value) -> Result<Self> {
        check_schema(&schema, "$").map_err(|e| LcmError::Invalid(format!("invalid schema {e}")))?;
        Ok(Self(schema))
    }

    pub fn as_value(&self) -> &Value {
        &self.0
    }

    /// The first violation found, if any.
    pub fn validate(&self, value: &Value) -> std::result::Result<(), SchemaError> {
        validate_at(&self.0, value, "$")
    }
}

fn err(path: &str, message: impl Into<String>) -> SchemaError {
    SchemaError {
        path: path.to_string(),
        message: message.into(),
    }
}

fn check_schema(schema: &Value, path: &str) -> std::result::Result<(), SchemaError> {
    let obj = match schema {
        Value::Bool(_) => return Ok(()),
        Value::Object(o) => o,
        _ => return Err(err(path, "a schema must be an object or a boolean")),
    };
    if let Some(t) = obj.get("type") {
        let names: Vec<&Value> = match t {
            Value::Array(a) => a.iter().collect(),
            other => vec![other],
        };
        for n in names {
            match n.as_str() {
                Some(s) if TYPES.contains(&s) => {}
                _ => return Err(err(path, format!("unknown type {n}"))),
            }
        }
    }
    if let Some(props) = obj.get("properties") {
        let props = props
            .as_object()
            .ok_or_else(|| err(path, "properties must be an object"))?;
        for (k, sub) in props {
            check_schema(sub, &format!("{path}.properties.{k}"))?;
        }
    }
    if let Some(req) = obj.get("required") {
        let ok = req
            .as_array()
            .is_some_and(|a| a.iter().all(Value::is_string));
        if !ok {
            return Err(err(path, "required must be an array of strings"));
        }
    }
    if let Some(items) = obj.get("items") {
        check_schema(items, &format!("{path}.items"))?;
    }
    if let Some(e) = obj.get("enum") {
        if !e.is_array() {
            return Err(err(path, "enum must be an array"));
        }
    }
    for key in ["minimum", "maximum"] {
        if let Some(v) = obj.get(key) {
            if !v.is_number() {
                return Err(err(path, format!("{key} must be a number")));
            }
        }
    }
    Ok(())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(n) if n.as_f64().is_some_and(|f| f.fract() == 0.0) => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(expected: &str, value: &Value) -> bool {
    let actual = type_name(value);
    actual == expected || (expected == "number" && actual == "integer")
}

fn validate_at(schema: &Value, value: &Value, path: &str) -> std::result::Result<(), SchemaError> {
    let obj: &Map<String, Value> = match schema {
        Value::Bool(true) => return Ok(()),
        Value::Bool(false) => return Err(err(path, "no value is allowed here")),
        Value::Object(o) => o,
        _ => return Ok(()),
    };

    if let Some(t) = obj.get("type") {
        let allowed: Vec<&str> = match t {
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            other => other.as_str().into_iter().collect(),
        };
        if !allowed.iter().any(|t| type_matches(t, value)) {
            return Err(err(
                path,
                format!("expected {}, got {}", allowed.join(" or "), type_name(value)),
            ));
        }
    }

    if let Some(Value::Array(options)) = obj.get("enum") {
        if !options.contains(value) {
            let listed: Vec<String> = options.iter().map(Value::to_string).collect();
            return Err(err(
                path,
                format!("{value} is not one of [{}]", listed.join(", ")),
            ));
        }
    }

    if let Some(n) = value.as_f64() {
        if let Some(min) = obj.get("minimum").and_then(Value::as_f64) {
            if n < min {
                return Err(err(path, format!("{value} is less than the minimum {min}")));
            }
        }
        if let Some(max) = obj.get("maximum").and_then(Value::as_f64) {
            if n > max {
                return Err(err(path, format!("{value} is greater than the maximum {max}")));
            }
        }
    }

    if let Value::Object(fields) = value {
        if let Some(Value::Array(required)) = obj.get("required") {
            for key in required.iter().filter_map(Value::as_str) {
                if !fields.contains_key(key) {
                    return Err(err(path, format!("missing required property \"{key}\"")));
                }
            }
        }
        if let Some(Value::Object(props)) = obj.get("properties") {
            for (key, sub) in props {
                if let Some(v) = fields.get(key) {
                    validate_at(sub, v, &format!("{path}.{key}"))?;
                }
            }
        }
    }

    if let (Value::Array(elements), Some(items)) = (value, obj.get("items")) {
        for (i, v) in elements.iter().enumerate() {
            validate_at(items, v, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> Schema {
        Schema::compile(json!({
            "type": "object",
            "required": ["label", "score"],
            "properties": {
                "label": {"type": "string", "enum": ["pos", "neg"]},
                "score": {"type": "integer", "minimum": 0, "maximum": 10},
                "tags": {"type": "array", "items": {"type": "string"}}
            }
        }))
        .unwrap()
    }

    #[test]
    fn accepts_valid() {
        let s = schema();
        assert!(s.validate(&json!({"label": "pos", "score": 3})).is_ok());
        assert!(s.validate(&json!({"label": "neg", "score": 10, "tags": ["a"]})).is_ok());
        assert!(s.validate(&json!({"label": "neg", "score": 2.0})).is_ok());
    }

    #[test]
    fn reports_first_violation() {
        let s = schema();
        let e = s.validate(&json!({"label": "pos"})).unwrap_err();
        assert_eq!(e.to_string(), "at $: missing required property \"score\"");
        let e = s.validate(&json!({"label": "pos", "score": "3"})).unwrap_err();
        assert_eq!(e.to_string(), "at $.score: expected integer, got string");
        let e = s.validate(&json!({"label": "meh", "score": 3})).unwrap_err();
        assert_eq!(e.path, "$.label");
        let e = s.validate(&json!({"label": "pos", "score": 11})).unwrap_err();
        assert!(e.message.contains("maximum"));
        let e = s.validate(&json!({"label": "pos", "score": 1, "tags": ["a", 2]})).unwrap_err();
        assert_eq!(e.path, "$.tags[1]");
        assert!(s.validate(&json!([1])).is_err());
    }

    #[test]
    fn number_accepts_integers() {
        let s = Schema::compile(json!({"type": "number"})).unwrap();
        assert!(s.validate(&json!(3)).is_ok());
        assert!(s.validate(&json!(3.5)).is_ok());
        let s = Schema::compile(json!({"type": ["string", "null"]})).unwrap();
        assert!(s.validate(&Value::Null).is_ok());
        assert!(s.validate(&json!(1)).is_err());
    }

    #[test]
    fn malformed_schemas_rejected() {
        assert!(Schema::compile(json!({"type": "float"})).is_err());
        assert!(Schema::compile(json!({"required": "a"})).is_err());
        assert!(Schema::compile(json!({"properties": {"a": 3}})).is_err());
        assert!(Schema::compile(json!("string")).is_err());
        assert!(Schema::compile(json!({})).is_ok());
        assert!(Schema::compile(json!(true)).is_ok());
    }
}
