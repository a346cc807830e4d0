//! Minimal JSON Schema validation for the shipped report schemas
//! (type / properties / required / items / enum / minItems subset).

use serde_json::Value;

pub const BENCH_SCHEMA: &str = include_str!("../schemas/bench_report.schema.json");
pub const EVAL_SCHEMA: &str = include_str!("../schemas/eval_report.schema.json");
pub const TRAIN_LOG_SCHEMA: &str = include_str!("../schemas/train_log.schema.json");

/// Check `value` against `schema`; returns the first violation path.
pub fn validate_schema(schema: &Value, value: &Value) -> Result<(), String> {
    validate_at(schema, value, "$")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(expected: &str, v: &Value) -> bool {
    match expected {
        "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
        "number" => v.is_number(),
        other => type_name(v) == other,
    }
}

fn validate_at(schema: &Value, value: &Value, path: &str) -> Result<(), String> {
    let obj = match schema.as_object() {
        Some(o) => o,
        None => return Ok(()),
    };
    if let Some(t) = obj.get("type").and_then(|t| t.as_str()) {
        if !type_matches(t, value) {
            return Err(format!(
                "{path}: expected {t}, found {}",
                type_name(value)
            ));
        }
    }
    if let Some(options) = obj.get("enum").and_then(|e| e.as_array()) {
        if !options.contains(value) {
            return Err(format!("{path}: value not in enum"));
        }
    }
    if let Some(required) = obj.get("required").and_then(|r| r.as_array()) {
        let map = value
            .as_object()
            .ok_or_else(|| format!("{path}: required on non-object"))?;
        for key in required {
            let key = key.as_str().unwrap_or_default();
            if !map.contains_key(key) {
                return Err(format!("{path}: missing required key '{key}'"));
            }
        }
    }
    if let Some(props) = obj.get("properties").and_then(|p| p.as_object()) {
        if let Some(map) = value.as_object() {
            for (key, subschema) in props {
                if let Some(sub) = map.get(key) {
                    validate_at(subschema, sub, &format!("{path}.{key}"))?;
                }
            }
        }
    }
    if let Some(items) = obj.get("items") {
        if let Some(arr) = value.as_array() {
            if let Some(min) = obj.get("minItems").and_then(|m| m.as_u64()) {
                if (arr.len() as u64) < min {
                    return Err(format!(
                        "{path}: {} items, minimum {min}",
                        arr.len()
                    ));
                }
            }
            for (i, item) in arr.iter().enumerate() {
                validate_at(items, item, &format!("{path}[{i}]"))?;
            }
        }
    }
    Ok(())
}
