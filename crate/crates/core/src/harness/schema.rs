//! Validation of configs and emitted summaries against the schemas shipped
//! in `schemas/`.
//!
//! The checker implements the subset of JSON-Schema keywords those documents
//! use — `type`, `enum`, `required`, `properties`, `additionalProperties`
//! (boolean), `items` (single schema), `minimum`, `exclusiveMinimum`,
//! `minItems` — and reports violations with a JSON-pointer-style path.
//! Unknown keywords in a schema are ignored, as the standard requires.

use serde_json::Value;

use super::HarnessError;

/// Schema shipped for experiment configs (version 1).
pub const CONFIG_SCHEMA: &str = include_str!("../../../../schemas/config.schema.json");
/// Schema shipped for emitted run summaries (version 1).
pub const SUMMARY_SCHEMA: &str = include_str!("../../../../schemas/summary.schema.json");

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                "integer"
            } else {
                "number"
            }
        }
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn matches_type(instance: &Value, ty: &str) -> bool {
    match ty {
        // Whole-valued floats do not count as integers: configs must write
        // counts as JSON integers.
        "integer" => matches!(instance, Value::Number(n) if n.is_i64() || n.is_u64()),
        "number" => instance.is_number(),
        other => type_name(instance) == other,
    }
}

fn check(schema: &Value, instance: &Value, path: &str, errors: &mut Vec<String>) {
    let Some(obj) = schema.as_object() else {
        return; // `true`-style permissive schema
    };

    if let Some(ty) = obj.get("type") {
        let ok = match ty {
            Value::String(t) => matches_type(instance, t),
            Value::Array(ts) => ts
                .iter()
                .filter_map(|t| t.as_str())
                .any(|t| matches_type(instance, t)),
            _ => true,
        };
        if !ok {
            errors.push(format!(
                "{path}: expected type {}, got {}",
                ty,
                type_name(instance)
            ));
            return; // further keyword checks would only cascade
        }
    }

    if let Some(allowed) = obj.get("enum").and_then(Value::as_array) {
        if !allowed.contains(instance) {
            errors.push(format!("{path}: value {instance} is not one of {allowed:?}"));
        }
    }

    if let Some(num) = instance.as_f64() {
        if let Some(min) = obj.get("minimum").and_then(Value::as_f64) {
            if num < min {
                errors.push(format!("{path}: {num} is below the minimum {min}"));
            }
        }
        if let Some(min) = obj.get("exclusiveMinimum").and_then(Value::as_f64) {
            if num <= min {
                errors.push(format!("{path}: {num} must be strictly above {min}"));
            }
        }
    }

    if let Some(map) = instance.as_object() {
        if let Some(required) = obj.get("required").and_then(Value::as_array) {
            for key in required.iter().filter_map(Value::as_str) {
                if !map.contains_key(key) {
                    errors.push(format!("{path}: missing required field \"{key}\""));
                }
            }
        }
        let props = obj.get("properties").and_then(Value::as_object);
        if let Some(props) = props {
            for (key, sub) in props {
                if let Some(v) = map.get(key) {
                    check(sub, v, &format!("{path}/{key}"), errors);
                }
            }
        }
        if obj.get("additionalProperties") == Some(&Value::Bool(false)) {
            for key in map.keys() {
                if props.is_none_or(|p| !p.contains_key(key)) {
                    errors.push(format!("{path}: unknown field \"{key}\""));
                }
            }
        }
    }

    if let Some(arr) = instance.as_array() {
        if let Some(min_items) = obj.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < min_items {
                errors.push(format!(
                    "{path}: array has {} items, needs at least {min_items}",
                    arr.len()
                ));
            }
        }
        if let Some(items) = obj.get("items") {
            for (i, v) in arr.iter().enumerate() {
                check(items, v, &format!("{path}/{i}"), errors);
            }
        }
    }
}

/// Validate `instance` against `schema`; collects every violation rather than
/// stopping at the first.
pub fn validate(schema: &Value, instance: &Value) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    check(schema, instance, "$", &mut errors);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn parse_schema(text: &str, which: &str) -> Result<Value, HarnessError> {
    serde_json::from_str(text).map_err(|e| {
        HarnessError::Invariant(format!("shipped {which} schema is not valid JSON: {e}"))
    })
}

/// Check a raw config document against the shipped config schema.
pub fn validate_config_value(instance: &Value) -> Result<(), HarnessError> {
    let schema = parse_schema(CONFIG_SCHEMA, "config")?;
    validate(&schema, instance)
        .map_err(|errs| HarnessError::Config(format!("schema violations: {}", errs.join("; "))))
}

/// Check an emitted summary against the shipped summary schema. A failure
/// here is an internal bug (we produced the summary), hence an invariant
/// violation rather than a config error.
pub fn validate_summary_value(instance: &Value) -> Result<(), HarnessError> {
    let schema = parse_schema(SUMMARY_SCHEMA, "summary")?;
    validate(&schema, instance).map_err(|errs| {
        HarnessError::Invariant(format!(
            "emitted summary does not match its schema: {}",
            errs.join("; ")
        ))
    })
}
