//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are skipped.
//! Values are typed by the field they override: booleans take
//! `true`/`false`, numbers parse as integers or floats, lists are
//! comma-separated. Unknown keys and duplicate keys are errors.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Assignments in file order.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if pairs.iter().any(|(p, _)| p == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn parse_scalar(key: &str, like: &Value, raw: &str) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot parse {raw:?} as {}", kind(like)));
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| bad()),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().map(Value::from).map_err(|_| bad()),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::from)
            .ok_or_else(bad),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        _ => serde_json::from_str(raw).map_err(|_| bad()),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(n) if n.is_i64() => "an integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        _ => "a value",
    }
}

/// Applies `pairs` on top of `base`, typing each value by the field it
/// replaces.
pub fn apply_pairs<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T> {
    let Value::Object(mut fields) = serde_json::to_value(base)? else {
        return Err(Error::Config("configuration is not a record".into()));
    };
    for (key, raw) in pairs {
        let current = fields
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        let value = match current {
            Value::Array(items) => {
                let like = items.first().cloned().unwrap_or(Value::from(0u64));
                let parts: Vec<Value> = raw
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_scalar(key, &like, s))
                    .collect::<Result<_>>()?;
                Value::Array(parts)
            }
            other => parse_scalar(key, other, raw)?,
        };
        fields.insert(key.clone(), value);
    }
    serde_json::from_value(Value::Object(Map::from_iter(fields))).map_err(|e| Error::Config(e.to_string()))
}

/// Renders `config` in the flat format, one key per line.
pub fn to_flat<T: Serialize>(config: &T) -> Result<String> {
    let Value::Object(fields) = serde_json::to_value(config)? else {
        return Err(Error::Config("configuration is not a record".into()));
    };
    let mut out = String::new();
    for (k, v) in fields {
        let rendered = match v {
            Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {rendered}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    #[test]
    fn overrides_typed_fields() {
        let text = "# run\nalpha = 1\nlatent_on=false\nlr_decay_points = 10, 20\nseed = 7 # trailing\n";
        let pairs = parse_flat(text).unwrap();
        let c = apply_pairs(&TrainConfig::default(), &pairs).unwrap();
        assert_eq!(c.alpha, 1.0);
        assert!(!c.latent_on);
        assert_eq!(c.lr_decay_points, [10, 20]);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let base = TrainConfig::default();
        assert!(apply_pairs(&base, &parse_flat("alhpa = 1").unwrap()).is_err());
        assert!(apply_pairs(&base, &parse_flat("batch_size = -3").unwrap()).is_err());
        assert!(apply_pairs(&base, &parse_flat("latent_on = yes").unwrap()).is_err());
        assert!(parse_flat("alpha").is_err());
        assert!(parse_flat("alpha = 1\nalpha = 2").is_err());
    }

    #[test]
    fn flat_round_trip() {
        let c = TrainConfig {
            lr_decay_points: vec![],
            beta: 0.25,
            ..TrainConfig::default()
        };
        let text = to_flat(&c).unwrap();
        let back = apply_pairs(&TrainConfig::default(), &parse_flat(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
