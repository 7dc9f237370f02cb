//! Layered JSON configuration: compiled-in defaults, then a config file, then
//! `key=value` overrides from the command line.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Replaces `slot` by `new`, refusing values whose JSON kind differs from
/// the default. A `null` default (an optional field) accepts anything.
fn assign(slot: &mut Value, new: Value, key: &str) -> Result<(), CliError> {
    match (&mut *slot, new) {
        (Value::Object(base), Value::Object(patch)) => merge_object(base, patch, key),
        (Value::Null, new) => {
            *slot = new;
            Ok(())
        }
        (old, new) if kind(old) == kind(&new) => {
            *old = new;
            Ok(())
        }
        (old, new) => Err(CliError::Usage(format!(
            "config key `{key}` expects a {}, got a {}",
            kind(old),
            kind(&new)
        ))),
    }
}

fn merge_object(base: &mut Map<String, Value>, patch: Map<String, Value>, prefix: &str) -> Result<(), CliError> {
    for (k, v) in patch {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base
            .get_mut(&k)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
        assign(slot, v, &key)?;
    }
    Ok(())
}

/// Parses one `key=value` override. Values are read as JSON when possible
/// and as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    assign(slot, value, key)
}

fn decode<T: DeserializeOwned>(value: &Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(value.clone()).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

/// Defaults ← `file` ← `overrides`, in increasing precedence. Returns the
/// typed config and its fully resolved JSON form.
pub fn resolve<T>(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<(T, Value), CliError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?
        };
        let Value::Object(patch) = patch else {
            return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
        };
        let Value::Object(base) = &mut value else {
            unreachable!("configs serialize to objects")
        };
        merge_object(base, patch, "")?;
        decode::<T>(&value, &format!("config {}", path.display()))?;
    }
    for (key, v) in overrides {
        set_path(&mut value, key, v.clone())?;
        decode::<T>(&value, &format!("override of config key `{key}`"))?;
    }
    let typed: T = decode(&value, "resolved config")?;
    let normalized = serde_json::to_value(&typed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((typed, normalized))
}

#[cfg(test)]
mod tests {
    use super::*;
    use protoeeg::training::TrainConfig;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    fn usage_message(r: Result<(TrainConfig, Value), CliError>) -> String {
        match r {
            Err(CliError::Usage(m)) => m,
            other => panic!("expected a usage error, got {:?}", other.map(|v| v.1)),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = write("{}");
        let (cfg, _) = resolve::<TrainConfig>(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.num_train_epochs, 130);
        let f = write("");
        let (cfg, _) = resolve::<TrainConfig>(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn precedence_and_nesting() {
        let f = write(r#"{"num_train_epochs": 40, "lr": {"joint_head": 0.5}, "batch_size": 16}"#);
        let overrides = vec![
            parse_override("num_train_epochs=12").unwrap(),
            parse_override("coefs.l1=0.5").unwrap(),
        ];
        let (cfg, resolved) = resolve::<TrainConfig>(Some(f.path()), &overrides).unwrap();
        assert_eq!(cfg.num_train_epochs, 12);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lr.joint_head, 0.5);
        assert_eq!(cfg.lr.joint_features, TrainConfig::default().lr.joint_features);
        assert_eq!(cfg.coefs.l1, 0.5);
        assert_eq!(resolved["num_train_epochs"], 12);
    }

    #[test]
    fn unknown_keys_are_named() {
        let f = write(r#"{"foo": 1}"#);
        assert!(usage_message(resolve(Some(f.path()), &[])).contains("foo"));
        let f = write(r#"{"lr": {"bar": 1}}"#);
        assert!(usage_message(resolve(Some(f.path()), &[])).contains("lr.bar"));
        let o = vec![parse_override("coefs.nope=1").unwrap()];
        assert!(usage_message(resolve(None, &o)).contains("coefs.nope"));
    }

    #[test]
    fn type_mismatches_are_named() {
        let o = vec![parse_override("batch_size=abc").unwrap()];
        assert!(usage_message(resolve(None, &o)).contains("batch_size"));
        let o = vec![parse_override("batch_size=-3").unwrap()];
        assert!(usage_message(resolve(None, &o)).contains("batch_size"));
        let f = write(r#"{"push_epochs": 5}"#);
        assert!(usage_message(resolve(Some(f.path()), &[])).contains("push_epochs"));
    }

    #[test]
    fn malformed_input() {
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("=3").is_err());
        let f = write("[1, 2]");
        usage_message(resolve(Some(f.path()), &[]));
        let f = write("{ not json");
        usage_message(resolve(Some(f.path()), &[]));
        usage_message(resolve(Some(Path::new("/definitely/missing.json")), &[]));
    }

    #[test]
    fn override_values_parse_as_json() {
        let (k, v) = parse_override("push_epochs=[5, 9]").unwrap();
        assert_eq!(k, "push_epochs");
        assert_eq!(v, serde_json::json!([5, 9]));
        assert_eq!(parse_override("name=abc").unwrap().1, Value::String("abc".into()));
        assert_eq!(parse_override("x=a=b").unwrap().1, Value::String("a=b".into()));
    }
}
