//! Layered run configuration: JSON file, then named flags, then `--set`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("type mismatch at `{key}`: {message}")]
    TypeMismatch { key: String, message: String },
    #[error("missing required key `{0}`")]
    MissingRequired(String),
    #[error("invalid value for `{key}`: {message}")]
    Range { key: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A path-valued key of a subcommand.
#[derive(Debug, Clone, Copy)]
pub struct PathKey {
    pub key: &'static str,
    pub required: bool,
    /// Accepts a list of paths.
    pub multi: bool,
    /// Output directory rather than an input file.
    pub output: bool,
    pub help: &'static str,
}

/// Load a config file; paths inside it are later resolved against its
/// directory.
pub fn load_file(path: &Path) -> Result<Map<String, Value>> {
    let read = |message: String| ConfigError::Read { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(&text).map_err(|e| read(e.to_string()))? {
        Value::Object(m) => Ok(m),
        other => Err(ConfigError::TypeMismatch { key: ".".into(), message: format!("expected an object, found {}", kind(&other)) }),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Flag text as JSON when it parses, else a comma list, else a string.
pub fn parse_raw(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_raw(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

/// Set a dotted key, creating intermediate objects.
pub fn set_path(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = map;
    let mut walked = String::new();
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let slot = cur.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        cur = match slot {
            Value::Object(m) => m,
            other => {
                return Err(ConfigError::TypeMismatch { key: walked, message: format!("expected an object, found {}", kind(other)) })
            }
        };
    }
    Ok(())
}

/// Parse `key=value` from `--set`.
pub fn split_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::TypeMismatch { key: s.to_string(), message: "expected key=value".into() })?;
    Ok((k.trim().to_string(), parse_raw(v)))
}

/// Deserialize with errors that name the offending key.
pub fn deserialize<T: DeserializeOwned>(map: Map<String, Value>, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize::<_, T>(Value::Object(map)).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        classify(&join(prefix, if path == "." { "" } else { &path }), &message)
    })
}

fn join(prefix: &str, path: &str) -> String {
    match (prefix.is_empty(), path.is_empty()) {
        (true, _) => path.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{path}"),
    }
}

fn backticked(message: &str) -> Option<&str> {
    let rest = message.split_once('`')?.1;
    Some(rest.split_once('`')?.0)
}

fn classify(path: &str, message: &str) -> ConfigError {
    if message.starts_with("unknown field") {
        let name = backticked(message).unwrap_or("?");
        let key = if path.is_empty() {
            name.to_string()
        } else if path == name || path.ends_with(&format!(".{name}")) {
            path.to_string()
        } else {
            format!("{path}.{name}")
        };
        return ConfigError::UnknownKey(key);
    }
    if message.starts_with("missing field") {
        let name = backticked(message).unwrap_or("?");
        return ConfigError::MissingRequired(join(path, name));
    }
    let key = if path.is_empty() { ".".to_string() } else { path.to_string() };
    ConfigError::TypeMismatch { key, message: message.to_string() }
}

/// Remove a key and deserialize it on its own.
pub fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_path_to_error::deserialize::<_, T>(v).map(Some).map_err(|e| {
            let path = e.path().to_string();
            let sub = if path == "." { key.to_string() } else { format!("{key}.{path}") };
            ConfigError::TypeMismatch { key: sub, message: e.inner().to_string() }
        }),
    }
}

/// Resolved path keys of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    entries: Vec<(String, Vec<PathBuf>)>,
}

impl Paths {
    pub fn one(&self, key: &str) -> Option<&Path> {
        self.many(key).first().map(PathBuf::as_path)
    }

    pub fn many(&self, key: &str) -> &[PathBuf] {
        self.entries.iter().find(|(k, _)| k == key).map_or(&[], |(_, v)| v.as_slice())
    }

    pub fn to_json(&self, keys: &[PathKey]) -> Map<String, Value> {
        let mut m = Map::new();
        for pk in keys {
            let v = self.many(pk.key);
            if v.is_empty() {
                continue;
            }
            let strs: Vec<Value> = v.iter().map(|p| Value::String(p.display().to_string())).collect();
            m.insert(pk.key.to_string(), if pk.multi { Value::Array(strs) } else { strs.into_iter().next().unwrap() });
        }
        m
    }
}

/// Resolve relative path values of a config file against its directory.
pub fn rebase_paths(map: &mut Map<String, Value>, keys: &[PathKey], dir: &Path) {
    let rebase = |v: &mut Value| {
        if let Value::String(s) = v {
            *s = dir.join(&*s).display().to_string();
        }
    };
    for pk in keys {
        match map.get_mut(pk.key) {
            Some(Value::Array(items)) => items.iter_mut().for_each(rebase),
            Some(v) => rebase(v),
            None => {}
        }
    }
}

/// Pull path keys out of `map`, resolve them against `base`, and check that
/// inputs exist.
pub fn take_paths(map: &mut Map<String, Value>, keys: &[PathKey], base: &Path) -> Result<Paths> {
    let mut entries = vec![];
    for pk in keys {
        let raw: Vec<String> = match map.remove(pk.key) {
            None | Some(Value::Null) => vec![],
            Some(Value::String(s)) => vec![s],
            Some(Value::Array(items)) if pk.multi => items
                .into_iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::String(s) => Ok(s),
                    other => Err(ConfigError::TypeMismatch { key: format!("{}[{i}]", pk.key), message: format!("expected a path, found {}", kind(&other)) }),
                })
                .collect::<Result<_>>()?,
            Some(other) => {
                return Err(ConfigError::TypeMismatch { key: pk.key.into(), message: format!("expected a path, found {}", kind(&other)) })
            }
        };
        if raw.is_empty() {
            if pk.required {
                return Err(ConfigError::MissingRequired(pk.key.into()));
            }
            continue;
        }
        let mut resolved = vec![];
        for r in raw {
            let p = base.join(&r);
            if !pk.output {
                let abs = p.canonicalize().map_err(|e| ConfigError::Range { key: pk.key.into(), message: format!("{}: {e}", p.display()) })?;
                resolved.push(abs);
            } else {
                resolved.push(absolute(&p));
            }
        }
        entries.push((pk.key.to_string(), resolved));
    }
    Ok(Paths { entries })
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}
