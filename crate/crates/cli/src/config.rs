//! Flat `key = value` configuration with `#` comments.
//!
//! Every key a command reads is marked as used; `finish` rejects the rest, so
//! a misspelled key is a configuration error rather than a silent default.
//! Relative paths in a file resolve against that file's directory; paths given
//! as overrides resolve against the working directory.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key `{key}` set twice (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot use `{value}`: {message}")]
    Invalid { key: String, value: String, message: String },
    #[error("key `{key}`: {path} does not exist")]
    MissingFile { key: String, path: PathBuf },
    #[error("unknown key(s): {}", .0.join(", "))]
    Unknown(Vec<String>),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: Option<usize>,
    base: PathBuf,
}

#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    /// Parses config text; relative paths will resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, message: format!("expected key = value, got `{body}`") })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax { line, message: format!("bad key `{key}`") });
            }
            if let Some(prev) = entries.get(key) {
                return Err(ConfigError::Duplicate { key: key.into(), first: prev.line.unwrap_or(0), second: line });
            }
            entries
                .insert(key.into(), Entry { value: value.trim().into(), line: Some(line), base: base.to_path_buf() });
        }
        Ok(Self { entries, used: RefCell::default() })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Applies a `key=value` override, replacing any file value.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::BadOverride(assignment.into()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::BadOverride(assignment.into()));
        }
        self.entries.insert(key.into(), Entry { value: value.trim().into(), line: None, base: PathBuf::new() });
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.raw(key).is_some()
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key).map(|e| parse_value(key, &e.value)).transpose()
    }

    pub fn require<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }

    pub fn or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Whitespace- or comma-separated list.
    pub fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(e) = self.raw(key) else { return Ok(None) };
        e.value
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| parse_value(key, s))
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    pub fn vec3(&self, key: &str) -> Result<Option<Vector3<f64>>, ConfigError> {
        match self.list::<f64>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some(Vector3::new(v[0], v[1], v[2]))),
            Some(v) => Err(self.invalid(key, &format!("expected 3 numbers, got {}", v.len()))),
        }
    }

    /// A path value resolved against its origin.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|e| e.base.join(&e.value))
    }

    pub fn existing_path(&self, key: &str) -> Result<Option<PathBuf>, ConfigError> {
        match self.path(key) {
            Some(p) if !p.exists() => Err(ConfigError::MissingFile { key: key.into(), path: p }),
            other => Ok(other),
        }
    }

    pub fn require_existing_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        self.existing_path(key)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }

    /// Output path; its parent directory must exist.
    pub fn output_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        let p = self.path(key).ok_or_else(|| ConfigError::Missing(key.into()))?;
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return Err(ConfigError::MissingFile { key: key.into(), path: dir.to_path_buf() });
            }
        }
        Ok(p)
    }

    pub fn invalid(&self, key: &str, message: &str) -> ConfigError {
        let value = self.entries.get(key).map(|e| e.value.clone()).unwrap_or_default();
        ConfigError::Invalid { key: key.into(), value, message: message.into() }
    }

    /// Fails if any key was never read.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown))
        }
    }
}

fn parse_value<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}
