//! Plain-text `key = value` configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Later
//! sources override earlier ones via [`KeyValues::overlay`], which is how the
//! command line applies "flag beats file beats default".

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::{Error, Resolution, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: IndexMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::invalid(format!("config line {}: empty key", lineno + 1)));
            }
            kv.set(key, value.trim());
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of `other` replace entries of `self`.
    pub fn overlay(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.set(k.clone(), v.clone());
        }
    }

    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::invalid(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Parses `32` as `(32, 32)` and `24x48` as `(24, 48)`.
pub fn parse_resolution(s: &str) -> Result<Resolution> {
    let s = s.trim();
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad resolution `{s}`")))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

pub fn parse_resolution_list(s: &str) -> Result<Vec<Resolution>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(parse_resolution)
        .collect()
}

pub fn format_resolution_list(list: &[Resolution]) -> String {
    list.iter()
        .map(|&(h, w)| if h == w { h.to_string() } else { format!("{h}x{w}") })
        .collect::<Vec<_>>()
        .join(",")
}

/// Inclusive `start:end:step` range.
pub fn parse_range(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    let num = |p: &str| {
        p.parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad range `{s}`, expected start:end:step")))
    };
    let (start, end, step) = match parts.as_slice() {
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        _ => return Err(Error::invalid(format!("bad range `{s}`, expected start:end:step"))),
    };
    if step == 0 || start > end {
        return Err(Error::invalid(format!("empty or invalid range `{s}`")));
    }
    Ok((start..=end).step_by(step).collect())
}
