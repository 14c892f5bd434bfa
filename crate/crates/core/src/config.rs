//! Flat `key = value` text used for config files and the config block of
//! checkpoints. `#` starts a comment; blank lines are ignored.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits text into entries. Duplicate keys are rejected.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}` (first set on line {})",
                i + 1,
                prev.line
            )));
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("bad value for `{key}`: `{raw}` ({e})")))
}

/// Comma-separated list, e.g. `1, 2, 3`.
pub fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// A config struct that reads and writes itself as `key = value` lines.
pub trait KeyValue: Default {
    /// Applies one entry; unknown keys return `Ok(false)`.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every field in declaration order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()>;

    fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses text on top of the defaults; any unknown key is an error.
    fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse(text)? {
            if !cfg.set(&e.key, &e.value)? {
                return Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let e = parse("# header\n\na = 1  # trailing\n b=x y \n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("a", "1", 3));
        assert_eq!((e[1].key.as_str(), e[1].value.as_str()), ("b", "x y"));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse("a = 1\na = 2").is_err());
        assert!(parse("just words").is_err());
        assert!(parse(" = 3").is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(list::<usize>("s", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(list::<usize>("s", "1,x").is_err());
        assert_eq!(join(&[1.5, 2.0]), "1.5,2");
    }
}
