//! Flat `key = value` text format used for parameter files, experiment
//! configs and result records.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// An ordered key-value record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvRecord {
    entries: Vec<(String, String)>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rec = KvRecord::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            if rec.get(key).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            rec.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(rec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, fmt_f64(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("`{key}`: not a number: `{v}`")))
            })
            .transpose()
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.get_f64(key)?
            .ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Parse(format!("`{key}`: not an integer: `{v}`")))
            })
            .transpose()
    }

    /// Parses a comma-separated list of numbers.
    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::Parse(format!("`{key}`: bad list item `{s}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn extend(&mut self, other: &KvRecord) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }
}

impl std::fmt::Display for KvRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        f.write_str(&out)
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let rec = KvRecord::parse("# comment\n a = 1.5\nb=two\n\n").unwrap();
        assert_eq!(rec.get("a"), Some("1.5"));
        assert_eq!(rec.get("b"), Some("two"));
        assert_eq!(rec.require_f64("a").unwrap(), 1.5);
        let again = KvRecord::parse(&rec.to_string()).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvRecord::parse("a = 1\na = 2").is_err());
        assert!(KvRecord::parse("just words").is_err());
        assert!(KvRecord::parse(" = 3").is_err());
    }

    #[test]
    fn lists() {
        let rec = KvRecord::parse("grid = 1, 2.5,3").unwrap();
        assert_eq!(rec.get_f64_list("grid").unwrap().unwrap(), vec![1.0, 2.5, 3.0]);
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
