//! Plain-text `key = value` files: one pair per line, `#` starts a comment, keys may
//! repeat (their values are kept in order).

use std::fmt::Write as _;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Replaces every existing value of `key` with a single one.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.retain(|(k, _)| k != key);
        self.push(key, value);
    }

    /// Last value of `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`"))))
            .transpose()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_repeats_and_overrides() {
        let kv = KvFile::parse("# header\na = 1\n\nt = x y\nt = z\na = 2\n").unwrap();
        assert_eq!(kv.get("a"), Some("2"));
        assert_eq!(kv.get_all("t"), vec!["x y", "z"]);
        assert_eq!(kv.parse_value::<u32>("a").unwrap(), Some(2));
        assert!(kv.parse_value::<u32>("t").is_err());
        assert!(KvFile::parse("novalue").is_err());
        let again = KvFile::parse(&kv.render()).unwrap();
        assert_eq!(again, kv);
    }
}
