//! Line-oriented `key = value` text with `#` comments.

use crate::{Error, Result};

/// One `key = value` line with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected `key = value`, found `{}`", line),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Looks up keys in a parsed block.
pub struct Block(pub Vec<Entry>);

impl Block {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.0.iter().find(|e| e.key == key)
    }

    pub fn require(&self, what: &'static str, key: &str) -> Result<&Entry> {
        self.get(key)
            .ok_or_else(|| Error::format(what, 0, format!("missing `{}`", key)))
    }

    pub fn parse<T: std::str::FromStr>(&self, what: &'static str, key: &str) -> Result<T> {
        let e = self.require(what, key)?;
        e.value.parse().map_err(|_| {
            Error::format(
                what,
                0,
                format!("line {}: bad value `{}` for `{}`", e.line, e.value, key),
            )
        })
    }
}
