//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys
//! override earlier ones; command-line `--set` overrides are applied the
//! same way after the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parse `key = value` lines into an ordered map.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub(crate) fn join_list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Anything configurable by `key = value` pairs.
pub trait KeyValue {
    /// Apply one setting; `Ok(false)` means the key is not ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Every setting, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;

    fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Apply pairs to several targets in turn; a key must be claimed by one.
pub fn apply_all(pairs: &[(String, String)], targets: &mut [&mut dyn KeyValue]) -> Result<()> {
    for (k, v) in pairs {
        let mut claimed = false;
        for t in targets.iter_mut() {
            if t.set(k, v)? {
                claimed = true;
                break;
            }
        }
        if !claimed {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
    }
    Ok(())
}

/// Merge entries of several targets into one text block.
pub fn render(targets: &[&dyn KeyValue]) -> String {
    let mut map = BTreeMap::new();
    let mut order = Vec::new();
    for t in targets {
        for (k, v) in t.entries() {
            if map.insert(k.clone(), v).is_none() {
                order.push(k);
            }
        }
    }
    order
        .into_iter()
        .map(|k| format!("{k} = {}\n", map[&k]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_kv("# c\n\na = 1\n b=two words \n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into()), ("b".into(), "two words".into())]
        );
    }

    #[test]
    fn rejects_missing_equals() {
        assert!(matches!(parse_kv("oops"), Err(Error::Config(_))));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn bools_and_lists() {
        assert!(parse_bool("k", "On").unwrap());
        assert!(!parse_bool("k", "0").unwrap());
        assert!(parse_bool("k", "maybe").is_err());
        assert_eq!(parse_list::<usize>("k", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(join_list(&[1, 2]), "1,2");
    }
}
