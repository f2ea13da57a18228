//! Flat `key = value` text files: one entry per line, `#` starts a comment,
//! lists are comma-separated.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, found {content:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {key:?}"),
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Config {
                line: 0,
                msg: "configuration is empty".into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Rejects any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config {
                    line: *line,
                    msg: format!("unknown key {key:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Config {
                line: *line,
                msg: format!("cannot parse {key} = {v:?}"),
            }),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Config {
                    line: *line,
                    msg: format!("cannot parse list {key} = {v:?}"),
                }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# header\nM = 64\nNs = 50, 100 # trailing\n").unwrap();
        assert_eq!(kv.get::<usize>("M").unwrap(), Some(64));
        assert_eq!(kv.get_list::<usize>("Ns").unwrap(), Some(vec![50, 100]));
        assert_eq!(kv.line_of("Ns"), 3);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(
            KeyValues::parse("# nothing\n\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn reports_line_numbers() {
        match KeyValues::parse("a = 1\nbroken\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let kv = KeyValues::parse("a = 1\nb = x\n").unwrap();
        match kv.get::<f64>("b") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match kv.check_keys(&["a"]) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
