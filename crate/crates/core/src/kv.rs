//! `key = value` configuration text.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed configuration, keys in sorted order. Blank lines and lines starting
/// with `#` are ignored; later assignments override earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    pub entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            kv.assign(line)
                .map_err(|_| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        }
        Ok(kv)
    }

    /// Applies one `key=value` override.
    pub fn assign(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {item:?}")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in {item:?}")));
        }
        self.entries.insert(key.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}"))),
        }
    }

    /// Overwrites `slot` when the key is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on keys outside `known` (exact names or `prefix.*` patterns).
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            let ok = known.iter().any(|k| match k.strip_suffix('*') {
                Some(prefix) => key.starts_with(prefix),
                None => key == k,
            });
            if !ok {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut kv = KeyValues::parse("# c\n seed = 4\n\nname=a=b\n").unwrap();
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(4));
        assert_eq!(kv.get::<String>("name").unwrap().as_deref(), Some("a=b"));
        kv.assign("seed=9").unwrap();
        let mut seed = 0u64;
        kv.set("seed", &mut seed).unwrap();
        assert_eq!(seed, 9);
        assert!(kv.get::<u64>("name").is_err());
        assert!(KeyValues::parse("novalue").is_err());
        assert!(kv.check_known(&["seed"]).is_err());
        assert!(kv.check_known(&["seed", "na*"]).is_ok());
        assert_eq!(kv.render(), "name=a=b\nseed=9\n");
    }
}
