//! Plain-text `key=value` manifests that sit next to VTNS tensor files.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{IoContext, Result, VillmError};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        assert!(
            !key.is_empty() && !key.contains(['=', '\n']) && !value.contains('\n'),
            "invalid manifest entry {key:?}"
        );
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| VillmError::Manifest(format!("missing key `{key}`")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.get(key).ok()
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|e| VillmError::Manifest(format!("key `{key}` = {raw:?}: {e}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VillmError::Manifest(format!("line {}: expected key=value", n + 1)))?;
            if k.is_empty() {
                return Err(VillmError::Manifest(format!("line {}: empty key", n + 1)));
            }
            if m.get_opt(k).is_some() {
                return Err(VillmError::Manifest(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    /// Fails unless `key` is present with exactly `expected`.
    pub fn expect(&self, key: &str, expected: &str) -> Result<()> {
        let found = self.get(key)?;
        if found != expected {
            return Err(VillmError::Manifest(format!(
                "key `{key}`: expected {expected:?}, found {found:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let mut m = Manifest::new();
        m.set("label", "spatial").set("D", 32).set("K", 64).set("note", "a=b c");
        let text = m.render();
        assert_eq!(text, "label=spatial\nD=32\nK=64\nnote=a=b c\n");
        let back = Manifest::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse_value::<usize>("K").unwrap(), 64);
    }

    #[test]
    fn corrupt_manifests_are_rejected() {
        assert!(Manifest::parse("no equals sign").is_err());
        assert!(Manifest::parse("=value").is_err());
        assert!(Manifest::parse("a=1\na=2").is_err());
        let m = Manifest::parse("# comment\n\nk=v\n").unwrap();
        assert!(m.get("missing").is_err());
        assert!(m.parse_value::<u32>("k").is_err());
        assert!(m.expect("k", "w").is_err());
    }
}
