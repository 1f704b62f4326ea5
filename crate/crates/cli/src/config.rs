//! `key=value` configuration files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::UsageError;

/// Parsed `key=value` lines. Blank lines and `#` comments are skipped;
/// dashes in keys are read as underscores.
#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, UsageError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected key=value, got {raw:?}", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !allowed.contains(&key.as_str()) {
                return Err(UsageError(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            entries.insert(key, v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Ok(Self::parse(&text, allowed)?)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// Resolves settings in the order flag, file, default, and records every
/// resolved value for the run manifest.
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    pub manifest: Vec<(String, String)>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a ConfigFile) -> Self {
        Self {
            file,
            manifest: Vec::new(),
        }
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.raw(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s
                .parse()
                .map_err(|e| UsageError(format!("config key {key}: cannot parse {s:?}: {e}")))?,
            (None, None) => default,
        };
        self.manifest.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Like [`Resolver::get`] for settings without a default.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, UsageError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.raw(key)) {
            (Some(v), _) => Some(v),
            (None, Some(s)) => Some(
                s.parse()
                    .map_err(|e| UsageError(format!("config key {key}: cannot parse {s:?}: {e}")))?,
            ),
            (None, None) => None,
        };
        let shown = value.as_ref().map_or("none".to_string(), |v| v.to_string());
        self.manifest.push((key.to_string(), shown));
        Ok(value)
    }
}

/// Writes the resolved configuration to standard error.
pub fn print_manifest(command: &str, entries: &[(String, String)]) {
    eprintln!("# multitok {command}");
    for (k, v) in entries {
        eprintln!("# {k}={v}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_yield_to_flags() {
        let f = ConfigFile::parse("# comment\nsteps = 10\nlr-b=0.5 # trailing\n\n", &["steps", "lr_b"]).unwrap();
        let mut r = Resolver::new(&f);
        assert_eq!(r.get("steps", None, 1usize).unwrap(), 10);
        assert_eq!(r.get("steps", Some(7usize), 1).unwrap(), 7);
        assert_eq!(r.get("lr_b", None, 1.0f64).unwrap(), 0.5);
        assert_eq!(r.get("missing", None, 3u8).unwrap(), 3);
        assert_eq!(r.manifest[0], ("steps".to_string(), "10".to_string()));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(ConfigFile::parse("bogus=1", &["steps"]).is_err());
        assert!(ConfigFile::parse("steps", &["steps"]).is_err());
        let f = ConfigFile::parse("steps=abc", &["steps"]).unwrap();
        assert!(Resolver::new(&f).get("steps", None, 1usize).is_err());
    }
}
