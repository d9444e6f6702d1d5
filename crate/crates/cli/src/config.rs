//! Flat `key=value` run configuration.
//!
//! Values come from an optional file (one `key = value` per line, `#`
//! starts a comment) overridden by command-line flags. Every key a command
//! reads is recorded with its resolved value so the run can write out the
//! exact configuration it used.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", n + 1)))?;
            let key = normalize(k);
            if key.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values, resolved: RefCell::default() })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Settings::parse(&text)
            }
        }
    }

    /// Flag override; `None` leaves the file value in place.
    pub fn set<V: Display>(&mut self, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.values.insert(normalize(key), v.to_string());
        }
    }

    /// Boolean flag override; only a set flag overrides.
    pub fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.values.insert(normalize(key), "true".into());
        }
    }

    pub fn get_opt<T: FromStr + Display>(&self, key: &str) -> Result<Option<T>, CliError> {
        let key = normalize(key);
        match self.values.get(&key) {
            None => Ok(None),
            Some(raw) => {
                let v = raw.parse::<T>().map_err(|_| CliError::Usage(format!("invalid value {raw:?} for {key}")))?;
                self.resolved.borrow_mut().insert(key, v.to_string());
                Ok(Some(v))
            }
        }
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get_opt(key)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.borrow_mut().insert(normalize(key), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn require<T: FromStr + Display>(&self, key: &str, why: &str) -> Result<T, CliError> {
        self.get_opt(key)?.ok_or_else(|| CliError::Usage(format!("missing --{}: {why}", key.replace('_', "-"))))
    }

    pub fn path(&self, key: &str, default: PathBuf) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.get(key, default.display().to_string())?))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        let Some(raw) = self.get_opt::<String>(key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|_| CliError::Usage(format!("invalid entry {s:?} in {key}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// The resolved configuration as a config file.
    pub fn render(&self) -> String {
        self.resolved.borrow().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut s = Settings::parse("# run\nsteps = 10\nlr=0.5 # trailing\nbatch-size = 4\n").unwrap();
        s.set("steps", Some(20));
        s.set("lr", None::<f64>);
        assert_eq!(s.get("steps", 1usize).unwrap(), 20);
        assert_eq!(s.get("lr", 0.1).unwrap(), 0.5);
        assert_eq!(s.get("batch_size", 1usize).unwrap(), 4);
        assert_eq!(s.get("seed", 7u64).unwrap(), 7);
        assert_eq!(s.render(), "batch_size = 4\nlr = 0.5\nseed = 7\nsteps = 20\n");
    }

    #[test]
    fn errors_are_usage_errors() {
        assert!(matches!(Settings::parse("nonsense"), Err(CliError::Usage(_))));
        let s = Settings::parse("steps = many").unwrap();
        assert!(matches!(s.get("steps", 1usize), Err(CliError::Usage(_))));
        assert!(matches!(s.require::<String>("base_ckpt", "needed"), Err(CliError::Usage(_))));
        let s = Settings::parse("layers = 1, 3,x").unwrap();
        assert!(s.list::<usize>("layers").is_err());
    }
}
