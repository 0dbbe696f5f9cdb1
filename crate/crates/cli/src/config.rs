//! Flat `key=value` run configuration with per-command defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: &'static str,
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Starts from `defaults`; an empty default marks a key that must be set.
    pub fn new(command: &'static str, defaults: &[(&'static str, &str)]) -> Self {
        RunConfig {
            command,
            values: defaults.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.keys().find(|k| **k == key) {
            Some(&k) => {
                self.values.insert(k, value.trim().to_string());
                Ok(())
            }
            None => Err(CliError::Usage(format!(
                "unknown key {key:?} for {}; known keys: {}",
                self.command,
                self.values.keys().copied().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// `key=value` assignment as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Lines of `key=value`; blank lines and `#` comments are skipped.
    /// A `command=` line must name this command.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            if k.trim() == "command" {
                if v.trim() != self.command {
                    return Err(CliError::Usage(format!(
                        "{} is a {} config, not {}",
                        path.display(),
                        v.trim(),
                        self.command
                    )));
                }
                continue;
            }
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("{}:{}: {}", path.display(), i + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key declared in defaults")
    }

    /// Value of `key`, or `None` when it is empty.
    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.opt(key)
            .ok_or_else(|| CliError::Usage(format!("{} needs --{} (or {key}=...)", self.command, key.replace('_', "-"))))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.required(key)?;
        v.parse()
            .map_err(|_| CliError::Usage(format!("{key}={v:?} is not a valid value")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" | "" => Ok(false),
            v => Err(CliError::Usage(format!("{key}={v:?} is not a boolean"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("{key}: {s:?} is not a valid entry")))
            })
            .collect()
    }

    /// Three values, or one value repeated.
    pub fn triple(&self, key: &str) -> Result<[usize; 3], CliError> {
        let v: Vec<usize> = self.list(key)?;
        match v.len() {
            1 => Ok([v[0]; 3]),
            3 => Ok([v[0], v[1], v[2]]),
            _ => Err(CliError::Usage(format!("{key} needs one or three values"))),
        }
    }

    /// Effective configuration, loadable again with `--config`.
    pub fn snapshot(&self) -> String {
        let mut s = format!("command={}\n", self.command);
        for (k, v) in &self.values {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let mut c = RunConfig::new("train", &[("steps", "10"), ("out", "")]);
        assert!(c.required("out").is_err());
        c.set_pair("steps=20").unwrap();
        assert_eq!(c.get::<usize>("steps").unwrap(), 20);
        assert!(matches!(c.set_pair("stpes=3"), Err(CliError::Usage(_))));
        assert!(c.set_pair("steps").is_err());
        assert!(c.get::<usize>("out").is_err());
    }

    #[test]
    fn snapshot_reloads() {
        let mut c = RunConfig::new("generate", &[("seed", "0"), ("attrs", ""), ("out", "")]);
        c.set("seed", "7").unwrap();
        c.set("attrs", "rooms,day").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.txt");
        std::fs::write(&p, c.snapshot()).unwrap();
        let mut d = RunConfig::new("generate", &[("seed", "0"), ("attrs", ""), ("out", "")]);
        d.load_file(&p).unwrap();
        assert_eq!(d.snapshot(), c.snapshot());
        let mut e = RunConfig::new("train", &[("seed", "0")]);
        assert!(e.load_file(&p).is_err());
    }
}
