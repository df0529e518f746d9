//! `key = value` configuration files and the flag > file > default lookup.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mtsnet::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), no + 1)))?;
            let k = k.trim().replace('-', "_");
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown key {k:?}; accepted keys are {}",
                    path.display(),
                    no + 1,
                    allowed.join(", ")
                )));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// The flag when given, else the file's value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config value {v:?} for {key} is not valid"))),
        }
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nepochs = 7\nlr=0.1 # trailing\n").unwrap();
        let cfg = ConfigFile::load(Some(&path), &["epochs", "lr", "batch"]).unwrap();
        assert_eq!(cfg.pick_or(Some(3usize), "epochs", 1).unwrap(), 3);
        assert_eq!(cfg.pick_or(None::<usize>, "epochs", 1).unwrap(), 7);
        assert_eq!(cfg.pick_or(None::<usize>, "batch", 1).unwrap(), 1);
        assert_eq!(cfg.pick_or(None::<f64>, "lr", 0.5).unwrap(), 0.1);
        assert!(cfg.pick(None::<usize>, "lr").is_err());
        fs::write(&path, "colour = red\n").unwrap();
        assert!(ConfigFile::load(Some(&path), &["epochs"]).is_err());
    }
}
