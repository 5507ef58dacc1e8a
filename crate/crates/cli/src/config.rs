//! Flat key-value run configuration: every command resolves its settings
//! (file values overridden by explicit flags), writes the result next to
//! its outputs, and can be replayed from that file.

use std::collections::BTreeMap;
use std::path::Path;

use deepcv::{Error, Result};

/// Ordered key-value store serialized as `key = value` lines.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(format!("cannot read config: {e}")))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::validation(format!(
                    "config line {} is not `key = value`: {line}",
                    lineno + 1
                )));
            };
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses a stored value, failing loudly on malformed entries.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::validation(format!("config key `{key}` has a bad value: {raw}"))
            }),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(path.as_ref(), out)?;
        Ok(())
    }
}

/// Resolves one setting: explicit flag wins, then the config file, then the
/// built-in default.
pub fn resolve<T: std::str::FromStr + ToString>(
    flag: Option<T>,
    cfg: &RunConfig,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg.parse::<T>(key)?.unwrap_or(default))
}
