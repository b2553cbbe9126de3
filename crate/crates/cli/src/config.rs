//! Flag / config-file / default resolution with an echo of the result.

use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use anyhow::Result;
use wfm_core::manifest::Manifest;

/// Bad flags or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Resolves each option as flag, else config file, else default, and records
/// every resolved value so the run can be replayed from the echo.
pub struct Resolver {
    file: Manifest,
    resolved: Manifest,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => Manifest::read(p).map_err(|e| usage(format!("cannot read config file: {e}")))?,
            None => Manifest::new(),
        };
        Ok(Self {
            file,
            resolved: Manifest::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config key `{key}` has invalid value `{v}`"))),
            None => Ok(None),
        }
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.resolved.set(key, v);
        }
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.optional(key, flag)?
            .ok_or_else(|| usage(format!("missing required option --{key}")))
    }

    /// Flag, then config file, then `WFM_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var("WFM_SEED") {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| usage(format!("WFM_SEED is not an unsigned integer: `{s}`")))?,
            ),
            Err(_) => None,
        };
        let v = match flag {
            Some(v) => v,
            None => self.from_file("seed")?.or(env).unwrap_or(0),
        };
        self.resolved.set("seed", v);
        Ok(v)
    }

    /// Writes `config.txt` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.resolved.write(&dir.join("config.txt"))?;
        Ok(())
    }
}
