//! Layered TOML configuration.
//!
//! A config file may name a parent with `extends = "other.toml"` (resolved
//! relative to the file). Several `--config` files merge left to right; later
//! tables override earlier keys recursively.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::CliError;

pub const SEED_ENV: &str = "CELLREFINE_SEED";
const EXTENDS: &str = "extends";

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn load_file(path: &Path, chain: &mut Vec<PathBuf>) -> anyhow::Result<Table> {
    if !path.exists() {
        bail!("config not found: {}", path.display());
    }
    let canonical = path.canonicalize()?;
    if chain.contains(&canonical) {
        bail!("config `extends` cycle at {}", path.display());
    }
    chain.push(canonical);
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let out = match table.remove(EXTENDS) {
        Some(Value::String(parent)) => {
            let parent = path.parent().unwrap_or(Path::new(".")).join(parent);
            let mut base = load_file(&parent, chain)?;
            merge(&mut base, table);
            base
        }
        Some(_) => bail!("{}: `extends` must be a string", path.display()),
        None => table,
    };
    chain.pop();
    Ok(out)
}

/// A merged config table.
pub struct Layered {
    pub table: Table,
}

impl Layered {
    pub fn load(paths: &[PathBuf]) -> Result<Self, CliError> {
        let mut table = Table::new();
        for p in paths {
            merge(&mut table, load_file(p, &mut Vec::new()).map_err(CliError::Usage)?);
        }
        Ok(Self { table })
    }

    /// Fills `seed` from the environment when no file sets it.
    pub fn resolve_seed(&mut self) -> Result<(), CliError> {
        if self.table.contains_key("seed") {
            return Ok(());
        }
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: i64 = raw
                .trim()
                .parse()
                .ok()
                .filter(|s| *s >= 0)
                .ok_or_else(|| CliError::Usage(anyhow::anyhow!("{SEED_ENV} must be a non-negative integer")))?;
            self.table.insert("seed".into(), Value::Integer(seed));
        }
        Ok(())
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        T::deserialize(Value::Table(self.table.clone()))
            .map_err(|e| CliError::Usage(anyhow::anyhow!("invalid config: {e}")))
    }
}

/// Seed from the environment, or 0.
pub fn env_seed() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(anyhow::anyhow!("{SEED_ENV} must be a non-negative integer"))),
        Err(_) => Ok(0),
    }
}
