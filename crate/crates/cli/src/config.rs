//! Layered configuration: built-in defaults, then the TOML file, then flags.
//!
//! The file mirrors the library types:
//!
//! ```toml
//! seed = 7
//! out = "runs/a"
//!
//! [dataset]
//! count = 40
//! split = [0.5, 0.3, 0.2]
//!
//! [train]
//! variant = "full"
//! iterations = 300
//! class_weight_mode = "uniform"
//! ```
//!
//! `seed` at the top level applies to whichever command runs; a flag wins
//! over both it and the section-level seeds.

use std::fs;
use std::path::{Path, PathBuf};

use mmcd_core::synth::DatasetConfig;
use mmcd_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    dataset: Table,
    train: Table,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let mut section = |name: &str| match root.remove(name) {
            None => Ok(Table::new()),
            Some(Value::Table(t)) => Ok(t),
            Some(_) => Err(format!("[{name}] must be a table")),
        };
        let dataset = section("dataset")?;
        let train = section("train")?;
        let seed = match root.remove("seed") {
            None => None,
            Some(Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(v) => return Err(format!("seed must be a non-negative integer, got {v}")),
        };
        let out = match root.remove("out") {
            None => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(v) => return Err(format!("out must be a string, got {v}")),
        };
        if let Some(key) = root.keys().next() {
            return Err(format!("unknown top-level key {key:?}"));
        }
        Ok(Self { seed, out, dataset, train })
    }

    pub fn dataset(&self) -> Result<DatasetConfig, CliError> {
        let mut c: DatasetConfig = overlay(&DatasetConfig::default(), &self.dataset)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let mut c: TrainConfig = overlay(&TrainConfig::default(), &self.train)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

/// Deserialises `base` with the keys of `patch` merged over it, recursing into tables.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: &Table) -> Result<T, CliError> {
    let mut merged = Table::try_from(base).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut merged, patch);
    merged.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))
}

fn merge(into: &mut Table, patch: &Table) {
    for (k, v) in patch {
        match (into.get_mut(k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}
