//! Run configuration: a JSON file whose values are overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub feeder: Option<PathBuf>,
    pub transformer_map: Option<PathBuf>,
    pub pmu: Option<PathBuf>,
    pub sm: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub moments: Option<PathBuf>,
    pub dispatch: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub mode: Option<String>,
    pub epsilon: Option<f64>,
    pub horizon: Option<usize>,
    pub bins: Option<usize>,
    pub literal_weights: Option<bool>,
    pub samples_per_hour: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub solver_tolerance: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub ro_fraction: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// First of flag, config value; error naming both when neither is given.
pub fn require<T: Clone>(flag: &Option<T>, config: &Option<T>, name: &str) -> Result<T> {
    flag.clone().or_else(|| config.clone()).with_context(|| {
        format!(
            "missing --{name} (or \"{}\" in the config file)",
            name.replace('-', "_")
        )
    })
}

pub fn pick<T: Clone>(flag: &Option<T>, config: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| config.clone()).unwrap_or(default)
}
