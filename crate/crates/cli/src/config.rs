//! TOML configuration files for the three verbs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hdgc::simulate::ScenarioConfig;
use hdgc::{FitConfig, Metric};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Directory that relative paths inside `config` are resolved against.
pub fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub scenario: ScenarioConfig,
    /// Also write every replicate in the ingestion format.
    #[serde(default)]
    pub write_datasets: bool,
    #[serde(default)]
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodRule {
    /// Meteorological seasons (DJF, MAM, JJA, SON).
    #[default]
    Seasonal,
    /// The whole series as one period.
    Whole,
}

fn default_threshold() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stations: PathBuf,
    pub observations: PathBuf,
    /// Covariate columns to use, in order; all non-key columns when absent.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Hour lag applied to a covariate column before standardization.
    #[serde(default)]
    pub lags: BTreeMap<String, usize>,
    #[serde(default)]
    pub periods: PeriodRule,
    /// Stations whose missing fraction in a period exceeds this are excluded.
    #[serde(default = "default_threshold")]
    pub missing_threshold: f64,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default = "yes")]
    pub standard_errors: bool,
    #[serde(default)]
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn check(&self) -> CliResult<()> {
        if !(0.0..=1.0).contains(&self.missing_threshold) {
            return Err(CliError::Usage(format!("missing_threshold {} outside [0, 1]", self.missing_threshold)));
        }
        self.fit.check().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn resolve(&mut self, base: &Path) {
        self.stations = base.join(&self.stations);
        self.observations = base.join(&self.observations);
    }
}

fn default_k() -> usize {
    2
}

fn default_z() -> f64 {
    hdgc::detect::DEFAULT_Z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    /// Directory written by `fit`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_z")]
    pub z: f64,
    /// Site pairs for band comparisons.
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { input: None, k: default_k(), z: default_z(), pairs: Vec::new() }
    }
}
