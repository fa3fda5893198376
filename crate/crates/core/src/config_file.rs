//! TOML system configuration files.
//!
//! Keys are flat. `lambda` and `buffers` take a scalar (same for every
//! station, requires `stations`) or a list; `p_good` takes a scalar, a
//! per-destination list, or a full matrix. Unknown keys are rejected.
//!
//! ```toml
//! stations = 3
//! lambda = [0.3, 0.2, 0.1]
//! buffers = 5
//! service_rate = 0.3333333333333333
//! travel_good_mean = 2.0
//! travel_good_sd = 0.1
//! travel_bad_mean = 6.0
//! travel_bad_sd = 0.1
//! p_good = [0.9, 0.9, 0.1]
//! reward = 6.0
//! alpha = 1.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{SystemConfig, TravelLaw, DEFAULT_DELTA, DEFAULT_GAMMA};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStation<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerStation<T> {
    fn expand(&self, key: &str, stations: Option<usize>) -> Result<Vec<T>> {
        match (self, stations) {
            (PerStation::Each(v), Some(m)) if v.len() != m => Err(Error::ConfigFile(format!(
                "`{key}` has {} entries but `stations` is {m}",
                v.len()
            ))),
            (PerStation::Each(v), _) => Ok(v.clone()),
            (PerStation::All(x), Some(m)) => Ok(vec![x.clone(); m]),
            (PerStation::All(_), None) => Err(Error::ConfigFile(format!(
                "`{key}` is a scalar, so `stations` must be given"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RouteProbabilities {
    Uniform(f64),
    PerDestination(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl RouteProbabilities {
    pub fn expand(&self, m: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            RouteProbabilities::Uniform(p) => Ok(SystemConfig::destination_matrix(&vec![*p; m])),
            RouteProbabilities::PerDestination(v) if v.len() == m => Ok(SystemConfig::destination_matrix(v)),
            RouteProbabilities::Matrix(rows) if rows.len() == m && rows.iter().all(|r| r.len() == m) => {
                Ok(rows.clone())
            }
            _ => Err(Error::ConfigFile(format!(
                "`p_good` must be a scalar, a list of {m} values, or a {m}x{m} matrix"
            ))),
        }
    }
}

/// On-disk form of [`SystemConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub stations: Option<usize>,
    pub lambda: PerStation<f64>,
    pub buffers: PerStation<u32>,
    pub service_rate: f64,
    pub travel_good_mean: f64,
    pub travel_good_sd: f64,
    pub travel_bad_mean: f64,
    pub travel_bad_sd: f64,
    pub p_good: RouteProbabilities,
    pub reward: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_seed() -> u64 {
    1
}

impl ConfigFile {
    pub fn into_config(self) -> Result<SystemConfig> {
        let lambda = self.lambda.expand("lambda", self.stations)?;
        let m = lambda.len();
        let buffers = self.buffers.expand("buffers", Some(m))?;
        Ok(SystemConfig {
            p_good: self.p_good.expand(m)?,
            lambda,
            buffers,
            service_rate: self.service_rate,
            travel_good: TravelLaw::new(self.travel_good_mean, self.travel_good_sd),
            travel_bad: TravelLaw::new(self.travel_bad_mean, self.travel_bad_sd),
            reward: self.reward,
            alpha: self.alpha,
            delta: self.delta,
            gamma: self.gamma,
            seed: self.seed,
        })
    }

    pub fn from_config(c: &SystemConfig) -> Self {
        Self {
            stations: Some(c.stations()),
            lambda: PerStation::Each(c.lambda.clone()),
            buffers: PerStation::Each(c.buffers.clone()),
            service_rate: c.service_rate,
            travel_good_mean: c.travel_good.mean,
            travel_good_sd: c.travel_good.sd,
            travel_bad_mean: c.travel_bad.mean,
            travel_bad_sd: c.travel_bad.sd,
            p_good: RouteProbabilities::Matrix(c.p_good.clone()),
            reward: c.reward,
            alpha: c.alpha,
            delta: c.delta,
            gamma: c.gamma,
            seed: c.seed,
        }
    }
}

pub fn parse_config(text: &str) -> Result<SystemConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::ConfigFile(e.to_string()))?;
    file.into_config()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigFile(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn to_toml(config: &SystemConfig) -> Result<String> {
    toml::to_string(&ConfigFile::from_config(config)).map_err(|e| Error::ConfigFile(e.to_string()))
}
