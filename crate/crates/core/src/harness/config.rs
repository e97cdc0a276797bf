//! Run configuration: scenario, shots, seed, engine and noise overrides.
//!
//! ```toml
//! schema = "ldu-config/v1"
//! scenario = "table2"
//! shots = 2000
//! seed = 7
//! engine = "both"
//! profile = "calibrated"
//!
//! [noise]
//! f2q = 0.99
//! ```
//!
//! Noise keys override the shipped calibration; the file itself is never
//! modified.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};
use crate::noise::NoiseModel;

pub const CONFIG_SCHEMA: &str = "ldu-config/v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    #[serde(rename = "traj")]
    Trajectory,
    Density,
    #[default]
    Both,
}

impl EngineChoice {
    pub fn label(self) -> &'static str {
        match self {
            EngineChoice::Trajectory => "traj",
            EngineChoice::Density => "density",
            EngineChoice::Both => "both",
        }
    }
}

impl FromStr for EngineChoice {
    type Err = LduError;

    fn from_str(s: &str) -> Result<EngineChoice> {
        match s {
            "traj" | "trajectory" => Ok(EngineChoice::Trajectory),
            "density" => Ok(EngineChoice::Density),
            "both" => Ok(EngineChoice::Both),
            other => Err(LduError::Config(format!("unknown engine `{other}` (traj, density, both)"))),
        }
    }
}

/// Noise model the overrides are applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Calibrated,
    Noiseless,
}

impl Profile {
    pub fn label(self) -> &'static str {
        match self {
            Profile::Calibrated => "calibrated",
            Profile::Noiseless => "noiseless",
        }
    }

    pub fn model(self) -> NoiseModel {
        match self {
            Profile::Calibrated => NoiseModel::calibrated(),
            Profile::Noiseless => NoiseModel::noiseless(),
        }
    }
}

impl FromStr for Profile {
    type Err = LduError;

    fn from_str(s: &str) -> Result<Profile> {
        match s {
            "calibrated" => Ok(Profile::Calibrated),
            "noiseless" => Ok(Profile::Noiseless),
            other => Err(LduError::Config(format!("unknown profile `{other}` (calibrated, noiseless)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: String,
    /// `None` uses the scenario default.
    pub shots: Option<u64>,
    pub seed: u64,
    pub engine: EngineChoice,
    pub profile: Profile,
    pub overrides: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; not part of the results (they do not depend on it).
    #[serde(skip)]
    pub workers: Option<usize>,
    /// Directory for raw shot records, one file per circuit setting.
    #[serde(skip)]
    pub records_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: Option<String>,
    scenario: Option<String>,
    shots: Option<u64>,
    seed: Option<u64>,
    engine: Option<String>,
    profile: Option<String>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    #[serde(default)]
    noise: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn new(scenario: &str) -> RunConfig {
        RunConfig {
            scenario: scenario.into(),
            shots: None,
            seed: 1,
            engine: EngineChoice::Both,
            profile: Profile::Calibrated,
            overrides: BTreeMap::new(),
            out: None,
            workers: None,
            records_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| LduError::Config(e.to_string()))?;
        if let Some(s) = &raw.schema {
            if s != CONFIG_SCHEMA {
                return Err(LduError::Config(format!("unsupported config schema `{s}`")));
            }
        }
        let mut cfg = RunConfig::new(raw.scenario.as_deref().unwrap_or_default());
        cfg.shots = raw.shots;
        cfg.seed = raw.seed.unwrap_or(1);
        if let Some(e) = raw.engine {
            cfg.engine = e.parse()?;
        }
        if let Some(p) = raw.profile {
            cfg.profile = p.parse()?;
        }
        cfg.workers = raw.workers;
        cfg.out = raw.out;
        for (k, v) in raw.noise {
            cfg.set_override(&k, v)?;
        }
        Ok(cfg)
    }

    pub fn set_override(&mut self, key: &str, value: f64) -> Result<()> {
        // validate the key and value against a scratch model
        let mut m = self.profile.model();
        m.set(key, value)?;
        self.overrides.insert(key.into(), value);
        Ok(())
    }

    /// Parses `key=value`.
    pub fn set_override_str(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| LduError::Config(format!("expected key=value, got `{kv}`")))?;
        let v: f64 = v.trim().parse().map_err(|_| LduError::Config(format!("`{v}` is not a number")))?;
        self.set_override(k.trim(), v)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let mut m = self.profile.model();
        for (k, v) in &self.overrides {
            m.set(k, *v)?;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == Some(0) && self.engine != EngineChoice::Density {
            return Err(LduError::Config("trajectory runs need at least one shot".into()));
        }
        if self.workers == Some(0) {
            return Err(LduError::Config("workers must be at least 1".into()));
        }
        self.noise_model().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = RunConfig::from_toml(
            "schema = \"ldu-config/v1\"\nscenario = \"table2\"\nshots = 2000\nseed = 7\nengine = \"both\"\n[noise]\nf2q = 0.99\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario, "table2");
        assert_eq!(cfg.shots, Some(2000));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.noise_model().unwrap().f2q, 0.99);
        assert_eq!(NoiseModel::calibrated().f2q, 0.967);
        let quiet = RunConfig::from_toml("profile = \"noiseless\"\n[noise]\nf2q = 0.9\n").unwrap();
        let m = quiet.noise_model().unwrap();
        assert_eq!(m.f2q, 0.9);
        assert_eq!(m.p_loss_gate, 0.0);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(RunConfig::from_toml("scenario = \"x\"\ncolour = 3\n").is_err());
        assert!(RunConfig::from_toml("[noise]\nwarp = 1.0\n").is_err());
        assert!(RunConfig::from_toml("engine = \"quantum\"\n").is_err());
        assert!(RunConfig::from_toml("schema = \"ldu-config/v9\"\n").is_err());
        assert!(RunConfig::from_toml("profile = \"ideal\"\n").is_err());
        let mut c = RunConfig::new("table2");
        assert!(c.set_override_str("f2q").is_err());
        assert!(c.set_override_str("f2q=1.5").is_err());
        c.shots = Some(0);
        c.engine = EngineChoice::Trajectory;
        assert!(c.validate().is_err());
    }
}
