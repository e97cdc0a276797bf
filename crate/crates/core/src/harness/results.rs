//! Results document persisted as JSON (`ldu-results/v1`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{LduError, Result};
use crate::measure::{CountsTable, Outcome};
use crate::noise::NoiseModel;
use crate::stats::{FitResult, IntervalEstimate, ScanData};

pub const RESULTS_SCHEMA: &str = "ldu-results/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<String>,
}

impl Metric {
    pub fn plain(name: &str, value: f64) -> Metric {
        Metric { name: name.into(), value, lo: None, hi: None, method: None }
    }

    pub fn interval(name: &str, e: &IntervalEstimate) -> Metric {
        Metric { name: name.into(), value: e.value, lo: Some(e.lo), hi: Some(e.hi), method: Some(e.method.clone()) }
    }
}

/// Exact joint-outcome probabilities, the density-engine counterpart of a
/// counts table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub data: Outcome,
    pub ancilla: Outcome,
    pub interpretation: String,
    pub probability: f64,
}

/// One row of the present/absent logic table: data detected or not, against
/// the ancilla readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicRow {
    pub data_detected: bool,
    pub ancilla: Outcome,
    pub interpretation: String,
    /// Shot count; absent for exact probabilities.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shots: Option<u64>,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub engine: String,
    pub postselection: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub counts: Option<CountsTable>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub probabilities: Vec<ProbabilityRow>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub logic_table: Vec<LogicRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scan: Option<ScanData>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub fits: BTreeMap<String, FitResult>,
    pub metrics: Vec<Metric>,
}

impl Section {
    pub fn new(name: &str, engine: &str, postselection: &str) -> Section {
        Section {
            name: name.into(),
            engine: engine.into(),
            postselection: postselection.into(),
            counts: None,
            probabilities: Vec::new(),
            logic_table: Vec::new(),
            scan: None,
            fits: BTreeMap::new(),
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, m: Metric) {
        self.metrics.push(m);
    }

    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Agreement of one circuit setting between the two engines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub shots: u64,
    pub max_z: f64,
    pub worst_record: Option<String>,
    pub within_4_sigma: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub scenario: String,
    pub shots: u64,
    pub seed: u64,
    pub engine: String,
    pub profile: String,
    pub overrides: BTreeMap<String, f64>,
    pub noise: NoiseModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub schema: String,
    pub library_version: String,
    pub config: ConfigEcho,
    pub seed: u64,
    pub sections: Vec<Section>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub comparisons: Vec<ComparisonEntry>,
    pub wall_clock_seconds: f64,
}

impl ResultsDocument {
    pub fn new(cfg: &RunConfig, shots: u64, noise: NoiseModel) -> ResultsDocument {
        ResultsDocument {
            schema: RESULTS_SCHEMA.into(),
            library_version: env!("CARGO_PKG_VERSION").into(),
            config: ConfigEcho {
                scenario: cfg.scenario.clone(),
                shots,
                seed: cfg.seed,
                engine: cfg.engine.label().into(),
                profile: cfg.profile.label().into(),
                overrides: cfg.overrides.clone(),
                noise,
            },
            seed: cfg.seed,
            sections: Vec::new(),
            comparisons: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn section(&self, name: &str, engine: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name && s.engine == engine)
    }

    /// Looks up `section.metric` for an engine, failing with a readable message.
    pub fn metric(&self, section: &str, engine: &str, name: &str) -> Result<&Metric> {
        self.section(section, engine)
            .and_then(|s| s.metric(name))
            .ok_or_else(|| LduError::InvalidParameter(format!("no metric {section}/{name} for engine {engine}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ResultsDocument> {
        let doc: ResultsDocument = serde_json::from_str(text)?;
        if doc.schema != RESULTS_SCHEMA {
            return Err(LduError::Config(format!("unsupported results schema `{}`", doc.schema)));
        }
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// The document with the wall-clock field zeroed, for reproducibility
    /// comparisons.
    pub fn without_timing(&self) -> ResultsDocument {
        ResultsDocument { wall_clock_seconds: 0.0, ..self.clone() }
    }
}
