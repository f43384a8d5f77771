//! Configuration grids, the per-report pipeline, durable result stores and
//! aggregation of sweep results.

mod aggregate;
mod run;
mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Report;
use crate::lm_client::LmError;
use crate::metrics::MetricsError;
use crate::postprocess::ParsedLabel;
use crate::prompting::{PromptError, PromptStrategy};
use crate::retrieval::{RetrievalError, RetrievalSettings};

pub use aggregate::{
    aggregate, write_csv, Aggregate, AxisComparison, ComparisonOutcome, ConfigResult, Correlation,
    PairDelta,
};
pub use run::{run_sweep, Pipeline, SweepOptions, SweepProgress, SweepSummary};
pub use store::{load_records, ResultStore};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("sample of {n} requested from {available} reports")]
    SampleTooLarge { n: usize, available: usize },
    #[error("{}:{line}: corrupt result store: {message}", path.display())]
    StoreCorrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] LmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{} (report, config) pairs missing from the store, first {:?}", .0.len(), .0.first())]
    MissingRecords(Vec<(String, String)>),
    #[error("no gold label for report {0}")]
    MissingGold(String),
    #[error("axis {axis} does not take exactly two values (found {found})")]
    NotBinary { axis: String, found: usize },
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

impl SweepError {
    /// True for errors caused by the model server rather than by inputs.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            SweepError::Backend(_)
                | SweepError::Retrieval(RetrievalError::Embedding(_))
                | SweepError::Retrieval(RetrievalError::Rerank { .. })
        )
    }
}

/// One point in configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model_name: String,
    /// Parameter count in billions.
    pub param_count_b: f64,
    pub quant_bits: u8,
    pub prompt: PromptStrategy,
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub json_mode: bool,
    pub retrieval: RetrievalSettings,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model_name: "mock".into(),
            param_count_b: 8.0,
            quant_bits: 4,
            prompt: PromptStrategy::default(),
            temperature: 0.0,
            top_k: 40,
            top_p: 0.9,
            json_mode: true,
            retrieval: RetrievalSettings::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::InvalidConfig(m));
        if self.model_name.trim().is_empty() {
            return bad("model_name is empty".into());
        }
        if !(self.param_count_b > 0.0 && self.param_count_b.is_finite()) {
            return bad(format!(
                "param_count_b must be positive, got {}",
                self.param_count_b
            ));
        }
        if !(3..=16).contains(&self.quant_bits) {
            return bad(format!(
                "quant_bits must be in 3..=16, got {}",
                self.quant_bits
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        if self.top_k < 1 {
            return bad("top_k must be >= 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        self.retrieval
            .validate()
            .map_err(|e| SweepError::InvalidConfig(e.to_string()))
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .expect("config serializes")
            .to_string()
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Generation seed for one report, independent of execution order.
    pub fn record_seed(&self, report_id: &str) -> u64 {
        crate::stable_hash64(&[&self.seed.to_le_bytes(), report_id.as_bytes()])
    }

    /// Value of a dotted field path such as `retrieval.mode`.
    pub fn field(&self, path: &str) -> Option<Value> {
        let v = serde_json::to_value(self).expect("config serializes");
        lookup(&v, path).cloned()
    }

    /// Copy with one dotted field replaced.
    pub fn with_field(&self, path: &str, value: &Value) -> Result<Self, SweepError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut v;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| SweepError::InvalidGrid(format!("unknown axis {path:?}")))?;
        }
        *slot = value.clone();
        let cfg: PipelineConfig = serde_json::from_value(v)
            .map_err(|e| SweepError::InvalidGrid(format!("axis {path} value {value}: {e}")))?;
        cfg.validate()
            .map_err(|e| SweepError::InvalidGrid(format!("axis {path} value {value}: {e}")))?;
        Ok(cfg)
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.')
        .try_fold(v, |node, part| node.as_object()?.get(part))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n: usize,
    pub seed: u64,
}

/// A base configuration and the axes varied around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub base: PipelineConfig,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSpec>,
}

impl SweepGrid {
    pub fn from_json(json: &str) -> Result<Self, SweepError> {
        serde_json::from_str(json).map_err(|e| SweepError::InvalidGrid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let text = std::fs::read_to_string(path).map_err(|source| SweepError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Number of configurations, without building them.
    pub fn size(&self) -> usize {
        self.axes.values().map(Vec::len).product()
    }

    /// Cartesian product of the axes applied to the base. Axes vary in name
    /// order with the last axis fastest; values keep their listed order.
    pub fn enumerate_configs(&self) -> Result<Vec<PipelineConfig>, SweepError> {
        self.base.validate()?;
        for (name, values) in &self.axes {
            if values.is_empty() {
                return Err(SweepError::InvalidGrid(format!(
                    "axis {name} has no values"
                )));
            }
            if self.base.field(name).is_none() {
                return Err(SweepError::InvalidGrid(format!("unknown axis {name:?}")));
            }
        }
        let mut configs = vec![self.base.clone()];
        for (name, values) in &self.axes {
            let mut next = Vec::with_capacity(configs.len() * values.len());
            for cfg in &configs {
                for v in values {
                    next.push(cfg.with_field(name, v)?);
                }
            }
            configs = next;
        }
        let mut seen = std::collections::HashSet::new();
        for c in &configs {
            if !seen.insert(c.config_hash()) {
                return Err(SweepError::InvalidGrid(format!(
                    "duplicate configuration {}",
                    c.canonical_json()
                )));
            }
        }
        Ok(configs)
    }
}

/// Uniform sample without replacement, in a seed-determined order.
pub fn sample_reports(reports: &[Report], n: usize, seed: u64) -> Result<Vec<Report>, SweepError> {
    if n > reports.len() {
        return Err(SweepError::SampleTooLarge {
            n,
            available: reports.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, reports.len(), n)
        .into_iter()
        .map(|i| reports[i].clone())
        .collect())
}

/// One model call's outcome, as persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub report_id: String,
    pub config_hash: String,
    pub raw_output: String,
    pub parsed: ParsedLabel,
    pub rag_used: bool,
    pub rerank_score: Option<f64>,
    pub latency_ms: f64,
    /// Milliseconds since the Unix epoch; 0 when timing is disabled.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ExtractionRecord {
    pub fn key(&self) -> (String, String) {
        (self.report_id.clone(), self.config_hash.clone())
    }

    /// Copy with the wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            latency_ms: 0.0,
            timestamp: 0,
            ..self.clone()
        }
    }
}
