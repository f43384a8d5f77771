use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ExtractionRecord, PipelineConfig, SweepError};
use crate::corpus::{LabelSchema, Report};
use crate::metrics::stats::{mean, variance};
use crate::metrics::{
    compute_metrics, confusion, paired_t, spearman, MetricsReport, StatTestResult, StatsError,
    TABLE_COLUMNS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub metrics: MetricsReport,
}

/// Two configurations that differ only in the compared axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub model_name: String,
    pub first_hash: String,
    pub second_hash: String,
    pub first_accuracy: f64,
    pub second_accuracy: f64,
    /// second minus first.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComparisonOutcome {
    PairedT {
        result: StatTestResult,
    },
    /// Every delta is exactly zero.
    NoDifference,
    /// Fewer than two pairs.
    InsufficientPairs,
    /// The test is undefined, e.g. a constant nonzero delta.
    Undefined {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisComparison {
    pub axis: String,
    pub first: Value,
    pub second: Value,
    pub pairs: Vec<PairDelta>,
    pub mean_delta: Option<f64>,
    pub sd_delta: Option<f64>,
    pub outcome: ComparisonOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: String,
    pub against: String,
    pub result: Option<StatTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub configs: Vec<ConfigResult>,
    pub comparisons: Vec<AxisComparison>,
    pub correlations: Vec<Correlation>,
}

impl Aggregate {
    /// Configurations by accuracy, then macro F1, both descending; ties
    /// keep hash order.
    pub fn ranked(&self) -> Vec<&ConfigResult> {
        let mut out: Vec<&ConfigResult> = self.configs.iter().collect();
        out.sort_by(|a, b| {
            b.metrics
                .accuracy
                .total_cmp(&a.metrics.accuracy)
                .then(b.metrics.macro_f1.total_cmp(&a.metrics.macro_f1))
                .then(a.config_hash.cmp(&b.config_hash))
        });
        out
    }

    /// Comparisons and correlations as one JSON object.
    pub fn comparisons_json(&self) -> Value {
        serde_json::json!({
            "comparisons": self.comparisons,
            "correlations": self.correlations,
        })
    }
}

/// Per-configuration metrics, binary-axis comparisons and rank
/// correlations against model size and quantization.
///
/// Every (report, config) pair must be present in `records`.
pub fn aggregate(
    records: &[ExtractionRecord],
    configs: &[PipelineConfig],
    reports: &[Report],
    gold: &HashMap<String, String>,
    schema: &LabelSchema,
    compare_axes: &[String],
) -> Result<Aggregate, SweepError> {
    let by_key: HashMap<(&str, &str), &ExtractionRecord> = records
        .iter()
        .map(|r| ((r.report_id.as_str(), r.config_hash.as_str()), r))
        .collect();
    let hashes: Vec<String> = configs.iter().map(PipelineConfig::config_hash).collect();

    let mut missing = Vec::new();
    for h in &hashes {
        for r in reports {
            if !by_key.contains_key(&(r.id.as_str(), h.as_str())) {
                missing.push((r.id.clone(), h.clone()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(SweepError::MissingRecords(missing));
    }
    let gold_labels: Vec<String> = reports
        .iter()
        .map(|r| {
            gold.get(&r.id)
                .cloned()
                .ok_or_else(|| SweepError::MissingGold(r.id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut results = Vec::with_capacity(configs.len());
    for (config, hash) in configs.iter().zip(&hashes) {
        let preds: Vec<_> = reports
            .iter()
            .map(|r| by_key[&(r.id.as_str(), hash.as_str())].parsed.clone())
            .collect();
        let cm = confusion(&preds, &gold_labels, schema)?;
        results.push(ConfigResult {
            config_hash: hash.clone(),
            config: config.clone(),
            metrics: compute_metrics(&cm)?,
        });
    }

    let comparisons = compare_axes
        .iter()
        .map(|axis| compare_axis(&results, axis))
        .collect::<Result<Vec<_>, _>>()?;
    let correlations = correlations(&results);
    Ok(Aggregate {
        configs: results,
        comparisons,
        correlations,
    })
}

fn compare_axis(results: &[ConfigResult], axis: &str) -> Result<AxisComparison, SweepError> {
    let mut values: Vec<Value> = Vec::new();
    // rest-of-config key -> (value index -> result index)
    let mut groups: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut group_order = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let value = r
            .config
            .field(axis)
            .ok_or_else(|| SweepError::InvalidGrid(format!("unknown axis {axis:?}")))?;
        let vi = match values.iter().position(|v| *v == value) {
            Some(vi) => vi,
            None => {
                values.push(value);
                values.len() - 1
            }
        };
        let mut rest = serde_json::to_value(&r.config).expect("config serializes");
        let mut slot = &mut rest;
        for part in axis.split('.') {
            slot = slot.get_mut(part).expect("field exists");
        }
        *slot = Value::Null;
        let key = rest.to_string();
        if !groups.contains_key(&key) {
            group_order.push(key.clone());
        }
        groups.entry(key).or_default().insert(vi, i);
    }
    if values.len() != 2 {
        return Err(SweepError::NotBinary {
            axis: axis.to_string(),
            found: values.len(),
        });
    }

    let mut pairs = Vec::new();
    for key in &group_order {
        let g = &groups[key];
        if let (Some(&a), Some(&b)) = (g.get(&0), g.get(&1)) {
            let (ra, rb) = (&results[a], &results[b]);
            pairs.push(PairDelta {
                model_name: ra.config.model_name.clone(),
                first_hash: ra.config_hash.clone(),
                second_hash: rb.config_hash.clone(),
                first_accuracy: ra.metrics.accuracy,
                second_accuracy: rb.metrics.accuracy,
                delta: rb.metrics.accuracy - ra.metrics.accuracy,
            });
        }
    }

    let deltas: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
    let mean_delta = (!deltas.is_empty()).then(|| mean(&deltas));
    let sd_delta = (deltas.len() >= 2).then(|| variance(&deltas).sqrt());
    let outcome = if !deltas.is_empty() && deltas.iter().all(|d| *d == 0.0) {
        ComparisonOutcome::NoDifference
    } else if deltas.len() < 2 {
        ComparisonOutcome::InsufficientPairs
    } else {
        let second: Vec<f64> = pairs.iter().map(|p| p.second_accuracy).collect();
        let first: Vec<f64> = pairs.iter().map(|p| p.first_accuracy).collect();
        match paired_t(&second, &first) {
            Ok(result) => ComparisonOutcome::PairedT { result },
            Err(e) => ComparisonOutcome::Undefined {
                reason: e.to_string(),
            },
        }
    };
    let mut values = values.into_iter();
    Ok(AxisComparison {
        axis: axis.to_string(),
        first: values.next().expect("two values"),
        second: values.next().expect("two values"),
        pairs,
        mean_delta,
        sd_delta,
        outcome,
    })
}

fn correlations(results: &[ConfigResult]) -> Vec<Correlation> {
    let metric_values = |f: fn(&MetricsReport) -> f64| -> Vec<f64> {
        results.iter().map(|r| f(&r.metrics)).collect()
    };
    let metrics: [(&str, Vec<f64>); 2] = [
        ("accuracy", metric_values(|m| m.accuracy)),
        ("macro_f1", metric_values(|m| m.macro_f1)),
    ];
    let covariates: [(&str, Vec<f64>); 2] = [
        (
            "ln_param_count_b",
            results
                .iter()
                .map(|r| r.config.param_count_b.ln())
                .collect(),
        ),
        (
            "quant_bits",
            results
                .iter()
                .map(|r| f64::from(r.config.quant_bits))
                .collect(),
        ),
    ];
    let mut out = Vec::new();
    for (metric, y) in &metrics {
        for (against, x) in &covariates {
            let (result, note) = match spearman(x, y) {
                Ok(r) => (Some(r), None),
                Err(StatsError::ConstantInput) => (None, Some("constant input".to_string())),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(Correlation {
                metric: metric.to_string(),
                against: against.to_string(),
                result,
                note,
            });
        }
    }
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let name = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&name, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Ranked table: hash, the seven metric columns, n, invalid count, then
/// every configuration field as a dotted column.
pub fn write_csv(agg: &Aggregate, out: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let ranked = agg.ranked();
    let config_columns = |r: &ConfigResult| {
        let mut cols = Vec::new();
        flatten(
            "",
            &serde_json::to_value(&r.config).expect("config serializes"),
            &mut cols,
        );
        cols
    };
    let mut header = vec!["config_hash".to_string()];
    header.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
    header.push("n".into());
    header.push("invalid".into());
    if let Some(first) = ranked.first() {
        header.extend(config_columns(first).into_iter().map(|(k, _)| k));
    }
    w.write_record(&header)?;
    for r in ranked {
        let mut row = vec![r.config_hash.clone()];
        row.extend(r.metrics.table_row().iter().map(|x| x.to_string()));
        row.push(r.metrics.n.to_string());
        row.push(r.metrics.invalid.to_string());
        row.extend(config_columns(r).into_iter().map(|(_, v)| v));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
