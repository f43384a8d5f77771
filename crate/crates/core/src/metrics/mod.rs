//! Confusion matrices, classification metrics and the statistical tests used
//! to compare configurations.

pub mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelSchema;
use crate::postprocess::{ParsedLabel, INVALID_LABEL};

pub use stats::{
    cohens_d, paired_t, spearman, student_t, welch_t, StatTest, StatTestResult, StatsError,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {gold} gold labels")]
    LengthMismatch { preds: usize, gold: usize },
    #[error("gold label {0:?} is not in the schema")]
    UnknownGold(String),
    #[error("no items to score")]
    Empty,
}

/// Counts indexed by (gold, predicted). The last class is the INVALID
/// pseudo-class, which only ever appears as a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn empty(schema: &LabelSchema) -> Self {
        let mut classes = schema.valid_labels.clone();
        classes.push(INVALID_LABEL.to_string());
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    fn invalid_index(&self) -> usize {
        self.classes.len() - 1
    }

    fn index_of(&self, label: &str) -> Option<usize> {
        self.classes[..self.invalid_index()]
            .iter()
            .position(|c| c == label)
    }

    pub fn add(&mut self, pred: &ParsedLabel, gold: &str) -> Result<(), MetricsError> {
        let g = self
            .index_of(gold)
            .ok_or_else(|| MetricsError::UnknownGold(gold.to_string()))?;
        // a valid label outside this matrix cannot occur for parser output,
        // but count it as invalid rather than dropping the item
        let p = match pred {
            ParsedLabel::Valid(l) => self.index_of(l).unwrap_or(self.invalid_index()),
            ParsedLabel::Invalid(_) => self.invalid_index(),
        };
        self.counts[g][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, gold: &str, pred: &str) -> u64 {
        let g = self.classes.iter().position(|c| c == gold);
        let p = self.classes.iter().position(|c| c == pred);
        match (g, p) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }
}

pub fn confusion(
    preds: &[ParsedLabel],
    gold: &[String],
    schema: &LabelSchema,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gold: gold.len(),
        });
    }
    let mut cm = ConfusionMatrix::empty(schema);
    for (p, g) in preds.iter().zip(gold) {
        cm.add(p, g)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub micro_precision: f64,
    pub macro_recall: f64,
    pub micro_recall: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub n: u64,
    pub invalid: u64,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

/// Metric columns in reporting order.
pub const TABLE_COLUMNS: [&str; 7] = [
    "Accuracy",
    "Macro Precision",
    "Micro Precision",
    "Macro Recall",
    "Micro Recall",
    "Macro F1",
    "Micro F1",
];

impl MetricsReport {
    pub fn table_row(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.macro_precision,
            self.micro_precision,
            self.macro_recall,
            self.micro_recall,
            self.macro_f1,
            self.micro_f1,
        ]
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class, macro and micro metrics.
///
/// Macro averages run over gold classes with nonzero support. Invalid
/// outputs count as false negatives for their gold class and, for the micro
/// averages, as wrong predictions, so micro precision, recall and F1 all
/// equal accuracy.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let n = cm.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let k = cm.invalid_index();
    let mut per_class = BTreeMap::new();
    let mut tp_total = 0u64;
    let (mut sum_p, mut sum_r, mut sum_f, mut classes) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let predicted: u64 = (0..k).map(|g| cm.counts[g][c]).sum();
        let support: u64 = cm.counts[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f = f1(precision, recall);
        tp_total += tp;
        if support > 0 {
            sum_p += precision;
            sum_r += recall;
            sum_f += f;
            classes += 1;
        }
        per_class.insert(
            cm.classes[c].clone(),
            ClassMetrics {
                precision,
                recall,
                f1: f,
                support,
            },
        );
    }
    let invalid: u64 = (0..k).map(|g| cm.counts[g][k]).sum();
    let accuracy = ratio(tp_total, n);
    let classes = classes as f64;
    Ok(MetricsReport {
        accuracy,
        macro_precision: sum_p / classes,
        micro_precision: accuracy,
        macro_recall: sum_r / classes,
        micro_recall: accuracy,
        macro_f1: sum_f / classes,
        micro_f1: accuracy,
        n,
        invalid,
        per_class,
    })
}
