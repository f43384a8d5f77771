//! Report data model, text normalization, the synthetic corpus generator and
//! JSON Lines persistence.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate report id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid label schema: {0}")]
    InvalidSchema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Radiology,
    Pathology,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Radiology => "radiology",
            Task::Pathology => "pathology",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Task::Radiology => "RAD",
            Task::Pathology => "PATH",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "radiology" => Ok(Task::Radiology),
            "pathology" => Ok(Task::Pathology),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// A free-text report. The text is always stored normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub id: String,
    pub task: Task,
    pub text: String,
    pub word_count: usize,
}

impl Report {
    pub fn new(id: impl Into<String>, task: Task, raw_text: &str) -> Self {
        let text = normalize_text(raw_text);
        let word_count = text.split_whitespace().count();
        Self {
            id: id.into(),
            task,
            text,
            word_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub report_id: String,
    pub label: String,
}

/// The closed answer set for one extraction task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task: Task,
    pub valid_labels: Vec<String>,
    pub nr_label: String,
    pub answer_key: String,
    pub retrieval_keywords: String,
}

impl LabelSchema {
    /// BT-RADS follow-up score.
    pub fn radiology() -> Self {
        let labels = [
            "0", "1", "1a", "1b", "2", "2a", "2b", "3", "3a", "3b", "3c", "4", "NR",
        ];
        Self {
            task: Task::Radiology,
            valid_labels: labels.iter().map(|s| s.to_string()).collect(),
            nr_label: "NR".into(),
            answer_key: "score".into(),
            retrieval_keywords: "follow-up score".into(),
        }
    }

    /// IDH mutation status.
    pub fn pathology() -> Self {
        Self {
            task: Task::Pathology,
            valid_labels: vec!["positive".into(), "negative".into(), "NR".into()],
            nr_label: "NR".into(),
            answer_key: "idh_status".into(),
            retrieval_keywords: "IDH IDH1 IDH2 IDH1/IDH2 detected positive negative".into(),
        }
    }

    pub fn builtin(task: Task) -> Self {
        match task {
            Task::Radiology => Self::radiology(),
            Task::Pathology => Self::pathology(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.answer_key.trim().is_empty() {
            return Err(CorpusError::InvalidSchema("answer_key is empty".into()));
        }
        if !self.valid_labels.contains(&self.nr_label) {
            return Err(CorpusError::InvalidSchema(format!(
                "nr_label {:?} is not among valid_labels",
                self.nr_label
            )));
        }
        let mut seen = HashSet::new();
        for label in &self.valid_labels {
            let folded = label.trim().to_lowercase();
            if folded.is_empty() {
                return Err(CorpusError::InvalidSchema("empty label".into()));
            }
            if !seen.insert(folded) {
                return Err(CorpusError::InvalidSchema(format!(
                    "label {label:?} duplicates another label after case-folding"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.valid_labels.iter().any(|l| l == label)
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let schema: Self =
            serde_json::from_str(json).map_err(|e| CorpusError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let json = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&json)
    }
}

fn is_newline(c: char) -> bool {
    matches!(
        c,
        '\n' | '\r' | '\u{0B}' | '\u{0C}' | '\u{85}' | '\u{2028}' | '\u{2029}'
    )
}

/// Collapses a report into a single newline-free paragraph.
///
/// Every newline becomes a space. When the line ended in a period this keeps
/// the sentence break readable ("stable.\nNo" -> "stable. No"); otherwise it
/// joins the wrapped line. Runs of spaces collapse to one and the ends are
/// trimmed. Tabs and other control characters are left alone.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        if c == ' ' || is_newline(c) {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    out
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub task: Task,
    pub n_reports: usize,
    pub class_distribution: BTreeMap<String, f64>,
    pub length_mean_words: f64,
    pub length_sd_words: f64,
    pub distractor_rate: f64,
    pub seed: u64,
}

/// Reference-standard class counts of the two clinical datasets.
const RADIOLOGY_COUNTS: [(&str, u32); 12] = [
    ("1", 5),
    ("1a", 204),
    ("1b", 124),
    ("2", 856),
    ("2a", 112),
    ("2b", 10),
    ("3", 88),
    ("3a", 47),
    ("3b", 292),
    ("3c", 386),
    ("4", 373),
    ("NR", 4797),
];
const PATHOLOGY_COUNTS: [(&str, u32); 3] = [("positive", 154), ("negative", 1559), ("NR", 441)];

impl CorpusSpec {
    /// Class proportions, report lengths and distractor rate that mirror the
    /// clinical datasets. Proportions come from the raw counts so they sum to
    /// one exactly.
    pub fn reference(task: Task, n_reports: usize, seed: u64) -> Self {
        let counts: &[(&str, u32)] = match task {
            Task::Radiology => &RADIOLOGY_COUNTS,
            Task::Pathology => &PATHOLOGY_COUNTS,
        };
        let total: u32 = counts.iter().map(|(_, c)| c).sum();
        let class_distribution = counts
            .iter()
            .map(|(l, c)| (l.to_string(), f64::from(*c) / f64::from(total)))
            .collect();
        let (length_mean_words, length_sd_words, distractor_rate) = match task {
            Task::Radiology => (265.0, 66.0, 0.1),
            Task::Pathology => (2504.0, 2563.0, 0.5),
        };
        Self {
            task,
            n_reports,
            class_distribution,
            length_mean_words,
            length_sd_words,
            distractor_rate,
            seed,
        }
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<(), CorpusError> {
        if self.n_reports == 0 {
            return Err(CorpusError::InvalidSpec(
                "n_reports must be at least 1".into(),
            ));
        }
        if schema.task != self.task {
            return Err(CorpusError::InvalidSpec(format!(
                "schema is for {} but spec is for {}",
                schema.task, self.task
            )));
        }
        for (label, p) in &self.class_distribution {
            if !schema.contains(label) {
                return Err(CorpusError::InvalidSpec(format!(
                    "label {label:?} is not in the {} schema",
                    self.task
                )));
            }
            if !p.is_finite() || *p < 0.0 {
                return Err(CorpusError::InvalidSpec(format!(
                    "probability for {label:?} must be a nonnegative number"
                )));
            }
        }
        let sum: f64 = self.class_distribution.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSpec(format!(
                "class probabilities sum to {sum}, expected 1"
            )));
        }
        if !(self.length_mean_words > 0.0 && self.length_mean_words.is_finite()) {
            return Err(CorpusError::InvalidSpec(
                "length_mean_words must be positive".into(),
            ));
        }
        if !(self.length_sd_words > 0.0 && self.length_sd_words.is_finite()) {
            return Err(CorpusError::InvalidSpec(
                "length_sd_words must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(CorpusError::InvalidSpec(
                "distractor_rate must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Shortest synthetic report, in words.
pub const MIN_REPORT_WORDS: f64 = 30.0;

const RADIOLOGY_FILLER: &[&str] = &[
    "There is a stable postsurgical cavity in the right frontal lobe.",
    "No new areas of abnormal enhancement are identified.",
    "The ventricles and sulci are within normal limits for age.",
    "Mild T2/FLAIR hyperintensity surrounds the resection bed.",
    "There is no midline shift or hydrocephalus.",
    "Diffusion-weighted images show no restricted diffusion.",
    "Perfusion imaging demonstrates no elevated relative cerebral blood volume.",
    "The visualized orbits and paranasal sinuses are unremarkable.",
    "Susceptibility artifact is noted along the craniotomy site.",
    "Comparison is made to the prior examination.",
    "The major intracranial flow voids are preserved.",
    "Postcontrast images demonstrate thin linear enhancement along the surgical margin.",
    "Nonspecific white matter changes are present in the periventricular regions.",
    "The pituitary gland and sella are normal in appearance.",
    "Treatment-related changes are again noted in the left temporal lobe.",
];

const PATHOLOGY_FILLER: &[&str] = &[
    "Sections show a densely cellular infiltrating glial neoplasm.",
    "Mitotic figures are readily identified.",
    "Microvascular proliferation is present.",
    "Areas of palisading necrosis are seen.",
    "The Ki-67 proliferation index is approximately 15 percent.",
    "ATRX nuclear expression is retained.",
    "The p53 immunostain shows patchy nuclear staining.",
    "The specimen is received fresh and labeled with the patient name.",
    "The specimen consists of multiple fragments of tan-pink soft tissue.",
    "The aggregate measures 2.5 x 2.0 x 0.8 cm.",
    "MGMT promoter methylation testing is pending.",
    "The frozen section diagnosis was consistent with glioma.",
    "The tissue is entirely submitted in cassettes A1 through A4.",
    "Codeletion of 1p/19q was not identified by FISH.",
    "Olig2 shows diffuse nuclear staining in tumor cells.",
    "The next-generation sequencing panel covered 500 cancer-related genes.",
    "Tumor cellularity in the submitted sample is estimated at 60 percent.",
    "CDKN2A homozygous deletion was not identified.",
];

const RADIOLOGY_ANSWER: &[&str] = &[
    "BT-RADS follow-up score: {label}.",
    "Follow-up score (BT-RADS): {label}.",
    "Assigned BT-RADS follow-up score is {label}.",
];

const RADIOLOGY_DISTRACTOR: &[&str] = &[
    "The follow-up score from the outside study was not available for review.",
    "A structured follow-up score will be discussed at tumor board.",
];

const PATHOLOGY_POSITIVE: &[&str] = &[
    "IDH1/IDH2 mutation analysis: mutation detected (positive, IDH-mutant).",
    "IDH1 R132H mutation is detected; IDH status is positive (mutant).",
];

const PATHOLOGY_NEGATIVE: &[&str] = &[
    "IDH1/IDH2 mutation analysis: no mutation detected (negative, IDH-wildtype).",
    "IDH1 and IDH2 mutations are not detected; IDH status is negative (wildtype).",
];

const PATHOLOGY_DISTRACTOR: &[&str] = &[
    "IDH sequencing was requested by the treating oncologist.",
    "Prior outside testing for IDH was reviewed at consultation.",
];

fn answer_sentence(task: Task, label: &str, rng: &mut ChaCha8Rng) -> String {
    let templates = match (task, label) {
        (Task::Radiology, _) => RADIOLOGY_ANSWER,
        (Task::Pathology, "positive") => PATHOLOGY_POSITIVE,
        (Task::Pathology, _) => PATHOLOGY_NEGATIVE,
    };
    templates
        .choose(rng)
        .expect("nonempty template table")
        .replace("{label}", label)
}

fn sample_label<'a>(
    schema: &'a LabelSchema,
    distribution: &BTreeMap<String, f64>,
    rng: &mut ChaCha8Rng,
) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for label in &schema.valid_labels {
        let p = distribution.get(label).copied().unwrap_or(0.0);
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(label.as_str());
        if u < acc {
            return label;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    last.expect("distribution has positive mass")
}

fn sample_length(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> usize {
    let normal =
        Normal::new(spec.length_mean_words, spec.length_sd_words).expect("validated parameters");
    for _ in 0..1000 {
        let x = normal.sample(rng);
        if x >= MIN_REPORT_WORDS {
            return x.round() as usize;
        }
    }
    MIN_REPORT_WORDS as usize
}

fn word_len(s: &str) -> usize {
    s.split_whitespace().count()
}

fn compose_report(
    spec: &CorpusSpec,
    schema: &LabelSchema,
    label: &str,
    rng: &mut ChaCha8Rng,
) -> String {
    let target = sample_length(spec, rng);
    let (header, filler, distractors, footer) = match spec.task {
        Task::Radiology => (
            "EXAM: MRI brain with and without contrast\nCLINICAL HISTORY: glioma surveillance\nFINDINGS:\n",
            RADIOLOGY_FILLER,
            RADIOLOGY_DISTRACTOR,
            "IMPRESSION:\n",
        ),
        Task::Pathology => (
            "SURGICAL PATHOLOGY REPORT\nSPECIMEN: brain, resection\nDIAGNOSIS:\n",
            PATHOLOGY_FILLER,
            PATHOLOGY_DISTRACTOR,
            "COMMENT:\n",
        ),
    };

    let mut special = Vec::new();
    if label != schema.nr_label {
        special.push(answer_sentence(spec.task, label, rng));
    }
    if rng.random::<f64>() < spec.distractor_rate {
        special.push(distractors.choose(rng).expect("nonempty").to_string());
    }

    let fixed =
        word_len(header) + word_len(footer) + special.iter().map(|s| word_len(s)).sum::<usize>();
    let mut sentences: Vec<String> = Vec::new();
    let mut words = fixed;
    while words < target {
        let s = filler.choose(rng).expect("nonempty");
        words += word_len(s);
        sentences.push(s.to_string());
    }
    for s in special {
        let at = rng.random_range(0..=sentences.len());
        sentences.insert(at, s);
    }

    // Wrap into short lines the way dictated reports arrive, breaking both
    // after sentences and mid-sentence.
    let mut raw = String::from(header);
    let split = sentences.len() * 3 / 4;
    for (i, s) in sentences.iter().enumerate() {
        if i == split {
            raw.push('\n');
            raw.push_str(footer);
        }
        let wrapped = if rng.random::<f64>() < 0.2 {
            s.replacen(' ', "\n", 1)
        } else {
            s.clone()
        };
        raw.push_str(&wrapped);
        raw.push(if i % 3 == 2 { '\n' } else { ' ' });
    }
    raw
}

/// Draws a labeled synthetic corpus. Deterministic for a given spec.
pub fn generate_synthetic_corpus(
    spec: &CorpusSpec,
) -> Result<(Vec<Report>, Vec<GoldAnnotation>), CorpusError> {
    let schema = LabelSchema::builtin(spec.task);
    spec.validate(&schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut reports = Vec::with_capacity(spec.n_reports);
    let mut gold = Vec::with_capacity(spec.n_reports);
    for i in 0..spec.n_reports {
        let id = format!("{}-{:06}", spec.task.id_prefix(), i + 1);
        let label = sample_label(&schema, &spec.class_distribution, &mut rng).to_string();
        let raw = compose_report(spec, &schema, &label, &mut rng);
        reports.push(Report::new(id.clone(), spec.task, &raw));
        gold.push(GoldAnnotation {
            report_id: id,
            label,
        });
    }
    Ok((reports, gold))
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    task: Task,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Writes one JSON object per report; annotated reports carry `label`.
pub fn save_corpus(
    path: &Path,
    reports: &[Report],
    annotations: &[GoldAnnotation],
) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let labels: BTreeMap<&str, &str> = annotations
        .iter()
        .map(|a| (a.report_id.as_str(), a.label.as_str()))
        .collect();
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in reports {
        let line = CorpusLine {
            id: r.id.clone(),
            task: r.task,
            text: r.text.clone(),
            label: labels.get(r.id.as_str()).map(|s| s.to_string()),
        };
        let json = serde_json::to_string(&line).expect("corpus line serializes");
        writeln!(out, "{json}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn load_corpus(path: &Path) -> Result<(Vec<Report>, Vec<GoldAnnotation>), CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn read_corpus(
    reader: impl BufRead,
) -> Result<(Vec<Report>, Vec<GoldAnnotation>), CorpusError> {
    let mut reports = Vec::new();
    let mut gold = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if !ids.insert(parsed.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: parsed.id,
            });
        }
        if let Some(label) = parsed.label {
            gold.push(GoldAnnotation {
                report_id: parsed.id.clone(),
                label,
            });
        }
        reports.push(Report::new(parsed.id, parsed.task, &parsed.text));
    }
    Ok((reports, gold))
}

/// Label counts in schema order, for summaries.
pub fn class_counts(schema: &LabelSchema, gold: &[GoldAnnotation]) -> Vec<(String, usize)> {
    schema
        .valid_labels
        .iter()
        .map(|l| (l.clone(), gold.iter().filter(|g| &g.label == l).count()))
        .collect()
}
