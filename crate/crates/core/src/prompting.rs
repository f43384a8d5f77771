//! Prompt construction for the simple/complex and few-shot strategies.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{LabelSchema, Task};
use crate::retrieval::RetrievedContext;

/// Every prompt names its report on a line starting with this prefix.
pub const REPORT_ID_PREFIX: &str = "Report ID: ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("few-shot strategy needs at least one negative ({0}) exemplar")]
    MissingNegativeExemplar(String),
    #[error("exemplar answer {0:?} is not a valid label")]
    InvalidExemplar(String),
    #[error("unresolved placeholder {{{0}}} in template {1}")]
    UnresolvedPlaceholder(String, &'static str),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    #[default]
    Simple,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShot {
    #[default]
    None,
    Positive,
    PositiveAndNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub style: PromptStyle,
    pub few_shot: FewShot,
    pub json_instruction: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub snippet: String,
    pub answer: String,
}

/// Prompt templates with `{name}` placeholders.
///
/// Recognized names: `context`, `labels`, `answer_key`, `exemplars`,
/// `report_id`, `target`, `nr_label`, and in the exemplar template
/// `snippet` and `answer`. A brace not followed by a lowercase name and a
/// closing brace is literal text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub simple: String,
    pub complex: String,
    pub json_instruction: String,
    pub exemplar: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            simple: include_str!("../templates/simple.txt").to_string(),
            complex: include_str!("../templates/complex.txt").to_string(),
            json_instruction: include_str!("../templates/json_instruction.txt").to_string(),
            exemplar: include_str!("../templates/exemplar.txt").to_string(),
        }
    }

    /// Reads `simple.txt`, `complex.txt`, `json_instruction.txt` and
    /// `exemplar.txt` from `dir`; missing files keep the built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for (name, slot) in [
            ("simple.txt", &mut set.simple),
            ("complex.txt", &mut set.complex),
            ("json_instruction.txt", &mut set.json_instruction),
            ("exemplar.txt", &mut set.exemplar),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        Ok(set)
    }

    /// Hex SHA-256 over all four templates, for citing in sweep output.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [
            &self.simple,
            &self.complex,
            &self.json_instruction,
            &self.exemplar,
        ] {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn render(
    template: &str,
    name: &'static str,
    values: &HashMap<&str, &str>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .bytes()
            .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
            .count();
        if ident_len > 0 && after.as_bytes().get(ident_len) == Some(&b'}') {
            let key = &after[..ident_len];
            match values.get(key) {
                Some(v) => out.push_str(v),
                None => return Err(PromptError::UnresolvedPlaceholder(key.to_string(), name)),
            }
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Human description of what a task extracts.
pub fn target_description(task: Task) -> &'static str {
    match task {
        Task::Radiology => "BT-RADS follow-up score",
        Task::Pathology => "IDH mutation status",
    }
}

fn answer_json(schema: &LabelSchema, label: &str) -> String {
    let obj = serde_json::json!({ schema.answer_key.as_str(): label }).to_string();
    obj.replacen("\":", "\": ", 1)
}

/// Renders the prompt for one context. Pure: equal inputs give equal output.
pub fn build_prompt(
    context: &RetrievedContext,
    schema: &LabelSchema,
    strategy: PromptStrategy,
    exemplars: &[FewShotExemplar],
    templates: &TemplateSet,
) -> Result<String, PromptError> {
    for e in exemplars {
        if !schema.contains(&e.answer) {
            return Err(PromptError::InvalidExemplar(e.answer.clone()));
        }
    }
    let is_negative = |e: &&FewShotExemplar| e.answer == schema.nr_label;
    let chosen: Vec<&FewShotExemplar> = match strategy.few_shot {
        FewShot::None => Vec::new(),
        FewShot::Positive => exemplars.iter().filter(|e| !is_negative(e)).collect(),
        FewShot::PositiveAndNegative => {
            let negatives: Vec<&FewShotExemplar> = exemplars.iter().filter(is_negative).collect();
            if negatives.is_empty() {
                return Err(PromptError::MissingNegativeExemplar(
                    schema.nr_label.clone(),
                ));
            }
            exemplars
                .iter()
                .filter(|e| !is_negative(e))
                .chain(negatives)
                .collect()
        }
    };

    let mut block = String::new();
    for e in chosen {
        let answer = answer_json(schema, &e.answer);
        let values = HashMap::from([
            ("snippet", e.snippet.as_str()),
            ("answer", answer.as_str()),
            ("answer_key", schema.answer_key.as_str()),
        ]);
        block.push_str(&render(&templates.exemplar, "exemplar", &values)?);
    }

    let labels = schema.valid_labels.join(", ");
    let values = HashMap::from([
        ("context", context.selected_text.as_str()),
        ("labels", labels.as_str()),
        ("answer_key", schema.answer_key.as_str()),
        ("exemplars", block.as_str()),
        ("report_id", context.report_id.as_str()),
        ("target", target_description(schema.task)),
        ("nr_label", schema.nr_label.as_str()),
    ]);
    let (template, name) = match strategy.style {
        PromptStyle::Simple => (&templates.simple, "simple"),
        PromptStyle::Complex => (&templates.complex, "complex"),
    };
    let mut prompt = render(template, name, &values)?;
    if strategy.json_instruction {
        if !prompt.ends_with('\n') {
            prompt.push('\n');
        }
        prompt.push_str(&render(
            &templates.json_instruction,
            "json_instruction",
            &values,
        )?);
    }
    Ok(prompt)
}

/// The report id named by a prompt, if any.
pub fn report_id_in_prompt(prompt: &str) -> Option<&str> {
    let start = prompt.find(REPORT_ID_PREFIX)? + REPORT_ID_PREFIX.len();
    let id = prompt[start..].split_whitespace().next()?;
    Some(id)
}

/// Two positive exemplars with distinct labels and one not-reported
/// exemplar. Snippets are synthetic and never taken from a corpus.
pub fn default_exemplars(schema: &LabelSchema) -> Vec<FewShotExemplar> {
    let table: [(&str, &str); 3] = match schema.task {
        Task::Radiology => [
            (
                "Stable postoperative changes without new enhancement. BT-RADS follow-up score: 1a.",
                "1a",
            ),
            (
                "Enlarging enhancing mass with increased mass effect. BT-RADS follow-up score: 4.",
                "4",
            ),
            (
                "Stable resection cavity in the left frontal lobe. No new enhancing lesion.",
                "",
            ),
        ],
        Task::Pathology => [
            (
                "Molecular studies: IDH1 R132H mutation detected (IDH-mutant).",
                "positive",
            ),
            (
                "IDH1/IDH2 sequencing: no pathogenic variant detected (IDH-wildtype).",
                "negative",
            ),
            (
                "Glioblastoma with necrosis and microvascular proliferation; molecular studies pending.",
                "",
            ),
        ],
    };
    table
        .iter()
        .map(|(snippet, answer)| FewShotExemplar {
            snippet: snippet.to_string(),
            answer: if answer.is_empty() {
                schema.nr_label.clone()
            } else {
                answer.to_string()
            },
        })
        .filter(|e| schema.contains(&e.answer))
        .collect()
}
