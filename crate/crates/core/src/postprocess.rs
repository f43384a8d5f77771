//! Recovers a validated label from raw model output.
//!
//! Cleaning, JSON extraction, key lookup, canonicalization and the
//! membership test form a total function: every input string maps to
//! either `Valid(label)` with `label` in the schema or `Invalid(reason)`.

use std::collections::HashMap;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{LabelSchema, Task};

/// Predicted-class name used for invalid outputs in confusion matrices.
pub const INVALID_LABEL: &str = "INVALID";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    NoJson,
    WrongKey,
    NullValue,
    NotInSchema,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedLabel {
    Valid(String),
    Invalid(InvalidReason),
}

impl ParsedLabel {
    /// The label, or [`INVALID_LABEL`].
    pub fn as_prediction(&self) -> &str {
        match self {
            ParsedLabel::Valid(l) => l,
            ParsedLabel::Invalid(_) => INVALID_LABEL,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, ParsedLabel::Valid(_))
    }
}

/// A parse result plus whether the answer came from a field other than the
/// schema's answer key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub label: ParsedLabel,
    pub key_fallback: bool,
}

#[derive(Deserialize)]
struct CanonTable {
    strip_prefixes: Vec<String>,
    aliases: HashMap<String, HashMap<String, String>>,
}

static CANON: LazyLock<CanonTable> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../data/canonicalization.json"))
        .expect("valid canonicalization table")
});

#[derive(Deserialize)]
struct WrapperFile {
    wrappers: Vec<String>,
}

static WRAPPERS: LazyLock<Vec<String>> = LazyLock::new(|| {
    let f: WrapperFile = serde_json::from_str(include_str!("../data/noise_wrappers.json"))
        .expect("valid wrapper file");
    f.wrappers
});

/// Noise wrappers with `<KEY>` and `<LABEL>` placeholders. Each must
/// round-trip every valid label through [`parse_label`].
pub fn noise_wrappers() -> &'static [String] {
    &WRAPPERS
}

pub fn apply_wrapper(wrapper: &str, key: &str, label: &str) -> String {
    wrapper.replace("<KEY>", key).replace("<LABEL>", label)
}

fn is_structural(c: char) -> bool {
    matches!(c, '{' | '}' | '[' | ']' | ':' | ',')
}

/// Turns single quotes that delimit JSON keys or values into double quotes,
/// leaving apostrophes inside words alone.
fn requote(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let neighbor = |from: usize, step: isize| -> Option<char> {
        let mut i = from as isize + step;
        while i >= 0 && (i as usize) < chars.len() {
            let c = chars[i as usize];
            if !c.is_whitespace() {
                return Some(c);
            }
            i += step;
        }
        None
    };
    chars
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == '\'' {
                let before = neighbor(i, -1).is_some_and(|p| matches!(p, '{' | '[' | ':' | ','));
                let after = neighbor(i, 1).is_some_and(is_structural);
                if before || after {
                    return '"';
                }
            }
            c
        })
        .collect()
}

/// Strips code fences, flattens whitespace and normalizes quotes.
pub fn clean_artifacts(raw: &str) -> String {
    let mut s: String = raw
        .chars()
        .map(|c| match c {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2033}' => '"',
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{2032}' => '\'',
            other => other,
        })
        .collect();
    loop {
        let next = s
            .replace("```json", "")
            .replace("```JSON", "")
            .replace("```", "");
        if next == s {
            break;
        }
        s = next;
    }
    let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
    requote(&flat)
}

/// End index (inclusive) of the balanced object starting at `start`.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// The first balanced `{...}` substring that parses as a JSON object.
pub fn extract_json_payload(cleaned: &str) -> Result<&str, InvalidReason> {
    let bytes = cleaned.as_bytes();
    for (start, &b) in bytes.iter().enumerate() {
        if b != b'{' {
            continue;
        }
        if let Some(end) = balanced_end(bytes, start) {
            let candidate = &cleaned[start..=end];
            if serde_json::from_str::<Map<String, Value>>(candidate).is_ok() {
                return Ok(candidate);
            }
        }
    }
    Err(InvalidReason::NoJson)
}

fn trim_punct(s: &str) -> &str {
    s.trim_matches(|c: char| {
        c.is_whitespace()
            || matches!(
                c,
                '"' | '\''
                    | '.'
                    | ','
                    | ';'
                    | ':'
                    | '('
                    | ')'
                    | '['
                    | ']'
                    | '*'
                    | '`'
                    | '!'
                    | '?'
                    | '='
            )
    })
}

/// Maps a free-form answer onto a schema label, if it names one.
pub fn canonicalize(value: &str, schema: &LabelSchema) -> Option<String> {
    let folded = value.to_lowercase();
    let mut s = trim_punct(&folded).to_string();
    for prefix in &CANON.strip_prefixes {
        if let Some(rest) = s.strip_prefix(prefix.as_str()) {
            s = trim_punct(rest).to_string();
            break;
        }
    }
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if s.is_empty() {
        return None;
    }
    if let Some(l) = schema
        .valid_labels
        .iter()
        .find(|l| l.trim().to_lowercase() == s)
    {
        return Some(l.clone());
    }
    let task = match schema.task {
        Task::Radiology => "radiology",
        Task::Pathology => "pathology",
    };
    let alias = CANON.aliases.get(task)?.get(&s)?;
    if alias == "NR" {
        return Some(schema.nr_label.clone());
    }
    schema.contains(alias).then(|| alias.clone())
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(match n.as_f64() {
            Some(f) if n.is_f64() && f.fract() == 0.0 && f.abs() < 1e15 => format!("{}", f as i64),
            _ => n.to_string(),
        }),
        _ => None,
    }
}

fn judge(v: &Value, schema: &LabelSchema) -> ParsedLabel {
    match v {
        Value::Null => ParsedLabel::Invalid(InvalidReason::NullValue),
        other => match value_text(other) {
            Some(t) if trim_punct(&t).is_empty() => ParsedLabel::Invalid(InvalidReason::Empty),
            Some(t) => canonicalize(&t, schema)
                .map(ParsedLabel::Valid)
                .unwrap_or(ParsedLabel::Invalid(InvalidReason::NotInSchema)),
            None => ParsedLabel::Invalid(InvalidReason::NotInSchema),
        },
    }
}

/// Full parse with provenance.
pub fn parse_label_detailed(raw: &str, schema: &LabelSchema) -> ParseOutcome {
    let invalid = |r| ParseOutcome {
        label: ParsedLabel::Invalid(r),
        key_fallback: false,
    };
    let cleaned = clean_artifacts(raw);
    if cleaned.is_empty() {
        return invalid(InvalidReason::Empty);
    }
    let payload = match extract_json_payload(&cleaned) {
        Ok(p) => p,
        Err(r) => return invalid(r),
    };
    let obj: Map<String, Value> = match serde_json::from_str(payload) {
        Ok(o) => o,
        Err(_) => return invalid(InvalidReason::NoJson),
    };

    let key = schema.answer_key.trim();
    let value = obj.get(key).or_else(|| {
        obj.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    });
    if let Some(v) = value {
        return ParseOutcome {
            label: judge(v, schema),
            key_fallback: false,
        };
    }

    // Answer key missing: accept a lone string field that names a label.
    let strings: Vec<&String> = obj
        .values()
        .filter_map(|v| match v {
            Value::String(s) => Some(s),
            _ => None,
        })
        .collect();
    if let [only] = strings.as_slice() {
        if let Some(label) = canonicalize(only, schema) {
            return ParseOutcome {
                label: ParsedLabel::Valid(label),
                key_fallback: true,
            };
        }
    }
    invalid(InvalidReason::WrongKey)
}

pub fn parse_label(raw: &str, schema: &LabelSchema) -> ParsedLabel {
    parse_label_detailed(raw, schema).label
}
