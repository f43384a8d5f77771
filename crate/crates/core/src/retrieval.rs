//! Within-report retrieval: chunking, BM25 and dense scoring, rank fusion,
//! reranking and the relevance-threshold fallback to the full report.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSchema, Report};
use crate::lm_client::LmError;

/// Reciprocal-rank-fusion constant.
pub const RRF_K: f64 = 60.0;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("vector dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("reranker failed on candidate {index}: {source}")]
    Rerank {
        index: usize,
        #[source]
        source: LmError,
    },
    #[error("embedding backend failed: {0}")]
    Embedding(#[source] LmError),
    #[error("embedding backend returned {got} vectors for {expected} texts")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("invalid retrieval settings: {0}")]
    InvalidSettings(String),
}

/// Lowercased alphanumeric tokens. A slash compound such as `IDH1/IDH2`
/// yields each part followed by the compound itself.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split(|c: char| !(c.is_alphanumeric() || c == '/')) {
        let tok = raw.trim_matches('/');
        if tok.is_empty() {
            continue;
        }
        let tok = tok.to_lowercase();
        if tok.contains('/') {
            out.extend(tok.split('/').filter(|p| !p.is_empty()).map(str::to_string));
            out.push(tok);
        } else {
            out.push(tok);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub report_id: String,
    pub index: usize,
    pub text: String,
    /// Byte offsets into the normalized report text.
    pub char_span: (usize, usize),
}

/// Where a chunk boundary landed. Sentence boundaries carry no overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cut {
    Sentence,
    MidSentence,
}

const SEPARATORS: [(&str, Cut); 3] = [
    (". ", Cut::Sentence),
    ("; ", Cut::MidSentence),
    (" ", Cut::MidSentence),
];

/// Splits `text` into chunks of at most `chunk_size` characters.
///
/// Each window is cut after the last ". " it contains; failing that after
/// the last "; ", then the last space, then hard at `chunk_size`. A chunk
/// that ends at a sentence break is followed directly by the next one;
/// any other cut makes the next chunk repeat the final `overlap` characters.
pub fn split_recursive(
    report_id: &str,
    text: &str,
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<Chunk>, RetrievalError> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(RetrievalError::InvalidSettings(format!(
            "need chunk_size > overlap >= 0, got size {chunk_size} overlap {overlap}"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let offsets: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let n = chars.len();

    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut prev_end = 0usize;
    while start < n {
        if n - start <= chunk_size {
            spans.push((start, n));
            break;
        }
        let limit = start + chunk_size;
        let mut found = None;
        for (sep, kind) in SEPARATORS {
            let sep: Vec<char> = sep.chars().collect();
            let min_end = match kind {
                Cut::Sentence => start + 1,
                Cut::MidSentence => start + overlap + 1,
            }
            .max(prev_end + 1)
            .max(sep.len());
            let hit = (min_end..=limit)
                .rev()
                .find(|&end| chars[end - sep.len()..end] == sep[..]);
            if let Some(end) = hit {
                found = Some((end, kind));
                break;
            }
        }
        let (end, kind) = found.unwrap_or((limit, Cut::MidSentence));
        spans.push((start, end));
        prev_end = end;
        start = match kind {
            Cut::Sentence => end,
            Cut::MidSentence => end - overlap,
        };
    }

    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(index, (s, e))| {
            let span = (offsets[s], offsets[e]);
            Chunk {
                report_id: report_id.to_string(),
                index,
                text: text[span.0..span.1].to_string(),
                char_span: span,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Collection statistics over the chunks of one report.
#[derive(Debug, Clone)]
pub struct Bm25Stats {
    pub n_docs: usize,
    pub avg_len: f64,
    doc_freq: HashMap<String, usize>,
}

impl Bm25Stats {
    pub fn build<S: AsRef<[String]>>(docs: &[S]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            let doc = doc.as_ref();
            total += doc.len();
            let unique: HashSet<&String> = doc.iter().collect();
            for t in unique {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Self {
            n_docs: docs.len(),
            avg_len,
            doc_freq,
        }
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Okapi BM25 of one tokenized chunk against a query.
pub fn bm25_score(
    query_terms: &[String],
    chunk_tokens: &[String],
    stats: &Bm25Stats,
    params: Bm25Params,
) -> f64 {
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in chunk_tokens {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let len_ratio = if stats.avg_len > 0.0 {
        chunk_tokens.len() as f64 / stats.avg_len
    } else {
        1.0
    };
    let norm = params.k1 * (1.0 - params.b + params.b * len_ratio);
    query_terms
        .iter()
        .map(|q| match tf.get(q.as_str()) {
            Some(&f) => {
                let f = f as f64;
                stats.idf(q) * f * (params.k1 + 1.0) / (f + norm)
            }
            None => 0.0,
        })
        .sum()
}

/// Chunks sorted by BM25, descending, ties by chunk index. Chunks sharing no
/// term with the query are left out.
pub fn bm25_ranking(
    query_terms: &[String],
    chunk_tokens: &[Vec<String>],
    stats: &Bm25Stats,
    params: Bm25Params,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = chunk_tokens
        .iter()
        .enumerate()
        .map(|(i, toks)| (i, bm25_score(query_terms, toks, stats, params)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    sort_desc(&mut scored);
    scored
}

fn sort_desc(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
}

pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>, RetrievalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Flat exact-search index over unit vectors keyed by chunk index.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    entries: Vec<(usize, Vec<f64>)>,
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            entries: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, chunk_index: usize, vector: &[f64]) -> Result<(), RetrievalError> {
        if vector.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                got: vector.len(),
            });
        }
        self.entries.push((chunk_index, unit_normalize(vector)?));
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries.iter().map(|(i, v)| (*i, v.as_slice()))
    }
}

/// Top-`n` chunks by cosine similarity, ties by chunk index.
pub fn dense_search(
    index: &VectorIndex,
    query: &[f64],
    n: usize,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    if query.len() != index.dimension {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dimension,
            got: query.len(),
        });
    }
    let q = unit_normalize(query)?;
    let mut scored: Vec<(usize, f64)> = index
        .entries
        .iter()
        .map(|(i, v)| (*i, v.iter().zip(&q).map(|(a, b)| a * b).sum()))
        .collect();
    sort_desc(&mut scored);
    scored.truncate(n);
    Ok(scored)
}

/// Reciprocal rank fusion of two rankings (chunk indices, best first).
pub fn hybrid_search(bm25: &[usize], dense: &[usize], n: usize) -> Vec<(usize, f64)> {
    let mut fused: HashMap<usize, f64> = HashMap::new();
    for ranking in [bm25, dense] {
        for (rank, &chunk) in ranking.iter().enumerate() {
            *fused.entry(chunk).or_default() += 1.0 / (RRF_K + (rank + 1) as f64);
        }
    }
    let mut scored: Vec<(usize, f64)> = fused.into_iter().collect();
    sort_desc(&mut scored);
    scored.truncate(n);
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequentialOrder {
    /// Dense shortlist, then BM25 within it.
    #[default]
    DenseThenBm25,
    /// BM25 shortlist, then cosine within it.
    Bm25ThenDense,
}

/// Two-stage retrieval: shortlist `shortlist_m` chunks with the first
/// method, then order the shortlist by the second and keep `n`. Ties in
/// stage two fall back to the stage-one rank. Scores returned are the
/// stage-two scores.
#[allow(clippy::too_many_arguments)]
pub fn sequential_search(
    chunk_tokens: &[Vec<String>],
    stats: &Bm25Stats,
    params: Bm25Params,
    query_terms: &[String],
    index: &VectorIndex,
    query_vector: &[f64],
    shortlist_m: usize,
    n: usize,
    order: SequentialOrder,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    if shortlist_m < n {
        return Err(RetrievalError::InvalidSettings(format!(
            "shortlist {shortlist_m} is smaller than n {n}"
        )));
    }
    let mut rescored: Vec<(usize, usize, f64)> = match order {
        SequentialOrder::DenseThenBm25 => dense_search(index, query_vector, shortlist_m)?
            .into_iter()
            .enumerate()
            .map(|(rank, (chunk, _))| {
                let s = bm25_score(query_terms, &chunk_tokens[chunk], stats, params);
                (chunk, rank, s)
            })
            .collect(),
        SequentialOrder::Bm25ThenDense => {
            let all = dense_search(index, query_vector, index.len())?;
            let cos: HashMap<usize, f64> = all.into_iter().collect();
            bm25_ranking(query_terms, chunk_tokens, stats, params)
                .into_iter()
                .take(shortlist_m)
                .enumerate()
                .map(|(rank, (chunk, _))| (chunk, rank, cos.get(&chunk).copied().unwrap_or(0.0)))
                .collect()
        }
    };
    rescored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
    Ok(rescored
        .into_iter()
        .take(n)
        .map(|(c, _, s)| (c, s))
        .collect())
}

/// Turns texts into embedding vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError>;
}

/// Scores a (query, passage) pair; higher is more relevant.
pub trait RerankScorer: Send + Sync {
    fn score(&self, query: &str, passage: &str) -> Result<f64, LmError>;
}

/// Fraction of distinct query tokens present in the passage.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapReranker;

impl RerankScorer for OverlapReranker {
    fn score(&self, query: &str, passage: &str) -> Result<f64, LmError> {
        Ok(token_overlap(query, passage))
    }
}

pub fn token_overlap(query: &str, passage: &str) -> f64 {
    let q: HashSet<String> = tokenize(query).into_iter().collect();
    if q.is_empty() {
        return 0.0;
    }
    let p: HashSet<String> = tokenize(passage).into_iter().collect();
    q.intersection(&p).count() as f64 / q.len() as f64
}

/// Scores every candidate and returns (candidate position, score) sorted by
/// score descending; equal scores keep input order. Scores are clamped to
/// [0, 1].
pub fn rerank<S: AsRef<str>>(
    query: &str,
    candidates: &[S],
    scorer: &dyn RerankScorer,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.iter().enumerate() {
        let s = scorer
            .score(query, c.as_ref())
            .map_err(|source| RetrievalError::Rerank { index, source })?;
        let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
        scored.push((index, s));
    }
    // stable sort keeps input order among ties
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    #[default]
    Off,
    Dense,
    Hybrid,
    Sequential,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| format!("unknown retrieval mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub mode: RetrievalMode,
    /// Measured in characters.
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    /// Candidates per retrieval method fed to the reranker.
    pub candidates: usize,
    /// First-stage shortlist size for sequential retrieval.
    pub shortlist: usize,
    pub rerank_threshold: f64,
    pub sequential_order: SequentialOrder,
    pub bm25: Bm25Params,
    pub embedding_model: String,
    pub reranker_model: String,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Off,
            chunk_size: 70,
            chunk_overlap: 20,
            candidates: 4,
            shortlist: 8,
            rerank_threshold: 0.2,
            sequential_order: SequentialOrder::DenseThenBm25,
            bm25: Bm25Params::default(),
            embedding_model: "gte-large".into(),
            reranker_model: "bge-reranker-v2-m3".into(),
        }
    }
}

impl RetrievalSettings {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::InvalidSettings(m.to_string()));
        if self.chunk_size == 0 || self.chunk_overlap >= self.chunk_size {
            return bad("need chunk_size > chunk_overlap");
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1");
        }
        if self.shortlist < self.candidates {
            return bad("shortlist must be at least candidates");
        }
        if !self.rerank_threshold.is_finite() {
            return bad("rerank_threshold must be finite");
        }
        if !(self.bm25.k1 > 0.0) || !(0.0..=1.0).contains(&self.bm25.b) {
            return bad("bm25 needs k1 > 0 and b in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub chunk: Chunk,
    pub retrieval_score: f64,
    pub rerank_score: f64,
}

/// The text handed to the model for one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub report_id: String,
    pub selected_text: String,
    pub rag_used: bool,
    /// Best rerank score, also kept when it fell below the threshold.
    pub rerank_score: Option<f64>,
    pub candidates: Vec<Candidate>,
}

impl RetrievedContext {
    pub fn full_report(report: &Report) -> Self {
        Self {
            report_id: report.id.clone(),
            selected_text: report.text.clone(),
            rag_used: false,
            rerank_score: None,
            candidates: Vec::new(),
        }
    }
}

/// Picks the context for one report: either the best reranked chunk or,
/// when retrieval is off or nothing clears the threshold, the whole report.
pub fn select_context(
    report: &Report,
    schema: &LabelSchema,
    settings: &RetrievalSettings,
    embedder: &dyn Embedder,
    reranker: &dyn RerankScorer,
) -> Result<RetrievedContext, RetrievalError> {
    if settings.mode == RetrievalMode::Off {
        return Ok(RetrievedContext::full_report(report));
    }
    settings.validate()?;
    let chunks = split_recursive(
        &report.id,
        &report.text,
        settings.chunk_size,
        settings.chunk_overlap,
    )?;
    if chunks.is_empty() {
        return Ok(RetrievedContext::full_report(report));
    }
    let query = schema.retrieval_keywords.as_str();

    let mut texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    texts.push(query.to_string());
    let vectors = embedder.embed(&texts).map_err(RetrievalError::Embedding)?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::EmbeddingCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    let query_vector = &vectors[chunks.len()];
    let mut index = VectorIndex::new(query_vector.len());
    for (i, v) in vectors[..chunks.len()].iter().enumerate() {
        index.insert(i, v)?;
    }

    let k = settings.candidates;
    let retrieved: Vec<(usize, f64)> = match settings.mode {
        RetrievalMode::Off => unreachable!(),
        RetrievalMode::Dense => dense_search(&index, query_vector, k)?,
        RetrievalMode::Hybrid | RetrievalMode::Sequential => {
            let chunk_tokens: Vec<Vec<String>> = chunks.iter().map(|c| tokenize(&c.text)).collect();
            let stats = Bm25Stats::build(&chunk_tokens);
            let query_terms = tokenize(query);
            if settings.mode == RetrievalMode::Hybrid {
                let lexical: Vec<usize> =
                    bm25_ranking(&query_terms, &chunk_tokens, &stats, settings.bm25)
                        .into_iter()
                        .take(k)
                        .map(|(c, _)| c)
                        .collect();
                let dense: Vec<usize> = dense_search(&index, query_vector, k)?
                    .into_iter()
                    .map(|(c, _)| c)
                    .collect();
                hybrid_search(&lexical, &dense, k)
            } else {
                sequential_search(
                    &chunk_tokens,
                    &stats,
                    settings.bm25,
                    &query_terms,
                    &index,
                    query_vector,
                    settings.shortlist,
                    k,
                    settings.sequential_order,
                )?
            }
        }
    };

    let texts: Vec<&str> = retrieved
        .iter()
        .map(|(c, _)| chunks[*c].text.as_str())
        .collect();
    let ranked = rerank(query, &texts, reranker)?;
    let candidates: Vec<Candidate> = ranked
        .iter()
        .map(|&(pos, score)| {
            let (chunk, retrieval_score) = retrieved[pos];
            Candidate {
                chunk: chunks[chunk].clone(),
                retrieval_score,
                rerank_score: score,
            }
        })
        .collect();

    let best = candidates.first().map(|c| c.rerank_score);
    match candidates.first() {
        Some(top) if top.rerank_score >= settings.rerank_threshold => Ok(RetrievedContext {
            report_id: report.id.clone(),
            selected_text: top.chunk.text.clone(),
            rag_used: true,
            rerank_score: best,
            candidates,
        }),
        _ => Ok(RetrievedContext {
            rerank_score: best,
            candidates,
            ..RetrievedContext::full_report(report)
        }),
    }
}
