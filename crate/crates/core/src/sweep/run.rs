use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use super::{ExtractionRecord, PipelineConfig, ResultStore, SweepError};
use crate::corpus::{LabelSchema, Report};
use crate::lm_client::{GenerationRequest, Generator};
use crate::postprocess::{parse_label_detailed, InvalidReason, ParsedLabel};
use crate::prompting::{build_prompt, FewShotExemplar, TemplateSet};
use crate::retrieval::{select_context, Embedder, RerankScorer, RetrievedContext};

/// Everything needed to run one report through one configuration.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub schema: &'a LabelSchema,
    pub templates: &'a TemplateSet,
    pub exemplars: &'a [FewShotExemplar],
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn RerankScorer,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Pipeline<'_> {
    /// Checks a configuration against this pipeline without calling the
    /// backend: field ranges and prompt rendering.
    pub fn check_config(&self, config: &PipelineConfig) -> Result<(), SweepError> {
        config.validate()?;
        let probe = RetrievedContext {
            report_id: "probe".into(),
            selected_text: String::new(),
            rag_used: false,
            rerank_score: None,
            candidates: Vec::new(),
        };
        build_prompt(
            &probe,
            self.schema,
            config.prompt,
            self.exemplars,
            self.templates,
        )?;
        Ok(())
    }

    /// select_context, build_prompt, generate, parse. Errors are returned,
    /// not recorded; see [`Pipeline::extract_or_invalid`].
    pub fn extract(
        &self,
        report: &Report,
        config: &PipelineConfig,
        timing: bool,
    ) -> Result<ExtractionRecord, SweepError> {
        let context = select_context(
            report,
            self.schema,
            &config.retrieval,
            self.embedder,
            self.reranker,
        )?;
        let prompt = build_prompt(
            &context,
            self.schema,
            config.prompt,
            self.exemplars,
            self.templates,
        )?;
        let request = GenerationRequest {
            model: config.model_name.clone(),
            prompt,
            json_mode: config.json_mode,
            temperature: config.temperature,
            top_k: config.top_k,
            top_p: config.top_p,
            seed: Some(config.record_seed(&report.id)),
        };
        let started = Instant::now();
        let response = self.generator.generate(&request)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        let outcome = parse_label_detailed(&response.raw_text, self.schema);
        Ok(ExtractionRecord {
            report_id: report.id.clone(),
            config_hash: config.config_hash(),
            raw_output: response.raw_text,
            parsed: outcome.label,
            rag_used: context.rag_used,
            rerank_score: context.rerank_score,
            latency_ms: if timing { latency_ms } else { 0.0 },
            timestamp: if timing { now_ms() } else { 0 },
            note: outcome
                .key_fallback
                .then(|| "answer taken from a non-schema key".to_string()),
        })
    }

    /// Like [`Pipeline::extract`], but a failure becomes an invalid record
    /// carrying the error as its note.
    pub fn extract_or_invalid(
        &self,
        report: &Report,
        config: &PipelineConfig,
        timing: bool,
    ) -> ExtractionRecord {
        self.extract(report, config, timing)
            .unwrap_or_else(|e| ExtractionRecord {
                report_id: report.id.clone(),
                config_hash: config.config_hash(),
                raw_output: String::new(),
                parsed: ParsedLabel::Invalid(InvalidReason::Empty),
                rag_used: false,
                rerank_score: None,
                latency_ms: 0.0,
                timestamp: if timing { now_ms() } else { 0 },
                note: Some(format!("error: {e}")),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepProgress {
    pub written: usize,
    pub pending: usize,
}

pub struct SweepOptions<'a> {
    /// Maximum in-flight generations; 1 runs on the calling thread.
    pub parallelism: usize,
    /// Record latency and timestamps; off gives byte-reproducible stores.
    pub timing: bool,
    /// fsync after every append.
    pub sync: bool,
    /// Stop after writing this many new records (fault injection).
    pub stop_after: Option<usize>,
    pub progress: Option<&'a (dyn Fn(SweepProgress) + Sync)>,
}

impl Default for SweepOptions<'_> {
    fn default() -> Self {
        Self {
            parallelism: 4,
            timing: true,
            sync: true,
            stop_after: None,
            progress: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepSummary {
    pub total_pairs: usize,
    pub already_done: usize,
    pub written: usize,
    pub invalid: usize,
}

impl SweepSummary {
    pub fn complete(&self) -> bool {
        self.already_done + self.written == self.total_pairs
    }
}

/// Runs every (config, report) pair missing from the store at `store_path`.
///
/// Work is issued config-major. Workers hand records to a single writer
/// that appends them in issue order, so the store is always a prefix of
/// the full run and an interrupted sweep resumes where it stopped.
pub fn run_sweep(
    pipeline: &Pipeline,
    reports: &[Report],
    configs: &[PipelineConfig],
    store_path: &Path,
    options: &SweepOptions,
) -> Result<SweepSummary, SweepError> {
    if options.parallelism == 0 {
        return Err(SweepError::InvalidConfig(
            "parallelism must be at least 1".into(),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for r in reports {
        if !seen.insert(r.id.as_str()) {
            return Err(SweepError::InvalidConfig(format!(
                "report {} listed twice",
                r.id
            )));
        }
    }
    let hashes: Vec<String> = configs.iter().map(PipelineConfig::config_hash).collect();
    let mut distinct = std::collections::HashSet::new();
    for (c, h) in configs.iter().zip(&hashes) {
        pipeline.check_config(c)?;
        if !distinct.insert(h) {
            return Err(SweepError::InvalidConfig(format!(
                "configuration {h} listed twice"
            )));
        }
    }

    let mut store = ResultStore::open(store_path)?;
    store.set_sync(options.sync);
    let mut pending = Vec::new();
    for (ci, h) in hashes.iter().enumerate() {
        for (ri, r) in reports.iter().enumerate() {
            if !store.contains(&r.id, h) {
                pending.push((ci, ri));
            }
        }
    }
    let total_pairs = hashes.len() * reports.len();
    let already_done = total_pairs - pending.len();
    let limit = options.stop_after.unwrap_or(usize::MAX).min(pending.len());
    log::info!(
        "{} pairs, {already_done} already stored, {} to run",
        total_pairs,
        pending.len()
    );
    let mut summary = SweepSummary {
        total_pairs,
        already_done,
        written: 0,
        invalid: 0,
    };
    if limit == 0 {
        return Ok(summary);
    }

    let cancel = AtomicBool::new(false);
    let work = |seq: usize, (ci, ri): (usize, usize)| -> Option<(usize, ExtractionRecord)> {
        if cancel.load(Ordering::Relaxed) {
            return None;
        }
        Some((
            seq,
            pipeline.extract_or_invalid(&reports[ri], &configs[ci], options.timing),
        ))
    };

    let (written, invalid) = std::thread::scope(|scope| -> Result<(usize, usize), SweepError> {
        let (tx, rx) = mpsc::channel::<(usize, ExtractionRecord)>();
        let cancel = &cancel;
        let store = &mut store;
        let pending_len = pending.len();
        let writer = scope.spawn(move || -> Result<(usize, usize), SweepError> {
            let mut next = 0;
            let mut invalid = 0;
            let mut held = BTreeMap::new();
            for (seq, rec) in rx {
                held.insert(seq, rec);
                while let Some(rec) = held.remove(&next) {
                    if let Err(e) = store.append(&rec) {
                        cancel.store(true, Ordering::Relaxed);
                        return Err(e);
                    }
                    invalid += usize::from(!rec.parsed.is_valid());
                    next += 1;
                    if let Some(cb) = options.progress {
                        cb(super::SweepProgress {
                            written: next,
                            pending: pending_len,
                        });
                    }
                    if next == limit {
                        cancel.store(true, Ordering::Relaxed);
                        return Ok((next, invalid));
                    }
                }
            }
            Ok((next, invalid))
        });

        dispatch(&pending[..limit], options.parallelism, &work, tx)?;
        writer.join().expect("writer thread panicked")
    })?;
    summary.written = written;
    summary.invalid = invalid;
    Ok(summary)
}

type Work<'w> = dyn Fn(usize, (usize, usize)) -> Option<(usize, ExtractionRecord)> + Sync + 'w;

#[cfg(feature = "parallel")]
fn dispatch(
    items: &[(usize, usize)],
    parallelism: usize,
    work: &Work<'_>,
    tx: mpsc::Sender<(usize, ExtractionRecord)>,
) -> Result<(), SweepError> {
    use rayon::prelude::*;
    if parallelism == 1 {
        return dispatch_sequential(items, work, tx);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    // par_bridge pulls items in order, which keeps the writer's reorder
    // buffer at roughly one record per worker
    pool.install(|| {
        items
            .iter()
            .copied()
            .enumerate()
            .par_bridge()
            .for_each_with(tx, |tx, (seq, item)| {
                if let Some(out) = work(seq, item) {
                    let _ = tx.send(out);
                }
            })
    });
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn dispatch(
    items: &[(usize, usize)],
    _parallelism: usize,
    work: &Work<'_>,
    tx: mpsc::Sender<(usize, ExtractionRecord)>,
) -> Result<(), SweepError> {
    dispatch_sequential(items, work, tx)
}

fn dispatch_sequential(
    items: &[(usize, usize)],
    work: &Work<'_>,
    tx: mpsc::Sender<(usize, ExtractionRecord)>,
) -> Result<(), SweepError> {
    for (seq, item) in items.iter().copied().enumerate() {
        match work(seq, item) {
            Some(out) => {
                if tx.send(out).is_err() {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(())
}
