//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. A non-flag argument filters criteria by name.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use extractor_core::corpus::{
    generate_synthetic_corpus, load_corpus, save_corpus, CorpusSpec, GoldAnnotation, LabelSchema,
    Report, Task,
};
use extractor_core::lm_client::{HashEmbedder, LmError, MockBackend, MockMode};
use extractor_core::metrics::{cohens_d, compute_metrics, confusion, spearman, student_t, welch_t};
use extractor_core::postprocess::{
    apply_wrapper, noise_wrappers, parse_label, InvalidReason, ParsedLabel,
};
use extractor_core::prompting::{default_exemplars, TemplateSet};
use extractor_core::retrieval::{
    bm25_score, dense_search, select_context, Bm25Params, Bm25Stats, OverlapReranker, RerankScorer,
    RetrievalMode, RetrievalSettings, VectorIndex,
};
use extractor_core::sweep::{
    aggregate, load_records, run_sweep, ComparisonOutcome, Pipeline, PipelineConfig, SweepOptions,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const CHILD_ENV: &str = "ACCEPTANCE_SWEEP_CHILD";

fn main() -> ExitCode {
    if let Ok(spec) = std::env::var(CHILD_ENV) {
        child_sweep(&spec);
        return ExitCode::SUCCESS;
    }
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 10] = [
        ("end-to-end oracle", oracle_end_to_end),
        ("noise calibration", noise_calibration),
        ("bm25 oracle equivalence", bm25_equivalence),
        ("dense retrieval exactness", dense_exactness),
        ("rerank threshold fallback", threshold_fallback),
        ("parser robustness", parser_robustness),
        ("metrics and statistics oracles", metrics_and_stats),
        ("sweep durability", sweep_durability),
        ("distribution fidelity", distribution_fidelity),
        ("directional rag", directional_rag),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if filter.as_deref().is_some_and(|flt| !name.contains(flt)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn corpus(task: Task, n: usize, seed: u64) -> (Vec<Report>, HashMap<String, String>) {
    let (reports, gold) = generate_synthetic_corpus(&CorpusSpec::reference(task, n, seed)).unwrap();
    (reports, gold_map(&gold))
}

fn gold_map(gold: &[GoldAnnotation]) -> HashMap<String, String> {
    gold.iter()
        .map(|g| (g.report_id.clone(), g.label.clone()))
        .collect()
}

struct Harness {
    schema: LabelSchema,
    templates: TemplateSet,
    exemplars: Vec<extractor_core::prompting::FewShotExemplar>,
    embedder: HashEmbedder,
}

impl Harness {
    fn new(task: Task) -> Self {
        let schema = LabelSchema::builtin(task);
        Self {
            exemplars: default_exemplars(&schema),
            schema,
            templates: TemplateSet::builtin(),
            embedder: HashEmbedder::default(),
        }
    }

    fn pipeline<'a>(&'a self, backend: &'a MockBackend) -> Pipeline<'a> {
        Pipeline {
            schema: &self.schema,
            templates: &self.templates,
            exemplars: &self.exemplars,
            generator: backend,
            embedder: &self.embedder,
            reranker: &OverlapReranker,
        }
    }
}

fn quick() -> SweepOptions<'static> {
    SweepOptions {
        parallelism: 4,
        timing: false,
        sync: false,
        ..SweepOptions::default()
    }
}

fn oracle_end_to_end() -> Check {
    let h = Harness::new(Task::Radiology);
    let (reports, gold) = corpus(Task::Radiology, 1000, 11);
    let backend = MockBackend::new(MockMode::Oracle, h.schema.clone(), gold.clone());
    let plain = PipelineConfig::default();
    let mut rag = PipelineConfig {
        json_mode: false,
        temperature: 0.8,
        top_k: 2,
        ..PipelineConfig::default()
    };
    rag.prompt.style = extractor_core::prompting::PromptStyle::Complex;
    rag.prompt.few_shot = extractor_core::prompting::FewShot::PositiveAndNegative;
    rag.retrieval.mode = RetrievalMode::Hybrid;
    let configs = vec![plain, rag];

    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.jsonl");
    run_sweep(&h.pipeline(&backend), &reports, &configs, &store, &quick())
        .map_err(|e| e.to_string())?;
    let records = load_records(&store).map_err(|e| e.to_string())?;
    let agg = aggregate(&records, &configs, &reports, &gold, &h.schema, &[])
        .map_err(|e| e.to_string())?;
    for c in &agg.configs {
        let m = &c.metrics;
        ensure!(
            m.n == 1000,
            "config {} scored {} reports",
            c.config_hash,
            m.n
        );
        ensure!(
            m.accuracy == 1.0,
            "config {} accuracy {}",
            c.config_hash,
            m.accuracy
        );
        ensure!(
            m.micro_f1 == m.accuracy,
            "micro F1 {} != accuracy {}",
            m.micro_f1,
            m.accuracy
        );
    }
    let rag_used = records.iter().filter(|r| r.rag_used).count();
    Ok(format!(
        "accuracy 1.0 and micro F1 == accuracy for {} configs x 1000 reports ({rag_used} RAG contexts)",
        agg.configs.len()
    ))
}

fn noise_calibration() -> Check {
    let h = Harness::new(Task::Radiology);
    let (reports, gold) = corpus(Task::Radiology, 1000, 12);
    let config = PipelineConfig {
        seed: 2024,
        ..PipelineConfig::default()
    };
    let mut parts = Vec::new();
    for eps in [0.05, 0.10, 0.30] {
        let backend = MockBackend::new(
            MockMode::NoisyOracle { epsilon: eps },
            h.schema.clone(),
            gold.clone(),
        );
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("s.jsonl");
        let configs = [config.clone()];
        run_sweep(&h.pipeline(&backend), &reports, &configs, &store, &quick())
            .map_err(|e| e.to_string())?;
        let records = load_records(&store).map_err(|e| e.to_string())?;
        let agg = aggregate(&records, &configs, &reports, &gold, &h.schema, &[])
            .map_err(|e| e.to_string())?;
        let acc = agg.configs[0].metrics.accuracy;
        ensure!(
            (acc - (1.0 - eps)).abs() <= 0.02,
            "eps {eps}: accuracy {acc:.4} outside {:.2} +/- 0.02",
            1.0 - eps
        );
        parts.push(format!("eps {eps:.2} -> {acc:.3}"));
    }
    Ok(parts.join(", "))
}

/// Textbook Okapi BM25 computed by scanning, with no shared code.
fn okapi_brute_force(query: &[String], docs: &[Vec<String>], d: usize, k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let dl = docs[d].len() as f64;
    let mut score = 0.0;
    for q in query {
        let nq = docs.iter().filter(|doc| doc.contains(q)).count() as f64;
        let idf = (1.0 + (n - nq + 0.5) / (nq + 0.5)).ln();
        let f = docs[d].iter().filter(|t| *t == q).count() as f64;
        let denom = f + k1 * (1.0 - b + b * if avgdl > 0.0 { dl / avgdl } else { 1.0 });
        score += idf * f * (k1 + 1.0) / denom;
    }
    score
}

fn bm25_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = Bm25Params::default();
    let mut compared = 0usize;
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let vocab = rng.random_range(3..40);
        let n_docs = rng.random_range(1..=200);
        let docs: Vec<Vec<String>> = (0..n_docs)
            .map(|_| {
                let len = rng.random_range(0..40);
                (0..len)
                    .map(|_| format!("t{}", rng.random_range(0..vocab)))
                    .collect()
            })
            .collect();
        let q_len = rng.random_range(1..=10);
        // a few query terms fall outside the vocabulary
        let query: Vec<String> = (0..q_len)
            .map(|_| format!("t{}", rng.random_range(0..vocab + 3)))
            .collect();
        let stats = Bm25Stats::build(&docs);
        for d in 0..docs.len() {
            let got = bm25_score(&query, &docs[d], &stats, params);
            let want = okapi_brute_force(&query, &docs, d, params.k1, params.b);
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-9, "case {case} doc {d}: {got} vs {want}");
            compared += 1;
        }
    }
    Ok(format!(
        "1000 cases, {compared} scores, max abs error {worst:.1e}"
    ))
}

fn dense_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut tie_cases = 0;
    for case in 0..1000 {
        let dim = rng.random_range(2..=32);
        let count = rng.random_range(1..=200);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
        for i in 0..count {
            // every fifth vector repeats an earlier one to force exact ties
            if i > 0 && rng.random_range(0..5) == 0 {
                let j = rng.random_range(0..i);
                vectors.push(vectors[j].clone());
            } else {
                vectors.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            }
        }
        let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rng.random_range(1..=20);

        let mut index = VectorIndex::new(dim);
        for (i, v) in vectors.iter().enumerate() {
            index.insert(i, v).map_err(|e| e.to_string())?;
        }
        let got: Vec<usize> = dense_search(&index, &query, n)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|(i, _)| i)
            .collect();

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let qn = norm(&query);
        let cosines: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>() / (norm(v) * qn))
            .collect();
        let mut order: Vec<usize> = (0..count).collect();
        // documented rule: cosine descending, then lower chunk index
        order.sort_by(|&a, &b| cosines[b].total_cmp(&cosines[a]).then(a.cmp(&b)));
        order.truncate(n);
        ensure!(
            got == order,
            "case {case}: got {got:?}, exhaustive {order:?}"
        );
        if order.windows(2).any(|w| cosines[w[0]] == cosines[w[1]]) {
            tie_cases += 1;
        }
    }
    Ok(format!(
        "1000 cases agree exactly, {tie_cases} with ties inside the top n"
    ))
}

struct FixedScore(f64);

impl RerankScorer for FixedScore {
    fn score(&self, _: &str, _: &str) -> Result<f64, LmError> {
        Ok(self.0)
    }
}

fn threshold_fallback() -> Check {
    let schema = LabelSchema::radiology();
    let text = "MRI brain with and without contrast. Stable postsurgical changes in the right frontal lobe. \
                No new enhancement. The follow-up score for this exam is 2. \
                Recommend continued surveillance imaging in three months.";
    let report = Report::new("RAD-T", Task::Radiology, text);
    let settings = RetrievalSettings {
        mode: RetrievalMode::Sequential,
        ..RetrievalSettings::default()
    };
    let mut seen = Vec::new();
    for (score, expect) in [(0.19, false), (0.21, true)] {
        let ctx = select_context(
            &report,
            &schema,
            &settings,
            &HashEmbedder::default(),
            &FixedScore(score),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            ctx.rag_used == expect,
            "max rerank {score}: rag_used {}",
            ctx.rag_used
        );
        ensure!(
            ctx.rerank_score == Some(score),
            "reported score {:?}",
            ctx.rerank_score
        );
        if expect {
            ensure!(
                ctx.selected_text.len() < report.text.len(),
                "RAG context is not a chunk"
            );
        } else {
            ensure!(
                ctx.selected_text == report.text,
                "fallback is not the full report"
            );
        }
        seen.push(format!("{score} -> rag_used {}", ctx.rag_used));
    }
    Ok(seen.join(", "))
}

fn fuzz_input(rng: &mut ChaCha8Rng, schema: &LabelSchema) -> String {
    const PIECES: &[&str] = &[
        "{",
        "}",
        "\"",
        "'",
        ":",
        ",",
        "[",
        "]",
        "```",
        "json",
        "\n",
        " ",
        "\\",
        "null",
        "true",
        "“",
        "”",
        "é",
        "\u{0}",
        "score",
        "idh_status",
        "answer",
        "NR",
        "nan",
        "-1",
        "1e999",
    ];
    match rng.random_range(0..4) {
        0 => {
            let n = rng.random_range(0..60);
            (0..n)
                .map(|_| PIECES[rng.random_range(0..PIECES.len())])
                .collect()
        }
        1 => {
            let n = rng.random_range(0..80);
            (0..n)
                .map(|_| char::from_u32(rng.random_range(0..0x2FFF)).unwrap_or('?'))
                .collect()
        }
        2 => {
            let wrappers = noise_wrappers();
            let w = &wrappers[rng.random_range(0..wrappers.len())];
            let label = &schema.valid_labels[rng.random_range(0..schema.valid_labels.len())];
            let mut s: Vec<char> = apply_wrapper(w, &schema.answer_key, label)
                .chars()
                .collect();
            for _ in 0..rng.random_range(1..6) {
                if s.is_empty() || rng.random_bool(0.5) {
                    let at = rng.random_range(0..=s.len());
                    s.insert(
                        at,
                        PIECES[rng.random_range(0..PIECES.len())]
                            .chars()
                            .next()
                            .unwrap_or(' '),
                    );
                } else {
                    let at = rng.random_range(0..s.len());
                    s.remove(at);
                }
            }
            s.into_iter().collect()
        }
        _ => {
            let key = if rng.random_bool(0.7) {
                schema.answer_key.clone()
            } else {
                "label".into()
            };
            let value = match rng.random_range(0..5) {
                0 => serde_json::Value::Null,
                1 => serde_json::json!(rng.random_range(-5..10)),
                2 => serde_json::json!(["2", "NR"]),
                3 => serde_json::json!(format!("x{}", rng.random_range(0..100))),
                _ => serde_json::json!(schema.valid_labels
                    [rng.random_range(0..schema.valid_labels.len())]
                .to_uppercase()),
            };
            serde_json::json!({ key: value }).to_string()
        }
    }
}

fn parser_robustness() -> Check {
    let schemas = [LabelSchema::radiology(), LabelSchema::pathology()];
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut valid = 0;
    for i in 0..10_000 {
        let schema = &schemas[i % 2];
        let input = fuzz_input(&mut rng, schema);
        let parsed = catch_unwind(|| parse_label(&input, schema))
            .map_err(|_| format!("parser panicked on {input:?}"))?;
        if let ParsedLabel::Valid(x) = &parsed {
            ensure!(schema.contains(x), "unsound: Valid({x:?}) from {input:?}");
            valid += 1;
        }
    }
    let mut combos = 0;
    for schema in &schemas {
        for label in &schema.valid_labels {
            for w in noise_wrappers() {
                let raw = apply_wrapper(w, &schema.answer_key, label);
                let got = parse_label(&raw, schema);
                ensure!(
                    got == ParsedLabel::Valid(label.clone()),
                    "{raw:?} parsed as {got:?}"
                );
                combos += 1;
            }
        }
    }
    ensure!(
        parse_label("", &schemas[0]) == ParsedLabel::Invalid(InvalidReason::Empty),
        "empty input not Invalid(Empty)"
    );
    Ok(format!(
        "10000 fuzzed inputs without a crash, {valid} accepted all in schema; {combos} label x wrapper combinations recovered"
    ))
}

fn metrics_and_stats() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let k = rng.random_range(2..=6);
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let schema = LabelSchema {
            task: Task::Radiology,
            valid_labels: labels.clone(),
            nr_label: labels[k - 1].clone(),
            answer_key: "score".into(),
            retrieval_keywords: "q".into(),
        };
        let n = rng.random_range(1..=200);
        let gold: Vec<String> = (0..n)
            .map(|_| labels[rng.random_range(0..k)].clone())
            .collect();
        let preds: Vec<ParsedLabel> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    ParsedLabel::Invalid(InvalidReason::NoJson)
                } else {
                    ParsedLabel::Valid(labels[rng.random_range(0..k)].clone())
                }
            })
            .collect();
        let cm = confusion(&preds, &gold, &schema).map_err(|e| e.to_string())?;
        let m = compute_metrics(&cm).map_err(|e| e.to_string())?;

        let pred_str: Vec<&str> = preds.iter().map(|p| p.as_prediction()).collect();
        let correct = (0..n).filter(|&i| pred_str[i] == gold[i]).count();
        let (mut sp, mut sr, mut sf, mut classes) = (0.0, 0.0, 0.0, 0.0);
        let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
        for c in &labels {
            let tp = (0..n)
                .filter(|&i| gold[i] == *c && pred_str[i] == c)
                .count() as f64;
            let fp = (0..n)
                .filter(|&i| gold[i] != *c && pred_str[i] == c)
                .count() as f64;
            let fnn = (0..n)
                .filter(|&i| gold[i] == *c && pred_str[i] != c)
                .count() as f64;
            tp_all += tp;
            fp_all += fp;
            fn_all += fnn;
            if tp + fnn == 0.0 {
                continue;
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = tp / (tp + fnn);
            sp += p;
            sr += r;
            sf += if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            classes += 1.0;
        }
        let invalid = pred_str.iter().filter(|p| **p == "INVALID").count() as f64;
        let micro_p = tp_all / (tp_all + fp_all + invalid);
        let micro_r = tp_all / (tp_all + fn_all);
        let micro_f = 2.0 * micro_p * micro_r / (micro_p + micro_r).max(f64::MIN_POSITIVE);
        let want = [
            correct as f64 / n as f64,
            sp / classes,
            micro_p,
            sr / classes,
            micro_r,
            sf / classes,
            micro_f,
        ];
        for (g, w) in m.table_row().iter().zip(want) {
            let err = (g - w).abs();
            worst = worst.max(err);
            ensure!(
                err <= 1e-12,
                "fixture {case}: {:?} vs {want:?}",
                m.table_row()
            );
        }
    }

    let t = student_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0])
        .map_err(|e| e.to_string())?;
    ensure!(t.statistic == -1.0, "student t = {}", t.statistic);

    let x: Vec<f64> = (1..=12).map(f64::from).collect();
    let up: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0).collect();
    let down: Vec<f64> = x.iter().map(|v| (-v).exp()).collect();
    let rho_up = spearman(&x, &up).map_err(|e| e.to_string())?.statistic;
    let rho_down = spearman(&x, &down).map_err(|e| e.to_string())?.statistic;
    ensure!(
        rho_up == 1.0 && rho_down == -1.0,
        "spearman {rho_up} / {rho_down}"
    );

    // Welch against closed forms evaluated independently; p from statrs
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let mut welch_worst: f64 = 0.0;
    for _ in 0..200 {
        let na = rng.random_range(2..30);
        let nb = rng.random_range(2..30);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(-3.0..8.0) * 2.0).collect();
        let stats = |s: &[f64]| {
            let n = s.len() as f64;
            let m = s.iter().sum::<f64>() / n;
            let ss = s.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            (n, m, ss / (n - 1.0))
        };
        let (n1, m1, v1) = stats(&a);
        let (n2, m2, v2) = stats(&b);
        let se2 = v1 / n1 + v2 / n2;
        let t = (m1 - m2) / se2.sqrt();
        let df = se2.powi(2) / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
        let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        let got = welch_t(&a, &b).map_err(|e| e.to_string())?;
        for (g, w) in [
            (got.statistic, t),
            (got.df.unwrap(), df),
            (got.p_value.unwrap(), p),
        ] {
            let err = (g - w).abs() / w.abs().max(1.0);
            welch_worst = welch_worst.max(err);
            ensure!(err <= 1e-9, "welch {g} vs {w}");
        }
    }

    let a = [2.0, 4.0, 6.0, 8.0];
    let b = [1.0, 5.0, 3.0, 9.0, 0.5];
    let dab = cohens_d(&a, &b).map_err(|e| e.to_string())?;
    let dba = cohens_d(&b, &a).map_err(|e| e.to_string())?;
    ensure!(dab == -dba, "cohen's d not antisymmetric: {dab} vs {dba}");
    // equal spreads with means one pooled SD apart: SD of {1,2,3,4} is sqrt(5/3)
    let sd = (5.0f64 / 3.0).sqrt();
    let base = [1.0, 2.0, 3.0, 4.0];
    let shifted: Vec<f64> = base.iter().map(|v| v + sd).collect();
    let d = cohens_d(&shifted, &base).map_err(|e| e.to_string())?;
    ensure!((d - 1.0).abs() <= 1e-12, "constructed d = {d}");

    Ok(format!(
        "1000 confusion fixtures (max error {worst:.1e}); t = -1.0; rho = +1/-1; Welch max rel error {welch_worst:.1e}; d antisymmetric and d = 1 fixture"
    ))
}

fn child_sweep(spec: &str) {
    let mut parts = spec.split('|');
    let corpus = PathBuf::from(parts.next().unwrap());
    let store = PathBuf::from(parts.next().unwrap());
    let (reports, gold) = load_corpus(&corpus).unwrap();
    let h = Harness::new(Task::Radiology);
    let backend = MockBackend::new(
        MockMode::NoisyOracle { epsilon: 0.2 },
        h.schema.clone(),
        gold_map(&gold),
    )
    .with_delay(Duration::from_millis(10));
    let options = SweepOptions {
        parallelism: 3,
        timing: false,
        ..SweepOptions::default()
    };
    run_sweep(
        &h.pipeline(&backend),
        &reports,
        &durability_configs(),
        &store,
        &options,
    )
    .unwrap();
}

fn durability_configs() -> Vec<PipelineConfig> {
    [0.0, 0.5, 0.8]
        .iter()
        .map(|&t| PipelineConfig {
            temperature: t,
            seed: 5,
            ..PipelineConfig::default()
        })
        .collect()
}

fn store_keys(path: &Path) -> Result<Vec<(String, String)>, String> {
    let records = load_records(path).map_err(|e| e.to_string())?;
    Ok(records.iter().map(|r| r.key()).collect())
}

fn sweep_durability() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (reports, gold) =
        generate_synthetic_corpus(&CorpusSpec::reference(Task::Radiology, 60, 35)).unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    save_corpus(&corpus_path, &reports, &gold).map_err(|e| e.to_string())?;
    let gold = gold_map(&gold);
    let configs = durability_configs();
    let total = reports.len() * configs.len();
    let h = Harness::new(Task::Radiology);
    let backend = MockBackend::new(
        MockMode::NoisyOracle { epsilon: 0.2 },
        h.schema.clone(),
        gold.clone(),
    );

    let clean = dir.path().join("clean.jsonl");
    run_sweep(&h.pipeline(&backend), &reports, &configs, &clean, &quick())
        .map_err(|e| e.to_string())?;
    let reference = std::fs::read(&clean).unwrap();

    // a real process killed mid-sweep, then resumed here
    let killed = dir.path().join("killed.jsonl");
    let mut child = Command::new(std::env::current_exe().unwrap())
        .env(
            CHILD_ENV,
            format!("{}|{}", corpus_path.display(), killed.display()),
        )
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let started = Instant::now();
    let lines = |p: &Path| {
        std::fs::read(p)
            .map(|b| b.iter().filter(|&&c| c == b'\n').count())
            .unwrap_or(0)
    };
    while lines(&killed) < total / 3 {
        ensure!(
            started.elapsed() < Duration::from_secs(60),
            "child sweep made no progress"
        );
        std::thread::sleep(Duration::from_millis(2));
    }
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;
    let at_kill = lines(&killed);
    ensure!(at_kill < total, "child finished before it was killed");
    run_sweep(&h.pipeline(&backend), &reports, &configs, &killed, &quick())
        .map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(&killed).unwrap() == reference,
        "resumed store differs from uninterrupted run"
    );

    // in-process interruptions at several points, one leaving a torn line
    let mut cuts = 0;
    for (i, stop) in [1, 57, 119, total - 1].into_iter().enumerate() {
        let path = dir.path().join(format!("cut{i}.jsonl"));
        let opts = SweepOptions {
            stop_after: Some(stop),
            ..quick()
        };
        run_sweep(&h.pipeline(&backend), &reports, &configs, &path, &opts)
            .map_err(|e| e.to_string())?;
        if i == 2 {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .unwrap();
            f.write_all(b"{\"report_id\": \"RAD-0000").unwrap();
        }
        run_sweep(&h.pipeline(&backend), &reports, &configs, &path, &quick())
            .map_err(|e| e.to_string())?;
        ensure!(
            std::fs::read(&path).unwrap() == reference,
            "resume after {stop} records differs"
        );
        cuts += 1;
    }

    let keys = store_keys(&killed)?;
    let unique: HashSet<_> = keys.iter().collect();
    ensure!(
        keys.len() == total && unique.len() == total,
        "{} records, {} unique",
        keys.len(),
        unique.len()
    );
    Ok(format!(
        "process killed after {at_kill}/{total} records and resumed; {cuts} in-process cuts; all stores byte-equal to the uninterrupted run with no duplicates"
    ))
}

fn distribution_fidelity() -> Check {
    // reference-standard counts of the clinical radiology dataset
    let counts: BTreeMap<&str, f64> = [
        ("0", 0.0),
        ("1", 5.0),
        ("1a", 204.0),
        ("1b", 124.0),
        ("2", 856.0),
        ("2a", 112.0),
        ("2b", 10.0),
        ("3", 88.0),
        ("3a", 47.0),
        ("3b", 292.0),
        ("3c", 386.0),
        ("4", 373.0),
        ("NR", 4797.0),
    ]
    .into_iter()
    .collect();
    let total: f64 = counts.values().sum();
    ensure!(total == 7294.0, "reference counts sum to {total}");

    let n = 10_000usize;
    let (_, gold) =
        generate_synthetic_corpus(&CorpusSpec::reference(Task::Radiology, n, 36)).unwrap();
    let mut observed: HashMap<&str, usize> = HashMap::new();
    for g in &gold {
        *observed.entry(g.label.as_str()).or_default() += 1;
    }
    let mut worst_z: f64 = 0.0;
    for (label, c) in &counts {
        let p = c / total;
        let f = observed.get(label).copied().unwrap_or(0) as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        if se == 0.0 {
            ensure!(f == 0.0, "class {label} has p = 0 but frequency {f}");
            continue;
        }
        let z = (f - p).abs() / se;
        worst_z = worst_z.max(z);
        ensure!(
            z <= 3.0,
            "class {label}: frequency {f:.4} vs {p:.4} ({z:.2} SE)"
        );
    }
    let nr = observed.get("NR").copied().unwrap_or(0) as f64 / n as f64;
    Ok(format!(
        "10000 reports, NR {:.2}%, worst class {worst_z:.2} SE",
        100.0 * nr
    ))
}

fn directional_rag() -> Check {
    let h = Harness::new(Task::Pathology);
    let (all, gold) = corpus(Task::Pathology, 600, 37);
    let reports: Vec<Report> = all
        .into_iter()
        .filter(|r| r.word_count >= 1500)
        .take(120)
        .collect();
    ensure!(reports.len() >= 60, "only {} long reports", reports.len());
    let mean_words =
        reports.iter().map(|r| r.word_count).sum::<usize>() as f64 / reports.len() as f64;

    let models = [
        ("llama3:8b", 8.0, 11u64),
        ("phi3:14b", 14.0, 12),
        ("mistral:7b", 7.0, 13),
        ("llama3:70b", 70.0, 14),
        ("gemma2:9b", 9.0, 15),
    ];
    let mut configs = Vec::new();
    for (name, size, seed) in models {
        for mode in [RetrievalMode::Off, RetrievalMode::Sequential] {
            let mut c = PipelineConfig {
                model_name: name.into(),
                param_count_b: size,
                seed,
                ..PipelineConfig::default()
            };
            c.retrieval.mode = mode;
            configs.push(c);
        }
    }
    let backend = MockBackend::new(
        MockMode::Degrading {
            scale_words: 1500.0,
        },
        h.schema.clone(),
        gold.clone(),
    );
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.jsonl");
    run_sweep(&h.pipeline(&backend), &reports, &configs, &store, &quick())
        .map_err(|e| e.to_string())?;
    let records = load_records(&store).map_err(|e| e.to_string())?;
    let agg = aggregate(
        &records,
        &configs,
        &reports,
        &gold,
        &h.schema,
        &["retrieval.mode".into()],
    )
    .map_err(|e| e.to_string())?;
    let cmp = &agg.comparisons[0];
    ensure!(
        cmp.first == serde_json::json!("off"),
        "first value {}",
        cmp.first
    );
    ensure!(cmp.pairs.len() == models.len(), "{} pairs", cmp.pairs.len());
    for p in &cmp.pairs {
        ensure!(
            p.second_accuracy >= p.first_accuracy,
            "{}: RAG on {:.3} < off {:.3}",
            p.model_name,
            p.second_accuracy,
            p.first_accuracy
        );
    }
    let mean = cmp.mean_delta.unwrap_or(f64::NAN);
    ensure!(mean > 0.0, "mean delta {mean}");
    let ComparisonOutcome::PairedT { result } = &cmp.outcome else {
        return Err(format!("no paired t result: {:?}", cmp.outcome));
    };
    let rag_share =
        records.iter().filter(|r| r.rag_used).count() as f64 / (records.len() / 2) as f64;
    Ok(format!(
        "{} reports (mean {mean_words:.0} words), {} models: mean delta {:+.3} +/- {:.3}, paired t = {:.2}, p = {:.2e}; RAG used for {:.0}% of RAG-on pairs",
        reports.len(),
        models.len(),
        mean,
        cmp.sd_delta.unwrap_or(f64::NAN),
        result.statistic,
        result.p_value.unwrap_or(f64::NAN),
        100.0 * rag_share
    ))
}
