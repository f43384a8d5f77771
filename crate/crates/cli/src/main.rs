//! `extractor`: corpus generation, single-report extraction, sweeps and
//! sweep reports.

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use extractor_core::corpus::{
    class_counts, generate_synthetic_corpus, load_corpus, save_corpus, CorpusSpec, GoldAnnotation,
    LabelSchema, Report, Task,
};
use extractor_core::lm_client::{
    serve_mock, HashEmbedder, LmClient, MockBackend, MockMode, MockServerOptions, RemoteReranker,
    DEFAULT_ENDPOINT, ENDPOINT_ENV,
};
use extractor_core::prompting::{default_exemplars, FewShotExemplar, TemplateSet};
use extractor_core::retrieval::OverlapReranker;
use extractor_core::sweep::{
    aggregate, load_records, run_sweep, write_csv, Aggregate, ComparisonOutcome, Pipeline,
    PipelineConfig, SweepError, SweepGrid, SweepOptions, SweepProgress,
};

const EXIT_USAGE: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "extractor",
    version,
    about = "Extract categorical labels from clinical reports with a local language model"
)]
struct Cli {
    /// Model server base URL.
    #[arg(long, global = true, env = ENDPOINT_ENV, default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Label schema: `radiology`, `pathology` or a JSON file.
    #[arg(long, global = true)]
    schema: Option<String>,
    /// Directory of prompt template overrides.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic corpus as JSONL.
    GenerateCorpus(GenerateArgs),
    /// Run one report through the pipeline and print the result as JSON.
    Extract(ExtractArgs),
    /// Run or resume a configuration sweep.
    Sweep(SweepArgs),
    /// Score a completed sweep.
    Report(ReportArgs),
    /// Serve the mock backend over HTTP.
    MockServer(MockServerArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Corpus spec JSON; without it the reference spec for --task is used.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_parser = parse_task, default_value = "radiology")]
    task: Task,
    /// Number of reports (reference spec only).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MockArgs {
    /// Use the in-process mock instead of --endpoint: oracle, noisy:<eps>,
    /// garbage, malformed or degrading:<words>.
    #[arg(long, value_parser = parse_mock_mode)]
    mock: Option<MockMode>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Report file: a JSON object with `text` (and optionally `id`,
    /// `label`), or plain text. `-` reads stdin.
    #[arg(long, default_value = "-")]
    report: String,
    /// Take the report with this id from --corpus, or name a plain-text report.
    #[arg(long)]
    report_id: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// PipelineConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Include the raw model output.
    #[arg(long)]
    show_raw: bool,
    #[command(flatten)]
    mock: MockArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    parallelism: u32,
    /// Overrides the grid's sample seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero latency and timestamp fields so stores are reproducible.
    #[arg(long)]
    no_timestamps: bool,
    #[command(flatten)]
    mock: MockArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Binary axis to compare, e.g. `retrieval.mode`. Repeatable.
    #[arg(long)]
    compare: Vec<String>,
    /// CSV output path [default: store path with .csv].
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Comparisons JSON path [default: store path with .comparisons.json].
    #[arg(long)]
    json: Option<PathBuf>,
    /// Rows in the printed table.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct MockServerArgs {
    /// Labeled corpus the mock answers from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_parser = parse_mock_mode, default_value = "oracle")]
    mode: MockMode,
    #[arg(long, default_value = "127.0.0.1:11434")]
    addr: String,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Answer this many requests with HTTP 503 first.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
    #[arg(long, default_value_t = 8)]
    workers: usize,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

fn parse_mock_mode(s: &str) -> Result<MockMode, String> {
    s.parse()
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitContext<T> {
    fn exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn sweep_exit(e: SweepError) -> Failure {
    let code = match &e {
        SweepError::MissingRecords(_) => EXIT_INCOMPLETE,
        e if e.is_backend() => EXIT_BACKEND,
        _ => EXIT_USAGE,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::GenerateCorpus(a) => cmd_generate_corpus(a),
        Command::Extract(a) => cmd_extract(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Report(a) => cmd_report(&cli, a),
        Command::MockServer(a) => cmd_mock_server(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render_chain(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// The error and its causes, skipping causes already quoted by a parent.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn resolve_schema(arg: Option<&str>, fallback: Option<Task>) -> anyhow::Result<LabelSchema> {
    match arg {
        Some(name) => match name.parse::<Task>() {
            Ok(task) => Ok(LabelSchema::builtin(task)),
            Err(_) => LabelSchema::load(Path::new(name)).with_context(|| format!("schema {name}")),
        },
        None => fallback
            .map(LabelSchema::builtin)
            .ok_or_else(|| anyhow!("cannot infer the task; pass --schema")),
    }
}

fn load_templates(dir: Option<&Path>) -> anyhow::Result<TemplateSet> {
    match dir {
        Some(d) => {
            TemplateSet::load_dir(d).with_context(|| format!("templates in {}", d.display()))
        }
        None => Ok(TemplateSet::builtin()),
    }
}

fn load_labeled_corpus(path: &Path) -> anyhow::Result<(Vec<Report>, Vec<GoldAnnotation>)> {
    load_corpus(path).with_context(|| format!("corpus {}", path.display()))
}

fn gold_map(gold: &[GoldAnnotation]) -> HashMap<String, String> {
    gold.iter()
        .map(|g| (g.report_id.clone(), g.label.clone()))
        .collect()
}

/// Generator, embedder and reranker for one run.
enum Backend {
    Mock(MockBackend, HashEmbedder),
    Remote(LmClient, RemoteReranker),
}

impl Backend {
    fn new(
        endpoint: &str,
        mock: Option<MockMode>,
        schema: &LabelSchema,
        gold: HashMap<String, String>,
        config: &PipelineConfig,
    ) -> Self {
        match mock {
            Some(mode) => Backend::Mock(
                MockBackend::new(mode, schema.clone(), gold),
                HashEmbedder::default(),
            ),
            None => {
                let client =
                    LmClient::new(endpoint).with_embedding_model(&config.retrieval.embedding_model);
                let reranker =
                    RemoteReranker::new(client.clone(), &config.retrieval.reranker_model);
                Backend::Remote(client, reranker)
            }
        }
    }

    fn pipeline<'a>(
        &'a self,
        schema: &'a LabelSchema,
        templates: &'a TemplateSet,
        exemplars: &'a [FewShotExemplar],
    ) -> Pipeline<'a> {
        match self {
            Backend::Mock(g, e) => Pipeline {
                schema,
                templates,
                exemplars,
                generator: g,
                embedder: e,
                reranker: &OverlapReranker,
            },
            Backend::Remote(c, r) => Pipeline {
                schema,
                templates,
                exemplars,
                generator: c,
                embedder: c,
                reranker: r,
            },
        }
    }
}

fn cmd_generate_corpus(a: &GenerateArgs) -> Result<(), Failure> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("spec {}", path.display()))
                .exit(EXIT_USAGE)?;
            serde_json::from_str::<CorpusSpec>(&text)
                .with_context(|| format!("spec {}", path.display()))
                .exit(EXIT_USAGE)?
        }
        None => CorpusSpec::reference(a.task, a.n, 0),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (reports, gold) = generate_synthetic_corpus(&spec).exit(EXIT_USAGE)?;
    save_corpus(&a.out, &reports, &gold).exit(EXIT_USAGE)?;
    let schema = LabelSchema::builtin(spec.task);
    println!(
        "wrote {} {} reports to {}",
        reports.len(),
        spec.task,
        a.out.display()
    );
    println!(
        "{:<10} {:>8} {:>9} {:>9}",
        "label", "count", "share", "target"
    );
    for (label, count) in class_counts(&schema, &gold) {
        let target = spec.class_distribution.get(&label).copied().unwrap_or(0.0);
        println!(
            "{label:<10} {count:>8} {:>8.2}% {:>8.2}%",
            100.0 * count as f64 / reports.len() as f64,
            100.0 * target
        );
    }
    Ok(())
}

struct InputReport {
    report: Report,
    label: Option<String>,
}

fn read_input_report(
    a: &ExtractArgs,
    schema_arg: Option<&str>,
) -> anyhow::Result<(InputReport, Vec<GoldAnnotation>)> {
    if let Some(corpus) = &a.corpus {
        let (reports, gold) = load_labeled_corpus(corpus)?;
        let id = a
            .report_id
            .as_deref()
            .ok_or_else(|| anyhow!("--corpus needs --report-id"))?;
        let report = reports
            .into_iter()
            .find(|r| r.id == id)
            .ok_or_else(|| anyhow!("report {id} not in {}", corpus.display()))?;
        let label = gold
            .iter()
            .find(|g| g.report_id == id)
            .map(|g| g.label.clone());
        return Ok((InputReport { report, label }, gold));
    }

    let mut text = String::new();
    if a.report == "-" {
        std::io::stdin()
            .read_to_string(&mut text)
            .context("reading stdin")?;
    } else {
        text =
            std::fs::read_to_string(&a.report).with_context(|| format!("report {}", a.report))?;
    }
    let default_task = schema_arg.and_then(|s| s.parse::<Task>().ok());
    let fallback_id = a.report_id.clone().unwrap_or_else(|| "stdin".to_string());
    let trimmed = text.trim();
    let input = if trimmed.starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(trimmed.lines().next().unwrap_or(trimmed))
            .or_else(|_| serde_json::from_str(trimmed))
            .context("report JSON")?;
        let body = v
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| anyhow!("report JSON has no \"text\" field"))?;
        let id = v
            .get("id")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .unwrap_or(fallback_id);
        let task = match v.get("task").and_then(|t| t.as_str()) {
            Some(t) => t.parse::<Task>().map_err(|e| anyhow!("{e}"))?,
            None => default_task.unwrap_or(Task::Radiology),
        };
        InputReport {
            report: Report::new(id, task, body),
            label: v.get("label").and_then(|t| t.as_str()).map(str::to_string),
        }
    } else {
        InputReport {
            report: Report::new(fallback_id, default_task.unwrap_or(Task::Radiology), &text),
            label: None,
        }
    };
    let gold = input
        .label
        .iter()
        .map(|l| GoldAnnotation {
            report_id: input.report.id.clone(),
            label: l.clone(),
        })
        .collect();
    Ok((input, gold))
}

fn cmd_extract(cli: &Cli, a: &ExtractArgs) -> Result<(), Failure> {
    let (input, gold) = read_input_report(a, cli.schema.as_deref()).exit(EXIT_USAGE)?;
    let schema = resolve_schema(cli.schema.as_deref(), Some(input.report.task)).exit(EXIT_USAGE)?;
    let templates = load_templates(cli.templates.as_deref()).exit(EXIT_USAGE)?;
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("config {}", path.display()))
                .exit(EXIT_USAGE)?;
            serde_json::from_str::<PipelineConfig>(&text)
                .with_context(|| format!("config {}", path.display()))
                .exit(EXIT_USAGE)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let exemplars = default_exemplars(&schema);
    let backend = Backend::new(
        &cli.endpoint,
        a.mock.mock,
        &schema,
        gold_map(&gold),
        &config,
    );
    let pipeline = backend.pipeline(&schema, &templates, &exemplars);
    pipeline.check_config(&config).map_err(sweep_exit)?;
    let record = pipeline
        .extract(&input.report, &config, true)
        .map_err(sweep_exit)?;
    let mut out = serde_json::json!({
        "report_id": record.report_id,
        "label": record.parsed.as_prediction(),
        "rag_used": record.rag_used,
    });
    if a.show_raw {
        out["raw_output"] = record.raw_output.clone().into();
    }
    println!("{out}");
    Ok(())
}

struct SweepInputs {
    grid: SweepGrid,
    configs: Vec<PipelineConfig>,
    reports: Vec<Report>,
    gold: Vec<GoldAnnotation>,
}

/// Grid configs plus the report sample they run over.
fn sweep_inputs(
    grid_path: &Path,
    corpus: &Path,
    seed: Option<u64>,
) -> Result<SweepInputs, Failure> {
    let grid = SweepGrid::load(grid_path).map_err(sweep_exit)?;
    let configs = grid.enumerate_configs().map_err(sweep_exit)?;
    let (reports, gold) = load_labeled_corpus(corpus).exit(EXIT_USAGE)?;
    let reports = match grid.sample {
        Some(s) => extractor_core::sweep::sample_reports(&reports, s.n, seed.unwrap_or(s.seed))
            .map_err(sweep_exit)?,
        None => reports,
    };
    Ok(SweepInputs {
        grid,
        configs,
        reports,
        gold,
    })
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<(), Failure> {
    let SweepInputs {
        grid,
        configs,
        reports,
        gold,
    } = sweep_inputs(&a.grid, &a.corpus, a.seed)?;
    let schema =
        resolve_schema(cli.schema.as_deref(), reports.first().map(|r| r.task)).exit(EXIT_USAGE)?;
    let templates = load_templates(cli.templates.as_deref()).exit(EXIT_USAGE)?;
    let exemplars = default_exemplars(&schema);
    let backend = Backend::new(
        &cli.endpoint,
        a.mock.mock,
        &schema,
        gold_map(&gold),
        &grid.base,
    );
    let pipeline = backend.pipeline(&schema, &templates, &exemplars);

    eprintln!(
        "sweep: {} configurations x {} reports -> {}",
        configs.len(),
        reports.len(),
        a.store.display()
    );
    let progress = |p: SweepProgress| {
        let step = (p.pending / 20).max(1);
        if p.written.is_multiple_of(step) || p.written == p.pending {
            eprintln!("progress: {}/{}", p.written, p.pending);
        }
    };
    let options = SweepOptions {
        parallelism: a.parallelism as usize,
        timing: !a.no_timestamps,
        progress: Some(&progress),
        ..SweepOptions::default()
    };
    let summary =
        run_sweep(&pipeline, &reports, &configs, &a.store, &options).map_err(sweep_exit)?;
    eprintln!(
        "done: {} new records ({} invalid), {} already present, {} total",
        summary.written, summary.invalid, summary.already_done, summary.total_pairs
    );
    Ok(())
}

fn print_table(agg: &Aggregate, top: usize) {
    println!(
        "{:>4}  {:<16}  {:<20}  {:>7}  {:>5}  {:>8}  {:>8}  {:>8}  {:>7}",
        "rank", "config", "model", "params", "bits", "accuracy", "macroF1", "microF1", "invalid"
    );
    for (i, r) in agg.ranked().into_iter().take(top).enumerate() {
        let m = &r.metrics;
        println!(
            "{:>4}  {:<16}  {:<20}  {:>6}B  {:>5}  {:>8.4}  {:>8.4}  {:>8.4}  {:>7}",
            i + 1,
            r.config_hash,
            r.config.model_name,
            r.config.param_count_b,
            r.config.quant_bits,
            m.accuracy,
            m.macro_f1,
            m.micro_f1,
            m.invalid
        );
    }
    for c in &agg.comparisons {
        let outcome = match &c.outcome {
            ComparisonOutcome::PairedT { result } => format!(
                "paired t = {:.3}, df = {}, p = {:.4}",
                result.statistic,
                result.df.unwrap_or(f64::NAN),
                result.p_value.unwrap_or(f64::NAN)
            ),
            ComparisonOutcome::NoDifference => "no difference".into(),
            ComparisonOutcome::InsufficientPairs => "fewer than two pairs".into(),
            ComparisonOutcome::Undefined { reason } => format!("undefined ({reason})"),
        };
        println!(
            "{}: {} -> {}: {} pairs, mean delta {:+.4} (sd {:.4}); {outcome}",
            c.axis,
            c.first,
            c.second,
            c.pairs.len(),
            c.mean_delta.unwrap_or(f64::NAN),
            c.sd_delta.unwrap_or(f64::NAN),
        );
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<(), Failure> {
    let SweepInputs {
        configs,
        reports,
        gold,
        ..
    } = sweep_inputs(&a.grid, &a.corpus, a.seed)?;
    let schema =
        resolve_schema(cli.schema.as_deref(), reports.first().map(|r| r.task)).exit(EXIT_USAGE)?;
    let records = load_records(&a.store).map_err(sweep_exit)?;
    let agg = aggregate(
        &records,
        &configs,
        &reports,
        &gold_map(&gold),
        &schema,
        &a.compare,
    )
    .map_err(|e| {
        if let SweepError::MissingRecords(missing) = &e {
            eprintln!("{} (report, config) pairs are missing:", missing.len());
            for (report, config) in missing.iter().take(20) {
                eprintln!("  {report} {config}");
            }
            if missing.len() > 20 {
                eprintln!("  ... and {} more", missing.len() - 20);
            }
        }
        sweep_exit(e)
    })?;

    let csv_path = a
        .csv
        .clone()
        .unwrap_or_else(|| a.store.with_extension("csv"));
    let json_path = a
        .json
        .clone()
        .unwrap_or_else(|| with_suffix(&a.store.with_extension(""), ".comparisons.json"));
    let file = std::fs::File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))
        .exit(EXIT_USAGE)?;
    write_csv(&agg, file)
        .with_context(|| format!("writing {}", csv_path.display()))
        .exit(EXIT_USAGE)?;
    let json = serde_json::to_string_pretty(&agg.comparisons_json()).expect("serializes");
    std::fs::write(&json_path, json + "\n")
        .with_context(|| format!("writing {}", json_path.display()))
        .exit(EXIT_USAGE)?;
    print_table(&agg, a.top);
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn cmd_mock_server(cli: &Cli, a: &MockServerArgs) -> Result<(), Failure> {
    let (reports, gold) = load_labeled_corpus(&a.corpus).exit(EXIT_USAGE)?;
    let schema =
        resolve_schema(cli.schema.as_deref(), reports.first().map(|r| r.task)).exit(EXIT_USAGE)?;
    let backend = MockBackend::new(a.mode, schema, gold_map(&gold))
        .with_delay(Duration::from_millis(a.delay_ms));
    let server = serve_mock(
        &a.addr,
        backend,
        MockServerOptions {
            fail_first: a.fail_first,
            workers: a.workers,
        },
    )
    .with_context(|| format!("binding {}", a.addr))
    .exit(EXIT_USAGE)?;
    println!("listening on {}", server.url());
    loop {
        std::thread::park();
    }
}
