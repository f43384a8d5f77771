//! Client for a local model server (generation, embeddings, reranking) and a
//! deterministic mock backend that speaks the same protocol.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::LabelSchema;
use crate::prompting::report_id_in_prompt;
use crate::retrieval::{token_overlap, tokenize, unit_normalize, Embedder, RerankScorer};
use crate::stable_hash64;

/// Overrides the configured server endpoint.
pub const ENDPOINT_ENV: &str = "EXTRACTOR_LM_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str = "http://127.0.0.1:11434";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned HTTP {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("could not decode server response: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LmError {
    fn is_transient(&self) -> bool {
        match self {
            LmError::Transport(_) | LmError::Timeout => true,
            LmError::Protocol { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub model: String,
    pub prompt: String,
    pub json_mode: bool,
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.top_k < 1 {
            return Err(LmError::InvalidRequest("top_k must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LmError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Body of `POST /api/generate`.
    pub fn to_wire(&self) -> Value {
        let wire = WireGenerate {
            model: self.model.clone(),
            prompt: self.prompt.clone(),
            stream: false,
            format: self.json_mode.then(|| "json".to_string()),
            options: WireOptions {
                temperature: self.temperature,
                top_k: self.top_k,
                top_p: self.top_p,
                seed: self.seed,
            },
        };
        serde_json::to_value(wire).expect("request serializes")
    }

    pub fn from_wire(body: &Value) -> Result<Self, LmError> {
        let wire: WireGenerate =
            serde_json::from_value(body.clone()).map_err(|e| LmError::Decode(e.to_string()))?;
        Ok(Self {
            model: wire.model,
            prompt: wire.prompt,
            json_mode: wire.format.as_deref() == Some("json"),
            temperature: wire.options.temperature,
            top_k: wire.options.top_k,
            top_p: wire.options.top_p,
            seed: wire.options.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireGenerate {
    model: String,
    prompt: String,
    stream: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    options: WireOptions,
}

#[derive(Serialize, Deserialize)]
struct WireOptions {
    temperature: f64,
    top_k: u32,
    top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResponse {
    pub raw_text: String,
    pub latency_ms: f64,
    pub model_echo: String,
}

/// Anything that turns a prompt into a completion.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LmError>;
}

/// Retry and timeout policy for [`LmClient`].
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Returns the endpoint from the environment when set, else `configured`.
pub fn resolve_endpoint(configured: Option<&str>) -> String {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .or_else(|| configured.map(str::to_string))
        .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string())
}

/// Blocking HTTP client. Safe to share across threads.
#[derive(Clone)]
pub struct LmClient {
    endpoint: String,
    agent: ureq::Agent,
    policy: RetryPolicy,
    embedding_model: String,
}

impl std::fmt::Debug for LmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmClient")
            .field("endpoint", &self.endpoint)
            .field("policy", &self.policy)
            .finish()
    }
}

impl LmClient {
    pub fn new(endpoint: &str) -> Self {
        Self::with_policy(endpoint, RetryPolicy::default())
    }

    pub fn with_policy(endpoint: &str, policy: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(policy.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            policy,
            embedding_model: "gte-large".into(),
        }
    }

    pub fn with_embedding_model(mut self, model: &str) -> Self {
        self.embedding_model = model.to_string();
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, LmError> {
        let url = format!("{}{}", self.endpoint, path);
        let mut resp = self.agent.post(&url).send_json(body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if !(200..300).contains(&status) {
            return Err(LmError::Protocol { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| LmError::Decode(e.to_string()))
    }

    /// Posts with exponential backoff on transient failures.
    fn post(&self, path: &str, body: &Value) -> Result<Value, LmError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.policy.retries => {
                    let wait = self.policy.backoff_base * 2u32.pow(attempt);
                    log::debug!(
                        "{path} attempt {} failed ({e}); retrying in {wait:?}",
                        attempt + 1
                    );
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>, LmError> {
        let body = json!({"model": self.embedding_model, "prompt": text});
        let resp = self.post("/api/embeddings", &body)?;
        let raw: Vec<f64> = resp
            .get("embedding")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| LmError::Decode(e.to_string()))?
            .ok_or_else(|| LmError::Decode("response has no \"embedding\" field".into()))?;
        unit_normalize(&raw).map_err(|e| LmError::Decode(e.to_string()))
    }
}

fn map_ureq(e: ureq::Error) -> LmError {
    match e {
        ureq::Error::Timeout(_) => LmError::Timeout,
        ureq::Error::Json(e) => LmError::Decode(e.to_string()),
        other => LmError::Transport(other.to_string()),
    }
}

impl Generator for LmClient {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LmError> {
        request.validate()?;
        let started = Instant::now();
        let resp = self.post("/api/generate", &request.to_wire())?;
        let raw_text = resp
            .get("response")
            .and_then(Value::as_str)
            .ok_or_else(|| LmError::Decode("response has no \"response\" string".into()))?
            .to_string();
        let model_echo = resp
            .get("model")
            .and_then(Value::as_str)
            .unwrap_or(&request.model)
            .to_string();
        Ok(GenerationResponse {
            raw_text,
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            model_echo,
        })
    }
}

impl Embedder for LmClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
        if texts.is_empty() {
            return Err(LmError::InvalidRequest("no texts to embed".into()));
        }
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Cross-encoder reranker behind `POST /api/rerank`.
#[derive(Debug, Clone)]
pub struct RemoteReranker {
    client: LmClient,
    model: String,
    /// Backend returns raw logits that need a logistic squash.
    pub logits: bool,
}

impl RemoteReranker {
    pub fn new(client: LmClient, model: &str) -> Self {
        Self {
            client,
            model: model.to_string(),
            logits: false,
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RerankScorer for RemoteReranker {
    fn score(&self, query: &str, passage: &str) -> Result<f64, LmError> {
        let body = json!({"model": self.model, "query": query, "documents": [passage]});
        let resp = self.client.post("/api/rerank", &body)?;
        let score = resp
            .pointer("/results/0/relevance_score")
            .and_then(Value::as_f64)
            .ok_or_else(|| LmError::Decode("missing results[0].relevance_score".into()))?;
        Ok(if self.logits { logistic(score) } else { score })
    }
}

/// Deterministic embedder: each token maps to a seeded pseudo-random
/// vector and a text embeds as the normalized sum over its token multiset.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: 64,
            seed: 0,
        }
    }
}

impl HashEmbedder {
    fn token_vector(&self, token: &str, out: &mut [f64]) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stable_hash64(&[&self.seed.to_le_bytes(), token.as_bytes()]));
        for x in out.iter_mut() {
            *x += rng.random_range(-1.0..1.0);
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            self.token_vector("\u{0}empty", &mut v);
        }
        for t in &tokens {
            self.token_vector(t, &mut v);
        }
        unit_normalize(&v).unwrap_or_else(|_| {
            let mut e = vec![0.0; self.dimension];
            e[0] = 1.0;
            e
        })
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Deserialize)]
struct MockFixtures {
    garbage: String,
    malformed: Vec<String>,
}

static FIXTURES: LazyLock<MockFixtures> = LazyLock::new(|| {
    serde_json::from_str(include_str!("../data/mock_fixtures.json")).expect("valid fixture file")
});

/// The fixed non-JSON reply of the garbage mode.
pub fn garbage_reply() -> &'static str {
    &FIXTURES.garbage
}

/// Malformed replies, with `<KEY>` and `<LABEL>` still unexpanded.
pub fn malformed_templates() -> &'static [String] {
    &FIXTURES.malformed
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MockMode {
    /// Always the gold label.
    Oracle,
    /// A uniformly drawn wrong label with probability `epsilon`.
    NoisyOracle { epsilon: f64 },
    /// Fixed prose, no JSON.
    Garbage,
    /// Broken JSON variants from the fixture list.
    Malformed,
    /// Wrong with probability `1 - exp(-words / scale_words)`, where
    /// `words` counts the prompt; long contexts hurt.
    Degrading { scale_words: f64 },
}

impl std::str::FromStr for MockMode {
    type Err = String;

    /// `oracle`, `noisy:<eps>`, `garbage`, `malformed`, `degrading:<words>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64, String> {
            a.ok_or_else(|| format!("mode {name} needs a parameter"))?
                .parse::<f64>()
                .map_err(|e| e.to_string())
        };
        match name.to_ascii_lowercase().as_str() {
            "oracle" => Ok(MockMode::Oracle),
            "noisy" | "noisyoracle" => {
                let epsilon = num(arg)?;
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err("noise rate must be in [0, 1]".into());
                }
                Ok(MockMode::NoisyOracle { epsilon })
            }
            "garbage" => Ok(MockMode::Garbage),
            "malformed" => Ok(MockMode::Malformed),
            "degrading" => {
                let scale_words = num(arg)?;
                if !(scale_words > 0.0) {
                    return Err("degrading scale must be positive".into());
                }
                Ok(MockMode::Degrading { scale_words })
            }
            other => Err(format!("unknown mock mode {other:?}")),
        }
    }
}

/// In-process stand-in for a model server that knows the gold labels.
///
/// The target report is found through the report-id line every prompt
/// carries. Randomness comes from the request seed, so replies do not
/// depend on call order.
#[derive(Debug, Clone)]
pub struct MockBackend {
    mode: MockMode,
    schema: LabelSchema,
    gold: Arc<HashMap<String, String>>,
    delay: Duration,
}

impl MockBackend {
    pub fn new(mode: MockMode, schema: LabelSchema, gold: HashMap<String, String>) -> Self {
        Self {
            mode,
            schema,
            gold: Arc::new(gold),
            delay: Duration::ZERO,
        }
    }

    /// Sleep this long before every reply.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn mode(&self) -> MockMode {
        self.mode
    }

    fn wrap(&self, label: &str, json_mode: bool) -> String {
        let obj = json!({ self.schema.answer_key.as_str(): label }).to_string();
        // serde_json emits {"k":"v"}; match the spacing of typical servers
        let obj = obj.replacen("\":", "\": ", 1);
        if json_mode {
            obj
        } else {
            format!("Based on the report, the answer is {obj}")
        }
    }

    fn wrong_label(&self, gold: &str, rng: &mut ChaCha8Rng) -> String {
        let others: Vec<&String> = self
            .schema
            .valid_labels
            .iter()
            .filter(|l| *l != gold)
            .collect();
        others
            .choose(rng)
            .map(|s| s.to_string())
            .unwrap_or_else(|| gold.to_string())
    }

    pub fn reply(&self, request: &GenerationRequest) -> String {
        let gold = report_id_in_prompt(&request.prompt).and_then(|id| self.gold.get(id));
        let Some(gold) = gold else {
            return garbage_reply().to_string();
        };
        let seed = request
            .seed
            .unwrap_or_else(|| stable_hash64(&[request.prompt.as_bytes()]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.mode {
            MockMode::Oracle => self.wrap(gold, request.json_mode),
            MockMode::NoisyOracle { epsilon } => {
                if rng.random::<f64>() < epsilon {
                    self.wrap(&self.wrong_label(gold, &mut rng), request.json_mode)
                } else {
                    self.wrap(gold, request.json_mode)
                }
            }
            MockMode::Garbage => garbage_reply().to_string(),
            MockMode::Malformed => malformed_templates()
                .choose(&mut rng)
                .expect("fixture list is nonempty")
                .replace("<KEY>", &self.schema.answer_key)
                .replace("<LABEL>", gold),
            MockMode::Degrading { scale_words } => {
                let words = request.prompt.split_whitespace().count() as f64;
                let p_err = 1.0 - (-words / scale_words).exp();
                if rng.random::<f64>() < p_err {
                    self.wrap(&self.wrong_label(gold, &mut rng), request.json_mode)
                } else {
                    self.wrap(gold, request.json_mode)
                }
            }
        }
    }
}

impl Generator for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LmError> {
        request.validate()?;
        let started = Instant::now();
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let raw_text = self.reply(request);
        Ok(GenerationResponse {
            raw_text,
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            model_echo: request.model.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockServerOptions {
    /// Answer this many requests with HTTP 503 before behaving normally.
    pub fail_first: usize,
    pub workers: usize,
}

/// A running mock server. Shuts down when dropped.
pub struct MockServer {
    server: Arc<tiny_http::Server>,
    url: String,
    requests: Arc<AtomicUsize>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    pub fn url(&self) -> &str {
        &self.url
    }

    /// Requests received so far, including injected failures.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Serves `backend` over HTTP on an ephemeral localhost port, with the
/// hash embedder on `/api/embeddings` and the token-overlap reranker on
/// `/api/rerank`.
pub fn mock_server(
    backend: MockBackend,
    options: MockServerOptions,
) -> std::io::Result<MockServer> {
    serve_mock("127.0.0.1:0", backend, options)
}

pub fn serve_mock(
    addr: &str,
    backend: MockBackend,
    options: MockServerOptions,
) -> std::io::Result<MockServer> {
    let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
    let url = match server.server_addr().to_ip() {
        Some(a) => format!("http://{a}"),
        None => return Err(std::io::Error::other("mock server needs a TCP address")),
    };
    let server = Arc::new(server);
    let requests = Arc::new(AtomicUsize::new(0));
    let backend = Arc::new(backend);
    let workers = (0..options.workers.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            let backend = Arc::clone(&backend);
            let fail_first = options.fail_first;
            std::thread::spawn(move || {
                while let Ok(mut req) = server.recv() {
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let (status, body) = if n < fail_first {
                        (503, json!({"error": "injected failure"}).to_string())
                    } else {
                        handle_mock_request(&backend, &mut req)
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                        .expect("static header");
                    let resp = tiny_http::Response::from_string(body)
                        .with_status_code(status)
                        .with_header(header);
                    let _ = req.respond(resp);
                }
            })
        })
        .collect();
    Ok(MockServer {
        server,
        url,
        requests,
        workers,
    })
}

fn handle_mock_request(backend: &MockBackend, req: &mut tiny_http::Request) -> (u16, String) {
    let mut text = String::new();
    if req.as_reader().read_to_string(&mut text).is_err() {
        return (400, json!({"error": "unreadable body"}).to_string());
    }
    let body: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return (400, json!({"error": e.to_string()}).to_string()),
    };
    let path = req.url().split('?').next().unwrap_or("").to_string();
    match (req.method(), path.as_str()) {
        (tiny_http::Method::Post, "/api/generate") => match GenerationRequest::from_wire(&body) {
            Ok(r) => match backend.generate(&r) {
                Ok(resp) => (
                    200,
                    json!({"model": resp.model_echo, "response": resp.raw_text, "done": true})
                        .to_string(),
                ),
                Err(e) => (400, json!({"error": e.to_string()}).to_string()),
            },
            Err(e) => (400, json!({"error": e.to_string()}).to_string()),
        },
        (tiny_http::Method::Post, "/api/embeddings") => {
            match body.get("prompt").and_then(Value::as_str) {
                Some(p) => (
                    200,
                    json!({"embedding": HashEmbedder::default().embed_text(p)}).to_string(),
                ),
                None => (400, json!({"error": "missing prompt"}).to_string()),
            }
        }
        (tiny_http::Method::Post, "/api/rerank") => {
            let query = body.get("query").and_then(Value::as_str).unwrap_or("");
            let docs: Vec<&str> = body
                .get("documents")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).collect())
                .unwrap_or_default();
            let results: Vec<Value> = docs
                .iter()
                .enumerate()
                .map(|(i, d)| json!({"index": i, "relevance_score": token_overlap(query, d)}))
                .collect();
            (200, json!({ "results": results }).to_string())
        }
        _ => (
            404,
            json!({"error": format!("no route for {path}")}).to_string(),
        ),
    }
}
