//! Preference summarization pipeline: renders per-user prompts over each
//! history channel, obtains text summaries from a pluggable client (HTTP
//! LLM, deterministic mock, or replay-from-cache), and encodes summaries
//! into fixed-width vectors with a frozen embedding client.
//!
//! All network results are cached on disk keyed by SHA-256 of (client id,
//! input text); cache writes go through temp-file-then-rename so concurrent
//! workers never observe torn files.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Channel, Dataset, UserHistory};

#[derive(thiserror::Error, Debug)]
pub enum PrefsError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("client error: {0}")]
    Client(String),
    #[error("replay cache miss for key {0}")]
    ReplayMiss(String),
    #[error("embedding dimension mismatch: saw {seen}, expected {expected}")]
    DimMismatch { seen: usize, expected: usize },
    #[error("non-finite embedding value for user {user} ({kind})")]
    NonFinite { user: String, kind: Channel },
    #[error("empty summary for user {user} ({kind})")]
    EmptySummary { user: String, kind: Channel },
    #[error("corrupt cache file {0}")]
    CorruptCache(PathBuf),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("user {user} is missing a {kind} record")]
    MissingChannel { user: String, kind: Channel },
}

const SEARCH_TEMPLATE_HEAD: &str = "Please analyze the queries and clicked items in the user's \
search history, and summarize the user's interest topics, areas of focus, style tendencies, or \
preference types. Here is the user's search history ";
const SEARCH_TEMPLATE_TAIL: &str = ", where each record contains the user's query and the items \
the user clicked on under that query.";
const REC_TEMPLATE_HEAD: &str = "Please analyze the provided user recommendation history and \
summarize the user's possible interests, style tendencies, and preferred item types. Here is \
the user's recommendation history ";
const REC_TEMPLATE_TAIL: &str = ", where each record represents an item the user has clicked on.";

pub const EMPTY_SEARCH_MARKER: &str = "(no search history)";
pub const EMPTY_REC_MARKER: &str = "(no recommendation history)";

/// A rendered prompt for one user and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptText {
    pub user_id: usize,
    pub kind: Channel,
    pub text: String,
}

/// Summary plus frozen embedding for one user and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceRecord {
    pub user_id: usize,
    pub user_key: String,
    pub kind: Channel,
    pub summary: String,
    pub embedding: Vec<f32>,
}

fn item_display(ds: &Dataset, item: usize) -> &str {
    let it = &ds.items[item];
    if it.text.is_empty() {
        &it.key
    } else {
        &it.text
    }
}

fn query_display(ds: &Dataset, query: usize) -> String {
    ds.queries[query].words.iter().map(|w| ds.vocab[*w].as_str()).collect::<Vec<_>>().join(" ")
}

/// Renders one channel's prompt. Histories are truncated to the most recent
/// `truncate` events; an empty channel renders a literal placeholder marker
/// so every user still produces a summary.
pub fn render_prompt(
    ds: &Dataset,
    user: &UserHistory,
    kind: Channel,
    truncate: usize,
) -> PromptText {
    let history = match kind {
        Channel::Search => {
            if user.search.is_empty() {
                EMPTY_SEARCH_MARKER.to_string()
            } else {
                let start = user.search.len().saturating_sub(truncate);
                user.search[start..]
                    .iter()
                    .enumerate()
                    .map(|(n, s)| {
                        let clicked = if s.clicked.is_empty() {
                            "(none)".to_string()
                        } else {
                            s.clicked
                                .iter()
                                .map(|i| item_display(ds, *i))
                                .collect::<Vec<_>>()
                                .join("; ")
                        };
                        format!("{}. query: {}; clicked: {}", n + 1, query_display(ds, s.query), clicked)
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
        }
        Channel::Rec => {
            if user.rec.is_empty() {
                EMPTY_REC_MARKER.to_string()
            } else {
                let start = user.rec.len().saturating_sub(truncate);
                user.rec[start..]
                    .iter()
                    .enumerate()
                    .map(|(n, e)| format!("{}. {}", n + 1, item_display(ds, e.item)))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
        }
    };
    let text = match kind {
        Channel::Search => format!("{SEARCH_TEMPLATE_HEAD}{history}{SEARCH_TEMPLATE_TAIL}"),
        Channel::Rec => format!("{REC_TEMPLATE_HEAD}{history}{REC_TEMPLATE_TAIL}"),
    };
    PromptText { user_id: user.user_id, kind, text }
}

/// Prompts for every user in id order, one channel.
pub fn render_all_prompts(ds: &Dataset, kind: Channel, truncate: usize) -> Vec<PromptText> {
    ds.users.iter().map(|u| render_prompt(ds, u, kind, truncate)).collect()
}

/// Extracts the serialized history block back out of a rendered prompt.
/// Used by the deterministic mock, which must be a pure function of the
/// prompt text alone.
fn history_span(prompt: &str) -> &str {
    let start = if let Some(p) = prompt.find(SEARCH_TEMPLATE_HEAD) {
        p + SEARCH_TEMPLATE_HEAD.len()
    } else if let Some(p) = prompt.find(REC_TEMPLATE_HEAD) {
        p + REC_TEMPLATE_HEAD.len()
    } else {
        0
    };
    let end = prompt.rfind(", where each record").unwrap_or(prompt.len());
    &prompt[start..end.max(start)]
}

// ---- clients ----

pub trait SummaryClient: Send + Sync {
    /// Stable identifier mixed into cache keys.
    fn id(&self) -> &str;
    fn summarize(&self, prompt: &str) -> Result<String, PrefsError>;
}

pub trait EmbeddingClient: Send + Sync {
    fn id(&self) -> &str;
    /// Expected output width when known ahead of the first call.
    fn dim_hint(&self) -> Option<usize>;
    fn embed(&self, text: &str) -> Result<Vec<f32>, PrefsError>;
}

/// Words the mock summarizer ignores: serialization scaffolding from the
/// prompt renderer, not user content.
const MOCK_STOPWORDS: [&str; 8] =
    ["query", "clicked", "none", "no", "search", "recommendation", "history", "preference"];

/// Deterministic summarizer: the five most frequent content words of the
/// serialized history (count descending, then lexicographic). Pure function
/// of the prompt text, so identical prompts always cache-hit identically.
pub struct MockSummarizer;

impl SummaryClient for MockSummarizer {
    fn id(&self) -> &str {
        "mock-topwords-v1"
    }

    fn summarize(&self, prompt: &str) -> Result<String, PrefsError> {
        let span = history_span(prompt);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for raw in span.split(|c: char| !c.is_ascii_alphanumeric()) {
            if raw.is_empty() {
                continue;
            }
            let w = raw.to_ascii_lowercase();
            if MOCK_STOPWORDS.contains(&w.as_str()) || w.chars().all(|c| c.is_ascii_digit()) {
                continue;
            }
            *counts.entry(w).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(5);
        if ranked.is_empty() {
            return Ok("(no preference signal)".to_string());
        }
        Ok(ranked.into_iter().map(|(w, _)| w).collect::<Vec<_>>().join(" "))
    }
}

/// Client that never calls out: every request must already be cached.
pub struct ReplaySummarizer {
    /// Mimics the id of the client that originally filled the cache.
    pub source_id: String,
}

impl SummaryClient for ReplaySummarizer {
    fn id(&self) -> &str {
        &self.source_id
    }

    fn summarize(&self, prompt: &str) -> Result<String, PrefsError> {
        Err(PrefsError::ReplayMiss(cache_key(&self.source_id, prompt)))
    }
}

/// Embedding twin of [`ReplaySummarizer`]: serves cached vectors only.
pub struct ReplayEmbedder {
    pub source_id: String,
}

impl EmbeddingClient for ReplayEmbedder {
    fn id(&self) -> &str {
        &self.source_id
    }

    fn dim_hint(&self) -> Option<usize> {
        None
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, PrefsError> {
        Err(PrefsError::ReplayMiss(cache_key(&self.source_id, text)))
    }
}

/// Feature-hashing bag-of-words embedder: each word hashes (FNV-1a) to a
/// bucket and a sign, counts are accumulated and L2-normalized. Stable
/// across platforms and pure in the input text.
pub struct MockEmbedder {
    pub dim: usize,
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c9dc5;
    for b in bytes {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

impl EmbeddingClient for MockEmbedder {
    fn id(&self) -> &str {
        "mock-hash-v1"
    }

    fn dim_hint(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, PrefsError> {
        let mut v = vec![0.0f32; self.dim];
        for raw in text.split(|c: char| !c.is_ascii_alphanumeric()) {
            if raw.is_empty() {
                continue;
            }
            let h = fnv1a(raw.to_ascii_lowercase().as_bytes());
            let bucket = (h % self.dim as u32) as usize;
            let sign = if (h >> 31) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-12 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Ok(v)
    }
}

// ---- HTTP clients (single-turn chat completion / embeddings) ----

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

pub struct HttpSummarizer {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    client: reqwest::blocking::Client,
    cache_id: String,
}

impl HttpSummarizer {
    pub fn new(url: String, model: String, api_key: Option<String>) -> Result<Self, PrefsError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| PrefsError::Client(e.to_string()))?;
        let cache_id = format!("http-llm:{model}");
        Ok(HttpSummarizer { url, model, api_key, client, cache_id })
    }

    /// Reads GSEREC_LLM_URL, GSEREC_LLM_MODEL, GSEREC_LLM_KEY.
    pub fn from_env() -> Result<Self, PrefsError> {
        let url = std::env::var("GSEREC_LLM_URL")
            .map_err(|_| PrefsError::Client("GSEREC_LLM_URL not set".into()))?;
        let model = std::env::var("GSEREC_LLM_MODEL")
            .map_err(|_| PrefsError::Client("GSEREC_LLM_MODEL not set".into()))?;
        let key = std::env::var("GSEREC_LLM_KEY").ok();
        Self::new(url, model, key)
    }
}

impl SummaryClient for HttpSummarizer {
    fn id(&self) -> &str {
        &self.cache_id
    }

    fn summarize(&self, prompt: &str) -> Result<String, PrefsError> {
        let req = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage { role: "user", content: prompt }],
        };
        let mut call = self.client.post(&self.url).json(&req);
        if let Some(k) = &self.api_key {
            call = call.bearer_auth(k);
        }
        let resp = call.send().map_err(|e| PrefsError::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(PrefsError::Client(format!("status {}", resp.status())));
        }
        let body: ChatResponse = resp.json().map_err(|e| PrefsError::Client(e.to_string()))?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| PrefsError::Client("response has no choices".into()))?;
        Ok(choice.message.content)
    }
}

#[derive(Serialize)]
struct EmbRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbDatum {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct EmbResponse {
    data: Vec<EmbDatum>,
}

pub struct HttpEmbedder {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    client: reqwest::blocking::Client,
    cache_id: String,
}

impl HttpEmbedder {
    pub fn new(url: String, model: String, api_key: Option<String>) -> Result<Self, PrefsError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| PrefsError::Client(e.to_string()))?;
        let cache_id = format!("http-emb:{model}");
        Ok(HttpEmbedder { url, model, api_key, client, cache_id })
    }

    /// Reads GSEREC_EMB_URL, GSEREC_EMB_MODEL, GSEREC_EMB_KEY.
    pub fn from_env() -> Result<Self, PrefsError> {
        let url = std::env::var("GSEREC_EMB_URL")
            .map_err(|_| PrefsError::Client("GSEREC_EMB_URL not set".into()))?;
        let model = std::env::var("GSEREC_EMB_MODEL")
            .map_err(|_| PrefsError::Client("GSEREC_EMB_MODEL not set".into()))?;
        let key = std::env::var("GSEREC_EMB_KEY").ok();
        Self::new(url, model, key)
    }
}

impl EmbeddingClient for HttpEmbedder {
    fn id(&self) -> &str {
        &self.cache_id
    }

    fn dim_hint(&self) -> Option<usize> {
        None
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, PrefsError> {
        let req = EmbRequest { model: &self.model, input: vec![text] };
        let mut call = self.client.post(&self.url).json(&req);
        if let Some(k) = &self.api_key {
            call = call.bearer_auth(k);
        }
        let resp = call.send().map_err(|e| PrefsError::Client(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(PrefsError::Client(format!("status {}", resp.status())));
        }
        let body: EmbResponse = resp.json().map_err(|e| PrefsError::Client(e.to_string()))?;
        let datum = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| PrefsError::Client("response has no data".into()))?;
        Ok(datum.embedding)
    }
}

// ---- cache ----

pub fn cache_key(client_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(client_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn atomic_write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), PrefsError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(dir.join(name)).map_err(|e| PrefsError::Io(e.error))?;
    Ok(())
}

/// Little-endian f32 vector file: u32 element count, then the payload.
pub fn write_f32_file(dir: &Path, name: &str, v: &[f32]) -> Result<(), PrefsError> {
    let mut bytes = Vec::with_capacity(4 + 4 * v.len());
    bytes.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    atomic_write(dir, name, &bytes)
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>, PrefsError> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 4];
    f.read_exact(&mut head).map_err(|_| PrefsError::CorruptCache(path.to_path_buf()))?;
    let n = u32::from_le_bytes(head) as usize;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != 4 * n {
        return Err(PrefsError::CorruptCache(path.to_path_buf()));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ---- pipeline stages ----

/// Worker-pool knobs shared by both stages.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Most-recent events kept when rendering prompts.
    pub truncate: usize,
    /// Max client attempts per input before it lands in the failure manifest.
    pub retries: usize,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { truncate: 50, retries: 3, workers: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureEntry {
    pub user: String,
    pub kind: Channel,
    pub error: String,
}

/// Summary stage result for one prompt.
#[derive(Clone, Debug)]
pub struct SummaryRecord {
    pub user_id: usize,
    pub user_key: String,
    pub kind: Channel,
    pub summary_sha: String,
    pub summary: String,
}

#[derive(Debug, Default)]
pub struct StageStats {
    pub client_calls: usize,
    pub cache_hits: usize,
}

pub struct SummarizeOutcome {
    pub records: Vec<SummaryRecord>,
    pub failures: Vec<FailureEntry>,
    pub stats: StageStats,
}

/// Runs a bounded worker pool over indexed jobs, writing results into a
/// slot vector so output order matches input order regardless of timing.
fn run_pool<T: Send, F>(n_jobs: usize, workers: usize, job: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n_jobs).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(n_jobs.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_jobs {
                    break;
                }
                let out = job(i);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("job not run")).collect()
}

/// Obtains (or replays) a summary per prompt. Cache hits never touch the
/// client; failures are retried then reported, leaving other users intact.
pub fn summarize_preferences(
    client: &dyn SummaryClient,
    ds: &Dataset,
    prompts: &[PromptText],
    cache_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<SummarizeOutcome, PrefsError> {
    fs::create_dir_all(cache_dir)?;
    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);

    let results = run_pool(prompts.len(), cfg.workers, |i| {
        let p = &prompts[i];
        let sha = cache_key(client.id(), &p.text);
        let path = cache_dir.join(format!("{sha}.summary.txt"));
        if path.exists() {
            match fs::read_to_string(&path) {
                Ok(summary) => {
                    hits.fetch_add(1, Ordering::Relaxed);
                    return Ok((sha, summary));
                }
                Err(e) => return Err(format!("cache read: {e}")),
            }
        }
        let mut last_err = String::new();
        for _attempt in 0..cfg.retries.max(1) {
            calls.fetch_add(1, Ordering::Relaxed);
            match client.summarize(&p.text) {
                Ok(summary) => {
                    if let Err(e) = atomic_write(
                        cache_dir,
                        &format!("{sha}.summary.txt"),
                        summary.as_bytes(),
                    ) {
                        return Err(format!("cache write: {e}"));
                    }
                    return Ok((sha, summary));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(last_err)
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (p, res) in prompts.iter().zip(results) {
        let user_key = ds.users[p.user_id].key.clone();
        match res {
            Ok((summary_sha, summary)) => records.push(SummaryRecord {
                user_id: p.user_id,
                user_key,
                kind: p.kind,
                summary_sha,
                summary,
            }),
            Err(error) => failures.push(FailureEntry { user: user_key, kind: p.kind, error }),
        }
    }
    Ok(SummarizeOutcome {
        records,
        failures,
        stats: StageStats {
            client_calls: calls.into_inner(),
            cache_hits: hits.into_inner(),
        },
    })
}

pub struct EmbedOutcome {
    pub records: Vec<PreferenceRecord>,
    pub failures: Vec<FailureEntry>,
    pub stats: StageStats,
}

/// Embeds summaries with the frozen client, caching vectors beside the
/// summaries. Aborts on any cross-batch dimension disagreement.
pub fn embed_preferences(
    embedder: &dyn EmbeddingClient,
    summaries: &[SummaryRecord],
    cache_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<EmbedOutcome, PrefsError> {
    fs::create_dir_all(cache_dir)?;
    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);

    let results = run_pool(summaries.len(), cfg.workers, |i| {
        let s = &summaries[i];
        if s.summary.is_empty() {
            return Err("empty summary".to_string());
        }
        let sha = cache_key(embedder.id(), &s.summary);
        let path = cache_dir.join(format!("{sha}.emb.f32"));
        if path.exists() {
            match read_f32_file(&path) {
                Ok(v) => {
                    hits.fetch_add(1, Ordering::Relaxed);
                    return Ok((sha, v));
                }
                Err(e) => return Err(format!("cache read: {e}")),
            }
        }
        let mut last_err = String::new();
        for _attempt in 0..cfg.retries.max(1) {
            calls.fetch_add(1, Ordering::Relaxed);
            match embedder.embed(&s.summary) {
                Ok(v) => {
                    if let Err(e) = write_f32_file(cache_dir, &format!("{sha}.emb.f32"), &v) {
                        return Err(format!("cache write: {e}"));
                    }
                    return Ok((sha, v));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(last_err)
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut dim: Option<usize> = embedder.dim_hint();
    for (s, res) in summaries.iter().zip(results) {
        match res {
            Ok((emb_sha, v)) => {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(PrefsError::DimMismatch { seen: v.len(), expected: d })
                    }
                    _ => {}
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(PrefsError::NonFinite {
                        user: s.user_key.clone(),
                        kind: s.kind,
                    });
                }
                let _ = &emb_sha;
                records.push(PreferenceRecord {
                    user_id: s.user_id,
                    user_key: s.user_key.clone(),
                    kind: s.kind,
                    summary: s.summary.clone(),
                    embedding: v,
                });
            }
            Err(error) => {
                failures.push(FailureEntry { user: s.user_key.clone(), kind: s.kind, error })
            }
        }
    }
    Ok(EmbedOutcome {
        records,
        failures,
        stats: StageStats {
            client_calls: calls.into_inner(),
            cache_hits: hits.into_inner(),
        },
    })
}

// ---- prefs directory (manifest + cache files) ----

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    user: String,
    kind: Channel,
    summary_sha: String,
    emb_sha: String,
    dim: usize,
}

/// Persists the manifest tying users to their cached summary/embedding
/// files, plus a failure manifest when anything was skipped.
pub fn write_manifest(
    dir: &Path,
    embedder_id: &str,
    records: &[PreferenceRecord],
    failures: &[FailureEntry],
) -> Result<(), PrefsError> {
    let mut buf = Vec::new();
    for r in records {
        let entry = ManifestEntry {
            user: r.user_key.clone(),
            kind: r.kind,
            summary_sha: String::new(),
            emb_sha: cache_key(embedder_id, &r.summary),
            dim: r.embedding.len(),
        };
        serde_json::to_writer(&mut buf, &entry)
            .map_err(|e| PrefsError::Manifest(e.to_string()))?;
        buf.push(b'\n');
    }
    atomic_write(dir, "prefs.jsonl", &buf)?;
    if !failures.is_empty() {
        let mut fb = Vec::new();
        for f in failures {
            serde_json::to_writer(&mut fb, f).map_err(|e| PrefsError::Manifest(e.to_string()))?;
            fb.push(b'\n');
        }
        atomic_write(dir, "failures.jsonl", &fb)?;
    }
    Ok(())
}

/// Loads records back from a prefs directory, re-keying users against the
/// dataset. Every user must own both channels.
pub fn load_preferences(dir: &Path, ds: &Dataset) -> Result<Vec<PreferenceRecord>, PrefsError> {
    let manifest = dir.join("prefs.jsonl");
    let f = fs::File::open(&manifest)
        .map_err(|e| PrefsError::Manifest(format!("{}: {e}", manifest.display())))?;
    let by_key: HashMap<&str, usize> =
        ds.users.iter().map(|u| (u.key.as_str(), u.user_id)).collect();
    let mut records = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| PrefsError::Manifest(format!("line {}: {e}", ln + 1)))?;
        let user_id = *by_key
            .get(entry.user.as_str())
            .ok_or_else(|| PrefsError::Manifest(format!("unknown user {}", entry.user)))?;
        let emb_path = dir.join(format!("{}.emb.f32", entry.emb_sha));
        let embedding = read_f32_file(&emb_path)?;
        if embedding.len() != entry.dim {
            return Err(PrefsError::DimMismatch { seen: embedding.len(), expected: entry.dim });
        }
        records.push(PreferenceRecord {
            user_id,
            user_key: entry.user,
            kind: entry.kind,
            summary: String::new(),
            embedding,
        });
    }
    Ok(records)
}

/// Splits records into dense per-channel matrices indexed by user id.
/// Errors when any user is missing a channel.
pub fn preference_matrices(
    records: &[PreferenceRecord],
    n_users: usize,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>), PrefsError> {
    let mut vs: Vec<Option<Vec<f32>>> = vec![None; n_users];
    let mut vr: Vec<Option<Vec<f32>>> = vec![None; n_users];
    for r in records {
        let slot = match r.kind {
            Channel::Search => &mut vs[r.user_id],
            Channel::Rec => &mut vr[r.user_id],
        };
        *slot = Some(r.embedding.clone());
    }
    let unwrap = |v: Vec<Option<Vec<f32>>>, kind: Channel| -> Result<Vec<Vec<f32>>, PrefsError> {
        v.into_iter()
            .enumerate()
            .map(|(u, o)| {
                o.ok_or(PrefsError::MissingChannel { user: format!("user_id {u}"), kind })
            })
            .collect()
    };
    Ok((unwrap(vs, Channel::Search)?, unwrap(vr, Channel::Rec)?))
}

/// End-to-end: prompts → summaries → embeddings → manifest, both channels.
pub fn build_preferences(
    ds: &Dataset,
    summarizer: &dyn SummaryClient,
    embedder: &dyn EmbeddingClient,
    cache_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<EmbedOutcome, PrefsError> {
    let mut prompts = render_all_prompts(ds, Channel::Search, cfg.truncate);
    prompts.extend(render_all_prompts(ds, Channel::Rec, cfg.truncate));
    let sums = summarize_preferences(summarizer, ds, &prompts, cache_dir, cfg)?;
    let mut out = embed_preferences(embedder, &sums.records, cache_dir, cfg)?;
    out.failures.extend(sums.failures);
    out.stats.client_calls += sums.stats.client_calls;
    out.stats.cache_hits += sums.stats.cache_hits;
    write_manifest(cache_dir, embedder.id(), &out.records, &out.failures)?;
    Ok(out)
}
