//! Completion requests against a pluggable provider.
//!
//! The [`Gateway`] layers a content-addressed disk cache, bounded retries with
//! exponential backoff and a bound on in-flight provider calls over any
//! [`Provider`]. [`MockProvider`] answers from digest-keyed fixtures or a
//! fallback rule and is what the test-suite runs against.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompting::{HeuristicCounter, TokenCounter};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("prompt needs {tokens} tokens plus {completion} for completion, provider limit is {limit}")]
    ContextOverflow {
        tokens: usize,
        completion: usize,
        limit: usize,
    },
    #[error("provider failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("provider error: {0}")]
    Permanent(String),
    #[error("provider does not support {0}")]
    Unsupported(String),
    #[error("no fixture or fallback for prompt digest {0}")]
    NoFixture(String),
    #[error("mock configuration error: {0}")]
    MockConfig(String),
}

/// Failure reported by a provider for one attempt.
#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    /// Transport or rate-limit failure; retried.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Permanent(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no fixture or fallback for prompt digest {0}")]
    NoFixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    /// Forwarded to the provider unchanged.
    pub best_of: usize,
    pub want_logprobs: bool,
    pub run_index: usize,
}

impl CompletionRequest {
    pub const DEFAULT_TEMPERATURE: f64 = 0.7;
    pub const DEFAULT_TOP_P: f64 = 1.0;
    pub const DEFAULT_MAX_TOKENS: usize = 200;

    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            ..SamplingParams::default().request("")
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "top_p {} must be in (0, 1]",
                self.top_p
            )));
        }
        if !self.frequency_penalty.is_finite() || !self.presence_penalty.is_finite() {
            return Err(GatewayError::InvalidRequest("penalties must be finite".into()));
        }
        if self.best_of == 0 {
            return Err(GatewayError::InvalidRequest("best_of must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sampling parameters shared by every request of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub best_of: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: CompletionRequest::DEFAULT_TEMPERATURE,
            top_p: CompletionRequest::DEFAULT_TOP_P,
            max_tokens: CompletionRequest::DEFAULT_MAX_TOKENS,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            best_of: 1,
        }
    }
}

impl SamplingParams {
    pub fn request(&self, prompt: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            frequency_penalty: self.frequency_penalty,
            presence_penalty: self.presence_penalty,
            best_of: self.best_of,
            want_logprobs: false,
            run_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: String,
    pub provider_id: String,
}

pub trait Provider: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;

    /// Per-token log-probabilities of `text` itself (echo scoring).
    fn score(&self, _text: &str) -> Result<Vec<TokenLogprob>, ProviderError> {
        Err(ProviderError::Unsupported("token scoring".into()))
    }

    /// Context window in tokens, if the provider enforces one.
    fn context_limit(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Same attempt budget, no sleeping between attempts.
    pub fn immediate() -> Self {
        Self {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    pub fn delay_for(&self, attempt: usize) -> Duration {
        let factor = 1u32 << attempt.min(16) as u32;
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op`, retrying transient failures up to `max_attempts` total.
    pub fn run<T, F>(&self, mut op: F) -> Result<T, GatewayError>
    where
        F: FnMut() -> Result<T, ProviderError>,
    {
        let attempts = self.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(ProviderError::Transient(msg)) => {
                    tracing::warn!(attempt = attempt + 1, max = attempts, error = %msg, "transient provider failure");
                    last = msg;
                    if attempt + 1 < attempts {
                        let d = self.delay_for(attempt);
                        if !d.is_zero() {
                            thread::sleep(d);
                        }
                    }
                }
                Err(ProviderError::Permanent(msg)) => return Err(GatewayError::Permanent(msg)),
                Err(ProviderError::Unsupported(msg)) => return Err(GatewayError::Unsupported(msg)),
                Err(ProviderError::NoFixture(d)) => return Err(GatewayError::NoFixture(d)),
            }
        }
        Err(GatewayError::Exhausted { attempts, last })
    }
}

/// Maps a ureq error onto the retry classification: transport failures,
/// 429 and 5xx are transient, everything else permanent.
pub fn classify_http_error(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            ProviderError::Transient(format!("http status {code}"))
        }
        ureq::Error::StatusCode(code) => ProviderError::Permanent(format!("http status {code}")),
        ureq::Error::Io(e) => ProviderError::Transient(e.to_string()),
        ureq::Error::Timeout(t) => ProviderError::Transient(format!("timeout: {t}")),
        ureq::Error::HostNotFound => ProviderError::Transient("host not found".into()),
        ureq::Error::ConnectionFailed => ProviderError::Transient("connection failed".into()),
        other => ProviderError::Permanent(other.to_string()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest used to key mock fixtures and to reference prompts in records.
pub fn prompt_digest(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    provider_id: &'a str,
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
    frequency_penalty: f64,
    presence_penalty: f64,
    best_of: usize,
    want_logprobs: bool,
    run_index: usize,
}

/// Cache key over the provider id, every request parameter and the run index.
pub fn cache_key(provider_id: &str, request: &CompletionRequest) -> String {
    let material = KeyMaterial {
        provider_id,
        prompt: &request.prompt,
        temperature: request.temperature,
        top_p: request.top_p,
        max_tokens: request.max_tokens,
        frequency_penalty: request.frequency_penalty,
        presence_penalty: request.presence_penalty,
        best_of: request.best_of,
        want_logprobs: request.want_logprobs,
        run_index: request.run_index,
    };
    sha256_hex(&serde_json::to_vec(&material).expect("key material serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub created_at: u64,
    pub response: CompletionResponse,
}

/// One file per entry, named by the hex key. Reads are lock-free; writes go
/// through a temp file and rename under a mutex.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        let body = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let entry: CacheEntry =
            serde_json::from_slice(&body).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if entry.key != key {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("cache file {} holds key {}", path.display(), entry.key),
            ));
        }
        Ok(Some(entry))
    }

    pub fn put(&self, key: &str, response: &CompletionResponse) -> std::io::Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            response: response.clone(),
        };
        let body = serde_json::to_vec(&entry).expect("cache entry serializes");
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path_for(key);
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(".{key}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
pub struct ConcurrencyLimiter {
    limit: usize,
    state: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

pub struct Permit<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.state.lock().unwrap_or_else(|p| p.into_inner());
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

impl ConcurrencyLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.state.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit { limiter: self }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Highest number of permits held at once so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

fn check_context(provider: &dyn Provider, request: &CompletionRequest) -> Result<(), GatewayError> {
    if let Some(limit) = provider.context_limit() {
        let tokens = HeuristicCounter.count(&request.prompt);
        if tokens + request.max_tokens > limit {
            return Err(GatewayError::ContextOverflow {
                tokens,
                completion: request.max_tokens,
                limit,
            });
        }
    }
    Ok(())
}

/// One completion with retries on transient failures.
pub fn complete(
    provider: &dyn Provider,
    request: &CompletionRequest,
    retry: &RetryPolicy,
) -> Result<CompletionResponse, GatewayError> {
    request.validate()?;
    check_context(provider, request)?;
    retry.run(|| provider.complete(request))
}

/// Cache-first completion. Returns the response and whether it was a hit.
/// Cache read or write failures are logged and fall through to the provider.
pub fn cached_complete(
    cache: &DiskCache,
    provider: &dyn Provider,
    request: &CompletionRequest,
    retry: &RetryPolicy,
) -> Result<(CompletionResponse, bool), GatewayError> {
    request.validate()?;
    let key = cache_key(provider.id(), request);
    match cache.get(&key) {
        Ok(Some(entry)) => return Ok((entry.response, true)),
        Ok(None) => {}
        Err(e) => tracing::warn!(key = %key, error = %e, "cache read failed; calling provider"),
    }
    let response = complete(provider, request, retry)?;
    if let Err(e) = cache.put(&key, &response) {
        tracing::warn!(key = %key, error = %e, "cache write failed");
    }
    Ok((response, false))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub provider_calls: usize,
    pub cache_hits: usize,
}

/// Shared entry point used by the pipeline: cache, retries and the
/// in-flight bound around one provider.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: Option<DiskCache>,
    retry: RetryPolicy,
    limiter: ConcurrencyLimiter,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            provider,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: ConcurrencyLimiter::new(8),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limiter = ConcurrencyLimiter::new(limit);
        self
    }

    pub fn provider(&self) -> &dyn Provider {
        self.provider.as_ref()
    }

    pub fn limiter(&self) -> &ConcurrencyLimiter {
        &self.limiter
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            provider_calls: self.calls.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
        }
    }

    fn live(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        complete(self.provider.as_ref(), request, &self.retry)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<(CompletionResponse, bool), GatewayError> {
        request.validate()?;
        let Some(cache) = &self.cache else {
            return self.live(request).map(|r| (r, false));
        };
        let key = cache_key(self.provider.id(), request);
        match cache.get(&key) {
            Ok(Some(entry)) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                return Ok((entry.response, true));
            }
            Ok(None) => {}
            Err(e) => tracing::warn!(key = %key, error = %e, "cache read failed; calling provider"),
        }
        let response = self.live(request)?;
        if let Err(e) = cache.put(&key, &response) {
            tracing::warn!(key = %key, error = %e, "cache write failed");
        }
        Ok((response, false))
    }

    pub fn score(&self, text: &str) -> Result<Vec<TokenLogprob>, GatewayError> {
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.retry.run(|| self.provider.score(text))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
    frequency_penalty: f64,
    presence_penalty: f64,
    logprobs: bool,
    #[serde(skip_serializing_if = "is_one")]
    best_of: usize,
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    token_logprobs: Option<Vec<TokenLogprob>>,
}

/// Completion endpoint speaking the JSON wire contract
/// `{prompt, temperature, top_p, max_tokens, frequency_penalty, presence_penalty, logprobs}`
/// → `{text, finish_reason, token_logprobs?}`.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    id: String,
    url: String,
    api_key: Option<String>,
    context_limit: Option<usize>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(id: impl Into<String>, url: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .new_agent();
        Self {
            id: id.into(),
            url: url.into(),
            api_key,
            context_limit: None,
            agent,
        }
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let body = WireRequest {
            prompt: &request.prompt,
            temperature: request.temperature,
            top_p: request.top_p,
            max_tokens: request.max_tokens,
            frequency_penalty: request.frequency_penalty,
            presence_penalty: request.presence_penalty,
            logprobs: request.want_logprobs,
            best_of: request.best_of,
        };
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(classify_http_error)?;
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Permanent(format!("malformed response body: {e}")))?;
        Ok(CompletionResponse {
            text: wire.text,
            token_logprobs: if request.want_logprobs {
                wire.token_logprobs
            } else {
                None
            },
            finish_reason: wire.finish_reason.unwrap_or_else(|| "unknown".into()),
            provider_id: self.id.clone(),
        })
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }
}

/// What the mock answers when no fixture matches the prompt digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum FallbackRule {
    /// Label of the demonstration adjacent to the test block (the last
    /// filled `<label_header>:` line). Under low-to-high ordering that is the
    /// most similar demonstration.
    NearestDemoLabel {
        label_header: String,
    },
    /// Most frequent demonstration label; ties go to the one seen last.
    MajorityDemoLabel {
        label_header: String,
    },
    Constant {
        text: String,
    },
}

impl FallbackRule {
    fn demo_labels<'a>(prompt: &'a str, header: &str) -> Vec<&'a str> {
        let prefix = format!("{header}:");
        prompt
            .lines()
            .filter_map(|l| l.trim_start().strip_prefix(prefix.as_str()))
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .collect()
    }

    pub fn apply(&self, prompt: &str) -> Option<String> {
        match self {
            Self::Constant { text } => Some(text.clone()),
            Self::NearestDemoLabel { label_header } => {
                Self::demo_labels(prompt, label_header).last().map(|s| s.to_string())
            }
            Self::MajorityDemoLabel { label_header } => {
                let labels = Self::demo_labels(prompt, label_header);
                let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
                for (pos, l) in labels.iter().enumerate() {
                    let e = counts.entry(l).or_insert((0, 0));
                    e.0 += 1;
                    e.1 = pos;
                }
                counts
                    .into_iter()
                    .max_by_key(|(_, (count, last))| (*count, *last))
                    .map(|(l, _)| l.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

/// A fixture is one response, or a list indexed by `run_index % len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fixture {
    Text(String),
    Full(FixtureResponse),
    PerRun(Vec<FixtureResponse>),
}

impl Fixture {
    fn pick(&self, run_index: usize) -> FixtureResponse {
        match self {
            Self::Text(t) => FixtureResponse {
                text: t.clone(),
                token_logprobs: None,
            },
            Self::Full(f) => f.clone(),
            Self::PerRun(v) => v[run_index % v.len()].clone(),
        }
    }
}

/// On-disk form of a mock provider configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSpec {
    pub provider_id: Option<String>,
    pub fixtures: HashMap<String, Fixture>,
    pub fallback: Option<FallbackRule>,
    /// Per-token logprob attached to fallback answers when logprobs are requested.
    pub fallback_token_logprob: Option<f64>,
    /// Per-token logprob returned by `score`; scoring is unsupported when absent.
    pub score_token_logprob: Option<f64>,
}

/// Deterministic provider for tests and offline runs.
#[derive(Debug, Default)]
pub struct MockProvider {
    spec: MockSpec,
    id: String,
    calls: AtomicUsize,
    fail_transient: AtomicUsize,
}

fn whitespace_logprobs(text: &str, logprob: f64) -> Vec<TokenLogprob> {
    text.split_inclusive(char::is_whitespace)
        .filter(|t| !t.trim().is_empty())
        .map(|t| TokenLogprob {
            token: t.to_string(),
            logprob,
        })
        .collect()
}

impl MockProvider {
    pub fn new(fixtures: HashMap<String, Fixture>, fallback: Option<FallbackRule>) -> Self {
        Self::from_spec(MockSpec {
            fixtures,
            fallback,
            ..Default::default()
        })
    }

    pub fn from_spec(spec: MockSpec) -> Self {
        let id = spec.provider_id.clone().unwrap_or_else(|| "mock".into());
        Self {
            spec,
            id,
            calls: AtomicUsize::new(0),
            fail_transient: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let body =
            fs::read_to_string(path).map_err(|e| GatewayError::MockConfig(format!("{}: {e}", path.display())))?;
        let spec: MockSpec =
            serde_json::from_str(&body).map_err(|e| GatewayError::MockConfig(format!("{}: {e}", path.display())))?;
        Ok(Self::from_spec(spec))
    }

    /// Makes the next `n` calls fail with a transient error.
    pub fn fail_next(&self, n: usize) {
        self.fail_transient.store(n, Ordering::SeqCst);
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self
            .fail_transient
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(ProviderError::Transient("injected failure".into()));
        }
        let digest = prompt_digest(&request.prompt);
        let answer = match self.spec.fixtures.get(&digest) {
            Some(f) => f.pick(request.run_index),
            None => {
                let text = self
                    .spec
                    .fallback
                    .as_ref()
                    .and_then(|rule| rule.apply(&request.prompt))
                    .ok_or_else(|| ProviderError::NoFixture(digest.clone()))?;
                let token_logprobs = self
                    .spec
                    .fallback_token_logprob
                    .map(|lp| whitespace_logprobs(&text, lp));
                FixtureResponse { text, token_logprobs }
            }
        };
        Ok(CompletionResponse {
            token_logprobs: if request.want_logprobs {
                answer.token_logprobs
            } else {
                None
            },
            text: answer.text,
            finish_reason: "stop".into(),
            provider_id: self.id.clone(),
        })
    }

    fn score(&self, text: &str) -> Result<Vec<TokenLogprob>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.spec.score_token_logprob {
            Some(lp) => Ok(whitespace_logprobs(text, lp)),
            None => Err(ProviderError::Unsupported("token scoring".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct AlwaysFailing(AtomicUsize);

    impl Provider for AlwaysFailing {
        fn id(&self) -> &str {
            "failing"
        }
        fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::Transient("503".into()))
        }
    }

    fn mock_with(prompt: &str, text: &str) -> MockProvider {
        MockProvider::new(
            HashMap::from([(prompt_digest(prompt), Fixture::Text(text.into()))]),
            None,
        )
    }

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let r = CompletionRequest::new("p");
        assert_eq!(r.temperature, 0.7);
        assert_eq!(r.top_p, 1.0);
        assert_eq!(r.max_tokens, 200);
        assert_eq!(r.frequency_penalty, 0.0);
        assert_eq!(r.presence_penalty, 0.0);
        assert_eq!(r.best_of, 1);
    }

    #[test]
    fn fixture_echo() {
        let m = mock_with("classify this", "Positive");
        let r = complete(&m, &CompletionRequest::new("classify this"), &RetryPolicy::immediate()).unwrap();
        assert_eq!(r.text, "Positive");
    }

    #[test]
    fn retries_stop_after_five() {
        let p = AlwaysFailing(AtomicUsize::new(0));
        let err = complete(&p, &CompletionRequest::new("x"), &RetryPolicy::immediate()).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 5, .. }));
        assert_eq!(p.0.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn transient_then_success() {
        let m = mock_with("x", "ok");
        m.fail_next(2);
        let r = complete(&m, &CompletionRequest::new("x"), &RetryPolicy::immediate()).unwrap();
        assert_eq!(r.text, "ok");
        assert_eq!(m.call_count(), 3);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay_for(0), Duration::from_millis(100));
        assert_eq!(p.delay_for(1), Duration::from_millis(200));
        assert_eq!(p.delay_for(2), Duration::from_millis(350));
    }

    #[test]
    fn request_validation() {
        let mut r = CompletionRequest::new("x");
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        r.top_p = 1.0;
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        assert!(CompletionRequest::new("  ").validate().is_err());
    }

    #[test]
    fn cache_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let m = MockProvider::new(HashMap::new(), Some(FallbackRule::Constant { text: "y".into() }));
        let retry = RetryPolicy::immediate();
        let req = CompletionRequest::new("prompt");

        let (_, hit) = cached_complete(&cache, &m, &req, &retry).unwrap();
        assert!(!hit);
        let (r2, hit) = cached_complete(&cache, &m, &req, &retry).unwrap();
        assert!(hit);
        assert_eq!(r2.text, "y");
        assert_eq!(m.call_count(), 1);

        let mut run1 = req.clone();
        run1.run_index = 1;
        assert!(!cached_complete(&cache, &m, &run1, &retry).unwrap().1);
        let mut hot = req.clone();
        hot.temperature = 0.0;
        assert!(!cached_complete(&cache, &m, &hot, &retry).unwrap().1);
        assert_eq!(cache.len(), 3);
        assert_eq!(m.call_count(), 3);
    }

    #[test]
    fn corrupt_cache_entry_falls_through() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let m = MockProvider::new(HashMap::new(), Some(FallbackRule::Constant { text: "y".into() }));
        let req = CompletionRequest::new("prompt");
        let key = cache_key(m.id(), &req);
        fs::write(dir.path().join(format!("{key}.json")), b"not json").unwrap();
        let (r, hit) = cached_complete(&cache, &m, &req, &RetryPolicy::immediate()).unwrap();
        assert!(!hit);
        assert_eq!(r.text, "y");
    }

    #[test]
    fn mock_fallbacks() {
        let prompt = "desc\n\nINPUT: a\nSENTIMENT: Negative\nINPUT: b\nSENTIMENT: Positive\nINPUT: c\nSENTIMENT:";
        let nearest = FallbackRule::NearestDemoLabel {
            label_header: "SENTIMENT".into(),
        };
        assert_eq!(nearest.apply(prompt).as_deref(), Some("Positive"));
        let all_pos = "INPUT: a\nSENTIMENT: Positive\nINPUT: b\nSENTIMENT: Positive\nINPUT: c\nSENTIMENT:";
        let majority = FallbackRule::MajorityDemoLabel {
            label_header: "SENTIMENT".into(),
        };
        assert_eq!(majority.apply(all_pos).as_deref(), Some("Positive"));
        assert_eq!(nearest.apply("INPUT: c\nSENTIMENT:"), None);
    }

    #[test]
    fn mock_unknown_prompt_names_digest() {
        let m = MockProvider::new(HashMap::new(), None);
        let err = complete(&m, &CompletionRequest::new("hello"), &RetryPolicy::immediate()).unwrap_err();
        assert!(err.to_string().contains(&prompt_digest("hello")));
    }

    #[test]
    fn per_run_fixtures_and_logprobs() {
        let f = Fixture::PerRun(vec![
            FixtureResponse {
                text: "Positive".into(),
                token_logprobs: Some(vec![TokenLogprob {
                    token: "Positive".into(),
                    logprob: -0.1,
                }]),
            },
            FixtureResponse {
                text: "Negative".into(),
                token_logprobs: None,
            },
        ]);
        let m = MockProvider::new(HashMap::from([(prompt_digest("p"), f)]), None);
        let mut req = CompletionRequest::new("p");
        req.want_logprobs = true;
        let r0 = m.complete(&req).unwrap();
        assert_eq!(r0.token_logprobs.as_ref().unwrap().len(), 1);
        req.run_index = 1;
        assert_eq!(m.complete(&req).unwrap().text, "Negative");
        req.want_logprobs = false;
        req.run_index = 2;
        assert!(m.complete(&req).unwrap().token_logprobs.is_none());
    }

    #[test]
    fn context_limit_enforced() {
        struct Tiny;
        impl Provider for Tiny {
            fn id(&self) -> &str {
                "tiny"
            }
            fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
                unreachable!()
            }
            fn context_limit(&self) -> Option<usize> {
                Some(100)
            }
        }
        let err = complete(&Tiny, &CompletionRequest::new("a b c"), &RetryPolicy::immediate()).unwrap_err();
        assert!(matches!(err, GatewayError::ContextOverflow { limit: 100, .. }));
    }

    #[test]
    fn limiter_bounds_in_flight() {
        let limiter = Arc::new(ConcurrencyLimiter::new(3));
        let current = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..12)
            .map(|_| {
                let limiter = Arc::clone(&limiter);
                let current = Arc::clone(&current);
                thread::spawn(move || {
                    let _p = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    assert!(now <= 3);
                    thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(limiter.peak() <= 3);
    }
}
