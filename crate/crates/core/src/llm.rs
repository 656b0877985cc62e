//! Completion client. Backends return raw samples; [`LlmClient`] adds
//! retries, rate limiting, a concurrency cap and output post-processing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },
    #[error("quota exhausted after {retries} retries: {message}")]
    Quota { retries: u32, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub num_samples: usize,
    pub max_output_len: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Forwarded to backends that accept it; not part of the replay key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            num_samples: 1,
            max_output_len: 512,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    /// Request actually sent: greedy decoding yields one sample.
    pub fn effective(&self) -> CompletionRequest {
        let mut r = self.clone();
        if r.temperature == 0.0 {
            r.num_samples = 1;
        }
        r
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.num_samples == 0 {
            return Err(LlmError::InvalidRequest("num_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Replay key: prompt digest plus every sampling parameter.
pub fn request_key(req: &CompletionRequest) -> String {
    let canonical = serde_json::json!({
        "prompt_sha256": prompt_digest(&req.prompt),
        "temperature": req.temperature,
        "n": req.num_samples,
        "max_tokens": req.max_output_len,
        "stop": req.stop_sequences,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub samples: Vec<Sample>,
    pub model_id: String,
    #[serde(default)]
    pub usage: Usage,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

/// Truncates at the earliest stop sequence and trims whitespace.
pub fn postprocess(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Token bucket: `capacity` burst, refilled at `per_second`.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        TokenBucket {
            capacity: f64::from(capacity.max(1)),
            per_second,
            state: Mutex::new((f64::from(capacity.max(1)), Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_second;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - s.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClient {
    backend: Box<dyn CompletionBackend>,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    slots: Semaphore,
}

impl LlmClient {
    pub fn new(backend: Box<dyn CompletionBackend>) -> Self {
        LlmClient {
            backend,
            retry: RetryPolicy::default(),
            limiter: None,
            slots: Semaphore {
                free: Mutex::new(usize::MAX),
                cv: Condvar::new(),
            },
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, burst: u32, per_second: f64) -> Self {
        if per_second > 0.0 {
            self.limiter = Some(TokenBucket::new(burst, per_second));
        }
        self
    }

    pub fn with_parallelism(mut self, max_in_flight: usize) -> Self {
        self.slots = Semaphore {
            free: Mutex::new(max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        self
    }

    /// Sends the request with retries and returns post-processed samples.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let req = request.effective();
        let mut attempt = 0;
        let mut raw = loop {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            let result = {
                let _slot = self.slots.acquire();
                self.backend.complete(&req)
            };
            match result {
                Ok(r) => {
                    if attempt > 0 {
                        log::info!("completion succeeded after {attempt} retries");
                    }
                    break r;
                }
                Err(LlmError::Transport {
                    status,
                    message,
                    retryable: true,
                }) => {
                    if attempt >= self.retry.max_retries {
                        return Err(if status == Some(429) {
                            LlmError::Quota {
                                retries: attempt,
                                message,
                            }
                        } else {
                            LlmError::Transport {
                                status,
                                message,
                                retryable: true,
                            }
                        });
                    }
                    let delay = self.retry.delay(attempt);
                    attempt += 1;
                    log::warn!("retry {attempt}/{} in {delay:?}: {message}", self.retry.max_retries);
                    std::thread::sleep(delay);
                }
                Err(e) => return Err(e),
            }
        };
        if raw.samples.len() != req.num_samples {
            return Err(LlmError::Malformed(format!(
                "expected {} samples, backend returned {}",
                req.num_samples,
                raw.samples.len()
            )));
        }
        for s in &mut raw.samples {
            s.text = postprocess(&s.text, &req.stop_sequences);
        }
        Ok(raw)
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    n: usize,
    max_tokens: usize,
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<Sample>,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    usage: Option<Usage>,
}

/// JSON-over-HTTP backend: `{prompt, temperature, n, max_tokens, stop}` in,
/// `{choices: [{text, logprob?}]}` out.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model_id: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        model_id: Option<String>,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
        Ok(HttpBackend {
            endpoint: endpoint.into(),
            api_key,
            model_id,
            client,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let body = WireRequest {
            prompt: &req.prompt,
            temperature: req.temperature,
            n: req.num_samples,
            max_tokens: req.max_output_len,
            stop: &req.stop_sequences,
            model: self.model_id.as_deref(),
            seed: req.seed,
        };
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| LlmError::Transport {
            status: None,
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(LlmError::Transport {
                status: Some(status.as_u16()),
                message: status.to_string(),
                retryable: true,
            });
        }
        if !status.is_success() {
            return Err(LlmError::Transport {
                status: Some(status.as_u16()),
                message: resp.text().unwrap_or_default(),
                retryable: false,
            });
        }
        let wire: WireResponse = resp
            .json()
            .map_err(|e| LlmError::Malformed(format!("undecodable body: {e}")))?;
        Ok(CompletionResponse {
            samples: wire.choices,
            model_id: wire
                .model
                .or_else(|| self.model_id.clone())
                .unwrap_or_else(|| "unknown".into()),
            usage: wire.usage.unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEntry {
    pub key: String,
    pub prompt_sha256: String,
    pub temperature: f64,
    pub n: usize,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    pub samples: Vec<Sample>,
    pub model_id: String,
}

impl RecordEntry {
    pub fn new(req: &CompletionRequest, resp: &CompletionResponse) -> Self {
        RecordEntry {
            key: request_key(req),
            prompt_sha256: prompt_digest(&req.prompt),
            temperature: req.temperature,
            n: req.num_samples,
            max_tokens: req.max_output_len,
            stop: req.stop_sequences.clone(),
            samples: resp.samples.clone(),
            model_id: resp.model_id.clone(),
        }
    }
}

/// Serves responses exclusively from a JSONL recording. The first record
/// for a key wins.
pub struct ReplayBackend {
    entries: HashMap<String, RecordEntry>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let io = |source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        let mut entries = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RecordEntry = serde_json::from_str(&line).map_err(|e| {
                LlmError::Malformed(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            entries.entry(e.key.clone()).or_insert(e);
        }
        Ok(ReplayBackend { entries })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = RecordEntry>) -> Self {
        let mut map = HashMap::new();
        for e in entries {
            map.entry(e.key.clone()).or_insert(e);
        }
        ReplayBackend { entries: map }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let key = request_key(req);
        let e = self.entries.get(&key).ok_or_else(|| {
            LlmError::Malformed(format!(
                "no recording for prompt digest {} (request key {key})",
                prompt_digest(&req.prompt)
            ))
        })?;
        Ok(CompletionResponse {
            samples: e.samples.clone(),
            model_id: e.model_id.clone(),
            usage: Usage::default(),
        })
    }
}

/// Wraps a backend and appends every successful exchange to a JSONL file.
pub struct RecordingBackend {
    inner: Box<dyn CompletionBackend>,
    path: PathBuf,
    file: Mutex<File>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn CompletionBackend>, path: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| LlmError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(RecordingBackend {
            inner,
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }
}

impl CompletionBackend for RecordingBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let resp = self.inner.complete(req)?;
        let line = serde_json::to_string(&RecordEntry::new(req, &resp))
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|source| LlmError::Io {
                path: self.path.clone(),
                source,
            })?;
        Ok(resp)
    }
}
