//! Backend abstraction over chat-completion services.
//!
//! A [`Gateway`] wraps one [`LlmBackend`] and enforces the global in-flight
//! cap, an optional minimum spacing between requests, capability checks, and
//! the request log. Batch helpers return results in input order whatever the
//! completion order.

mod mock;
mod parse;
mod remote;

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{ProceduralMock, TranscriptBackend, TranscriptEntry};
pub use parse::{parse_choice, parse_ranking, Confidence, ParsedChoice, ParsedRanking};
pub use remote::{RemoteBackend, RemoteConfig, ENV_API_BASE, ENV_API_KEY, ENV_MODEL};

use crate::rng::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DecodeSettings {
    /// Sampling settings for candidate generation.
    pub fn generation() -> Self {
        DecodeSettings {
            temperature: 1.0,
            max_tokens: 128,
            seed: None,
        }
    }

    /// Greedy settings for ranking, selection and screening prompts.
    pub fn discrimination() -> Self {
        DecodeSettings {
            temperature: 0.0,
            max_tokens: 128,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub decode: DecodeSettings,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>, image_ref: Option<String>, decode: DecodeSettings) -> Self {
        LlmRequest {
            prompt: prompt.into(),
            image_ref,
            decode,
        }
    }

    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.prompt)
    }
}

/// Hex SHA-256 of the prompt text; the key used by transcripts and logs.
pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub name: String,
    pub model: String,
}

impl std::fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.name, self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("backend `{backend}` does not accept image input")]
    Capability { backend: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed reply: {0}")]
    Protocol(String),
    #[error("no scripted reply for prompt {0}")]
    Unscripted(String),
    #[error("{0}")]
    Backend(String),
}

impl GatewayError {
    /// Failures worth retrying: timeouts, connection trouble, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::Transport { .. } => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    fn supports_images(&self) -> bool;

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError>;
}

/// Backend driven by a closure; handy for scripted tests and adapters.
pub struct FnBackend<F> {
    name: String,
    images: bool,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(name: &str, f: F) -> Self {
        FnBackend {
            name: name.to_string(),
            images: true,
            f,
        }
    }

    pub fn text_only(mut self) -> Self {
        self.images = false;
        self
    }
}

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: self.name.clone(),
            model: "fn".into(),
        }
    }

    fn supports_images(&self) -> bool {
        self.images
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        (self.f)(req)
    }
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub timestamp_ms: u128,
    pub backend: String,
    pub latency_ms: u128,
    pub prompt_hash: String,
    pub status: String,
}

pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    max_inflight: usize,
    slots: Slots,
    min_interval: Option<Duration>,
    next_start: Mutex<Instant>,
    log: Option<Mutex<Box<dyn Write + Send>>>,
    calls: AtomicUsize,
}

pub const DEFAULT_MAX_INFLIGHT: usize = 4;

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Gateway {
            backend,
            max_inflight: DEFAULT_MAX_INFLIGHT,
            slots: Slots {
                free: Mutex::new(DEFAULT_MAX_INFLIGHT),
                cv: Condvar::new(),
            },
            min_interval: None,
            next_start: Mutex::new(Instant::now()),
            log: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_max_inflight(mut self, cap: usize) -> Self {
        let cap = cap.max(1);
        self.max_inflight = cap;
        self.slots = Slots {
            free: Mutex::new(cap),
            cv: Condvar::new(),
        };
        self
    }

    /// Enforces a minimum spacing between request starts.
    pub fn with_min_interval(mut self, interval: Duration) -> Self {
        self.min_interval = Some(interval).filter(|d| !d.is_zero());
        self
    }

    pub fn with_request_log(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.log = Some(Mutex::new(sink));
        self
    }

    pub fn identity(&self) -> BackendIdentity {
        self.backend.identity()
    }

    pub fn supports_images(&self) -> bool {
        self.backend.supports_images()
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight
    }

    /// Backend calls issued so far, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn pace(&self) {
        let Some(interval) = self.min_interval else { return };
        let wait = {
            let mut next = self.next_start.lock().expect("pace lock");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        if req.image_ref.is_some() && !self.backend.supports_images() {
            return Err(GatewayError::Capability {
                backend: self.backend.identity().to_string(),
            });
        }
        let _slot = self.slots.acquire();
        self.pace();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let result = self.backend.complete(req);
        let latency = started.elapsed();
        tracing::debug!(latency_ms = latency.as_millis() as u64, ok = result.is_ok(), "backend call");
        if let Some(log) = &self.log {
            let entry = RequestLogEntry {
                timestamp_ms: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0),
                backend: self.backend.identity().to_string(),
                latency_ms: latency.as_millis(),
                prompt_hash: req.prompt_hash(),
                status: match &result {
                    Ok(_) => "ok".into(),
                    Err(e) => format!("error: {e}"),
                },
            };
            let mut sink = log.lock().expect("log lock");
            let _ = writeln!(sink, "{}", serde_json::to_string(&entry).expect("log entry serializes"));
            let _ = sink.flush();
        }
        result
    }

    /// Issues all requests concurrently (bounded by the in-flight cap) and
    /// returns replies in request order.
    pub fn complete_batch(&self, reqs: &[LlmRequest]) -> Vec<Result<String, GatewayError>> {
        map_bounded(reqs, self.max_inflight, |_, r| self.complete(r))
    }
}

/// Maps `f` over `items` on at most `cap` worker threads, preserving order.
pub fn map_bounded<T, R, F>(items: &[T], cap: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = cap.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every index is processed"))
        .collect()
}
