//! Completion backends and the retrying, rate-limited client around them.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use thiserror::Error;

use super::prompt::{PromptDoc, Segment};
use crate::rng::{derive_rng, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompletionError {
    #[error("prompt needs {used} budget units, backend allows {budget}")]
    BudgetExceeded { used: usize, budget: usize },
    #[error("completion failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("completion backend refused the request: {0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying (timeouts, rate limiting, 5xx).
    Transient(String),
    Fatal(String),
}

/// Request as it would go over the wire. Temperature is always 0.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a PromptDoc,
    pub max_output_tokens: usize,
    pub temperature: f64,
    pub timeout: Duration,
}

pub trait CompletionBackend {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    /// Largest accepted prompt, in budget units of 4 bytes.
    pub token_budget: usize,
    pub max_output_tokens: usize,
    pub requests_per_minute: Option<f64>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: "mock://".into(),
            model: "mock".into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            token_budget: 4096,
            max_output_tokens: 8,
            requests_per_minute: None,
        }
    }
}

/// Token bucket refilled at `rate` requests per second.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    capacity: f64,
    tokens: f64,
    rate: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn per_minute(rpm: f64, now: Instant) -> Self {
        let capacity = rpm.max(1.0);
        TokenBucket { capacity, tokens: capacity, rate: rpm / 60.0, last: now }
    }

    /// Takes one token, returning how long the caller must wait first.
    pub fn acquire(&mut self, now: Instant) -> Duration {
        let elapsed = now.saturating_duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + elapsed * self.rate).min(self.capacity);
        self.tokens -= 1.0;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
}

pub type Sleeper = Box<dyn FnMut(Duration) + Send>;

pub struct CompletionClient {
    pub cfg: ClientConfig,
    backend: Box<dyn CompletionBackend + Send>,
    sleep: Sleeper,
    bucket: Option<TokenBucket>,
    pub total_retries: u64,
    pub calls: u64,
}

impl CompletionClient {
    pub fn new(cfg: ClientConfig, backend: Box<dyn CompletionBackend + Send>) -> Self {
        let bucket = cfg.requests_per_minute.map(|r| TokenBucket::per_minute(r, Instant::now()));
        CompletionClient { cfg, backend, sleep: Box::new(std::thread::sleep), bucket, total_retries: 0, calls: 0 }
    }

    /// Replaces the real sleep, e.g. to record backoff delays in tests.
    pub fn with_sleeper(mut self, sleep: Sleeper) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn complete(&mut self, prompt: &PromptDoc) -> Result<Completion, CompletionError> {
        if prompt.token_budget_used > self.cfg.token_budget {
            return Err(CompletionError::BudgetExceeded {
                used: prompt.token_budget_used,
                budget: self.cfg.token_budget,
            });
        }
        let req = CompletionRequest {
            model: &self.cfg.model,
            prompt,
            max_output_tokens: self.cfg.max_output_tokens,
            temperature: 0.0,
            timeout: self.cfg.timeout,
        };
        let mut backoff = self.cfg.initial_backoff;
        let mut retries = 0;
        loop {
            if let Some(b) = &mut self.bucket {
                let wait = b.acquire(Instant::now());
                if !wait.is_zero() {
                    (self.sleep)(wait);
                }
            }
            self.calls += 1;
            match self.backend.complete(&req) {
                Ok(text) => return Ok(Completion { text, retries }),
                Err(BackendError::Fatal(msg)) => return Err(CompletionError::Rejected(msg)),
                Err(BackendError::Transient(msg)) => {
                    if retries >= self.cfg.max_retries {
                        return Err(CompletionError::Transport { attempts: retries + 1, last: msg });
                    }
                    log::warn!("transient completion failure ({msg}); retrying in {backoff:?}");
                    (self.sleep)(backoff);
                    backoff *= 2;
                    retries += 1;
                    self.total_retries += 1;
                }
            }
        }
    }
}

/// Always answers with the same text.
pub struct CannedBackend(pub String);

impl CompletionBackend for CannedBackend {
    fn complete(&mut self, _: &CompletionRequest<'_>) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
}

/// Predicts the label of the support item whose code tokens are closest to
/// the query in Hamming distance; ties go to the earliest support item.
/// Reads the prompt's segment layout rather than its text.
pub struct NearestCodesBackend;

impl CompletionBackend for NearestCodesBackend {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let (support, query) =
            support_and_query(&req.prompt.layout).ok_or_else(|| BackendError::Fatal("prompt has no query".into()))?;
        let q: Vec<&str> = query.split_whitespace().collect();
        let mut best: Option<(usize, &str)> = None;
        for (codes, label) in support {
            let c: Vec<&str> = codes.split_whitespace().collect();
            let mismatches = c.iter().zip(&q).filter(|(a, b)| a != b).count();
            let dist = mismatches + c.len().abs_diff(q.len());
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, label));
            }
        }
        best.map(|(_, l)| format!(" {l}\n")).ok_or_else(|| BackendError::Fatal("prompt has no support items".into()))
    }
}

/// Picks uniformly among the distinct support labels; the chance baseline.
pub struct RandomLabelBackend {
    rng: Rng,
}

impl RandomLabelBackend {
    pub fn new(seed: u64) -> Self {
        RandomLabelBackend { rng: derive_rng(seed, "random-label", 0) }
    }
}

impl CompletionBackend for RandomLabelBackend {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let (support, _) =
            support_and_query(&req.prompt.layout).ok_or_else(|| BackendError::Fatal("prompt has no query".into()))?;
        let mut labels: Vec<&str> = Vec::new();
        for (_, l) in support {
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        labels
            .choose(&mut self.rng)
            .map(|l| format!(" {l}\n"))
            .ok_or_else(|| BackendError::Fatal("prompt has no support items".into()))
    }
}

/// Fails transiently a fixed number of times, then defers to `inner`.
pub struct FlakyBackend<B> {
    pub inner: B,
    pub failures: u32,
}

impl<B: CompletionBackend> CompletionBackend for FlakyBackend<B> {
    fn complete(&mut self, req: &CompletionRequest<'_>) -> Result<String, BackendError> {
        if self.failures > 0 {
            self.failures -= 1;
            return Err(BackendError::Transient("injected failure".into()));
        }
        self.inner.complete(req)
    }
}

/// Support `(codes, class name)` pairs and the query codes of a prompt.
fn support_and_query(layout: &[Segment]) -> Option<(Vec<(&str, &str)>, &str)> {
    let mut support = Vec::new();
    let mut pending: Option<&str> = None;
    for seg in layout {
        match seg {
            Segment::ImageCodes(c) => pending = Some(c),
            Segment::Label { class, .. } => support.push((pending.take()?, class.as_str())),
            Segment::Induction(_) | Segment::AnswerStem(_) => {}
        }
    }
    pending.map(|q| (support, q))
}
