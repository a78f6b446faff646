//! Segment embeddings and their aggregation into one vector per snippet.
//!
//! The default backend is a hashed bag of tokens so every run is offline and
//! reproducible. A remote backend talks to an HTTP embedding service
//! (`{"input": text}` -> `{"embedding": [..]}`) for pre-trained code models.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::{CodeSegment, SegmentOrigin};

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("cannot embed an empty segment")]
    EmptySegment,
    #[error("no vectors to aggregate")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeVector {
    pub values: Vec<f64>,
    pub norm: f64,
    pub source: Option<SegmentOrigin>,
}

impl CodeVector {
    pub fn new(values: Vec<f64>, source: Option<SegmentOrigin>) -> Self {
        let norm = l2(&values);
        Self {
            values,
            norm,
            source,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Scales to unit length; a zero vector is returned unchanged.
    pub fn normalized(mut self) -> Self {
        if self.norm > 0.0 {
            for v in &mut self.values {
                *v /= self.norm;
            }
            self.norm = l2(&self.values);
        }
        self
    }

    pub fn euclidean(&self, other: &CodeVector) -> f64 {
        squared_distance(&self.values, &other.values).sqrt()
    }

    pub fn cosine(&self, other: &CodeVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        dot / (self.norm * other.norm)
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub trait EmbedderBackend: Send + Sync {
    fn id(&self) -> String;
    fn embed_text(&self, text: &str, tokens: &[String]) -> Result<Vec<f64>, EmbedError>;
}

/// `v = f(segment)`, L2-normalized.
pub fn embed_segment(
    segment: &CodeSegment,
    embedder: &dyn EmbedderBackend,
) -> Result<CodeVector, EmbedError> {
    if segment.tokens.is_empty() {
        return Err(EmbedError::EmptySegment);
    }
    let tokens: Vec<String> = segment.tokens.iter().map(|t| t.text.clone()).collect();
    let values = embedder.embed_text(&segment.text(), &tokens)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::BackendUnavailable(
            "backend returned non-finite values".to_owned(),
        ));
    }
    Ok(CodeVector::new(values, Some(segment.origin.clone())).normalized())
}

/// Each token hashed (FNV-1a then a murmur3 finalizer) into one of `dim`
/// buckets; bucket counts form the vector.
#[derive(Debug, Clone)]
pub struct HashedBagEmbedder {
    pub dim: usize,
}

impl HashedBagEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// murmur3 `fmix64`; spreads FNV's weak low bits before the modulo.
fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

impl EmbedderBackend for HashedBagEmbedder {
    fn id(&self) -> String {
        format!("hashed-bag/{}", self.dim)
    }

    fn embed_text(&self, _text: &str, tokens: &[String]) -> Result<Vec<f64>, EmbedError> {
        let mut values = vec![0.0; self.dim];
        for t in tokens {
            values[(fmix64(fnv1a64(t.as_bytes())) % self.dim as u64) as usize] += 1.0;
        }
        Ok(values)
    }
}

/// Counting semaphore bounding in-flight remote requests.
pub(crate) struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
        out
    }
}

pub struct RemoteEmbedder {
    endpoint: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    in_flight: InFlight,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(cfg: &EmbeddingConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| EmbedError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: cfg.endpoint.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            in_flight: InFlight::new(cfg.max_in_flight),
            client,
        })
    }

    fn post_once(&self, text: &str) -> Result<Vec<f64>, String> {
        #[derive(Deserialize)]
        struct Reply {
            embedding: Vec<f64>,
        }
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        resp.json::<Reply>()
            .map(|r| r.embedding)
            .map_err(|e| e.to_string())
    }
}

impl EmbedderBackend for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote/{}", self.endpoint)
    }

    fn embed_text(&self, text: &str, _tokens: &[String]) -> Result<Vec<f64>, EmbedError> {
        self.in_flight.run(|| {
            let mut last = String::new();
            for attempt in 0..=self.max_retries {
                if attempt > 0 {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
                }
                match self.post_once(text) {
                    Ok(v) => return Ok(v),
                    Err(e) => last = e,
                }
            }
            Err(EmbedError::BackendUnavailable(last))
        })
    }
}

/// Tries the primary backend, falling back to the secondary when it is unavailable.
pub struct WithFallback {
    pub primary: Box<dyn EmbedderBackend>,
    pub fallback: Box<dyn EmbedderBackend>,
}

impl EmbedderBackend for WithFallback {
    fn id(&self) -> String {
        format!("{}|fallback:{}", self.primary.id(), self.fallback.id())
    }

    fn embed_text(&self, text: &str, tokens: &[String]) -> Result<Vec<f64>, EmbedError> {
        match self.primary.embed_text(text, tokens) {
            Err(EmbedError::BackendUnavailable(e)) => {
                log::warn!("primary embedder unavailable ({e}); using fallback");
                self.fallback.embed_text(text, tokens)
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    /// Element-wise mean, re-normalized.
    Mean,
    /// Concatenation in segment order, unnormalized; pad with [`pad_to`].
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub backend: EmbedderKind,
    pub dim: usize,
    pub aggregate: AggregateMode,
    pub endpoint: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub fallback_to_local: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            backend: EmbedderKind::Local,
            dim: DEFAULT_DIM,
            aggregate: AggregateMode::Mean,
            endpoint: "http://127.0.0.1:8080/embed".to_owned(),
            api_key_env: "RULESMITH_EMBED_API_KEY".to_owned(),
            timeout_secs: 30,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 250,
            fallback_to_local: false,
        }
    }
}

pub fn build_embedder(cfg: &EmbeddingConfig) -> Result<Box<dyn EmbedderBackend>, EmbedError> {
    let local = Box::new(HashedBagEmbedder::new(cfg.dim));
    match cfg.backend {
        EmbedderKind::Local => Ok(local),
        EmbedderKind::Remote => {
            let remote = Box::new(RemoteEmbedder::new(cfg)?);
            if cfg.fallback_to_local {
                Ok(Box::new(WithFallback {
                    primary: remote,
                    fallback: local,
                }))
            } else {
                Ok(remote)
            }
        }
    }
}

pub fn aggregate_vectors(
    vectors: &[CodeVector],
    mode: AggregateMode,
) -> Result<CodeVector, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::EmptyInput)?;
    let dim = first.dim();
    if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(EmbedError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    match mode {
        AggregateMode::Mean => {
            let mut sum = vec![0.0; dim];
            for v in vectors {
                for (s, x) in sum.iter_mut().zip(&v.values) {
                    *s += x;
                }
            }
            let n = vectors.len() as f64;
            let mean = sum.into_iter().map(|s| s / n).collect();
            Ok(CodeVector::new(mean, None).normalized())
        }
        AggregateMode::Concat => {
            let values = vectors
                .iter()
                .flat_map(|v| v.values.iter().copied())
                .collect();
            Ok(CodeVector::new(values, None))
        }
    }
}

/// Zero-pads (never truncates) to `len` values.
pub fn pad_to(vector: &CodeVector, len: usize) -> CodeVector {
    let mut values = vector.values.clone();
    if values.len() < len {
        values.resize(len, 0.0);
    }
    CodeVector::new(values, vector.source.clone())
}
