//! Document representations: the fixed-width vectors the quality classifier
//! consumes.
//!
//! Two providers exist. [`RemoteProvider`] calls an external multilingual
//! sentence-embedding service over HTTP; [`HashedNgramProvider`] is a pure,
//! offline featurizer built from signed character n-gram hashing. The hashed
//! provider doubles as the feature map for the n-gram baseline classifier.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

pub const DEFAULT_DIM: usize = 384;
pub const DEFAULT_TRUNCATE_CHARS: usize = 2048;
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Environment variable holding the bearer token for the remote service.
pub const ENDPOINT_TOKEN_ENV: &str = "QFILTER_EMBED_TOKEN";

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("remote embedding service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("remote embedding service returned a malformed response: {0}")]
    Protocol(String),
    #[error("empty input")]
    EmptyInput,
    #[error("empty text")]
    EmptyText,
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("non-finite component at index {0}")]
    NonFinite(usize),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::RemoteUnavailable(_))
    }
}

/// A finite real vector. `normalized` records that the vector has unit L2
/// norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(EmbeddingVector {
            values,
            normalized: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
    if v.normalized {
        return Ok(v.clone());
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let values: Vec<f64> = v.values.iter().map(|x| x / norm).collect();
    let normalized = (values.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= NORM_TOLERANCE;
    Ok(EmbeddingVector { values, normalized })
}

/// Signed feature hashing of lowercased character n-grams, L2-normalized.
///
/// Each n-gram's UTF-8 bytes are hashed with seeded xxh64; the hash modulo
/// `dim` picks the bucket and bit 32 picks the sign. If every bucket
/// cancels to zero the raw zero vector is returned unnormalized.
pub fn hashed_ngram_embed(
    text: &str,
    dim: usize,
    ngram_range: (usize, usize),
    seed: u64,
) -> Result<EmbeddingVector, EmbeddingError> {
    if dim < 8 {
        return Err(EmbeddingError::InvalidConfig(format!("dim {dim} < 8")));
    }
    let (lo, hi) = ngram_range;
    if lo == 0 || lo > hi {
        return Err(EmbeddingError::InvalidConfig(format!(
            "bad ngram range ({lo}, {hi})"
        )));
    }
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let lower = text.to_lowercase();
    // byte offsets of every char boundary, so n-grams slice the string directly
    let bounds: Vec<usize> = lower
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(lower.len()))
        .collect();
    let n_chars = bounds.len() - 1;

    let mut values = vec![0.0f64; dim];
    for n in lo..=hi.min(n_chars) {
        for start in 0..=(n_chars - n) {
            let gram = &lower.as_bytes()[bounds[start]..bounds[start + n]];
            let h = xxh64(gram, seed);
            let bucket = (h % dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
    }
    let v = EmbeddingVector {
        values,
        normalized: false,
    };
    if v.is_zero() {
        return Ok(v);
    }
    l2_normalize(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Remote,
    HashedNgram,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}
fn default_ngram_range() -> (usize, usize) {
    (1, 3)
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_truncate() -> usize {
    DEFAULT_TRUNCATE_CHARS
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_ngram_range")]
    pub ngram_range: (usize, usize),
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_truncate")]
    pub truncate_chars: usize,
    /// Retries after the first failed remote attempt.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl EmbeddingProviderConfig {
    pub fn hashed(dim: usize, ngram_range: (usize, usize), seed: u64) -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::HashedNgram,
            dim,
            endpoint: None,
            ngram_range,
            seed,
            batch_size: DEFAULT_BATCH_SIZE,
            truncate_chars: DEFAULT_TRUNCATE_CHARS,
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, dim: usize) -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::Remote,
            endpoint: Some(endpoint.into()),
            ..Self::hashed(dim, default_ngram_range(), 0)
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |m: String| Err(EmbeddingError::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.truncate_chars == 0 {
            return bad("truncate_chars must be positive".into());
        }
        match self.kind {
            ProviderKind::Remote => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return bad("remote provider requires an endpoint".into());
                }
                if self.max_in_flight == 0 {
                    return bad("max_in_flight must be positive".into());
                }
            }
            ProviderKind::HashedNgram => {
                let (lo, hi) = self.ngram_range;
                if lo == 0 || lo > hi {
                    return bad(format!("bad ngram range ({lo}, {hi})"));
                }
                if self.dim < 8 {
                    return bad(format!("hashed provider needs dim >= 8, got {}", self.dim));
                }
            }
        }
        Ok(())
    }

    /// Stable fingerprint of every field that affects produced vectors.
    pub fn fingerprint(&self) -> String {
        let relevant = match self.kind {
            ProviderKind::Remote => serde_json::json!({
                "kind": "remote",
                "dim": self.dim,
                "endpoint": self.endpoint,
                "truncate_chars": self.truncate_chars,
            }),
            ProviderKind::HashedNgram => serde_json::json!({
                "kind": "hashed_ngram",
                "dim": self.dim,
                "ngram_range": [self.ngram_range.0, self.ngram_range.1],
                "seed": self.seed,
                "truncate_chars": self.truncate_chars,
            }),
        };
        crate::provenance::sha256_hex(relevant.to_string().as_bytes())
    }
}

/// Keeps the first `max_chars` characters of `text`.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Preferred number of texts per call.
    fn batch_size(&self) -> usize;

    /// Embeds already-truncated, non-empty texts.
    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn truncate_chars(&self) -> usize;

    /// Truncates, validates and embeds `texts`, chunking by batch size. The
    /// output is order-aligned with the input.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyInput);
        }
        let limit = self.truncate_chars();
        let truncated: Vec<&str> = texts.iter().map(|t| truncate_chars(t, limit)).collect();
        if truncated.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in truncated.chunks(self.batch_size().max(1)) {
            let vectors = self.embed_raw(chunk)?;
            if vectors.len() != chunk.len() {
                return Err(EmbeddingError::Protocol(format!(
                    "{} vectors for {} texts",
                    vectors.len(),
                    chunk.len()
                )));
            }
            for v in &vectors {
                if v.dim() != self.dim() {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.dim(),
                        actual: v.dim(),
                    });
                }
            }
            out.extend(vectors);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct HashedNgramProvider {
    dim: usize,
    ngram_range: (usize, usize),
    seed: u64,
    batch_size: usize,
    truncate_chars: usize,
}

impl HashedNgramProvider {
    pub fn new(config: &EmbeddingProviderConfig) -> Result<Self, EmbeddingError> {
        config.validate()?;
        Ok(HashedNgramProvider {
            dim: config.dim,
            ngram_range: config.ngram_range,
            seed: config.seed,
            batch_size: config.batch_size,
            truncate_chars: config.truncate_chars,
        })
    }
}

impl EmbeddingProvider for HashedNgramProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn truncate_chars(&self) -> usize {
        self.truncate_chars
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .map(|t| hashed_ngram_embed(t, self.dim, self.ngram_range, self.seed))
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Counting semaphore bounding concurrent HTTP requests.
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn new(n: usize) -> Self {
        InFlight {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Client for `POST {endpoint}/embed`.
///
/// Non-200 responses and transport failures are retried `max_retries` times
/// with exponential backoff. A wrong dimension fails immediately.
pub struct RemoteProvider {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    dim: usize,
    batch_size: usize,
    truncate_chars: usize,
    max_retries: u32,
    backoff: Duration,
    in_flight: InFlight,
}

impl RemoteProvider {
    pub fn new(config: &EmbeddingProviderConfig) -> Result<Self, EmbeddingError> {
        config.validate()?;
        let endpoint = config.endpoint.as_deref().unwrap_or_default();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteProvider {
            agent,
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            token: std::env::var(ENDPOINT_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            dim: config.dim,
            batch_size: config.batch_size,
            truncate_chars: config.truncate_chars,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
            in_flight: InFlight::new(config.max_in_flight),
        })
    }

    fn request_once(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let _slot = self.in_flight.acquire();
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(EmbedRequest { texts })
            .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(EmbeddingError::RemoteUnavailable(format!("HTTP status {status}")));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Protocol(e.to_string()))?;
        if body.dim != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                actual: body.dim,
            });
        }
        if body.vectors.len() != texts.len() {
            return Err(EmbeddingError::Protocol(format!(
                "{} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn truncate_chars(&self) -> usize {
        self.truncate_chars
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut attempt = 0;
        loop {
            match self.request_once(texts) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let delay = self.backoff * 2u32.pow(attempt);
                    log::warn!("embed request failed ({e}); retry {} in {:?}", attempt + 1, delay);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

pub fn build_provider(
    config: &EmbeddingProviderConfig,
) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
    Ok(match config.kind {
        ProviderKind::Remote => Box::new(RemoteProvider::new(config)?),
        ProviderKind::HashedNgram => Box::new(HashedNgramProvider::new(config)?),
    })
}

/// One-shot convenience: build the configured provider and embed `texts`.
pub fn embed_batch(
    config: &EmbeddingProviderConfig,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    build_provider(config)?.embed_batch(texts)
}
