//! Pluggable text-embedding and text-generation clients.
//!
//! Providers return raw payloads (`Vec<f32>` embeddings, UTF-8 text). The
//! free functions [`embed_text`] and [`generate_text`] apply the output
//! contracts (unit norm in `f64`, token budget) so that a cached payload and
//! a freshly computed one go through exactly the same finalization.
//!
//! [`CacheStore`] persists payloads under
//! `<root>/<provider_id>/<model_id>/<sha256 digest>`; [`CachedEmbedder`] and
//! [`CachedGenerator`] wrap any provider with it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt too long: {tokens} tokens exceeds context of {limit}")]
    PromptTooLong { tokens: usize, limit: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid cache key: {0}")]
    InvalidKey(String),
    #[error("cache storage failure: {0}")]
    StorageFailure(String),
}

pub type Result<T> = std::result::Result<T, ProviderError>;

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Raw embedding payload; [`embed_text`] normalizes it.
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>>;
}

pub trait GenerationProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn max_output_tokens(&self) -> usize;
    fn generate(&self, prompt: &str, max_tokens: usize, temperature: f64) -> Result<String>;
}

/// Unit-norm embedding of `text`. An all-zero payload maps to `e_0`.
pub fn embed_text(p: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>> {
    let raw = p.embed_raw(text)?;
    if raw.len() != p.dimension() {
        return Err(ProviderError::DimensionMismatch {
            expected: p.dimension(),
            got: raw.len(),
        });
    }
    Ok(finalize_embedding(&raw))
}

pub fn finalize_embedding(raw: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        let mut e0 = vec![0.0; v.len()];
        if let Some(first) = e0.first_mut() {
            *first = 1.0;
        }
        return e0;
    }
    v.into_iter().map(|x| x / norm).collect()
}

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    text.split_whitespace().take(max_tokens).collect::<Vec<_>>().join(" ")
}

/// Generates text and enforces the whitespace-token budget.
pub fn generate_text(p: &dyn GenerationProvider, prompt: &str, max_tokens: usize, temperature: f64) -> Result<String> {
    if max_tokens == 0 {
        return Err(ProviderError::InvalidRequest("max_tokens must be >= 1".into()));
    }
    let budget = max_tokens.min(p.max_output_tokens());
    let out = p.generate(prompt, budget, temperature)?;
    if whitespace_tokens(&out) > budget {
        return Ok(truncate_tokens(&out, budget));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prompt protocol shared by the prompt builders and the mock generator.

/// Opens the quoted source text inside a prompt.
pub const SOURCE_OPEN: &str = "<<<";
/// Closes the quoted source text inside a prompt.
pub const SOURCE_CLOSE: &str = ">>>";
/// Line prefix listing rationale aspects, separated by `;`.
pub const ASPECTS_PREFIX: &str = "Aspects:";

/// Text between the first [`SOURCE_OPEN`] and the following [`SOURCE_CLOSE`].
pub fn quoted_source(prompt: &str) -> Option<&str> {
    let start = prompt.find(SOURCE_OPEN)? + SOURCE_OPEN.len();
    let len = prompt[start..].find(SOURCE_CLOSE)?;
    Some(&prompt[start..start + len])
}

fn aspect_list(prompt: &str) -> Option<Vec<String>> {
    prompt.lines().find_map(|line| {
        line.trim().strip_prefix(ASPECTS_PREFIX).map(|rest| {
            rest.split(';')
                .map(|a| a.trim().to_string())
                .filter(|a| !a.is_empty())
                .collect()
        })
    })
}

// ---------------------------------------------------------------------------
// Mocks

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashed character-trigram embedder.
///
/// Lowercases the text, hashes each character trigram (seeded by the model
/// id) to one of `dimension` buckets with a ±1 sign, accumulates and
/// L2-normalizes. Texts shorter than three characters give `e_0`.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    model_id: String,
    dimension: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(model_id: impl Into<String>, dimension: usize) -> Self {
        let model_id = model_id.into();
        let seed = fnv1a(0, model_id.as_bytes());
        Self {
            model_id,
            dimension: dimension.max(1),
            seed,
        }
    }

    /// Bucket and sign for one trigram.
    pub fn trigram_slot(&self, trigram: &str) -> (usize, f64) {
        let h = mix64(fnv1a(self.seed, trigram.as_bytes()));
        let bucket = (h % self.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

/// Lowercased character trigrams, in order, with repetition.
pub fn char_trigrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

impl EmbeddingProvider for MockEmbedder {
    fn provider_id(&self) -> &str {
        "mock"
    }
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let mut acc = vec![0.0f64; self.dimension];
        for tri in char_trigrams(text) {
            let (b, s) = self.trigram_slot(&tri);
            acc[b] += s;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut e0 = vec![0.0f32; self.dimension];
            e0[0] = 1.0;
            return Ok(e0);
        }
        Ok(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Template generator.
///
/// Rationale prompts (those with an [`ASPECTS_PREFIX`] line) yield one
/// fixed sentence per aspect. Other prompts with a quoted source yield the
/// first `max_tokens` whitespace tokens of that source; anything else
/// echoes the prompt, truncated.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    model_id: String,
    max_output_tokens: usize,
    context_tokens: usize,
}

impl MockGenerator {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            max_output_tokens: 4096,
            context_tokens: 32_768,
        }
    }

    pub fn with_context_tokens(mut self, limit: usize) -> Self {
        self.context_tokens = limit;
        self
    }
}

impl GenerationProvider for MockGenerator {
    fn provider_id(&self) -> &str {
        "mock"
    }
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn max_output_tokens(&self) -> usize {
        self.max_output_tokens
    }
    fn generate(&self, prompt: &str, max_tokens: usize, _temperature: f64) -> Result<String> {
        let n = whitespace_tokens(prompt);
        if n > self.context_tokens {
            return Err(ProviderError::PromptTooLong {
                tokens: n,
                limit: self.context_tokens,
            });
        }
        let text = if let Some(aspects) = aspect_list(prompt) {
            aspects
                .iter()
                .map(|a| format!("{a}: the video shows a typical level of {a} for its genre."))
                .collect::<Vec<_>>()
                .join(" ")
        } else if let Some(src) = quoted_source(prompt) {
            src.to_string()
        } else {
            prompt.to_string()
        };
        Ok(truncate_tokens(&text, max_tokens))
    }
}

// ---------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub provider_id: String,
    pub model_id: String,
    pub digest: String,
}

fn check_component(s: &str, what: &str) -> Result<()> {
    if s.is_empty() {
        return Err(ProviderError::InvalidKey(format!("{what} is empty")));
    }
    if s == "." || s == ".." || s.contains(['/', '\\', '\0']) {
        return Err(ProviderError::InvalidKey(format!(
            "{what} {s:?} is not a safe path component"
        )));
    }
    Ok(())
}

impl CacheKey {
    /// SHA-256 over the UTF-8 bytes of the canonical request.
    pub fn new(provider_id: &str, model_id: &str, canonical_request: &str) -> Result<Self> {
        check_component(provider_id, "provider_id")?;
        check_component(model_id, "model_id")?;
        let digest = hex::encode(Sha256::digest(canonical_request.as_bytes()));
        Ok(Self {
            provider_id: provider_id.to_string(),
            model_id: model_id.to_string(),
            digest,
        })
    }
}

pub fn canonical_embed_request(text: &str) -> String {
    format!("embed\n{text}")
}

pub fn canonical_generate_request(prompt: &str, max_tokens: usize, temperature: f64) -> String {
    format!("generate\nmax_tokens={max_tokens}\ntemperature={temperature:?}\n{prompt}")
}

/// Content-addressed payload store on disk. Writes go through a temporary
/// file and an atomic rename, so concurrent puts to one key resolve to the
/// last writer.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ProviderError::StorageFailure(e.to_string()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(&key.provider_id).join(&key.model_id).join(&key.digest)
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>> {
        match fs::read(self.path_for(key)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::StorageFailure(e.to_string())),
        }
    }

    pub fn put(&self, key: &CacheKey, payload: &[u8]) -> Result<()> {
        let storage = |e: std::io::Error| ProviderError::StorageFailure(e.to_string());
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(storage)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(storage)?;
        tmp.write_all(payload).map_err(storage)?;
        tmp.persist(&path).map_err(|e| storage(e.error))?;
        Ok(())
    }
}

/// 4-byte little-endian element count followed by little-endian `f32`s.
pub fn encode_embedding(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * v.len());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Result<Vec<f32>> {
    let bad = || ProviderError::StorageFailure("corrupt embedding payload".into());
    let (len, body) = bytes.split_first_chunk::<4>().ok_or_else(bad)?;
    let n = u32::from_le_bytes(*len) as usize;
    if body.len() != 4 * n {
        return Err(bad());
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

pub struct CachedEmbedder<P> {
    inner: P,
    cache: Arc<CacheStore>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P, cache: Arc<CacheStore>) -> Self {
        Self { inner, cache }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let key = CacheKey::new(self.provider_id(), self.model_id(), &canonical_embed_request(text))?;
        if let Some(bytes) = self.cache.get(&key)? {
            return decode_embedding(&bytes);
        }
        let v = self.inner.embed_raw(text)?;
        self.cache.put(&key, &encode_embedding(&v))?;
        Ok(v)
    }
}

pub struct CachedGenerator<P> {
    inner: P,
    cache: Arc<CacheStore>,
}

impl<P: GenerationProvider> CachedGenerator<P> {
    pub fn new(inner: P, cache: Arc<CacheStore>) -> Self {
        Self { inner, cache }
    }
}

impl<P: GenerationProvider> GenerationProvider for CachedGenerator<P> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn max_output_tokens(&self) -> usize {
        self.inner.max_output_tokens()
    }
    fn generate(&self, prompt: &str, max_tokens: usize, temperature: f64) -> Result<String> {
        let key = CacheKey::new(
            self.provider_id(),
            self.model_id(),
            &canonical_generate_request(prompt, max_tokens, temperature),
        )?;
        if let Some(bytes) = self.cache.get(&key)? {
            return String::from_utf8(bytes)
                .map_err(|_| ProviderError::StorageFailure("cached text is not UTF-8".into()));
        }
        let text = self.inner.generate(prompt, max_tokens, temperature)?;
        self.cache.put(&key, text.as_bytes())?;
        Ok(text)
    }
}

// ---------------------------------------------------------------------------
// Remote clients

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Worth retrying (connection reset, 5xx, rate limited).
    Transient(String),
    Timeout,
    /// Not worth retrying (bad request, auth).
    Fatal(String),
}

/// Request/response carrier for a remote provider. Implementations own the
/// wire protocol; the clients here only build JSON bodies and apply retries.
pub trait Transport: Send + Sync {
    fn call(&self, body: &str, timeout: Duration) -> std::result::Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): `base * 2^attempt`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Runs `op` once plus up to `policy.max_retries` retries on transient
/// failures, sleeping with exponential backoff in between.
pub fn call_with_retry<T>(
    policy: &RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut(Duration) -> std::result::Result<T, TransportError>,
) -> Result<T> {
    let mut last = String::new();
    for attempt in 0..=policy.max_retries {
        match op(policy.timeout) {
            Ok(v) => return Ok(v),
            Err(TransportError::Fatal(msg)) => return Err(ProviderError::ProviderUnavailable(msg)),
            Err(TransportError::Transient(msg)) => last = msg,
            Err(TransportError::Timeout) => last = "request timed out".into(),
        }
        if attempt < policy.max_retries {
            sleep(policy.backoff(attempt));
        }
    }
    Err(ProviderError::ProviderUnavailable(format!(
        "gave up after {} attempts: {last}",
        policy.max_retries + 1
    )))
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

pub struct RemoteEmbedder<T> {
    pub provider_id: String,
    pub model_id: String,
    pub dimension: usize,
    pub policy: RetryPolicy,
    transport: T,
}

impl<T: Transport> RemoteEmbedder<T> {
    pub fn new(provider_id: &str, model_id: &str, dimension: usize, transport: T) -> Self {
        Self {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            dimension,
            policy: RetryPolicy::default(),
            transport,
        }
    }
}

impl<T: Transport> EmbeddingProvider for RemoteEmbedder<T> {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let body = serde_json::to_string(&EmbedRequest {
            model: &self.model_id,
            input: text,
        })
        .expect("request serializes");
        let raw = call_with_retry(&self.policy, std::thread::sleep, |timeout| {
            self.transport.call(&body, timeout)
        })?;
        let resp: EmbedResponse =
            serde_json::from_str(&raw).map_err(|e| ProviderError::ProviderUnavailable(format!("bad response: {e}")))?;
        if resp.embedding.len() != self.dimension {
            return Err(ProviderError::DimensionMismatch {
                expected: self.dimension,
                got: resp.embedding.len(),
            });
        }
        Ok(resp.embedding)
    }
}

pub struct RemoteGenerator<T> {
    pub provider_id: String,
    pub model_id: String,
    pub max_output_tokens: usize,
    pub policy: RetryPolicy,
    transport: T,
}

impl<T: Transport> RemoteGenerator<T> {
    pub fn new(provider_id: &str, model_id: &str, max_output_tokens: usize, transport: T) -> Self {
        Self {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            max_output_tokens,
            policy: RetryPolicy::default(),
            transport,
        }
    }
}

impl<T: Transport> GenerationProvider for RemoteGenerator<T> {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn max_output_tokens(&self) -> usize {
        self.max_output_tokens
    }
    fn generate(&self, prompt: &str, max_tokens: usize, temperature: f64) -> Result<String> {
        let body = serde_json::to_string(&GenerateRequest {
            model: &self.model_id,
            prompt,
            max_tokens,
            temperature,
        })
        .expect("request serializes");
        let raw = call_with_retry(&self.policy, std::thread::sleep, |timeout| {
            self.transport.call(&body, timeout)
        })?;
        let resp: GenerateResponse =
            serde_json::from_str(&raw).map_err(|e| ProviderError::ProviderUnavailable(format!("bad response: {e}")))?;
        Ok(resp.text)
    }
}
