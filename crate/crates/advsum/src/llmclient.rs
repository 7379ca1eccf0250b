//! Provider-agnostic chat-completion access.
//!
//! A [`Provider`] turns a [`ChatRequest`] into a [`ChatResponse`]. The
//! shipped implementations are [`HttpProvider`] (chat-completion wire
//! protocol with exponential-backoff retries and a `max_parallel` in-flight
//! cap), [`MockProvider`] (deterministic scripted answers plus a fallback
//! function — e.g. [`surrogate_fallback`], which classifies with the local
//! surrogate for fully offline runs), and [`CachingProvider`] (fingerprinted
//! response replay so interrupted paid runs resume without re-billing).
//!
//! [`parse_answer`] normalizes raw model text into a label, an abstention,
//! or a malformed marker; [`parse_confidence`] additionally extracts the
//! trailing `word (confidence)` probability. Remote models are not bitwise
//! reproducible even at temperature 0, which is exactly why every response
//! is addressable by request fingerprint and replayable from the cache.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Dictionary, LabelSet, Vocabulary};
use crate::prompts::{ChatPrompt, ABSTAIN_SENTENCE, INVD_MANUAL_INSTRUCTION};
use crate::surrogate::{predict_tokens, ModelParams};

/// Default completion budget for one-word classification replies.
pub const CLASSIFY_MAX_TOKENS: u32 = 16;

/// Default completion budget for step-1 code-recovery replies.
pub const RECOVERY_MAX_TOKENS: u32 = 512;

/// Errors from providers, parsing, and the response cache.
#[derive(Debug, Error)]
pub enum ClientError {
    /// The request violated an invariant before any call was made.
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// The auth environment variable is unset.
    #[error("auth key missing: environment variable `{0}` is not set")]
    MissingAuth(String),
    /// The provider rejected the credentials.
    #[error("authentication rejected: {0}")]
    AuthRejected(String),
    /// Every allowed attempt failed with a transient error.
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted {
        /// Attempts made (1 + max_retries).
        attempts: u32,
        /// Message of the last transient failure.
        last: String,
    },
    /// The provider answered with an unparseable payload.
    #[error("provider returned malformed payload: {0}")]
    MalformedPayload(String),
    /// Any other terminal provider failure.
    #[error("provider error: {0}")]
    Provider(String),
    /// A cache line failed to parse.
    #[error("cache line {line} is malformed: {reason}")]
    MalformedCache {
        /// 1-based line number.
        line: usize,
        /// Parse failure description.
        reason: String,
    },
    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One complete chat query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Provider-side model identifier.
    pub model_id: String,
    /// The conversation to send.
    pub messages: ChatPrompt,
    /// Sampling temperature; experiments ship with 0.
    pub temperature: f64,
    /// Completion token budget (positive).
    pub max_tokens: u32,
}

impl ChatRequest {
    /// A temperature-0 classification request with the default small
    /// completion budget.
    #[must_use]
    pub fn classification(model_id: impl Into<String>, messages: ChatPrompt) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: CLASSIFY_MAX_TOKENS,
        }
    }

    /// A temperature-0 code-recovery request with the large completion
    /// budget needed to echo a whole snippet back.
    #[must_use]
    pub fn recovery(model_id: impl Into<String>, messages: ChatPrompt) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: RECOVERY_MAX_TOKENS,
        }
    }

    /// Checks the request invariants.
    ///
    /// # Errors
    ///
    /// [`ClientError::InvalidRequest`] on an empty model id, a negative or
    /// non-finite temperature, or a zero token budget.
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.model_id.is_empty() {
            return Err(ClientError::InvalidRequest("model_id is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest(format!(
                "temperature {} is not a finite non-negative number",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_tokens is zero".into()));
        }
        Ok(())
    }

    /// Content-addressed identity of the request: SHA-256 over its canonical
    /// JSON serialization (field order fixed by the type). Identical
    /// requests always produce identical fingerprints; any change to the
    /// model, messages, temperature, or token budget changes it.
    #[must_use]
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

/// A provider's answer to one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatResponse {
    /// Generated text.
    pub text: String,
    /// Wall-clock time of the whole completion, backoff included.
    pub latency: Duration,
    /// Attempts made to obtain this response (≥ 1).
    pub attempt_count: u32,
}

/// A model reply after normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsedAnswer {
    /// A dictionary word, in its canonical dictionary spelling.
    Label(String),
    /// The model declined to answer.
    Abstain,
    /// Anything else; carries the raw text for auditing.
    Malformed(String),
}

impl ParsedAnswer {
    /// The label name, when this is a label.
    #[must_use]
    pub fn label(&self) -> Option<&str> {
        match self {
            ParsedAnswer::Label(name) => Some(name),
            _ => None,
        }
    }

    /// Whether the model abstained.
    #[must_use]
    pub fn is_abstain(&self) -> bool {
        matches!(self, ParsedAnswer::Abstain)
    }

    /// Whether the reply failed to parse.
    #[must_use]
    pub fn is_malformed(&self) -> bool {
        matches!(self, ParsedAnswer::Malformed(_))
    }
}

/// Remote-provider connection settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Chat-completion endpoint URL.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer key.
    pub auth_env_var: String,
    /// Retries allowed after the first attempt.
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    #[serde(with = "duration_millis")]
    pub backoff_base: Duration,
    /// In-flight request cap (≥ 1).
    pub max_parallel: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".to_owned(),
            auth_env_var: "ADVSUM_API_KEY".to_owned(),
            max_retries: 3,
            backoff_base: Duration::from_millis(250),
            max_parallel: 4,
        }
    }
}

/// Serializes a [`Duration`] as integer milliseconds.
mod duration_millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Duration, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_u64(u64::try_from(value.as_millis()).unwrap_or(u64::MAX))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(de)?))
    }
}

/// Anything that can answer chat requests. Implementations must be callable
/// from multiple threads; each call is independent and responses are
/// returned to the caller that made the request, never reordered or merged.
pub trait Provider: Send + Sync {
    /// Completes one request.
    ///
    /// # Errors
    ///
    /// Terminal [`ClientError`]s only; transient failures are retried
    /// internally where the implementation supports it.
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).complete(request)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).complete(request)
    }
}

/// Outcome of a single attempt inside [`retry_with_backoff`].
#[derive(Debug)]
pub enum AttemptError {
    /// Worth retrying (timeout, rate limit, server error).
    Transient(String),
    /// Not worth retrying; surfaced to the caller unchanged.
    Terminal(ClientError),
}

/// Runs `attempt` up to `1 + max_retries` times, sleeping
/// `backoff_base · 2^(attempt-1)` between transient failures. Returns the
/// first success together with the number of attempts made.
///
/// # Errors
///
/// The terminal error unchanged, or [`ClientError::RetriesExhausted`]
/// carrying the last transient message.
pub fn retry_with_backoff<T>(
    max_retries: u32,
    backoff_base: Duration,
    mut attempt: impl FnMut(u32) -> Result<T, AttemptError>,
) -> Result<(T, u32), ClientError> {
    let attempts_allowed = max_retries.saturating_add(1);
    let mut last = String::new();
    for i in 1..=attempts_allowed {
        match attempt(i) {
            Ok(value) => return Ok((value, i)),
            Err(AttemptError::Terminal(e)) => return Err(e),
            Err(AttemptError::Transient(message)) => {
                last = message;
                if i < attempts_allowed && !backoff_base.is_zero() {
                    let factor = 1u32 << (i - 1).min(16);
                    std::thread::sleep(backoff_base.saturating_mul(factor));
                }
            }
        }
    }
    Err(ClientError::RetriesExhausted {
        attempts: attempts_allowed,
        last,
    })
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().expect("semaphore lock") += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a ChatPrompt,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

/// Chat-completion client over HTTP with bearer auth, retries, and an
/// in-flight cap.
pub struct HttpProvider {
    config: ProviderConfig,
    key: String,
    client: reqwest::blocking::Client,
    semaphore: Semaphore,
}

impl HttpProvider {
    /// Builds the client, reading the bearer key from the environment
    /// variable named in `config`.
    ///
    /// # Errors
    ///
    /// [`ClientError::MissingAuth`] when the variable is unset or empty;
    /// [`ClientError::Provider`] when the HTTP client cannot be built.
    pub fn new(config: ProviderConfig) -> Result<Self, ClientError> {
        let key = std::env::var(&config.auth_env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ClientError::MissingAuth(config.auth_env_var.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ClientError::Provider(e.to_string()))?;
        let semaphore = Semaphore::new(config.max_parallel.max(1));
        Ok(HttpProvider {
            config,
            key,
            client,
            semaphore,
        })
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let _permit = self.semaphore.acquire();
        let payload = WireRequest {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let started = Instant::now();
        let (text, attempt_count) =
            retry_with_backoff(self.config.max_retries, self.config.backoff_base, |_| {
                let sent = self
                    .client
                    .post(&self.config.endpoint)
                    .bearer_auth(&self.key)
                    .json(&payload)
                    .send();
                let response = match sent {
                    Ok(r) => r,
                    Err(e) if e.is_timeout() || e.is_connect() => {
                        return Err(AttemptError::Transient(e.to_string()))
                    }
                    Err(e) => return Err(AttemptError::Terminal(ClientError::Provider(e.to_string()))),
                };
                let status = response.status();
                if status.as_u16() == 429 || status.is_server_error() {
                    return Err(AttemptError::Transient(format!("status {status}")));
                }
                if status.as_u16() == 401 || status.as_u16() == 403 {
                    return Err(AttemptError::Terminal(ClientError::AuthRejected(format!(
                        "status {status}"
                    ))));
                }
                if !status.is_success() {
                    return Err(AttemptError::Terminal(ClientError::Provider(format!(
                        "status {status}"
                    ))));
                }
                let body: WireResponse = response
                    .json()
                    .map_err(|e| AttemptError::Terminal(ClientError::MalformedPayload(e.to_string())))?;
                let choice = body.choices.into_iter().next().ok_or_else(|| {
                    AttemptError::Terminal(ClientError::MalformedPayload(
                        "response carried no choices".into(),
                    ))
                })?;
                Ok(choice.message.content)
            })?;
        Ok(ChatResponse {
            text,
            latency: started.elapsed(),
            attempt_count,
        })
    }
}

/// Deterministic in-process provider: answers from a fingerprint-keyed
/// script, falling back to a caller-supplied function for unscripted
/// requests.
pub struct MockProvider {
    script: HashMap<String, String>,
    fallback: Box<dyn Fn(&ChatRequest) -> String + Send + Sync>,
}

impl MockProvider {
    /// A provider answering from `script`, with `fallback` for misses.
    #[must_use]
    pub fn new(
        script: HashMap<String, String>,
        fallback: impl Fn(&ChatRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        MockProvider {
            script,
            fallback: Box::new(fallback),
        }
    }

    /// A strictly scripted provider: unscripted requests answer with a
    /// fixed non-dictionary marker (parses as malformed, so leaks are
    /// visible in reports).
    #[must_use]
    pub fn scripted(script: HashMap<String, String>) -> Self {
        Self::new(script, |_| "unscripted-request".to_owned())
    }

    /// Adds a scripted answer for `request`.
    #[must_use]
    pub fn with_response(mut self, request: &ChatRequest, text: impl Into<String>) -> Self {
        self.script.insert(request.fingerprint(), text.into());
        self
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let text = self
            .script
            .get(&request.fingerprint())
            .cloned()
            .unwrap_or_else(|| (self.fallback)(request));
        Ok(ChatResponse {
            text,
            latency: Duration::ZERO,
            attempt_count: 1,
        })
    }
}

/// Detects a step-1 recovery request and returns the embedded code.
fn strip_recovery_request(content: &str) -> Option<&str> {
    content
        .strip_prefix(INVD_MANUAL_INSTRUCTION)?
        .strip_prefix("\n code: ")
}

/// Recovers the query code from a final user message, undoing the known
/// template decorations (abstain suffix, instruction prefixes, confidence
/// wrapper). Returns the code and whether the request asked for a
/// confidence value.
///
/// This mirrors the prompt templates exactly, which lets offline providers
/// (and scripted test fixtures) answer by the code a request is about
/// rather than by opaque request bytes.
#[must_use]
pub fn extract_query_code(content: &str) -> (&str, bool) {
    const CODE_MARKER: &str = " to describe the following piece of code: ";
    const CONFIDENCE_TAIL: &str =
        ". Also, output your confidence in your choice as a probability between 0 and 1.";
    if content.starts_with("Use one word from the set ") {
        if let Some(start) = content.find(CODE_MARKER) {
            let after = &content[start + CODE_MARKER.len()..];
            if let Some(end) = after.rfind(CONFIDENCE_TAIL) {
                return (&after[..end], true);
            }
        }
    }
    let mut code = content;
    if let Some(stripped) = code.strip_suffix(ABSTAIN_SENTENCE) {
        code = stripped.strip_suffix('\n').unwrap_or(stripped);
    }
    if let Some(stripped) = code.strip_prefix(INVD_MANUAL_INSTRUCTION) {
        code = stripped.strip_prefix('\n').unwrap_or(stripped);
    } else if code.starts_with("Before summarization, ") {
        if let Some(newline) = code.find('\n') {
            code = &code[newline + 1..];
        }
    }
    (code, false)
}

/// A [`MockProvider`] fallback that answers every request with the local
/// surrogate: classification queries get the argmax label (with the argmax
/// probability when the request asked for a confidence), and step-1
/// recovery queries get the code echoed back behind a `code:` marker (the
/// surrogate cannot unperturb, so recovery is honestly a no-op).
///
/// Tokens the vocabulary does not know are dropped before prediction; a
/// query with no known tokens answers with the first label.
pub fn surrogate_fallback(
    params: ModelParams,
    vocab: Vocabulary,
    labels: LabelSet,
) -> impl Fn(&ChatRequest) -> String + Send + Sync + 'static {
    move |request| {
        let content = request.messages.final_user();
        if let Some(code) = strip_recovery_request(content) {
            return format!("code: {code}");
        }
        let (code, wants_confidence) = extract_query_code(content);
        let indices: Vec<usize> = code
            .split_whitespace()
            .filter_map(|t| vocab.lookup(t))
            .collect();
        if indices.is_empty() {
            return labels.label(0).unwrap_or("unknown").to_owned();
        }
        let probs = predict_tokens(&params, &indices);
        let mut best = 0usize;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        let name = labels.label(best).unwrap_or("unknown");
        if wants_confidence {
            format!("{name} ({:.2})", probs[best])
        } else {
            name.to_owned()
        }
    }
}

/// Characters stripped from both ends of a reply before strict matching.
fn is_decoration(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '.' | ','
                | '!'
                | '?'
                | ':'
                | ';'
                | '"'
                | '\''
                | '`'
                | '('
                | ')'
                | '['
                | ']'
                | '{'
                | '}'
                | '*'
                | '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
        )
}

fn is_abstain_text(trimmed: &str) -> bool {
    let lower = trimmed.to_lowercase();
    lower == "i don't know" || lower == "i don\u{2019}t know"
}

/// Normalizes raw model text into a [`ParsedAnswer`].
///
/// Strict rules: strip surrounding whitespace, punctuation, and quotes; a
/// case-insensitive exact match against the dictionary is a label; a
/// case-insensitive `i don't know` (straight or curly apostrophe) is an
/// abstention; anything else is malformed. With `lenient` set, a reply that
/// fails the strict rules but contains exactly one distinct dictionary word
/// as a whole word is that label — several or none stay malformed.
#[must_use]
pub fn parse_answer(text: &str, dictionary: &Dictionary, lenient: bool) -> ParsedAnswer {
    let trimmed = text.trim_matches(is_decoration);
    if let Some(canonical) = dictionary.find(trimmed) {
        return ParsedAnswer::Label(canonical.to_owned());
    }
    if is_abstain_text(trimmed) {
        return ParsedAnswer::Abstain;
    }
    if lenient {
        let mut found: Option<&str> = None;
        for fragment in text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
            if fragment.is_empty() {
                continue;
            }
            if let Some(canonical) = dictionary.find(fragment) {
                match found {
                    None => found = Some(canonical),
                    Some(previous) if previous == canonical => {}
                    Some(_) => return ParsedAnswer::Malformed(text.to_owned()),
                }
            }
        }
        if let Some(canonical) = found {
            return ParsedAnswer::Label(canonical.to_owned());
        }
    }
    ParsedAnswer::Malformed(text.to_owned())
}

/// Parses a `word (confidence)` reply: the trailing parenthesized value
/// must be a real in [0, 1] (out of range is malformed); the word part goes
/// through [`parse_answer`]. A reply without a parseable trailing value
/// falls back to [`parse_answer`] with no confidence.
#[must_use]
pub fn parse_confidence(
    text: &str,
    dictionary: &Dictionary,
    lenient: bool,
) -> (ParsedAnswer, Option<f64>) {
    let trimmed = text.trim().trim_end_matches(['.', ' ', '"']);
    if let Some(open) = trimmed.rfind('(') {
        if let Some(inner) = trimmed[open + 1..].strip_suffix(')') {
            if let Ok(value) = inner.trim().parse::<f64>() {
                if !(0.0..=1.0).contains(&value) {
                    return (ParsedAnswer::Malformed(text.to_owned()), None);
                }
                return (parse_answer(&trimmed[..open], dictionary, lenient), Some(value));
            }
        }
    }
    (parse_answer(text, dictionary, lenient), None)
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    fingerprint: String,
    text: String,
}

/// Fingerprint-keyed response store backed by a newline-delimited file.
#[derive(Clone, Debug, Default)]
pub struct ResponseCache {
    entries: HashMap<String, String>,
}

impl ResponseCache {
    /// Loads a cache file; a missing file is an empty cache. Blank lines
    /// are skipped; later records for the same fingerprint win (replay
    /// order).
    ///
    /// # Errors
    ///
    /// [`ClientError::MalformedCache`] naming the offending line, or I/O
    /// failures other than a missing file.
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(e.into()),
        };
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheRecord =
                serde_json::from_str(line).map_err(|e| ClientError::MalformedCache {
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
            entries.insert(record.fingerprint, record.text);
        }
        Ok(ResponseCache { entries })
    }

    /// The cached text for `fingerprint`, if any.
    #[must_use]
    pub fn get(&self, fingerprint: &str) -> Option<&str> {
        self.entries.get(fingerprint).map(String::as_str)
    }

    /// Stores a response.
    pub fn insert(&mut self, fingerprint: String, text: String) {
        self.entries.insert(fingerprint, text);
    }

    /// Number of cached responses.
    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Whether the cache is empty.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rewrites the cache file deterministically (records sorted by
    /// fingerprint).
    ///
    /// # Errors
    ///
    /// I/O failures.
    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        let mut fingerprints: Vec<&String> = self.entries.keys().collect();
        fingerprints.sort();
        let mut out = String::new();
        for fp in fingerprints {
            let record = CacheRecord {
                fingerprint: fp.clone(),
                text: self.entries[fp].clone(),
            };
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            );
        }
        fs::write(path, out)?;
        Ok(())
    }
}

struct CacheState {
    cache: ResponseCache,
    appender: Option<fs::File>,
}

/// Wraps any provider with fingerprint-keyed replay: hits answer from the
/// cache without touching the inner provider; misses are forwarded, then
/// appended to the cache file (flushed per record, so an interrupted run
/// resumes where it stopped).
pub struct CachingProvider<P> {
    inner: P,
    state: Mutex<CacheState>,
    path: Option<PathBuf>,
}

impl<P: Provider> CachingProvider<P> {
    /// Memory-only cache (no persistence).
    #[must_use]
    pub fn new(inner: P, cache: ResponseCache) -> Self {
        CachingProvider {
            inner,
            state: Mutex::new(CacheState {
                cache,
                appender: None,
            }),
            path: None,
        }
    }

    /// Loads (or creates) the cache file at `path` and appends every miss
    /// to it.
    ///
    /// # Errors
    ///
    /// Cache-file parse or I/O failures.
    pub fn with_file(inner: P, path: &Path) -> Result<Self, ClientError> {
        let cache = ResponseCache::load(path)?;
        let appender = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(CachingProvider {
            inner,
            state: Mutex::new(CacheState {
                cache,
                appender: Some(appender),
            }),
            path: Some(path.to_owned()),
        })
    }

    /// The backing file, when persistent.
    #[must_use]
    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

impl<P: Provider> Provider for CachingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        {
            let state = self.state.lock().expect("cache lock");
            if let Some(text) = state.cache.get(&fingerprint) {
                return Ok(ChatResponse {
                    text: text.to_owned(),
                    latency: Duration::ZERO,
                    attempt_count: 1,
                });
            }
        }
        let response = self.inner.complete(request)?;
        let mut state = self.state.lock().expect("cache lock");
        state
            .cache
            .insert(fingerprint.clone(), response.text.clone());
        if let Some(file) = state.appender.as_mut() {
            let record = CacheRecord {
                fingerprint,
                text: response.text.clone(),
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        Ok(response)
    }
}
