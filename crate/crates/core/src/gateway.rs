//! Chat-completion backends.
//!
//! [`OpenAiBackend`] talks to an OpenAI-compatible `/chat/completions` endpoint. The other
//! backends exist for deterministic runs: [`ReplayBackend`] answers from a recorded
//! [`Transcript`] by request digest, [`ScriptedBackend`] pops responses in FIFO order, and
//! [`RecordingBackend`] forwards to another backend while appending every exchange.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::{PromptBundle, Role, Turn};

pub const API_KEY_ENV: &str = "VRPILOT_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub system: String,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn from_bundle(
        bundle: &PromptBundle,
        model_name: &str,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        Self {
            model_name: model_name.to_string(),
            system: bundle.system.clone(),
            turns: bundle.turns.clone(),
            temperature,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.turns.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "turns must not be empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 over system message, turns and temperature. Replay lookups key on this.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            system: &'a str,
            turns: &'a [Turn],
            temperature: f64,
        }
        let key = serde_json::to_vec(&Key {
            system: &self.system,
            turns: &self.turns,
            temperature: self.temperature,
        })
        .expect("request key serializes");
        hex::encode(Sha256::digest(key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("environment variable {API_KEY_ENV} is not set")]
    MissingApiKey,
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("no recorded response for request digest {digest}")]
    ReplayMiss { digest: String },
    #[error("scripted responses exhausted after {served} call(s)")]
    ScriptExhausted { served: usize },
    #[error("transcript {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("transcript parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

/// Anything that can answer a chat request. Implementations are shared across task workers.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Ordered request/response pairs. Serialized as a JSON array with one object per pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn push(&mut self, request: ChatRequest, response: ChatResponse) {
        self.entries.push(TranscriptEntry {
            digest: request.digest(),
            request,
            response,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn record_session(transcript: &Transcript, path: &Path) -> Result<(), GatewayError> {
    let text = serde_json::to_string_pretty(transcript).expect("transcript serializes");
    fs::write(path, text + "\n").map_err(|source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_session(path: &Path) -> Result<Transcript, GatewayError> {
    let text = fs::read_to_string(path).map_err(|source| GatewayError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_transcript(&text)
}

pub fn parse_transcript(text: &str) -> Result<Transcript, GatewayError> {
    serde_json::from_str(text).map_err(|e| GatewayError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let preceding: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (preceding + column.saturating_sub(1)).min(text.len())
}

/// Answers from a recorded transcript, keyed on [`ChatRequest::digest`].
///
/// When a digest was recorded more than once, the first response wins.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, ChatResponse>,
}

impl ReplayBackend {
    pub fn new(transcript: &Transcript) -> Self {
        let mut responses = HashMap::new();
        for entry in &transcript.entries {
            responses
                .entry(entry.digest.clone())
                .or_insert_with(|| entry.response.clone());
        }
        Self { responses }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        Ok(Self::new(&load_session(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let digest = request.digest();
        self.responses
            .get(&digest)
            .cloned()
            .ok_or(GatewayError::ReplayMiss { digest })
    }
}

/// Serves a fixed queue of responses in order, whatever the request. Single consumer.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ChatResponse>>,
    served: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_responses(responses.into_iter().map(|s| ChatResponse::stop(s)))
    }

    pub fn from_responses(responses: impl IntoIterator<Item = ChatResponse>) -> Self {
        Self {
            queue: Mutex::new(responses.into_iter().collect()),
            served: Mutex::new(0),
        }
    }

    /// Replays a transcript positionally, ignoring request digests.
    pub fn from_transcript(transcript: &Transcript) -> Self {
        Self::from_responses(transcript.entries.iter().map(|e| e.response.clone()))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let mut served = self.served.lock().unwrap();
        match self.queue.lock().unwrap().pop_front() {
            Some(r) => {
                *served += 1;
                Ok(r)
            }
            None => Err(GatewayError::ScriptExhausted { served: *served }),
        }
    }
}

/// Forwards to `inner` and keeps every successful exchange.
pub struct RecordingBackend<B> {
    inner: B,
    transcript: Mutex<Transcript>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            transcript: Mutex::new(Transcript::default()),
        }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().unwrap().clone()
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        record_session(&self.transcript(), path)
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        self.transcript
            .lock()
            .unwrap()
            .push(request.clone(), response.clone());
        Ok(response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, failed_attempts: u32) -> Duration {
        self.initial_backoff * self.multiplier.pow(failed_attempts.saturating_sub(1))
    }
}

/// Live backend for an OpenAI-compatible chat-completions endpoint.
pub struct OpenAiBackend {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessageOwned,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessageOwned {
    #[serde(default)]
    content: Option<String>,
}

enum Outcome {
    Done(ChatResponse),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl OpenAiBackend {
    /// Reads the API key from `VRPILOT_API_KEY`.
    pub fn from_env(base_url: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::MissingApiKey)?;
        Self::new(base_url, &key, timeout)
    }

    pub fn new(base_url: &str, api_key: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            client,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn body(request: &ChatRequest) -> Vec<u8> {
        let mut messages = vec![WireMessage {
            role: "system",
            content: &request.system,
        }];
        messages.extend(request.turns.iter().map(|t| WireMessage {
            role: match t.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            },
            content: &t.content,
        }));
        serde_json::to_vec(&WireRequest {
            model: &request.model_name,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        })
        .expect("wire request serializes")
    }

    fn send_once(&self, url: &str, body: &[u8], attempt: u32, started: Instant) -> Outcome {
        let result = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec())
            .send();
        let response = match result {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Outcome::Retry(GatewayError::Timeout { attempts: attempt })
            }
            Err(e) => {
                return Outcome::Retry(GatewayError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => {
                return Outcome::Retry(GatewayError::Timeout { attempts: attempt })
            }
            Err(e) => {
                return Outcome::Retry(GatewayError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        if !status.is_success() {
            let err = GatewayError::Http {
                status: status.as_u16(),
                attempts: attempt,
                body: text,
            };
            return if status.as_u16() == 429 || status.is_server_error() {
                Outcome::Retry(err)
            } else {
                Outcome::Fail(err)
            };
        }
        let parsed: WireResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Outcome::Fail(GatewayError::BadResponse(e.to_string())),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Outcome::Fail(GatewayError::BadResponse("no choices".into()));
        };
        let content = choice.message.content.unwrap_or_default();
        let finish_reason = match choice.finish_reason.as_deref() {
            _ if content.is_empty() => FinishReason::Error,
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Outcome::Done(ChatResponse {
            content,
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let url = format!("{}/chat/completions", self.base_url);
        let body = Self::body(request);
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&url, &body, attempt, started) {
                Outcome::Done(r) => return Ok(r),
                Outcome::Fail(e) => return Err(e),
                Outcome::Retry(e) if attempt >= self.retry.max_attempts => return Err(e),
                Outcome::Retry(e) => {
                    log::warn!("chat request attempt {attempt} failed: {e}; retrying");
                    thread::sleep(self.retry.backoff(attempt));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(text: &str, temperature: f64) -> ChatRequest {
        ChatRequest {
            model_name: "gpt-3.5-turbo".into(),
            system: "sys".into(),
            turns: vec![Turn::user(text)],
            temperature,
            max_tokens: 2048,
        }
    }

    #[test]
    fn digest_depends_on_content_and_temperature_only() {
        let a = request("x", 0.0);
        let mut b = a.clone();
        b.model_name = "other".into();
        b.max_tokens = 10;
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), request("x", 0.25).digest());
        assert_ne!(a.digest(), request("y", 0.0).digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn replay_hits_and_misses() {
        let mut t = Transcript::default();
        t.push(request("fix", 0.0), ChatResponse::stop("patched code"));
        let replay = ReplayBackend::new(&t);
        assert_eq!(
            replay.complete(&request("fix", 0.0)).unwrap().content,
            "patched code"
        );
        assert_eq!(
            replay.complete(&request("fix", 0.0)).unwrap().content,
            "patched code"
        );
        let miss = request("other", 0.0);
        match replay.complete(&miss) {
            Err(GatewayError::ReplayMiss { digest }) => assert_eq!(digest, miss.digest()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scripted_is_fifo() {
        let s = ScriptedBackend::new(["Z1", "P1"]);
        assert_eq!(s.complete(&request("a", 0.0)).unwrap().content, "Z1");
        assert_eq!(s.complete(&request("b", 0.0)).unwrap().content, "P1");
        assert!(matches!(
            s.complete(&request("c", 0.0)),
            Err(GatewayError::ScriptExhausted { served: 2 })
        ));
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let s = ScriptedBackend::new(["x"]);
        let mut r = request("a", 0.0);
        r.turns.clear();
        assert!(matches!(
            s.complete(&r),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert!(matches!(
            s.complete(&request("a", 1.5)),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert_eq!(s.remaining(), 1);
    }

    #[test]
    fn recording_then_replay() {
        let rec = RecordingBackend::new(ScriptedBackend::new(["  keeps\nwhitespace  ", "two"]));
        rec.complete(&request("a", 0.5)).unwrap();
        rec.complete(&request("b", 0.5)).unwrap();
        let t = rec.transcript();
        assert_eq!(t.len(), 2);
        let replay = ReplayBackend::new(&t);
        assert_eq!(
            replay.complete(&request("a", 0.5)).unwrap().content,
            "  keeps\nwhitespace  "
        );
    }

    #[test]
    fn session_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Transcript::default();
        for i in 0..3 {
            t.push(
                request(&format!("q{i}"), 0.25 * i as f64),
                ChatResponse {
                    content: format!("a{i}\n"),
                    finish_reason: FinishReason::Length,
                    latency_ms: i,
                },
            );
        }
        let path = dir.path().join("t.json");
        record_session(&t, &path).unwrap();
        assert_eq!(load_session(&path).unwrap(), t);

        let empty = dir.path().join("empty.json");
        record_session(&Transcript::default(), &empty).unwrap();
        assert!(load_session(&empty).unwrap().is_empty());
    }

    #[test]
    fn corrupted_session_reports_byte_offset() {
        let text = "[\n  {\"digest\": \"abc\", \"request\": }\n]";
        match parse_transcript(text) {
            Err(GatewayError::Parse { offset, .. }) => {
                assert!(offset > 2 && offset < text.len(), "offset {offset}");
                assert_eq!(&text[offset..offset + 1], "}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wire_body_shape() {
        let body = OpenAiBackend::body(&request("hi", 0.75));
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["model"], "gpt-3.5-turbo");
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][0]["content"], "sys");
        assert_eq!(v["messages"][1]["role"], "user");
        assert_eq!(v["temperature"], 0.75);
        assert_eq!(v["max_tokens"], 2048);
    }

    #[test]
    fn backoff_is_exponential() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(1000));
    }
}
