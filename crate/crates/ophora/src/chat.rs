//! Clients for the external chat-completion (LLM) and vision-chat (VLM)
//! services, plus the retry policy, the content-addressed response cache and
//! the shared in-flight limiter. Mock backends used by tests and by the
//! `--mock` pipeline mode live in [`mock`].

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frames::Frame;

pub const ENV_LLM_URL: &str = "OPHORA_LLM_URL";
pub const ENV_LLM_KEY: &str = "OPHORA_LLM_KEY";
pub const ENV_VLM_URL: &str = "OPHORA_VLM_URL";
pub const ENV_VLM_KEY: &str = "OPHORA_VLM_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("transient service failure: {0}")]
    Transient(String),
    #[error("service failure: {0}")]
    Permanent(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("cache io error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The widely adopted chat-completion request shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn single_user(model: &str, content: &str) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: content.to_string(),
            }],
            temperature: 0.0,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError>;
    /// Stable identifier of the backend (model name / endpoint) recorded in
    /// refinement fingerprints.
    fn fingerprint(&self) -> String;
}

pub trait VisionBackend: Send + Sync {
    fn ask_about_frame(&self, frame: &Frame, prompt: &str) -> Result<String, ChatError>;
    fn fingerprint(&self) -> String;
}

/// Exponential backoff: base 1 s, factor 2, at most 5 attempts by default.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests and mock runs.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            base: Duration::ZERO,
            factor: 2,
            max_attempts,
        }
    }
}

/// Run `call`, retrying transient failures with exponential backoff.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut call: impl FnMut() -> Result<T, ChatError>,
) -> Result<T, ChatError> {
    let mut delay = policy.base;
    let mut last = String::new();
    for attempt in 1..=policy.max_attempts {
        match call() {
            Ok(v) => return Ok(v),
            Err(ChatError::Transient(msg)) => {
                last = msg;
                if attempt < policy.max_attempts && !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                delay *= policy.factor;
            }
            Err(e) => return Err(e),
        }
    }
    Err(ChatError::ExhaustedRetries {
        attempts: policy.max_attempts,
        last,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed response cache: one file per key, written via
/// temp-then-rename so concurrent writers cannot leave partial entries.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: PathBuf) -> Result<Self, ChatError> {
        std::fs::create_dir_all(&dir).map_err(|e| ChatError::Cache(e.to_string()))?;
        Ok(ResponseCache { dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path(key)).ok()
    }

    pub fn put(&self, key: &str, value: &str) -> Result<(), ChatError> {
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)
            .map_err(|e| ChatError::Cache(e.to_string()))?;
        std::fs::write(tmp.path(), value).map_err(|e| ChatError::Cache(e.to_string()))?;
        tmp.persist(self.path(key))
            .map_err(|e| ChatError::Cache(e.to_string()))?;
        Ok(())
    }
}

/// Counting semaphore bounding concurrent service calls; shared between the
/// refiner and the privacy scanner.
pub struct InFlightLimiter {
    available: Mutex<usize>,
    condvar: Condvar,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        InFlightLimiter {
            available: Mutex::new(limit.max(1)),
            condvar: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        let mut avail = self.available.lock().unwrap();
        while *avail == 0 {
            avail = self.condvar.wait(avail).unwrap();
        }
        *avail -= 1;
        LimiterGuard { limiter: self }
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().unwrap() += 1;
        self.limiter.condvar.notify_one();
    }
}

/// HTTP chat-completion backend. Expects the conventional response body
/// `{"choices":[{"message":{"content": ...}}]}`.
pub struct HttpChatBackend {
    url: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(url: &str, api_key: Option<String>, model: &str) -> Self {
        HttpChatBackend {
            url: url.to_string(),
            api_key,
            model: model.to_string(),
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn from_env(model: &str) -> Result<Self, ChatError> {
        let url = std::env::var(ENV_LLM_URL)
            .map_err(|_| ChatError::Permanent(format!("{ENV_LLM_URL} not set")))?;
        let key = std::env::var(ENV_LLM_KEY).ok();
        Ok(Self::new(&url, key, model))
    }

    pub fn model(&self) -> &str {
        &self.model
    }
}

pub(crate) fn extract_assistant_text(body: &serde_json::Value) -> Result<String, ChatError> {
    body.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .map(|s| s.to_string())
        .or_else(|| body.get("answer").and_then(|a| a.as_str()).map(|s| s.to_string()))
        .ok_or_else(|| ChatError::Permanent(format!("unexpected response shape: {body}")))
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let mut req = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ChatError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ChatError::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(ChatError::Permanent(format!("status {status}")));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| ChatError::Permanent(e.to_string()))?;
        extract_assistant_text(&body)
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:{}", self.url, self.model)
    }
}

/// HTTP vision-chat backend: the prompt travels as a user message and the
/// frame as base64-encoded raw RGB24 alongside its dimensions.
pub struct HttpVisionBackend {
    url: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpVisionBackend {
    pub fn new(url: &str, api_key: Option<String>, model: &str) -> Self {
        HttpVisionBackend {
            url: url.to_string(),
            api_key,
            model: model.to_string(),
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn from_env(model: &str) -> Result<Self, ChatError> {
        let url = std::env::var(ENV_VLM_URL)
            .map_err(|_| ChatError::Permanent(format!("{ENV_VLM_URL} not set")))?;
        let key = std::env::var(ENV_VLM_KEY).ok();
        Ok(Self::new(&url, key, model))
    }
}

impl VisionBackend for HttpVisionBackend {
    fn ask_about_frame(&self, frame: &Frame, prompt: &str) -> Result<String, ChatError> {
        use base64::Engine;
        let payload = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
            "image": {
                "encoding": "rgb24",
                "width": frame.width,
                "height": frame.height,
                "data_base64": base64::engine::general_purpose::STANDARD.encode(&frame.data),
            },
        });
        let mut req = self.client.post(&self.url).json(&payload);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ChatError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ChatError::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(ChatError::Permanent(format!("status {status}")));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| ChatError::Permanent(e.to_string()))?;
        extract_assistant_text(&body)
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:{}", self.url, self.model)
    }
}

pub mod mock {
    //! Deterministic offline backends. The refinement mock strips sentences
    //! containing pedagogical phrases; the vision mock reports a frame as
    //! sensitive when it carries the magenta overlay marker used by the
    //! synthetic corpora.

    use std::sync::atomic::{AtomicU64, Ordering};

    use super::*;
    use crate::refiner;

    pub const OVERLAY_MARKER: [u8; 3] = [255, 0, 255];

    #[derive(Default)]
    pub struct MockChatBackend {
        pub calls: AtomicU64,
    }

    impl ChatBackend for MockChatBackend {
        fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let prompt = &request.messages.last().unwrap().content;
            let caption = refiner::target_caption_of_prompt(prompt)
                .ok_or_else(|| ChatError::Permanent("prompt has no target caption".into()))?;
            Ok(refine_deterministically(&caption))
        }

        fn fingerprint(&self) -> String {
            "mock-llm".into()
        }
    }

    /// Sentence-level strip of pedagogical content; a stand-in refinement
    /// that is deterministic and always validates.
    pub fn refine_deterministically(caption: &str) -> String {
        let phrases = refiner::default_blocklist();
        let kept: Vec<String> = caption
            .split_inclusive(['.', '!', '?'])
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .filter(|s| {
                let lower = s.to_lowercase();
                !phrases.iter().any(|p| lower.contains(p.as_str()))
            })
            .map(|s| s.to_string())
            .collect();
        let joined = kept.join(" ");
        let trimmed = joined.trim();
        if trimmed.is_empty() {
            "Unspecified surgical action.".to_string()
        } else {
            trimmed.to_string()
        }
    }

    /// Mock that fails every call after the first `fail_after` calls; used to
    /// exercise crash-restart behaviour.
    pub struct FailingAfter<B> {
        pub inner: B,
        pub fail_after: u64,
        pub calls: AtomicU64,
    }

    impl<B> FailingAfter<B> {
        pub fn new(inner: B, fail_after: u64) -> Self {
            FailingAfter {
                inner,
                fail_after,
                calls: AtomicU64::new(0),
            }
        }
    }

    impl<B: ChatBackend> ChatBackend for FailingAfter<B> {
        fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n >= self.fail_after {
                return Err(ChatError::Permanent("injected failure".into()));
            }
            self.inner.complete(request)
        }

        fn fingerprint(&self) -> String {
            self.inner.fingerprint()
        }
    }

    #[derive(Default)]
    pub struct MockVisionBackend {
        pub calls: AtomicU64,
    }

    impl MockVisionBackend {
        pub fn frame_is_sensitive(frame: &Frame) -> bool {
            frame
                .data
                .chunks_exact(3)
                .any(|px| px == OVERLAY_MARKER)
        }
    }

    impl VisionBackend for MockVisionBackend {
        fn ask_about_frame(&self, frame: &Frame, _prompt: &str) -> Result<String, ChatError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if Self::frame_is_sensitive(frame) {
                Ok("Yes, a text overlay is visible.".into())
            } else {
                Ok("No.".into())
            }
        }

        fn fingerprint(&self) -> String {
            "mock-vlm".into()
        }
    }

    /// Vision mock answering from a fixed script, one answer per call.
    pub struct ScriptedVisionBackend {
        pub answers: Vec<String>,
        pub calls: AtomicU64,
    }

    impl ScriptedVisionBackend {
        pub fn new(answers: Vec<&str>) -> Self {
            ScriptedVisionBackend {
                answers: answers.into_iter().map(|s| s.to_string()).collect(),
                calls: AtomicU64::new(0),
            }
        }

        pub fn call_count(&self) -> u64 {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl VisionBackend for ScriptedVisionBackend {
        fn ask_about_frame(&self, _frame: &Frame, _prompt: &str) -> Result<String, ChatError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            Ok(self
                .answers
                .get(n)
                .cloned()
                .unwrap_or_else(|| "No.".to_string()))
        }

        fn fingerprint(&self) -> String {
            "scripted-vlm".into()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn retry_recovers_from_transients() {
        let attempts = AtomicU32::new(0);
        let result = with_retry(&RetryPolicy::immediate(5), || {
            if attempts.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(ChatError::Transient("busy".into()))
            } else {
                Ok(42)
            }
        });
        assert_eq!(result.unwrap(), 42);
        assert_eq!(attempts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_exhaustion_reports_attempts() {
        let err = with_retry::<()>(&RetryPolicy::immediate(3), || {
            Err(ChatError::Transient("down".into()))
        })
        .unwrap_err();
        assert!(matches!(err, ChatError::ExhaustedRetries { attempts: 3, .. }));
    }

    #[test]
    fn permanent_errors_do_not_retry() {
        let attempts = AtomicU32::new(0);
        let err = with_retry::<()>(&RetryPolicy::immediate(5), || {
            attempts.fetch_add(1, Ordering::SeqCst);
            Err(ChatError::Permanent("bad request".into()))
        })
        .unwrap_err();
        assert!(matches!(err, ChatError::Permanent(_)));
        assert_eq!(attempts.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path().join("cache")).unwrap();
        assert_eq!(cache.get("k"), None);
        cache.put("k", "value").unwrap();
        assert_eq!(cache.get("k").as_deref(), Some("value"));
    }

    #[test]
    fn http_backend_speaks_chat_completion_wire_shape() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 8192];
            let n = stream.read(&mut buf).unwrap();
            let request = String::from_utf8_lossy(&buf[..n]).to_string();
            let body = r#"{"choices":[{"message":{"role":"assistant","content":"Refined text."}}]}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request
        });
        let backend = HttpChatBackend::new(&format!("http://{addr}/v1/chat/completions"), None, "test-model");
        let out = backend
            .complete(&ChatRequest::single_user("test-model", "hello"))
            .unwrap();
        assert_eq!(out, "Refined text.");
        let request = server.join().unwrap();
        assert!(request.contains(r#""model":"test-model""#));
        assert!(request.contains(r#""temperature":0.0"#));
        assert!(request.contains(r#""role":"user""#));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        use std::sync::Arc;
        let limiter = Arc::new(InFlightLimiter::new(2));
        let active = Arc::new(AtomicU32::new(0));
        let peak = Arc::new(AtomicU32::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let (l, a, p) = (limiter.clone(), active.clone(), peak.clone());
            handles.push(std::thread::spawn(move || {
                let _guard = l.acquire();
                let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                a.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
