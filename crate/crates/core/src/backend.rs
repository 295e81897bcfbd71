//! Model backends.
//!
//! Every model invocation (planner, captioner, validator, teacher, reasoning
//! synthesizer) goes through [`Backend::complete`]. Two implementations ship:
//! [`ScriptedBackend`] for deterministic tests and [`HttpBackend`] for
//! chat-completion endpoints.
//!
//! # Wire format
//!
//! Request body (`POST {endpoint}`, `Authorization: Bearer $LOOKBACK_API_KEY` when set):
//!
//! ```json
//! {"model":"m","messages":[{"role":"system","content":[{"type":"text","text":"..."}]},
//!   {"role":"user","content":[{"type":"text","text":"..."},
//!     {"type":"image_url","image_url":{"url":"data:image/png;base64,..."}}]}],
//!  "max_tokens":1024,"temperature":0.0,"stream":false}
//! ```
//!
//! Tool-role messages are sent with role `user`; their text part carries the
//! provenance label. The response must be `{"choices":[{"message":{"content":...}}]}`
//! where `content` is a string or an array of `{"type":"text","text":...}` parts.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "LOOKBACK_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// A file path or a `data:` URI.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        ImageRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_data_uri(&self) -> bool {
        self.0.starts_with("data:")
    }

    pub fn is_resolvable(&self) -> bool {
        self.is_data_uri() || Path::new(&self.0).is_file()
    }

    /// Inline data URI for the referenced image.
    pub fn to_data_uri(&self) -> Result<String, BackendError> {
        if self.is_data_uri() {
            return Ok(self.0.clone());
        }
        let bytes = std::fs::read(&self.0)
            .map_err(|e| BackendError::ImageUnresolvable(format!("{}: {e}", self.0)))?;
        Ok(encode_data_uri(&bytes, mime_for_path(&self.0)))
    }
}

pub fn encode_data_uri(bytes: &[u8], mime: &str) -> String {
    format!("data:{mime};base64,{}", BASE64.encode(bytes))
}

pub fn decode_data_uri(uri: &str) -> Option<Vec<u8>> {
    let (_, payload) = uri.strip_prefix("data:")?.split_once(";base64,")?;
    BASE64.decode(payload).ok()
}

fn mime_for_path(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "gif" => "image/gif",
        _ => "image/png",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(rename = "content")]
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<Part>) -> Self {
        ChatMessage { role, parts }
    }

    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            parts: vec![Part::Text { text: text.into() }],
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage::text(Role::System, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage::text(Role::Assistant, text)
    }

    /// Concatenated text parts, newline separated.
    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image { image } => Some(image),
            Part::Text { .. } => None,
        })
    }
}

/// Builder for interleaved text / image messages.
#[derive(Debug)]
pub struct MessageBuilder {
    role: Role,
    parts: Vec<Part>,
}

impl MessageBuilder {
    pub fn new(role: Role) -> Self {
        MessageBuilder {
            role,
            parts: Vec::new(),
        }
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.parts.push(Part::Text { text: text.into() });
        self
    }

    pub fn image(mut self, image: ImageRef) -> Self {
        self.parts.push(Part::Image { image });
        self
    }

    pub fn build(self) -> ChatMessage {
        ChatMessage {
            role: self.role,
            parts: self.parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error{}: {cause}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, cause: String },
    #[error("request timed out")]
    Timeout,
    #[error("unexpected response shape: {0}")]
    BadResponseShape(String),
    #[error("image cannot be resolved: {0}")]
    ImageUnresolvable(String),
    #[error("scripted backend exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("no scripted rule matched and no default is set")]
    NoRuleMatched,
    #[error("message list is empty or contains an empty message")]
    EmptyMessages,
}

pub trait Backend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() || messages.iter().any(|m| m.parts.is_empty()) {
        return Err(BackendError::EmptyMessages);
    }
    Ok(())
}

/// Stable digest of a message list (image references hashed by their string form).
pub fn messages_hash(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// A rule fires when the text of the last user or tool message contains every needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub contains: Vec<String>,
    pub reply: String,
}

/// Program of a [`ScriptedBackend`]; also the on-disk script format (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Program {
    Queue(Vec<String>),
    Rules {
        rules: Vec<Rule>,
        #[serde(default)]
        default: Option<String>,
    },
    /// Replay of a recorded `(input hash -> output)` log.
    Replay(BTreeMap<String, String>),
}

type Responder = Box<dyn Fn(&[ChatMessage]) -> Option<String> + Send + Sync>;

enum Script {
    Queue(VecDeque<String>),
    Rules {
        rules: Vec<Rule>,
        default: Option<String>,
    },
    Replay(BTreeMap<String, String>),
    Responder(Responder),
}

struct ScriptState {
    script: Script,
    calls: Vec<Vec<ChatMessage>>,
}

/// Deterministic backend driven by a fixed program. Calls are serialized internally.
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("calls", &self.call_count())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("scripted program is empty")]
pub struct EmptyProgram;

impl ScriptedBackend {
    pub fn new(program: Program) -> Result<Self, EmptyProgram> {
        let script = match program {
            Program::Queue(q) if q.is_empty() => return Err(EmptyProgram),
            Program::Queue(q) => Script::Queue(q.into()),
            Program::Rules { rules, default } if rules.is_empty() && default.is_none() => {
                return Err(EmptyProgram)
            }
            Program::Rules { rules, default } => Script::Rules { rules, default },
            Program::Replay(m) if m.is_empty() => return Err(EmptyProgram),
            Program::Replay(m) => Script::Replay(m),
        };
        Ok(ScriptedBackend::from_script(script))
    }

    pub fn queue<I, S>(replies: I) -> Result<Self, EmptyProgram>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend::new(Program::Queue(
            replies.into_iter().map(Into::into).collect(),
        ))
    }

    /// Backend computing each reply from the message list; `None` means "no reply" (an error).
    pub fn responder<F>(f: F) -> Self
    where
        F: Fn(&[ChatMessage]) -> Option<String> + Send + Sync + 'static,
    {
        ScriptedBackend::from_script(Script::Responder(Box::new(f)))
    }

    /// Loads a JSON script file.
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let program: Program =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        ScriptedBackend::new(program).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn from_script(script: Script) -> Self {
        ScriptedBackend {
            state: Mutex::new(ScriptState {
                script,
                calls: Vec::new(),
            }),
        }
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().expect("script lock").calls.len()
    }

    /// Every message list received so far, in call order.
    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.state.lock().expect("script lock").calls.clone()
    }
}

fn last_prompt_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .rev()
        .find(|m| matches!(m.role, Role::User | Role::Tool))
        .map(ChatMessage::text_content)
        .unwrap_or_default()
}

impl Backend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        check_messages(messages)?;
        let mut state = self.state.lock().expect("script lock");
        state.calls.push(messages.to_vec());
        let calls = state.calls.len();
        match &mut state.script {
            Script::Queue(q) => q
                .pop_front()
                .ok_or(BackendError::ScriptExhausted { calls: calls - 1 }),
            Script::Rules { rules, default } => {
                let prompt = last_prompt_text(messages);
                rules
                    .iter()
                    .find(|r| {
                        r.contains
                            .iter()
                            .all(|needle| prompt.contains(needle.as_str()))
                    })
                    .map(|r| r.reply.clone())
                    .or_else(|| default.clone())
                    .ok_or(BackendError::NoRuleMatched)
            }
            Script::Replay(log) => log
                .get(&messages_hash(messages))
                .cloned()
                .ok_or(BackendError::NoRuleMatched),
            Script::Responder(f) => f(messages).ok_or(BackendError::NoRuleMatched),
        }
    }
}

/// One line of a recorded transcript used for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub input_hash: String,
    pub output: String,
}

/// Wraps a backend and records `(input hash, output)` pairs for later replay.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<RecordedCall>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<RecordedCall> {
        self.log.lock().expect("record lock").clone()
    }

    pub fn to_program(&self) -> Program {
        Program::Replay(
            self.records()
                .into_iter()
                .map(|r| (r.input_hash, r.output))
                .collect(),
        )
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let output = self.inner.complete(messages)?;
        self.log.lock().expect("record lock").push(RecordedCall {
            input_hash: messages_hash(messages),
            output: output.clone(),
        });
        Ok(output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout_s: f64,
    pub retries: u32,
    pub retry_timeouts: bool,
    pub max_parallel: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model: "default".to_string(),
            max_tokens: 1024,
            temperature: 0.0,
            timeout_s: 120.0,
            retries: 2,
            retry_timeouts: false,
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid backend config: {0}")]
pub struct ConfigError(pub String);

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err(ConfigError("timeout_s must be > 0".into()));
        }
        if self.max_parallel == 0 {
            return Err(ConfigError("max_parallel must be >= 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(ConfigError("endpoint is empty".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Chat-completion client over HTTP.
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| ConfigError(e.to_string()))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let gate = Gate {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            limit: config.max_parallel,
        };
        Ok(HttpBackend {
            config,
            client,
            api_key,
            gate,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// The JSON request body for `messages`, with images inlined.
    pub fn request_body(&self, messages: &[ChatMessage]) -> Result<Value, BackendError> {
        let wire: Vec<Value> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User | Role::Tool => "user",
                    Role::Assistant => "assistant",
                };
                let content = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text { text } => Ok(json!({"type": "text", "text": text})),
                        Part::Image { image } => {
                            Ok(json!({"type": "image_url", "image_url": {"url": image.to_data_uri()?}}))
                        }
                    })
                    .collect::<Result<Vec<_>, BackendError>>()?;
                Ok(json!({"role": role, "content": content}))
            })
            .collect::<Result<_, BackendError>>()?;
        Ok(json!({
            "model": self.config.model,
            "messages": wire,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
            "stream": false,
        }))
    }

    fn send_once(&self, body: &[u8]) -> Result<String, BackendError> {
        let _permit = self.gate.acquire();
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        if !status.is_success() {
            return Err(BackendError::Transport {
                status: Some(status.as_u16()),
                cause: text.chars().take(200).collect(),
            });
        }
        extract_completion(&text)
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport {
            status: e.status().map(|s| s.as_u16()),
            cause: e.to_string(),
        }
    }
}

/// Text of the first choice of a chat-completion response body.
pub fn extract_completion(body: &str) -> Result<String, BackendError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| BackendError::BadResponseShape(e.to_string()))?;
    let content = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| {
            BackendError::BadResponseShape("missing choices[0].message.content".into())
        })?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => parts
            .iter()
            .map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Option<Vec<_>>>()
            .map(|texts| texts.concat())
            .ok_or_else(|| BackendError::BadResponseShape("content parts without text".into())),
        _ => Err(BackendError::BadResponseShape(
            "content is neither string nor array".into(),
        )),
    }
}

impl Backend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        check_messages(messages)?;
        let body = serde_json::to_vec(&self.request_body(messages)?).expect("request serializes");
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err(BackendError::Transport { status, cause }) if attempt < self.config.retries => {
                    log::warn!("transport error (status {status:?}): {cause}; retrying");
                }
                Err(BackendError::Timeout)
                    if self.config.retry_timeouts && attempt < self.config.retries =>
                {
                    log::warn!("request timed out; retrying");
                }
                Err(e) => return Err(e),
            }
            attempt += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(text: &str) -> ChatMessage {
        ChatMessage::text(Role::User, text)
    }

    #[test]
    fn queue_replies_in_order_then_exhausts() {
        let b = ScriptedBackend::queue(["A", "B"]).unwrap();
        assert_eq!(b.complete(&[user("x")]).unwrap(), "A");
        assert_eq!(b.complete(&[user("x")]).unwrap(), "B");
        assert_eq!(
            b.complete(&[user("x")]),
            Err(BackendError::ScriptExhausted { calls: 2 })
        );

        let one = ScriptedBackend::queue(["only"]).unwrap();
        one.complete(&[user("x")]).unwrap();
        assert!(matches!(
            one.complete(&[user("x")]),
            Err(BackendError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn empty_program_is_rejected() {
        assert!(ScriptedBackend::queue(Vec::<String>::new()).is_err());
        assert!(ScriptedBackend::new(Program::Rules {
            rules: vec![],
            default: None
        })
        .is_err());
    }

    #[test]
    fn rules_match_last_user_text() {
        let b = ScriptedBackend::new(Program::Rules {
            rules: vec![Rule {
                contains: vec!["step 2".into()],
                reply: "mapped".into(),
            }],
            default: Some("fallback".into()),
        })
        .unwrap();
        let msgs = vec![ChatMessage::system("sys step 2"), user("now at step 2")];
        assert_eq!(b.complete(&msgs).unwrap(), "mapped");
        assert_eq!(
            b.complete(&[ChatMessage::system("step 2"), user("step 3")])
                .unwrap(),
            "fallback"
        );
    }

    #[test]
    fn replay_reproduces_recording() {
        let rec = RecordingBackend::new(ScriptedBackend::queue(["one", "two"]).unwrap());
        let a = vec![user("first")];
        let b = vec![user("second")];
        let outs = [rec.complete(&a).unwrap(), rec.complete(&b).unwrap()];
        let replay = ScriptedBackend::new(rec.to_program()).unwrap();
        assert_eq!(replay.complete(&b).unwrap(), outs[1]);
        assert_eq!(replay.complete(&a).unwrap(), outs[0]);
        assert_eq!(
            replay.complete(&[user("other")]),
            Err(BackendError::NoRuleMatched)
        );
    }

    #[test]
    fn empty_messages_rejected() {
        let b = ScriptedBackend::queue(["A"]).unwrap();
        assert_eq!(b.complete(&[]), Err(BackendError::EmptyMessages));
    }

    #[test]
    fn data_uri_round_trips_bytes() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(1337).collect();
        let uri = encode_data_uri(&bytes, "image/png");
        assert!(uri.starts_with("data:image/png;base64,"));
        assert_eq!(decode_data_uri(&uri).unwrap(), bytes);
    }

    #[test]
    fn unresolvable_image() {
        let img = ImageRef::new("/definitely/not/here.png");
        assert!(matches!(
            img.to_data_uri(),
            Err(BackendError::ImageUnresolvable(_))
        ));
    }

    #[test]
    fn completion_extraction() {
        assert_eq!(
            extract_completion(r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#)
                .unwrap(),
            "hi"
        );
        assert_eq!(
            extract_completion(r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#)
                .unwrap(),
            "ab"
        );
        assert!(matches!(
            extract_completion(r#"{"choices":[]}"#),
            Err(BackendError::BadResponseShape(_))
        ));
        assert!(matches!(
            extract_completion("nope"),
            Err(BackendError::BadResponseShape(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.timeout_s = 0.0;
        assert!(c.validate().is_err());
    }
}
