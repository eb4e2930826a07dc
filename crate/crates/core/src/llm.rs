//! Chat-completion clients.
//!
//! [`HttpClient`] talks to any chat-completions style endpoint; the API key
//! is read from `HISEKT_LLM_API_KEY`. [`ScriptedClient`] replays canned
//! replies and never touches the network.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "HISEKT_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

pub trait LlmClient: Send + Sync {
    /// One chat turn; returns the assistant's reply text.
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;

    /// Reformulation attempts allowed after a malformed reply.
    fn max_retries(&self) -> usize {
        3
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub max_in_flight: usize,
    /// Transport-level attempts per request, with exponential backoff.
    pub transport_attempts: usize,
    pub backoff_ms: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "qwen-plus".into(),
            timeout_secs: 60,
            max_retries: 3,
            max_in_flight: 8,
            transport_attempts: 3,
            backoff_ms: 500,
        }
    }
}

pub struct HttpClient {
    settings: LlmSettings,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(settings: LlmSettings) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).ok();
        Self::with_key(settings, api_key)
    }

    pub fn with_key(settings: LlmSettings, api_key: Option<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            settings,
            api_key,
            http,
        })
    }

    /// Request body sent to the endpoint.
    pub fn request_body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        json!({
            "model": self.settings.model,
            "messages": messages,
            "temperature": 0,
        })
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<String> {
        let mut req = self.http.post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        extract_reply(&text)
    }
}

/// Pulls `choices[0].message.content` out of a chat-completions response.
pub fn extract_reply(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Transport(format!("bad response body: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
}

impl LlmClient for HttpClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = self.request_body(messages);
        let attempts = self.settings.transport_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.settings.backoff_ms << (attempt - 1).min(10);
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.send_once(&body) {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    log::warn!("LLM request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn max_retries(&self) -> usize {
        self.settings.max_retries
    }

    fn max_in_flight(&self) -> usize {
        self.settings.max_in_flight
    }
}

/// Replays replies in order, repeating the last one once the script runs
/// out. Every request is recorded.
pub struct ScriptedClient {
    replies: Mutex<VecDeque<String>>,
    last: Mutex<Option<String>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
    max_retries: usize,
}

impl ScriptedClient {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            last: Mutex::new(None),
            requests: Mutex::new(Vec::new()),
            max_retries: 3,
        }
    }

    pub fn with_max_retries(mut self, n: usize) -> Self {
        self.max_retries = n;
        self
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().unwrap().clone()
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        self.requests.lock().unwrap().push(messages.to_vec());
        let next = self.replies.lock().unwrap().pop_front();
        let mut last = self.last.lock().unwrap();
        if let Some(r) = next {
            *last = Some(r);
        }
        last.clone()
            .ok_or_else(|| Error::Transport("scripted client has no replies".into()))
    }

    fn max_retries(&self) -> usize {
        self.max_retries
    }
}

/// Runs `f` over `items` with at most `max_in_flight` concurrent calls,
/// returning results in input order.
pub fn bounded_map<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_client_repeats_last_reply() {
        let c = ScriptedClient::new(["a", "b"]);
        let m = [ChatMessage::user("hi")];
        assert_eq!(c.complete(&m).unwrap(), "a");
        assert_eq!(c.complete(&m).unwrap(), "b");
        assert_eq!(c.complete(&m).unwrap(), "b");
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn extract_reply_reads_first_choice() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}]}"#;
        assert_eq!(extract_reply(body).unwrap(), "ok");
        assert!(matches!(extract_reply("{}"), Err(Error::Transport(_))));
        assert!(matches!(extract_reply("not json"), Err(Error::Transport(_))));
    }

    #[test]
    fn request_body_shape() {
        let c = HttpClient::with_key(LlmSettings::default(), None).unwrap();
        let body = c.request_body(&[ChatMessage::system("s"), ChatMessage::user("u")]);
        assert_eq!(body["model"], "qwen-plus");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "u");
    }

    #[test]
    fn bounded_map_preserves_order() {
        let xs: Vec<u32> = (0..100).collect();
        let ys = bounded_map(&xs, 3, |x| x * 2);
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
