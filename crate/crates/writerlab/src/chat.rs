//! Minimal OpenAI-compatible chat-completions client.
//!
//! The trait exists so evaluation and segmentation can be driven by recorded
//! fixtures in tests; the HTTP implementation reads its endpoint and key from
//! environment variables and never writes the key to disk.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage { role: "system".into(), content: content.into() }
    }
}

/// One chat round-trip. Implementations should treat transient transport
/// failures as `Error::Client` so callers can retry.
pub trait ChatClient {
    fn complete(&mut self, model: &str, messages: &[ChatMessage]) -> Result<String>;
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// HTTP client posting to `{base_url}/chat/completions` with a bearer key.
pub struct HttpChatClient {
    base_url: String,
    api_key: String,
    http: reqwest::blocking::Client,
    /// optional audit log of request/response bodies (key redacted)
    pub audit_log: Option<PathBuf>,
}

impl HttpChatClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Result<HttpChatClient> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Client(format!("http client init: {}", e)))?;
        Ok(HttpChatClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            http,
            audit_log: None,
        })
    }

    /// Build from a URL/key environment-variable pair, e.g.
    /// (`JUDGE_API_URL`, `JUDGE_API_KEY`). Returns None when unset.
    pub fn from_env(url_var: &str, key_var: &str) -> Result<Option<HttpChatClient>> {
        let url = match std::env::var(url_var) {
            Ok(v) if !v.trim().is_empty() => v,
            _ => return Ok(None),
        };
        let key = std::env::var(key_var).unwrap_or_default();
        Ok(Some(HttpChatClient::new(url, key)?))
    }

    fn audit(&self, direction: &str, body: &str) {
        if let Some(path) = &self.audit_log {
            let redacted = if self.api_key.is_empty() {
                body.to_string()
            } else {
                body.replace(&self.api_key, "[REDACTED]")
            };
            if let Ok(mut f) =
                std::fs::OpenOptions::new().create(true).append(true).open(path)
            {
                let _ = writeln!(f, "{} {}", direction, redacted);
            }
        }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&mut self, model: &str, messages: &[ChatMessage]) -> Result<String> {
        let req = ChatRequest { model, messages, temperature: 0.0 };
        let body = serde_json::to_string(&req)?;
        self.audit(">>", &body);
        let url = format!("{}/chat/completions", self.base_url);
        let resp = self
            .http
            .post(&url)
            .bearer_auth(&self.api_key)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| Error::Client(format!("request to {}: {}", url, e)))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::Client(format!("reading response: {}", e)))?;
        self.audit("<<", &text);
        if !status.is_success() {
            return Err(Error::Client(format!("{} returned {}: {}", url, status, text)));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Client(format!("bad response body: {}", e)))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Client("response had no choices".into()))
    }
}

/// Scripted client for tests: returns canned replies in order, then errors.
pub struct FixtureChatClient {
    replies: Vec<Result<String>>,
    pub requests: Vec<String>,
    cursor: usize,
}

impl FixtureChatClient {
    pub fn new(replies: Vec<Result<String>>) -> FixtureChatClient {
        FixtureChatClient { replies, requests: Vec::new(), cursor: 0 }
    }

    pub fn of_texts(texts: &[&str]) -> FixtureChatClient {
        FixtureChatClient::new(texts.iter().map(|t| Ok(t.to_string())).collect())
    }
}

impl ChatClient for FixtureChatClient {
    fn complete(&mut self, _model: &str, messages: &[ChatMessage]) -> Result<String> {
        self.requests
            .push(messages.last().map(|m| m.content.clone()).unwrap_or_default());
        if self.cursor >= self.replies.len() {
            return Err(Error::Client("fixture exhausted".into()));
        }
        let reply = match &self.replies[self.cursor] {
            Ok(s) => Ok(s.clone()),
            Err(e) => Err(Error::Client(format!("scripted failure: {}", e))),
        };
        self.cursor += 1;
        reply
    }
}
