//! HTTP clients for the detector and chat-completion contracts.
//!
//! Detector: `POST {"id": int, "code": string}` answered by
//! `{"verdict": "vulnerable"|"clean", "score": float}`.
//!
//! Chat: `POST {"model", "messages": [{"role", "content"}], "temperature", "max_tokens"}`;
//! the completion is `choices[0].message.content`. The bearer token, when
//! configured, is read from an environment variable.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::retry::Attempt;
use super::{ChatModel, Detector, DetectorReply, Message, RetryPolicy};
use crate::{BackendError, SampleId, Verdict};

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Sends one JSON request and classifies the outcome for the retry loop.
fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    sample: SampleId,
    body: &serde_json::Value,
) -> Attempt<String> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(token) = bearer {
        req = req.header("Authorization", &format!("Bearer {token}"));
    }
    let mut resp = match req.send(body.to_string()) {
        Ok(r) => r,
        Err(e) => return Attempt::Transient(e.to_string()),
    };
    let status = resp.status().as_u16();
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(e) => return Attempt::Transient(e.to_string()),
    };
    match status {
        200..=299 => Attempt::Done(text),
        408 | 429 | 500..=599 => Attempt::Transient(format!("HTTP {status}")),
        _ => Attempt::Fatal(BackendError::Protocol {
            sample,
            reason: format!("HTTP {status}: {}", truncate(&text, 200)),
        }),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub struct HttpDetector {
    url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
struct DetectorWireReply {
    verdict: String,
    score: f64,
}

impl HttpDetector {
    pub fn new(url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        Self {
            url: url.into(),
            agent: agent(timeout),
            retry,
        }
    }
}

impl Detector for HttpDetector {
    fn predict(&self, id: SampleId, code: &str) -> Result<DetectorReply, BackendError> {
        let body = json!({ "id": id, "code": code });
        let text = self.retry.run(id, "detector", |_| {
            post_json(&self.agent, &self.url, None, id, &body)
        })?;
        let protocol = |reason: String| BackendError::Protocol { sample: id, reason };
        let wire: DetectorWireReply =
            serde_json::from_str(&text).map_err(|e| protocol(format!("bad reply body: {e}")))?;
        let verdict = match wire.verdict.as_str() {
            "vulnerable" => Verdict::Vulnerable,
            "clean" => Verdict::Clean,
            other => return Err(protocol(format!("unknown verdict `{other}`"))),
        };
        DetectorReply {
            verdict,
            score: wire.score,
        }
        .validate(id)
    }
}

/// Decoding and transport settings for the chat client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_secs: 120.0,
            api_key_env: Some("LLM_API_KEY".into()),
        }
    }
}

pub struct HttpChat {
    url: String,
    settings: ChatSettings,
    token: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl std::fmt::Debug for HttpChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChat")
            .field("url", &self.url)
            .field("settings", &self.settings)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpChat {
    pub fn new(url: impl Into<String>, settings: ChatSettings, retry: RetryPolicy) -> Self {
        let token = settings
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        Self {
            url: url.into(),
            agent: agent(Duration::from_secs_f64(settings.timeout_secs)),
            settings,
            token,
            retry,
        }
    }

    fn request_body(&self, transcript: &[Message]) -> serde_json::Value {
        json!({
            "model": self.settings.model,
            "messages": transcript,
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
        })
    }
}

impl ChatModel for HttpChat {
    fn chat(&self, id: SampleId, transcript: &[Message]) -> Result<String, BackendError> {
        let body = self.request_body(transcript);
        let text = self.retry.run(id, "llm", |_| {
            post_json(&self.agent, &self.url, self.token.as_deref(), id, &body)
        })?;
        let protocol = |reason: &str| BackendError::Protocol {
            sample: id,
            reason: reason.to_string(),
        };
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| protocol(&format!("bad reply body: {e}")))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| protocol("reply has no choices[0].message.content"))?;
        if content.trim().is_empty() {
            return Err(protocol("empty completion"));
        }
        Ok(content.to_string())
    }
}
