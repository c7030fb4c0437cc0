//! Chat-completion client for hard-negative generation.
//!
//! Reads `SPACON_COMPLETION_ENDPOINT` (full URL of an OpenAI-style
//! `/chat/completions` route), `SPACON_COMPLETION_KEY` and
//! `SPACON_COMPLETION_MODEL`.

use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use spatial_contrast::dataset_forge::CompletionClient;
use spatial_contrast::{Error, Result};

const ATTEMPTS: usize = 3;

pub struct HttpClient {
    endpoint: String,
    key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("SPACON_COMPLETION_ENDPOINT").map_err(|_| {
            Error::Config("SPACON_COMPLETION_ENDPOINT is not set (pass --mock or --easy to run offline)".into())
        })?;
        let model = std::env::var("SPACON_COMPLETION_MODEL")
            .map_err(|_| Error::Config("SPACON_COMPLETION_MODEL is not set".into()))?;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        Ok(HttpClient {
            endpoint,
            key: std::env::var("SPACON_COMPLETION_KEY").ok(),
            model,
            agent,
        })
    }

    fn body(&self, prompt: &str, attachments: &[PathBuf]) -> Result<Value> {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        for p in attachments {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        Ok(json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }))
    }

    fn post(&self, body: &Value) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(k) = &self.key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp = req.send_json(body).map_err(|e| Error::Transport(e.to_string()))?;
        let v: Value = resp.into_json().map_err(|e| Error::Transport(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("completion response has no message content: {v}")))
    }
}

impl CompletionClient for HttpClient {
    fn send(&self, prompt: &str, attachments: &[PathBuf]) -> Result<String> {
        let body = self.body(prompt, attachments)?;
        let mut last = None;
        for attempt in 0..ATTEMPTS {
            match self.post(&body) {
                Err(Error::Transport(m)) => {
                    last = Some(m);
                    std::thread::sleep(Duration::from_secs(1 << attempt));
                }
                other => return other,
            }
        }
        Err(Error::Transport(last.unwrap_or_default()))
    }
}
