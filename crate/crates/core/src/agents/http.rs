use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, Prompt, Turn};

pub const API_KEY_ENV: &str = "ROCO_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(500), timeout: Duration::from_secs(120) }
    }
}

/// OpenAI-style chat-completion client.
pub struct ChatHttpBackend {
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

enum Failure {
    Retry(String),
    Fatal(BackendError),
}

impl ChatHttpBackend {
    pub fn new(endpoint: &str, model: &str, temperature: f64, api_key: &str) -> Self {
        Self::with_retry(endpoint, model, temperature, api_key, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: &str, model: &str, temperature: f64, api_key: &str, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(retry.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature,
            api_key: api_key.into(),
            retry,
            agent,
        }
    }

    /// Reads the key from `ROCO_API_KEY`.
    pub fn from_env(endpoint: &str, model: &str, temperature: f64) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::MissingCredential(API_KEY_ENV.into()))?;
        Ok(Self::new(endpoint, model, temperature, &key))
    }

    pub fn request_body(&self, prompt: &Prompt) -> Value {
        json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": prompt.system },
                { "role": "user", "content": prompt.user },
            ],
            "temperature": self.temperature,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(BackendError::Unavailable { attempts: 1, last: format!("HTTP {status}: {text}") }));
        }
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Fatal(BackendError::Malformed(e.to_string())))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Failure::Fatal(BackendError::Malformed("no choices[0].message.content".into())))
    }

    /// Sends the prompt, retrying transport errors, 429 and 5xx with
    /// exponential backoff.
    pub fn query(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let body = self.request_body(prompt);
        let mut last = String::new();
        for i in 0..self.retry.attempts {
            if i > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(i as u32 - 1));
            }
            match self.attempt(&body) {
                Ok(content) => return Ok(content),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::Unavailable { attempts: self.retry.attempts, last })
    }
}

impl Backend for ChatHttpBackend {
    fn respond(&mut self, turn: &Turn) -> Result<String, BackendError> {
        self.query(&turn.prompt)
    }
}
