//! Chat-completions client.
//!
//! Requests are `{model, messages, temperature, max_tokens}` plus
//! `logprobs`/`top_logprobs` when probabilities are wanted. Per-label scores
//! are read from the first generated token's top logprobs; if any label has no
//! score there, the prediction is returned label-only rather than with
//! invented confidence.

use std::time::Duration;

use serde_json::{json, Value};

use crate::domain::{Prediction, Task};
use crate::error::{Error, Result};

use super::{extract_label, BackendConfig, BackendError, ChatMessage, Model, PredictRequest};

const DEFAULT_BACKOFF: Duration = Duration::from_millis(250);
const MAX_BACKOFF: Duration = Duration::from_secs(8);

pub struct HttpModel {
    client: reqwest::blocking::Client,
    endpoint: String,
    model_name: String,
    wants_probs: bool,
    temperature: f64,
    max_retries: u32,
    api_key: Option<String>,
    backoff_base: Duration,
}

impl std::fmt::Debug for HttpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpModel")
            .field("endpoint", &self.endpoint)
            .field("model_name", &self.model_name)
            .finish()
    }
}

impl HttpModel {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("http backend requires endpoint_url".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout())
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpModel {
            client,
            endpoint,
            model_name: cfg.model_name.clone(),
            wants_probs: cfg.wants_probs,
            temperature: cfg.temperature,
            max_retries: cfg.max_retries,
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
            backoff_base: DEFAULT_BACKOFF,
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn label_instruction(task: &Task) -> String {
        format!(
            "Answer with exactly one of the following labels and nothing else: {}.",
            task.label_set.join(", ")
        )
    }

    /// POST with exponential backoff on transport errors, 429 and 5xx.
    fn post(&self, body: &Value) -> std::result::Result<Value, BackendError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut req = self.client.post(&self.endpoint).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let retryable_msg = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let text = resp.text().map_err(|e| BackendError::Unavailable {
                            attempts: attempt,
                            message: e.to_string(),
                        })?;
                        return serde_json::from_str(&text).map_err(|e| BackendError::Unavailable {
                            attempts: attempt,
                            message: format!("malformed response body: {e}"),
                        });
                    }
                    let msg = format!("HTTP {status}");
                    if status.as_u16() != 429 && !status.is_server_error() {
                        return Err(BackendError::Unavailable {
                            attempts: attempt,
                            message: msg,
                        });
                    }
                    msg
                }
                Err(e) => e.to_string(),
            };
            if attempt > self.max_retries {
                return Err(BackendError::Unavailable {
                    attempts: attempt,
                    message: retryable_msg,
                });
            }
            let wait = self
                .backoff_base
                .saturating_mul(1u32 << (attempt - 1).min(16))
                .min(MAX_BACKOFF);
            log::debug!("retrying after {retryable_msg} in {wait:?}");
            std::thread::sleep(wait);
        }
    }
}

fn message_content(resp: &Value) -> Option<&str> {
    resp.pointer("/choices/0/message/content")?.as_str()
}

/// Per-label log-scores from the first token's `top_logprobs`. A label is
/// scored by the longest listed token that is a non-empty prefix of it.
/// Returns `None` when a label is unscored or two labels share a token.
pub fn label_scores(resp: &Value, label_set: &[String]) -> Option<Vec<f64>> {
    let top = resp
        .pointer("/choices/0/logprobs/content/0/top_logprobs")?
        .as_array()?;
    let entries: Vec<(String, f64)> = top
        .iter()
        .filter_map(|e| {
            Some((
                e.get("token")?.as_str()?.trim().to_string(),
                e.get("logprob")?.as_f64()?,
            ))
        })
        .filter(|(t, _)| !t.is_empty())
        .collect();
    let mut used = Vec::new();
    let mut scores = Vec::with_capacity(label_set.len());
    for label in label_set {
        let (idx, (_, lp)) = entries
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| label.starts_with(t.as_str()))
            .max_by_key(|(_, (t, _))| t.len())?;
        if used.contains(&idx) {
            return None;
        }
        used.push(idx);
        scores.push(*lp);
    }
    Some(scores)
}

impl Model for HttpModel {
    fn name(&self) -> &str {
        &self.model_name
    }

    fn wants_probs(&self) -> bool {
        self.wants_probs
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn is_remote(&self) -> bool {
        true
    }

    fn predict_uncached(
        &self,
        task: &Task,
        req: &PredictRequest<'_>,
    ) -> std::result::Result<Prediction, BackendError> {
        let messages = vec![
            ChatMessage::system(Self::label_instruction(task)),
            ChatMessage::user(req.prompt.render(req.example)),
        ];
        let mut body = json!({
            "model": self.model_name,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": if self.wants_probs { 16 } else { 64 },
        });
        if self.wants_probs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(task.label_set.len().clamp(5, 20));
        }
        let resp = self.post(&body)?;
        let raw = message_content(&resp).unwrap_or("").to_string();
        if self.wants_probs {
            if let Some(scores) = label_scores(&resp, &task.label_set) {
                return Prediction::from_scores(&task.label_set, &scores, raw.clone()).map_err(|_| {
                    BackendError::InvalidOutput {
                        example_id: req.example.id.clone(),
                        raw,
                    }
                });
            }
        }
        match extract_label(&raw, &task.label_set) {
            Some(label) => Ok(Prediction::label_only(label, raw)),
            None => Err(BackendError::InvalidOutput {
                example_id: req.example.id.clone(),
                raw,
            }),
        }
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        seed: u64,
    ) -> std::result::Result<String, BackendError> {
        let body = json!({
            "model": self.model_name,
            "messages": messages,
            "temperature": self.temperature,
            "seed": seed,
            "max_tokens": 2048,
        });
        let resp = self.post(&body)?;
        message_content(&resp)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Unavailable {
                attempts: 1,
                message: "response has no message content".into(),
            })
    }
}
