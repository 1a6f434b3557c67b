//! Obtaining predictions from a model for (prompt, example) pairs.
//!
//! [`Predictor`] wraps any [`Model`] with a content-addressed cache, in-flight
//! de-duplication (one outstanding call per [`CacheKey`]) and a bound on
//! simultaneous remote calls. Two models ship: [`mock::MockModel`] and
//! [`http::HttpModel`].

pub mod cache;
pub mod extract;
pub mod http;
pub mod mock;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Example, Prediction, Prompt, Task};
use crate::error::{Error, Result};
use crate::hashing::hex_digest;
use crate::par::Exec;

pub use cache::PredictionCache;
pub use extract::extract_label;
pub use http::HttpModel;
pub use mock::{mock_predict, MockModel, MockParams, MockScenario};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "kebab-case")]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },

    #[error("invalid output for example {example_id}: {raw:?}")]
    InvalidOutput { example_id: String, raw: String },

    #[error("backend configuration error: {0}")]
    Config(String),

    #[error("operation not supported by this backend: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

pub const DEFAULT_API_KEY_ENV: &str = "PROMPTSTAB_API_KEY";

fn default_retries() -> u32 {
    3
}

fn default_timeout() -> f64 {
    60.0
}

fn default_concurrency() -> usize {
    8
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub wants_probs: bool,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mock_params: Option<MockParams>,
    /// Maximum simultaneous remote calls.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Environment variable holding the bearer token for HTTP backends.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

impl BackendConfig {
    pub fn mock(seed: u64, params: MockParams, wants_probs: bool) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: "mock".into(),
            wants_probs,
            temperature: 0.0,
            max_retries: 0,
            timeout_secs: default_timeout(),
            seed: Some(seed),
            mock_params: Some(params),
            concurrency: default_concurrency(),
            api_key_env: default_key_env(),
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>, wants_probs: bool) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            model_name: model_name.into(),
            wants_probs,
            temperature: 0.0,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            seed: None,
            mock_params: None,
            concurrency: default_concurrency(),
            api_key_env: default_key_env(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::Http if self.endpoint_url.is_none() => {
                Err(Error::Config("http backend requires endpoint_url".into()))
            }
            BackendKind::Mock if self.seed.is_none() => {
                Err(Error::Config("mock backend requires seed".into()))
            }
            _ if !(self.temperature >= 0.0) => Err(Error::Config("temperature must be >= 0".into())),
            _ if !(self.timeout_secs > 0.0) => Err(Error::Config("timeout must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn build_model(&self) -> Result<Arc<dyn Model>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => Arc::new(MockModel::new(
                self.mock_params.clone().unwrap_or_default(),
                self.seed.expect("validated"),
                self.wants_probs,
            )?),
            BackendKind::Http => Arc::new(HttpModel::from_config(self)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// One prediction request. `anchor` is the base prompt when `prompt` is one
/// of its paraphrases.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub prompt: &'a Prompt,
    pub anchor: Option<&'a Prompt>,
    pub example: &'a Example,
}

pub trait Model: Send + Sync {
    /// Identity used in cache keys; must change whenever outputs could.
    fn name(&self) -> &str;

    fn wants_probs(&self) -> bool;

    fn temperature(&self) -> f64;

    fn is_remote(&self) -> bool;

    /// Whether predictions depend on the anchor prompt as well as the rendered text.
    fn anchor_sensitive(&self) -> bool {
        !self.is_remote()
    }

    fn predict_uncached(
        &self,
        task: &Task,
        req: &PredictRequest<'_>,
    ) -> std::result::Result<Prediction, BackendError>;

    /// Free-text completion, used by LLM paraphrasers and candidate generators.
    fn complete(
        &self,
        _messages: &[ChatMessage],
        _seed: u64,
    ) -> std::result::Result<String, BackendError> {
        Err(BackendError::Unsupported("text completion".into()))
    }
}

/// Hash of everything that determines a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub digest: String,
}

impl CacheKey {
    pub fn new(model: &dyn Model, task: &Task, req: &PredictRequest<'_>) -> Self {
        let inputs = serde_json::to_string(&req.example.inputs).expect("inputs serialize");
        let labels = task.label_set.join("\u{1f}");
        let wants = [u8::from(model.wants_probs())];
        let temp = model.temperature().to_le_bytes();
        let anchor = match req.anchor {
            Some(a) if model.anchor_sensitive() => a.text.as_bytes(),
            _ => b"",
        };
        CacheKey {
            digest: hex_digest(&[
                model.name().as_bytes(),
                req.prompt.text.as_bytes(),
                inputs.as_bytes(),
                &wants,
                &temp,
                labels.as_bytes(),
                anchor,
                // keys example identity for models that use it (the mock)
                if model.is_remote() { b"" } else { req.example.id.as_bytes() },
            ]),
        }
    }
}

/// Counting semaphore bounding concurrent remote calls.
#[derive(Debug)]
struct Limiter {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut p = self.permits.lock().expect("limiter lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("limiter lock");
        }
        *p -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

type Inflight = Arc<OnceLock<std::result::Result<Prediction, BackendError>>>;

/// Cached, de-duplicating front end over a [`Model`].
pub struct Predictor {
    model: Arc<dyn Model>,
    cache: PredictionCache,
    inflight: Mutex<HashMap<String, Inflight>>,
    limiter: Limiter,
    requests: AtomicU64,
    model_calls: AtomicU64,
}

impl std::fmt::Debug for Predictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Predictor")
            .field("model", &self.model.name())
            .field("cached", &self.cache.len())
            .finish()
    }
}

impl Predictor {
    pub fn new(model: Arc<dyn Model>, cache: PredictionCache, concurrency: usize) -> Self {
        Predictor {
            model,
            cache,
            inflight: Mutex::new(HashMap::new()),
            limiter: Limiter::new(concurrency),
            requests: AtomicU64::new(0),
            model_calls: AtomicU64::new(0),
        }
    }

    /// Build from config, with an on-disk cache when `cache_dir` is given.
    pub fn from_config(cfg: &BackendConfig, cache_dir: Option<&Path>) -> Result<Self> {
        let model = cfg.build_model()?;
        let cache = match cache_dir {
            Some(dir) => PredictionCache::open(dir)?,
            None => PredictionCache::in_memory(),
        };
        Ok(Predictor::new(model, cache, cfg.concurrency))
    }

    pub fn model(&self) -> &dyn Model {
        self.model.as_ref()
    }

    pub fn wants_probs(&self) -> bool {
        self.model.wants_probs()
    }

    /// Predictions requested so far, including cache hits.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// Calls that reached the model.
    pub fn model_calls(&self) -> u64 {
        self.model_calls.load(Ordering::Relaxed)
    }

    fn check_request(task: &Task, req: &PredictRequest<'_>) -> std::result::Result<(), BackendError> {
        req.prompt
            .validate_for(task)
            .map_err(|e| BackendError::Config(e.to_string()))?;
        if let Some(f) = task
            .input_fields
            .iter()
            .find(|f| !req.example.inputs.contains_key(f.as_str()))
        {
            return Err(BackendError::Config(format!(
                "example {} lacks input field {f}",
                req.example.id
            )));
        }
        if !task.has_label(&req.example.gold_label) {
            return Err(BackendError::Config(format!(
                "example {} has label outside the task label set",
                req.example.id
            )));
        }
        Ok(())
    }

    pub fn predict(
        &self,
        task: &Task,
        prompt: &Prompt,
        example: &Example,
    ) -> std::result::Result<Prediction, BackendError> {
        self.predict_request(
            task,
            &PredictRequest {
                prompt,
                anchor: None,
                example,
            },
        )
    }

    pub fn predict_request(
        &self,
        task: &Task,
        req: &PredictRequest<'_>,
    ) -> std::result::Result<Prediction, BackendError> {
        Self::check_request(task, req)?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        let cacheable = self.model.temperature() == 0.0;
        if !cacheable {
            return self.call_model(task, req);
        }
        let key = CacheKey::new(self.model.as_ref(), task, req);
        if let Some(hit) = self.cache.get(&key.digest) {
            return Ok(hit);
        }
        let cell = self
            .inflight
            .lock()
            .expect("inflight lock")
            .entry(key.digest.clone())
            .or_default()
            .clone();
        let result = cell
            .get_or_init(|| {
                if let Some(hit) = self.cache.get(&key.digest) {
                    return Ok(hit);
                }
                let pred = self.call_model(task, req)?;
                if let Err(e) = self.cache.insert(&key.digest, &pred) {
                    log::warn!("failed to persist cache entry: {e}");
                }
                Ok(pred)
            })
            .clone();
        let mut inflight = self.inflight.lock().expect("inflight lock");
        if inflight.get(&key.digest).is_some_and(|c| Arc::ptr_eq(c, &cell)) {
            inflight.remove(&key.digest);
        }
        result
    }

    fn call_model(
        &self,
        task: &Task,
        req: &PredictRequest<'_>,
    ) -> std::result::Result<Prediction, BackendError> {
        self.model_calls.fetch_add(1, Ordering::Relaxed);
        let pred = if self.model.is_remote() {
            let _permit = self.limiter.acquire();
            self.model.predict_uncached(task, req)?
        } else {
            self.model.predict_uncached(task, req)?
        };
        pred.validate(&task.label_set)
            .map_err(|_| BackendError::InvalidOutput {
                example_id: req.example.id.clone(),
                raw: pred.raw_output.clone(),
            })?;
        Ok(pred)
    }

    /// Predict every example. Element `i` corresponds to `examples[i]`; per-example
    /// failures are returned in place. Only an invalid prompt fails the whole batch.
    pub fn predict_batch(
        &self,
        task: &Task,
        prompt: &Prompt,
        anchor: Option<&Prompt>,
        examples: &[Example],
        exec: Exec,
    ) -> std::result::Result<Vec<std::result::Result<Prediction, BackendError>>, BackendError> {
        prompt
            .validate_for(task)
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(exec.map(examples, |ex| {
            self.predict_request(
                task,
                &PredictRequest {
                    prompt,
                    anchor,
                    example: ex,
                },
            )
        }))
    }

    pub fn complete(
        &self,
        messages: &[ChatMessage],
        seed: u64,
    ) -> std::result::Result<String, BackendError> {
        if self.model.is_remote() {
            let _permit = self.limiter.acquire();
            self.model.complete(messages, seed)
        } else {
            self.model.complete(messages, seed)
        }
    }
}
