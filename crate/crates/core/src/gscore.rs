//! Perceptual-quality scoring through a large multimodal model.
//!
//! The client posts `{model, prompt, images: [original, edited]}` (images as
//! base64 PNG) to a configured endpoint and extracts a 0–10 rating from the
//! reply. Transport is a trait so tests and offline runs can inject a mock.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::io::{decode_png, encode_png};
use crate::tensor::Grid;

/// The shipped rating prompt.
pub const PROMPT_TEMPLATE: &str = include_str!("../templates/gscore_prompt_v1.txt");
pub const PROMPT_VERSION: &str = "gscore_prompt_v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GscoreError {
    #[error("network error: {0}")]
    Network(String),
    #[error("could not parse a score in [0, 10] from response: {0:?}")]
    Parse(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl GscoreError {
    fn is_transient(&self) -> bool {
        match self {
            GscoreError::Network(_) => true,
            GscoreError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GscoreRequest {
    /// Base64 PNG.
    pub original: String,
    /// Base64 PNG.
    pub edited: String,
    pub prompt: String,
}

impl GscoreRequest {
    pub fn new(original_png: &[u8], edited_png: &[u8], prompt: &str) -> Result<Self, GscoreError> {
        for (name, bytes) in [("original", original_png), ("edited", edited_png)] {
            decode_png(bytes).map_err(|e| GscoreError::InvalidRequest(format!("{name} image: {e}")))?;
        }
        if prompt.trim().is_empty() {
            return Err(GscoreError::InvalidRequest("empty prompt".into()));
        }
        Ok(Self {
            original: B64.encode(original_png),
            edited: B64.encode(edited_png),
            prompt: prompt.to_owned(),
        })
    }

    /// Builds a request from two images with the shipped prompt.
    pub fn from_grids(original: &Grid, edited: &Grid) -> Result<Self, GscoreError> {
        let enc = |g: &Grid| encode_png(g).map_err(|e| GscoreError::InvalidRequest(e.to_string()));
        Self::new(&enc(original)?, &enc(edited)?, PROMPT_TEMPLATE)
    }

    fn body(&self, model: &str) -> Value {
        json!({
            "model": model,
            "prompt": self.prompt,
            "images": [self.original, self.edited],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GscoreResult {
    pub score: f64,
    pub raw_response: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GscoreConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Retries after the first attempt on transient failures.
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Requests in flight at once during batch scoring.
    pub concurrency: usize,
}

impl Default for GscoreConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key: None,
            model: "default".into(),
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            concurrency: 4,
        }
    }
}

impl GscoreConfig {
    /// Reads a JSON config file (if given), then applies `GSCORE_ENDPOINT`,
    /// `GSCORE_API_KEY` and `GSCORE_MODEL` from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, GscoreError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| GscoreError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| GscoreError::Config(e.to_string()))?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("GSCORE_ENDPOINT") {
            self.endpoint = v;
        }
        if let Some(v) = get("GSCORE_API_KEY") {
            self.api_key = Some(v);
        }
        if let Some(v) = get("GSCORE_MODEL") {
            self.model = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    /// One POST of a JSON body. Only connection-level failures are errors;
    /// HTTP error statuses come back as responses.
    fn post(&self, cfg: &GscoreConfig, body: &Value) -> Result<TransportResponse, GscoreError>;
}

static HTTP_REQUESTS: AtomicUsize = AtomicUsize::new(0);

/// Requests [`HttpTransport`] has put on the wire in this process.
pub fn http_requests_sent() -> usize {
    HTTP_REQUESTS.load(Ordering::SeqCst)
}

/// Blocking HTTPS transport.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(&self, cfg: &GscoreConfig, body: &Value) -> Result<TransportResponse, GscoreError> {
        if cfg.endpoint.is_empty() {
            return Err(GscoreError::Config("GSCORE_ENDPOINT is not set".into()));
        }
        HTTP_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let mut req = ureq::post(&cfg.endpoint).timeout(Duration::from_secs(cfg.timeout_secs));
        if let Some(key) = &cfg.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| GscoreError::Network(e.to_string()))?;
                Ok(TransportResponse { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(TransportResponse {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(e) => Err(GscoreError::Network(e.to_string())),
        }
    }
}

type Responder = dyn Fn(&Value) -> Result<TransportResponse, GscoreError> + Send + Sync;

/// In-process transport that never touches the network.
pub struct MockTransport {
    responder: Box<Responder>,
    calls: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
}

impl MockTransport {
    pub fn from_fn(f: impl Fn(&Value) -> Result<TransportResponse, GscoreError> + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(f),
            calls: AtomicUsize::new(0),
            bodies: Mutex::new(Vec::new()),
        }
    }

    /// Always answers HTTP 200 with `text`.
    pub fn fixed(text: &str) -> Self {
        let text = text.to_owned();
        Self::from_fn(move |_| {
            Ok(TransportResponse {
                status: 200,
                body: text.clone(),
            })
        })
    }

    /// Replays `responses` in order; further calls fail with a network error.
    pub fn scripted(responses: Vec<Result<TransportResponse, GscoreError>>) -> Self {
        let queue = Mutex::new(std::collections::VecDeque::from(responses));
        Self::from_fn(move |_| {
            queue
                .lock()
                .expect("mock queue poisoned")
                .pop_front()
                .unwrap_or_else(|| Err(GscoreError::Network("script exhausted".into())))
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().expect("mock log poisoned").clone()
    }
}

impl Transport for MockTransport {
    fn post(&self, _cfg: &GscoreConfig, body: &Value) -> Result<TransportResponse, GscoreError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.bodies.lock().expect("mock log poisoned").push(body.clone());
        (self.responder)(body)
    }
}

/// The model's reply text: a JSON body's `text`, `response`, `content` or
/// `output` string field if present, otherwise the raw body.
pub fn response_text(body: &str) -> String {
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(body) {
        for key in ["text", "response", "content", "output"] {
            if let Some(Value::String(s)) = map.get(key) {
                return s.clone();
            }
        }
    }
    body.to_owned()
}

/// The first number in `text` lying in `[0, 10]`. A minus sign directly
/// before the digits belongs to the number.
pub fn parse_score(text: &str) -> Result<f64, GscoreError> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let negative = i > 0 && bytes[i - 1] == b'-';
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let value: f64 = text[start..i].parse().expect("digits parse");
            let value = if negative { -value } else { value };
            if (0.0..=10.0).contains(&value) {
                return Ok(value);
            }
        } else {
            i += 1;
        }
    }
    Err(GscoreError::Parse(text.to_owned()))
}

/// Scores one pair, retrying transient failures with exponential backoff.
pub fn score(req: &GscoreRequest, cfg: &GscoreConfig, transport: &dyn Transport) -> Result<GscoreResult, GscoreError> {
    let body = req.body(&cfg.model);
    let mut attempt = 0;
    loop {
        let outcome = transport.post(cfg, &body).and_then(|resp| match resp.status {
            200..=299 => Ok(resp.body),
            401 | 403 => Err(GscoreError::Auth(resp.status)),
            status => Err(GscoreError::Http { status, body: resp.body }),
        });
        match outcome {
            Ok(body) => {
                let text = response_text(&body);
                let score = parse_score(&text)?;
                return Ok(GscoreResult {
                    score,
                    raw_response: text,
                    model_id: cfg.model.clone(),
                });
            }
            Err(e) if e.is_transient() && attempt < cfg.max_retries => {
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms << attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Scores every request, at most `cfg.concurrency` at a time; results are in
/// input order.
pub fn score_batch(
    requests: &[GscoreRequest],
    cfg: &GscoreConfig,
    transport: &dyn Transport,
) -> Vec<Result<GscoreResult, GscoreError>> {
    let width = cfg.concurrency.max(1);
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(width) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|r| s.spawn(move || score(r, cfg, transport)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(GscoreError::Network("scoring thread panicked".into()))))
                .collect()
        });
        out.extend(results);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn request() -> GscoreRequest {
        let a = Grid::from_fn(Shape::new(1, 4, 4), |_, y, x| (y + x) as f64 / 6.0);
        let b = a.map(|v| 1.0 - v);
        GscoreRequest::from_grids(&a, &b).unwrap()
    }

    fn quick() -> GscoreConfig {
        GscoreConfig {
            backoff_ms: 0,
            ..GscoreConfig::default()
        }
    }

    #[test]
    fn parse_rule() {
        assert_eq!(parse_score("Score: 8").unwrap(), 8.0);
        assert_eq!(parse_score("7.5/10 - crisp").unwrap(), 7.5);
        assert_eq!(parse_score("I'd say 10.").unwrap(), 10.0);
        assert_eq!(parse_score("rating 0").unwrap(), 0.0);
        assert_eq!(parse_score("out of 100 tries, 6").unwrap(), 6.0);
        assert!(matches!(parse_score("I rate this 11"), Err(GscoreError::Parse(_))));
        assert!(matches!(parse_score("no idea"), Err(GscoreError::Parse(_))));
        assert!(matches!(parse_score("-3"), Err(GscoreError::Parse(_))));
    }

    #[test]
    fn response_text_prefers_json_fields() {
        assert_eq!(response_text(r#"{"text": "Score: 9"}"#), "Score: 9");
        assert_eq!(response_text(r#"{"response": "4"}"#), "4");
        assert_eq!(response_text("plain 3"), "plain 3");
    }

    #[test]
    fn mock_score_and_body_shape() {
        let mock = MockTransport::fixed("Score: 8");
        let r = score(&request(), &quick(), &mock).unwrap();
        assert_eq!(r.score, 8.0);
        assert_eq!(r.raw_response, "Score: 8");
        assert_eq!(mock.calls(), 1);
        let body = &mock.bodies()[0];
        assert_eq!(body["images"].as_array().unwrap().len(), 2);
        assert_eq!(body["prompt"], PROMPT_TEMPLATE);
    }

    #[test]
    fn retries_transient_failures_only() {
        let ok = TransportResponse {
            status: 200,
            body: "6".into(),
        };
        let mock = MockTransport::scripted(vec![
            Err(GscoreError::Network("reset".into())),
            Ok(TransportResponse {
                status: 503,
                body: String::new(),
            }),
            Ok(ok.clone()),
        ]);
        assert_eq!(score(&request(), &quick(), &mock).unwrap().score, 6.0);
        assert_eq!(mock.calls(), 3);

        let always_down = MockTransport::from_fn(|_| Err(GscoreError::Network("down".into())));
        assert!(matches!(score(&request(), &quick(), &always_down), Err(GscoreError::Network(_))));
        assert_eq!(always_down.calls(), 4);

        let auth = MockTransport::from_fn(|_| {
            Ok(TransportResponse {
                status: 401,
                body: "no".into(),
            })
        });
        assert_eq!(score(&request(), &quick(), &auth), Err(GscoreError::Auth(401)));
        assert_eq!(auth.calls(), 1);

        let garbage = MockTransport::fixed("eleven");
        assert!(matches!(score(&request(), &quick(), &garbage), Err(GscoreError::Parse(_))));
        assert_eq!(garbage.calls(), 1);
    }

    #[test]
    fn batch_preserves_order_with_one_call_each() {
        let mock = MockTransport::from_fn(|b| {
            // echo the edited image length back as a score so order is visible
            let n = b["images"][1].as_str().unwrap().len() % 10;
            Ok(TransportResponse {
                status: 200,
                body: format!("{n}"),
            })
        });
        let reqs: Vec<GscoreRequest> = (1..=7)
            .map(|k| {
                let a = Grid::filled(Shape::new(1, k, k), 0.5);
                GscoreRequest::from_grids(&a, &a).unwrap()
            })
            .collect();
        let cfg = GscoreConfig {
            concurrency: 3,
            ..quick()
        };
        let out = score_batch(&reqs, &cfg, &mock);
        assert_eq!(mock.calls(), 7);
        for (r, o) in reqs.iter().zip(&out) {
            assert_eq!(o.as_ref().unwrap().score, (r.edited.len() % 10) as f64);
        }
    }

    #[test]
    fn request_validation() {
        assert!(GscoreRequest::new(b"junk", b"junk", "rate").is_err());
        let png = encode_png(&Grid::zeros(Shape::new(1, 2, 2))).unwrap();
        assert!(GscoreRequest::new(&png, &png, "  ").is_err());
        assert!(GscoreRequest::new(&png, &png, "rate").is_ok());
    }

    #[test]
    fn env_overrides_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gscore.json");
        fs::write(&path, r#"{"endpoint": "https://file.example/v1", "model": "m-file", "max_retries": 1}"#).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut cfg: GscoreConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.max_retries, 1);
        cfg.apply_env(|k| (k == "GSCORE_MODEL").then(|| "m-env".to_string()));
        assert_eq!(cfg.endpoint, "https://file.example/v1");
        assert_eq!(cfg.model, "m-env");
        assert!(cfg.api_key.is_none());
    }

    #[test]
    fn http_transport_requires_an_endpoint() {
        let r = HttpTransport.post(&GscoreConfig::default(), &json!({}));
        assert!(matches!(r, Err(GscoreError::Config(_))));
    }
}
