//! OpenAI-style chat-completions client with the vLLM `guided_choice`
//! extension.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::types::{CompletionRequest, CompletionResponse, Logprobs, RequestKind, Role, Usage};
use super::{Backend, Embedder, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First backoff step in milliseconds; doubles per attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_attempts() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_timeout_s() -> u64 {
    600
}

impl HttpConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        HttpConfig {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: None,
            max_attempts: default_attempts(),
            backoff_base_ms: default_backoff_ms(),
            timeout_s: default_timeout_s(),
        }
    }
}

/// JSON body for a chat-completions call. Judge bodies carry exactly the
/// judge decoding fields; hints never leave the process.
pub fn request_body(model: &str, req: &CompletionRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            json!({"role": role, "content": m.content})
        })
        .collect();
    let mut body = Map::new();
    body.insert("model".into(), json!(model));
    body.insert("messages".into(), Value::Array(messages));
    body.insert("max_tokens".into(), json!(req.max_tokens));
    if let Some(t) = req.temperature {
        body.insert("temperature".into(), json!(t));
    }
    if let Some(g) = &req.guided_choice {
        body.insert("guided_choice".into(), json!(g));
    }
    match req.logprobs {
        Logprobs::Off => {}
        Logprobs::Enabled => {
            body.insert("logprobs".into(), json!(true));
        }
        Logprobs::Count(n) => {
            body.insert("logprobs".into(), json!(n));
        }
    }
    if let Some(n) = req.top_logprobs {
        body.insert("top_logprobs".into(), json!(n));
    }
    if let Some(s) = req.seed {
        body.insert("seed".into(), json!(s));
    }
    Value::Object(body)
}

/// Extract `(text, allowed-choice logprobs, usage)` from a response body.
/// Accepts both the chat shape (`logprobs.content[0].top_logprobs` as a list)
/// and the legacy completions shape (`logprobs.top_logprobs[0]` as a map).
pub fn parse_response(
    body: &Value,
    allowed: Option<&[String]>,
) -> Result<(String, Option<BTreeMap<String, f64>>, Usage), GatewayError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Protocol("response has no message content".into()))?
        .to_string();
    let usage = Usage {
        prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    let Some(allowed) = allowed else {
        return Ok((text, None, usage));
    };
    let mut found: BTreeMap<String, f64> = BTreeMap::new();
    let mut offer = |tok: &str, lp: f64| {
        let t = tok.trim();
        if allowed.iter().any(|a| a == t) {
            let e = found.entry(t.to_string()).or_insert(f64::NEG_INFINITY);
            if lp > *e {
                *e = lp;
            }
        }
    };
    if let Some(list) = choice.pointer("/logprobs/content/0/top_logprobs").and_then(Value::as_array) {
        for item in list {
            if let (Some(tok), Some(lp)) = (
                item.get("token").and_then(Value::as_str),
                item.get("logprob").and_then(Value::as_f64),
            ) {
                offer(tok, lp);
            }
        }
        if let (Some(tok), Some(lp)) = (
            choice.pointer("/logprobs/content/0/token").and_then(Value::as_str),
            choice.pointer("/logprobs/content/0/logprob").and_then(Value::as_f64),
        ) {
            offer(tok, lp);
        }
    } else if let Some(map) = choice.pointer("/logprobs/top_logprobs/0").and_then(Value::as_object) {
        for (tok, lp) in map {
            if let Some(lp) = lp.as_f64() {
                offer(tok, lp);
            }
        }
    }
    Ok((text.trim().to_string(), Some(found), usage))
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| GatewayError::Unreachable {
                attempts: 0,
                message: e.to_string(),
            })?;
        let id = format!("http:{}:{}", cfg.endpoint, cfg.model);
        Ok(HttpBackend { cfg, client, id })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        post_with_retry(&self.client, &self.cfg, path, body)
    }
}

fn post_with_retry(
    client: &reqwest::blocking::Client,
    cfg: &HttpConfig,
    path: &str,
    body: &Value,
) -> Result<Value, GatewayError> {
    let url = format!("{}/{}", cfg.endpoint, path);
    let attempts = cfg.max_attempts.max(1);
    let mut last = String::new();
    for k in 0..attempts {
        if k > 0 {
            let base = cfg.backoff_base_ms.saturating_mul(1 << (k - 1).min(16));
            let jitter = rand::rng().random_range(0..=base / 4 + 1);
            std::thread::sleep(Duration::from_millis(base + jitter));
        }
        let mut rb = client.post(&url).json(body);
        if let Some(key) = &cfg.api_key {
            rb = rb.bearer_auth(key);
        }
        match rb.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp
                        .json::<Value>()
                        .map_err(|e| GatewayError::Protocol(format!("invalid JSON body: {e}")));
                }
                let text = resp.text().unwrap_or_default();
                if status.as_u16() == 429 || status.is_server_error() {
                    tracing::warn!(%url, status = status.as_u16(), attempt = k + 1, "transient HTTP failure");
                    last = format!("HTTP {status}: {text}");
                    continue;
                }
                return Err(GatewayError::Http {
                    status: status.as_u16(),
                    body: text,
                });
            }
            Err(e) => {
                tracing::warn!(%url, attempt = k + 1, error = %e, "request failed");
                last = e.to_string();
            }
        }
    }
    Err(GatewayError::Unreachable {
        attempts,
        message: last,
    })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        if req.kind == RequestKind::Embedder {
            return Err(GatewayError::InvalidRequest(
                "embedding requests go through embed()".into(),
            ));
        }
        let body = request_body(&self.cfg.model, req);
        let value = self.post("chat/completions", &body)?;
        let (text, choice_logprobs, usage) = parse_response(&value, req.guided_choice.as_deref())?;
        Ok(CompletionResponse {
            text,
            choice_logprobs,
            usage,
            backend_id: self.id.clone(),
            cache_hit: false,
        })
    }
}

/// Embeddings via an OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| GatewayError::Unreachable {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpEmbedder { cfg, client })
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http-embed:{}:{}", self.cfg.endpoint, self.cfg.model)
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = json!({"model": self.cfg.model, "input": texts});
        let value = post_with_retry(&self.client, &self.cfg, "embeddings", &body)?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("embedding response has no data".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).map(|v| v as usize).unwrap_or(i);
            let v = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Protocol("embedding item lacks vector".into()))?
                .iter()
                .map(|x| x.as_f64().unwrap_or(f64::NAN))
                .collect();
            rows.push((idx, v));
        }
        rows.sort_by_key(|r| r.0);
        if rows.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "{} embeddings for {} inputs",
                rows.len(),
                texts.len()
            )));
        }
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_body_has_exact_decoding_fields() {
        let req = CompletionRequest::judge("which?".into()).with_hint("correct_debater", "1");
        let body = request_body("m", &req);
        let mut keys: Vec<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["guided_choice", "logprobs", "max_tokens", "messages", "model", "top_logprobs"]
        );
        assert_eq!(body["max_tokens"], 1);
        assert_eq!(body["logprobs"], 5);
        assert_eq!(body["top_logprobs"], 10);
        assert_eq!(body["guided_choice"], json!(["1", "2"]));
        assert!(!body.to_string().contains("correct_debater"));
    }

    #[test]
    fn debater_body_uses_sampling_settings() {
        let body = request_body("m", &CompletionRequest::debater("argue".into(), 42));
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["max_tokens"], 32000);
        assert_eq!(body["seed"], 42);
    }

    #[test]
    fn parses_chat_logprobs() {
        let body = json!({
            "choices": [{
                "message": {"content": "1"},
                "logprobs": {"content": [{
                    "token": "1", "logprob": -0.2,
                    "top_logprobs": [
                        {"token": "1", "logprob": -0.2},
                        {"token": " 2", "logprob": -1.8},
                        {"token": "The", "logprob": -9.0}
                    ]
                }]}
            }],
            "usage": {"prompt_tokens": 10, "completion_tokens": 1}
        });
        let allowed = vec!["1".to_string(), "2".to_string()];
        let (text, lp, usage) = parse_response(&body, Some(&allowed)).unwrap();
        let lp = lp.unwrap();
        assert_eq!(text, "1");
        assert_eq!(lp["1"], -0.2);
        assert_eq!(lp["2"], -1.8);
        assert_eq!(lp.len(), 2);
        assert_eq!(usage.prompt_tokens, 10);
    }

    #[test]
    fn parses_completion_style_logprobs() {
        let body = json!({
            "choices": [{"text": "2", "logprobs": {"top_logprobs": [{"1": -3.0, "2": -0.05}]}}]
        });
        let allowed = vec!["1".to_string(), "2".to_string()];
        let (text, lp, _) = parse_response(&body, Some(&allowed)).unwrap();
        assert_eq!(text, "2");
        assert_eq!(lp.unwrap()["1"], -3.0);
    }

    #[test]
    fn no_choices_is_protocol_error() {
        assert!(matches!(
            parse_response(&json!({"choices": []}), None),
            Err(GatewayError::Protocol(_))
        ));
    }
}
