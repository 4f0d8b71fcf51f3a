//! Chat-completion gateway.
//!
//! [`Gateway`] wraps one [`Backend`] (HTTP or synthetic) with request
//! validation, an optional persistent [`cache::ResponseCache`], a bound on
//! in-flight requests, and the guided-choice response contract. Embeddings go
//! through a separate [`Embedder`].

pub mod cache;
pub mod embed;
pub mod http;
pub mod synthetic;
pub mod types;

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

pub use cache::ResponseCache;
pub use embed::HashEmbedder;
pub use http::{HttpBackend, HttpConfig, HttpEmbedder};
pub use synthetic::{SyntheticAgentModel, SyntheticBackend};
pub use types::{CompletionRequest, CompletionResponse, Logprobs, Message, RequestKind, Role, Usage};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache corrupted at {}:{line}", .path.display())]
    CacheCorruption { path: PathBuf, line: usize },
    #[error("I/O on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("request budget exhausted")]
    Exhausted,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    /// Raw vectors, one per text, not necessarily normalized.
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct GatewayStats {
    pub debater: u64,
    pub judge: u64,
    pub mutator: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
}

#[derive(Default)]
struct Counters {
    debater: AtomicU64,
    judge: AtomicU64,
    mutator: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    embedder: Arc<dyn Embedder>,
    cache: Option<ResponseCache>,
    limiter: Limiter,
    counters: Counters,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, embedder: Arc<dyn Embedder>, parallelism: usize) -> Self {
        Gateway {
            backend,
            embedder,
            cache: None,
            limiter: Limiter::new(parallelism),
            counters: Counters::default(),
        }
    }

    /// Synthetic backend with the hash embedder and no cache.
    pub fn synthetic(model: SyntheticAgentModel) -> Self {
        Gateway::new(
            Arc::new(SyntheticBackend::new(model)),
            Arc::new(HashEmbedder::default()),
            64,
        )
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn embedder_id(&self) -> String {
        self.embedder.id()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.counters;
        GatewayStats {
            debater: c.debater.load(Ordering::Relaxed),
            judge: c.judge.load(Ordering::Relaxed),
            mutator: c.mutator.load(Ordering::Relaxed),
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            backend_calls: c.backend_calls.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        req.validate().map_err(GatewayError::InvalidRequest)?;
        match req.kind {
            RequestKind::Debater => &self.counters.debater,
            RequestKind::Judge => &self.counters.judge,
            RequestKind::Mutator => &self.counters.mutator,
            RequestKind::Embedder => &self.counters.backend_calls,
        }
        .fetch_add(1, Ordering::Relaxed);

        let key = self
            .cache
            .as_ref()
            .map(|_| cache::cache_key(self.backend.id(), req));
        if let (Some(c), Some(k)) = (&self.cache, &key) {
            if let Some(mut hit) = c.get(k) {
                self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                hit.cache_hit = true;
                return Ok(hit);
            }
        }
        let resp = {
            let _permit = self.limiter.acquire();
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            self.backend.complete(req)?
        };
        resp.check_contract(req).map_err(GatewayError::Protocol)?;
        match (&self.cache, &key) {
            (Some(c), Some(k)) => c.put(k, req, resp),
            _ => Ok(resp),
        }
    }

    /// Issue a judge request and reduce it to a decision.
    pub fn judge(&self, req: &CompletionRequest) -> Result<JudgeDecision, GatewayError> {
        if req.kind != RequestKind::Judge {
            return Err(GatewayError::InvalidRequest("not a judge request".into()));
        }
        let resp = self.complete(req)?;
        judge_decision(&resp)
    }

    /// Unit-normalized embeddings, one per text.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Embedding("no texts to embed".into()));
        }
        let raw = {
            let _permit = self.limiter.acquire();
            self.embedder.embed_raw(texts)?
        };
        let dim = raw.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || raw.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::Embedding("dimension mismatch within batch".into()));
        }
        raw.into_iter()
            .map(|mut v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n > 0.0) || !n.is_finite() {
                    return Err(GatewayError::Embedding("zero or non-finite embedding".into()));
                }
                v.iter_mut().for_each(|x| *x /= n);
                Ok(v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Verdict {
    #[serde(rename = "1")]
    Debater1,
    #[serde(rename = "2")]
    Debater2,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JudgeDecision {
    pub winner: Verdict,
    pub p1: f64,
    pub p2: f64,
}

/// Renormalize the probability mass on "1" and "2"; ties go to "1".
pub fn judge_decision(resp: &CompletionResponse) -> Result<JudgeDecision, GatewayError> {
    let lp = resp
        .choice_logprobs
        .as_ref()
        .ok_or_else(|| GatewayError::Protocol("judge response has no logprobs".into()))?;
    let get = |k: &str| {
        lp.get(k)
            .copied()
            .filter(|v| !v.is_nan())
            .ok_or_else(|| GatewayError::Protocol(format!("missing logprob for `{k}`")))
    };
    let (l1, l2) = (get("1")?, get("2")?);
    let m = l1.max(l2);
    if m == f64::NEG_INFINITY {
        return Err(GatewayError::Protocol("both judge choices have zero mass".into()));
    }
    let (e1, e2) = ((l1 - m).exp(), (l2 - m).exp());
    let p1 = e1 / (e1 + e2);
    let p2 = e2 / (e1 + e2);
    let winner = if p1 >= p2 {
        Verdict::Debater1
    } else {
        Verdict::Debater2
    };
    Ok(JudgeDecision { winner, p1, p2 })
}

/// Backend replaying canned responses in order; for tests and dry runs.
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<String>>,
    pub seen: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = String>) -> Self {
        ScriptedBackend {
            responses: Mutex::new(responses.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.seen.lock().push(req.clone());
        let text = self.responses.lock().pop_front().ok_or(GatewayError::Exhausted)?;
        Ok(CompletionResponse {
            text,
            choice_logprobs: None,
            usage: Usage::default(),
            backend_id: "scripted".into(),
            cache_hit: false,
        })
    }
}
