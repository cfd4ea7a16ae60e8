//! JSON-over-HTTP scorer client.
//!
//! ```text
//! POST /v1/next_token {"text", "top_k"}          -> {"tokens": [{"token", "logprob"}]}
//! POST /v1/logprob    {"text", "continuation"}   -> {"logprob"}
//! POST /v1/embed      {"text"}                   -> {"embedding": [..], "dim"}
//! ```
//!
//! HTTP 413 maps to [`ScorerError::ContextLengthExceeded`]; every other
//! failure status is a transport error.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Embedding, Scorer, ScorerConfig, ScorerError, TokenDistribution};

/// Endpoint used when the configuration names none.
pub const SCORER_URL_ENV: &str = "RELFORGE_SCORER_URL";

#[derive(Serialize)]
struct NextTokenRequest<'a> {
    text: &'a str,
    top_k: usize,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct NextTokenResponse {
    tokens: Vec<WireToken>,
}

#[derive(Serialize)]
struct LogprobRequest<'a> {
    text: &'a str,
    continuation: &'a str,
}

#[derive(Deserialize)]
struct LogprobResponse {
    logprob: f64,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
    dim: usize,
}

pub struct HttpScorer {
    agent: ureq::Agent,
    base: String,
    top_k: usize,
    max_in_flight: usize,
}

impl HttpScorer {
    pub fn new(cfg: &ScorerConfig) -> Result<Self, ScorerError> {
        let base = cfg
            .endpoint
            .clone()
            .or_else(|| std::env::var(SCORER_URL_ENV).ok())
            .ok_or_else(|| ScorerError::Config("http backend requires an endpoint".into()))?;
        let agent = ureq::AgentBuilder::new()
            .timeout(cfg.timeout)
            .max_idle_connections_per_host(cfg.max_in_flight.max(1))
            .build();
        Ok(Self {
            agent,
            base: base.trim_end_matches('/').to_string(),
            top_k: cfg.top_k,
            max_in_flight: cfg.max_in_flight.max(1),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn post<Q: Serialize, R: DeserializeOwned>(&self, path: &str, body: &Q) -> Result<R, ScorerError> {
        let url = format!("{}{path}", self.base);
        let payload = serde_json::to_string(body).map_err(|e| ScorerError::Transport(e.to_string()))?;
        log::trace!("POST {url} {payload}");
        let resp = self
            .agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_string(&payload);
        let text = match resp {
            Ok(r) => r.into_string().map_err(|e| ScorerError::Transport(e.to_string()))?,
            Err(ureq::Error::Status(413, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(ScorerError::ContextLengthExceeded(body));
            }
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(ScorerError::Transport(format!("HTTP {code}: {body}")));
            }
            Err(e) => return Err(ScorerError::Transport(e.to_string())),
        };
        log::trace!("<- {url} {text}");
        serde_json::from_str(&text).map_err(|e| ScorerError::Malformed(format!("{path}: {e}")))
    }
}

impl Scorer for HttpScorer {
    fn next_token_distribution(&self, document: &str) -> Result<TokenDistribution, ScorerError> {
        if document.is_empty() {
            return Err(ScorerError::EmptyDocument);
        }
        let resp: NextTokenResponse = self.post(
            "/v1/next_token",
            &NextTokenRequest {
                text: document,
                top_k: self.top_k,
            },
        )?;
        TokenDistribution::from_logprobs(resp.tokens.into_iter().map(|t| (t.token, t.logprob)))
    }

    fn continuation_logprob(&self, document: &str, continuation: &str) -> Result<f64, ScorerError> {
        if continuation.is_empty() {
            return Err(ScorerError::EmptyContinuation);
        }
        if document.is_empty() {
            return Err(ScorerError::EmptyDocument);
        }
        let resp: LogprobResponse = self.post(
            "/v1/logprob",
            &LogprobRequest {
                text: document,
                continuation,
            },
        )?;
        if resp.logprob > 0.0 || resp.logprob.is_nan() {
            return Err(ScorerError::Malformed(format!("logprob {}", resp.logprob)));
        }
        Ok(resp.logprob)
    }

    fn embed_last_token(&self, document: &str) -> Result<Embedding, ScorerError> {
        if document.is_empty() {
            return Err(ScorerError::EmptyDocument);
        }
        let resp: EmbedResponse = self.post("/v1/embed", &EmbedRequest { text: document })?;
        if resp.embedding.len() != resp.dim {
            return Err(ScorerError::Malformed(format!(
                "embedding has {} values, dim says {}",
                resp.embedding.len(),
                resp.dim
            )));
        }
        Embedding::new(resp.embedding)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
