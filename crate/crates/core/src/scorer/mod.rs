//! Language-model access behind three narrow capabilities: the next-token
//! distribution, the log-probability of a continuation, and the embedding of
//! the last token.

mod http;
mod mock;
mod server;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpScorer, SCORER_URL_ENV};
pub use mock::{LabelOracle, MockBehavior, MockScorer};
pub use server::ScorerServer;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("context length exceeded: {0}")]
    ContextLengthExceeded(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("document must not be empty")]
    EmptyDocument,
    #[error("continuation must not be empty")]
    EmptyContinuation,
    #[error("scorer configuration: {0}")]
    Config(String),
}

impl ScorerError {
    pub fn is_context_length(&self) -> bool {
        matches!(self, ScorerError::ContextLengthExceeded(_))
    }
}

/// Top next-token probabilities, most probable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<(String, f64)>,
    coverage: f64,
}

impl TokenDistribution {
    /// Exponentiates wire log-probabilities. No renormalization is applied.
    pub fn from_logprobs<I, S>(pairs: I) -> Result<Self, ScorerError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self::from_probs(pairs.into_iter().map(|(t, lp)| (t, lp.exp())))
    }

    pub fn from_probs<I, S>(pairs: I) -> Result<Self, ScorerError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut entries: Vec<(String, f64)> = pairs.into_iter().map(|(t, p)| (t.into(), p)).collect();
        if let Some((t, p)) = entries.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(ScorerError::Malformed(format!("probability {p} for token {t:?}")));
        }
        let coverage: f64 = entries.iter().map(|(_, p)| p).sum();
        if coverage > 1.0 + 1e-9 {
            return Err(ScorerError::Malformed(format!("probabilities sum to {coverage}")));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { entries, coverage })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// Total probability mass represented.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    /// Probability of exactly `token`; zero when absent.
    pub fn prob(&self, token: &str) -> f64 {
        self.entries
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }
}

/// Fixed-width hidden-state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, ScorerError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ScorerError::Malformed("non-finite embedding value".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub backend: Backend,
    pub endpoint: Option<String>,
    pub top_k: usize,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub context_limit: Option<usize>,
    /// Mock only: seed of the hash-derived outputs.
    pub seed: u64,
    /// Mock only: embedding width.
    pub embed_dim: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            endpoint: None,
            top_k: 20,
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
            context_limit: None,
            seed: 0,
            embed_dim: 16,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.backend == Backend::Http && self.endpoint.is_none() && std::env::var(SCORER_URL_ENV).is_err() {
            return Err(ScorerError::Config("http backend requires an endpoint".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ScorerError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// A language model seen through the three capabilities used for decoding.
pub trait Scorer: Send + Sync {
    fn next_token_distribution(&self, document: &str) -> Result<TokenDistribution, ScorerError>;

    /// Total log-probability of `continuation` following `document`.
    fn continuation_logprob(&self, document: &str, continuation: &str) -> Result<f64, ScorerError>;

    fn embed_last_token(&self, document: &str) -> Result<Embedding, ScorerError>;

    /// Upper bound on concurrent requests.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Builds the scorer named by `config`.
pub fn from_config(config: &ScorerConfig) -> Result<Box<dyn Scorer>, ScorerError> {
    config.validate()?;
    Ok(match config.backend {
        Backend::Http => Box::new(HttpScorer::new(config)?),
        Backend::Mock => Box::new(MockScorer::hashed(config.seed, config.embed_dim).with_config(config)),
    })
}

/// Applies `f` to every item with at most `workers` running at once.
/// Results come back in input order regardless of completion order.
pub fn fan_out<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let mut local = Vec::new();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    local.push((i, f(&items[i])));
                }
                done.lock().expect("fan-out lock").extend(local);
            });
        }
    });
    let mut done = done.into_inner().expect("fan-out lock");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_from_logprobs_exponentiates() {
        let wire = [("1", -0.5f64), ("0", -1.5), (" 1", -4.0)];
        let d = TokenDistribution::from_logprobs(wire).unwrap();
        for (t, lp) in wire {
            assert_eq!(d.prob(t), lp.exp());
        }
        let direct: f64 = wire.iter().map(|(_, lp)| lp.exp()).sum();
        assert!((d.coverage() - direct).abs() < 1e-15);
        assert!(d.coverage() <= 1.0);
        assert_eq!(d.entries()[0].0, "1");
    }

    #[test]
    fn overfull_distribution_is_malformed() {
        assert!(TokenDistribution::from_probs([("a", 0.7), ("b", 0.4)]).is_err());
        assert!(TokenDistribution::from_probs([("a", -0.1)]).is_err());
        assert!(TokenDistribution::from_logprobs([("a", 0.1)]).is_err());
    }

    #[test]
    fn fan_out_keeps_order() {
        let items: Vec<usize> = (0..200).collect();
        let out = fan_out(&items, 8, |&i| {
            std::thread::sleep(Duration::from_micros(((i * 7919) % 13) as u64));
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn http_config_needs_endpoint() {
        let cfg = ScorerConfig {
            backend: Backend::Http,
            ..Default::default()
        };
        if std::env::var(SCORER_URL_ENV).is_err() {
            assert!(cfg.validate().is_err());
        }
    }
}
