use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Embedding, Scorer, ScorerConfig, ScorerError, TokenDistribution};
use crate::docforge::{DefaultTokenizer, Tokenizer};

/// Maps a scoring prompt to its ground-truth target, when known.
pub type LabelOracle = Arc<dyn Fn(&str) -> Option<f64> + Send + Sync>;

/// What the mock answers.
#[derive(Clone)]
pub enum MockBehavior {
    /// Fixed next-token distribution; continuations are scored one character
    /// per step from `steps[i]`, falling back to `fallback` for characters
    /// or steps not listed.
    Table {
        next_token: Vec<(String, f64)>,
        steps: Vec<Vec<(String, f64)>>,
        fallback: f64,
    },
    /// Probabilities derived from a hash of the request.
    Hashed,
    /// Reads the ground truth: `p("1")` is 0.9 for positives and 0.1
    /// otherwise (swapped when `inverted`), continuations peak at the true
    /// value, and embeddings are shifted along a fixed direction by the label.
    Oracle { labels: LabelOracle, inverted: bool },
}

impl std::fmt::Debug for MockBehavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MockBehavior::Table { next_token, steps, fallback } => f
                .debug_struct("Table")
                .field("next_token", next_token)
                .field("steps", steps)
                .field("fallback", fallback)
                .finish(),
            MockBehavior::Hashed => f.write_str("Hashed"),
            MockBehavior::Oracle { inverted, .. } => f.debug_struct("Oracle").field("inverted", inverted).finish(),
        }
    }
}

/// Deterministic in-process scorer: a pure function of its configuration
/// and the request.
#[derive(Debug, Clone)]
pub struct MockScorer {
    pub behavior: MockBehavior,
    pub seed: u64,
    pub dim: usize,
    pub top_k: usize,
    pub context_limit: Option<usize>,
    pub max_in_flight: usize,
}

const ORACLE_MARGIN: f64 = 3.0;

impl MockScorer {
    fn with_behavior(behavior: MockBehavior, seed: u64, dim: usize) -> Self {
        Self {
            behavior,
            seed,
            dim,
            top_k: 20,
            context_limit: None,
            max_in_flight: 1,
        }
    }

    pub fn table(next_token: Vec<(&str, f64)>, steps: Vec<Vec<(&str, f64)>>, fallback: f64) -> Self {
        let conv = |v: Vec<(&str, f64)>| v.into_iter().map(|(t, p)| (t.to_string(), p)).collect();
        Self::with_behavior(
            MockBehavior::Table {
                next_token: conv(next_token),
                steps: steps.into_iter().map(conv).collect(),
                fallback,
            },
            0,
            16,
        )
    }

    pub fn hashed(seed: u64, dim: usize) -> Self {
        Self::with_behavior(MockBehavior::Hashed, seed, dim)
    }

    pub fn oracle(labels: LabelOracle, inverted: bool) -> Self {
        Self::with_behavior(MockBehavior::Oracle { labels, inverted }, 0, 16)
    }

    pub fn with_config(mut self, cfg: &ScorerConfig) -> Self {
        self.seed = cfg.seed;
        self.dim = cfg.embed_dim;
        self.top_k = cfg.top_k;
        self.context_limit = cfg.context_limit;
        self.max_in_flight = cfg.max_in_flight;
        self
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    fn check(&self, document: &str) -> Result<(), ScorerError> {
        if document.is_empty() {
            return Err(ScorerError::EmptyDocument);
        }
        if let Some(limit) = self.context_limit {
            let n = DefaultTokenizer.count(document);
            if n > limit {
                return Err(ScorerError::ContextLengthExceeded(format!("{n} tokens > {limit}")));
            }
        }
        Ok(())
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn hashed_vector(&self, document: &str) -> Vec<f64> {
        let mut rng = self.rng(&["embed", document]);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl Scorer for MockScorer {
    fn next_token_distribution(&self, document: &str) -> Result<TokenDistribution, ScorerError> {
        self.check(document)?;
        let mut dist = match &self.behavior {
            MockBehavior::Table { next_token, .. } => TokenDistribution::from_probs(next_token.iter().cloned())?,
            MockBehavior::Hashed => {
                let p: f64 = self.rng(&["next", document]).gen_range(0.0..1.0);
                TokenDistribution::from_probs([("1", p), ("0", 1.0 - p)])?
            }
            MockBehavior::Oracle { labels, inverted } => {
                let p = match labels(document) {
                    Some(y) if (y == 1.0) != *inverted => 0.9,
                    Some(_) => 0.1,
                    None => 0.5,
                };
                TokenDistribution::from_probs([("1", p), ("0", 1.0 - p)])?
            }
        };
        if dist.entries.len() > self.top_k {
            dist.entries.truncate(self.top_k);
            dist.coverage = dist.entries.iter().map(|(_, p)| p).sum();
        }
        Ok(dist)
    }

    fn continuation_logprob(&self, document: &str, continuation: &str) -> Result<f64, ScorerError> {
        if continuation.is_empty() {
            return Err(ScorerError::EmptyContinuation);
        }
        self.check(document)?;
        match &self.behavior {
            MockBehavior::Table { steps, fallback, .. } => {
                let mut total = 0.0;
                for (i, ch) in continuation.chars().enumerate() {
                    let mut buf = [0u8; 4];
                    let ch = &*ch.encode_utf8(&mut buf);
                    let p = steps
                        .get(i)
                        .and_then(|s| s.iter().find(|(t, _)| t == ch))
                        .map(|(_, p)| *p)
                        .unwrap_or(*fallback);
                    total += p.ln();
                }
                Ok(total)
            }
            MockBehavior::Hashed => {
                let mut rng = self.rng(&["cont", document]);
                let mut total = 0.0;
                for _ in continuation.chars() {
                    let p: f64 = rng.gen_range(0.05..1.0);
                    total += p.ln();
                }
                Ok(total)
            }
            MockBehavior::Oracle { labels, .. } => {
                let value = continuation.trim().parse::<f64>();
                Ok(match (labels(document), value) {
                    (Some(y), Ok(c)) => -(c - y).abs(),
                    (None, Ok(_)) => 0.0,
                    (_, Err(_)) => -50.0,
                })
            }
        }
    }

    fn embed_last_token(&self, document: &str) -> Result<Embedding, ScorerError> {
        self.check(document)?;
        let mut v = self.hashed_vector(document);
        if let MockBehavior::Oracle { labels, inverted } = &self.behavior {
            if let Some(y) = labels(document) {
                let signal = if *inverted { -y } else { y };
                let scale = ORACLE_MARGIN / (self.dim as f64).sqrt();
                for x in &mut v {
                    *x += signal * scale;
                }
            }
        }
        Embedding::new(v)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
