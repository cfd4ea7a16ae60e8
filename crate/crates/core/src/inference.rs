//! Metric-aware decision rules.
//!
//! AUROC depends only on the ranking of scores, so the probability of the
//! positive-class token is used directly. MAE is minimized by the median of
//! the predictive distribution, which is estimated by scoring every
//! candidate value on a grid spanning the train targets.

use serde::{Deserialize, Serialize};

use crate::scorer::{fan_out, Scorer, ScorerError, TokenDistribution};

/// Token read off for the positive class.
pub const POSITIVE_TOKEN: &str = "1";

/// Tolerance on the cumulative mass when locating the lower median.
const CDF_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("no train targets to build a candidate grid from")]
    EmptyTargets,
    #[error("max_candidates must be at least 2, got {0}")]
    TooFewCandidates(usize),
    #[error("non-finite train target {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// Probability of exactly the token `"1"`, zero when it is not in the top-k.
pub fn classification_score(dist: &TokenDistribution) -> f64 {
    dist.prob(POSITIVE_TOKEN)
}

/// Candidate target values and the text each is scored as.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    values: Vec<f64>,
    rendered: Vec<String>,
}

impl CandidateGrid {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rendered(&self) -> &[String] {
        &self.rendered
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Middle candidate, used when no candidate has any mass.
    pub fn midpoint(&self) -> f64 {
        self.values[(self.values.len() - 1) / 2]
    }
}

/// Digits after the decimal point in the shortest round-trip rendering.
fn decimals(x: f64) -> usize {
    let s = format!("{x:e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i64 = exp.parse().expect("integer exponent");
    let frac = mantissa.split_once('.').map(|(_, f)| f.len()).unwrap_or(0) as i64;
    (frac - exp).max(0) as usize
}

/// Builds the candidate grid between the smallest and largest train target.
///
/// Integer targets whose range holds at most `max_candidates` values give
/// every integer in range. Otherwise `max_candidates` evenly spaced reals
/// are rendered at the most common decimal precision among the targets,
/// raised as needed until renderings are distinct and each reads back
/// within 1% of the grid spacing.
pub fn build_grid(train_targets: &[f64], max_candidates: usize) -> Result<CandidateGrid, InferenceError> {
    if train_targets.is_empty() {
        return Err(InferenceError::EmptyTargets);
    }
    if max_candidates < 2 {
        return Err(InferenceError::TooFewCandidates(max_candidates));
    }
    if let Some(&x) = train_targets.iter().find(|x| !x.is_finite()) {
        return Err(InferenceError::NonFinite(x));
    }
    let lo = train_targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = train_targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let integral = train_targets.iter().all(|x| x.fract() == 0.0 && x.abs() < 9e15);

    if integral && hi - lo + 1.0 <= max_candidates as f64 {
        let values: Vec<f64> = (lo as i64..=hi as i64).map(|i| i as f64).collect();
        let rendered = values.iter().map(|v| format!("{}", *v as i64)).collect();
        return Ok(CandidateGrid { values, rendered });
    }

    let mut counts = std::collections::BTreeMap::new();
    for &t in train_targets {
        *counts.entry(decimals(t)).or_insert(0usize) += 1;
    }
    // Most frequent precision; ties go to the finer one.
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(p, _)| *p)
        .unwrap_or(0);

    if hi == lo {
        return Ok(CandidateGrid {
            values: vec![lo],
            rendered: vec![format!("{lo:.modal$}")],
        });
    }
    let m = max_candidates;
    let values: Vec<f64> = (0..m)
        .map(|i| if i == m - 1 { hi } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 })
        .collect();
    // Each rendering must read back within 1% of the spacing.
    let tolerance = (hi - lo) / (m - 1) as f64 / 100.0;
    let mut precision = modal;
    let rendered = loop {
        let r: Vec<String> = values.iter().map(|v| format!("{v:.precision$}")).collect();
        let faithful = r
            .iter()
            .zip(&values)
            .all(|(s, v)| (s.parse::<f64>().expect("rendered float") - v).abs() <= tolerance);
        if precision >= 17 || (faithful && r.windows(2).all(|w| w[0] != w[1])) {
            break r;
        }
        precision += 1;
    };
    Ok(CandidateGrid { values, rendered })
}

/// Candidate probabilities normalized over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDistribution {
    pub probs: Vec<f64>,
}

impl ScoredDistribution {
    /// Log-sum-exp normalization. `None` when every log-probability is
    /// `-inf` (or the input is empty).
    pub fn from_logprobs(logprobs: &[f64]) -> Option<Self> {
        let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return None;
        }
        let weights: Vec<f64> = logprobs.iter().map(|lp| (lp - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Some(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }
}

/// Smallest value whose cumulative probability reaches one half.
pub fn lower_median(values: &[f64], probs: &[f64]) -> f64 {
    let mut cdf = 0.0;
    for (v, p) in values.iter().zip(probs) {
        cdf += p;
        if cdf >= 0.5 - CDF_TOLERANCE {
            return *v;
        }
    }
    *values.last().expect("non-empty grid")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianPrediction {
    pub value: f64,
    /// `None` when all candidates underflowed and the midpoint was used.
    pub distribution: Option<ScoredDistribution>,
}

/// Scores every candidate's rendering after `prompt` and returns the lower
/// median of the resulting distribution over the grid.
pub fn median_predict(prompt: &str, grid: &CandidateGrid, scorer: &dyn Scorer) -> Result<MedianPrediction, ScorerError> {
    let logprobs: Vec<Result<f64, ScorerError>> =
        fan_out(grid.rendered(), scorer.max_in_flight(), |r| scorer.continuation_logprob(prompt, r));
    let logprobs: Vec<f64> = logprobs.into_iter().collect::<Result<_, _>>()?;
    match ScoredDistribution::from_logprobs(&logprobs) {
        Some(dist) => Ok(MedianPrediction {
            value: lower_median(grid.values(), &dist.probs),
            distribution: Some(dist),
        }),
        None => {
            log::warn!("all candidate log-probabilities underflowed; predicting the grid midpoint");
            Ok(MedianPrediction {
                value: grid.midpoint(),
                distribution: None,
            })
        }
    }
}
