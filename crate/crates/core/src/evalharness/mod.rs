//! Metrics, test subsampling, token statistics and grid sweeps.

mod grid;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::docforge::{expand_task_row, serialize_entity, Document};
use crate::relstore::IndexedStore;
use crate::scorer::LabelOracle;
use crate::taskdef::{TaskRow, TaskSpec};

pub use grid::{
    run_grid, train_head, ConfigResult, GridSpec, HeadRun, Mode, RowFailure, RunOptions, RunReport, SeedResult,
    ShrinkEvent,
};

/// Cap on test rows per run.
pub const TEST_CAP: usize = 10_000;
/// Cap on validation rows per run.
pub const VAL_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{0} predictions but {1} targets")]
    Length(usize, usize),
    #[error("no predictions")]
    Empty,
    #[error("AUROC needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("label {0} is not 0 or 1")]
    Label(f64),
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::Length(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum form of the Mann-Whitney
/// statistic; tied scores share their average rank, which counts each
/// tied positive/negative pair as one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(&l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(MetricError::Label(l));
    }
    if let Some(&s) = scores.iter().find(|s| s.is_nan()) {
        return Err(MetricError::NonFinite(s));
    }
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += avg * pos_in_group as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), targets.len())?;
    let total: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// All rows when there are at most `cap`, otherwise a uniform sample of
/// `cap` rows without replacement, kept in their original order.
pub fn sample_test(rows: &[TaskRow], cap: usize, seed: u64) -> Vec<TaskRow> {
    if rows.len() <= cap {
        return rows.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, rows.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| rows[i].clone()).collect()
}

/// Mean and population standard deviation of document token counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for TokenStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

pub fn token_stats(documents: &[Document]) -> Result<TokenStats, MetricError> {
    let counts: Vec<usize> = documents.iter().map(|d| d.token_estimate).collect();
    token_stats_of(&counts)
}

pub fn token_stats_of(counts: &[usize]) -> Result<TokenStats, MetricError> {
    if counts.is_empty() {
        return Err(MetricError::Empty);
    }
    // Welford.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let x = c as f64;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(TokenStats {
        mean,
        std: (m2 / counts.len() as f64).max(0.0).sqrt(),
    })
}

/// Label lookup for the mock scorer: recognizes the predicted entity at the
/// end of a document or scoring prompt and returns that row's target.
///
/// Rows are keyed by their un-nested serialization, which is a prefix of
/// the entity's serialization under any nesting parameters.
pub fn ground_truth_oracle(store: &IndexedStore, spec: &TaskSpec, rows: &[TaskRow]) -> LabelOracle {
    let mut by_prefix: HashMap<String, f64> = HashMap::new();
    for r in rows {
        let Some(y) = r.target_f64() else { continue };
        let flat = serialize_entity(&expand_task_row(store, spec, r, 0, 0), None);
        let prefix = flat.strip_suffix('}').unwrap_or(&flat).to_string();
        by_prefix.insert(prefix, y);
    }
    Arc::new(move |text: &str| {
        let last = text.rsplit('\n').next()?;
        let ends = last
            .match_indices(", \"")
            .map(|(i, _)| i)
            .chain(last.strip_suffix('}').map(str::len));
        for end in ends {
            if let Some(y) = by_prefix.get(&last[..end]) {
                return Some(*y);
            }
        }
        None
    })
}
