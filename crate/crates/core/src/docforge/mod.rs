//! Document construction.
//!
//! A document is the task context, then in-context examples, then related
//! examples of the same entity, then the entity to predict. Every entity is
//! denormalized (see [`entity`]) and serialized as one JSON line; examples
//! carry their target as the final key, the predicted entity carries none.

pub mod entity;
mod json;
mod tokenizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::relstore::{IndexedStore, Value};
use crate::taskdef::{TaskRow, TaskSpec, TaskType};

pub use entity::{add_related_entities, expand_task_row, EntitySource, NestedEntity};
pub use json::{serialize_entity, value_to_json, write_value};
pub use tokenizer::{estimate_tokens, DefaultTokenizer, Tokenizer};

#[derive(Debug, thiserror::Error)]
pub enum DocError {
    #[error("document for row {row_id} has {tokens} tokens, limit {limit}; retry with {hint}")]
    Oversize {
        row_id: usize,
        tokens: usize,
        limit: usize,
        hint: DocParams,
    },
    #[error("bad document parameters: {0}")]
    Params(String),
}

/// Document-generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocParams {
    pub n_inc: usize,
    pub n_rel: usize,
    pub n_nest: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DocParams {
    pub fn new(n_inc: usize, n_rel: usize, n_nest: usize, d: usize) -> Self {
        Self {
            n_inc,
            n_rel,
            n_nest,
            d,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Lexicographic key used for tie-breaking.
    pub fn key(&self) -> (usize, usize, usize, usize) {
        (self.n_inc, self.n_rel, self.n_nest, self.d)
    }
}

impl fmt::Display for DocParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n_inc={},n_rel={},n_nest={},d={}",
            self.n_inc, self.n_rel, self.n_nest, self.d
        )?;
        if self.seed != 0 {
            write!(f, ",seed={}", self.seed)?;
        }
        Ok(())
    }
}

impl FromStr for DocParams {
    type Err = DocError;

    /// Parses `n_inc=8,n_rel=8,n_nest=4,d=1[,seed=7]`; omitted knobs are 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = DocParams::new(0, 0, 0, 0);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| DocError::Params(format!("`{part}` is not key=value")))?;
            let bad = |e: std::num::ParseIntError| DocError::Params(format!("{k}: {e}"));
            match k.trim() {
                "n_inc" => p.n_inc = v.trim().parse().map_err(bad)?,
                "n_rel" => p.n_rel = v.trim().parse().map_err(bad)?,
                "n_nest" => p.n_nest = v.trim().parse().map_err(bad)?,
                "d" => p.d = v.trim().parse().map_err(bad)?,
                "seed" => p.seed = v.trim().parse().map_err(bad)?,
                other => return Err(DocError::Params(format!("unknown parameter `{other}`"))),
            }
        }
        Ok(p)
    }
}

/// Halves `n_inc` and `n_rel` after a context-length failure. `(0, 0)` is a
/// fixed point; callers must treat it as a hard failure.
pub fn shrink_on_oversize(params: DocParams) -> DocParams {
    DocParams {
        n_inc: params.n_inc / 2,
        n_rel: params.n_rel / 2,
        ..params
    }
}

/// Sizes of the document's sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocParts {
    pub context_chars: usize,
    pub n_inc: usize,
    pub n_rel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub task_row_id: usize,
    pub text: String,
    pub parts: DocParts,
    pub token_estimate: usize,
    /// Parameters actually used, after any shrinking.
    pub params: DocParams,
    pub target_key: String,
}

impl Document {
    /// JSON lines after the context: examples first, the predicted entity last.
    pub fn blocks(&self) -> impl Iterator<Item = &str> {
        self.text[self.parts.context_chars..].split('\n')
    }

    /// Text handed to a scorer: the document with the final entity left
    /// open at the target key, so the next tokens are the predicted value.
    pub fn scoring_prompt(&self) -> String {
        scoring_prompt(&self.text, &self.target_key)
    }
}

/// See [`Document::scoring_prompt`].
pub fn scoring_prompt(text: &str, target_key: &str) -> String {
    let body = text.strip_suffix('}').unwrap_or(text);
    let mut out = String::with_capacity(text.len() + target_key.len() + 8);
    out.push_str(body);
    if !body.ends_with('{') {
        out.push_str(", ");
    }
    out.push_str(&serde_json::to_string(target_key).expect("strings serialize"));
    out.push_str(": ");
    out
}

/// Train rows for the same entity (equal on every entity foreign key),
/// strictly older than `test_row`, newest first, at most `n_rel`.
pub fn related_examples<'a>(test_row: &TaskRow, train: &'a [TaskRow], n_rel: usize) -> Vec<&'a TaskRow> {
    related_examples_excluding(test_row, train, n_rel, &[])
}

/// [`related_examples`] skipping train rows whose id is in `exclude`.
pub fn related_examples_excluding<'a>(
    test_row: &TaskRow,
    train: &'a [TaskRow],
    n_rel: usize,
    exclude: &[usize],
) -> Vec<&'a TaskRow> {
    if n_rel == 0 {
        return Vec::new();
    }
    let mut hits: Vec<&TaskRow> = train
        .iter()
        .filter(|r| r.seed_time < test_row.seed_time && r.fkey_values == test_row.fkey_values && !exclude.contains(&r.id))
        .collect();
    hits.sort_by(|a, b| b.seed_time.cmp(&a.seed_time).then(a.id.cmp(&b.id)));
    hits.truncate(n_rel);
    hits
}

/// Inputs shared by every document of a task.
#[derive(Clone, Copy)]
pub struct DocContext<'a> {
    pub spec: &'a TaskSpec,
    pub store: &'a IndexedStore,
    /// Train split; the only source of in-context and related examples.
    pub train: &'a [TaskRow],
    pub tokenizer: &'a dyn Tokenizer,
    /// Documents above this many tokens fail with [`DocError::Oversize`].
    pub max_tokens: Option<usize>,
}

impl<'a> DocContext<'a> {
    pub fn new(spec: &'a TaskSpec, store: &'a IndexedStore, train: &'a [TaskRow]) -> Self {
        Self {
            spec,
            store,
            train,
            tokenizer: &DefaultTokenizer,
            max_tokens: None,
        }
    }

    fn context_text(&self) -> String {
        let mut s = String::new();
        for part in [&self.spec.db_description, &self.spec.task_description] {
            if !part.is_empty() {
                s.push_str(part.trim_end());
                s.push('\n');
            }
        }
        s
    }

    fn example_json(&self, row: &TaskRow, params: &DocParams) -> String {
        let e = expand_task_row(self.store, self.spec, row, params.n_nest, params.d);
        let target = row.target.clone().unwrap_or(Value::Null);
        serialize_entity(&e, Some((&self.spec.target_column, &target)))
    }

    /// Builds the document for `test_row`.
    ///
    /// The first `params.n_inc` rows of `shared_inc` that are strictly older
    /// than the test row become in-context examples; each example is
    /// denormalized against its own seed time.
    pub fn build_document(
        &self,
        test_row: &TaskRow,
        params: DocParams,
        shared_inc: &[TaskRow],
    ) -> Result<Document, DocError> {
        let mut text = self.context_text();
        let context_chars = text.len();

        let inc: Vec<&TaskRow> = shared_inc
            .iter()
            .filter(|r| r.seed_time < test_row.seed_time)
            .take(params.n_inc)
            .collect();
        for r in &inc {
            text.push_str(&self.example_json(r, &params));
            text.push('\n');
        }
        let inc_ids: Vec<usize> = inc.iter().map(|r| r.id).collect();
        let rel = related_examples_excluding(test_row, self.train, params.n_rel, &inc_ids);
        for r in &rel {
            text.push_str(&self.example_json(r, &params));
            text.push('\n');
        }
        let e = expand_task_row(self.store, self.spec, test_row, params.n_nest, params.d);
        text.push_str(&serialize_entity(&e, None));

        let token_estimate = self.tokenizer.count(&text);
        if let Some(limit) = self.max_tokens {
            if token_estimate > limit {
                return Err(DocError::Oversize {
                    row_id: test_row.id,
                    tokens: token_estimate,
                    limit,
                    hint: shrink_on_oversize(params),
                });
            }
        }
        Ok(Document {
            task_row_id: test_row.id,
            text,
            parts: DocParts {
                context_chars,
                n_inc: inc.len(),
                n_rel: rel.len(),
            },
            token_estimate,
            params,
            target_key: self.spec.target_column.clone(),
        })
    }
}

/// One line of a documents JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRecord {
    pub row_id: usize,
    pub split: String,
    pub params: DocParams,
    pub text: String,
    pub token_estimate: usize,
    pub target_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<serde_json::Value>,
}

impl DocRecord {
    /// `target` is echoed only for train and validation material.
    pub fn from_document(doc: &Document, split: &str, target: Option<&Value>) -> Self {
        let target = match split {
            "train" | "validation" => target.map(|v| serde_json::from_str(&value_to_json(v)).expect("valid json")),
            _ => None,
        };
        Self {
            row_id: doc.task_row_id,
            split: split.to_string(),
            params: doc.params,
            text: doc.text.clone(),
            token_estimate: doc.token_estimate,
            target_key: doc.target_key.clone(),
            task_type: None,
            target,
        }
    }

    pub fn scoring_prompt(&self) -> String {
        scoring_prompt(&self.text, &self.target_key)
    }
}
