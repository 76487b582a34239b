//! Validation corpus, per-token features, per-model loss records, benchmark
//! evaluations and task configs.
//!
//! Every structural invariant is enforced when the data is constructed, so the
//! numeric stages downstream can index without re-checking. Character offsets
//! are counted in Unicode scalar values (`str::chars`), never bytes.

mod files;
mod mix;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use files::{
    features_path_for, load_corpus, load_corpus_with_features, load_evals, load_features,
    load_losses, load_task_configs, read_features_binary, write_corpus, write_evals,
    write_features_binary, write_features_jsonl, write_losses, write_task_configs, FEATURES_MAGIC,
};
pub use mix::assemble_validation_mix;

/// Half-open character range `[start, end)` covered by one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl From<[usize; 2]> for TokenSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TokenSpan> for [usize; 2] {
    fn from(span: TokenSpan) -> Self {
        [span.start, span.end]
    }
}

impl fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// Checks that `spans` tile `[0, n_chars)` exactly: sorted, non-empty,
/// contiguous, starting at 0 and ending at `n_chars`.
///
/// Returns a description of the first violation.
pub fn check_coverage(spans: &[TokenSpan], n_chars: usize) -> std::result::Result<(), String> {
    if n_chars == 0 {
        return Err("text is empty".to_string());
    }
    let Some(first) = spans.first() else {
        return Err(format!("no spans for a {n_chars}-char text"));
    };
    if first.start != 0 {
        return Err(format!("first span {first} does not start at 0"));
    }
    let mut expected = 0;
    for (i, span) in spans.iter().enumerate() {
        if span.start != expected {
            let what = if span.start > expected { "gap" } else { "overlap" };
            return Err(format!(
                "{what} before span #{i} {span}: expected start {expected}"
            ));
        }
        if span.end <= span.start {
            return Err(format!("span #{i} {span} is empty"));
        }
        expected = span.end;
    }
    if expected != n_chars {
        return Err(format!(
            "spans end at {expected} but the text has {n_chars} chars"
        ));
    }
    Ok(())
}

/// One validation text with its target tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSample {
    pub sample_id: String,
    pub source_tag: String,
    pub text: String,
    pub target_spans: Vec<TokenSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_spans: Option<Vec<TokenSpan>>,
}

impl ValidationSample {
    pub fn char_count(&self) -> usize {
        self.text.chars().count()
    }

    pub fn token_count(&self) -> usize {
        self.target_spans.len()
    }

    /// Checks coverage of the target spans and placement of answer spans.
    pub fn validate(&self) -> Result<usize> {
        let n_chars = self.char_count();
        check_coverage(&self.target_spans, n_chars)
            .map_err(|rule| Error::invariant(&self.sample_id, format!("target_spans: {rule}")))?;
        if let Some(answers) = &self.answer_spans {
            let mut sorted: Vec<TokenSpan> = answers.clone();
            sorted.sort();
            let mut prev_end = 0;
            for span in &sorted {
                if span.is_empty() {
                    return Err(Error::invariant(
                        &self.sample_id,
                        format!("answer span {span} is empty"),
                    ));
                }
                if span.end > n_chars {
                    return Err(Error::invariant(
                        &self.sample_id,
                        format!("answer span {span} exceeds {n_chars} chars"),
                    ));
                }
                if span.start < prev_end {
                    return Err(Error::invariant(
                        &self.sample_id,
                        format!("answer span {span} overlaps another answer span"),
                    ));
                }
                prev_end = span.end;
            }
        }
        Ok(n_chars)
    }
}

/// Frozen-backbone feature vectors, one row of `dim` values per target token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub sample_id: String,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(sample_id: impl Into<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        let sample_id = sample_id.into();
        if dim == 0 {
            return Err(Error::Dimension(format!(
                "features for `{sample_id}` have dimension 0"
            )));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "features for `{sample_id}`: {} values is not a multiple of d={dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invariant(
                &sample_id,
                format!("feature value at row {}, col {} is not finite", pos / dim, pos % dim),
            ));
        }
        Ok(Self {
            sample_id,
            dim,
            data,
        })
    }

    pub fn from_rows(sample_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let sample_id = sample_id.into();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Dimension(format!(
                "features for `{sample_id}`: row {i} has {} values, row 0 has {dim}",
                rows[i].len()
            )));
        }
        Self::new(sample_id, dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// A validated collection of samples with aligned feature matrices.
#[derive(Debug, Clone)]
pub struct Corpus {
    samples: Vec<ValidationSample>,
    features: Vec<FeatureMatrix>,
    char_counts: Vec<usize>,
    n_chars: usize,
    feature_dim: usize,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, pairing each sample with the feature matrix of the
    /// same `sample_id` (features may arrive in any order).
    pub fn new(samples: Vec<ValidationSample>, features: Vec<FeatureMatrix>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        let mut char_counts = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            if index.insert(sample.sample_id.clone(), i).is_some() {
                return Err(Error::Duplicate {
                    what: "sample_id",
                    detail: sample.sample_id.clone(),
                });
            }
            char_counts.push(sample.validate()?);
        }

        let mut by_id: HashMap<String, FeatureMatrix> = HashMap::with_capacity(features.len());
        for fm in features {
            if !index.contains_key(&fm.sample_id) {
                return Err(Error::Unknown {
                    what: "sample_id in features",
                    id: fm.sample_id,
                });
            }
            if by_id.contains_key(&fm.sample_id) {
                return Err(Error::Duplicate {
                    what: "feature matrix",
                    detail: fm.sample_id,
                });
            }
            by_id.insert(fm.sample_id.clone(), fm);
        }

        let mut feature_dim = None;
        let mut aligned = Vec::with_capacity(samples.len());
        for sample in &samples {
            let fm = by_id.remove(&sample.sample_id).ok_or_else(|| {
                Error::invariant(&sample.sample_id, "no feature matrix for this sample")
            })?;
            let d = *feature_dim.get_or_insert(fm.dim());
            if fm.dim() != d {
                return Err(Error::Dimension(format!(
                    "sample `{}` has d={}, expected d={d}",
                    sample.sample_id,
                    fm.dim()
                )));
            }
            if fm.rows() != sample.token_count() {
                return Err(Error::invariant(
                    &sample.sample_id,
                    format!(
                        "{} feature rows for {} target tokens",
                        fm.rows(),
                        sample.token_count()
                    ),
                ));
            }
            aligned.push(fm);
        }

        let n_chars = char_counts.iter().sum();
        Ok(Self {
            samples,
            features: aligned,
            char_counts,
            n_chars,
            feature_dim: feature_dim.unwrap_or(0),
            index,
        })
    }

    pub fn samples(&self) -> &[ValidationSample] {
        &self.samples
    }

    pub fn features(&self) -> &[FeatureMatrix] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Total character count across all samples.
    pub fn n_chars(&self) -> usize {
        self.n_chars
    }

    pub fn char_count(&self, sample: usize) -> usize {
        self.char_counts[sample]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn token_count(&self) -> usize {
        self.samples.iter().map(ValidationSample::token_count).sum()
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn sample(&self, sample_id: &str) -> Option<&ValidationSample> {
        self.position(sample_id).map(|i| &self.samples[i])
    }

    /// SHA-256 over sample ids, texts and target spans, in corpus order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.sample_id.as_bytes());
            hasher.update([0u8]);
            hasher.update(s.text.as_bytes());
            hasher.update([0u8]);
            for span in &s.target_spans {
                hasher.update((span.start as u64).to_le_bytes());
                hasher.update((span.end as u64).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Per-token negative log-likelihoods of one model over one sample, under the
/// model's own tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLossRecord {
    pub model_id: String,
    pub sample_id: String,
    pub source_spans: Vec<TokenSpan>,
    pub token_nll: Vec<f64>,
}

impl ModelLossRecord {
    pub fn validate(&self, n_chars: usize) -> Result<()> {
        let ctx = || format!("{} (model `{}`)", self.sample_id, self.model_id);
        if self.source_spans.len() != self.token_nll.len() {
            return Err(Error::Alignment(format!(
                "{}: {} source spans but {} token losses",
                ctx(),
                self.source_spans.len(),
                self.token_nll.len()
            )));
        }
        check_coverage(&self.source_spans, n_chars)
            .map_err(|rule| Error::invariant(ctx(), format!("source_spans: {rule}")))?;
        if let Some(i) = self
            .token_nll
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invariant(
                ctx(),
                format!("token_nll[{i}] = {} is not a finite non-negative value", self.token_nll[i]),
            ));
        }
        Ok(())
    }
}

/// All loss records of one model, indexed by corpus sample position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLosses {
    pub model_id: String,
    records: Vec<Option<ModelLossRecord>>,
}

impl ModelLosses {
    pub fn records(&self) -> &[Option<ModelLossRecord>] {
        &self.records
    }

    pub fn record(&self, sample: usize) -> Option<&ModelLossRecord> {
        self.records.get(sample).and_then(Option::as_ref)
    }

    pub fn is_complete(&self) -> bool {
        self.records.iter().all(Option::is_some)
    }

    pub fn missing(&self) -> impl Iterator<Item = usize> + '_ {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(i, _)| i)
    }
}

/// Loss records grouped by model, in `model_id` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossSet {
    models: BTreeMap<String, ModelLosses>,
}

impl LossSet {
    /// Validates each record against its sample and groups them by model.
    pub fn from_records(
        records: impl IntoIterator<Item = ModelLossRecord>,
        corpus: &Corpus,
    ) -> Result<Self> {
        let mut models: BTreeMap<String, ModelLosses> = BTreeMap::new();
        for rec in records {
            let pos = corpus.position(&rec.sample_id).ok_or_else(|| Error::Unknown {
                what: "sample_id",
                id: rec.sample_id.clone(),
            })?;
            rec.validate(corpus.char_count(pos))?;
            let entry = models
                .entry(rec.model_id.clone())
                .or_insert_with(|| ModelLosses {
                    model_id: rec.model_id.clone(),
                    records: vec![None; corpus.len()],
                });
            if entry.records[pos].is_some() {
                return Err(Error::Duplicate {
                    what: "loss record",
                    detail: format!("model `{}`, sample `{}`", rec.model_id, rec.sample_id),
                });
            }
            entry.records[pos] = Some(rec);
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelLosses> {
        self.models.values()
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelLosses> {
        self.models.get(model_id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn complete_models(&self) -> impl Iterator<Item = &ModelLosses> {
        self.models.values().filter(|m| m.is_complete())
    }

    /// Models missing at least one sample, with the number of missing samples.
    pub fn incomplete(&self) -> Vec<(String, usize)> {
        self.models
            .values()
            .filter(|m| !m.is_complete())
            .map(|m| (m.model_id.clone(), m.missing().count()))
            .collect()
    }

    pub fn into_records(self) -> impl Iterator<Item = ModelLossRecord> {
        self.models
            .into_values()
            .flat_map(|m| m.records.into_iter().flatten())
    }

    pub fn iter_records(&self) -> impl Iterator<Item = &ModelLossRecord> {
        self.models
            .values()
            .flat_map(|m| m.records.iter().flatten())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidValue(format!(
                "split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Observed accuracy of one model on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model_id: String,
    pub task_id: String,
    pub accuracy: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<f64>,
}

impl ModelEval {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::InvalidValue(format!(
                "accuracy {} for ({}, {}) is outside [0, 1]",
                self.accuracy, self.model_id, self.task_id
            )));
        }
        if let Some(flops) = self.flops {
            if !(flops.is_finite() && flops > 0.0) {
                return Err(Error::InvalidValue(format!(
                    "flops {flops} for ({}, {}) must be positive",
                    self.model_id, self.task_id
                )));
            }
        }
        Ok(())
    }
}

/// Evaluations of `task_id`, keyed by model.
pub fn evals_for_task<'a>(evals: &'a [ModelEval], task_id: &str) -> BTreeMap<&'a str, &'a ModelEval> {
    evals
        .iter()
        .filter(|e| e.task_id == task_id)
        .map(|e| (e.model_id.as_str(), e))
        .collect()
}

/// Random-guess accuracy floor of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    pub gamma: f64,
}

impl TaskConfig {
    pub fn new(task_id: impl Into<String>, gamma: f64) -> Result<Self> {
        let cfg = Self {
            task_id: task_id.into(),
            gamma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidValue(format!(
                "gamma {} for task `{}` must lie in [0, 1)",
                self.gamma, self.task_id
            )));
        }
        Ok(())
    }
}

/// Suggested random-guess floors for common benchmarks. `bbh` has none.
pub fn suggested_gamma(task_id: &str) -> Option<f64> {
    match task_id.to_ascii_lowercase().as_str() {
        "mmlu" | "cmmlu" | "ceval" | "ceval-test" | "hellaswag" => Some(0.25),
        "gsm8k" => Some(0.0),
        _ => None,
    }
}
