//! Synthetic model families with a known salience scorer and law.
//!
//! Models come in series. Within a series, loss shrinks geometrically with
//! the model index. Each series scales the loss of every source tag by its
//! own multiplier, which is what makes loss-only prediction fail across
//! series. Ground-truth scores are computed from the mapped losses the
//! pipeline itself sees, so a noise-free family is exactly realizable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_corpus, write_evals, write_features_jsonl, write_losses, write_task_configs, Corpus, FeatureMatrix,
    LossSet, ModelEval, ModelLossRecord, Split, TaskConfig, TokenSpan, ValidationSample,
};
use crate::error::{Error, Result};
use crate::lawfit::ScalingLawParams;
use crate::lossmap::{map_all, MappedLosses};
use crate::numeric::{median, min_max};
use crate::salience::{capability_score, score_weights, Activation, SalienceScorer, WeightVector};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
const MAX_TARGET_TOKEN_CHARS: usize = 4;
const MEAN_TARGET_TOKEN_CHARS: f64 = (1 + MAX_TARGET_TOKEN_CHARS) as f64 / 2.0;
const MAX_SOURCE_TOKEN_CHARS: usize = 5;
const SPLIT_CYCLE: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Per-source-tag loss multipliers of one model series. Tags left out get 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesShift {
    pub name: String,
    #[serde(default)]
    pub multipliers: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFamilySpec {
    pub task_id: String,
    pub num_models: usize,
    pub num_samples: usize,
    /// Target tokens per sample.
    pub tokens_per_sample: usize,
    pub feature_dim: usize,
    pub source_tags: Vec<String>,
    /// Drawn from N(0, 1/d) when absent.
    pub true_theta: Option<Vec<f64>>,
    pub true_bias: f64,
    pub activation: Activation,
    /// Calibrated from the true scores when absent: `-8 / range`.
    pub true_alpha: Option<f64>,
    /// Calibrated from the true scores when absent: their median.
    pub true_beta: Option<f64>,
    pub gamma: f64,
    /// Mean per-token loss of the first model of a series before shifting,
    /// in nats. Loss per character is constant within a sample, so how a
    /// model tokenizes the sample does not change its mapped losses.
    pub base_loss: f64,
    /// Loss ratio between consecutive models of a series.
    pub skill_decay: f64,
    pub accuracy_noise: f64,
    /// Standard deviation of per-token features around their tag's centre.
    pub feature_noise: f64,
    pub series: Vec<SeriesShift>,
    /// Rescale each series' multipliers so every series has the same
    /// unweighted mean loss at equal model index.
    pub balance_mean_loss: bool,
    pub seed: u64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        let tags = ["mmlu", "bbh", "gsm8k", "hellaswag", "cmmlu"];
        let series = |name: &str, m: [f64; 5]| SeriesShift {
            name: name.into(),
            multipliers: tags.iter().map(|t| t.to_string()).zip(m).collect(),
        };
        Self {
            task_id: "synthetic".into(),
            num_models: 40,
            num_samples: 50,
            tokens_per_sample: 30,
            feature_dim: 16,
            source_tags: tags.iter().map(|t| t.to_string()).collect(),
            true_theta: None,
            true_bias: 0.0,
            activation: Activation::Sigmoid,
            true_alpha: None,
            true_beta: None,
            gamma: 0.25,
            base_loss: 2.0,
            skill_decay: 0.97,
            accuracy_noise: 0.0,
            feature_noise: 1.0,
            series: vec![
                series("series_a", [1.0, 1.4, 0.7, 1.1, 0.8]),
                series("series_b", [1.2, 0.7, 1.3, 0.9, 1.0]),
            ],
            balance_mean_loss: true,
            seed: 0,
        }
    }
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidValue(msg));
        for (name, v) in [
            ("num_models", self.num_models),
            ("num_samples", self.num_samples),
            ("tokens_per_sample", self.tokens_per_sample),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("base_loss", self.base_loss),
            ("skill_decay", self.skill_decay),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        for (name, v) in [
            ("accuracy_noise", self.accuracy_noise),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be non-negative"));
            }
        }
        TaskConfig::new(self.task_id.clone(), self.gamma)?;
        if !self.true_bias.is_finite() {
            return bad("true_bias must be finite".into());
        }
        if let Some(theta) = &self.true_theta {
            if theta.len() != self.feature_dim {
                return Err(Error::Dimension(format!(
                    "true_theta has {} entries, feature_dim is {}",
                    theta.len(),
                    self.feature_dim
                )));
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return bad("true_theta must be finite".into());
            }
        }
        for (name, v) in [("true_alpha", self.true_alpha), ("true_beta", self.true_beta)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.true_alpha == Some(0.0) {
            return bad("true_alpha must be non-zero".into());
        }
        let tags: BTreeSet<&str> = self.source_tags.iter().map(String::as_str).collect();
        if tags.is_empty() || tags.len() != self.source_tags.len() {
            return bad("source_tags must be non-empty and distinct".into());
        }
        let names: BTreeSet<&str> = self.series.iter().map(|s| s.name.as_str()).collect();
        if names.is_empty() || names.len() != self.series.len() {
            return bad("series must be non-empty with distinct names".into());
        }
        for s in &self.series {
            for (tag, &m) in &s.multipliers {
                if !tags.contains(tag.as_str()) {
                    return Err(Error::Unknown {
                        what: "source tag in series multipliers",
                        id: tag.clone(),
                    });
                }
                if !(m.is_finite() && m > 0.0) {
                    return bad(format!("multiplier {m} for `{tag}` in `{}` must be positive", s.name));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Everything needed to check a fit against the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_theta: Vec<f64>,
    pub true_bias: f64,
    pub activation: Activation,
    pub true_alpha: f64,
    pub true_beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub task_id: String,
    pub skill_decay: f64,
    /// Multipliers after balancing, by series then tag.
    pub multipliers: BTreeMap<String, BTreeMap<String, f64>>,
    pub true_scores: BTreeMap<String, f64>,
}

impl GroundTruth {
    pub fn params(&self) -> ScalingLawParams {
        ScalingLawParams::new(self.true_alpha, self.true_beta, self.gamma)
    }

    pub fn scorer(&self) -> SalienceScorer {
        SalienceScorer::new(self.true_theta.clone(), self.true_bias, self.activation).expect("validated")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("truth serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub corpus: Corpus,
    pub losses: LossSet,
    pub mapped: BTreeMap<String, MappedLosses>,
    pub evals: Vec<ModelEval>,
    pub task: TaskConfig,
    pub truth: GroundTruth,
}

/// Paths written by [`SyntheticFamily::write_to`].
#[derive(Debug, Clone)]
pub struct FamilyFiles {
    pub corpus: PathBuf,
    pub features: PathBuf,
    pub losses: PathBuf,
    pub evals: PathBuf,
    pub tasks: PathBuf,
    pub truth: PathBuf,
}

impl FamilyFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            corpus: dir.join("corpus.jsonl"),
            features: dir.join("corpus.features.jsonl"),
            losses: dir.join("losses.jsonl"),
            evals: dir.join("evals.jsonl"),
            tasks: dir.join("tasks.jsonl"),
            truth: dir.join("truth.json"),
        }
    }
}

impl SyntheticFamily {
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<FamilyFiles> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = FamilyFiles::in_dir(dir);
        write_corpus(&files.corpus, &self.corpus)?;
        write_features_jsonl(&files.features, &self.corpus)?;
        write_losses(&files.losses, self.losses.iter_records())?;
        write_evals(&files.evals, &self.evals)?;
        write_task_configs(&files.tasks, [&self.task])?;
        self.truth.save(&files.truth)?;
        Ok(files)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random contiguous tiling of `n` characters into pieces of 1..=`max` chars.
fn random_tiling(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.random_range(1..=max).min(n - start);
        spans.push(TokenSpan::new(start, start + len));
        start += len;
    }
    spans
}

pub fn generate_family(spec: &SyntheticFamilySpec) -> Result<SyntheticFamily> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let theta = match &spec.true_theta {
        Some(t) => t.clone(),
        None => (0..d).map(|_| normal(&mut rng) / (d as f64).sqrt()).collect(),
    };
    let centres: Vec<Vec<f64>> = spec
        .source_tags
        .iter()
        .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
        .collect();

    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut features = Vec::with_capacity(spec.num_samples);
    // Per-character loss of a unit-skill, unit-multiplier model.
    let mut base_chars: Vec<Vec<f64>> = Vec::with_capacity(spec.num_samples);
    let mut tag_of: Vec<usize> = Vec::with_capacity(spec.num_samples);
    for s in 0..spec.num_samples {
        let tag = s % spec.source_tags.len();
        let mut spans = Vec::with_capacity(spec.tokens_per_sample);
        let mut base = Vec::new();
        let mut text = String::new();
        let mut rows = Vec::with_capacity(spec.tokens_per_sample * d);
        let char_loss = spec.base_loss * rng.random_range(0.5..1.5) / MEAN_TARGET_TOKEN_CHARS;
        for _ in 0..spec.tokens_per_sample {
            let len = rng.random_range(1..=MAX_TARGET_TOKEN_CHARS);
            spans.push(TokenSpan::new(base.len(), base.len() + len));
            for _ in 0..len {
                text.push(ALPHABET[rng.random_range(0..ALPHABET.len())] as char);
                base.push(char_loss);
            }
            rows.extend(centres[tag].iter().map(|c| c + spec.feature_noise * normal(&mut rng)));
        }
        let sample_id = format!("{}-{s:04}", spec.source_tags[tag]);
        let answer = *spans.last().expect("at least one token");
        features.push(FeatureMatrix::new(sample_id.clone(), d, rows)?);
        samples.push(ValidationSample {
            sample_id,
            source_tag: spec.source_tags[tag].clone(),
            text,
            target_spans: spans,
            answer_spans: Some(vec![answer]),
        });
        base_chars.push(base);
        tag_of.push(tag);
    }
    let corpus = Corpus::new(samples, features)?;

    let mut tag_loss = vec![0.0; spec.source_tags.len()];
    for (chars, &tag) in base_chars.iter().zip(&tag_of) {
        tag_loss[tag] += chars.iter().sum::<f64>();
    }
    let unshifted: f64 = tag_loss.iter().sum();
    let multipliers: Vec<Vec<f64>> = spec
        .series
        .iter()
        .map(|series| {
            let raw: Vec<f64> = spec
                .source_tags
                .iter()
                .map(|t| series.multipliers.get(t).copied().unwrap_or(1.0))
                .collect();
            if !spec.balance_mean_loss {
                return raw;
            }
            let shifted: f64 = raw.iter().zip(&tag_loss).map(|(m, l)| m * l).sum();
            let f = if shifted > 0.0 { unshifted / shifted } else { 1.0 };
            raw.iter().map(|m| m * f).collect()
        })
        .collect();

    let n_series = spec.series.len();
    let mut records = Vec::with_capacity(spec.num_models * spec.num_samples);
    let mut model_meta = Vec::with_capacity(spec.num_models);
    for m in 0..spec.num_models {
        let (j, k) = (m % n_series, m / n_series);
        let model_id = format!("{}-{k:03}", spec.series[j].name);
        let skill = spec.skill_decay.powi(k as i32);
        for (s, sample) in corpus.samples().iter().enumerate() {
            let scale = skill * multipliers[j][tag_of[s]];
            let chars = &base_chars[s];
            let source_spans = random_tiling(&mut rng, chars.len(), MAX_SOURCE_TOKEN_CHARS);
            let token_nll = source_spans
                .iter()
                .map(|sp| chars[sp.start..sp.end].iter().sum::<f64>() * scale)
                .collect();
            records.push(ModelLossRecord {
                model_id: model_id.clone(),
                sample_id: sample.sample_id.clone(),
                source_spans,
                token_nll,
            });
        }
        model_meta.push((model_id, k));
    }
    let losses = LossSet::from_records(records, &corpus)?;
    let mapped = map_all(&losses, &corpus, 1)?;

    let scorer = SalienceScorer::new(theta.clone(), spec.true_bias, spec.activation)?;
    let weights = score_weights(&scorer, &corpus)?;
    let mut true_scores = BTreeMap::new();
    for (id, m) in &mapped {
        true_scores.insert(id.clone(), capability_score(&weights, &m.per_sample, corpus.n_chars())?);
    }
    let score_list: Vec<f64> = true_scores.values().copied().collect();
    let (lo, hi) = min_max(&score_list).expect("at least one model");
    let alpha = spec
        .true_alpha
        .unwrap_or(if hi > lo { -8.0 / (hi - lo) } else { -1.0 });
    let beta = spec.true_beta.unwrap_or_else(|| median(&score_list));
    let params = ScalingLawParams::new(alpha, beta, spec.gamma);

    let evals = model_meta
        .iter()
        .map(|(model_id, k)| {
            let clean = params.predict(true_scores[model_id]);
            let accuracy = if spec.accuracy_noise > 0.0 {
                (clean + spec.accuracy_noise * normal(&mut rng)).clamp(spec.gamma, 1.0)
            } else {
                clean
            };
            ModelEval {
                model_id: model_id.clone(),
                task_id: spec.task_id.clone(),
                accuracy,
                split: SPLIT_CYCLE[k % SPLIT_CYCLE.len()],
                flops: Some(1e20 * 1.5f64.powi(*k as i32)),
            }
        })
        .collect();

    let truth = GroundTruth {
        true_theta: theta,
        true_bias: spec.true_bias,
        activation: spec.activation,
        true_alpha: alpha,
        true_beta: beta,
        gamma: spec.gamma,
        seed: spec.seed,
        task_id: spec.task_id.clone(),
        skill_decay: spec.skill_decay,
        multipliers: spec
            .series
            .iter()
            .zip(&multipliers)
            .map(|(s, m)| (s.name.clone(), spec.source_tags.iter().cloned().zip(m.iter().copied()).collect()))
            .collect(),
        true_scores,
    };
    Ok(SyntheticFamily {
        corpus,
        losses,
        mapped,
        evals,
        task: TaskConfig::new(spec.task_id.clone(), spec.gamma)?,
        truth,
    })
}

/// Agreement between a fitted pipeline and the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    /// Largest |predicted - observed| over val and test models.
    pub max_abs_error_heldout: f64,
    /// MSE over val and test models.
    pub mse_heldout: f64,
    /// Largest gap between fitted and true predictions over all models.
    pub max_prediction_gap: f64,
}

pub fn oracle_fit_check(
    family: &SyntheticFamily,
    params: &ScalingLawParams,
    scorer: &SalienceScorer,
) -> Result<OracleCheck> {
    oracle_fit_check_weights(family, params, &score_weights(scorer, &family.corpus)?)
}

/// [`oracle_fit_check`] for weights that need not come from a scorer.
pub fn oracle_fit_check_weights(
    family: &SyntheticFamily,
    params: &ScalingLawParams,
    weights: &WeightVector,
) -> Result<OracleCheck> {
    let n_chars = family.corpus.n_chars();
    let truth = family.truth.params();
    let (mut max_err, mut sq, mut n, mut max_gap) = (0.0f64, 0.0, 0usize, 0.0f64);
    for eval in &family.evals {
        let Some(m) = family.mapped.get(&eval.model_id) else {
            continue;
        };
        let predicted = params.predict(capability_score(weights, &m.per_sample, n_chars)?);
        let reference = truth.predict(family.truth.true_scores[&eval.model_id]);
        max_gap = max_gap.max((predicted - reference).abs());
        if eval.split != Split::Train {
            let e = predicted - eval.accuracy;
            max_err = max_err.max(e.abs());
            sq += e * e;
            n += 1;
        }
    }
    Ok(OracleCheck {
        max_abs_error_heldout: max_err,
        mse_heldout: if n > 0 { sq / n as f64 } else { 0.0 },
        max_prediction_gap: max_gap,
    })
}
