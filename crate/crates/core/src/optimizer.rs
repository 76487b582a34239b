//! Alternating optimization of the salience scorer and the downstream law.
//!
//! Each epoch scores the corpus with the current scorer, refits `(alpha,
//! beta)` on the train models with the scorer fixed, records the validation
//! MSE, then takes full-batch gradient steps on the scorer with the law
//! fixed. The scorer and law from the epoch with the lowest validation MSE
//! are returned.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{evals_for_task, Corpus, ModelEval, Split, TaskConfig};
use crate::error::{Error, Result};
use crate::lawfit::{fit_multistart, LmFit, LmFitConfig, ScalingLawParams};
use crate::lossmap::MappedLosses;
use crate::salience::{capability_score, mse_gradient_theta, score_weights, Activation, SalienceScorer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub learning_rate: f64,
    /// Cap on the total number of gradient steps.
    pub max_steps: usize,
    pub sgd_steps_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    pub activation: Activation,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_steps: 300,
            sgd_steps_per_epoch: 1,
            epochs: 300,
            seed: 0,
            early_stop_patience: 50,
            activation: Activation::Sigmoid,
        }
    }
}

impl OptimizationConfig {
    /// A zero learning rate is accepted and freezes the scorer.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidValue(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("max_steps", self.max_steps),
            ("sgd_steps_per_epoch", self.sgd_steps_per_epoch),
            ("epochs", self.epochs),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::InvalidValue(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// How capability scores were computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Csv,
    AllToken,
    LabelToken,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Csv, Method::AllToken, Method::LabelToken];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Csv => "csv",
            Method::AllToken => "all_token",
            Method::LabelToken => "label_token",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Method::Csv),
            "all_token" => Ok(Method::AllToken),
            "label_token" => Ok(Method::LabelToken),
            other => Err(Error::InvalidValue(format!(
                "method `{other}` (expected csv, all_token or label_token)"
            ))),
        }
    }
}

/// One model that has both complete mapped losses and an evaluation.
#[derive(Debug, Clone)]
pub struct ModelEntry<'a> {
    pub model_id: &'a str,
    pub split: Split,
    pub losses: &'a MappedLosses,
    pub accuracy: f64,
}

/// Models usable for one task, sorted by `model_id`.
#[derive(Debug, Clone)]
pub struct TaskDataset<'a> {
    pub task: TaskConfig,
    pub models: Vec<ModelEntry<'a>>,
    /// Evaluated models left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl<'a> TaskDataset<'a> {
    pub fn build(
        mapped: &'a BTreeMap<String, MappedLosses>,
        evals: &'a [ModelEval],
        task: &TaskConfig,
    ) -> Result<Self> {
        task.validate()?;
        let mut models = Vec::new();
        let mut skipped = Vec::new();
        for (model_id, eval) in evals_for_task(evals, &task.task_id) {
            match mapped.get(model_id) {
                Some(losses) => models.push(ModelEntry {
                    model_id,
                    split: eval.split,
                    losses,
                    accuracy: eval.accuracy,
                }),
                None => skipped.push((model_id.to_string(), "no complete loss records".to_string())),
            }
        }
        Ok(Self {
            task: task.clone(),
            models,
            skipped,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ModelEntry<'a>> {
        self.models.iter().filter(move |m| m.split == split)
    }
}

/// Per-model outcome of applying a fitted law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub model_id: String,
    pub split: Split,
    pub score: f64,
    pub predicted: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: Split,
    pub mse: f64,
    pub rows: Vec<PredictionRow>,
}

/// Mean squared error of the rows belonging to `split`, or `None` when the
/// split has no rows.
pub fn split_mse(rows: &[PredictionRow], split: Split) -> Option<f64> {
    let (n, sum) = rows
        .iter()
        .filter(|r| r.split == split)
        .fold((0usize, 0.0), |(n, s), r| {
            let d = r.observed - r.predicted;
            (n + 1, s + d * d)
        });
    (n > 0).then(|| sum / n as f64)
}

/// Applies `params` to precomputed scores of the models in `split`.
pub fn evaluate_scores(params: &ScalingLawParams, rows: &[PredictionRow], split: Split) -> Result<SplitEvaluation> {
    let rows: Vec<PredictionRow> = rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| PredictionRow {
            predicted: params.predict(r.score),
            ..r.clone()
        })
        .collect();
    let mse = split_mse(&rows, split).ok_or_else(|| Error::EmptySplit(split.to_string()))?;
    Ok(SplitEvaluation { split, mse, rows })
}

/// Scores the models of `split` with `scorer` and evaluates `params` on them.
pub fn evaluate_on_split(
    scorer: &SalienceScorer,
    params: &ScalingLawParams,
    corpus: &Corpus,
    dataset: &TaskDataset<'_>,
    split: Split,
) -> Result<SplitEvaluation> {
    let weights = score_weights(scorer, corpus)?;
    let rows = dataset
        .split(split)
        .map(|m| {
            let score = capability_score(&weights, &m.losses.per_sample, corpus.n_chars())?;
            Ok(PredictionRow {
                model_id: m.model_id.to_string(),
                split,
                score,
                predicted: params.predict(score),
                observed: m.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(params, &rows, split)
}

/// A model with its capability score, ready for fitting or reporting.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScoredModel<'a> {
    pub model_id: &'a str,
    pub split: Split,
    pub accuracy: f64,
    pub score: f64,
}

/// A fitted law with per-model predictions, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub task_id: String,
    pub method: Method,
    /// Digest of the corpus the scores were computed on.
    pub corpus_digest: String,
    pub corpus_samples: usize,
    /// `"baseline"` or the scorer checkpoint file name.
    pub scorer: String,
    pub selection_split: Split,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub params: ScalingLawParams,
    pub lm_iterations: usize,
    pub lm_converged: bool,
    pub mse_train: Option<f64>,
    pub mse_val: Option<f64>,
    pub mse_test: Option<f64>,
    pub rows: Vec<PredictionRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl FitReport {
    pub(crate) fn assemble(
        method: Method,
        corpus: &Corpus,
        task_id: &str,
        scored: &[ScoredModel<'_>],
        skipped: &[(String, String)],
        fit: &LmFit,
        scorer: String,
    ) -> Self {
        let rows: Vec<PredictionRow> = scored
            .iter()
            .map(|m| PredictionRow {
                model_id: m.model_id.to_string(),
                split: m.split,
                score: m.score,
                predicted: fit.params.predict(m.score),
                observed: m.accuracy,
            })
            .collect();
        let mut notes: Vec<String> = skipped
            .iter()
            .map(|(m, why)| format!("skipped `{m}`: {why}"))
            .collect();
        if !fit.converged {
            notes.push("law fit stopped at max_iters before converging".into());
        }
        if fit.below_floor > 0 {
            notes.push(format!("{} train accuracies below gamma", fit.below_floor));
        }
        Self {
            task_id: task_id.to_string(),
            method,
            corpus_digest: corpus.digest(),
            corpus_samples: corpus.len(),
            scorer,
            selection_split: Split::Val,
            best_epoch: None,
            epochs_run: 0,
            params: fit.params,
            lm_iterations: fit.iterations,
            lm_converged: fit.converged,
            mse_train: split_mse(&rows, Split::Train),
            mse_val: split_mse(&rows, Split::Val),
            mse_test: split_mse(&rows, Split::Test),
            rows,
            notes,
        }
    }

    pub fn mse(&self, split: Split) -> Option<f64> {
        match split {
            Split::Train => self.mse_train,
            Split::Val => self.mse_val,
            Split::Test => self.mse_test,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mse_train: f64,
    pub mse_val: f64,
}

/// `epoch,mse_train,mse_val` with a header row.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mse_train,mse_val\n");
    for r in trace {
        let _ = writeln!(out, "{},{:e},{:e}", r.epoch, r.mse_train, r.mse_val);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub report: FitReport,
    pub scorer: SalienceScorer,
    pub trace: Vec<EpochRecord>,
}

fn scores_for<'e>(
    weights: &crate::salience::WeightVector,
    corpus: &Corpus,
    entries: impl Iterator<Item = &'e ModelEntry<'e>>,
) -> Result<Vec<f64>> {
    entries
        .map(|m| capability_score(weights, &m.losses.per_sample, corpus.n_chars()))
        .collect()
}

/// Runs the alternating loop for one task.
///
/// Models are processed in `model_id` order and the loop has no random
/// choices, so identical inputs give identical outputs.
pub fn run_alternating_optimization(
    corpus: &Corpus,
    dataset: &TaskDataset<'_>,
    config: &OptimizationConfig,
    lm: &LmFitConfig,
) -> Result<Optimized> {
    config.validate()?;
    lm.validate()?;
    let train: Vec<&ModelEntry<'_>> = dataset.split(Split::Train).collect();
    let val: Vec<&ModelEntry<'_>> = dataset.split(Split::Val).collect();
    if train.len() < 3 {
        return Err(Error::Insufficient(format!(
            "task `{}` has {} complete train models, need 3",
            dataset.task.task_id,
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let train_losses: Vec<&MappedLosses> = train.iter().map(|m| m.losses).collect();
    let train_acc: Vec<f64> = train.iter().map(|m| m.accuracy).collect();
    let gamma = dataset.task.gamma;

    let mut scorer = SalienceScorer::zeros(corpus.feature_dim(), config.activation);
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, SalienceScorer, LmFit)> = None;
    let mut notes = Vec::new();
    let mut steps_done = 0;

    for epoch in 0..config.epochs {
        let weights = score_weights(&scorer, corpus)?;
        let train_scores = scores_for(&weights, corpus, train.iter().copied())?;
        let fit = match fit_multistart(&train_scores, &train_acc, gamma, lm) {
            Ok(fit) => fit,
            Err(e) if epoch == 0 => {
                return Err(Error::FitFailed(format!(
                    "law fit on the initial scorer failed for task `{}`: {e}",
                    dataset.task.task_id
                )))
            }
            Err(e) => {
                notes.push(format!("stopped at epoch {epoch}: {e}"));
                break;
            }
        };
        let val_scores = scores_for(&weights, corpus, val.iter().copied())?;
        let mse_val = val_scores
            .iter()
            .zip(&val)
            .map(|(&c, m)| {
                let d = m.accuracy - fit.params.predict(c);
                d * d
            })
            .sum::<f64>()
            / val.len() as f64;
        trace.push(EpochRecord {
            epoch,
            mse_train: fit.mse,
            mse_val,
        });

        let improved = best.as_ref().is_none_or(|(_, b, _, _)| mse_val < *b);
        if improved {
            best = Some((epoch, mse_val, scorer.clone(), fit.clone()));
        } else if epoch - best.as_ref().unwrap().0 >= config.early_stop_patience {
            notes.push(format!("early stop at epoch {epoch}"));
            break;
        }
        if epoch + 1 == config.epochs || steps_done >= config.max_steps {
            break;
        }

        for _ in 0..config.sgd_steps_per_epoch {
            if steps_done >= config.max_steps {
                break;
            }
            let grad = mse_gradient_theta(&scorer, corpus, &train_losses, &fit.params, &train_acc)?;
            scorer.step(&grad, config.learning_rate);
            steps_done += 1;
        }
    }

    let (best_epoch, _, best_scorer, best_fit) = best.expect("epoch 0 always records");
    let weights = score_weights(&best_scorer, corpus)?;
    let scores = scores_for(&weights, corpus, dataset.models.iter())?;
    let scored: Vec<ScoredModel<'_>> = dataset
        .models
        .iter()
        .zip(&scores)
        .map(|(m, &score)| ScoredModel {
            model_id: m.model_id,
            split: m.split,
            accuracy: m.accuracy,
            score,
        })
        .collect();
    let mut report = FitReport::assemble(
        Method::Csv,
        corpus,
        &dataset.task.task_id,
        &scored,
        &dataset.skipped,
        &best_fit,
        "scorer.json".into(),
    );
    report.best_epoch = Some(best_epoch);
    report.epochs_run = trace.len();
    report.notes.extend(notes);
    Ok(Optimized {
        report,
        scorer: best_scorer,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(split: Split, predicted: f64, observed: f64) -> PredictionRow {
        PredictionRow {
            model_id: "m".into(),
            split,
            score: predicted,
            predicted,
            observed,
        }
    }

    #[test]
    fn split_mse_examples() {
        let rows = [
            row(Split::Test, 0.5, 0.5),
            row(Split::Test, 0.2, 0.2),
            row(Split::Train, 0.0, 1.0),
        ];
        assert_eq!(split_mse(&rows, Split::Test), Some(0.0));
        assert_eq!(split_mse(&rows, Split::Train), Some(1.0));
        assert_eq!(split_mse(&rows, Split::Val), None);
    }

    #[test]
    fn constant_predictor_gives_variance() {
        let observed = [0.2, 0.4, 0.9, 0.5];
        let mean = observed.iter().sum::<f64>() / 4.0;
        let var = observed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        let rows: Vec<_> = observed.iter().map(|&a| row(Split::Test, mean, a)).collect();
        assert!((split_mse(&rows, Split::Test).unwrap() - var).abs() < 1e-15);
    }

    #[test]
    fn empty_split_is_an_error() {
        let p = ScalingLawParams::new(-1.0, 0.0, 0.0);
        assert!(matches!(
            evaluate_scores(&p, &[row(Split::Train, 0.1, 0.1)], Split::Test),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn config_checks() {
        assert!(OptimizationConfig::default().validate().is_ok());
        let frozen = OptimizationConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(frozen.validate().is_ok());
        let bad = OptimizationConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizationConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!(serde_json::to_string(&Method::AllToken).unwrap(), "\"all_token\"");
    }

    #[test]
    fn trace_format() {
        let t = [EpochRecord {
            epoch: 0,
            mse_train: 0.25,
            mse_val: 1e-7,
        }];
        assert_eq!(trace_csv(&t), "epoch,mse_train,mse_val\n0,2.5e-1,1e-7\n");
    }
}
