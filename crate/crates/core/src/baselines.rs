//! Comparison scores fitted through the same law: the character-normalized
//! loss over all tokens, and the mean loss over correct-answer characters.

use std::collections::BTreeMap;

use crate::data::{evals_for_task, Corpus, LossSet, ModelEval, TaskConfig, ValidationSample};
use crate::error::{Error, Result};
use crate::lawfit::{fit_multistart, LmFitConfig};
use crate::lossmap::{expand_to_char_losses, CharLossVector, MappedLosses};
use crate::optimizer::{FitReport, Method, ScoredModel};
use crate::salience::{capability_score, WeightVector};

/// Capability score of every model under a constant weight of 1.
pub fn all_token_scores(mapped: &BTreeMap<String, MappedLosses>, corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    let ones = WeightVector::constant(corpus, 1.0);
    mapped
        .iter()
        .map(|(id, m)| Ok((id.clone(), capability_score(&ones, &m.per_sample, corpus.n_chars())?)))
        .collect()
}

fn annotated(sample: &ValidationSample) -> bool {
    sample.answer_spans.as_ref().is_some_and(|a| !a.is_empty())
}

/// Label-token score of one model plus the ids of samples left out for
/// lacking answer spans.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTokenScore {
    pub score: f64,
    pub used: usize,
    pub excluded: Vec<String>,
}

/// Mean over annotated samples of the mean character loss inside the answer
/// spans.
pub fn label_token_score(char_losses: &[CharLossVector], samples: &[ValidationSample]) -> Result<LabelTokenScore> {
    if char_losses.len() != samples.len() {
        return Err(Error::Alignment(format!(
            "{} character loss vectors for {} samples",
            char_losses.len(),
            samples.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for (chars, sample) in char_losses.iter().zip(samples) {
        if !annotated(sample) {
            excluded.push(sample.sample_id.clone());
            continue;
        }
        let spans = sample.answer_spans.as_deref().unwrap_or_default();
        let mut sum = 0.0;
        let mut count = 0;
        for span in spans {
            let Some(slice) = chars.as_slice().get(span.start..span.end) else {
                return Err(Error::Alignment(format!(
                    "answer span {span} outside sample `{}` of {} chars",
                    sample.sample_id,
                    chars.len()
                )));
            };
            sum += slice.iter().sum::<f64>();
            count += slice.len();
        }
        total += sum / count as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Insufficient("no sample carries answer spans".into()));
    }
    Ok(LabelTokenScore {
        score: total / used as f64,
        used,
        excluded,
    })
}

/// Label-token scores for every complete model, plus the excluded sample ids
/// (the same for every model).
pub fn label_token_scores(losses: &LossSet, corpus: &Corpus) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
    let mut scores = BTreeMap::new();
    let mut excluded = Vec::new();
    for model in losses.complete_models() {
        let chars = model
            .records()
            .iter()
            .zip(corpus.samples())
            .map(|(r, s)| {
                let r = r.as_ref().expect("complete model");
                expand_to_char_losses(&r.source_spans, &r.token_nll, s.char_count())
            })
            .collect::<Result<Vec<_>>>()?;
        let out = label_token_score(&chars, corpus.samples())?;
        scores.insert(model.model_id.clone(), out.score);
        excluded = out.excluded;
    }
    Ok((scores, excluded))
}

/// Fits the law to precomputed scores on the train models of `task`.
///
/// Models evaluated on the task but missing from `scores` are listed in the
/// report notes.
pub fn fit_baseline(
    method: Method,
    scores: &BTreeMap<String, f64>,
    evals: &[ModelEval],
    task: &TaskConfig,
    corpus: &Corpus,
    lm: &LmFitConfig,
) -> Result<FitReport> {
    task.validate()?;
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for (model_id, eval) in evals_for_task(evals, &task.task_id) {
        match scores.get(model_id) {
            Some(&score) => scored.push(ScoredModel {
                model_id,
                split: eval.split,
                accuracy: eval.accuracy,
                score,
            }),
            None => skipped.push((model_id.to_string(), "no score".to_string())),
        }
    }
    let (train_scores, train_acc): (Vec<f64>, Vec<f64>) = scored
        .iter()
        .filter(|m| m.split == crate::data::Split::Train)
        .map(|m| (m.score, m.accuracy))
        .unzip();
    let fit = fit_multistart(&train_scores, &train_acc, task.gamma, lm)?;
    Ok(FitReport::assemble(
        method,
        corpus,
        &task.task_id,
        &scored,
        &skipped,
        &fit,
        "baseline".into(),
    ))
}
