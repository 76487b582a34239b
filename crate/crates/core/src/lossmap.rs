//! Moves token losses from a model's own tokenizer into the target
//! tokenizer's token space by way of per-character losses.
//!
//! Each source token's loss is divided evenly over the characters it covers;
//! each target token then takes the sum over its characters. The total loss
//! of a sample is conserved.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{check_coverage, Corpus, LossSet, ModelLossRecord, ModelLosses, TokenSpan, ValidationSample};
use crate::error::{Error, Result};

/// One loss per character of a sample, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLossVector(pub Vec<f64>);

impl CharLossVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One loss per target token of a sample, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTokenLosses(pub Vec<f64>);

impl TargetTokenLosses {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A model's target-space losses for every sample of a corpus, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedLosses {
    pub model_id: String,
    pub per_sample: Vec<TargetTokenLosses>,
}

impl MappedLosses {
    pub fn total(&self) -> f64 {
        self.per_sample.iter().map(TargetTokenLosses::total).sum()
    }
}

fn check_losses(token_nll: &[f64]) -> Result<()> {
    match token_nll.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(i) => Err(Error::InvalidValue(format!(
            "token loss #{i} = {} is not a finite non-negative value",
            token_nll[i]
        ))),
        None => Ok(()),
    }
}

/// Spreads each source token's loss uniformly over its characters.
pub fn expand_to_char_losses(
    source_spans: &[TokenSpan],
    token_nll: &[f64],
    n_chars: usize,
) -> Result<CharLossVector> {
    if source_spans.len() != token_nll.len() {
        return Err(Error::Alignment(format!(
            "{} source spans but {} token losses",
            source_spans.len(),
            token_nll.len()
        )));
    }
    check_coverage(source_spans, n_chars).map_err(Error::Coverage)?;
    check_losses(token_nll)?;

    let mut chars = vec![0.0; n_chars];
    for (span, &loss) in source_spans.iter().zip(token_nll) {
        let share = loss / span.len() as f64;
        chars[span.start..span.end].fill(share);
    }
    Ok(CharLossVector(chars))
}

/// Sums character losses over each target token, left to right.
pub fn aggregate_to_target(
    char_losses: &CharLossVector,
    target_spans: &[TokenSpan],
) -> Result<TargetTokenLosses> {
    check_coverage(target_spans, char_losses.len()).map_err(Error::Coverage)?;
    let chars = char_losses.as_slice();
    Ok(TargetTokenLosses(
        target_spans
            .iter()
            .map(|span| chars[span.start..span.end].iter().sum())
            .collect(),
    ))
}

/// Maps one record onto `sample`'s target tokenization.
///
/// A target token whose boundaries coincide with a single source token takes
/// that token's loss verbatim, so identical tokenizations map exactly.
pub fn map_losses(record: &ModelLossRecord, sample: &ValidationSample) -> Result<TargetTokenLosses> {
    if record.sample_id != sample.sample_id {
        return Err(Error::Alignment(format!(
            "record for `{}` applied to sample `{}`",
            record.sample_id, sample.sample_id
        )));
    }
    let n_chars = sample.char_count();
    let chars = expand_to_char_losses(&record.source_spans, &record.token_nll, n_chars)
        .map_err(|e| locate(e, record))?;
    let mut mapped = aggregate_to_target(&chars, &sample.target_spans).map_err(|e| locate(e, record))?;

    let mut src = 0;
    for (j, span) in sample.target_spans.iter().enumerate() {
        while src < record.source_spans.len() && record.source_spans[src].start < span.start {
            src += 1;
        }
        if record.source_spans.get(src) == Some(span) {
            mapped.0[j] = record.token_nll[src];
        }
    }
    Ok(mapped)
}

fn locate(e: Error, record: &ModelLossRecord) -> Error {
    match e {
        Error::Coverage(rule) => Error::invariant(
            format!("{} (model `{}`)", record.sample_id, record.model_id),
            rule,
        ),
        other => other,
    }
}

/// Maps every sample of one complete model.
pub fn map_model(losses: &ModelLosses, corpus: &Corpus) -> Result<MappedLosses> {
    let per_sample = corpus
        .samples()
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let rec = losses.record(i).ok_or_else(|| {
                Error::Insufficient(format!(
                    "model `{}` has no losses for sample `{}`",
                    losses.model_id, sample.sample_id
                ))
            })?;
            map_losses(rec, sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappedLosses {
        model_id: losses.model_id.clone(),
        per_sample,
    })
}

/// Maps all complete models of `losses`, skipping incomplete ones.
///
/// With `threads > 1` models are mapped on a dedicated pool; the result does
/// not depend on the thread count.
pub fn map_all(losses: &LossSet, corpus: &Corpus, threads: usize) -> Result<BTreeMap<String, MappedLosses>> {
    let models: Vec<&ModelLosses> = losses.complete_models().collect();
    let run = || {
        models
            .par_iter()
            .map(|m| map_model(m, corpus))
            .collect::<Result<Vec<_>>>()
    };
    let mapped = if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidValue(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        models
            .iter()
            .map(|m| map_model(m, corpus))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(mapped
        .into_iter()
        .map(|m| (m.model_id.clone(), m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spans(pairs: &[(usize, usize)]) -> Vec<TokenSpan> {
        pairs.iter().map(|&(s, e)| TokenSpan::new(s, e)).collect()
    }

    fn partition(lengths: &[usize]) -> Vec<TokenSpan> {
        let mut start = 0;
        lengths
            .iter()
            .map(|&l| {
                let s = TokenSpan::new(start, start + l);
                start += l;
                s
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn expand_divides_uniformly() {
        let c = expand_to_char_losses(&spans(&[(0, 2), (2, 6)]), &[0.6, 0.8], 6).unwrap();
        assert!(close(c.as_slice(), &[0.3, 0.3, 0.2, 0.2, 0.2, 0.2]));
    }

    #[test]
    fn expand_identity_and_zero() {
        let c = expand_to_char_losses(&spans(&[(0, 1), (1, 2), (2, 3)]), &[0.7, 1.1, 2.9], 3).unwrap();
        assert_eq!(c.as_slice(), &[0.7, 1.1, 2.9]);
        let z = expand_to_char_losses(&spans(&[(0, 2), (2, 3)]), &[0.0, 0.0], 3).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 3]);
    }

    #[test]
    fn expand_rejects_bad_spans() {
        assert!(matches!(
            expand_to_char_losses(&spans(&[(0, 2), (3, 4)]), &[1.0, 1.0], 4),
            Err(Error::Coverage(_))
        ));
        assert!(matches!(
            expand_to_char_losses(&spans(&[(0, 0), (0, 4)]), &[1.0, 1.0], 4),
            Err(Error::Coverage(_))
        ));
        assert!(matches!(
            expand_to_char_losses(&spans(&[(0, 4)]), &[1.0, 1.0], 4),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn aggregate_sums() {
        let c = CharLossVector(vec![0.3, 0.3, 0.2, 0.2, 0.2, 0.2]);
        let t = aggregate_to_target(&c, &spans(&[(0, 3), (3, 6)])).unwrap();
        assert!(close(t.as_slice(), &[0.8, 0.6]));
        let whole = aggregate_to_target(&c, &spans(&[(0, 6)])).unwrap();
        assert!(close(whole.as_slice(), &[1.4]));
        let ones = aggregate_to_target(&c, &partition(&[1; 6])).unwrap();
        assert_eq!(ones.as_slice(), c.as_slice());
        assert!(aggregate_to_target(&c, &spans(&[(0, 5)])).is_err());
    }

    fn sample(text: &str, target: Vec<TokenSpan>) -> ValidationSample {
        ValidationSample {
            sample_id: "s".into(),
            source_tag: "t".into(),
            text: text.into(),
            target_spans: target,
            answer_spans: None,
        }
    }

    fn record(source: Vec<TokenSpan>, nll: Vec<f64>) -> ModelLossRecord {
        ModelLossRecord {
            model_id: "m".into(),
            sample_id: "s".into(),
            source_spans: source,
            token_nll: nll,
        }
    }

    #[test]
    fn end_to_end_example() {
        let s = sample("abcdef", spans(&[(0, 3), (3, 6)]));
        let r = record(spans(&[(0, 2), (2, 6)]), vec![0.6, 0.8]);
        let out = map_losses(&r, &s).unwrap();
        assert!(close(out.as_slice(), &[0.8, 0.6]));
        assert!((out.total() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn identical_tokenization_is_exact() {
        let t = partition(&[3, 1, 7, 2]);
        let nll = vec![0.1, 0.7, 1.0 / 3.0, 2.2];
        let s = sample("abcdefghijklm", t.clone());
        let out = map_losses(&record(t, nll.clone()), &s).unwrap();
        assert_eq!(out.0, nll);
    }

    #[test]
    fn mismatched_sample_rejected() {
        let s = sample("ab", spans(&[(0, 2)]));
        let mut r = record(spans(&[(0, 2)]), vec![1.0]);
        r.sample_id = "other".into();
        assert!(matches!(map_losses(&r, &s), Err(Error::Alignment(_))));
    }

    fn lengths_for(n: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..6, 1..n)
    }

    proptest! {
        #[test]
        fn conservation_and_non_negativity(
            src_lens in lengths_for(40),
            tgt_seed in proptest::collection::vec(1usize..6, 1..80),
            losses in proptest::collection::vec(0.0f64..20.0, 40),
        ) {
            let n: usize = src_lens.iter().sum();
            let mut tgt = Vec::new();
            let mut acc = 0;
            for l in tgt_seed.iter().cycle() {
                if acc >= n { break; }
                let l = (*l).min(n - acc);
                tgt.push(l);
                acc += l;
            }
            let nll: Vec<f64> = losses.iter().copied().cycle().take(src_lens.len()).collect();
            let s = sample(&"x".repeat(n), partition(&tgt));
            let out = map_losses(&record(partition(&src_lens), nll.clone()), &s).unwrap();
            let src_total: f64 = nll.iter().sum();
            prop_assert!((out.total() - src_total).abs() <= 1e-9);
            prop_assert!(out.0.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn refinement_splits_loss(
            src_lens in lengths_for(20),
            losses in proptest::collection::vec(0.0f64..5.0, 20),
            cut in 0usize..1000,
        ) {
            let n: usize = src_lens.iter().sum();
            prop_assume!(n >= 2);
            let nll: Vec<f64> = losses.iter().copied().cycle().take(src_lens.len()).collect();
            let rec = record(partition(&src_lens), nll);
            let cut = 1 + cut % (n - 1);
            let coarse = map_losses(&rec, &sample(&"y".repeat(n), partition(&[n]))).unwrap();
            let fine = map_losses(&rec, &sample(&"y".repeat(n), partition(&[cut, n - cut]))).unwrap();
            prop_assert!(fine.0[0] >= 0.0 && fine.0[1] >= 0.0);
            prop_assert!((fine.0[0] + fine.0[1] - coarse.0[0]).abs() <= 1e-9);
        }
    }
}
