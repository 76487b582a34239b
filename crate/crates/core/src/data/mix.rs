use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, FeatureMatrix, ValidationSample};
use crate::error::{Error, Result};

/// Draws `counts[name]` samples without replacement from each named source
/// and shuffles the union. Sources absent from `counts` contribute nothing.
///
/// The draw depends only on `seed` and the order of `sources`.
pub fn assemble_validation_mix(
    sources: &[(&str, &Corpus)],
    counts: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Corpus> {
    let names: HashSet<&str> = sources.iter().map(|(n, _)| *n).collect();
    if names.len() != sources.len() {
        return Err(Error::Duplicate {
            what: "source name",
            detail: "mix sources must have distinct names".into(),
        });
    }
    if let Some(unknown) = counts.keys().find(|k| !names.contains(k.as_str())) {
        return Err(Error::Unknown {
            what: "mix source",
            id: unknown.clone(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(ValidationSample, FeatureMatrix)> = Vec::new();
    for (name, corpus) in sources {
        let want = counts.get(*name).copied().unwrap_or(0);
        if want > corpus.len() {
            return Err(Error::Insufficient(format!(
                "source `{name}` has {} samples, {want} requested",
                corpus.len()
            )));
        }
        let mut chosen = index::sample(&mut rng, corpus.len(), want).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            picked.push((corpus.samples()[i].clone(), corpus.features()[i].clone()));
        }
    }
    picked.shuffle(&mut rng);

    let (samples, features): (Vec<_>, Vec<_>) = picked.into_iter().unzip();
    Corpus::new(samples, features).map_err(|e| match e {
        Error::Duplicate { what: "sample_id", detail } => Error::Duplicate {
            what: "sample_id after mixing",
            detail,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenSpan;

    fn source(prefix: &str, n: usize) -> Corpus {
        let samples = (0..n)
            .map(|i| ValidationSample {
                sample_id: format!("{prefix}-{i}"),
                source_tag: prefix.to_string(),
                text: "xy".into(),
                target_spans: vec![TokenSpan::new(0, 1), TokenSpan::new(1, 2)],
                answer_spans: None,
            })
            .collect();
        let feats = (0..n)
            .map(|i| FeatureMatrix::new(format!("{prefix}-{i}"), 1, vec![i as f64, 0.5]).unwrap())
            .collect();
        Corpus::new(samples, feats).unwrap()
    }

    #[test]
    fn five_by_hundred_plus_fifty_size() {
        let names = ["mmlu", "bbh", "gsm8k", "hellaswag", "cmmlu", "bbh_cot"];
        let corpora: Vec<Corpus> = names.iter().map(|n| source(n, 120)).collect();
        let sources: Vec<(&str, &Corpus)> = names.iter().copied().zip(corpora.iter()).collect();
        let mut counts: BTreeMap<String, usize> =
            names[..5].iter().map(|n| (n.to_string(), 100)).collect();
        counts.insert("bbh_cot".into(), 50);
        let mixed = assemble_validation_mix(&sources, &counts, 7).unwrap();
        assert_eq!(mixed.len(), 550);
        let cot = mixed
            .samples()
            .iter()
            .filter(|s| s.source_tag == "bbh_cot")
            .count();
        assert_eq!(cot, 50);
    }

    #[test]
    fn zero_count_and_determinism() {
        let a = source("a", 10);
        let b = source("b", 10);
        let sources = [("a", &a), ("b", &b)];
        let counts: BTreeMap<String, usize> = [("a".into(), 0), ("b".into(), 4)].into();
        let m1 = assemble_validation_mix(&sources, &counts, 3).unwrap();
        let m2 = assemble_validation_mix(&sources, &counts, 3).unwrap();
        assert!(m1.samples().iter().all(|s| s.source_tag == "b"));
        assert_eq!(m1.samples(), m2.samples());
        assert_eq!(m1.features(), m2.features());
    }

    #[test]
    fn insufficient_and_duplicates() {
        let a = source("a", 3);
        let counts: BTreeMap<String, usize> = [("a".into(), 4)].into();
        assert!(matches!(
            assemble_validation_mix(&[("a", &a)], &counts, 0),
            Err(Error::Insufficient(_))
        ));
        let a2 = source("a", 3);
        let counts: BTreeMap<String, usize> = [("a".into(), 2), ("a2".into(), 3)].into();
        assert!(matches!(
            assemble_validation_mix(&[("a", &a), ("a2", &a2)], &counts, 0),
            Err(Error::Duplicate { .. })
        ));
    }
}
