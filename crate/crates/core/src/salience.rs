//! Per-token salience weights and the weighted capability score.
//!
//! The scorer is one linear layer with a bounded or positive activation over
//! frozen per-token features. It is model-independent: the same weights are
//! applied to every model's mapped losses. The capability score of a model is
//! its weighted NLL summed over all target tokens, divided by the corpus
//! character count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::lawfit::ScalingLawParams;
use crate::lossmap::{MappedLosses, TargetTokenLosses};
use crate::numeric::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Weights in (0, 1).
    #[default]
    Sigmoid,
    /// Weights in (0, inf).
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::InvalidValue(format!("activation `{other}`"))),
        }
    }
}

/// Trainable scoring head: `w = activation(theta . h + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceScorer {
    theta: Vec<f64>,
    bias: f64,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    d: usize,
    activation: Activation,
    bias: f64,
    theta: Vec<f64>,
}

impl SalienceScorer {
    pub fn new(theta: Vec<f64>, bias: f64, activation: Activation) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Dimension("scorer needs d >= 1".into()));
        }
        if !bias.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("scorer parameters must be finite".into()));
        }
        Ok(Self {
            theta,
            bias,
            activation,
        })
    }

    /// All-zero parameters: every token gets `activation(0)`.
    pub fn zeros(dim: usize, activation: Activation) -> Self {
        Self {
            theta: vec![0.0; dim.max(1)],
            bias: 0.0,
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[inline]
    pub fn pre_activation(&self, features: &[f64]) -> f64 {
        self.theta
            .iter()
            .zip(features)
            .fold(self.bias, |acc, (t, h)| acc + t * h)
    }

    #[inline]
    pub fn weight(&self, features: &[f64]) -> f64 {
        self.activation.apply(self.pre_activation(features))
    }

    /// Plain gradient step `params -= learning_rate * grad`.
    pub fn step(&mut self, grad: &ScorerGradient, learning_rate: f64) {
        for (t, g) in self.theta.iter_mut().zip(&grad.theta) {
            *t -= learning_rate * g;
        }
        self.bias -= learning_rate * grad.bias;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint {
            d: self.dim(),
            activation: self.activation,
            bias: self.bias,
            theta: self.theta.clone(),
        })
        .expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<scorer>".into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.d != ck.theta.len() {
            return Err(Error::Dimension(format!(
                "checkpoint says d={} but theta has {} values",
                ck.d,
                ck.theta.len()
            )));
        }
        Self::new(ck.theta, ck.bias, ck.activation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    fn check_dim(&self, corpus: &Corpus) -> Result<()> {
        if corpus.feature_dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "scorer has d={}, corpus features have d={}",
                self.dim(),
                corpus.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Salience weights, one vector per sample aligned with its target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub per_sample: Vec<Vec<f64>>,
}

impl WeightVector {
    /// Every token of `corpus` gets `value`.
    pub fn constant(corpus: &Corpus, value: f64) -> Self {
        Self {
            per_sample: corpus
                .samples()
                .iter()
                .map(|s| vec![value; s.token_count()])
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_sample.iter().flatten().copied()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            per_sample: self
                .per_sample
                .iter()
                .map(|w| w.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

/// Applies the scorer to every target token of the corpus.
pub fn score_weights(scorer: &SalienceScorer, corpus: &Corpus) -> Result<WeightVector> {
    scorer.check_dim(corpus)?;
    let per_sample = corpus
        .features()
        .iter()
        .map(|fm| {
            fm.iter_rows()
                .enumerate()
                .map(|(i, row)| {
                    let w = scorer.weight(row);
                    if w.is_finite() {
                        Ok(w)
                    } else {
                        Err(Error::NonFinite(format!(
                            "weight of token {i} in sample `{}`",
                            fm.sample_id
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightVector { per_sample })
}

/// `(1 / n_chars) * sum_s sum_i w[s][i] * loss[s][i]`, accumulated in corpus
/// order.
pub fn capability_score(weights: &WeightVector, mapped: &[TargetTokenLosses], n_chars: usize) -> Result<f64> {
    if n_chars == 0 {
        return Err(Error::InvalidValue("n_chars must be positive".into()));
    }
    if weights.per_sample.len() != mapped.len() {
        return Err(Error::Alignment(format!(
            "{} weight vectors for {} loss vectors",
            weights.per_sample.len(),
            mapped.len()
        )));
    }
    let mut total = 0.0;
    for (s, (w, l)) in weights.per_sample.iter().zip(mapped).enumerate() {
        if w.len() != l.0.len() {
            return Err(Error::Alignment(format!(
                "sample #{s}: {} weights for {} token losses",
                w.len(),
                l.0.len()
            )));
        }
        for (wi, li) in w.iter().zip(&l.0) {
            total += wi * li;
        }
    }
    Ok(total / n_chars as f64)
}

/// Gradient of `sum_m (predicted_m - observed_m)^2` with respect to the
/// scorer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerGradient {
    pub theta: Vec<f64>,
    pub bias: f64,
    /// Objective value at the evaluation point.
    pub objective: f64,
}

impl ScorerGradient {
    pub fn norm(&self) -> f64 {
        (self.theta.iter().map(|g| g * g).sum::<f64>() + self.bias * self.bias).sqrt()
    }
}

/// Sum of squared prediction errors over `models` for a fixed law.
pub fn squared_error_objective(
    scorer: &SalienceScorer,
    corpus: &Corpus,
    models: &[&MappedLosses],
    params: &ScalingLawParams,
    observed: &[f64],
) -> Result<f64> {
    let weights = score_weights(scorer, corpus)?;
    let mut total = 0.0;
    for (m, &obs) in models.iter().zip(observed) {
        let c = capability_score(&weights, &m.per_sample, corpus.n_chars())?;
        let r = params.predict(c) - obs;
        total += r * r;
    }
    Ok(total)
}

/// Analytic gradient of the squared-error objective, chaining
/// d(pred)/dC, dC/dw = loss / n_chars and dw/d(theta, bias) through the
/// activation. Models are accumulated in the order given.
pub fn mse_gradient_theta(
    scorer: &SalienceScorer,
    corpus: &Corpus,
    models: &[&MappedLosses],
    params: &ScalingLawParams,
    observed: &[f64],
) -> Result<ScorerGradient> {
    if models.len() != observed.len() {
        return Err(Error::Alignment(format!(
            "{} models but {} observed accuracies",
            models.len(),
            observed.len()
        )));
    }
    scorer.check_dim(corpus)?;
    let n_chars = corpus.n_chars() as f64;
    let weights = score_weights(scorer, corpus)?;

    // per-model coefficient 2 * r_m * dA/dC_m / n_chars
    let mut coef = Vec::with_capacity(models.len());
    let mut objective = 0.0;
    for (m, &obs) in models.iter().zip(observed) {
        let c = capability_score(&weights, &m.per_sample, corpus.n_chars())?;
        let r = params.predict(c) - obs;
        let k = 2.0 * r * params.d_predict_d_score(c) / n_chars;
        if !k.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient coefficient of model `{}` (score {c})",
                m.model_id
            )));
        }
        objective += r * r;
        coef.push(k);
    }

    let mut grad_theta = vec![0.0; scorer.dim()];
    let mut grad_bias = 0.0;
    for (s, fm) in corpus.features().iter().enumerate() {
        for (i, row) in fm.iter_rows().enumerate() {
            let mut g = 0.0;
            for (m, k) in models.iter().zip(&coef) {
                g += k * m.per_sample[s].0[i];
            }
            let factor = g * scorer.activation.derivative(scorer.pre_activation(row));
            if !factor.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient at token {i} of sample `{}`",
                    fm.sample_id
                )));
            }
            for (acc, h) in grad_theta.iter_mut().zip(row) {
                *acc += factor * h;
            }
            grad_bias += factor;
        }
    }
    Ok(ScorerGradient {
        theta: grad_theta,
        bias: grad_bias,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMatrix, TokenSpan, ValidationSample};

    fn corpus_from(features: &[&[f64]], dim: usize, chars_per_token: usize) -> Corpus {
        let n = features.len();
        let sample = ValidationSample {
            sample_id: "s".into(),
            source_tag: "t".into(),
            text: "x".repeat(n * chars_per_token),
            target_spans: (0..n)
                .map(|i| TokenSpan::new(i * chars_per_token, (i + 1) * chars_per_token))
                .collect(),
            answer_spans: None,
        };
        let data = features.concat();
        assert_eq!(data.len(), n * dim);
        Corpus::new(vec![sample], vec![FeatureMatrix::new("s", dim, data).unwrap()]).unwrap()
    }

    #[test]
    fn weights_examples() {
        let corpus = corpus_from(&[&[1.0, 0.0], &[-3.0, 2.0]], 2, 1);
        let zero = SalienceScorer::zeros(2, Activation::Sigmoid);
        assert!(score_weights(&zero, &corpus).unwrap().iter().all(|w| w == 0.5));

        let forced = SalienceScorer::new(vec![2.0, 5.0], -2.0, Activation::Sigmoid).unwrap();
        assert_eq!(score_weights(&forced, &corpus).unwrap().per_sample[0][0], 0.5);

        let high = SalienceScorer::new(vec![0.0, 0.0], 10.0, Activation::Sigmoid).unwrap();
        for w in score_weights(&high, &corpus).unwrap().iter() {
            assert!((w - 0.999_954_602_131_297_6).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let corpus = corpus_from(&[&[1.0, 0.0]], 2, 1);
        let s = SalienceScorer::zeros(3, Activation::Sigmoid);
        assert!(matches!(score_weights(&s, &corpus), Err(Error::Dimension(_))));
    }

    #[test]
    fn capability_examples() {
        let ones = WeightVector {
            per_sample: vec![vec![1.0, 1.0]],
        };
        let losses = [TargetTokenLosses(vec![0.5, 1.5])];
        assert_eq!(capability_score(&ones, &losses, 4).unwrap(), 0.5);
        assert_eq!(capability_score(&ones.scaled(0.0), &losses, 4).unwrap(), 0.0);
        let w = WeightVector {
            per_sample: vec![vec![2.0, 0.0]],
        };
        assert_eq!(capability_score(&w, &losses, 4).unwrap(), 0.25);
        let short = WeightVector {
            per_sample: vec![vec![1.0]],
        };
        assert!(matches!(
            capability_score(&short, &losses, 4),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = SalienceScorer::new(vec![0.1, -1.0 / 3.0, 1e-300], 2.5e-7, Activation::Softplus).unwrap();
        let back = SalienceScorer::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        let bad = r#"{"d": 2, "activation": "sigmoid", "bias": 0.0, "theta": [1.0]}"#;
        assert!(SalienceScorer::from_json(bad).is_err());
    }

    #[test]
    fn zero_gradient_at_perfect_fit() {
        let corpus = corpus_from(&[&[0.3], &[-0.7]], 1, 2);
        let scorer = SalienceScorer::new(vec![0.4], 0.1, Activation::Sigmoid).unwrap();
        let params = ScalingLawParams::new(-3.0, 0.5, 0.25);
        let a = MappedLosses {
            model_id: "a".into(),
            per_sample: vec![TargetTokenLosses(vec![1.0, 2.0])],
        };
        let b = MappedLosses {
            model_id: "b".into(),
            per_sample: vec![TargetTokenLosses(vec![0.2, 0.9])],
        };
        let w = score_weights(&scorer, &corpus).unwrap();
        let observed: Vec<f64> = [&a, &b]
            .iter()
            .map(|m| params.predict(capability_score(&w, &m.per_sample, 4).unwrap()))
            .collect();
        let g = mse_gradient_theta(&scorer, &corpus, &[&a, &b], &params, &observed).unwrap();
        assert_eq!(g.theta, vec![0.0]);
        assert_eq!(g.bias, 0.0);
        assert_eq!(g.objective, 0.0);
    }

    #[test]
    fn single_token_closed_form() {
        // one model, one token of 2 chars, d = 1
        let h = 0.8;
        let (theta, bias) = (0.5, -0.2);
        let loss = 1.7;
        let (alpha, beta, gamma) = (-2.0, 0.3, 0.25);
        let observed = 0.4;
        let corpus = corpus_from(&[&[h]], 1, 2);
        let scorer = SalienceScorer::new(vec![theta], bias, Activation::Sigmoid).unwrap();
        let params = ScalingLawParams::new(alpha, beta, gamma);
        let m = MappedLosses {
            model_id: "m".into(),
            per_sample: vec![TargetTokenLosses(vec![loss])],
        };
        let g = mse_gradient_theta(&scorer, &corpus, &[&m], &params, &[observed]).unwrap();

        // the four chain factors written out by hand
        let pre: f64 = theta * h + bias;
        let w = 1.0 / (1.0 + (-pre).exp());
        let c = w * loss / 2.0;
        let z = alpha * (c - beta);
        let sz = 1.0 / (1.0 + (-z).exp());
        let pred = gamma + (1.0 - gamma) * sz;
        let d_obj_d_pred = 2.0 * (pred - observed);
        let d_pred_d_c = (1.0 - gamma) * alpha * sz * (1.0 - sz);
        let d_c_d_w = loss / 2.0;
        let d_w_d_pre = w * (1.0 - w);
        let expected_bias = d_obj_d_pred * d_pred_d_c * d_c_d_w * d_w_d_pre;
        let expected_theta = expected_bias * h;
        assert!((g.bias - expected_bias).abs() <= 1e-15 * expected_bias.abs().max(1.0));
        assert!((g.theta[0] - expected_theta).abs() <= 1e-15 * expected_theta.abs().max(1.0));
    }
}
