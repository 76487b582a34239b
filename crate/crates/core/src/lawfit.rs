//! Sigmoid downstream law `A = gamma + (1 - gamma) * sigmoid(alpha * (C - beta))`
//! and its least-squares fit by Levenberg-Marquardt.
//!
//! `gamma` is the random-guess floor of the task and is never fitted. The
//! damping term is scaled by `diag(J^T J)` (Marquardt's variant), which
//! makes the iterates equivariant under an affine change of the score axis.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{median, min_max, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLawParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ScalingLawParams {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// Predicted accuracy for capability score `score`.
    #[inline]
    pub fn predict(&self, score: f64) -> f64 {
        self.gamma + (1.0 - self.gamma) * sigmoid(self.alpha * (score - self.beta))
    }

    #[inline]
    pub fn d_predict_d_score(&self, score: f64) -> f64 {
        let s = sigmoid(self.alpha * (score - self.beta));
        (1.0 - self.gamma) * s * (1.0 - s) * self.alpha
    }

    /// Partial derivatives of the prediction with respect to `(alpha, beta)`.
    #[inline]
    pub fn d_predict_d_params(&self, score: f64) -> (f64, f64) {
        let s = sigmoid(self.alpha * (score - self.beta));
        let k = (1.0 - self.gamma) * s * (1.0 - s);
        (k * (score - self.beta), -k * self.alpha)
    }

    /// Parameters giving identical predictions on scores `scale * C + shift`.
    pub fn reparameterized(&self, scale: f64, shift: f64) -> Self {
        Self {
            alpha: self.alpha / scale,
            beta: scale * self.beta + shift,
            gamma: self.gamma,
        }
    }
}

/// Prediction of `params` at `score`.
pub fn predict_accuracy(params: &ScalingLawParams, score: f64) -> f64 {
    params.predict(score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmFitConfig {
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_iters: usize,
    pub param_tol: f64,
    pub mse_rel_tol: f64,
}

impl Default for LmFitConfig {
    fn default() -> Self {
        Self {
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iters: 200,
            param_tol: 1e-10,
            mse_rel_tol: 1e-12,
        }
    }
}

impl LmFitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("damping_init", self.damping_init),
            ("damping_up", self.damping_up),
            ("damping_down", self.damping_down),
            ("param_tol", self.param_tol),
            ("mse_rel_tol", self.mse_rel_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!("{name} = {v} must be positive")));
            }
        }
        if self.damping_up <= 1.0 || self.damping_down <= 1.0 {
            return Err(Error::InvalidValue(
                "damping_up and damping_down must exceed 1".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidValue("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmFit {
    pub params: ScalingLawParams,
    /// Mean squared residual at `params`.
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// MSE at the start point and after every accepted step.
    pub mse_trace: Vec<f64>,
    /// Observations below `gamma`; they are fitted as-is.
    pub below_floor: usize,
}

fn mse_at(params: &ScalingLawParams, scores: &[f64], observed: &[f64]) -> f64 {
    let sum: f64 = scores
        .iter()
        .zip(observed)
        .map(|(&c, &a)| {
            let r = params.predict(c) - a;
            r * r
        })
        .sum();
    sum / scores.len() as f64
}

fn check_inputs(scores: &[f64], observed: &[f64], gamma: f64) -> Result<()> {
    if scores.len() != observed.len() {
        return Err(Error::Alignment(format!(
            "{} scores but {} observations",
            scores.len(),
            observed.len()
        )));
    }
    if scores.len() < 3 {
        return Err(Error::Insufficient(format!(
            "law fitting needs at least 3 models, got {}",
            scores.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidValue(format!("gamma {gamma} outside [0, 1)")));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("capability score #{i}")));
    }
    if let Some(i) = observed.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidValue(format!(
            "observed accuracy #{i} = {} outside [0, 1]",
            observed[i]
        )));
    }
    let (lo, hi) = min_max(scores).unwrap();
    if hi <= lo {
        return Err(Error::Unidentifiable(format!("all capability scores equal {lo}")));
    }
    let (alo, ahi) = min_max(observed).unwrap();
    if ahi <= alo {
        return Err(Error::Unidentifiable(format!("all observed accuracies equal {alo}")));
    }
    Ok(())
}

/// Default start point: midpoint at the median score, slope magnitude
/// `4 / range(scores)` with the given sign.
pub fn default_init(scores: &[f64], sign: f64) -> (f64, f64) {
    let (lo, hi) = min_max(scores).unwrap_or((0.0, 1.0));
    (sign * 4.0 / (hi - lo), median(scores))
}

/// Fits `(alpha, beta)` for fixed `gamma` by minimizing the mean squared
/// residual. Steps are accepted only when they lower the MSE, so the
/// returned parameters are the best encountered.
pub fn fit_levenberg_marquardt(
    scores: &[f64],
    observed: &[f64],
    gamma: f64,
    config: &LmFitConfig,
    init: Option<(f64, f64)>,
) -> Result<LmFit> {
    config.validate()?;
    check_inputs(scores, observed, gamma)?;
    let (a0, b0) = init.unwrap_or_else(|| default_init(scores, -1.0));
    if !(a0.is_finite() && b0.is_finite()) {
        return Err(Error::InvalidValue(format!("initial point ({a0}, {b0}) is not finite")));
    }

    let below_floor = observed.iter().filter(|&&a| a < gamma).count();
    let mut params = ScalingLawParams::new(a0, b0, gamma);
    let mut mse = mse_at(&params, scores, observed);
    let mut trace = vec![mse];
    let mut lambda = config.damping_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        if mse == 0.0 {
            converged = true;
            break;
        }

        // normal equations J^T J and gradient J^T r
        let (mut h_aa, mut h_ab, mut h_bb, mut g_a, mut g_b) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&c, &a) in scores.iter().zip(observed) {
            let r = params.predict(c) - a;
            let (ja, jb) = params.d_predict_d_params(c);
            h_aa += ja * ja;
            h_ab += ja * jb;
            h_bb += jb * jb;
            g_a += ja * r;
            g_b += jb * r;
        }
        let diag_a = h_aa.max(f64::MIN_POSITIVE);
        let diag_b = h_bb.max(f64::MIN_POSITIVE);

        let mut accepted = None;
        while lambda < 1e30 {
            let a11 = h_aa + lambda * diag_a;
            let a22 = h_bb + lambda * diag_b;
            let det = a11 * a22 - h_ab * h_ab;
            if det.is_finite() && det > 0.0 {
                let da = -(a22 * g_a - h_ab * g_b) / det;
                let db = -(a11 * g_b - h_ab * g_a) / det;
                let trial = ScalingLawParams::new(params.alpha + da, params.beta + db, gamma);
                let trial_mse = mse_at(&trial, scores, observed);
                if trial_mse.is_finite() && trial_mse < mse {
                    accepted = Some((trial, trial_mse, da, db));
                    break;
                }
            }
            lambda *= config.damping_up;
        }

        let Some((trial, trial_mse, da, db)) = accepted else {
            // no descent direction left at working precision
            converged = true;
            break;
        };
        lambda = (lambda / config.damping_down).max(1e-300);
        // alpha step relative to alpha, beta step in units of the sigmoid width
        let small_step = (da / trial.alpha).abs() <= config.param_tol
            && (db * trial.alpha).abs() <= config.param_tol;
        let decrease = mse - trial_mse;
        params = trial;
        mse = trial_mse;
        trace.push(mse);
        if small_step || decrease <= config.mse_rel_tol * (mse + decrease)
        {
            converged = true;
            break;
        }
    }

    if !(params.alpha.is_finite() && params.beta.is_finite()) || params.alpha == 0.0 {
        return Err(Error::FitFailed(format!(
            "fit ended at alpha={}, beta={}",
            params.alpha, params.beta
        )));
    }
    Ok(LmFit {
        params,
        mse,
        iterations,
        converged,
        mse_trace: trace,
        below_floor,
    })
}

/// Runs the fitter from a negative- and a positive-slope start and keeps the
/// lower-MSE result (the negative start wins ties).
pub fn fit_multistart(scores: &[f64], observed: &[f64], gamma: f64, config: &LmFitConfig) -> Result<LmFit> {
    check_inputs(scores, observed, gamma)?;
    let neg = fit_levenberg_marquardt(scores, observed, gamma, config, Some(default_init(scores, -1.0)));
    let pos = fit_levenberg_marquardt(scores, observed, gamma, config, Some(default_init(scores, 1.0)));
    match (neg, pos) {
        (Ok(n), Ok(p)) => Ok(if p.mse < n.mse { p } else { n }),
        (Ok(n), Err(_)) => Ok(n),
        (Err(_), Ok(p)) => Ok(p),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Contents of a fitted-params file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedParams {
    pub task_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mse_train: f64,
    pub iters: usize,
    pub converged: bool,
}

impl FittedParams {
    pub fn from_fit(task_id: impl Into<String>, fit: &LmFit) -> Self {
        Self {
            task_id: task_id.into(),
            alpha: fit.params.alpha,
            beta: fit.params.beta,
            gamma: fit.params.gamma,
            mse_train: fit.mse,
            iters: fit.iterations,
            converged: fit.converged,
        }
    }

    pub fn params(&self) -> ScalingLawParams {
        ScalingLawParams::new(self.alpha, self.beta, self.gamma)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prediction_examples() {
        assert_eq!(ScalingLawParams::new(3.7, 2.0, 0.25).predict(2.0), 0.625);
        assert_eq!(ScalingLawParams::new(1.0, 0.0, 0.0).predict(0.0), 0.5);
        let p = ScalingLawParams::new(1.0, 0.0, 0.0).predict(2.0);
        assert!((p - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn saturates_without_nan() {
        let p = ScalingLawParams::new(1.0, 0.0, 0.25);
        assert_eq!(p.predict(1e6), 1.0);
        assert_eq!(p.predict(-1e6), 0.25);
    }

    #[test]
    fn recovers_noise_free_law() {
        let truth = ScalingLawParams::new(-4.0, 1.0, 0.25);
        let scores: Vec<f64> = (0..=8).map(|i| i as f64 * 0.25).collect();
        let observed: Vec<f64> = scores.iter().map(|&c| truth.predict(c)).collect();
        let fit = fit_levenberg_marquardt(&scores, &observed, 0.25, &LmFitConfig::default(), None).unwrap();
        assert!(fit.converged);
        assert!(((fit.params.alpha - truth.alpha) / truth.alpha).abs() < 1e-6);
        assert!(((fit.params.beta - truth.beta) / truth.beta).abs() < 1e-6);
        assert!(fit.mse_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn flat_data_is_unidentifiable() {
        let scores = [0.0, 1.0, 2.0, 3.0];
        let observed = [0.25; 4];
        assert!(matches!(
            fit_levenberg_marquardt(&scores, &observed, 0.25, &LmFitConfig::default(), None),
            Err(Error::Unidentifiable(_))
        ));
        assert!(matches!(
            fit_multistart(&[1.0; 4], &[0.2, 0.3, 0.4, 0.5], 0.0, &LmFitConfig::default()),
            Err(Error::Unidentifiable(_))
        ));
    }

    #[test]
    fn power_of_two_rescaling_is_bitwise_equivariant() {
        let scores = [0.3, 0.9, 1.4, 2.2, 2.5, 3.1];
        let observed = [0.82, 0.74, 0.61, 0.44, 0.40, 0.28];
        let cfg = LmFitConfig::default();
        let a = fit_multistart(&scores, &observed, 0.25, &cfg).unwrap();
        let halved: Vec<f64> = scores.iter().map(|c| c * 0.5).collect();
        let b = fit_multistart(&halved, &observed, 0.25, &cfg).unwrap();
        assert_eq!(a.mse, b.mse);
        assert_eq!(a.params.alpha * 0.5, b.params.alpha * 0.25);
        assert_eq!(a.params.beta * 0.5, b.params.beta);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn too_few_models() {
        assert!(matches!(
            fit_multistart(&[0.0, 1.0], &[0.3, 0.7], 0.0, &LmFitConfig::default()),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn multistart_picks_sign_from_data() {
        let scores = [0.5, 1.0, 1.5, 2.0, 2.5];
        let down = [0.9, 0.8, 0.6, 0.4, 0.3];
        let up = [0.3, 0.4, 0.6, 0.8, 0.9];
        let cfg = LmFitConfig::default();
        assert!(fit_multistart(&scores, &down, 0.0, &cfg).unwrap().params.alpha < 0.0);
        assert!(fit_multistart(&scores, &up, 0.0, &cfg).unwrap().params.alpha > 0.0);
    }

    #[test]
    fn symmetric_points_fit_exactly() {
        // midpoint at 1.0 and sigmoid(alpha) = 0.7 give alpha = ln(7/3)
        let scores = [0.0, 1.0, 2.0];
        let observed = [0.3, 0.5, 0.7];
        let fit = fit_multistart(&scores, &observed, 0.0, &LmFitConfig::default()).unwrap();
        assert!(fit.mse <= 1e-20, "mse {}", fit.mse);
        assert!((fit.params.alpha - (7.0f64 / 3.0).ln()).abs() < 1e-9);
        assert!((fit.params.beta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn below_floor_is_counted_not_clamped() {
        let scores = [0.0, 1.0, 2.0, 3.0];
        let observed = [0.9, 0.7, 0.3, 0.2];
        let fit = fit_multistart(&scores, &observed, 0.25, &LmFitConfig::default()).unwrap();
        assert_eq!(fit.below_floor, 1);
        assert!(fit.mse > 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = LmFitConfig {
            max_iters: 0,
            ..LmFitConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LmFitConfig {
            damping_up: 0.5,
            ..LmFitConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn range_and_monotonicity(
            alpha in -20.0f64..20.0,
            beta in -5.0f64..5.0,
            gamma in 0.0f64..0.9,
            c1 in -5.0f64..5.0,
            dc in 1e-3f64..2.0,
        ) {
            prop_assume!(alpha.abs() > 1e-3);
            let p = ScalingLawParams::new(alpha, beta, gamma);
            let (a, b) = (p.predict(c1), p.predict(c1 + dc));
            prop_assert!(a >= gamma && a <= 1.0);
            if (alpha * (c1 - beta)).abs() < 30.0 && (alpha * (c1 + dc - beta)).abs() < 30.0 {
                prop_assert!(a > gamma && a < 1.0);
                let increasing = b > a;
                prop_assert_eq!(increasing, alpha > 0.0);
            }
        }

        #[test]
        fn affine_reparameterization(
            alpha in -10.0f64..10.0,
            beta in -3.0f64..3.0,
            gamma in 0.0f64..0.5,
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
            c in -3.0f64..3.0,
        ) {
            let p = ScalingLawParams::new(alpha, beta, gamma);
            let q = p.reparameterized(scale, shift);
            prop_assert!((p.predict(c) - q.predict(scale * c + shift)).abs() <= 1e-9);
        }
    }
}
