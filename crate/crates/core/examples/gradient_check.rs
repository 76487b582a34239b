//! Compares the analytic scorer gradient with central finite differences.
//! The law is refit at each probe point so the sigmoid is not saturated.

use csvscale::data::Split;
use csvscale::lawfit::{fit_multistart, LmFitConfig};
use csvscale::optimizer::TaskDataset;
use csvscale::salience::{
    capability_score, mse_gradient_theta, score_weights, squared_error_objective, Activation, SalienceScorer,
};
use csvscale::synth::{generate_family, SyntheticFamilySpec};

fn main() -> csvscale::Result<()> {
    let family = generate_family(&SyntheticFamilySpec {
        num_models: 18,
        num_samples: 10,
        tokens_per_sample: 10,
        feature_dim: 4,
        accuracy_noise: 0.02,
        ..Default::default()
    })?;
    let corpus = &family.corpus;
    let dataset = TaskDataset::build(&family.mapped, &family.evals, &family.task)?;
    let train: Vec<_> = dataset.split(Split::Train).collect();
    let models: Vec<_> = train.iter().map(|m| m.losses).collect();
    let observed: Vec<f64> = train.iter().map(|m| m.accuracy).collect();

    let theta = vec![0.4, -0.3, 0.1, 0.7];
    let bias = -0.2;
    for activation in [Activation::Sigmoid, Activation::Softplus] {
        let scorer = SalienceScorer::new(theta.clone(), bias, activation)?;
        let weights = score_weights(&scorer, corpus)?;
        let scores = models
            .iter()
            .map(|m| capability_score(&weights, &m.per_sample, corpus.n_chars()))
            .collect::<csvscale::Result<Vec<_>>>()?;
        let params = fit_multistart(&scores, &observed, family.task.gamma, &LmFitConfig::default())?.params;

        let grad = mse_gradient_theta(&scorer, corpus, &models, &params, &observed)?;
        let f = |t: &[f64], b: f64| {
            let s = SalienceScorer::new(t.to_vec(), b, activation).expect("finite");
            squared_error_objective(&s, corpus, &models, &params, &observed).expect("aligned")
        };
        let h = 1e-6;
        println!("{activation:?}: alpha {:.3}, objective {:.6e}", params.alpha, grad.objective);
        for j in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[j] += h;
            down[j] -= h;
            let numeric = (f(&up, bias) - f(&down, bias)) / (2.0 * h);
            println!("  theta[{j}] analytic {:+.9e} numeric {:+.9e}", grad.theta[j], numeric);
        }
        let numeric = (f(&theta, bias + h) - f(&theta, bias - h)) / (2.0 * h);
        println!("  bias     analytic {:+.9e} numeric {:+.9e}", grad.bias, numeric);
    }
    Ok(())
}
