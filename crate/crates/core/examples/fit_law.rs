//! Fits the sigmoid law to scores and accuracies, then shows that an affine
//! change of the scores is absorbed by the fitted parameters.

use csvscale::lawfit::{fit_multistart, LmFitConfig, ScalingLawParams};

fn main() -> csvscale::Result<()> {
    let truth = ScalingLawParams::new(-5.0, 1.8, 0.25);
    let scores: Vec<f64> = (0..16).map(|i| 1.2 + 0.08 * i as f64).collect();
    let observed: Vec<f64> = scores.iter().map(|&c| truth.predict(c)).collect();

    let fit = fit_multistart(&scores, &observed, truth.gamma, &LmFitConfig::default())?;
    println!(
        "alpha {:.9} beta {:.9} mse {:.3e} after {} iterations (converged: {})",
        fit.params.alpha, fit.params.beta, fit.mse, fit.iterations, fit.converged
    );
    println!("accepted-step MSE trace: {:?}", fit.mse_trace.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>());

    let rescaled: Vec<f64> = scores.iter().map(|c| 2.5 * c - 1.0).collect();
    let refit = fit_multistart(&rescaled, &observed, truth.gamma, &LmFitConfig::default())?;
    let expected = fit.params.reparameterized(2.5, -1.0);
    println!(
        "on 2.5·C - 1: alpha {:.9} (expected {:.9}), beta {:.9} (expected {:.9})",
        refit.params.alpha, expected.alpha, refit.params.beta, expected.beta
    );
    Ok(())
}
