//! Generates a noise-free synthetic family, runs the alternating optimizer
//! and compares the result with the generator's ground truth.
//!
//! Usage: cargo run --example synthetic_recovery [seed]

use csvscale::lawfit::LmFitConfig;
use csvscale::optimizer::{run_alternating_optimization, OptimizationConfig, TaskDataset};
use csvscale::synth::{generate_family, oracle_fit_check, SyntheticFamilySpec};

fn main() -> csvscale::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let family = generate_family(&SyntheticFamilySpec {
        seed,
        ..Default::default()
    })?;
    println!(
        "{} models, {} samples, {} target tokens, true alpha {:.3}, true beta {:.4}",
        family.evals.len(),
        family.corpus.len(),
        family.corpus.token_count(),
        family.truth.true_alpha,
        family.truth.true_beta
    );

    let dataset = TaskDataset::build(&family.mapped, &family.evals, &family.task)?;
    let config = OptimizationConfig {
        learning_rate: 0.1,
        ..Default::default()
    };
    let run = run_alternating_optimization(&family.corpus, &dataset, &config, &LmFitConfig::default())?;
    for r in run.trace.iter().filter(|r| r.epoch % 25 == 0) {
        println!("epoch {:>3}  train {:.3e}  val {:.3e}", r.epoch, r.mse_train, r.mse_val);
    }
    let report = &run.report;
    println!(
        "best epoch {:?}: test MSE {:.3e}",
        report.best_epoch,
        report.mse_test.unwrap_or(f64::NAN)
    );
    let check = oracle_fit_check(&family, &report.params, &run.scorer)?;
    println!(
        "oracle: held-out MSE {:.3e}, max gap to true predictions {:.3e}",
        check.mse_heldout, check.max_prediction_gap
    );
    Ok(())
}
