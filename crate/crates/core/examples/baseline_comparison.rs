//! Fits CSV, all-token and label-token scores on a shifted synthetic family
//! and prints the test-MSE summary table.

use csvscale::baselines::{all_token_scores, fit_baseline, label_token_scores};
use csvscale::lawfit::LmFitConfig;
use csvscale::optimizer::{run_alternating_optimization, Method, OptimizationConfig, TaskDataset};
use csvscale::report::{emit_fit_summary, SummaryEntry};
use csvscale::synth::{generate_family, SyntheticFamilySpec};

fn main() -> csvscale::Result<()> {
    let lm = LmFitConfig::default();
    let mut entries = Vec::new();
    for seed in 0..3 {
        let family = generate_family(&SyntheticFamilySpec {
            seed,
            accuracy_noise: 0.01,
            task_id: format!("shifted-{seed}"),
            ..Default::default()
        })?;
        let dataset = TaskDataset::build(&family.mapped, &family.evals, &family.task)?;
        let config = OptimizationConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let csv = run_alternating_optimization(&family.corpus, &dataset, &config, &lm)?.report;

        let all = all_token_scores(&family.mapped, &family.corpus)?;
        let all = fit_baseline(Method::AllToken, &all, &family.evals, &family.task, &family.corpus, &lm)?;
        let (label, _) = label_token_scores(&family.losses, &family.corpus)?;
        let label = fit_baseline(Method::LabelToken, &label, &family.evals, &family.task, &family.corpus, &lm)?;
        entries.extend([&csv, &all, &label].map(SummaryEntry::from));
    }
    print!("{}", emit_fit_summary(entries)?);
    Ok(())
}
