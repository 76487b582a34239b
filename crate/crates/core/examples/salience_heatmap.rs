//! Trains a scorer on a synthetic family and writes a salience heatmap.
//!
//! Usage: cargo run --example salience_heatmap [out.html]

use csvscale::lawfit::LmFitConfig;
use csvscale::optimizer::{run_alternating_optimization, OptimizationConfig, TaskDataset};
use csvscale::report::emit_salience_heatmap;
use csvscale::synth::{generate_family, SyntheticFamilySpec};

fn main() -> csvscale::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("salience.html").display().to_string());
    let family = generate_family(&SyntheticFamilySpec::default())?;
    let dataset = TaskDataset::build(&family.mapped, &family.evals, &family.task)?;
    let config = OptimizationConfig {
        learning_rate: 0.1,
        ..Default::default()
    };
    let run = run_alternating_optimization(&family.corpus, &dataset, &config, &LmFitConfig::default())?;

    let ids: Vec<&str> = family
        .corpus
        .samples()
        .iter()
        .take(5)
        .map(|s| s.sample_id.as_str())
        .collect();
    let html = emit_salience_heatmap(&family.corpus, &run.scorer, &ids)?;
    std::fs::write(&out, html).map_err(|e| csvscale::Error::io(&out, e))?;
    println!("wrote {out} ({} samples)", ids.len());
    Ok(())
}
