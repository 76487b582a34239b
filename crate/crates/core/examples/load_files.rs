//! Writes a small family to disk in the interchange formats, reads it back
//! and shows percent-accuracy ingestion.

use csvscale::data::{load_corpus, load_evals, load_losses, load_task_configs};
use csvscale::synth::{generate_family, SyntheticFamilySpec};

fn main() -> csvscale::Result<()> {
    let dir = std::env::temp_dir().join("csvscale-load-files");
    let family = generate_family(&SyntheticFamilySpec {
        num_models: 6,
        num_samples: 8,
        tokens_per_sample: 6,
        feature_dim: 3,
        ..Default::default()
    })?;
    let files = family.write_to(&dir)?;

    let corpus = load_corpus(&files.corpus)?;
    let losses = load_losses(&files.losses, &corpus)?;
    let evals = load_evals(&files.evals)?;
    let tasks = load_task_configs(&files.tasks)?;
    println!(
        "{}: {} samples, {} chars, digest {}",
        files.corpus.display(),
        corpus.len(),
        corpus.n_chars(),
        &corpus.digest()[..16]
    );
    println!("{} models with losses, {} evals, tasks {:?}", losses.len(), evals.len(), tasks);

    let percent = dir.join("percent.jsonl");
    let line = r#"{"model_id": "Llama-2-7b-hf", "task_id": "mmlu", "accuracy": 46.78, "percent": true, "split": "test"}"#;
    std::fs::write(&percent, format!("{line}\n")).map_err(|e| csvscale::Error::io(&percent, e))?;
    let parsed = load_evals(&percent)?;
    println!("46.78% ingested as {} (equal to 0.4678: {})", parsed[0].accuracy, parsed[0].accuracy == 0.4678);
    Ok(())
}
