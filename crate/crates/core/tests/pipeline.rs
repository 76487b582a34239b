use csvscale::baselines::{all_token_scores, fit_baseline};
use csvscale::data::{LossSet, Split};
use csvscale::lawfit::LmFitConfig;
use csvscale::lossmap::map_all;
use csvscale::optimizer::{
    run_alternating_optimization, split_mse, Method, OptimizationConfig, TaskDataset,
};
use csvscale::salience::{mse_gradient_theta, squared_error_objective, Activation, SalienceScorer};
use csvscale::synth::{generate_family, oracle_fit_check, SyntheticFamily, SyntheticFamilySpec};
use csvscale::Error;

fn family(seed: u64, noise: f64) -> SyntheticFamily {
    generate_family(&SyntheticFamilySpec {
        seed,
        accuracy_noise: noise,
        num_models: 24,
        num_samples: 20,
        tokens_per_sample: 12,
        feature_dim: 6,
        ..Default::default()
    })
    .unwrap()
}

fn fast() -> OptimizationConfig {
    OptimizationConfig {
        learning_rate: 0.1,
        epochs: 60,
        ..Default::default()
    }
}

#[test]
fn frozen_scorer_matches_all_token_baseline() {
    let fam = family(1, 0.01);
    let dataset = TaskDataset::build(&fam.mapped, &fam.evals, &fam.task).unwrap();
    let config = OptimizationConfig {
        learning_rate: 0.0,
        epochs: 5,
        ..Default::default()
    };
    let run = run_alternating_optimization(&fam.corpus, &dataset, &config, &LmFitConfig::default()).unwrap();
    assert_eq!(run.report.best_epoch, Some(0));
    assert!(run.scorer.theta().iter().all(|&t| t == 0.0));

    let scores = all_token_scores(&fam.mapped, &fam.corpus).unwrap();
    let base = fit_baseline(Method::AllToken, &scores, &fam.evals, &fam.task, &fam.corpus, &LmFitConfig::default()).unwrap();
    assert_eq!(run.report.rows.len(), base.rows.len());
    for (a, b) in run.report.rows.iter().zip(&base.rows) {
        assert_eq!(a.model_id, b.model_id);
        assert_eq!(a.predicted, b.predicted);
    }
    assert_eq!(run.report.mse_test, base.mse_test);
}

#[test]
fn best_epoch_and_recomputable_mse() {
    let fam = family(2, 0.01);
    let dataset = TaskDataset::build(&fam.mapped, &fam.evals, &fam.task).unwrap();
    let run = run_alternating_optimization(&fam.corpus, &dataset, &fast(), &LmFitConfig::default()).unwrap();
    let min_val = run.trace.iter().map(|r| r.mse_val).fold(f64::INFINITY, f64::min);
    let best = run.report.best_epoch.unwrap();
    assert_eq!(run.trace[best].mse_val, min_val);
    assert!((run.report.mse_val.unwrap() - min_val).abs() <= 1e-15);

    for split in Split::ALL {
        let rows: Vec<_> = run.report.rows.iter().filter(|r| r.split == split).collect();
        let mse = rows.iter().map(|r| (r.observed - r.predicted).powi(2)).sum::<f64>() / rows.len() as f64;
        assert!((run.report.mse(split).unwrap() - mse).abs() <= 1e-12);
        assert_eq!(split_mse(&run.report.rows, split), run.report.mse(split));
    }
}

#[test]
fn identical_inputs_give_identical_reports() {
    let fam = family(3, 0.01);
    let dataset = TaskDataset::build(&fam.mapped, &fam.evals, &fam.task).unwrap();
    let a = run_alternating_optimization(&fam.corpus, &dataset, &fast(), &LmFitConfig::default()).unwrap();
    let b = run_alternating_optimization(&fam.corpus, &dataset, &fast(), &LmFitConfig::default()).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.scorer.to_json(), b.scorer.to_json());
}

#[test]
fn tiny_step_does_not_increase_train_objective() {
    let fam = family(4, 0.0);
    let dataset = TaskDataset::build(&fam.mapped, &fam.evals, &fam.task).unwrap();
    let train: Vec<_> = dataset.split(Split::Train).collect();
    let models: Vec<_> = train.iter().map(|m| m.losses).collect();
    let observed: Vec<f64> = train.iter().map(|m| m.accuracy).collect();
    let run = run_alternating_optimization(
        &fam.corpus,
        &dataset,
        &OptimizationConfig {
            epochs: 1,
            ..Default::default()
        },
        &LmFitConfig::default(),
    )
    .unwrap();
    let params = run.report.params;
    let mut scorer = SalienceScorer::new(vec![0.3; 6], -0.2, Activation::Sigmoid).unwrap();
    let before = squared_error_objective(&scorer, &fam.corpus, &models, &params, &observed).unwrap();
    let grad = mse_gradient_theta(&scorer, &fam.corpus, &models, &params, &observed).unwrap();
    scorer.step(&grad, 1e-8);
    let after = squared_error_objective(&scorer, &fam.corpus, &models, &params, &observed).unwrap();
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn too_few_train_models_or_no_val_is_an_error() {
    let fam = family(5, 0.0);
    let mut evals = fam.evals.clone();
    let mut kept_train = 0;
    evals.retain(|e| {
        if e.split != Split::Train {
            return true;
        }
        kept_train += 1;
        kept_train <= 2
    });
    let dataset = TaskDataset::build(&fam.mapped, &evals, &fam.task).unwrap();
    assert!(matches!(
        run_alternating_optimization(&fam.corpus, &dataset, &fast(), &LmFitConfig::default()),
        Err(Error::Insufficient(_))
    ));

    let no_val: Vec<_> = fam.evals.iter().filter(|e| e.split != Split::Val).cloned().collect();
    let dataset = TaskDataset::build(&fam.mapped, &no_val, &fam.task).unwrap();
    assert!(matches!(
        run_alternating_optimization(&fam.corpus, &dataset, &fast(), &LmFitConfig::default()),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn model_missing_one_of_550_samples_is_incomplete() {
    let fam = generate_family(&SyntheticFamilySpec {
        num_models: 3,
        num_samples: 550,
        tokens_per_sample: 2,
        feature_dim: 2,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(fam.corpus.len(), 550);
    let mut records: Vec<_> = fam.losses.iter_records().cloned().collect();
    let dropped = records.iter().position(|r| r.model_id == "series_b-000").unwrap();
    records.remove(dropped);
    let set = LossSet::from_records(records, &fam.corpus).unwrap();
    assert_eq!(set.incomplete(), vec![("series_b-000".to_string(), 1)]);
    let mapped = map_all(&set, &fam.corpus, 1).unwrap();
    assert_eq!(mapped.len(), 2);
    assert!(!mapped.contains_key("series_b-000"));
}

#[test]
fn all_token_score_ignores_source_tokenization() {
    // Every model has its own random tokenization, so agreement with the
    // unmapped totals covers re-tokenization.
    let fam = family(6, 0.0);
    let scores = all_token_scores(&fam.mapped, &fam.corpus).unwrap();
    for model in fam.losses.models() {
        let raw: f64 = model
            .records()
            .iter()
            .map(|r| r.as_ref().unwrap().token_nll.iter().sum::<f64>())
            .sum();
        let expected = raw / fam.corpus.n_chars() as f64;
        assert!((scores[&model.model_id] - expected).abs() <= 1e-9 * expected);
    }
}

#[test]
fn uniform_weights_lose_to_csv_on_shifted_family() {
    let fam = family(7, 0.0);
    let dataset = TaskDataset::build(&fam.mapped, &fam.evals, &fam.task).unwrap();
    let run = run_alternating_optimization(
        &fam.corpus,
        &dataset,
        &OptimizationConfig {
            learning_rate: 0.1,
            ..Default::default()
        },
        &LmFitConfig::default(),
    )
    .unwrap();
    let csv = oracle_fit_check(&fam, &run.report.params, &run.scorer).unwrap();

    let scores = all_token_scores(&fam.mapped, &fam.corpus).unwrap();
    let base = fit_baseline(Method::AllToken, &scores, &fam.evals, &fam.task, &fam.corpus, &LmFitConfig::default()).unwrap();
    // A scorer with theta = 0 and a huge bias gives weight 1 everywhere.
    let ones = SalienceScorer::new(vec![0.0; 6], 40.0, Activation::Sigmoid).unwrap();
    let uniform = oracle_fit_check(&fam, &base.params, &ones).unwrap();
    assert!(uniform.mse_heldout > 0.0);
    assert!(uniform.mse_heldout > csv.mse_heldout, "{uniform:?} vs {csv:?}");
    assert!(csv.mse_heldout <= 1e-6, "{csv:?}");
}
