//! The `csvscale` command line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::{all_token_scores, fit_baseline, label_token_scores};
use crate::data::{
    assemble_validation_mix, features_path_for, load_corpus, load_corpus_with_features, load_evals, load_losses,
    load_task_configs, suggested_gamma, write_corpus, write_features_binary, write_features_jsonl, write_losses,
    Corpus, LossSet, ModelEval, ModelLossRecord, Split, TaskConfig,
};
use crate::error::{Error, Result};
use crate::lawfit::{FittedParams, LmFitConfig};
use crate::lossmap::{map_all, MappedLosses};
use crate::optimizer::{
    evaluate_scores, run_alternating_optimization, trace_csv, FitReport, Method, OptimizationConfig, PredictionRow,
    TaskDataset,
};
use crate::report::{emit_fit_summary, emit_salience_heatmap, emit_scatter, Axis, SummaryEntry};
use crate::salience::{capability_score, score_weights, SalienceScorer};
use crate::synth::{generate_family, SyntheticFamilySpec};

pub const REPORT_FILE: &str = "report.json";
pub const SCORER_FILE: &str = "scorer.json";
pub const PARAMS_FILE: &str = "params.json";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Parser)]
#[command(name = "csvscale", version, about = "Capability salience vectors and downstream scaling laws")]
pub struct Cli {
    /// Worker threads for loss mapping.
    #[arg(long, global = true, env = "CSVSCALE_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to the sibling `<stem>.features.jsonl` or `.bin`.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct TaskArgs {
    #[arg(long)]
    pub evals: PathBuf,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Required unless the tasks file holds a single task.
    #[arg(long)]
    pub task_id: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check input files and print a summary.
    Validate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        losses: Option<PathBuf>,
        #[arg(long)]
        evals: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Map model losses into the target tokenization.
    Map {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a validation mix from several corpora.
    Mix {
        /// `name=path` of a source corpus; repeatable.
        #[arg(long = "source", required = true)]
        sources: Vec<String>,
        /// `name=n` samples to draw; repeatable.
        #[arg(long = "count")]
        counts: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output corpus file; features are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Write features in the binary layout.
        #[arg(long)]
        binary: bool,
    },
    /// Fit the law for one task, training a salience scorer for `csv`.
    Fit {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        losses: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value = "csv")]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the law to all-token or label-token scores.
    Baseline {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        losses: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value = "all_token")]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict accuracies from loss records with a fitted model directory.
    Predict {
        /// Directory written by `fit` or `baseline`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        losses: PathBuf,
        /// Adds observed accuracies and splits when given.
        #[arg(long)]
        evals: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the MSE of a fitted model on one split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        evals: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic model family with known ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit tables, plot data and heatmaps.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Test MSE per task and method as tab-separated text.
    Summary {
        /// Report files or model directories.
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter data against flops, all-token or CSV score.
    Scatter {
        #[arg(long)]
        axis: Axis,
        #[command(flatten)]
        task: TaskArgs,
        /// Model directory; supplies CSV scores and the fitted curve.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        losses: Option<PathBuf>,
        /// Output prefix: writes `<out>.csv` and `<out>.curve.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Salience heatmap of selected samples.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Comma-separated sample ids; defaults to the first sample.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Optimization and law-fit settings read from one flat JSON object whose
/// keys are the field names of both config types.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub optimization: OptimizationConfig,
    pub lm: LmFitConfig,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: origin.to_string(),
            line: e.line(),
            message: e.to_string(),
        };
        let map: Map<String, Value> = serde_json::from_str(text).map_err(parse_err)?;
        let opt_keys = keys_of(&OptimizationConfig::default());
        let lm_keys = keys_of(&LmFitConfig::default());
        if let Some(k) = map.keys().find(|k| !opt_keys.contains(k) && !lm_keys.contains(k)) {
            return Err(Error::Unknown {
                what: "config key",
                id: k.clone(),
            });
        }
        let pick = |keys: &[String]| -> Value {
            Value::Object(map.iter().filter(|(k, _)| keys.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect())
        };
        Ok(Self {
            optimization: serde_json::from_value(pick(&opt_keys)).map_err(parse_err)?,
            lm: serde_json::from_value(pick(&lm_keys)).map_err(parse_err)?,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text, &p.display().to_string())
            }
        }
    }
}

/// One line of `predict` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub model_id: String,
    pub task_id: String,
    pub score: f64,
    pub predicted: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn load_corpus_args(args: &CorpusArgs) -> Result<Corpus> {
    match &args.features {
        Some(f) => load_corpus_with_features(&args.corpus, f),
        None => load_corpus(&args.corpus),
    }
}

fn load_loss_set(path: &Path, corpus: &Corpus) -> Result<LossSet> {
    let losses = load_losses(path, corpus)?;
    for (model, missing) in losses.incomplete() {
        warn(format!("model `{model}` lacks losses for {missing} samples and is skipped"));
    }
    Ok(losses)
}

fn resolve_task(args: &TaskArgs) -> Result<TaskConfig> {
    let tasks = match &args.tasks {
        Some(p) => load_task_configs(p)?,
        None => Vec::new(),
    };
    let task_id = match (&args.task_id, tasks.as_slice()) {
        (Some(id), _) => id.clone(),
        (None, [only]) => only.task_id.clone(),
        _ => {
            return Err(Error::InvalidValue(
                "--task-id is required unless the tasks file holds exactly one task".into(),
            ))
        }
    };
    if let Some(t) = tasks.iter().find(|t| t.task_id == task_id) {
        return Ok(t.clone());
    }
    match suggested_gamma(&task_id) {
        Some(g) => {
            warn(format!("task `{task_id}` not in the tasks file, using gamma {g}"));
            TaskConfig::new(task_id, g)
        }
        None => Err(Error::Unknown {
            what: "task (no gamma configured)",
            id: task_id,
        }),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn parse_pair(s: &str, flag: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| Error::InvalidValue(format!("--{flag} `{s}` must be name=value")))
}

/// Capability scores of every complete model under the method of a saved
/// report.
fn method_scores(
    report: &FitReport,
    model_dir: &Path,
    corpus: &Corpus,
    losses: &LossSet,
    threads: usize,
) -> Result<BTreeMap<String, f64>> {
    if report.corpus_digest != corpus.digest() {
        warn("corpus differs from the one the model was fitted on");
    }
    match report.method {
        Method::LabelToken => Ok(label_token_scores(losses, corpus)?.0),
        Method::AllToken => all_token_scores(&map_all(losses, corpus, threads)?, corpus),
        Method::Csv => {
            let scorer = SalienceScorer::load(model_dir.join(&report.scorer))?;
            let weights = score_weights(&scorer, corpus)?;
            map_all(losses, corpus, threads)?
                .iter()
                .map(|(id, m)| Ok((id.clone(), capability_score(&weights, &m.per_sample, corpus.n_chars())?)))
                .collect()
        }
    }
}

fn write_fit_outputs(dir: &Path, report: &FitReport) -> Result<()> {
    report.save(dir.join(REPORT_FILE))?;
    FittedParams {
        task_id: report.task_id.clone(),
        alpha: report.params.alpha,
        beta: report.params.beta,
        gamma: report.params.gamma,
        mse_train: report.mse_train.unwrap_or_default(),
        iters: report.lm_iterations,
        converged: report.lm_converged,
    }
    .save(dir.join(PARAMS_FILE))
}

fn baseline_report(
    method: Method,
    corpus: &Corpus,
    losses: &LossSet,
    evals: &[ModelEval],
    task: &TaskConfig,
    lm: &LmFitConfig,
    threads: usize,
) -> Result<FitReport> {
    let (scores, excluded) = match method {
        Method::AllToken => (all_token_scores(&map_all(losses, corpus, threads)?, corpus)?, Vec::new()),
        Method::LabelToken => label_token_scores(losses, corpus)?,
        Method::Csv => return Err(Error::InvalidValue("baseline takes all_token or label_token".into())),
    };
    if !excluded.is_empty() {
        warn(format!("{} samples without answer spans excluded", excluded.len()));
    }
    let mut report = fit_baseline(method, &scores, evals, task, corpus, lm)?;
    if !excluded.is_empty() {
        report
            .notes
            .push(format!("{} samples without answer spans excluded", excluded.len()));
    }
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Validate {
            corpus,
            losses,
            evals,
            tasks,
        } => {
            let c = load_corpus_args(&corpus)?;
            let mut out = format!(
                "corpus: {} samples, {} chars, {} target tokens, feature dim {}, digest {}\n",
                c.len(),
                c.n_chars(),
                c.token_count(),
                c.feature_dim(),
                c.digest()
            );
            if let Some(p) = losses {
                let set = load_loss_set(&p, &c)?;
                out += &format!(
                    "losses: {} models, {} complete\n",
                    set.len(),
                    set.complete_models().count()
                );
            }
            if let Some(p) = evals {
                let e = load_evals(&p)?;
                out += &format!("evals: {} records\n", e.len());
            }
            if let Some(p) = tasks {
                let t = load_task_configs(&p)?;
                out += &format!("tasks: {}\n", t.len());
            }
            emit(None, &out)
        }
        Command::Map { corpus, losses, out } => {
            let c = load_corpus_args(&corpus)?;
            let set = load_loss_set(&losses, &c)?;
            let mapped = map_all(&set, &c, threads)?;
            let records: Vec<ModelLossRecord> = mapped
                .values()
                .flat_map(|m: &MappedLosses| {
                    c.samples().iter().zip(&m.per_sample).map(|(s, l)| ModelLossRecord {
                        model_id: m.model_id.clone(),
                        sample_id: s.sample_id.clone(),
                        source_spans: s.target_spans.clone(),
                        token_nll: l.0.clone(),
                    })
                })
                .collect();
            write_losses(&out, &records)
        }
        Command::Mix {
            sources,
            counts,
            seed,
            out,
            binary,
        } => {
            let mut corpora = Vec::new();
            for s in &sources {
                let (name, path) = parse_pair(s, "source")?;
                corpora.push((name, load_corpus(&path)?));
            }
            let mut count_map = BTreeMap::new();
            for s in &counts {
                let (name, n) = parse_pair(s, "count")?;
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::InvalidValue(format!("--count `{s}` needs a whole number")))?;
                if count_map.insert(name.clone(), n).is_some() {
                    return Err(Error::Duplicate {
                        what: "--count",
                        detail: name,
                    });
                }
            }
            let refs: Vec<(&str, &Corpus)> = corpora.iter().map(|(n, c)| (n.as_str(), c)).collect();
            let mixed = assemble_validation_mix(&refs, &count_map, seed)?;
            write_corpus(&out, &mixed)?;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let dir = out.parent().unwrap_or(Path::new(""));
            if binary {
                write_features_binary(dir.join(format!("{stem}.features.bin")), &mixed)
            } else {
                write_features_jsonl(features_path_for(&out), &mixed)
            }
        }
        Command::Fit {
            corpus,
            losses,
            task,
            method,
            config,
            seed,
            out,
        } => {
            let c = load_corpus_args(&corpus)?;
            let set = load_loss_set(&losses, &c)?;
            let evals = load_evals(&task.evals)?;
            let t = resolve_task(&task)?;
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.optimization.seed = s;
            }
            create_dir(&out)?;
            if method != Method::Csv {
                let report = baseline_report(method, &c, &set, &evals, &t, &cfg.lm, threads)?;
                return write_fit_outputs(&out, &report);
            }
            let mapped = map_all(&set, &c, threads)?;
            let dataset = TaskDataset::build(&mapped, &evals, &t)?;
            for (m, why) in &dataset.skipped {
                warn(format!("model `{m}` skipped: {why}"));
            }
            let result = run_alternating_optimization(&c, &dataset, &cfg.optimization, &cfg.lm)?;
            result.scorer.save(out.join(SCORER_FILE))?;
            write_text(&out.join(TRACE_FILE), &trace_csv(&result.trace))?;
            let mut report = result.report;
            report.scorer = SCORER_FILE.into();
            write_fit_outputs(&out, &report)
        }
        Command::Baseline {
            corpus,
            losses,
            task,
            method,
            config,
            out,
        } => {
            let c = load_corpus_args(&corpus)?;
            let set = load_loss_set(&losses, &c)?;
            let evals = load_evals(&task.evals)?;
            let t = resolve_task(&task)?;
            let cfg = RunConfig::load(config.as_deref())?;
            create_dir(&out)?;
            let report = baseline_report(method, &c, &set, &evals, &t, &cfg.lm, threads)?;
            write_fit_outputs(&out, &report)
        }
        Command::Predict {
            model,
            corpus,
            losses,
            evals,
            out,
        } => {
            let report = FitReport::load(model.join(REPORT_FILE))?;
            let c = load_corpus_args(&corpus)?;
            let set = load_loss_set(&losses, &c)?;
            let scores = method_scores(&report, &model, &c, &set, threads)?;
            let evals = match evals {
                Some(p) => load_evals(&p)?,
                None => Vec::new(),
            };
            let mut text = String::new();
            for (id, &score) in &scores {
                let eval = evals
                    .iter()
                    .find(|e| &e.model_id == id && e.task_id == report.task_id);
                let line = PredictionLine {
                    model_id: id.clone(),
                    task_id: report.task_id.clone(),
                    score,
                    predicted: report.params.predict(score),
                    observed: eval.map(|e| e.accuracy),
                    split: eval.map(|e| e.split),
                };
                text += &serde_json::to_string(&line).expect("line serializes");
                text.push('\n');
            }
            emit(out.as_deref(), &text)
        }
        Command::Evaluate {
            model,
            corpus,
            losses,
            evals,
            split,
            out,
        } => {
            let report = FitReport::load(model.join(REPORT_FILE))?;
            let c = load_corpus_args(&corpus)?;
            let set = load_loss_set(&losses, &c)?;
            let scores = method_scores(&report, &model, &c, &set, threads)?;
            let evals = load_evals(&evals)?;
            let rows: Vec<PredictionRow> = crate::data::evals_for_task(&evals, &report.task_id)
                .into_iter()
                .filter_map(|(id, e)| {
                    scores.get(id).map(|&score| PredictionRow {
                        model_id: id.to_string(),
                        split: e.split,
                        score,
                        predicted: report.params.predict(score),
                        observed: e.accuracy,
                    })
                })
                .collect();
            let result = evaluate_scores(&report.params, &rows, split)?;
            let text = serde_json::to_string_pretty(&result).expect("evaluation serializes") + "\n";
            emit(out.as_deref(), &text)
        }
        Command::Synth { spec, seed, out } => {
            let mut s = match spec {
                Some(p) => SyntheticFamilySpec::load(p)?,
                None => SyntheticFamilySpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            generate_family(&s)?.write_to(&out)?;
            Ok(())
        }
        Command::Report { kind } => run_report(kind, threads),
    }
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run_report(kind: ReportKind, threads: usize) -> Result<()> {
    match kind {
        ReportKind::Summary { reports, out } => {
            let entries = reports
                .iter()
                .map(|p| FitReport::load(report_path(p)).map(|r| SummaryEntry::from(&r)))
                .collect::<Result<Vec<_>>>()?;
            emit(out.as_deref(), &emit_fit_summary(entries)?)
        }
        ReportKind::Scatter {
            axis,
            task,
            model,
            corpus,
            features,
            losses,
            out,
        } => {
            let evals = load_evals(&task.evals)?;
            let report = model
                .as_ref()
                .map(|m| FitReport::load(m.join(REPORT_FILE)))
                .transpose()?;
            let task_id = match (&task.task_id, &report) {
                (Some(t), _) => t.clone(),
                (None, Some(r)) => r.task_id.clone(),
                (None, None) => resolve_task(&task)?.task_id,
            };
            let scores = match axis {
                Axis::Flops => None,
                Axis::AllToken | Axis::CsvScore => {
                    let corpus = corpus.ok_or_else(|| Error::InvalidValue("--corpus is required for score axes".into()))?;
                    let losses = losses.ok_or_else(|| Error::InvalidValue("--losses is required for score axes".into()))?;
                    let c = load_corpus_args(&CorpusArgs { corpus, features })?;
                    let set = load_loss_set(&losses, &c)?;
                    Some(match (axis, &report, &model) {
                        (Axis::CsvScore, Some(r), Some(dir)) => method_scores(r, dir, &c, &set, threads)?,
                        (Axis::CsvScore, _, _) => {
                            return Err(Error::InvalidValue("--model is required for the csv_score axis".into()))
                        }
                        _ => all_token_scores(&map_all(&set, &c, threads)?, &c)?,
                    })
                }
            };
            let params = match (axis, &report) {
                (Axis::CsvScore, Some(r)) => Some(r.params),
                (Axis::AllToken, Some(r)) if r.method == Method::AllToken => Some(r.params),
                _ => None,
            };
            let tables = emit_scatter(axis, &task_id, &evals, scores.as_ref(), params.as_ref())?;
            let with_ext = |ext: &str| {
                let mut s = out.clone().into_os_string();
                s.push(ext);
                PathBuf::from(s)
            };
            write_text(&with_ext(".csv"), &tables.data)?;
            if let Some(curve) = tables.curve {
                write_text(&with_ext(".curve.csv"), &curve)?;
            }
            Ok(())
        }
        ReportKind::Heatmap {
            model,
            corpus,
            samples,
            out,
        } => {
            let report = FitReport::load(model.join(REPORT_FILE))?;
            if report.method != Method::Csv {
                return Err(Error::InvalidValue("heatmaps need a model fitted with --method csv".into()));
            }
            let scorer = SalienceScorer::load(model.join(&report.scorer))?;
            let c = load_corpus_args(&corpus)?;
            let ids: Vec<&str> = if samples.is_empty() {
                c.samples().iter().take(1).map(|s| s.sample_id.as_str()).collect()
            } else {
                samples.iter().map(String::as_str).collect()
            };
            write_text(&out, &emit_salience_heatmap(&c, &scorer, &ids)?)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.kind().exit_code()
        }
    }
}

pub fn main() -> ! {
    std::process::exit(run_with_args(std::env::args_os()))
}
