//! Plot data, salience heatmaps and the per-task summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{evals_for_task, Corpus, ModelEval};
use crate::error::{Error, Result};
use crate::lawfit::ScalingLawParams;
use crate::numeric::min_max;
use crate::optimizer::{FitReport, Method};
use crate::salience::{score_weights, SalienceScorer};

pub const CURVE_POINTS: usize = 200;
pub const HEATMAP_LEVELS: u8 = 8;
const MISSING_CELL: &str = "—";

/// What goes on the x axis of a scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Flops,
    AllToken,
    CsvScore,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Flops => "flops",
            Axis::AllToken => "all_token",
            Axis::CsvScore => "csv_score",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flops" => Ok(Axis::Flops),
            "all_token" => Ok(Axis::AllToken),
            "csv_score" => Ok(Axis::CsvScore),
            other => Err(Error::InvalidValue(format!(
                "axis `{other}` (expected flops, all_token or csv_score)"
            ))),
        }
    }
}

/// The model id up to its last `-`, so `llama2-7b` belongs to `llama2`.
pub fn default_series_tag(model_id: &str) -> &str {
    model_id.rsplit_once('-').map_or(model_id, |(head, _)| head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterTables {
    /// `model_id,x,accuracy,split,series_tag`
    pub data: String,
    /// `x,predicted`, present when law parameters were given.
    pub curve: Option<String>,
}

/// One row per model evaluated on `task_id`, in model order.
///
/// `scores` supplies x for the score axes and is ignored for `Flops`.
pub fn emit_scatter(
    axis: Axis,
    task_id: &str,
    evals: &[ModelEval],
    scores: Option<&BTreeMap<String, f64>>,
    params: Option<&ScalingLawParams>,
) -> Result<ScatterTables> {
    let evals = evals_for_task(evals, task_id);
    let mut missing = Vec::new();
    let mut points = Vec::with_capacity(evals.len());
    for (id, e) in &evals {
        let x = match axis {
            Axis::Flops => e.flops,
            Axis::AllToken | Axis::CsvScore => scores.and_then(|s| s.get(*id).copied()),
        };
        match x {
            Some(x) => points.push((*id, x, *e)),
            None => missing.push(*id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::InvalidValue(format!(
            "no {} value for model(s) {}",
            axis.as_str(),
            missing.join(", ")
        )));
    }
    if params.is_some() && axis == Axis::Flops {
        return Err(Error::InvalidValue("the law is not defined on the flops axis".into()));
    }

    let mut data = String::from("model_id,x,accuracy,split,series_tag\n");
    for (id, x, e) in &points {
        let _ = writeln!(
            data,
            "{id},{x:e},{:e},{},{}",
            e.accuracy,
            e.split,
            default_series_tag(id)
        );
    }
    let curve = params.map(|p| {
        let xs: Vec<f64> = points.iter().map(|(_, x, _)| *x).collect();
        let (lo, hi) = min_max(&xs).unwrap_or((0.0, 1.0));
        let mut out = String::from("x,predicted\n");
        for x in curve_grid(lo, hi) {
            let _ = writeln!(out, "{x:e},{:e}", p.predict(x));
        }
        out
    });
    Ok(ScatterTables { data, curve })
}

/// [`CURVE_POINTS`] evenly spaced values from `lo` to `hi` inclusive.
pub fn curve_grid(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let last = (CURVE_POINTS - 1) as f64;
    (0..CURVE_POINTS).map(move |i| if i + 1 == CURVE_POINTS { hi } else { lo + (hi - lo) * i as f64 / last })
}

/// `floor(8 · (w - min) / (max - min))` clamped to 7; level 4 when the
/// range is empty.
pub fn quantize_level(w: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return HEATMAP_LEVELS / 2;
    }
    let x = ((w - min) / (max - min) * HEATMAP_LEVELS as f64).floor();
    x.clamp(0.0, (HEATMAP_LEVELS - 1) as f64) as u8
}

fn escape_html(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
}

/// A standalone HTML page with each selected sample's tokens shaded by
/// salience weight. Levels use the min and max weight over the whole corpus.
pub fn emit_salience_heatmap(corpus: &Corpus, scorer: &SalienceScorer, sample_ids: &[&str]) -> Result<String> {
    if sample_ids.is_empty() {
        return Err(Error::InvalidValue("no samples selected for the heatmap".into()));
    }
    let positions = sample_ids
        .iter()
        .map(|id| {
            corpus.position(id).ok_or_else(|| Error::Unknown {
                what: "sample_id",
                id: id.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = score_weights(scorer, corpus)?;
    let all: Vec<f64> = weights.iter().collect();
    let (min, max) = min_max(&all).unwrap_or((0.0, 0.0));

    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Salience heatmap</title>\n<style>\n\
         body{font-family:monospace;max-width:60em;margin:2em auto}\n\
         p{white-space:pre-wrap;line-height:1.6}\n",
    );
    for level in 0..HEATMAP_LEVELS {
        let _ = writeln!(
            out,
            ".w{level}{{background:rgba(0,160,0,{:.3})}}",
            level as f64 / (HEATMAP_LEVELS - 1) as f64
        );
    }
    let _ = write!(
        out,
        "</style>\n</head>\n<body>\n<p>weight range [{min:e}, {max:e}], {HEATMAP_LEVELS} levels</p>\n"
    );
    for &pos in &positions {
        let sample = &corpus.samples()[pos];
        out.push_str("<div class=\"sample\" data-sample-id=\"");
        escape_html(&sample.sample_id, &mut out);
        out.push_str("\">\n<h3>");
        escape_html(&sample.sample_id, &mut out);
        out.push_str(" (");
        escape_html(&sample.source_tag, &mut out);
        out.push_str(")</h3>\n<p>");
        let chars: Vec<char> = sample.text.chars().collect();
        for (span, &w) in sample.target_spans.iter().zip(&weights.per_sample[pos]) {
            let _ = write!(out, "<span class=\"w{}\" title=\"{w:e}\">", quantize_level(w, min, max));
            let piece: String = chars[span.start..span.end].iter().collect();
            escape_html(&piece, &mut out);
            out.push_str("</span>");
        }
        out.push_str("</p>\n</div>\n");
    }
    out.push_str("</body>\n</html>\n");
    Ok(out)
}

/// One cell of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub task_id: String,
    pub method: Method,
    pub test_mse: Option<f64>,
}

impl From<&FitReport> for SummaryEntry {
    fn from(r: &FitReport) -> Self {
        Self {
            task_id: r.task_id.clone(),
            method: r.method,
            test_mse: r.mse_test,
        }
    }
}

/// Scientific notation with three significant digits, e.g. `1.45e-3`.
pub fn format_mse(x: f64) -> String {
    format!("{x:.2e}")
}

/// Tab-separated table of test MSE, tasks in order of first appearance and
/// one column per method.
pub fn emit_fit_summary(entries: impl IntoIterator<Item = SummaryEntry>) -> Result<String> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, Method), Option<f64>> = BTreeMap::new();
    let mut seen_tasks = BTreeSet::new();
    for e in entries {
        if cells.insert((e.task_id.clone(), e.method), e.test_mse).is_some() {
            return Err(Error::Duplicate {
                what: "(task, method) report",
                detail: format!("({}, {})", e.task_id, e.method),
            });
        }
        if seen_tasks.insert(e.task_id.clone()) {
            order.push(e.task_id);
        }
    }
    let mut out = String::from("task");
    for m in Method::ALL {
        out.push('\t');
        out.push_str(m.as_str());
    }
    out.push('\n');
    for task in order {
        out.push_str(&task);
        for m in Method::ALL {
            out.push('\t');
            match cells.get(&(task.clone(), m)).copied().flatten() {
                Some(v) => out.push_str(&format_mse(v)),
                None => out.push_str(MISSING_CELL),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
