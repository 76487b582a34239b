//! Line-delimited JSON readers and writers, plus the binary feature layout.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{Corpus, FeatureMatrix, LossSet, ModelEval, ModelLossRecord, Split, TaskConfig, ValidationSample};
use crate::error::{Error, Result};

/// Leading bytes of every block in a binary features file.
pub const FEATURES_MAGIC: &[u8; 6] = b"CSVF1\n";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, text)| parse_line(path, n, &text).map(|v| (n, v)))
        .collect()
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sibling features file of a corpus file: `name.features.jsonl` if present,
/// otherwise `name.features.bin`.
pub fn features_path_for(corpus_path: &Path) -> PathBuf {
    let stem = corpus_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = corpus_path.parent().unwrap_or_else(|| Path::new(""));
    let jsonl = dir.join(format!("{stem}.features.jsonl"));
    if jsonl.exists() {
        return jsonl;
    }
    let bin = dir.join(format!("{stem}.features.bin"));
    if bin.exists() {
        bin
    } else {
        jsonl
    }
}

/// Loads a corpus file together with its sibling features file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    load_corpus_with_features(path, features_path_for(path))
}

pub fn load_corpus_with_features(
    corpus_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
) -> Result<Corpus> {
    let samples: Vec<ValidationSample> = read_jsonl(corpus_path.as_ref())?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let features = load_features(features_path)?;
    Corpus::new(samples, features)
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    sample_id: String,
    features: Vec<Vec<f64>>,
}

/// Reads a features file in either the line-delimited or binary layout.
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureMatrix>> {
    let path = path.as_ref();
    let mut head = [0u8; 6];
    let n = open(path)?
        .read(&mut head)
        .map_err(|e| Error::io(path, e))?;
    if n == head.len() && &head == FEATURES_MAGIC {
        return read_features_binary(path);
    }
    read_jsonl::<FeatureLine>(path)?
        .into_iter()
        .map(|(line, fl)| {
            if fl.features.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("sample `{}` has no feature rows", fl.sample_id),
                });
            }
            FeatureMatrix::from_rows(fl.sample_id, &fl.features)
        })
        .collect()
}

pub fn write_features_jsonl(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let lines: Vec<FeatureLine> = corpus
        .features()
        .iter()
        .map(|fm| FeatureLine {
            sample_id: fm.sample_id.clone(),
            features: fm.iter_rows().map(<[f64]>::to_vec).collect(),
        })
        .collect();
    write_jsonl(path.as_ref(), &lines)
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    sample_id: String,
    offset: u64,
}

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

/// Writes one `CSVF1` block per sample to `path` and the
/// `{"sample_id", "offset"}` index to `path.idx`.
pub fn write_features_binary(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut index = Vec::with_capacity(corpus.len());
    let mut offset = 0u64;
    for fm in corpus.features() {
        index.push(IndexEntry {
            sample_id: fm.sample_id.clone(),
            offset,
        });
        let mut block = Vec::with_capacity(14 + fm.as_slice().len() * 8);
        block.extend_from_slice(FEATURES_MAGIC);
        block.extend_from_slice(&(fm.dim() as u32).to_le_bytes());
        block.extend_from_slice(&(fm.rows() as u32).to_le_bytes());
        for v in fm.as_slice() {
            block.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&block).map_err(|e| Error::io(path, e))?;
        offset += block.len() as u64;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_jsonl(&index_path(path), &index)
}

pub fn read_features_binary(path: impl AsRef<Path>) -> Result<Vec<FeatureMatrix>> {
    let path = path.as_ref();
    let idx = index_path(path);
    let entries: Vec<(usize, IndexEntry)> = read_jsonl(&idx)?;
    let mut file = BufReader::new(open(path)?);
    let bad = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::with_capacity(entries.len());
    for (line, entry) in entries {
        file.seek(SeekFrom::Start(entry.offset))
            .map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; 14];
        file.read_exact(&mut header)
            .map_err(|e| bad(line, format!("truncated block header for `{}`: {e}", entry.sample_id)))?;
        if &header[..6] != FEATURES_MAGIC {
            return Err(bad(
                line,
                format!("bad magic at offset {} for `{}`", entry.offset, entry.sample_id),
            ));
        }
        let dim = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let rows = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; dim * rows * 8];
        file.read_exact(&mut raw)
            .map_err(|e| bad(line, format!("truncated block for `{}`: {e}", entry.sample_id)))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(FeatureMatrix::new(entry.sample_id, dim, data)?);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_jsonl(path.as_ref(), corpus.samples())
}

/// Loads loss records and validates them against `corpus`. Models missing
/// samples are kept but reported by [`LossSet::incomplete`].
pub fn load_losses(path: impl AsRef<Path>, corpus: &Corpus) -> Result<LossSet> {
    let path = path.as_ref();
    let records = read_jsonl::<ModelLossRecord>(path)?;
    let mut seen = Vec::with_capacity(records.len());
    for (line, rec) in records {
        // attach the line number to per-record failures
        let pos = corpus.position(&rec.sample_id).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("unknown sample_id `{}`", rec.sample_id),
        })?;
        rec.validate(corpus.char_count(pos))?;
        seen.push(rec);
    }
    LossSet::from_records(seen, corpus)
}

pub fn write_losses<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a ModelLossRecord>,
) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

#[derive(Deserialize)]
struct EvalLine {
    model_id: String,
    task_id: String,
    accuracy: Box<RawValue>,
    #[serde(default)]
    percent: bool,
    split: Split,
    #[serde(default)]
    flops: Option<f64>,
}

/// Parses a JSON number literal with its decimal exponent lowered by
/// `shift`, so `"89.54"` with shift 2 becomes the nearest double to 0.8954.
pub(crate) fn parse_scaled_decimal(literal: &str, shift: i32) -> Option<f64> {
    let literal = literal.trim();
    if literal.is_empty() || literal.starts_with('"') {
        return None;
    }
    let (mantissa, exp) = match literal.find(['e', 'E']) {
        Some(i) => (&literal[..i], literal[i + 1..].parse::<i32>().ok()?),
        None => (literal, 0),
    };
    format!("{mantissa}e{}", exp - shift).parse().ok()
}

/// Loads evaluations. Percent-flagged accuracies are divided by 100 in
/// decimal, before rounding to binary.
pub fn load_evals(path: impl AsRef<Path>) -> Result<Vec<ModelEval>> {
    let path = path.as_ref();
    let mut first_line: HashMap<(String, String), usize> = HashMap::new();
    let mut out = Vec::new();
    for (line, row) in read_jsonl::<EvalLine>(path)? {
        let shift = if row.percent { 2 } else { 0 };
        let accuracy = parse_scaled_decimal(row.accuracy.get(), shift).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("accuracy `{}` is not a number", row.accuracy.get()),
        })?;
        let key = (row.model_id.clone(), row.task_id.clone());
        if let Some(prev) = first_line.get(&key) {
            return Err(Error::Duplicate {
                what: "evaluation",
                detail: format!(
                    "({}, {}) on lines {prev} and {line} of {}",
                    key.0,
                    key.1,
                    path.display()
                ),
            });
        }
        first_line.insert(key, line);
        let eval = ModelEval {
            model_id: row.model_id,
            task_id: row.task_id,
            accuracy,
            split: row.split,
            flops: row.flops,
        };
        eval.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        out.push(eval);
    }
    Ok(out)
}

pub fn write_evals<'a>(path: impl AsRef<Path>, evals: impl IntoIterator<Item = &'a ModelEval>) -> Result<()> {
    write_jsonl(path.as_ref(), evals)
}

pub fn load_task_configs(path: impl AsRef<Path>) -> Result<Vec<TaskConfig>> {
    let path = path.as_ref();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (line, cfg) in read_jsonl::<TaskConfig>(path)? {
        if let Some(prev) = seen.insert(cfg.task_id.clone(), line) {
            return Err(Error::Duplicate {
                what: "task config",
                detail: format!("`{}` on lines {prev} and {line}", cfg.task_id),
            });
        }
        cfg.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        out.push(cfg);
    }
    Ok(out)
}

pub fn write_task_configs<'a>(
    path: impl AsRef<Path>,
    tasks: impl IntoIterator<Item = &'a TaskConfig>,
) -> Result<()> {
    write_jsonl(path.as_ref(), tasks)
}
