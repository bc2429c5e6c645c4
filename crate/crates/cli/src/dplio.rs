//! Pseudo-labeling outside a training run: a score CSV and a JSON-lines
//! label file in, merged JSON-lines out.
//!
//! Score CSV: header row of class ids, optionally led by an `image_id`
//! column; one row of old-class probabilities per image. Without the id
//! column, rows pair with label lines by position.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use krt_core::dpl::{dynamic_threshold_search, session_target, DplConfig, ScoreMatrix};
use krt_core::ClassSet;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_data, io_runtime, CliError, Result};

pub const ID_COLUMN: &str = "image_id";

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub ids: Option<Vec<String>>,
    pub classes: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub image_id: Value,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedLine {
    pub image_id: Value,
    pub labels: Vec<usize>,
    pub pseudo: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub final_eta: f64,
    pub beta: f64,
    pub mu_t: f64,
    pub iterations: usize,
    pub converged: bool,
    pub images: usize,
    pub pseudo_labels: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub dpl: DplConfig,
    /// Overrides the target derived from `mu`.
    pub mu_t: Option<f64>,
    /// Size of the class universe; defaults to one past the largest id seen.
    pub total_classes: Option<usize>,
}

fn id_key(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn parse_scores(text: &str) -> Result<Scores> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("scores line 1: {e}")))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(CliError::Data("scores: empty file".into()));
    }
    let has_ids = &header[0] == ID_COLUMN;
    let class_cols = if has_ids { 1 } else { 0 };
    let mut classes = Vec::new();
    for h in header.iter().skip(class_cols) {
        let c = h
            .parse::<usize>()
            .map_err(|_| CliError::Data(format!("scores line 1: `{h}` is not a class id")))?;
        if classes.contains(&c) {
            return Err(CliError::Data(format!("scores line 1: class {c} repeated")));
        }
        classes.push(c);
    }
    if classes.is_empty() {
        return Err(CliError::Data("scores line 1: no class columns".into()));
    }
    let mut ids = has_ids.then(Vec::new);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Data(format!("scores line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if let Some(ids) = ids.as_mut() {
            ids.push(rec[0].to_string());
        }
        let row = rec
            .iter()
            .skip(class_cols)
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| CliError::Data(format!("scores line {line}: `{f}` is not a probability")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data("scores: no score rows".into()));
    }
    Ok(Scores { ids, classes, rows })
}

pub fn parse_labels(reader: impl BufRead) -> Result<Vec<LabelLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("labels line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("labels line {}: {e}", i + 1)))?;
        out.push(parsed);
    }
    Ok(out)
}

/// Runs the threshold search and returns the report and merged lines.
pub fn pseudo_label(scores: &Scores, labels: &[LabelLine], opts: &Options) -> Result<(Report, Vec<MergedLine>)> {
    // Order the label lines like the score rows.
    let ordered: Vec<&LabelLine> = match &scores.ids {
        Some(ids) => {
            let by_id: HashMap<String, &LabelLine> = labels.iter().map(|l| (id_key(&l.image_id), l)).collect();
            ids.iter()
                .enumerate()
                .map(|(i, id)| {
                    by_id
                        .get(id)
                        .copied()
                        .ok_or_else(|| CliError::Data(format!("scores line {}: image `{id}` has no label line", i + 2)))
                })
                .collect::<Result<_>>()?
        }
        None => labels.iter().collect(),
    };
    if ordered.len() != scores.rows.len() {
        return Err(CliError::Data(format!(
            "{} score rows but {} label lines",
            scores.rows.len(),
            ordered.len()
        )));
    }
    let largest = scores
        .classes
        .iter()
        .chain(ordered.iter().flat_map(|l| &l.labels))
        .max()
        .copied()
        .unwrap_or(0);
    let universe = opts.total_classes.unwrap_or(largest + 1);
    if largest >= universe {
        return Err(CliError::Data(format!(
            "class {largest} outside --total-classes {universe}"
        )));
    }
    let mu_t = match opts.mu_t {
        Some(m) => m,
        None => session_target(scores.classes.len(), universe, opts.dpl.mu)?,
    };
    let matrix = ScoreMatrix::new(scores.rows.len(), scores.classes.clone(), scores.rows.concat())?;
    let truth: Vec<ClassSet> = ordered
        .iter()
        .map(|l| ClassSet::from_indices(universe, l.labels.iter().copied()))
        .collect();
    let r = dynamic_threshold_search(&matrix, &opts.dpl, mu_t, universe, Some(&truth))?;
    let merged = ordered
        .iter()
        .zip(&r.labels)
        .map(|(l, p)| MergedLine {
            image_id: l.image_id.clone(),
            labels: l.labels.clone(),
            pseudo: p.iter().collect(),
        })
        .collect();
    let report = Report {
        final_eta: r.final_eta,
        beta: r.beta,
        mu_t: r.mu_t,
        iterations: r.iterations,
        converged: r.converged,
        images: scores.rows.len(),
        pseudo_labels: r.total(),
    };
    Ok((report, merged))
}

/// Reads both files, and writes `out` only after everything parsed and the
/// search finished.
pub fn run_files(scores: &Path, labels: &Path, out: &Path, opts: &Options) -> Result<Report> {
    let text = std::fs::read_to_string(scores).map_err(|e| io_data(scores, e))?;
    let s = parse_scores(&text)?;
    let file = std::fs::File::open(labels).map_err(|e| io_data(labels, e))?;
    let l = parse_labels(std::io::BufReader::new(file))?;
    let (report, merged) = pseudo_label(&s, &l, opts)?;
    let mut buf = Vec::new();
    for m in &merged {
        serde_json::to_writer(&mut buf, m).map_err(|e| CliError::Runtime(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(out).map_err(|e| io_runtime(out, e))?;
    f.write_all(&buf).map_err(|e| io_runtime(out, e))?;
    Ok(report)
}
