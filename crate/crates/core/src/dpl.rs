//! Dynamic pseudo-labeling.
//!
//! The frozen previous model scores every training image on the old
//! classes. A class is pseudo-labeled when its probability reaches the
//! threshold η, and η walks in fixed steps until the mean number of pseudo
//! labels per image (β) is within tolerance of the session target μᵗ.
//!
//! β(η) is a non-increasing step function, so the walk can jump over the
//! tolerance band and bounce between two thresholds forever. The walk stops
//! as soon as it would revisit a threshold, leave the bounds, or exhaust
//! `max_iters`, and then falls back to the closest threshold it has seen.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config, data, Result};
use crate::labels::{Annotation, ClassSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DplConfig {
    pub eta_init: f64,
    /// Dataset-level target of labels per image.
    pub mu: f64,
    pub eta_step: f64,
    pub tolerance: f64,
    pub eta_bounds: [f64; 2],
    pub max_iters: usize,
}

impl Default for DplConfig {
    fn default() -> Self {
        Self {
            eta_init: 0.8,
            mu: 2.9,
            eta_step: 1e-2,
            tolerance: 1e-1,
            eta_bounds: [0.01, 0.99],
            max_iters: 500,
        }
    }
}

impl DplConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.eta_bounds;
        if !(self.eta_init > 0.0 && self.eta_init < 1.0) {
            return Err(config("dpl.eta_init must be in (0, 1)"));
        }
        if !(lo <= self.eta_init && self.eta_init <= hi) {
            return Err(config("dpl.eta_init must lie within dpl.eta_bounds"));
        }
        if !(self.eta_step > 0.0) || !(self.tolerance > 0.0) {
            return Err(config("dpl.eta_step and dpl.tolerance must be > 0"));
        }
        if !(self.mu >= 0.0) {
            return Err(config("dpl.mu must be >= 0"));
        }
        Ok(())
    }
}

/// Old-class probabilities, one row per image and one column per old class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    classes: Vec<usize>,
    data: Vec<f64>,
}

impl ScoreMatrix {
    /// `classes[j]` is the global class index of column `j`.
    pub fn new(rows: usize, classes: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes.len() {
            return Err(data_err(rows, classes.len(), data.len()));
        }
        if let Some(s) = data.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(crate::error::data(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { rows, classes, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.classes.len();
        &self.data[i * k..(i + 1) * k]
    }
}

fn data_err(rows: usize, cols: usize, len: usize) -> crate::error::Error {
    data(format!(
        "score matrix {rows}x{cols} needs {} values, got {len}",
        rows * cols
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelReport {
    pub final_eta: f64,
    pub beta: f64,
    pub mu_t: f64,
    /// Threshold adjustments performed.
    pub iterations: usize,
    pub converged: bool,
    /// Pseudo labels per image at `final_eta`.
    pub labels: Vec<ClassSet>,
}

impl PseudoLabelReport {
    pub fn total(&self) -> usize {
        self.labels.iter().map(ClassSet::len).sum()
    }
}

/// `μᵗ = (|old| / |all|) · μ`.
pub fn session_target(old_class_count: usize, total_class_count: usize, mu: f64) -> Result<f64> {
    if total_class_count == 0 {
        return Err(data("total class count must be positive"));
    }
    if old_class_count > total_class_count {
        return Err(data(format!(
            "old class count {old_class_count} exceeds total {total_class_count}"
        )));
    }
    Ok(old_class_count as f64 / total_class_count as f64 * mu)
}

/// Class `k` is pseudo-labeled on image `i` iff `scores[i,k] >= eta`, unless
/// image `i` already carries `k` as a true label in `existing`.
pub fn generate_pseudo_labels(
    scores: &ScoreMatrix,
    eta: f64,
    universe: usize,
    existing: Option<&[ClassSet]>,
) -> Result<Vec<ClassSet>> {
    if let Some(ex) = existing {
        if ex.len() != scores.rows {
            return Err(data(format!(
                "{} existing label sets for {} score rows",
                ex.len(),
                scores.rows
            )));
        }
    }
    if let Some(&c) = scores.classes.iter().find(|&&c| c >= universe) {
        return Err(data(format!("class {c} outside universe of {universe}")));
    }
    Ok((0..scores.rows)
        .map(|i| {
            let mut set = ClassSet::empty(universe);
            for (&p, &class) in scores.row(i).iter().zip(&scores.classes) {
                let known = existing.is_some_and(|ex| ex[i].contains(class));
                if p >= eta && !known {
                    set.insert(class);
                }
            }
            set
        })
        .collect())
}

fn count_at(scores: &ScoreMatrix, eta: f64, existing: Option<&[ClassSet]>) -> usize {
    (0..scores.rows)
        .map(|i| {
            scores
                .row(i)
                .iter()
                .zip(&scores.classes)
                .filter(|&(&p, &class)| p >= eta && !existing.is_some_and(|ex| ex[i].contains(class)))
                .count()
        })
        .sum()
}

/// Threshold `k` steps away from `eta_init`, snapped to 1e-9 so repeated
/// stepping does not drift off the decimal grid.
fn eta_at(cfg: &DplConfig, k: i64) -> f64 {
    ((cfg.eta_init + k as f64 * cfg.eta_step) * 1e9).round() / 1e9
}

pub fn dynamic_threshold_search(
    scores: &ScoreMatrix,
    cfg: &DplConfig,
    mu_t: f64,
    universe: usize,
    existing: Option<&[ClassSet]>,
) -> Result<PseudoLabelReport> {
    cfg.validate()?;
    if scores.rows == 0 {
        return Err(data("dynamic threshold search needs at least one image"));
    }
    let m = scores.rows as f64;
    let [lo, hi] = cfg.eta_bounds;
    let in_bounds = |eta: f64| eta >= lo - 1e-9 && eta <= hi + 1e-9;

    let mut k: i64 = 0;
    let mut visited = BTreeSet::new();
    let mut iterations = 0;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let mut converged = false;
    loop {
        visited.insert(k);
        let eta = eta_at(cfg, k);
        let beta = count_at(scores, eta, existing) as f64 / m;
        let gap = (beta - mu_t).abs();
        if gap <= best.0 {
            best = (gap, eta, beta);
        }
        if gap <= cfg.tolerance {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        let next = if beta > mu_t { k + 1 } else { k - 1 };
        if !in_bounds(eta_at(cfg, next)) || visited.contains(&next) {
            break;
        }
        k = next;
        iterations += 1;
    }
    let (_, final_eta, beta) = best;
    let labels = generate_pseudo_labels(scores, final_eta, universe, existing)?;
    Ok(PseudoLabelReport {
        final_eta,
        beta,
        mu_t,
        iterations,
        converged,
        labels,
    })
}

/// `Ŷᵗ = Yᵗ ∪ Sᵗ` per image. A class in both sets stays a true label. A
/// pseudo label naming a class of the current session is an error: it means
/// the scores were taken over the wrong class range.
pub fn merge_labels(
    true_labels: &[ClassSet],
    pseudo: &[ClassSet],
    current_classes: &ClassSet,
) -> Result<Vec<Annotation>> {
    if true_labels.len() != pseudo.len() {
        return Err(data(format!(
            "{} true label sets but {} pseudo label sets",
            true_labels.len(),
            pseudo.len()
        )));
    }
    true_labels
        .iter()
        .zip(pseudo)
        .enumerate()
        .map(|(i, (t, p))| {
            if !p.is_disjoint(current_classes) {
                let c = p.intersection(current_classes).iter().next().unwrap_or(0);
                return Err(data(format!("pseudo label for current-session class {c} on image {i}")));
            }
            Ok(Annotation {
                truth: t.clone(),
                pseudo: p.difference(t),
            })
        })
        .collect()
}
