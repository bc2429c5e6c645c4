//! Multi-label evaluation: per-class average precision, mAP, CF1, OF1 and
//! the average/last aggregates over incremental sessions.
//!
//! AP is the non-interpolated mean of precision at the rank of each
//! positive, ranking by descending score with ties kept in index order.
//! Classes without test positives are left out of the mAP and CF1 means.

use serde::{Deserialize, Serialize};

use crate::error::{data, Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores and binary truths for `n` images over `classes` classes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    n: usize,
    classes: usize,
    scores: Vec<f64>,
    truths: Vec<bool>,
}

impl EvalBatch {
    pub fn new(n: usize, classes: usize, scores: Vec<f64>, truths: Vec<bool>) -> Result<Self> {
        if scores.len() != n * classes || truths.len() != n * classes {
            return Err(data(format!(
                "eval batch of {n}x{classes} needs {} scores and truths, got {} and {}",
                n * classes,
                scores.len(),
                truths.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(data(format!("score {s} outside [0, 1]")));
        }
        Ok(Self {
            n,
            classes,
            scores,
            truths,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn column(&self, k: usize) -> (Vec<f64>, Vec<bool>) {
        let s = (0..self.n).map(|i| self.scores[i * self.classes + k]).collect();
        let t = (0..self.n).map(|i| self.truths[i * self.classes + k]).collect();
        (s, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub session: usize,
    /// Percent.
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    /// Percent; `None` for classes without test positives.
    pub per_class_ap: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub avg_map: f64,
    pub last_map: f64,
    pub last_cf1: f64,
    pub last_of1: f64,
}

/// AP in `[0, 1]`; `None` when `truths` has no positive.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truths.len(), "scores/truths length mismatch");
    let positives = truths.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so ties keep index order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Computes mAP, CF1 and OF1 (percent) with predictions `score >= threshold`.
pub fn evaluate(batch: &EvalBatch, threshold: f64, session: usize) -> Result<MetricsRecord> {
    if batch.n == 0 || batch.classes == 0 {
        return Err(data("cannot evaluate an empty batch"));
    }
    let mut per_class_ap = Vec::with_capacity(batch.classes);
    let mut class_f1 = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for k in 0..batch.classes {
        let (scores, truths) = batch.column(k);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&s, &t) in scores.iter().zip(&truths) {
            match (s >= threshold, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        let ap = average_precision(&scores, &truths);
        if ap.is_some() {
            class_f1.push(f1(tp, fp, fn_));
        }
        per_class_ap.push(ap.map(|a| a * 100.0));
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAp { class: 0 });
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    let cf1 = 100.0 * class_f1.iter().sum::<f64>() / class_f1.len() as f64;
    let of1 = 100.0 * f1(tp_all, fp_all, fn_all);
    Ok(MetricsRecord {
        session,
        map,
        cf1,
        of1,
        per_class_ap,
    })
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate> {
    let last = records
        .last()
        .ok_or_else(|| data("cannot aggregate an empty list of sessions"))?;
    Ok(Aggregate {
        avg_map: records.iter().map(|r| r.map).sum::<f64>() / records.len() as f64,
        last_map: last.map,
        last_cf1: last.cf1,
        last_of1: last.of1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_ranking_is_one() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1, 0.05], &[true, true, false, false]),
            Some(1.0)
        );
    }

    #[test]
    fn single_positive_last_is_one_over_n() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
    }

    #[test]
    fn worked_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn no_positive_is_undefined() {
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
    }

    #[test]
    fn all_ties_keep_index_order() {
        // Positives at indices 1 and 3 of 4 tied scores: (1/2 + 2/4) / 2.
        let ap = average_precision(&[0.5; 4], &[false, true, false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        // P/n when the positives lead the index order.
        let ap = average_precision(&[0.5; 4], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn perfect_predictor_scores_100() {
        let truths = vec![true, false, false, true, true, true];
        let scores = truths.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let r = evaluate(&EvalBatch::new(3, 2, scores, truths).unwrap(), DEFAULT_THRESHOLD, 1).unwrap();
        assert_eq!((r.map, r.cf1, r.of1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn all_zero_scores_give_zero_of1() {
        let truths = vec![true, false, false, true];
        let r = evaluate(&EvalBatch::new(2, 2, vec![0.0; 4], truths).unwrap(), 0.5, 1).unwrap();
        assert_eq!(r.of1, 0.0);
        assert_eq!(r.cf1, 0.0);
    }

    #[test]
    fn empty_batch_is_error() {
        assert!(evaluate(&EvalBatch::new(0, 3, vec![], vec![]).unwrap(), 0.5, 1).is_err());
        assert!(EvalBatch::new(1, 1, vec![1.5], vec![true]).is_err());
    }

    #[test]
    fn class_without_positives_is_excluded() {
        let r = evaluate(
            &EvalBatch::new(2, 2, vec![0.9, 0.8, 0.1, 0.7], vec![true, false, false, false]).unwrap(),
            0.5,
            1,
        )
        .unwrap();
        assert_eq!(r.per_class_ap, vec![Some(100.0), None]);
        assert_eq!(r.map, 100.0);
        assert_eq!(r.cf1, 100.0);
        // Class 1 still contributes its false positives to OF1.
        assert!((r.of1 - 100.0 * 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let rec = |map| MetricsRecord {
            session: 0,
            map,
            cf1: 1.0,
            of1: 2.0,
            per_class_ap: vec![],
        };
        let a = aggregate(&[rec(82.37), rec(79.54), rec(78.27), rec(75.95), rec(75.18)]).unwrap();
        assert!((a.avg_map - 78.26).abs() <= 0.01);
        assert_eq!(a.last_map, 75.18);
        let single = aggregate(&[rec(50.0)]).unwrap();
        assert_eq!(single.avg_map, single.last_map);
        assert!(aggregate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(
            scores in proptest::collection::vec(0.0f64..1.0, 1..12),
            mask in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let truths: Vec<bool> = mask[..scores.len()].to_vec();
            prop_assume!(truths.iter().any(|&t| t));
            let a = average_precision(&scores, &truths).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(a, average_precision(&transformed, &truths).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
