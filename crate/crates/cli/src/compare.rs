//! Side-by-side table of finished runs.

use std::fmt::Write as _;

use crate::error::{CliError, Result};
use crate::experiment::RunResult;

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    pub avg_map: f64,
    pub last_map: f64,
    pub last_cf1: f64,
    pub last_of1: f64,
    pub session_maps: Vec<f64>,
    /// `last_map` minus the first row's `last_map`.
    pub delta_last: f64,
    pub delta_avg: f64,
}

fn label(r: &RunResult) -> String {
    format!("{} (seed {})", r.config.protocol.arm, r.config.seed)
}

/// Runs must share one plan and one dataset; the first is the reference.
pub fn compare(results: &[RunResult]) -> Result<Vec<Row>> {
    let Some(first) = results.first() else {
        return Err(CliError::Config("compare needs at least two results".into()));
    };
    if results.len() < 2 {
        return Err(CliError::Config("compare needs at least two results".into()));
    }
    for (i, r) in results.iter().enumerate().skip(1) {
        // upper_bound collapses the plan into one session, so only the class
        // order is shared with incremental arms.
        if r.plan.class_order != first.plan.class_order {
            return Err(CliError::Data(format!(
                "result {i} was run on a different plan than result 0"
            )));
        }
        let joint = |x: &RunResult| x.plan.session_count() == 1;
        if !joint(r) && !joint(first) && r.plan != first.plan {
            return Err(CliError::Data(format!(
                "result {i} was run on a different plan than result 0"
            )));
        }
        if r.dataset.fingerprint != first.dataset.fingerprint {
            return Err(CliError::Data(format!(
                "result {i} used dataset {} but result 0 used {}",
                r.dataset.fingerprint, first.dataset.fingerprint
            )));
        }
    }
    let rows = results.iter().map(|r| {
        let last = r.sessions.last();
        Row {
            label: label(r),
            avg_map: r.aggregate.avg_map,
            last_map: r.aggregate.last_map,
            last_cf1: last.map_or(f64::NAN, |s| s.metrics.cf1),
            last_of1: last.map_or(f64::NAN, |s| s.metrics.of1),
            session_maps: r.sessions.iter().map(|s| s.metrics.map).collect(),
            delta_last: r.aggregate.last_map - first.aggregate.last_map,
            delta_avg: r.aggregate.avg_map - first.aggregate.avg_map,
        }
    });
    Ok(rows.collect())
}

fn signed(x: f64) -> String {
    if x.abs() < 0.005 {
        "0.00".into()
    } else {
        format!("{x:+.2}")
    }
}

pub fn render(rows: &[Row]) -> String {
    let sessions = rows.iter().map(|r| r.session_maps.len()).max().unwrap_or(0);
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(3);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        "arm", "avg", "last", "cf1", "of1", "d_avg", "d_last"
    );
    for s in 1..=sessions {
        let _ = write!(out, "  {:>6}", format!("s{s}"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7}  {:>7}",
            r.label,
            r.avg_map,
            r.last_map,
            r.last_cf1,
            r.last_of1,
            signed(r.delta_avg),
            signed(r.delta_last)
        );
        for m in &r.session_maps {
            let _ = write!(out, "  {m:>6.2}");
        }
        out.push('\n');
    }
    out
}
