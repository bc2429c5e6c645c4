//! Central finite-difference oracle for checking tape gradients.
//!
//! The numeric side only ever evaluates the forward function, so it is
//! independent of every backward rule it checks.

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index, analytic, numeric) of the worst failing element.
    pub worst: Option<(usize, usize, f64, f64)>,
    rel_tol: f64,
    abs_floor: f64,
}

impl GradCheck {
    /// True when every element satisfied `|a-n| <= abs_floor` or
    /// `|a-n| / max(|a|,|n|) < rel_tol`.
    pub fn passed(&self) -> bool {
        self.worst.is_none()
    }

    pub fn tolerances(&self) -> (f64, f64) {
        (self.rel_tol, self.abs_floor)
    }
}

/// Compares the tape gradient of `f(inputs)` w.r.t. every input against
/// central differences with the given `step`. Every input is treated as a
/// trainable leaf.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, step: f64, rel_tol: f64, abs_floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        rel_tol,
        abs_floor,
    };
    let mut worst_rel = -1.0;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            probe[ti].data_mut()[j] = x0 + step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = x0 - step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][j];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= rel_tol && rel > worst_rel {
                    worst_rel = rel;
                    report.worst = Some((ti, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
