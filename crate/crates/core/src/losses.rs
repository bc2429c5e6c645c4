//! Training objectives: asymmetric multi-label loss, token loss over
//! session-specific embeddings, pooled-feature distillation, and their sum.

use krt_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, data, Result};

/// How the token loss reduces the `t-1` old embeddings of one item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduction {
    /// One cosine over the concatenation of all old embeddings.
    #[default]
    Concatenated,
    /// Mean of per-session cosines.
    PerSession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Weight of the token loss.
    pub lambda: f64,
    /// Weight of the pooled-feature distillation term when enabled.
    pub kd_weight: f64,
    pub clamp_eps: f64,
    /// Probability margin subtracted from negatives (`max(p - m, 0)`); 0 disables it.
    pub neg_margin: f64,
    pub token_reduction: TokenReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            lambda: 100.0,
            kd_weight: 1.0,
            clamp_eps: krt_tensor::SIGMOID_EPS,
            neg_margin: 0.0,
            token_reduction: TokenReduction::Concatenated,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(config("loss.gamma_pos and loss.gamma_neg must be >= 0"));
        }
        if !(self.lambda >= 0.0) || !(self.kd_weight >= 0.0) {
            return Err(config("loss.lambda and loss.kd_weight must be >= 0"));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(config("loss.clamp_eps must be in (0, 0.5)"));
        }
        if !(0.0..1.0).contains(&self.neg_margin) {
            return Err(config("loss.neg_margin must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub asl: f64,
    pub token: f64,
    /// Weighted distillation term, when the arm uses it.
    pub kd: Option<f64>,
    pub total: f64,
}

/// Mean over all (sample, class) cells of `-(1-p)^γ+ log p` for positives and
/// `-p^γ- log(1-p)` for negatives. `probs` must already be clamped to
/// `[ε, 1-ε]`; `targets` is a constant 0/1 tensor of the same shape.
pub fn asl_loss<S: Scalar>(tape: &mut Tape<S>, probs: Var, targets: Var, cfg: &LossConfig) -> Result<Var> {
    if tape.shape(probs) != tape.shape(targets) {
        return Err(krt_tensor::TensorError::Shape {
            op: "asl_loss",
            lhs: tape.shape(probs).to_vec(),
            rhs: tape.shape(targets).to_vec(),
        }
        .into());
    }
    if let Some(y) = tape
        .value(targets)
        .data()
        .iter()
        .find(|&&y| y != S::zero() && y != S::one())
    {
        return Err(data(format!("asl target {y} is not 0 or 1")));
    }
    let shape = tape.shape(targets).to_vec();
    let neg_mask = {
        let t = tape.value(targets);
        let d = t.data().iter().map(|&y| S::one() - y).collect();
        Tensor::new(shape, d)?
    };
    let neg_mask = tape.constant(neg_mask);

    // Positive cells: (1-p)^γ+ · log p
    let log_p = tape.log(probs)?;
    let one_minus_p = tape.scale(probs, -1.0)?;
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0)?;
    let pos = if cfg.gamma_pos == 0.0 {
        log_p
    } else {
        let w = tape.pow(one_minus_p, cfg.gamma_pos)?;
        tape.mul(w, log_p)?
    };
    let pos = tape.mul(pos, targets)?;

    // Negative cells: p_m^γ- · log(1 - p_m), with p_m = max(p - m, 0)
    let (p_neg, one_minus_pneg) = if cfg.neg_margin > 0.0 {
        let shifted = tape.add_scalar(probs, -cfg.neg_margin)?;
        let pm = tape.relu(shifted)?;
        let om = tape.scale(pm, -1.0)?;
        let om = tape.add_scalar(om, 1.0)?;
        (pm, om)
    } else {
        (probs, one_minus_p)
    };
    let log_q = tape.log(one_minus_pneg)?;
    let neg = if cfg.gamma_neg == 0.0 {
        log_q
    } else {
        let w = tape.pow(p_neg, cfg.gamma_neg)?;
        tape.mul(w, log_q)?
    };
    let neg = tape.mul(neg, neg_mask)?;

    let cells = tape.add(pos, neg)?;
    let mean = tape.mean(cells)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// `1 - cos(flatten(prev), flatten(curr[..t-1]))`, averaged over the batch.
/// `prev` holds `t-1` snapshot embeddings (constants), `curr` holds `t`, each `[B×d]`.
pub fn token_loss<S: Scalar>(tape: &mut Tape<S>, prev: &[Var], curr: &[Var], reduction: TokenReduction) -> Result<Var> {
    if prev.is_empty() || curr.len() != prev.len() + 1 {
        return Err(data(format!(
            "token loss needs t-1 previous and t current embeddings, got {} and {}",
            prev.len(),
            curr.len()
        )));
    }
    let old = &curr[..prev.len()];
    let cos = match reduction {
        TokenReduction::Concatenated => {
            let a = tape.concat(prev, 1)?;
            let b = tape.concat(old, 1)?;
            let c = tape.cosine_similarity(a, b)?;
            tape.mean(c)?
        }
        TokenReduction::PerSession => {
            let mut per = Vec::with_capacity(prev.len());
            for (&p, &c) in prev.iter().zip(old) {
                let cs = tape.cosine_similarity(p, c)?;
                per.push(tape.mean(cs)?);
            }
            let mut flat = Vec::with_capacity(per.len());
            for v in per {
                flat.push(tape.reshape(v, [1])?);
            }
            let stacked = tape.concat(&flat, 0)?;
            tape.mean(stacked)?
        }
    };
    let neg = tape.scale(cos, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// `1 - mean_b cos(prev_b, curr_b)` over pooled features `[B×c]`.
pub fn kd_pooled_loss<S: Scalar>(tape: &mut Tape<S>, prev: Var, curr: Var) -> Result<Var> {
    let c = tape.cosine_similarity(prev, curr)?;
    let m = tape.mean(c)?;
    let neg = tape.scale(m, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Session 1 trains on the classification loss alone; later sessions add `λ·token`.
pub fn total_loss(asl: f64, token: f64, cfg: &LossConfig, session: usize) -> f64 {
    if session <= 1 {
        asl
    } else {
        asl + cfg.lambda * token
    }
}

/// Tape form of [`total_loss`] with the optional distillation term.
pub fn combine<S: Scalar>(
    tape: &mut Tape<S>,
    asl: Var,
    token: Option<Var>,
    kd: Option<Var>,
    cfg: &LossConfig,
    session: usize,
) -> Result<(Var, LossBreakdown)> {
    let read = |tape: &Tape<S>, v: Var| tape.value(v).data()[0].as_f64();
    let mut total = asl;
    let mut breakdown = LossBreakdown {
        asl: read(tape, asl),
        ..Default::default()
    };
    if session > 1 {
        if let Some(tok) = token {
            breakdown.token = read(tape, tok);
            let w = tape.scale(tok, cfg.lambda)?;
            total = tape.add(total, w)?;
        }
    }
    if let Some(kd) = kd {
        let w = tape.scale(kd, cfg.kd_weight)?;
        breakdown.kd = Some(read(tape, w));
        total = tape.add(total, w)?;
    }
    breakdown.total = read(tape, total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asl_scalar(p: f64, y: f64, cfg: &LossConfig) -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let pv = tape.constant(Tensor::from_f64([1, 1], &[p]).unwrap());
        let yv = tape.constant(Tensor::from_f64([1, 1], &[y]).unwrap());
        let l = asl_loss(&mut tape, pv, yv, cfg).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn gamma_zero_positive_half_is_ln2() {
        let cfg = LossConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            ..Default::default()
        };
        assert!((asl_scalar(0.5, 1.0, &cfg) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_positive_is_near_zero() {
        for g in [0.0, 1.0, 4.0] {
            let cfg = LossConfig {
                gamma_pos: g,
                ..Default::default()
            };
            assert!(asl_scalar(1.0 - 1e-7, 1.0, &cfg) < 1.1e-7);
        }
    }

    #[test]
    fn focused_negative_example() {
        let cfg = LossConfig::default();
        let v = asl_scalar(0.5, 0.0, &cfg);
        assert!((v - 0.0625 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn non_binary_target_is_error() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(Tensor::from_f64([2], &[0.5, 0.5]).unwrap());
        let y = tape.constant(Tensor::from_f64([2], &[1.0, 0.5]).unwrap());
        assert!(asl_loss(&mut tape, p, y, &LossConfig::default()).is_err());
    }

    #[test]
    fn margin_zeroes_easy_negatives() {
        let cfg = LossConfig {
            neg_margin: 0.05,
            ..Default::default()
        };
        assert_eq!(asl_scalar(0.04, 0.0, &cfg), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(0.3, 0.9, &cfg, 1), 0.3);
        let off = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(0.3, 0.9, &off, 4), 0.3);
        assert!((total_loss(0.5, 0.002, &cfg, 2) - 0.7).abs() < 1e-12);
    }

    fn token_of(prev: &[&[f64]], curr: &[&[f64]], reduction: TokenReduction) -> Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let d = prev[0].len();
        let mk = |tape: &mut Tape<f64>, v: &[f64]| tape.constant(Tensor::from_f64([1, d], v).unwrap());
        let p: Vec<Var> = prev.iter().map(|v| mk(&mut tape, v)).collect();
        let c: Vec<Var> = curr.iter().map(|v| mk(&mut tape, v)).collect();
        let l = token_loss(&mut tape, &p, &c, reduction)?;
        Ok(tape.value(l).data()[0])
    }

    #[test]
    fn token_loss_identity_and_negation() {
        let e1 = [0.3, -1.0, 2.0];
        let e2 = [1.0, 1.0, -0.5];
        let e3 = [9.0, 9.0, 9.0];
        let same = token_of(&[&e1, &e2], &[&e1, &e2, &e3], TokenReduction::Concatenated).unwrap();
        assert!(same.abs() < 1e-12);
        let n1: Vec<f64> = e1.iter().map(|x| -x).collect();
        let n2: Vec<f64> = e2.iter().map(|x| -x).collect();
        let neg = token_of(&[&e1, &e2], &[&n1, &n2, &e3], TokenReduction::Concatenated).unwrap();
        assert!((neg - 2.0).abs() < 1e-12);
        let neg = token_of(&[&e1, &e2], &[&n1, &n2, &e3], TokenReduction::PerSession).unwrap();
        assert!((neg - 2.0).abs() < 1e-12);
    }

    #[test]
    fn token_loss_length_mismatch() {
        let e = [1.0, 2.0];
        assert!(token_of(&[&e], &[&e], TokenReduction::Concatenated).is_err());
        assert!(token_of(&[&e], &[&e, &e, &e], TokenReduction::Concatenated).is_err());
    }

    #[test]
    fn kd_examples() {
        let run = |a: &[f64], b: &[f64], rows: usize| {
            let mut tape: Tape<f64> = Tape::new();
            let d = a.len() / rows;
            let av = tape.constant(Tensor::from_f64([rows, d], a).unwrap());
            let bv = tape.constant(Tensor::from_f64([rows, d], b).unwrap());
            let l = kd_pooled_loss(&mut tape, av, bv).unwrap();
            tape.value(l).data()[0]
        };
        assert!(run(&[1.0, 2.0], &[1.0, 2.0], 1).abs() < 1e-15);
        assert!((run(&[1.0, 0.0], &[0.0, 3.0], 1) - 1.0).abs() < 1e-15);
        assert!((run(&[1.0, 0.0, 1.0, 0.0], &[2.0, 0.0, 0.0, 1.0], 2) - 0.5).abs() < 1e-15);
    }
}
