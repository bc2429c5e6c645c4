//! Incremental cross-attention.
//!
//! One attention block is shared by every session. The unified KT token is
//! the only query; session `s` attends over `[x_R^s; patches]` where `x_R^s`
//! is that session's KR token. Old KR tokens are frozen when a session is
//! added, so the embeddings of earlier sessions only move through the shared
//! weights.

use std::io::Write;

use krt_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrInit {
    #[default]
    Random,
    /// Copy the KT token at the time the session is added.
    FromKt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcaConfig {
    pub d: usize,
    pub l: usize,
    pub heads: usize,
    /// Defaults to `4 * d`.
    pub mlp_hidden: Option<usize>,
    pub eps_norm: f64,
    pub kr_init: KrInit,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            d: 384,
            l: 384,
            heads: 8,
            mlp_hidden: None,
            eps_norm: 1e-5,
            kr_init: KrInit::Random,
        }
    }
}

impl IcaConfig {
    pub fn desk(d: usize, heads: usize) -> Self {
        Self {
            d,
            l: d,
            heads,
            ..Self::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.d)
    }

    pub fn head_dim(&self) -> usize {
        self.l / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.hidden() == 0 {
            return Err(config("ica.d, ica.heads and ica.mlp_hidden must be positive"));
        }
        if self.d != self.l {
            return Err(config(format!("ica.d ({}) must equal ica.l ({})", self.d, self.l)));
        }
        if self.l % self.heads != 0 {
            return Err(config(format!(
                "ica.l ({}) must be divisible by ica.heads ({})",
                self.l, self.heads
            )));
        }
        if !(self.eps_norm > 0.0) {
            return Err(config("ica.eps_norm must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaState<S: Scalar = f64> {
    pub cfg: IcaConfig,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub norm_gain: Tensor<S>,
    pub norm_bias: Tensor<S>,
    pub mlp_norm_gain: Tensor<S>,
    pub mlp_norm_bias: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub kt: Tensor<S>,
    /// One per session; all but the last are frozen.
    pub kr: Vec<Tensor<S>>,
}

fn token<S: Scalar, R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor<S> {
    Tensor::uniform([d], -1.0, 1.0, rng).with_requires_grad(true)
}

impl<S: Scalar> IcaState<S> {
    /// Fresh block with zero sessions.
    pub fn new<R: Rng + ?Sized>(cfg: IcaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, l, hid) = (cfg.d, cfg.l, cfg.hidden());
        let p = |t: Tensor<S>| t.with_requires_grad(true);
        Ok(Self {
            wq: p(Tensor::uniform_fan_in([d, l], d, rng)),
            wk: p(Tensor::uniform_fan_in([d, l], d, rng)),
            wv: p(Tensor::uniform_fan_in([d, l], d, rng)),
            wo: p(Tensor::uniform_fan_in([l, d], l, rng)),
            bo: p(Tensor::zeros([d])),
            norm_gain: p(Tensor::full([d], S::one())),
            norm_bias: p(Tensor::zeros([d])),
            mlp_norm_gain: p(Tensor::full([d], S::one())),
            mlp_norm_bias: p(Tensor::zeros([d])),
            w1: p(Tensor::uniform_fan_in([d, hid], d, rng)),
            b1: p(Tensor::uniform_fan_in([hid], d, rng)),
            w2: p(Tensor::uniform_fan_in([hid, d], hid, rng)),
            b2: p(Tensor::uniform_fan_in([d], hid, rng)),
            kt: token(d, rng),
            kr: Vec::new(),
            cfg,
        })
    }

    pub fn session_count(&self) -> usize {
        self.kr.len()
    }

    pub fn frozen_flags(&self) -> Vec<bool> {
        self.kr.iter().map(|t| !t.requires_grad()).collect()
    }

    /// Appends a KR token and freezes the earlier ones.
    pub fn add_session<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for t in &mut self.kr {
            t.set_requires_grad(false);
        }
        let fresh = match self.cfg.kr_init {
            KrInit::Random => token(self.cfg.d, rng),
            KrInit::FromKt => self.kt.clone().with_requires_grad(true),
        };
        self.kr.push(fresh);
    }

    /// Named tensors in binding order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("norm_gain", &self.norm_gain),
            ("norm_bias", &self.norm_bias),
            ("mlp_norm_gain", &self.mlp_norm_gain),
            ("mlp_norm_bias", &self.mlp_norm_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("kt", &self.kt),
        ]
        .into_iter()
        .map(|(n, t)| (format!("ica.{n}"), t))
        .collect();
        out.extend(self.kr.iter().enumerate().map(|(i, t)| (format!("ica.kr.{i}"), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.mlp_norm_gain,
            &mut self.mlp_norm_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.kt,
        ];
        out.extend(self.kr.iter_mut());
        out
    }

    /// Registers every tensor on the tape; frozen tokens become constants.
    pub fn bind(&self, tape: &mut Tape<S>) -> IcaVars {
        let mut leaf = |t: &Tensor<S>| tape.leaf(t.clone());
        IcaVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
            bo: leaf(&self.bo),
            norm_gain: leaf(&self.norm_gain),
            norm_bias: leaf(&self.norm_bias),
            mlp_norm_gain: leaf(&self.mlp_norm_gain),
            mlp_norm_bias: leaf(&self.mlp_norm_bias),
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
            kt: leaf(&self.kt),
            kr: self.kr.iter().map(&mut leaf).collect(),
        }
    }

    fn check_patches(&self, patches: &Tensor<S>) -> Result<usize> {
        match patches.shape() {
            [l, d] if *d == self.cfg.d && *l > 0 => Ok(*l),
            other => Err(config(format!("patches must be [L x {}], got {other:?}", self.cfg.d))),
        }
    }

    fn check_session(&self, session: usize) -> Result<()> {
        if session == 0 || session > self.session_count() {
            return Err(Error::SessionOutOfRange {
                session,
                count: self.session_count(),
            });
        }
        Ok(())
    }

    /// Embedding `e^s` of one image for 1-based `session`.
    pub fn forward(&self, session: usize, patches: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_session(session)?;
        let l = self.check_patches(patches)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let p = tape.constant(patches.clone().reshape([1, l, self.cfg.d])?);
        let out = forward_batch(&mut tape, &vars, &self.cfg, p, session - 1..session)?;
        Ok(tape.value(out.embeddings[0]).clone().reshape([self.cfg.d])?)
    }

    /// `[e^1, ..., e^t]` for one image.
    pub fn forward_all_sessions(&self, patches: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let l = self.check_patches(patches)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let p = tape.constant(patches.clone().reshape([1, l, self.cfg.d])?);
        let out = forward_batch(&mut tape, &vars, &self.cfg, p, 0..self.session_count())?;
        out.embeddings
            .iter()
            .map(|&e| Ok(tape.value(e).clone().reshape([self.cfg.d])?))
            .collect()
    }

    /// Attention weights `[heads x (L+1)]` of one image for 1-based `session`;
    /// column 0 is the KR token.
    pub fn attention_weights(&self, session: usize, patches: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_session(session)?;
        let l = self.check_patches(patches)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let p = tape.constant(patches.clone().reshape([1, l, self.cfg.d])?);
        let out = forward_batch(&mut tape, &vars, &self.cfg, p, session - 1..session)?;
        let rows = tape.concat(&out.attention[0], 0)?;
        Ok(tape.value(rows).clone())
    }

    /// Bare cross-attention on already normalized inputs: `kt` and `kr` are
    /// `[d]`, `patches` is `[L x d]`.
    pub fn cross_attention(&self, kt: &Tensor<S>, kr: &Tensor<S>, patches: &Tensor<S>) -> Result<Tensor<S>> {
        let d = self.cfg.d;
        let l = self.check_patches(patches)?;
        for t in [kt, kr] {
            if t.shape() != [d] {
                return Err(config(format!("token must be [{d}], got {:?}", t.shape())));
            }
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let q = tape.constant(kt.clone().reshape([1, d])?);
        let r = tape.constant(kr.clone().reshape([1, d])?);
        let p = tape.constant(patches.clone());
        let kv = project_patches(&mut tape, &vars, &self.cfg, p, 1, l)?;
        let (z, _) = attend(&mut tape, &vars, &self.cfg, q, r, &kv)?;
        Ok(tape.value(z).clone().reshape([d])?)
    }
}

/// Tape handles for an [`IcaState`], in [`IcaState::tensors`] order.
#[derive(Clone, Debug)]
pub struct IcaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub mlp_norm_gain: Var,
    pub mlp_norm_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub kt: Var,
    pub kr: Vec<Var>,
}

impl IcaVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.bo,
            self.norm_gain,
            self.norm_bias,
            self.mlp_norm_gain,
            self.mlp_norm_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.kt,
        ];
        out.extend(&self.kr);
        out
    }
}

pub struct IcaForward {
    /// `[B x d]` per requested session, in session order.
    pub embeddings: Vec<Var>,
    /// `[B x (L+1)]` per session and head.
    pub attention: Vec<Vec<Var>>,
}

/// Per-head patch keys and values, shared by every session.
struct PatchKv {
    batch: usize,
    len: usize,
    keys: Vec<Var>,
    values: Vec<Var>,
}

fn project_patches<S: Scalar>(
    tape: &mut Tape<S>,
    v: &IcaVars,
    cfg: &IcaConfig,
    normed: Var,
    batch: usize,
    len: usize,
) -> Result<PatchKv> {
    let hd = cfg.head_dim();
    let k = tape.matmul(normed, v.wk)?;
    let val = tape.matmul(normed, v.wv)?;
    let mut keys = Vec::with_capacity(cfg.heads);
    let mut values = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        keys.push(tape.slice(k, 1, h * hd..(h + 1) * hd)?);
        let vh = tape.slice(val, 1, h * hd..(h + 1) * hd)?;
        values.push(tape.reshape(vh, [batch, len, hd])?);
    }
    Ok(PatchKv {
        batch,
        len,
        keys,
        values,
    })
}

/// Multi-head attention of the single query row `q` (`[1 x d]`) over
/// `[kr; patches]`. Returns `[B x d]` and the per-head weights.
fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    v: &IcaVars,
    cfg: &IcaConfig,
    q: Var,
    kr: Var,
    kv: &PatchKv,
) -> Result<(Var, Vec<Var>)> {
    let (b, len, hd) = (kv.batch, kv.len, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let query = tape.matmul(q, v.wq)?;
    let kr_key = tape.matmul(kr, v.wk)?;
    let kr_val = tape.matmul(kr, v.wv)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = tape.slice(query, 1, cols.clone())?;
        let qt = tape.transpose(qh)?;

        let sp = tape.matmul(kv.keys[h], qt)?;
        let sp = tape.reshape(sp, [b, len])?;
        let kh = tape.slice(kr_key, 1, cols.clone())?;
        let sr = tape.matmul(kh, qt)?;
        let sr = tape.repeat(sr, b)?;
        let sr = tape.reshape(sr, [b, 1])?;
        let scores = tape.concat(&[sr, sp], 1)?;
        let scores = tape.scale(scores, scale)?;
        let a = tape.softmax_rows(scores)?;
        weights.push(a);

        let vr = tape.slice(kr_val, 1, cols)?;
        let vr = tape.repeat(vr, b)?;
        let vals = tape.concat(&[vr, kv.values[h]], 1)?;
        let a3 = tape.reshape(a, [b, 1, len + 1])?;
        let o = tape.bmm(a3, vals)?;
        heads.push(tape.reshape(o, [b, hd])?);
    }
    let joined = tape.concat(&heads, 1)?;
    let z = tape.matmul(joined, v.wo)?;
    let bias = tape.repeat(v.bo, b)?;
    Ok((tape.add(z, bias)?, weights))
}

/// Embeddings for sessions in `sessions` (0-based) of a batch of patch
/// sequences `[B x L x d]`.
pub fn forward_batch<S: Scalar>(
    tape: &mut Tape<S>,
    v: &IcaVars,
    cfg: &IcaConfig,
    patches: Var,
    sessions: std::ops::Range<usize>,
) -> Result<IcaForward> {
    let (b, len, d) = match *tape.shape(patches) {
        [b, l, d] if d == cfg.d => (b, l, d),
        ref other => {
            return Err(config(format!("patches must be [B x L x {}], got {other:?}", cfg.d)));
        }
    };
    if sessions.end > v.kr.len() {
        return Err(Error::SessionOutOfRange {
            session: sessions.end,
            count: v.kr.len(),
        });
    }
    let eps = cfg.eps_norm;
    let flat = tape.reshape(patches, [b * len, d])?;
    let pn = tape.layer_norm(flat, v.norm_gain, v.norm_bias, eps)?;
    let kv = project_patches(tape, v, cfg, pn, b, len)?;
    let kt = tape.reshape(v.kt, [1, d])?;
    let qn = tape.layer_norm(kt, v.norm_gain, v.norm_bias, eps)?;
    let kt_rows = tape.repeat(v.kt, b)?;

    let mut embeddings = Vec::with_capacity(sessions.len());
    let mut attention = Vec::with_capacity(sessions.len());
    for s in sessions {
        let kr = tape.reshape(v.kr[s], [1, d])?;
        let krn = tape.layer_norm(kr, v.norm_gain, v.norm_bias, eps)?;
        let (z, w) = attend(tape, v, cfg, qn, krn, &kv)?;
        let e1 = tape.add(kt_rows, z)?;
        let n = tape.layer_norm(e1, v.mlp_norm_gain, v.mlp_norm_bias, eps)?;
        let h = tape.matmul(n, v.w1)?;
        let b1 = tape.repeat(v.b1, b)?;
        let h = tape.add(h, b1)?;
        let h = tape.gelu(h)?;
        let m = tape.matmul(h, v.w2)?;
        let b2 = tape.repeat(v.b2, b)?;
        let m = tape.add(m, b2)?;
        embeddings.push(tape.add(e1, m)?);
        attention.push(w);
    }
    Ok(IcaForward { embeddings, attention })
}

/// Writes `[heads x (L+1)]` weights as a `heads L+1` text line followed by
/// row-major little-endian f32 values.
pub fn write_attention<S: Scalar, W: Write>(weights: &Tensor<S>, mut out: W) -> Result<()> {
    let [heads, cols] = *weights.shape() else {
        return Err(config(format!(
            "attention weights must be 2-D, got {:?}",
            weights.shape()
        )));
    };
    writeln!(out, "{heads} {cols}")?;
    for &w in weights.data() {
        out.write_all(&(w.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream, INIT};

    fn state(sessions: usize) -> IcaState<f64> {
        let mut rng = stream(7, INIT);
        let mut s = IcaState::new(IcaConfig::desk(16, 2), &mut rng).unwrap();
        for _ in 0..sessions {
            s.add_session(&mut rng);
        }
        s
    }

    #[test]
    fn config_invariants() {
        assert!(IcaConfig::default().validate().is_ok());
        assert!(IcaConfig {
            l: 32,
            ..IcaConfig::desk(16, 2)
        }
        .validate()
        .is_err());
        assert!(IcaConfig::desk(18, 4).validate().is_err());
        assert_eq!(IcaConfig::default().hidden(), 1536);
    }

    #[test]
    fn default_scale_divisor() {
        let c = IcaConfig::default();
        assert!(((c.head_dim() as f64).sqrt() - 6.9282).abs() < 1e-4);
    }

    #[test]
    fn frozen_flags_after_three_sessions() {
        let s = state(3);
        assert_eq!(s.session_count(), 3);
        assert_eq!(s.frozen_flags(), vec![true, true, false]);
        assert!(s.kt.requires_grad());
    }

    #[test]
    fn add_session_leaves_old_state_untouched() {
        let mut s = state(2);
        let before = s.clone();
        s.add_session(&mut stream(1, INIT));
        assert_eq!(s.wq, before.wq);
        assert_eq!(s.wo, before.wo);
        assert_eq!(s.kt, before.kt);
        for (a, b) in s.kr.iter().zip(&before.kr) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn tensor_names_match_binding_order() {
        let s = state(2);
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let names = s.tensors();
        assert_eq!(names.len(), vars.all().len());
        for ((_, t), v) in names.iter().zip(vars.all()) {
            assert_eq!(tape.value(v).shape(), t.shape());
            assert_eq!(tape.requires_grad(v), t.requires_grad());
        }
    }

    #[test]
    fn session_out_of_range() {
        let s = state(2);
        let p = Tensor::zeros([3, 16]);
        assert!(matches!(s.forward(0, &p), Err(Error::SessionOutOfRange { .. })));
        assert!(matches!(s.forward(3, &p), Err(Error::SessionOutOfRange { .. })));
    }

    #[test]
    fn single_patch_identical_to_kr_gives_even_weights() {
        let mut s = state(1);
        let p = s.kr[0].clone().with_requires_grad(false).reshape([1, 16]).unwrap();
        let w = s.attention_weights(1, &p).unwrap();
        assert_eq!(w.shape(), [2, 2]);
        for &x in w.data() {
            assert!((x - 0.5).abs() < 1e-12);
        }
        s.kr[0] = Tensor::zeros([16]);
        assert!(s.forward(1, &Tensor::zeros([4, 16])).is_ok());
    }

    #[test]
    fn attention_export_layout() {
        let w = Tensor::<f64>::from_f64([2, 3], &[0.1, 0.2, 0.7, 0.3, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        write_attention(&w, &mut buf).unwrap();
        assert!(buf.starts_with(b"2 3\n"));
        assert_eq!(buf.len(), 4 + 6 * 4);
        let first = f32::from_le_bytes(buf[4..8].try_into().unwrap());
        assert_eq!(first, 0.1f32);
    }
}
