//! Full classifier: a small convolutional patch extractor, a projection to
//! `d` with fixed sinusoidal positions, then either the ICA block with one
//! head per session or (ablation) global average pooling into the heads.

use krt_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::ica::{forward_batch, IcaConfig, IcaState, IcaVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each 3x3 extractor layer.
    pub conv_channels: usize,
    pub conv_depth: usize,
    pub ica: IcaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: 32,
            conv_depth: 1,
            ica: IcaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels == 0 || self.conv_depth == 0 {
            return Err(config("model.conv_channels and model.conv_depth must be positive"));
        }
        self.ica.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Affine<S> {
    fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform_fan_in([fan_in, fan_out], fan_in, rng).with_requires_grad(true),
            bias: Tensor::uniform_fan_in([fan_out], fan_in, rng).with_requires_grad(true),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = p as f64 / rate;
            data.push(S::of(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new([len, d], data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S: Scalar = f64> {
    pub cfg: ModelConfig,
    /// Input grid `(h, w, c)`.
    pub grid: (usize, usize, usize),
    pub conv: Vec<Affine<S>>,
    pub proj: Affine<S>,
    /// Fixed, `[h*w x d]`.
    pub pos: Tensor<S>,
    /// `None` for the pooled ablation.
    pub ica: Option<IcaState<S>>,
    pub heads: Vec<Affine<S>>,
}

pub struct ModelVars {
    conv: Vec<(Var, Var)>,
    proj: (Var, Var),
    pos: Var,
    ica: Option<IcaVars>,
    heads: Vec<(Var, Var)>,
    all: Vec<Var>,
}

impl ModelVars {
    /// Parameter handles in [`ModelState::tensors`] order.
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

pub struct ModelForward {
    /// `[B x N]` over the concatenated session heads.
    pub logits: Var,
    /// Per-session embeddings `[B x d]`; empty without ICA.
    pub embeddings: Vec<Var>,
    /// Mean of the positioned patch tokens, `[B x d]`.
    pub pooled: Var,
}

impl<S: Scalar> ModelState<S> {
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        grid: (usize, usize, usize),
        use_ica: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w, c) = grid;
        if h * w * c == 0 {
            return Err(config("input grid must be non-empty"));
        }
        let d = cfg.ica.d;
        let mut conv = Vec::with_capacity(cfg.conv_depth);
        let mut cin = c;
        for _ in 0..cfg.conv_depth {
            conv.push(Affine::new(9 * cin, cfg.conv_channels, rng));
            cin = cfg.conv_channels;
        }
        let proj = Affine::new(cin, d, rng);
        let ica = if use_ica {
            Some(IcaState::new(cfg.ica.clone(), rng)?)
        } else {
            None
        };
        Ok(Self {
            pos: sinusoidal(h * w, d),
            cfg,
            grid,
            conv,
            proj,
            ica,
            heads: Vec::new(),
        })
    }

    pub fn session_count(&self) -> usize {
        self.heads.len()
    }

    pub fn output_count(&self) -> usize {
        self.heads.iter().map(Affine::outputs).sum()
    }

    pub fn uses_ica(&self) -> bool {
        self.ica.is_some()
    }

    /// Appends a head for `classes` outputs and, with ICA, a KR token.
    pub fn add_session<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) {
        self.heads.push(Affine::new(self.cfg.ica.d, classes, rng));
        if let Some(ica) = &mut self.ica {
            ica.add_session(rng);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, a) in self.conv.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), &a.weight));
            out.push((format!("conv.{i}.bias"), &a.bias));
        }
        out.push(("proj.weight".into(), &self.proj.weight));
        out.push(("proj.bias".into(), &self.proj.bias));
        if let Some(ica) = &self.ica {
            out.extend(ica.tensors());
        }
        for (i, a) in self.heads.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &a.weight));
            out.push((format!("head.{i}.bias"), &a.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for a in &mut self.conv {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out.push(&mut self.proj.weight);
        out.push(&mut self.proj.bias);
        if let Some(ica) = &mut self.ica {
            out.extend(ica.tensors_mut());
        }
        for a in &mut self.heads {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> ModelVars {
        let mut all = Vec::new();
        let pair = |tape: &mut Tape<S>, a: &Affine<S>, all: &mut Vec<Var>| {
            let w = tape.leaf(a.weight.clone());
            let b = tape.leaf(a.bias.clone());
            all.push(w);
            all.push(b);
            (w, b)
        };
        let conv = self.conv.iter().map(|a| pair(tape, a, &mut all)).collect();
        let proj = pair(tape, &self.proj, &mut all);
        let ica = self.ica.as_ref().map(|s| {
            let v = s.bind(tape);
            all.extend(v.all());
            v
        });
        let heads = self.heads.iter().map(|a| pair(tape, a, &mut all)).collect();
        let pos = tape.constant(self.pos.clone());
        ModelVars {
            conv,
            proj,
            pos,
            ica,
            heads,
            all,
        }
    }

    /// Forward pass of a batch `[B x h x w x c]`.
    pub fn forward(&self, tape: &mut Tape<S>, v: &ModelVars, input: Var) -> Result<ModelForward> {
        let (h, w, c) = self.grid;
        let b = match *tape.shape(input) {
            [b, hh, ww, cc] if (hh, ww, cc) == (h, w, c) => b,
            ref other => {
                return Err(config(format!("input must be [B x {h} x {w} x {c}], got {other:?}")));
            }
        };
        if self.heads.is_empty() {
            return Err(config("model has no session heads"));
        }
        let (l, d) = (h * w, self.cfg.ica.d);
        let mut x = input;
        let mut flat = input;
        for &(wt, bias) in &v.conv {
            let n = tape.neighborhood3x3(x)?;
            let y = tape.matmul(n, wt)?;
            let bias = tape.repeat(bias, b * l)?;
            let y = tape.add(y, bias)?;
            flat = tape.gelu(y)?;
            let cout = tape.shape(flat)[1];
            x = tape.reshape(flat, [b, h, w, cout])?;
        }
        let p = tape.matmul(flat, v.proj.0)?;
        let pb = tape.repeat(v.proj.1, b * l)?;
        let p = tape.add(p, pb)?;
        let p = tape.reshape(p, [b, l, d])?;
        let pos = tape.repeat(v.pos, b)?;
        let patches = tape.add(p, pos)?;
        let pooled = tape.mean_axis(patches, 1)?;

        let embeddings = match (&self.ica, &v.ica) {
            (Some(s), Some(iv)) => forward_batch(tape, iv, &s.cfg, patches, 0..self.heads.len())?.embeddings,
            _ => Vec::new(),
        };
        let mut outs = Vec::with_capacity(v.heads.len());
        for (s, &(wt, bias)) in v.heads.iter().enumerate() {
            let feat = if embeddings.is_empty() { pooled } else { embeddings[s] };
            let o = tape.matmul(feat, wt)?;
            let ob = tape.repeat(bias, b)?;
            outs.push(tape.add(o, ob)?);
        }
        let logits = tape.concat(&outs, 1)?;
        Ok(ModelForward {
            logits,
            embeddings,
            pooled,
        })
    }

    /// Inference outputs for a batch given as flat `h*w*c` feature rows.
    pub fn infer(&self, rows: &[&[f32]]) -> Result<Inference<S>> {
        let (h, w, c) = self.grid;
        let mut data = Vec::with_capacity(rows.len() * h * w * c);
        for r in rows {
            if r.len() != h * w * c {
                return Err(config(format!(
                    "feature row of {} values, expected {}",
                    r.len(),
                    h * w * c
                )));
            }
            data.extend(r.iter().map(|&f| S::of(f as f64)));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let input = tape.constant(Tensor::new([rows.len(), h, w, c], data)?);
        let out = self.forward(&mut tape, &vars, input)?;
        let flat = |v: Var| tape.value(v).to_f64_vec();
        Ok(Inference {
            batch: rows.len(),
            logits: flat(out.logits),
            embeddings: out.embeddings.iter().map(|&e| tape.value(e).data().to_vec()).collect(),
            pooled: tape.value(out.pooled).data().to_vec(),
        })
    }
}

/// Detached forward outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<S = f64> {
    pub batch: usize,
    /// `[B x N]` row-major.
    pub logits: Vec<f64>,
    /// Per session, `[B x d]` row-major.
    pub embeddings: Vec<Vec<S>>,
    pub pooled: Vec<S>,
}

impl<S> Inference<S> {
    /// Sigmoid probabilities in full precision, without clamping.
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| krt_tensor::sigmoid(z)).collect()
    }
}
