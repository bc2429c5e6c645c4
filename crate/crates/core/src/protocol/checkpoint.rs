//! `KRT1` checkpoints: magic, a `u32` manifest length, a text manifest and
//! little-endian f32 payloads in manifest order.
//!
//! Manifest lines starting with `#` carry the model configuration as
//! `# key value`; every other line is `name dim0 dim1 ...`.

use std::path::Path;

use krt_tensor::Scalar;
use rand::SeedableRng;

use super::model::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::ica::KrInit;

pub const MAGIC: &[u8; 4] = b"KRT1";

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode<S: Scalar>(model: &ModelState<S>) -> Vec<u8> {
    let c = &model.cfg;
    let (h, w, ch) = model.grid;
    let mut manifest = String::new();
    let mut meta = |k: &str, v: String| manifest.push_str(&format!("# {k} {v}\n"));
    meta("grid", format!("{h} {w} {ch}"));
    meta("conv_channels", c.conv_channels.to_string());
    meta("conv_depth", c.conv_depth.to_string());
    meta("d", c.ica.d.to_string());
    meta("heads", c.ica.heads.to_string());
    meta("mlp_hidden", c.ica.mlp_hidden.map_or("auto".into(), |n| n.to_string()));
    meta("eps_norm", format!("{:e}", c.ica.eps_norm));
    meta(
        "kr_init",
        match c.ica.kr_init {
            KrInit::Random => "random".into(),
            KrInit::FromKt => "from_kt".into(),
        },
    );
    meta("use_ica", u8::from(model.uses_ica()).to_string());
    meta("sessions", model.session_count().to_string());
    let tensors = model.tensors();
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join(" ")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, t) in &tensors {
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Meta<'a>(Vec<(&'a str, &'a str)>);

impl Meta<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| fmt_err(format!("checkpoint manifest lacks `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(format!("checkpoint manifest has a bad `{key}`")))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ModelState<S>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fmt_err("not a KRT1 checkpoint"));
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let manifest = bytes
        .get(8..8 + mlen)
        .ok_or_else(|| fmt_err("truncated checkpoint manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| fmt_err("checkpoint manifest is not UTF-8"))?;

    let mut meta = Vec::new();
    let mut entries = Vec::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| fmt_err(format!("bad meta line `{line}`")))?;
            meta.push((k, v));
        } else {
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default();
            let shape = parts
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| fmt_err(format!("bad shape in `{line}`")))?;
            entries.push((name, shape));
        }
    }
    let meta = Meta(meta);
    let grid: Vec<usize> = meta
        .get("grid")?
        .split(' ')
        .map(|x| x.parse().map_err(|_| fmt_err("bad grid")))
        .collect::<Result<_>>()?;
    let [h, w, c] = grid[..] else {
        return Err(fmt_err("grid needs three extents"));
    };
    let d: usize = meta.num("d")?;
    let mut cfg = ModelConfig {
        conv_channels: meta.num("conv_channels")?,
        conv_depth: meta.num("conv_depth")?,
        ..ModelConfig::default()
    };
    cfg.ica.d = d;
    cfg.ica.l = d;
    cfg.ica.heads = meta.num("heads")?;
    cfg.ica.mlp_hidden = match meta.get("mlp_hidden")? {
        "auto" => None,
        _ => Some(meta.num("mlp_hidden")?),
    };
    cfg.ica.eps_norm = meta.num("eps_norm")?;
    cfg.ica.kr_init = match meta.get("kr_init")? {
        "random" => KrInit::Random,
        "from_kt" => KrInit::FromKt,
        other => return Err(fmt_err(format!("unknown kr_init `{other}`"))),
    };
    let use_ica = meta.num::<u8>("use_ica")? == 1;
    let sessions: usize = meta.num("sessions")?;

    // The skeleton's random values are all overwritten below.
    let mut rng = crate::seed::Rng::seed_from_u64(0);
    let mut model = ModelState::<S>::new(cfg, (h, w, c), use_ica, &mut rng)?;
    for s in 0..sessions {
        let name = format!("head.{s}.weight");
        let n = entries
            .iter()
            .find(|(e, _)| *e == name)
            .and_then(|(_, shape)| shape.get(1).copied())
            .ok_or_else(|| fmt_err(format!("checkpoint lacks `{name}`")))?;
        model.add_session(n, &mut rng);
    }

    let names: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != entries.len() {
        return Err(fmt_err(format!(
            "checkpoint lists {} tensors, the model has {}",
            entries.len(),
            names.len()
        )));
    }
    let mut pos = 8 + mlen;
    for ((want, shape), t) in names.iter().zip(model.tensors_mut()) {
        let (got, got_shape) = entries
            .iter()
            .find(|(e, _)| e == want)
            .ok_or_else(|| fmt_err(format!("checkpoint lacks `{want}`")))?;
        if got_shape != shape {
            return Err(fmt_err(format!("`{got}` has shape {got_shape:?}, expected {shape:?}")));
        }
        let n = t.numel();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| fmt_err("truncated checkpoint payload"))?;
        for (x, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = S::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        }
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes in checkpoint", bytes.len() - pos)));
    }
    // Manifest order must match the payload order.
    if entries
        .iter()
        .map(|(n, _)| *n)
        .ne(names.iter().map(|(n, _)| n.as_str()))
    {
        return Err(fmt_err("checkpoint tensors are not in model order"));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &ModelState<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ModelState<S>> {
    decode(&std::fs::read(path)?)
}
