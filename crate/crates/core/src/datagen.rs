//! Synthetic multi-label "images".
//!
//! Every class owns a prototype vector of `c` channels. An image picks a
//! label set, stamps each present prototype into its own grid cell and adds
//! Gaussian noise. Classes are therefore visible to a small local extractor
//! while cell positions vary from image to image.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::labels::ClassSet;
use crate::seed::{self as seeds, item_seed, stream_seed};

pub const MAGIC: &[u8; 4] = b"MLDS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_classes: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub avg_labels: f64,
    pub noise_sigma: f64,
    /// 0 gives independent labels.
    pub co_occurrence: f64,
    /// Norm of every class prototype.
    pub amplitude: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_classes: 20,
            h: 8,
            w: 8,
            c: 8,
            avg_labels: 2.9,
            noise_sigma: 0.25,
            co_occurrence: 1.0,
            amplitude: 3.0,
            n_train: 2000,
            n_test: 500,
        }
    }
}

impl GenSpec {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Largest label set an image may carry.
    pub fn max_labels(&self) -> usize {
        self.n_classes.min(self.cells())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(config("datagen.n_classes must be at least 2"));
        }
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(config("datagen grid and channels must be positive"));
        }
        if !(self.avg_labels >= 1.0 && self.avg_labels <= self.n_classes as f64) {
            return Err(config(format!(
                "datagen.avg_labels {} must be in [1, {}]",
                self.avg_labels, self.n_classes
            )));
        }
        if self.avg_labels > self.cells() as f64 {
            return Err(config(format!(
                "datagen.avg_labels {} exceeds the {} grid cells",
                self.avg_labels,
                self.cells()
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.co_occurrence >= 0.0) || !(self.amplitude > 0.0) {
            return Err(config(
                "datagen.noise_sigma and co_occurrence must be >= 0, amplitude > 0",
            ));
        }
        if self.n_train < self.n_classes || self.n_test < self.n_classes {
            return Err(config("datagen.n_train and n_test must each be at least n_classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub labels: ClassSet,
    /// `h x w x c`, row-major.
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub class_names: Vec<String>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.h * self.w * self.c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    /// Class prototypes, `n_classes x c`.
    pub prototypes: Vec<Vec<f64>>,
}

pub fn class_name(k: usize) -> String {
    format!("class_{k:03}")
}

/// Symmetric positive affinities with a zero diagonal.
fn affinity(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            // Squaring concentrates most mass on a few strong pairs.
            let v: f64 = rng.gen::<f64>().powi(2);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    a
}

struct Sampler<'a> {
    spec: &'a GenSpec,
    prototypes: &'a [Vec<f64>],
    affinity: &'a [f64],
    structure_seed: u64,
    noise_seed: u64,
}

impl Sampler<'_> {
    fn label_count(&self, rng: &mut impl Rng) -> usize {
        let extra = self.spec.avg_labels - 1.0;
        let k = if extra > 0.0 {
            1 + Poisson::new(extra).expect("positive rate").sample(rng) as usize
        } else {
            1
        };
        k.min(self.spec.max_labels())
    }

    fn labels(&self, first: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.spec.n_classes;
        let count = self.label_count(rng);
        let mut chosen = vec![first.unwrap_or_else(|| rng.gen_range(0..n))];
        while chosen.len() < count {
            let weights: Vec<f64> = (0..n)
                .map(|k| {
                    if chosen.contains(&k) {
                        0.0
                    } else {
                        1.0 + self.spec.co_occurrence * chosen.iter().map(|&j| self.affinity[j * n + k]).sum::<f64>()
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (k, &wk) in weights.iter().enumerate() {
                if wk > 0.0 {
                    pick = k;
                    if r < wk {
                        break;
                    }
                    r -= wk;
                }
            }
            chosen.push(pick);
        }
        chosen
    }

    fn example(&self, id: u64, first: Option<usize>) -> Example {
        let spec = self.spec;
        let mut rng = seeds::Rng::seed_from_u64(item_seed(self.structure_seed, id));
        let labels = self.labels(first, &mut rng);
        let mut cells: Vec<usize> = (0..spec.cells()).collect();
        cells.shuffle(&mut rng);

        let mut features = vec![0.0f64; spec.cells() * spec.c];
        for (&class, &cell) in labels.iter().zip(&cells) {
            let at = cell * spec.c;
            for (f, p) in features[at..at + spec.c].iter_mut().zip(&self.prototypes[class]) {
                *f += p;
            }
        }
        if spec.noise_sigma > 0.0 {
            let mut noise_rng = seeds::Rng::seed_from_u64(item_seed(self.noise_seed, id));
            let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
            for f in &mut features {
                *f += normal.sample(&mut noise_rng);
            }
        }
        Example {
            id,
            labels: ClassSet::from_indices(spec.n_classes, labels),
            features: features.into_iter().map(|f| f as f32).collect(),
        }
    }
}

/// Deterministic in `(spec, seed)`. Train ids are `0..n_train`, test ids follow.
/// The first `n_classes` images of each split lead with class `i`, so every
/// class has positives in both splits.
const MAX_COSINE: f64 = 0.5;
const PROTOTYPE_ATTEMPTS: usize = 1000;

pub fn generate(spec: &GenSpec, seed: u64) -> Result<Generated> {
    spec.validate()?;
    let mut rng = seeds::stream(seed, seeds::DATAGEN);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Directions are redrawn while they sit within MAX_COSINE of an earlier
    // prototype; after PROTOTYPE_ATTEMPTS draws the last candidate is kept.
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut v = Vec::new();
        for _ in 0..PROTOTYPE_ATTEMPTS {
            v = (0..spec.c).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            let close = directions
                .iter()
                .any(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() > MAX_COSINE);
            if !close {
                break;
            }
        }
        directions.push(v);
    }
    let prototypes: Vec<Vec<f64>> = directions
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * spec.amplitude).collect())
        .collect();
    let affinity = affinity(spec.n_classes, &mut rng);
    let sampler = Sampler {
        spec,
        prototypes: &prototypes,
        affinity: &affinity,
        structure_seed: stream_seed(seed, "datagen.structure"),
        noise_seed: stream_seed(seed, "datagen.noise"),
    };
    let split = |offset: u64, n: usize| Dataset {
        h: spec.h,
        w: spec.w,
        c: spec.c,
        class_names: (0..spec.n_classes).map(class_name).collect(),
        examples: (0..n)
            .map(|i| sampler.example(offset + i as u64, (i < spec.n_classes).then_some(i)))
            .collect(),
    };
    Ok(Generated {
        train: split(0, spec.n_train),
        test: split(spec.n_train as u64, spec.n_test),
        prototypes,
    })
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(format!("{what} {v} does not fit in u32")))
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.is_empty() {
        return Err(Error::Data("refusing to save an empty dataset".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [
        (ds.len(), "n"),
        (ds.h, "h"),
        (ds.w, "w"),
        (ds.c, "c"),
        (ds.n_classes(), "n_classes"),
    ] {
        buf.extend_from_slice(&u32_field(v, what)?.to_le_bytes());
    }
    for name in &ds.class_names {
        buf.extend_from_slice(&u32_field(name.len(), "class name length")?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    let flen = ds.feature_len();
    for ex in &ds.examples {
        if ex.features.len() != flen || ex.labels.universe() != ds.n_classes() {
            return Err(Error::Data(format!(
                "example {} does not match the dataset shape",
                ex.id
            )));
        }
        buf.extend_from_slice(&ex.id.to_le_bytes());
        buf.extend_from_slice(&ex.labels.to_bytes());
        for f in &ex.features {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated dataset at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// True when the length cannot hold a whole number of records for the
/// (possibly corrupt) header, which points at truncation rather than a
/// flipped byte.
fn looks_truncated(bytes: &[u8]) -> bool {
    let mut r = Reader { bytes, pos: 6 };
    let Some((h, w, c, k)) = (|| {
        r.u32().ok()?;
        let dims = (r.u32().ok()?, r.u32().ok()?, r.u32().ok()?, r.u32().ok()?);
        for _ in 0..dims.3 {
            let len = r.u32().ok()?;
            r.take(len).ok()?;
        }
        Some(dims)
    })() else {
        return true;
    };
    let record = 8 + k.div_ceil(8) + 4 * h * w * c;
    let body = bytes.len().saturating_sub(r.pos + 4);
    bytes.len() < r.pos + 4 || body % record != 0
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 + 2 + 20 + 4 {
        return Err(format_err("truncated dataset header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("not an MLDS dataset (bad magic)"));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        if looks_truncated(bytes) {
            return Err(format_err(format!("truncated dataset: {} bytes", bytes.len())));
        }
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(format_err(format!(
            "unsupported MLDS version {version}, expected {VERSION}"
        )));
    }
    let (n, h, w, c, k) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let class_names = (0..k)
        .map(|_| {
            let len = r.u32()?;
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err("class name is not UTF-8"))
        })
        .collect::<Result<Vec<_>>>()?;
    let flen = h * w * c;
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let id = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let labels = ClassSet::from_bytes(k, r.take(k.div_ceil(8))?)
            .ok_or_else(|| format_err(format!("label bitset of example {id} has bits beyond {k} classes")))?;
        let features = r
            .take(4 * flen)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        examples.push(Example { id, labels, features });
    }
    if r.pos != payload.len() {
        return Err(format_err(format!(
            "{} trailing bytes after records",
            payload.len() - r.pos
        )));
    }
    Ok(Dataset {
        h,
        w,
        c,
        class_names,
        examples,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec {
            n_classes: 5,
            n_train: 40,
            n_test: 10,
            ..GenSpec::default()
        }
    }

    #[test]
    fn names_sort_in_index_order() {
        let names: Vec<String> = (0..120).map(class_name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names[7], "class_007");
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(), 0).unwrap(), generate(&small(), 0).unwrap());
        assert_ne!(
            generate(&small(), 0).unwrap().train,
            generate(&small(), 1).unwrap().train
        );
    }

    #[test]
    fn every_class_has_positives_in_both_splits() {
        let g = generate(&small(), 0).unwrap();
        for ds in [&g.train, &g.test] {
            for k in 0..5 {
                assert!(ds.examples.iter().any(|e| e.labels.contains(k)));
            }
            assert!(ds.examples.iter().all(|e| !e.labels.is_empty()));
        }
        assert!(g.train.examples.iter().all(|e| e.id < 40));
        assert!(g.test.examples.iter().all(|e| e.id >= 40));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        assert!(GenSpec {
            n_classes: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(GenSpec {
            avg_labels: 6.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(GenSpec {
            h: 1,
            w: 2,
            avg_labels: 3.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(GenSpec {
            avg_labels: 0.5,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn noise_free_features_are_prototype_sums() {
        let spec = GenSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let g = generate(&spec, 0).unwrap();
        for ex in &g.train.examples {
            let mut pooled = vec![0.0f64; spec.c];
            for (i, f) in ex.features.iter().enumerate() {
                pooled[i % spec.c] += *f as f64;
            }
            let mut want = vec![0.0; spec.c];
            for k in ex.labels.iter() {
                for (w, p) in want.iter_mut().zip(&g.prototypes[k]) {
                    *w += p;
                }
            }
            for (a, b) in pooled.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let g = generate(&small(), 0).unwrap();
        let bytes = encode(&g.train).unwrap();
        assert_eq!(decode(&bytes).unwrap(), g.train);

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode(&bad), Err(Error::Checksum { .. })));

        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(decode(cut), Err(Error::Format(m)) if m.contains("truncated")));

        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&v2), Err(Error::Format(m)) if m.contains("version")));

        let empty = Dataset {
            examples: vec![],
            ..g.train.clone()
        };
        assert!(encode(&empty).is_err());
    }
}
