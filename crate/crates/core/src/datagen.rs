//! Synthetic Gaussian-mixture pools and their line-oriented file format.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub label: Option<usize>,
    pub features: Vec<f64>,
}

/// Parameters of a class-balanced isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub n: usize,
    pub dim: usize,
    /// Explicit class centers; auto-placed when absent.
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    pub sigma: f64,
    /// Distance between auto-placed centers in units of `sigma`.
    pub overlap_factor: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Class count of the out-domain variant; defaults to `num_classes`.
    #[serde(default)]
    pub outdomain_classes: Option<usize>,
    pub seed: u64,
}

fn default_eval_fraction() -> f64 {
    0.2
}

impl MixtureSpec {
    /// Five-class benchmark standing in for the multi-class tissue task.
    pub fn nct_toy(seed: u64) -> Self {
        Self {
            num_classes: 5,
            n: 10_000,
            dim: 16,
            centers: None,
            sigma: 1.0,
            overlap_factor: 4.5,
            eval_fraction: 0.2,
            outdomain_classes: None,
            seed,
        }
    }

    /// Binary benchmark for AUC exercises.
    pub fn pcam_toy(seed: u64) -> Self {
        Self { num_classes: 2, n: 8_000, ..Self::nct_toy(seed) }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "nct-toy" => Ok(Self::nct_toy(seed)),
            "pcam-toy" => Ok(Self::pcam_toy(seed)),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected nct-toy or pcam-toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("mixture needs K >= 2".into()));
        }
        if self.n < self.num_classes {
            return Err(Error::Config(format!("N = {} is smaller than K = {}", self.n, self.num_classes)));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.overlap_factor >= 0.0) {
            return Err(Error::Config("overlap_factor must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
        }
        if let Some(c) = &self.centers {
            if c.len() != self.num_classes || c.iter().any(|v| v.len() != self.dim) {
                return Err(Error::Config("explicit centers must be K vectors of length dim".into()));
            }
        }
        if matches!(self.outdomain_classes, Some(k) if k < 2) {
            return Err(Error::Config("outdomain_classes must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub kind: String,
    pub seed: u64,
    #[serde(default)]
    pub spec: Option<MixtureSpec>,
}

/// A pool of samples with fixed train-pool / eval split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolDataset {
    pub num_classes: usize,
    pub dim: usize,
    pub generator: GeneratorMeta,
    pub samples: Vec<Sample>,
}

impl PoolDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids_in(&self, split: Split) -> Vec<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }

    pub fn train_pool_ids(&self) -> Vec<usize> {
        self.ids_in(Split::TrainPool)
    }

    pub fn eval_ids(&self) -> Vec<usize> {
        self.ids_in(Split::Eval)
    }

    /// Samples are stored by id, so `id` indexes directly.
    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn features(&self, id: usize) -> &[f64] {
        &self.samples[id].features
    }

    /// Per-feature standard deviation over all samples.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for s in &self.samples {
            for (m, x) in mean.iter_mut().zip(&s.features) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; self.dim];
        for s in &self.samples {
            for ((v, x), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    /// Checks ids are dense `0..N`, labels lie in `[0, K)` and feature
    /// vectors have length `dim`.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::Data(format!("sample at position {i} has id {}", s.id)));
            }
            if s.features.len() != self.dim {
                return Err(Error::Dimension { expected: self.dim, got: s.features.len() });
            }
            if matches!(s.label, Some(l) if l >= self.num_classes) {
                return Err(Error::Data(format!("sample {i} label outside [0, {})", self.num_classes)));
            }
        }
        Ok(())
    }
}

/// Random rotation from Gram-Schmidt on a Gaussian matrix; rows are
/// orthonormal.
fn random_rotation(dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

/// Centers with all pairwise distances `overlap_factor * sigma` (a rotated
/// scaled simplex) when `dim >= K`, otherwise evenly spaced on a circle in
/// the first two coordinates with that distance between neighbours.
fn auto_centers(k: usize, dim: usize, distance: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if dim >= k {
        let scale = distance / std::f64::consts::SQRT_2;
        let rot = random_rotation(dim, rng);
        let shift = scale / k as f64;
        (0..k)
            .map(|c| {
                // vertex c of the simplex, centered at the origin
                let vertex: Vec<f64> = (0..dim)
                    .map(|j| if j == c { scale - shift } else if j < k { -shift } else { 0.0 })
                    .collect();
                rot.iter().map(|row| row.iter().zip(&vertex).map(|(a, b)| a * b).sum()).collect()
            })
            .collect()
    } else {
        let radius = if k == 2 { distance / 2.0 } else { distance / (2.0 * (std::f64::consts::PI / k as f64).sin()) };
        (0..k)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                let mut v = vec![0.0; dim];
                v[0] = radius * angle.cos();
                if dim > 1 {
                    v[1] = radius * angle.sin();
                }
                v
            })
            .collect()
    }
}

fn sample_mixture(
    k: usize,
    n: usize,
    centers: &[Vec<f64>],
    scales: &[f64],
    eval_fraction: f64,
    rng: &mut impl Rng,
) -> Vec<Sample> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let mut samples: Vec<Sample> = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let features = centers[label]
                .iter()
                .zip(scales)
                .map(|(c, s)| c + s * standard_normal(rng))
                .collect();
            Sample { id, split: Split::TrainPool, label: Some(label), features }
        })
        .collect();
    // stratified eval split
    for class in 0..k {
        let mut members: Vec<usize> = samples.iter().filter(|s| s.label == Some(class)).map(|s| s.id).collect();
        members.shuffle(rng);
        let take = (eval_fraction * members.len() as f64).round() as usize;
        for &id in &members[..take] {
            samples[id].split = Split::Eval;
        }
    }
    samples
}

/// Balanced Gaussian mixture with a stratified eval split; deterministic
/// in `spec.seed`.
pub fn generate_gaussian_mixture(spec: &MixtureSpec) -> Result<PoolDataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, "mixture", 0);
    let centers = match &spec.centers {
        Some(c) => c.clone(),
        None => auto_centers(spec.num_classes, spec.dim, spec.overlap_factor * spec.sigma, &mut rng),
    };
    let scales = vec![spec.sigma; spec.dim];
    let samples = sample_mixture(spec.num_classes, spec.n, &centers, &scales, spec.eval_fraction, &mut rng);
    Ok(PoolDataset {
        num_classes: spec.num_classes,
        dim: spec.dim,
        generator: GeneratorMeta { kind: "gaussian_mixture".into(), seed: spec.seed, spec: Some(spec.clone()) },
        samples,
    })
}

/// A different distribution over the same input space, used only as
/// pre-training data: seed-derived centers, a random offset, per-feature
/// scales in `[0.5, 1.5] * sigma` and optionally a different class count.
pub fn generate_outdomain_variant(spec: &MixtureSpec) -> Result<PoolDataset> {
    spec.validate()?;
    let k = spec.outdomain_classes.unwrap_or(spec.num_classes);
    let variant_seed = seed::derive(spec.seed, "outdomain", 0);
    let mut rng = seed::rng(variant_seed, "mixture", 0);
    let distance = spec.overlap_factor * spec.sigma;
    let offset: Vec<f64> = (0..spec.dim).map(|_| distance * standard_normal(&mut rng) / (spec.dim as f64).sqrt()).collect();
    let centers: Vec<Vec<f64>> = auto_centers(k, spec.dim, distance, &mut rng)
        .into_iter()
        .map(|c| c.iter().zip(&offset).map(|(a, b)| a + b).collect())
        .collect();
    let scales: Vec<f64> = (0..spec.dim).map(|_| spec.sigma * rng.random_range(0.5..1.5)).collect();
    let samples = sample_mixture(k, spec.n, &centers, &scales, spec.eval_fraction, &mut rng);
    Ok(PoolDataset {
        num_classes: k,
        dim: spec.dim,
        generator: GeneratorMeta { kind: "gaussian_mixture_outdomain".into(), seed: variant_seed, spec: Some(spec.clone()) },
        samples,
    })
}

pub const DATASET_FORMAT: &str = "evidal-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    num_classes: usize,
    dim: usize,
    generator: GeneratorMeta,
}

/// Writes a header line followed by one JSON record per sample.
pub fn save_dataset(ds: &PoolDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        num_classes: ds.num_classes,
        dim: ds.dim,
        generator: ds.generator.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PoolDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let first = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_err(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.num_classes < 2 {
        return Err(parse_err(1, "num_classes must be >= 2".into()));
    }

    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if !seen.insert(s.id) {
            return Err(parse_err(lineno, format!("duplicate id {}", s.id)));
        }
        if let Some(l) = s.label {
            if l >= header.num_classes {
                return Err(parse_err(lineno, format!("label {l} outside [0, {})", header.num_classes)));
            }
        }
        if s.features.len() != header.dim {
            return Err(parse_err(lineno, format!("expected {} features, got {}", header.dim, s.features.len())));
        }
        samples.push(s);
    }
    samples.sort_by_key(|s| s.id);
    if let Some((pos, s)) = samples.iter().enumerate().find(|(i, s)| s.id != *i) {
        return Err(Error::Data(format!("ids are not dense: expected {pos}, found {}", s.id)));
    }
    Ok(PoolDataset { num_classes: header.num_classes, dim: header.dim, generator: header.generator, samples })
}
