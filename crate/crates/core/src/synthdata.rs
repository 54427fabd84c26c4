//! Class-conditional synthetic multimodal data.
//!
//! Each sample carries three views of one latent class factor `u`:
//!
//! - `x_s`: `u` embedded into the informative dimensions plus noise, with the
//!   remaining `mask_noise_dims` dimensions holding pure (stronger) noise;
//! - `x_t = x_s ⊙ mask`, where the mask zeroes exactly those noise dimensions;
//! - `x_e`: a different linear view of `u` with less noise.
//!
//! So the expert channel is the cleanest, the teacher sees a denoised student
//! input, and the student sees everything. Labels are drawn first and `u` is
//! Gaussian around a class mean, so `P(y | u)` is logistic in `u` and the
//! views carry strictly more than the hard label.
//!
//! Files are JSON Lines, one sample per line with fields
//! `id, x_s, mask, x_t, x_e, label`, plus a `<stem>.meta.json` sidecar with
//! the [`GeneratorSpec`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::teacher_input;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Fraction of vulnerable samples in the reference cohort (350 of 502).
pub const DEFAULT_CLASS_BALANCE: f64 = 350.0 / 502.0;

/// Upper end of the `noise_scale` range over which a linear probe on `x_e`
/// beats one on `x_s` (other defaults unchanged). Below about 0.25 both
/// probes are near perfect and the comparison carries no information.
pub const EXPERT_ADVANTAGE_NOISE_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_samples: usize,
    /// Width of `x_s`, `mask`, and `x_t`.
    pub feature_dim: usize,
    /// Width of `x_e`.
    pub report_dim: usize,
    /// Dimension of the class factor `u`.
    pub signal_dims: usize,
    /// Student dimensions that carry only noise and are masked out for the teacher.
    pub mask_noise_dims: usize,
    /// Probability of label 1 (vulnerable).
    pub class_balance: f64,
    /// Within-class spread of `u` and observation noise of `x_s`.
    pub noise_scale: f64,
    pub seed: u64,
    /// Distance between the two class means of `u`.
    #[serde(default = "defaults::class_separation")]
    pub class_separation: f64,
    /// Noise on `x_e`, relative to `noise_scale`.
    #[serde(default = "defaults::report_noise_ratio")]
    pub report_noise_ratio: f64,
    /// Noise on the masked dimensions, relative to `noise_scale`.
    #[serde(default = "defaults::nuisance_ratio")]
    pub nuisance_ratio: f64,
}

mod defaults {
    pub fn class_separation() -> f64 {
        1.8
    }
    pub fn report_noise_ratio() -> f64 {
        0.25
    }
    pub fn nuisance_ratio() -> f64 {
        2.0
    }
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_samples: 502,
            feature_dim: 64,
            report_dim: 16,
            signal_dims: 4,
            mask_noise_dims: 40,
            class_balance: DEFAULT_CLASS_BALANCE,
            noise_scale: 1.0,
            seed: 0,
            class_separation: defaults::class_separation(),
            report_noise_ratio: defaults::report_noise_ratio(),
            nuisance_ratio: defaults::nuisance_ratio(),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.report_dim == 0 || self.signal_dims == 0 {
            return fail("feature_dim, report_dim and signal_dims must be positive".into());
        }
        if self.signal_dims + self.mask_noise_dims > self.feature_dim {
            return fail(format!(
                "signal_dims ({}) + mask_noise_dims ({}) exceed feature_dim ({})",
                self.signal_dims, self.mask_noise_dims, self.feature_dim
            ));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return fail(format!("class_balance {} must lie in (0, 1)", self.class_balance));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("class_separation", self.class_separation),
            ("report_noise_ratio", self.report_noise_ratio),
            ("nuisance_ratio", self.nuisance_ratio),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub x_s: Vec<f64>,
    pub mask: Vec<f64>,
    pub x_t: Vec<f64>,
    pub x_e: Vec<f64>,
    /// 0 = stable, 1 = vulnerable.
    pub label: u8,
}

impl Sample {
    fn check(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label {} is not 0 or 1", self.label));
        }
        if self.mask.len() != self.x_s.len() || self.x_t.len() != self.x_s.len() {
            return Err("x_s, mask and x_t lengths differ".into());
        }
        let values = self.x_s.iter().chain(&self.mask).chain(&self.x_t).chain(&self.x_e);
        if values.clone().any(|v| !v.is_finite()) {
            return Err("non-finite feature value".into());
        }
        if self.x_s.iter().zip(&self.mask).zip(&self.x_t).any(|((s, m), t)| s * m != *t) {
            return Err("x_t is not x_s ⊙ mask".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Batch matrices for a set of sample indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_s: Tensor,
    pub mask: Tensor,
    /// `x_s ⊙ mask`, recomputed from the batch rather than read from the records.
    pub x_t: Tensor,
    pub x_e: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x_s.len())
    }

    pub fn report_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x_e.len())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let n = indices.len();
        let (d, r) = (self.feature_dim().unwrap_or(0), self.report_dim().unwrap_or(0));
        let gather = |f: fn(&Sample) -> &Vec<f64>, w: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(n * w);
            for &i in indices {
                let s = self.samples.get(i).ok_or_else(|| {
                    Error::Contract(format!("sample index {i} out of range for {} samples", self.len()))
                })?;
                data.extend_from_slice(f(s));
            }
            Tensor::matrix(n, w, data)
        };
        let x_s = gather(|s| &s.x_s, d)?;
        let mask = gather(|s| &s.mask, d)?;
        Ok(Batch {
            x_t: teacher_input(&x_s, &mask)?,
            x_s,
            mask,
            x_e: gather(|s| &s.x_e, r)?,
            labels: indices.iter().map(|&i| self.samples[i].label).collect(),
        })
    }

    fn check_uniform(&self) -> std::result::Result<(), (usize, String)> {
        let (Some(d), Some(r)) = (self.feature_dim(), self.report_dim()) else {
            return Ok(());
        };
        for (i, s) in self.samples.iter().enumerate() {
            s.check().map_err(|m| (i, m))?;
            if s.x_s.len() != d || s.x_e.len() != r {
                return Err((i, format!("sample widths ({}, {}) differ from ({d}, {r})", s.x_s.len(), s.x_e.len())));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    rng::normals(rng, rows * cols).into_iter().map(|v| v * scale).collect()
}

fn mat_vec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut structure = rng::stream(spec.seed, "synth.structure");
    let mut dims: Vec<usize> = (0..spec.feature_dim).collect();
    dims.shuffle(&mut structure);
    let mut mask = vec![1.0; spec.feature_dim];
    for &d in &dims[..spec.mask_noise_dims] {
        mask[d] = 0.0;
    }
    let informative: Vec<usize> = (0..spec.feature_dim).filter(|&d| mask[d] == 1.0).collect();
    let embed = gaussian_matrix(&mut structure, informative.len(), spec.signal_dims);
    let report = gaussian_matrix(&mut structure, spec.report_dim, spec.signal_dims);
    let mut direction = rng::normals(&mut structure, spec.signal_dims);
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    direction.iter_mut().for_each(|v| *v *= 0.5 * spec.class_separation / norm);

    let mut rng = rng::stream(spec.seed, "synth.samples");
    let sigma = spec.noise_scale;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let label = u8::from(rng.random_bool(spec.class_balance));
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let u: Vec<f64> = direction
                .iter()
                .map(|m| sign * m + sigma * rng::normal(&mut rng))
                .collect();
            let signal = mat_vec(&embed, spec.signal_dims, &u);
            let mut x_s = vec![0.0; spec.feature_dim];
            for (k, &d) in informative.iter().enumerate() {
                x_s[d] = signal[k] + sigma * rng::normal(&mut rng);
            }
            for &d in &dims[..spec.mask_noise_dims] {
                x_s[d] = sigma * spec.nuisance_ratio * rng::normal(&mut rng);
            }
            let x_e = mat_vec(&report, spec.signal_dims, &u)
                .into_iter()
                .map(|v| v + sigma * spec.report_noise_ratio * rng::normal(&mut rng))
                .collect();
            let x_t = x_s.iter().zip(&mask).map(|(x, m)| x * m).collect();
            Sample {
                id: format!("s{}-{i:05}", spec.seed),
                x_s,
                mask: mask.clone(),
                x_t,
                x_e,
                label,
            }
        })
        .collect();
    Ok(Dataset { samples })
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holdout {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KFold {
    pub folds: Vec<Vec<usize>>,
}

impl KFold {
    /// `(train, held-out)` indices for fold `i`.
    pub fn fold(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        (train, self.folds[i].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPlan {
    Holdout(Holdout),
    KFold(KFold),
}

/// Sample indices grouped by label (class 0 first), each group shuffled.
fn shuffled_by_class(labels: &[u8], seed: u64) -> [Vec<usize>; 2] {
    let mut rng = rng::stream(seed, "split");
    let mut groups = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        groups[usize::from(l.min(1))].push(i);
    }
    groups.iter_mut().for_each(|g| g.shuffle(&mut rng));
    groups
}

/// Label-stratified train/val/test split. `test_fraction` is taken from the
/// whole dataset, `val_fraction` from what remains.
pub fn holdout_split(dataset: &Dataset, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Holdout> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "split fractions must satisfy 0 < test < 1 and 0 ≤ val < 1 (got {test_fraction}, {val_fraction})"
        )));
    }
    let mut plan = Holdout { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for group in shuffled_by_class(&dataset.labels(), seed) {
        let n = group.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n);
        let n_val = (((n - n_test) as f64 * val_fraction).round() as usize).min(n - n_test);
        plan.test.extend_from_slice(&group[..n_test]);
        plan.val.extend_from_slice(&group[n_test..n_test + n_val]);
        plan.train.extend_from_slice(&group[n_test + n_val..]);
    }
    plan.train.sort_unstable();
    plan.val.sort_unstable();
    plan.test.sort_unstable();
    Ok(plan)
}

/// Label-stratified k-fold assignment.
pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<KFold> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} samples", dataset.len())));
    }
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for group in shuffled_by_class(&dataset.labels(), seed) {
        for i in group {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(KFold { folds })
}

/// Sidecar path: `data.jsonl` → `data.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn save(dataset: &Dataset, path: &Path, spec: Option<&GeneratorSpec>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::Contract(format!("serializing {}: {e}", s.id)))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    if let Some(spec) = spec {
        let meta = meta_path(path);
        let json = serde_json::to_string_pretty(spec).expect("spec serializes");
        fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}, column {}", n + 1, e.column()), e.to_string()))?;
        samples.push(s);
    }
    let ds = Dataset { samples };
    ds.check_uniform()
        .map_err(|(i, m)| Error::parse(path, format!("record {}", i + 1), m))?;
    let meta = meta_path(path);
    if meta.exists() {
        let spec = load_spec(&meta)?;
        if spec.n_samples != ds.len() {
            return Err(Error::parse(
                path,
                "end of file",
                format!("{} records but the sidecar declares {}", ds.len(), spec.n_samples),
            ));
        }
    }
    Ok(ds)
}

pub fn load_spec(path: &Path) -> Result<GeneratorSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
