//! The three sub-networks (student, teacher, expert).
//!
//! Each branch is an MLP encoder followed by a variational head producing a
//! diagonal Gaussian latent. Student and teacher classify through the *same*
//! linear head: both branches hold the same [`ParamId`]s for it, so there is
//! exactly one copy of those parameters. The expert has its own classifier.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng as _;

/// Bounds applied to the predicted log standard deviation.
pub const LOG_STD_BOUNDS: (f64, f64) = (-10.0, 10.0);

/// Number of output classes (0 = stable, 1 = vulnerable).
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Student,
    Teacher,
    Expert,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Student, BranchKind::Teacher, BranchKind::Expert];

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Student => "student",
            BranchKind::Teacher => "teacher",
            BranchKind::Expert => "expert",
        }
    }
}

/// Which parameter group a tensor belongs to; used for access accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Student,
    Teacher,
    Expert,
    SharedClassifier,
}

impl Owner {
    fn slot(self) -> usize {
        match self {
            Owner::Student => 0,
            Owner::Teacher => 1,
            Owner::Expert => 2,
            Owner::SharedClassifier => 3,
        }
    }
}

impl From<BranchKind> for Owner {
    fn from(kind: BranchKind) -> Self {
        match kind {
            BranchKind::Student => Owner::Student,
            BranchKind::Teacher => Owner::Teacher,
            BranchKind::Expert => Owner::Expert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "encoder hidden_dims must be a nonempty list of positive sizes".into(),
            ));
        }
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Architecture shared by all three branches; only the input width differs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of student and teacher inputs.
    pub feature_dim: usize,
    /// Width of the expert (report embedding) input.
    pub report_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            report_dim: 16,
            hidden_dims: vec![64, 64],
            latent_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, kind: BranchKind) -> EncoderConfig {
        EncoderConfig {
            input_dim: match kind {
                BranchKind::Expert => self.report_dim,
                _ => self.feature_dim,
            },
            hidden_dims: self.hidden_dims.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        BranchKind::ALL
            .iter()
            .try_for_each(|&k| self.encoder(k).validate())
    }
}

/// Index of a parameter tensor inside a [`VmdModel`].
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub path: String,
    pub owner: Owner,
    pub tensor: Tensor,
}

/// Dense layer `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
}

/// Produces `(μ, log σ)` from the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalHead {
    pub mean: Linear,
    pub log_std: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub encoder: Encoder,
    pub head: VariationalHead,
    pub classifier: Linear,
}

/// Graph nodes for a batch of diagonal-Gaussian latents, each `N × latent_dim`.
#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mean: Var,
    pub log_std: Var,
    pub sample: Var,
    /// The ε used for `sample = mean + exp(log_std) ⊙ ε`.
    pub noise: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    #[default]
    Mean,
    Sample,
}

/// Logits and class probabilities, each `N × 2`.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub logits: Var,
    pub probabilities: Var,
}

/// Source of the reparameterization noise ε.
pub enum Noise<'a> {
    Zero,
    Given(Tensor),
    Draw(&'a mut Rng),
}

/// Maps parameters to graph leaves for one forward pass. Parameters are
/// recorded lazily, so a pass only touches the tensors it actually reads.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(model: &VmdModel) -> Self {
        Self {
            vars: vec![None; model.params.len()],
        }
    }

    /// A binding whose leaves were already recorded (e.g. by a gradient check).
    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            vars: vars.iter().copied().map(Some).collect(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, model: &VmdModel, id: ParamId) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let p = &model.params[id];
        model.access.record(p.owner);
        let v = g.leaf(&p.tensor);
        self.vars[id] = Some(v);
        v
    }

    /// Bound vars by parameter id; `None` where a parameter was never read.
    pub fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

/// Counts parameter reads per owner group.
#[derive(Debug, Default)]
pub struct AccessCounter {
    counts: [AtomicU64; 4],
}

impl AccessCounter {
    fn record(&self, owner: Owner) {
        self.counts[owner.slot()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, owner: Owner) -> u64 {
        self.counts[owner.slot()].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.counts.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }
}

#[derive(Debug)]
pub struct VmdModel {
    config: ModelConfig,
    params: Vec<Param>,
    student: Branch,
    teacher: Branch,
    expert: Branch,
    access: AccessCounter,
}

impl Clone for VmdModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            expert: self.expert.clone(),
            access: AccessCounter::default(),
        }
    }
}

impl PartialEq for VmdModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn tensor(&mut self, path: String, owner: Owner, tensor: Tensor) -> ParamId {
        self.params.push(Param {
            path,
            owner,
            tensor: tensor.requiring_grad(),
        });
        self.params.len() - 1
    }

    /// Glorot-uniform weights, zero bias.
    fn linear(&mut self, path: &str, owner: Owner, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        let weight = self.tensor(
            format!("{path}.weight"),
            owner,
            Tensor::new(vec![fan_in, fan_out], w).expect("consistent shape"),
        );
        let bias = self.tensor(format!("{path}.bias"), owner, Tensor::zeros(&[fan_out]));
        Linear { weight, bias }
    }

    fn encoder_and_head(&mut self, kind: BranchKind, cfg: &EncoderConfig, seed: u64) -> (Encoder, VariationalHead) {
        let name = kind.name();
        let owner = Owner::from(kind);
        let mut rng = rng::stream(seed, &format!("init.{name}"));
        let mut layers = Vec::new();
        let mut width = cfg.input_dim;
        for (i, &h) in cfg.hidden_dims.iter().enumerate() {
            layers.push(self.linear(&format!("{name}_encoder.layer{i}"), owner, width, h, &mut rng));
            width = h;
        }
        let mean = self.linear(&format!("{name}_head.mean"), owner, width, cfg.latent_dim, &mut rng);
        let log_std = self.linear(&format!("{name}_head.log_std"), owner, width, cfg.latent_dim, &mut rng);
        (Encoder { layers }, VariationalHead { mean, log_std })
    }
}

impl VmdModel {
    /// Freshly initialized model. Each parameter group draws from its own
    /// named stream, so e.g. the student's init does not depend on the expert's.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: Vec::new() };
        let (s_enc, s_head) = b.encoder_and_head(BranchKind::Student, &config.encoder(BranchKind::Student), seed);
        let (t_enc, t_head) = b.encoder_and_head(BranchKind::Teacher, &config.encoder(BranchKind::Teacher), seed);
        let (e_enc, e_head) = b.encoder_and_head(BranchKind::Expert, &config.encoder(BranchKind::Expert), seed);
        let shared = b.linear(
            "shared_classifier",
            Owner::SharedClassifier,
            config.latent_dim,
            NUM_CLASSES,
            &mut rng::stream(seed, "init.shared_classifier"),
        );
        let expert_cls = b.linear(
            "expert_classifier",
            Owner::Expert,
            config.latent_dim,
            NUM_CLASSES,
            &mut rng::stream(seed, "init.expert_classifier"),
        );
        Ok(Self {
            config,
            params: b.params,
            student: Branch { encoder: s_enc, head: s_head, classifier: shared.clone() },
            teacher: Branch { encoder: t_enc, head: t_head, classifier: shared },
            expert: Branch { encoder: e_enc, head: e_head, classifier: expert_cls },
            access: AccessCounter::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, path: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.path == path)
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.path == path)
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::Student => &self.student,
            BranchKind::Teacher => &self.teacher,
            BranchKind::Expert => &self.expert,
        }
    }

    /// The classifier tensors a branch reads: `(weight, bias)`.
    pub fn classifier_tensors(&self, kind: BranchKind) -> (&Tensor, &Tensor) {
        let c = &self.branch(kind).classifier;
        (&self.params[c.weight].tensor, &self.params[c.bias].tensor)
    }

    pub fn access(&self) -> &AccessCounter {
        &self.access
    }

    /// Every parameter id owned by `owners`, in canonical order.
    pub fn param_ids(&self, owners: &[Owner]) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| owners.contains(&self.params[i].owner))
            .collect()
    }

    /// Zeros the variational head of one branch (μ = 0, log σ = 0 for every input).
    pub fn zero_head(&mut self, kind: BranchKind) {
        let h = self.branch(kind).head.clone();
        for id in [h.mean.weight, h.mean.bias, h.log_std.weight, h.log_std.bias] {
            self.params[id].tensor.data_mut().fill(0.0);
        }
    }

    pub fn zero_classifier(&mut self, kind: BranchKind) {
        let c = self.branch(kind).classifier.clone();
        for id in [c.weight, c.bias] {
            self.params[id].tensor.data_mut().fill(0.0);
        }
    }

    fn apply_linear(&self, g: &mut Graph, b: &mut Binding, layer: &Linear, x: Var) -> Result<Var> {
        let w = b.get(g, self, layer.weight);
        let bias = b.get(g, self, layer.bias);
        let xw = g.matmul(x, w)?;
        g.bias_add(xw, bias)
    }

    /// Runs one branch's encoder and variational head on a batch `x: N × input_dim`.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        kind: BranchKind,
        x: Var,
        noise: Noise<'_>,
    ) -> Result<GaussianLatent> {
        let expected = self.config.encoder(kind).input_dim;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != expected {
            return Err(Error::Dimension(format!(
                "{} encoder expects N × {expected} input, got {shape:?}",
                kind.name()
            )));
        }
        let branch = self.branch(kind);
        let mut h = x;
        for layer in &branch.encoder.layers {
            let a = self.apply_linear(g, b, layer, h)?;
            h = g.tanh(a);
        }
        let mean = self.apply_linear(g, b, &branch.head.mean, h)?;
        let raw = self.apply_linear(g, b, &branch.head.log_std, h)?;
        let log_std = g.clamp(raw, LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1);

        let (n, latent) = (shape[0], self.config.latent_dim);
        let noise = match noise {
            Noise::Zero => Tensor::zeros(&[n, latent]),
            Noise::Given(t) => {
                if t.shape() != [n, latent] {
                    return Err(Error::Dimension(format!(
                        "noise of shape {:?} for a {n} × {latent} latent",
                        t.shape()
                    )));
                }
                t
            }
            Noise::Draw(rng) => Tensor::new(vec![n, latent], rng::normals(rng, n * latent))?,
        };
        let std = g.exp(log_std);
        let eps = g.constant(noise.clone());
        let scaled = g.mul(std, eps)?;
        let sample = g.add(mean, scaled)?;
        Ok(GaussianLatent { mean, log_std, sample, noise })
    }

    /// Classifies a latent batch through the branch's classifier.
    pub fn classify(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        kind: BranchKind,
        z: &GaussianLatent,
        mode: LatentMode,
    ) -> Result<Prediction> {
        let input = match mode {
            LatentMode::Mean => z.mean,
            LatentMode::Sample => z.sample,
        };
        self.classify_var(g, b, kind, input)
    }

    pub fn classify_var(&self, g: &mut Graph, b: &mut Binding, kind: BranchKind, z: Var) -> Result<Prediction> {
        let logits = self.apply_linear(g, b, &self.branch(kind).classifier, z)?;
        let probabilities = g.softmax(logits, 1)?;
        Ok(Prediction { logits, probabilities })
    }

    /// Checkpoint tensors in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| {
                let t = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                    .expect("parameter shape is consistent");
                (p.path.clone(), t)
            })
            .collect()
    }

    /// Rebuilds a model from named tensors; names and shapes must match `config` exactly.
    pub fn from_named_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() < model.params.len() {
            return Err(Error::Dimension(format!(
                "checkpoint holds {} model tensors, architecture needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let (_, t) = tensors
                .iter()
                .find(|(name, _)| *name == p.path)
                .ok_or_else(|| Error::Dimension(format!("checkpoint is missing tensor {}", p.path)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {} has shape {:?} in checkpoint but {:?} in the model",
                    p.path,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

/// Teacher input `x_s ⊙ mask`.
pub fn teacher_input(x_s: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x_s.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "teacher_input: features {:?} vs mask {:?}",
            x_s.shape(),
            mask.shape()
        )));
    }
    if let Some(m) = mask.data().iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Contract(format!("mask entry {m} outside [0, 1]")));
    }
    let data = x_s.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
    Tensor::new(x_s.shape().to_vec(), data)
}
