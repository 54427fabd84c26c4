//! The training loop, Adam, and resumable training state.
//!
//! Randomness comes from named streams derived from `TrainConfig::seed`:
//! `shuffle` and `eps.{student,teacher,expert}`, each indexed by epoch. A
//! resumed run therefore needs only the epoch count to pick up exactly where
//! an uninterrupted run would be.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::losses::{self, BatchOutputs, BranchOutputs, LossReport, LossWeights};
use crate::networks::{
    read_checkpoint, write_checkpoint, Binding, BranchKind, Checkpoint, LatentMode, ModelConfig, Noise, Owner,
    VmdModel,
};
use crate::parallel::Execution;
use crate::rng::{self, Rng};
use crate::synthdata::{generate, Batch, Dataset, GeneratorSpec, Holdout};
use crate::tensor::{gradient_check_many, Graph, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Validation metrics every this many epochs; 0 disables them.
    pub eval_every: usize,
    /// Where resumable checkpoints go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many epochs (0: only after the last epoch).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 1,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub const FULL_SCALE_EPOCHS: usize = 400;

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for the contrastive terms, got {}",
                self.batch_size
            )));
        }
        self.weights.validate()
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    pub fn for_model(model: &VmdModel) -> Self {
        Self::new(model.params().iter().map(|p| &p.tensor))
    }
}

/// One Adam update with decoupled weight decay (`p −= lr·wd·p` first) and
/// bias correction. Parameters for which `grads[i]` is `None` are skipped
/// entirely: neither decayed nor moved, and their moments are untouched.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if g.len() != p.numel() || m.len() != p.numel() {
            return Err(Error::Dimension(format!(
                "adam_step: parameter {i} has {} values, gradient {}, moments {}",
                p.numel(),
                g.len(),
                m.len()
            )));
        }
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            *x -= lr * weight_decay * *x;
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: VmdModel,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(model: VmdModel) -> Self {
        Self { adam: AdamState::for_model(&model), model, epochs_done: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step counter after the epoch.
    pub step: u64,
    /// Batch-mean of every term over the epoch.
    pub loss: LossReport,
    pub val_student: Option<MetricReport>,
    pub val_teacher: Option<MetricReport>,
}

/// One record per completed epoch. Wall-clock seconds are kept apart from
/// the records so that two identical runs produce identical records.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_s: Vec<f64>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn timings_jsonl(&self) -> String {
        self.wall_clock_s
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{{\"epoch\":{},\"wall_clock_s\":{s}}}\n", self.epochs[i].epoch))
            .collect()
    }
}

/// What the optional per-step observer sees.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: u64,
    pub model: &'a VmdModel,
    pub report: &'a LossReport,
}

/// Per-epoch visiting order of the training indices.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut rng::stream_indexed(seed, "shuffle", epoch as u64));
    order
}

/// Minibatches of one epoch. A trailing batch of one sample is dropped:
/// the contrastive terms need a second sample.
pub fn epoch_batches(train: &[usize], seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
    epoch_order(train, seed, epoch)
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Per-branch noise streams for one epoch: student, teacher, expert.
pub fn epoch_noise(seed: u64, epoch: usize) -> [Rng; 3] {
    BranchKind::ALL.map(|k| rng::stream_indexed(seed, &format!("eps.{}", k.name()), epoch as u64))
}

/// Encodes and classifies all three branches on one batch. Latents are
/// sampled; the expert sample is also classified through the shared head
/// for the variational terms.
pub fn forward_batch(
    g: &mut Graph,
    b: &mut Binding,
    model: &VmdModel,
    batch: &Batch,
    noise: &mut [Rng; 3],
) -> Result<BatchOutputs> {
    let [ns, nt, ne] = noise;
    let inputs = [(&batch.x_s, ns), (&batch.x_t, nt), (&batch.x_e, ne)];
    let mut outs = Vec::with_capacity(3);
    for (kind, (x, rng)) in BranchKind::ALL.into_iter().zip(inputs) {
        let x = g.constant(x.clone());
        let latent = model.encode(g, b, kind, x, Noise::Draw(rng))?;
        let prediction = model.classify(g, b, kind, &latent, LatentMode::Sample)?;
        outs.push(BranchOutputs { latent, prediction });
    }
    let expert = outs.pop().expect("three branches");
    let teacher = outs.pop().expect("three branches");
    let student = outs.pop().expect("three branches");
    let expert_z_image_prediction = model.classify_var(g, b, BranchKind::Student, expert.latent.sample)?;
    Ok(BatchOutputs {
        student,
        teacher,
        expert,
        expert_z_image_prediction,
        labels: batch.labels.clone(),
    })
}

fn collect_grads(g: &Graph, b: &Binding, model: &VmdModel) -> Result<Vec<Option<Vec<f64>>>> {
    let mut grads = Vec::with_capacity(model.params().len());
    for (p, v) in model.params().iter().zip(b.vars()) {
        let grad = match v.and_then(|v| g.grad(v)) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; p.tensor.numel()],
        };
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.path)));
        }
        grads.push(Some(grad));
    }
    Ok(grads)
}

/// Loss report and gradients (for every parameter) of the objective on one batch.
pub fn batch_gradients(
    model: &VmdModel,
    batch: &Batch,
    weights: &LossWeights,
    noise: &mut [Rng; 3],
) -> Result<(LossReport, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let mut b = Binding::new(model);
    let outputs = forward_batch(&mut g, &mut b, model, batch, noise)?;
    let (total, report) = losses::global_objective(&mut g, &outputs, weights)?;
    if let Some(term) = report.first_non_finite() {
        return Err(Error::NonFinite(format!("loss term {term} is not finite")));
    }
    g.backward(total)?;
    Ok((report, collect_grads(&g, &b, model)?))
}

fn check_data(model: &VmdModel, dataset: &Dataset, split: &Holdout) -> Result<()> {
    if dataset.is_empty() || split.train.len() < 2 {
        return Err(Error::Contract(format!(
            "training needs at least two training samples (dataset {}, train split {})",
            dataset.len(),
            split.train.len()
        )));
    }
    let cfg = model.config();
    let dims = (dataset.feature_dim(), dataset.report_dim());
    if dims != (Some(cfg.feature_dim), Some(cfg.report_dim)) {
        return Err(Error::Dimension(format!(
            "model expects features {} / reports {}, data has {:?} / {:?}",
            cfg.feature_dim, cfg.report_dim, dims.0, dims.1
        )));
    }
    Ok(())
}

/// Trains a freshly initialized model for `cfg.epochs` epochs.
pub fn run_training(model: VmdModel, dataset: &Dataset, split: &Holdout, cfg: &TrainConfig) -> Result<(VmdModel, TrainLog)> {
    let (state, log) = train_from(TrainState::fresh(model), dataset, split, cfg, &mut |_| {})?;
    Ok((state.model, log))
}

/// Continues `state` up to `cfg.epochs` total epochs, calling `observer`
/// after every optimizer step. Writes checkpoints when `cfg.checkpoint_dir`
/// is set.
pub fn train_from(
    mut state: TrainState,
    dataset: &Dataset,
    split: &Holdout,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    check_data(&state.model, dataset, split)?;
    if state.epochs_done > cfg.epochs {
        return Err(Error::State(format!(
            "state has {} epochs done, more than the configured {}",
            state.epochs_done, cfg.epochs
        )));
    }
    let val = if split.val.is_empty() { None } else { Some(dataset.batch(&split.val)?) };
    let mut log = TrainLog::default();

    for epoch in state.epochs_done..cfg.epochs {
        let started = Instant::now();
        let mut noise = epoch_noise(cfg.seed, epoch);
        let mut reports = Vec::new();
        for idx in epoch_batches(&split.train, cfg.seed, epoch, cfg.batch_size) {
            let batch = dataset.batch(&idx)?;
            let (report, grads) = batch_gradients(&state.model, &batch, &cfg.weights, &mut noise)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {}: {m}", state.adam.step + 1)),
                    other => other,
                })?;
            let params = state.model.params_mut().iter_mut().map(|p| &mut p.tensor);
            adam_step(params, &grads, &mut state.adam, cfg.lr, cfg.weight_decay)?;
            observer(&StepEvent { epoch, step: state.adam.step, model: &state.model, report: &report });
            reports.push(report);
        }
        let (val_student, val_teacher) = match &val {
            Some(v) if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 => (
                Some(eval::evaluate_student(&state.model, &v.x_s, &v.labels)?),
                Some(eval::evaluate_teacher(&state.model, &v.x_t, &v.labels)?),
            ),
            _ => (None, None),
        };
        log.epochs.push(EpochRecord {
            epoch,
            step: state.adam.step,
            loss: LossReport::mean(&reports),
            val_student,
            val_teacher,
        });
        log.wall_clock_s.push(started.elapsed().as_secs_f64());
        state.epochs_done = epoch + 1;

        if let Some(dir) = &cfg.checkpoint_dir {
            let last = state.epochs_done == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && state.epochs_done.is_multiple_of(cfg.checkpoint_every)) {
                save_state(&checkpoint_path(dir, state.epochs_done), &state, cfg)?;
            }
        }
    }
    Ok((state, log))
}

pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(format!("epoch{epochs_done:04}.ckpt"))
}

/// Writes model parameters, Adam moments (`adam.m.<path>`, `adam.v.<path>`),
/// and progress into one checkpoint file.
pub fn save_state(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut tensors = state.model.named_tensors();
    for (prefix, moments) in [("adam.m.", &state.adam.m), ("adam.v.", &state.adam.v)] {
        for (p, m) in state.model.params().iter().zip(moments) {
            tensors.push((format!("{prefix}{}", p.path), Tensor::new(p.tensor.shape().to_vec(), m.clone())?));
        }
    }
    let meta = serde_json::json!({
        "epochs_done": state.epochs_done,
        "adam_step": state.adam.step,
        "train_config": cfg,
    });
    write_checkpoint(path, &Checkpoint { model_config: state.model.config().clone(), tensors, meta })
}

/// Reads a state written by [`save_state`]. With `expected` set, the stored
/// architecture must match it.
pub fn load_state(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let ckpt = read_checkpoint(path)?;
    if let Some(exp) = expected {
        if *exp != ckpt.model_config {
            return Err(Error::Dimension(format!(
                "checkpoint architecture {:?} does not match the requested {:?}",
                ckpt.model_config, exp
            )));
        }
    }
    let model = VmdModel::from_named_tensors(ckpt.model_config.clone(), &ckpt.tensors)?;
    let lookup = |name: String| -> Result<Vec<f64>> {
        ckpt.tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::parse(path, "tensor table", format!("missing optimizer tensor {name}")))
    };
    let mut adam = AdamState::for_model(&model);
    for (i, p) in model.params().iter().enumerate() {
        adam.m[i] = lookup(format!("adam.m.{}", p.path))?;
        adam.v[i] = lookup(format!("adam.v.{}", p.path))?;
    }
    let field = |k: &str| {
        ckpt.meta
            .get(k)
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::parse(path, "header.meta", format!("missing or invalid {k}")))
    };
    adam.step = field("adam_step")?;
    let epochs_done = field("epochs_done")? as usize;
    Ok(TrainState { model, adam, epochs_done })
}

/// Plain cross-entropy training of the student branch alone (student encoder,
/// head, and shared classifier), drawing from the same shuffle and student
/// noise streams as [`run_training`].
pub fn train_student_ce(model: VmdModel, dataset: &Dataset, split: &Holdout, cfg: &TrainConfig) -> Result<VmdModel> {
    cfg.validate()?;
    check_data(&model, dataset, split)?;
    let mut model = model;
    let mut adam = AdamState::for_model(&model);
    let trainable = model.param_ids(&[Owner::Student, Owner::SharedClassifier]);
    for epoch in 0..cfg.epochs {
        let mut eps = rng::stream_indexed(cfg.seed, "eps.student", epoch as u64);
        for idx in epoch_batches(&split.train, cfg.seed, epoch, cfg.batch_size) {
            let batch = dataset.batch(&idx)?;
            let mut g = Graph::new();
            let mut b = Binding::new(&model);
            let x = g.constant(batch.x_s.clone());
            let z = model.encode(&mut g, &mut b, BranchKind::Student, x, Noise::Draw(&mut eps))?;
            let pred = model.classify(&mut g, &mut b, BranchKind::Student, &z, LatentMode::Sample)?;
            let loss = losses::cross_entropy(&mut g, &pred, &batch.labels)?;
            if !g.item(loss)?.is_finite() {
                return Err(Error::NonFinite(format!("student cross-entropy at epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = (0..model.params().len())
                .map(|i| {
                    trainable.contains(&i).then(|| {
                        b.vars()[i]
                            .and_then(|v| g.grad(v))
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; model.params()[i].tensor.numel()])
                    })
                })
                .collect();
            let params = model.params_mut().iter_mut().map(|p| &mut p.tensor);
            adam_step(params, &grads, &mut adam, cfg.lr, cfg.weight_decay)?;
        }
    }
    Ok(model)
}

/// Gradient check of the full objective with respect to every model
/// parameter, on a small model and a 4-sample batch with both classes.
/// Noise streams are re-created per evaluation so every perturbed pass sees
/// the same ε.
pub fn objective_gradient_check(seed: u64, eps: f64, exec: Execution) -> Result<f64> {
    let spec = GeneratorSpec {
        n_samples: 4,
        feature_dim: 5,
        report_dim: 3,
        signal_dims: 2,
        mask_noise_dims: 2,
        seed,
        ..GeneratorSpec::default()
    };
    let mut data = generate(&spec)?;
    for (s, label) in data.samples.iter_mut().zip([1, 0, 1, 0]) {
        s.label = label;
    }
    let batch = data.batch(&[0, 1, 2, 3])?;
    let config = ModelConfig { feature_dim: 5, report_dim: 3, hidden_dims: vec![4, 3], latent_dim: 3 };
    let model = VmdModel::new(config, seed)?;
    let weights = LossWeights::with([0.7, 1.1, 0.9, 1.3], [0.8, 1.2, 0.6]);
    let inputs: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    gradient_check_many(
        |g, vars| {
            let mut b = Binding::from_vars(vars);
            let mut noise = epoch_noise(seed, 0);
            let out = forward_batch(g, &mut b, &model, &batch, &mut noise)?;
            Ok(losses::global_objective(g, &out, &weights)?.0)
        },
        &inputs,
        eps,
        exec,
    )
}
