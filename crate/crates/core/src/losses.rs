//! Terms of the distillation objective.
//!
//! Every function records onto a [`Graph`] and returns a scalar [`Var`], so a
//! single backward pass through [`global_objective`] reaches all encoder,
//! head, and classifier parameters. Batch-level quantities are means over the
//! minibatch; the contrastive sums run over the minibatch as well.
//!
//! Maximized quantities (the three mutual-information terms) are returned
//! with their natural sign; [`global_objective`] negates them to form the
//! minimized loss `−(α₁ I(S,T) + α₂ I(S,E) + α₃ I(T,E)) + α₄ H_cls`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{GaussianLatent, Prediction, NUM_CLASSES};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities (and similarity scores) are clamped to this range before `log`.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

pub const DEFAULT_TAU: f64 = 0.5;

/// Which prediction vector the cosine similarity compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityInput {
    #[default]
    Logits,
    Probs,
}

/// Which latent sample feeds the likelihood term of the ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboExpectation {
    /// The expert's sampled latent, classified by the image branch's head.
    #[default]
    ExpertZ,
    /// The image branch's own sampled latent.
    StudentZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weights of I(S,T), I(S,E), I(T,E) and H_cls.
    pub alpha: [f64; 4],
    /// Cross-entropy weights for teacher, student, expert.
    pub lambda: [f64; 3],
    pub tau: f64,
    pub similarity_input: SimilarityInput,
    pub elbo_expectation: ElboExpectation,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [1.0; 4],
            lambda: [1.0; 3],
            tau: DEFAULT_TAU,
            similarity_input: SimilarityInput::Logits,
            elbo_expectation: ElboExpectation::ExpertZ,
        }
    }
}

impl LossWeights {
    pub fn with(alpha: [f64; 4], lambda: [f64; 3]) -> Self {
        Self {
            alpha,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(w) = self
            .alpha
            .iter()
            .chain(&self.lambda)
            .find(|w| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::Config(format!("loss weight {w} must be finite and nonnegative")));
        }
        Ok(())
    }
}

/// Outputs of one branch on a batch.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub latent: GaussianLatent,
    pub prediction: Prediction,
}

/// Everything the objective needs from one forward pass over a minibatch.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub student: BranchOutputs,
    pub teacher: BranchOutputs,
    pub expert: BranchOutputs,
    /// The expert's sampled latent pushed through the shared image classifier.
    pub expert_z_image_prediction: Prediction,
    /// 0 = stable, 1 = vulnerable.
    pub labels: Vec<u8>,
}

/// Scalar values of every term for one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    /// Minimized loss.
    pub total: f64,
    pub i_st: f64,
    pub i_se: f64,
    pub i_te: f64,
    pub h_cls: f64,
    /// KL(expert posterior ‖ student prior).
    pub kld_student: f64,
    /// KL(expert posterior ‖ teacher prior).
    pub kld_teacher: f64,
    pub ce_teacher: f64,
    pub ce_student: f64,
    pub ce_expert: f64,
}

impl LossReport {
    /// The minimized loss rebuilt from the reported terms.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        -(w.alpha[0] * self.i_st + w.alpha[1] * self.i_se + w.alpha[2] * self.i_te) + w.alpha[3] * self.h_cls
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("i_st", self.i_st),
            ("i_se", self.i_se),
            ("i_te", self.i_te),
            ("kld_student", self.kld_student),
            ("kld_teacher", self.kld_teacher),
            ("ce_teacher", self.ce_teacher),
            ("ce_student", self.ce_student),
            ("ce_expert", self.ce_expert),
            ("h_cls", self.h_cls),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// Element-wise mean of several reports (e.g. over the batches of an epoch).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total;
            m.i_st += r.i_st;
            m.i_se += r.i_se;
            m.i_te += r.i_te;
            m.h_cls += r.h_cls;
            m.kld_student += r.kld_student;
            m.kld_teacher += r.kld_teacher;
            m.ce_teacher += r.ce_teacher;
            m.ce_student += r.ce_student;
            m.ce_expert += r.ce_expert;
        }
        m.total /= n;
        m.i_st /= n;
        m.i_se /= n;
        m.i_te /= n;
        m.h_cls /= n;
        m.kld_student /= n;
        m.kld_teacher /= n;
        m.ce_teacher /= n;
        m.ce_student /= n;
        m.ce_expert /= n;
        m
    }
}

pub fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Contract(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

fn batch_rows(g: &Graph, v: Var, what: &str) -> Result<usize> {
    match g.shape(v) {
        [n, _] => Ok(*n),
        s => Err(Error::Dimension(format!("{what}: expected a batch matrix, got {s:?}"))),
    }
}

fn one_hot(labels: &[u8]) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        data[i * NUM_CLASSES + l as usize] = 1.0;
    }
    Tensor::matrix(labels.len(), NUM_CLASSES, data)
}

/// Per-sample `log p(true class)` with clamped probabilities, shape `[N]`.
pub fn log_likelihood(g: &mut Graph, pred: &Prediction, labels: &[u8]) -> Result<Var> {
    check_labels(labels)?;
    let n = batch_rows(g, pred.probabilities, "log_likelihood")?;
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} predictions for {} labels", labels.len())));
    }
    let p = g.clamp(pred.probabilities, PROB_CLAMP.0, PROB_CLAMP.1);
    let lp = g.log(p);
    let mask = g.constant(one_hot(labels)?);
    let picked = g.mul(lp, mask)?;
    g.sum(picked, Some(1))
}

/// Batch-mean cross-entropy `−mean log p(true class)`.
pub fn cross_entropy(g: &mut Graph, pred: &Prediction, labels: &[u8]) -> Result<Var> {
    let ll = log_likelihood(g, pred, labels)?;
    let m = g.mean(ll, None)?;
    Ok(g.neg(m))
}

/// Closed-form KL(q ‖ p) between diagonal Gaussians, summed over latent
/// dimensions and averaged over the batch.
pub fn gaussian_kld(g: &mut Graph, q: &GaussianLatent, p: &GaussianLatent) -> Result<Var> {
    let shape = g.shape(q.mean).to_vec();
    for v in [q.log_std, p.mean, p.log_std] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "gaussian_kld: latent shapes {shape:?} and {:?} differ",
                g.shape(v)
            )));
        }
    }
    // log σp − log σq + ½ (σq/σp)² + ½ (μq − μp)² / σp² − ½
    let d = g.sub(q.log_std, p.log_std)?;
    let log_ratio = g.neg(d);
    let d2 = g.scale(d, 2.0);
    let var_ratio = g.exp(d2);
    let var_term = g.scale(var_ratio, 0.5);
    let diff = g.sub(q.mean, p.mean)?;
    let sq = g.mul(diff, diff)?;
    let lp2 = g.scale(p.log_std, -2.0);
    let inv_var = g.exp(lp2);
    let mahal = g.mul(sq, inv_var)?;
    let mean_term = g.scale(mahal, 0.5);
    let a = g.add(log_ratio, var_term)?;
    let b = g.add(a, mean_term)?;
    let per_dim = g.add_scalar(b, -0.5);
    match shape.len() {
        1 => g.sum(per_dim, None),
        2 => {
            let per_sample = g.sum(per_dim, Some(1))?;
            g.mean(per_sample, None)
        }
        _ => Err(Error::Dimension(format!("gaussian_kld: unsupported latent shape {shape:?}"))),
    }
}

/// Evidence lower bound: one-sample estimate of `E_q[log p(y | ·)]` minus
/// `KL(expert posterior ‖ image prior)`, batch-averaged.
pub fn elbo_term(
    g: &mut Graph,
    expert_z: &GaussianLatent,
    image_prior: &GaussianLatent,
    image_pred_with_expert_z: &Prediction,
    labels: &[u8],
) -> Result<Var> {
    let ll = log_likelihood(g, image_pred_with_expert_z, labels)?;
    let expectation = g.mean(ll, None)?;
    let kld = gaussian_kld(g, expert_z, image_prior)?;
    g.sub(expectation, kld)
}

fn similarity_source(pred: &Prediction, input: SimilarityInput) -> Var {
    match input {
        SimilarityInput::Logits => pred.logits,
        SimilarityInput::Probs => pred.probabilities,
    }
}

/// `M[j, k] = softmax_k(cos(anchor_j, candidate_k) / τ)`, an `N_a × N_c` matrix.
pub fn similarity_matrix(g: &mut Graph, anchors: Var, candidates: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if batch_rows(g, candidates, "similarity_matrix")? == 0 {
        return Err(Error::Contract("similarity over an empty candidate set".into()));
    }
    let cos = g.cosine_matrix(anchors, candidates)?;
    let scaled = g.scale(cos, 1.0 / tau);
    g.softmax(scaled, 1)
}

/// Similarity score of one anchor against candidate `i`.
pub fn similarity_model(
    g: &mut Graph,
    anchor: Var,
    candidates: Var,
    i: usize,
    tau: f64,
) -> Result<f64> {
    let anchor = match g.shape(anchor).to_vec().as_slice() {
        [d] => g.reshape(anchor, &[1, *d])?,
        [1, _] => anchor,
        s => {
            return Err(Error::Dimension(format!(
                "similarity_model: anchor must be a single prediction, got {s:?}"
            )))
        }
    };
    let m = similarity_matrix(g, anchor, candidates, tau)?;
    let n = g.shape(m)[1];
    if i >= n {
        return Err(Error::Contract(format!("candidate index {i} out of range for {n} candidates")));
    }
    Ok(g.value(m)[i])
}

/// Label-supervised contrastive mutual-information estimate:
/// `(1/N) Σ_j [ Σ_{i: y_i = y_j} log M_ji + Σ_{k: y_k ≠ y_j} log(1 − M_jk) ]`
/// with `M` clamped to [`PROB_CLAMP`]. The positive set includes `i = j`.
pub fn contrastive_mi(
    g: &mut Graph,
    anchors: &Prediction,
    candidates: &Prediction,
    labels: &[u8],
    tau: f64,
    input: SimilarityInput,
) -> Result<Var> {
    check_labels(labels)?;
    let a = similarity_source(anchors, input);
    let c = similarity_source(candidates, input);
    let (na, nc) = (batch_rows(g, a, "contrastive_mi")?, batch_rows(g, c, "contrastive_mi")?);
    if na != nc || na != labels.len() {
        return Err(Error::Dimension(format!(
            "contrastive_mi: {na} anchors, {nc} candidates, {} labels",
            labels.len()
        )));
    }
    if na == 0 {
        return Err(Error::Contract("contrastive_mi needs at least one sample".into()));
    }
    let n = na;
    let m = similarity_matrix(g, a, c, tau)?;
    let m = g.clamp(m, PROB_CLAMP.0, PROB_CLAMP.1);
    let log_m = g.log(m);
    let neg_m = g.neg(m);
    let one_minus = g.add_scalar(neg_m, 1.0);
    let log_1m = g.log(one_minus);

    let mut pos = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            pos[j * n + k] = if labels[j] == labels[k] { 1.0 } else { 0.0 };
        }
    }
    let neg: Vec<f64> = pos.iter().map(|p| 1.0 - p).collect();
    let pos = g.constant(Tensor::matrix(n, n, pos)?);
    let neg = g.constant(Tensor::matrix(n, n, neg)?);
    let pos_terms = g.mul(log_m, pos)?;
    let neg_terms = g.mul(log_1m, neg)?;
    let all = g.add(pos_terms, neg_terms)?;
    let total = g.sum(all, None)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Expert constraint on the teacher: the teacher ELBO plus the contrastive
/// term with teacher anchors and expert candidates.
#[allow(clippy::too_many_arguments)]
pub fn teacher_constraint(
    g: &mut Graph,
    expert_z: &GaussianLatent,
    teacher_prior: &GaussianLatent,
    teacher_pred_with_expert_z: &Prediction,
    labels: &[u8],
    teacher_preds: &Prediction,
    expert_preds: &Prediction,
    tau: f64,
    input: SimilarityInput,
) -> Result<Var> {
    let elbo = elbo_term(g, expert_z, teacher_prior, teacher_pred_with_expert_z, labels)?;
    let mi = contrastive_mi(g, teacher_preds, expert_preds, labels, tau, input)?;
    g.add(elbo, mi)
}

/// `λ₁ CE(T) + λ₂ CE(S) + λ₃ CE(E)`.
pub fn h_cls(
    g: &mut Graph,
    preds_t: &Prediction,
    preds_s: &Prediction,
    preds_e: &Prediction,
    labels: &[u8],
    lambda: [f64; 3],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (pred, w) in [(preds_t, lambda[0]), (preds_s, lambda[1]), (preds_e, lambda[2])] {
        let ce = cross_entropy(g, pred, labels)?;
        terms.push(g.scale(ce, w));
    }
    let ts = g.add(terms[0], terms[1])?;
    g.add(ts, terms[2])
}

/// The full minimized objective and a per-term report.
pub fn global_objective(g: &mut Graph, batch: &BatchOutputs, w: &LossWeights) -> Result<(Var, LossReport)> {
    w.validate()?;
    let labels = &batch.labels;
    let (s, t, e) = (&batch.student, &batch.teacher, &batch.expert);

    let i_st = contrastive_mi(g, &t.prediction, &s.prediction, labels, w.tau, w.similarity_input)?;

    let (se_pred, te_pred) = match w.elbo_expectation {
        ElboExpectation::ExpertZ => (batch.expert_z_image_prediction, batch.expert_z_image_prediction),
        ElboExpectation::StudentZ => (s.prediction, t.prediction),
    };
    let i_se = elbo_term(g, &e.latent, &s.latent, &se_pred, labels)?;
    let i_te = teacher_constraint(
        g,
        &e.latent,
        &t.latent,
        &te_pred,
        labels,
        &t.prediction,
        &e.prediction,
        w.tau,
        w.similarity_input,
    )?;
    let h = h_cls(g, &t.prediction, &s.prediction, &e.prediction, labels, w.lambda)?;

    let a1 = g.scale(i_st, w.alpha[0]);
    let a2 = g.scale(i_se, w.alpha[1]);
    let a3 = g.scale(i_te, w.alpha[2]);
    let a12 = g.add(a1, a2)?;
    let mi = g.add(a12, a3)?;
    let a4 = g.scale(h, w.alpha[3]);
    let total = g.sub(a4, mi)?;

    // report-only values; these nodes are not part of `total`
    let kld_student = gaussian_kld(g, &e.latent, &s.latent)?;
    let kld_teacher = gaussian_kld(g, &e.latent, &t.latent)?;
    let ce_t = cross_entropy(g, &t.prediction, labels)?;
    let ce_s = cross_entropy(g, &s.prediction, labels)?;
    let ce_e = cross_entropy(g, &e.prediction, labels)?;

    let report = LossReport {
        total: g.item(total)?,
        i_st: g.item(i_st)?,
        i_se: g.item(i_se)?,
        i_te: g.item(i_te)?,
        h_cls: g.item(h)?,
        kld_student: g.item(kld_student)?,
        kld_teacher: g.item(kld_teacher)?,
        ce_teacher: g.item(ce_t)?,
        ce_student: g.item(ce_s)?,
        ce_expert: g.item(ce_e)?,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn latent(g: &mut Graph, mean: Vec<f64>, log_std: Vec<f64>) -> GaussianLatent {
        let d = mean.len();
        let m = g.constant(Tensor::matrix(1, d, mean).unwrap());
        let l = g.constant(Tensor::matrix(1, d, log_std).unwrap());
        GaussianLatent { mean: m, log_std: l, sample: m, noise: Tensor::zeros(&[1, d]) }
    }

    fn pred_from_logits(g: &mut Graph, rows: usize, logits: Vec<f64>) -> Prediction {
        let l = g.constant(Tensor::matrix(rows, 2, logits).unwrap());
        let p = g.softmax(l, 1).unwrap();
        Prediction { logits: l, probabilities: p }
    }

    /// Simpson-rule integral of q log(q/p) for 1-D Gaussians.
    fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
        let pdf = |x: f64, m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi) = (mq - 14.0 * sq, mq + 14.0 * sq);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| {
            let q = pdf(x, mq, sq);
            if q == 0.0 { 0.0 } else { q * (q.ln() - pdf(x, mp, sp).ln()) }
        };
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn kld_examples() {
        let mut g = Graph::new();
        let q = latent(&mut g, vec![0.3, -1.0], vec![0.2, -0.4]);
        let k = gaussian_kld(&mut g, &q, &q).unwrap();
        assert_eq!(g.item(k).unwrap(), 0.0);

        let q = latent(&mut g, vec![1.0], vec![0.0]);
        let p = latent(&mut g, vec![0.0], vec![0.0]);
        let k = gaussian_kld(&mut g, &q, &p).unwrap();
        assert!((g.item(k).unwrap() - 0.5).abs() < 1e-15);
        assert!((kl_quadrature(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-9);

        let p2 = latent(&mut g, vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(gaussian_kld(&mut g, &q, &p2), Err(Error::Dimension(_))));
    }

    #[test]
    fn kld_matches_quadrature() {
        let mut r = rng::stream(3, "kld.test");
        for _ in 0..10 {
            let v = rng::normals(&mut r, 4);
            let (mq, lq, mp, lp) = (v[0], 0.4 * v[1], v[2], 0.4 * v[3]);
            let mut g = Graph::new();
            let q = latent(&mut g, vec![mq], vec![lq]);
            let p = latent(&mut g, vec![mp], vec![lp]);
            let k = gaussian_kld(&mut g, &q, &p).unwrap();
            let oracle = kl_quadrature(mq, lq.exp(), mp, lp.exp());
            assert!((g.item(k).unwrap() - oracle).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn kld_is_nonnegative(mq in -3.0..3.0f64, lq in -2.0..2.0f64, mp in -3.0..3.0f64, lp in -2.0..2.0f64) {
            let mut g = Graph::new();
            let q = latent(&mut g, vec![mq, mp], vec![lq, lp]);
            let p = latent(&mut g, vec![mp, mq], vec![lp, lq]);
            let k = gaussian_kld(&mut g, &q, &p).unwrap();
            prop_assert!(g.item(k).unwrap() >= -1e-15);
        }

        #[test]
        fn contrastive_is_permutation_invariant(
            logits in proptest::collection::vec(-3.0..3.0f64, 12),
            labels in proptest::collection::vec(0u8..2, 3),
            perm_seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let n = 3;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(perm_seed, "perm"));
            let permute = |v: &[f64]| -> Vec<f64> { order.iter().flat_map(|&i| v[2 * i..2 * i + 2].to_vec()).collect() };
            let eval = |t: Vec<f64>, s: Vec<f64>, y: Vec<u8>| {
                let mut g = Graph::new();
                let tp = pred_from_logits(&mut g, n, t);
                let sp = pred_from_logits(&mut g, n, s);
                let v = contrastive_mi(&mut g, &tp, &sp, &y, 0.5, SimilarityInput::Logits).unwrap();
                g.item(v).unwrap()
            };
            let a = eval(logits[..6].to_vec(), logits[6..].to_vec(), labels.clone());
            let b = eval(permute(&logits[..6]), permute(&logits[6..]), order.iter().map(|&i| labels[i]).collect());
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn elbo_examples() {
        let mut g = Graph::new();
        let z = latent(&mut g, vec![0.1, 0.2], vec![0.0, -0.3]);
        let uniform = pred_from_logits(&mut g, 1, vec![0.0, 0.0]);
        let e = elbo_term(&mut g, &z, &z, &uniform, &[1]).unwrap();
        assert!((g.item(e).unwrap() + std::f64::consts::LN_2).abs() < 1e-15);

        let sure = pred_from_logits(&mut g, 1, vec![-200.0, 200.0]);
        let e = elbo_term(&mut g, &z, &z, &sure, &[1]).unwrap();
        assert!((g.item(e).unwrap() - (1.0 - 1e-7f64).ln()).abs() < 1e-15);

        assert!(matches!(elbo_term(&mut g, &z, &z, &sure, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn similarity_examples() {
        let mut g = Graph::new();
        let anchor = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let one = pred_from_logits(&mut g, 1, vec![-0.5, 3.0]);
        assert_eq!(similarity_model(&mut g, anchor, one.logits, 0, 0.5).unwrap(), 1.0);

        // both candidates at the same angle to the anchor
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let two = pred_from_logits(&mut g, 2, vec![1.0, 1.0, 1.0, -1.0]);
        let m0 = similarity_model(&mut g, a, two.logits, 0, 0.5).unwrap();
        let m1 = similarity_model(&mut g, a, two.logits, 1, 0.5).unwrap();
        assert!((m0 - 0.5).abs() < 1e-15 && (m1 - 0.5).abs() < 1e-15);

        assert!(similarity_model(&mut g, a, two.logits, 2, 0.5).is_err());
        let empty = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(similarity_model(&mut g, a, empty, 0, 0.5), Err(Error::Contract(_))));
        assert_eq!(LossWeights::default().tau, 0.5);
    }

    #[test]
    fn similarity_rows_sum_to_one() {
        let mut r = rng::stream(1, "sim");
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(5, 2, rng::normals(&mut r, 10)).unwrap());
        let c = g.constant(Tensor::matrix(5, 2, rng::normals(&mut r, 10)).unwrap());
        let m = similarity_matrix(&mut g, a, c, 0.5).unwrap();
        for row in g.value(m).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    /// Direct evaluation of the similarity softmax and the contrastive sum.
    fn contrastive_oracle(t: &[[f64; 2]], s: &[[f64; 2]], y: &[u8], tau: f64) -> f64 {
        let cos = |a: [f64; 2], b: [f64; 2]| {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt().max(1e-12);
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt().max(1e-12);
            (a[0] * b[0] + a[1] * b[1]) / (na * nb)
        };
        let n = y.len();
        let mut total = 0.0;
        for j in 0..n {
            let z: f64 = (0..n).map(|k| (cos(t[j], s[k]) / tau).exp()).sum();
            for i in 0..n {
                let m = ((cos(t[j], s[i]) / tau).exp() / z).clamp(1e-7, 1.0 - 1e-7);
                total += if y[i] == y[j] { m.ln() } else { (1.0 - m).ln() };
            }
        }
        total / n as f64
    }

    #[test]
    fn contrastive_two_sample_hand_case() {
        let t = [[1.0, 0.5], [-0.3, 0.8]];
        let s = [[0.2, -1.0], [0.9, 0.1]];
        let mut g = Graph::new();
        let tp = pred_from_logits(&mut g, 2, t.concat());
        let sp = pred_from_logits(&mut g, 2, s.concat());
        let v = contrastive_mi(&mut g, &tp, &sp, &[0, 1], 0.5, SimilarityInput::Logits).unwrap();
        assert!((g.item(v).unwrap() - contrastive_oracle(&t, &s, &[0, 1], 0.5)).abs() < 1e-12);

        // single class: only the positive sum remains
        let v = contrastive_mi(&mut g, &tp, &sp, &[1, 1], 0.5, SimilarityInput::Logits).unwrap();
        let mut expect = 0.0;
        for j in 0..2 {
            for i in 0..2 {
                let row = g.constant(Tensor::vector(t[j].to_vec()));
                expect += similarity_model(&mut g, row, sp.logits, i, 0.5).unwrap().ln();
            }
        }
        assert!((g.item(v).unwrap() - expect / 2.0).abs() < 1e-12);
        assert!(contrastive_mi(&mut g, &tp, &sp, &[1], 0.5, SimilarityInput::Logits).is_err());
    }

    #[test]
    fn contrastive_is_monotone_in_positive_cosine() {
        // One positive per anchor; s0 rotates towards t0 in the e1–e3 plane so
        // cos(t0, s0) is the only similarity that changes.
        let labels = [0u8, 1];
        let t = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut prev = f64::NEG_INFINITY;
        for step in 0..=20 {
            let angle = 2.5 * (1.0 - step as f64 / 20.0);
            let s = [angle.cos(), 0.0, angle.sin(), 0.3, 0.8, -0.2];
            let mut g = Graph::new();
            let tl = g.constant(Tensor::matrix(2, 3, t.to_vec()).unwrap());
            let sl = g.constant(Tensor::matrix(2, 3, s.to_vec()).unwrap());
            let tp = Prediction { logits: tl, probabilities: tl };
            let sp = Prediction { logits: sl, probabilities: sl };
            let v = contrastive_mi(&mut g, &tp, &sp, &labels, 0.5, SimilarityInput::Logits).unwrap();
            let v = g.item(v).unwrap();
            assert!(v >= prev - 1e-12, "objective fell at step {step}");
            prev = v;
        }
    }

    #[test]
    fn teacher_constraint_is_additive_and_finite_for_one_sample() {
        let mut r = rng::stream(8, "tc");
        let mut g = Graph::new();
        let n = 4;
        let mk = |g: &mut Graph, r: &mut rng::Rng| {
            let m = g.constant(Tensor::matrix(n, 3, rng::normals(r, 3 * n)).unwrap());
            let l = g.constant(Tensor::matrix(n, 3, rng::normals(r, 3 * n).iter().map(|v| 0.3 * v).collect()).unwrap());
            GaussianLatent { mean: m, log_std: l, sample: m, noise: Tensor::zeros(&[n, 3]) }
        };
        let ez = mk(&mut g, &mut r);
        let tz = mk(&mut g, &mut r);
        let tp = pred_from_logits(&mut g, n, rng::normals(&mut r, 2 * n));
        let ep = pred_from_logits(&mut g, n, rng::normals(&mut r, 2 * n));
        let tez = pred_from_logits(&mut g, n, rng::normals(&mut r, 2 * n));
        let labels = [1, 0, 1, 1];
        let tc = teacher_constraint(&mut g, &ez, &tz, &tez, &labels, &tp, &ep, 0.5, SimilarityInput::Logits).unwrap();
        let e = elbo_term(&mut g, &ez, &tz, &tez, &labels).unwrap();
        let c = contrastive_mi(&mut g, &tp, &ep, &labels, 0.5, SimilarityInput::Logits).unwrap();
        assert!((g.item(tc).unwrap() - g.item(e).unwrap() - g.item(c).unwrap()).abs() < 1e-9);

        let z1 = latent(&mut g, vec![0.0, 0.0], vec![0.0, 0.0]);
        let p1 = pred_from_logits(&mut g, 1, vec![0.0, 0.0]);
        let tc = teacher_constraint(&mut g, &z1, &z1, &p1, &[0], &p1, &p1, 0.5, SimilarityInput::Logits).unwrap();
        let v = g.item(tc).unwrap();
        assert!(v.is_finite());
        // −log 2 from the uniform likelihood plus log(1 − 1e-7) from the clamped M = 1
        assert!((v - (-std::f64::consts::LN_2 + (1.0 - 1e-7f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn h_cls_examples() {
        let mut g = Graph::new();
        let u = pred_from_logits(&mut g, 3, vec![0.0; 6]);
        let labels = [0, 1, 1];
        let h = h_cls(&mut g, &u, &u, &u, &labels, [1.0; 3]).unwrap();
        assert!((g.item(h).unwrap() - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let h = h_cls(&mut g, &u, &u, &u, &labels, [0.0; 3]).unwrap();
        assert_eq!(g.item(h).unwrap(), 0.0);

        let t = pred_from_logits(&mut g, 3, vec![1.0, -1.0, 0.2, 0.4, -2.0, 1.0]);
        let ce = cross_entropy(&mut g, &t, &labels).unwrap();
        let h = h_cls(&mut g, &t, &u, &u, &labels, [2.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.item(h).unwrap(), 2.0 * g.item(ce).unwrap());
        assert!(h_cls(&mut g, &t, &u, &u, &[0, 1, 5], [1.0; 3]).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        let mut w = LossWeights::default();
        w.alpha[2] = -1.0;
        assert!(w.validate().is_err());
    }
}
