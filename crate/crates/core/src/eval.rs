//! Student-only inference, classification metrics, and the ablation harness.

mod ablation;

pub use ablation::{run_ablation, AblationRow, AblationSpec, BranchResult, AblationTable, Selection, TrendCheck, Variant, VariantRun};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Binding, BranchKind, LatentMode, Noise, VmdModel};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;

/// Class probabilities from a single forward pass, `N × 2` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl Probabilities {
    /// Probability of the vulnerable class for each row.
    pub fn positive_scores(&self) -> Vec<f64> {
        self.probabilities.data().chunks(2).map(|r| r[1]).collect()
    }
}

fn infer_branch(model: &VmdModel, kind: BranchKind, x: &Tensor, mode: LatentMode, rng: Option<&mut Rng>) -> Result<Probabilities> {
    let mut g = Graph::new();
    let mut b = Binding::new(model);
    let input = g.constant(x.clone());
    let noise = match (mode, rng) {
        (LatentMode::Mean, _) => Noise::Zero,
        (LatentMode::Sample, Some(rng)) => Noise::Draw(rng),
        (LatentMode::Sample, None) => {
            return Err(Error::Contract("sampling inference needs a random stream".into()))
        }
    };
    let z = model.encode(&mut g, &mut b, kind, input, noise)?;
    let pred = model.classify(&mut g, &mut b, kind, &z, mode)?;
    Ok(Probabilities {
        logits: g.tensor(pred.logits),
        probabilities: g.tensor(pred.probabilities),
    })
}

/// Student-only prediction from raw features: no mask, report, teacher, or
/// expert is consulted. `rng` is required only for [`LatentMode::Sample`].
pub fn infer_student(model: &VmdModel, x_s: &Tensor, mode: LatentMode, rng: Option<&mut Rng>) -> Result<Probabilities> {
    infer_branch(model, BranchKind::Student, x_s, mode, rng)
}

/// Teacher-branch prediction from masked features.
pub fn infer_teacher(model: &VmdModel, x_t: &Tensor, mode: LatentMode, rng: Option<&mut Rng>) -> Result<Probabilities> {
    infer_branch(model, BranchKind::Teacher, x_t, mode, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when the labels hold a single class.
    pub roc_auc: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub confusion: Confusion,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    crate::losses::check_labels(labels)
}

/// Area under the ROC curve from the Mann–Whitney rank statistic, with tied
/// scores given their average rank.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract(format!(
            "ROC AUC is undefined with a single class ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC AUC (when defined) plus thresholded metrics. A score `≥ threshold`
/// predicts class 1. Zero denominators give 0.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64, beta: f64) -> Result<MetricReport> {
    check_scores(scores, labels)?;
    let roc_auc = roc_auc(scores, labels).ok();
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    let fbeta = if den == 0.0 { 0.0 } else { (1.0 + b2) * precision * recall / den };
    Ok(MetricReport {
        roc_auc,
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        fbeta,
        confusion: c,
    })
}

/// Student metrics on a set of samples, latent-mean inference, default threshold and β.
pub fn evaluate_student(model: &VmdModel, x_s: &Tensor, labels: &[u8]) -> Result<MetricReport> {
    let p = infer_student(model, x_s, LatentMode::Mean, None)?;
    compute_metrics(&p.positive_scores(), labels, DEFAULT_THRESHOLD, DEFAULT_BETA)
}

pub fn evaluate_teacher(model: &VmdModel, x_t: &Tensor, labels: &[u8]) -> Result<MetricReport> {
    let p = infer_teacher(model, x_t, LatentMode::Mean, None)?;
    compute_metrics(&p.positive_scores(), labels, DEFAULT_THRESHOLD, DEFAULT_BETA)
}

/// Mean and sample standard deviation of each metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub roc_auc: (f64, f64),
    pub accuracy: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub fbeta: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricSummary {
    /// Runs with an undefined AUC are skipped for the AUC column only.
    pub fn from_reports(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Contract("summary over zero reports".into()));
        }
        let col = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        let aucs: Vec<f64> = reports.iter().filter_map(|r| r.roc_auc).collect();
        Ok(Self {
            roc_auc: if aucs.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&aucs) },
            accuracy: col(|r| r.accuracy),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            fbeta: col(|r| r.fbeta),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ModelConfig, Owner};
    use crate::rng;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn four_sample_example() {
        let (labels, scores) = ([1, 1, 0, 0], [0.9, 0.4, 0.6, 0.1]);
        let m = compute_metrics(&scores, &labels, 0.5, 0.5).unwrap();
        assert_eq!(m.roc_auc, Some(0.75));
        assert_eq!(brute_auc(&scores, &labels), 0.75);
        assert_eq!(m.confusion, Confusion { tp: 1, fn_: 1, fp: 1, tn: 1 });
        assert_eq!((m.precision, m.recall, m.fbeta, m.accuracy), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn perfect_separation() {
        let m = compute_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5, 0.5).unwrap();
        assert_eq!(m.roc_auc, Some(1.0));
        assert_eq!((m.accuracy, m.precision, m.recall, m.fbeta), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_leaves_other_metrics() {
        let m = compute_metrics(&[0.9, 0.2], &[1, 1], 0.5, 0.5).unwrap();
        assert_eq!(m.roc_auc, None);
        assert_eq!(m.recall, 0.5);
        assert!(roc_auc(&[0.9, 0.2], &[1, 1]).is_err());
        assert!(compute_metrics(&[], &[], 0.5, 0.5).is_err());
    }

    #[test]
    fn shuffled_scores_are_near_chance() {
        let mut r = rng::stream(3, "test.auc");
        let labels: Vec<u8> = (0..4000).map(|i| (i % 3 == 0) as u8).collect();
        let scores: Vec<f64> = (0..4000).map(|_| rand::Rng::random::<f64>(&mut r)).collect();
        // sd of AUC under H0 ≈ √((n1+n0+1)/(12 n1 n0)) ≈ 0.0096
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 0.04);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            data in prop::collection::vec((0u8..2, 0u32..8), 2..50)
        ) {
            let labels: Vec<u8> = data.iter().map(|d| d.0).collect();
            // coarse scores force ties
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 8.0).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn metric_identities(
            data in prop::collection::vec((0u8..2, 0.0f64..1.0), 1..60)
        ) {
            let labels: Vec<u8> = data.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.1).collect();
            let m = compute_metrics(&scores, &labels, 0.5, 0.5).unwrap();
            let c = m.confusion;
            prop_assert_eq!(c.total(), labels.len() as u64);
            prop_assert_eq!(m.accuracy, (c.tp + c.tn) as f64 / labels.len() as f64);
            let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
            let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
            prop_assert!((m.precision - p).abs() < 1e-12 && (m.recall - r).abs() < 1e-12);
            let f = if p == 0.0 && r == 0.0 { 0.0 } else { 1.25 * p * r / (0.25 * p + r) };
            prop_assert!((m.fbeta - f).abs() < 1e-12);
        }
    }

    fn tiny_model() -> VmdModel {
        let cfg = ModelConfig { feature_dim: 5, report_dim: 3, hidden_dims: vec![4, 4], latent_dim: 3 };
        VmdModel::new(cfg, 2).unwrap()
    }

    #[test]
    fn student_inference_is_pure_and_isolated() {
        let m = tiny_model();
        let x = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = infer_student(&m, &x, LatentMode::Mean, None).unwrap();
        assert_eq!(a, infer_student(&m, &x, LatentMode::Mean, None).unwrap());
        assert_eq!(m.access().count(Owner::Teacher) + m.access().count(Owner::Expert), 0);
        assert!(m.access().count(Owner::Student) > 0 && m.access().count(Owner::SharedClassifier) > 0);

        let mut r1 = rng::stream(1, "infer");
        let mut r2 = rng::stream(1, "infer");
        let s1 = infer_student(&m, &x, LatentMode::Sample, Some(&mut r1)).unwrap();
        assert_eq!(s1, infer_student(&m, &x, LatentMode::Sample, Some(&mut r2)).unwrap());
        assert_ne!(s1, a);
        assert!(infer_student(&m, &x, LatentMode::Sample, None).is_err());

        let wrong = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(infer_student(&m, &wrong, LatentMode::Mean, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_classifier_is_uninformative() {
        let mut m = tiny_model();
        m.zero_classifier(BranchKind::Student);
        let x = Tensor::matrix(2, 5, vec![0.3; 10]).unwrap();
        let p = infer_student(&m, &x, LatentMode::Mean, None).unwrap();
        assert!(p.probabilities.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn summary_uses_sample_std() {
        let mk = |auc| MetricReport {
            roc_auc: Some(auc),
            accuracy: 0.5,
            precision: 0.5,
            recall: 0.5,
            fbeta: 0.5,
            confusion: Confusion::default(),
        };
        let s = MetricSummary::from_reports(&[mk(0.6), mk(0.8)]).unwrap();
        assert!((s.roc_auc.0 - 0.7).abs() < 1e-15);
        assert!((s.roc_auc.1 - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.accuracy, (0.5, 0.0));
    }
}
