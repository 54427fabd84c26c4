//! Ablation over which objective terms are active.
//!
//! Every (variant, seed) run uses the same stratified split and the same
//! initial model for a given seed; variants differ only in [`LossWeights`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_student, evaluate_teacher, MetricReport, MetricSummary};
use crate::config::{ArchConfig, SplitSettings};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::VmdModel;
use crate::parallel::{self, Execution};
use crate::synthdata::Dataset;
use crate::train::{run_training, train_from, TrainConfig, TrainState};

pub const BASELINE: &str = "baseline";
pub const WITHOUT_TEACHER: &str = "w/o teacher";
pub const WITHOUT_EXPERT: &str = "w/o expert";
pub const FULL: &str = "full VMD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub weights: LossWeights,
    /// Also report the teacher branch of this variant on the test split.
    pub report_teacher: bool,
}

impl Variant {
    fn new(name: &str, alpha: [f64; 4], lambda: [f64; 3], report_teacher: bool) -> Self {
        Self { name: name.to_string(), weights: LossWeights::with(alpha, lambda), report_teacher }
    }

    /// The student-only, teacher-only-guidance, expert-only-guidance, and full
    /// variants. Each branch's cross-entropy is on exactly when that branch
    /// takes part in an active term.
    pub fn standard() -> Vec<Variant> {
        vec![
            Variant::new(BASELINE, [0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0], false),
            Variant::new(WITHOUT_TEACHER, [0.0, 1.0, 0.0, 1.0], [0.0, 1.0, 1.0], false),
            Variant::new(WITHOUT_EXPERT, [1.0, 0.0, 0.0, 1.0], [1.0, 1.0, 0.0], true),
            Variant::new(FULL, [1.0; 4], [1.0; 3], true),
        ]
    }
}

/// Which epoch of a run is scored on the test split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The model after the last epoch.
    #[default]
    Final,
    /// Per branch, the epoch with the highest validation ROC AUC (earliest on
    /// ties).
    BestValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub selection: Selection,
    pub model: ArchConfig,
    /// Base training settings; `seed` and `weights` are overridden per run.
    pub train: TrainConfig,
    pub split: SplitSettings,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            variants: Variant::standard(),
            selection: Selection::default(),
            model: ArchConfig::default(),
            train: TrainConfig { eval_every: 0, ..TrainConfig::default() },
            split: SplitSettings::default(),
            exec: Execution::default(),
        }
    }
}

/// Test-split metrics of one trained (variant, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub student: MetricReport,
    pub teacher: Option<MetricReport>,
    /// Epochs trained when each reported metric was taken.
    pub student_epoch: usize,
    pub teacher_epoch: Option<usize>,
}

/// Per-seed test metrics of one branch and their mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub per_seed: Vec<MetricReport>,
    pub summary: MetricSummary,
}

impl BranchResult {
    fn new(per_seed: Vec<MetricReport>) -> Result<Self> {
        Ok(Self { summary: MetricSummary::from_reports(&per_seed)?, per_seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub student: BranchResult,
    pub teacher: Option<BranchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<VariantRun>,
}

/// One ordering claim checked against an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub claim: String,
    pub holds: bool,
}

/// Keeps the test metrics taken when the validation AUC was highest.
struct Best {
    val_auc: f64,
    epoch: usize,
    test: Option<MetricReport>,
}

impl Best {
    fn new() -> Self {
        Self { val_auc: f64::NEG_INFINITY, epoch: 0, test: None }
    }

    fn offer(&mut self, val: &MetricReport, epoch: usize, test: impl FnOnce() -> Result<MetricReport>) -> Result<()> {
        let auc = val.roc_auc.unwrap_or(f64::NEG_INFINITY);
        if self.test.is_none() || auc > self.val_auc {
            *self = Self { val_auc: auc, epoch, test: Some(test()?) };
        }
        Ok(())
    }
}

fn run_one(spec: &AblationSpec, dataset: &Dataset, variant: &Variant, seed: u64) -> Result<VariantRun> {
    let split = spec.split.split(dataset, seed)?;
    let model = VmdModel::new(spec.model.for_data(dataset)?, seed)?;
    let cfg = TrainConfig { seed, weights: variant.weights, checkpoint_dir: None, ..spec.train.clone() };
    let test = dataset.batch(&split.test)?;
    match spec.selection {
        Selection::Final => {
            let (trained, _) = run_training(model, dataset, &split, &cfg)?;
            Ok(VariantRun {
                variant: variant.name.clone(),
                seed,
                student: evaluate_student(&trained, &test.x_s, &test.labels)?,
                teacher: if variant.report_teacher { Some(evaluate_teacher(&trained, &test.x_t, &test.labels)?) } else { None },
                student_epoch: cfg.epochs,
                teacher_epoch: variant.report_teacher.then_some(cfg.epochs),
            })
        }
        Selection::BestValidation => {
            if split.val.is_empty() {
                return Err(Error::Config("validation selection needs a non-empty validation split".into()));
            }
            let val = dataset.batch(&split.val)?;
            let (mut student, mut teacher) = (Best::new(), Best::new());
            let mut state = TrainState::fresh(model);
            for epoch in 1..=cfg.epochs {
                let step_cfg = TrainConfig { epochs: epoch, eval_every: 0, ..cfg.clone() };
                state = train_from(state, dataset, &split, &step_cfg, &mut |_| {})?.0;
                let m = &state.model;
                student.offer(&evaluate_student(m, &val.x_s, &val.labels)?, epoch, || {
                    evaluate_student(m, &test.x_s, &test.labels)
                })?;
                if variant.report_teacher {
                    teacher.offer(&evaluate_teacher(m, &val.x_t, &val.labels)?, epoch, || {
                        evaluate_teacher(m, &test.x_t, &test.labels)
                    })?;
                }
            }
            Ok(VariantRun {
                variant: variant.name.clone(),
                seed,
                student: student.test.expect("at least one epoch"),
                student_epoch: student.epoch,
                teacher_epoch: teacher.test.is_some().then_some(teacher.epoch),
                teacher: teacher.test,
            })
        }
    }
}

/// Trains every variant for every seed (in parallel when `spec.exec` allows)
/// and summarizes held-out test metrics per variant and branch.
pub fn run_ablation(spec: &AblationSpec, dataset: &Dataset, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if spec.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..spec.variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = parallel::map(spec.exec, &jobs, |&(v, seed)| run_one(spec, dataset, &spec.variants[v], seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for variant in &spec.variants {
        let mine: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == variant.name).collect();
        let teacher: Option<Vec<MetricReport>> = mine.iter().map(|r| r.teacher.clone()).collect();
        rows.push(AblationRow {
            variant: variant.name.clone(),
            seeds: seeds.to_vec(),
            student: BranchResult::new(mine.iter().map(|r| r.student.clone()).collect())?,
            teacher: teacher.map(BranchResult::new).transpose()?,
        });
    }
    Ok(AblationTable { rows, runs })
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn student_auc(&self, variant: &str) -> Option<f64> {
        self.row(variant).map(|r| r.student.summary.roc_auc.0)
    }

    fn teacher_auc(&self, variant: &str) -> Option<f64> {
        self.row(variant)?.teacher.as_ref().map(|t| t.summary.roc_auc.0)
    }

    /// Ordering claims over mean test ROC AUC for the standard variants:
    /// full > each single-guidance variant > baseline, full − baseline ≥
    /// `min_gap`, and the teacher trained with the expert constraint beats
    /// the one trained without it. Missing rows count as failures.
    pub fn trend_checks(&self, min_gap: f64) -> Vec<TrendCheck> {
        let s = |v| self.student_auc(v);
        let gt = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a > b);
        let mut checks = Vec::new();
        let mut push = |claim: String, holds| checks.push(TrendCheck { claim, holds });
        for single in [WITHOUT_TEACHER, WITHOUT_EXPERT] {
            push(format!("student ROC: {FULL} > {single}"), gt(s(FULL), s(single)));
            push(format!("student ROC: {single} > {BASELINE}"), gt(s(single), s(BASELINE)));
        }
        let gap = match (s(FULL), s(BASELINE)) {
            (Some(f), Some(b)) => f - b >= min_gap,
            _ => false,
        };
        push(format!("student ROC: {FULL} − {BASELINE} ≥ {min_gap}"), gap);
        push(
            format!("teacher ROC: {FULL} > {WITHOUT_EXPERT}"),
            gt(self.teacher_auc(FULL), self.teacher_auc(WITHOUT_EXPERT)),
        );
        checks
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    /// Aligned plain-text table, one line per variant: student metrics as
    /// mean ± std, then the teacher's ROC where it was reported.
    pub fn to_text(&self) -> String {
        let headers = ["variant", "ROC", "Accuracy", "Precision", "Recall", "Fbeta", "teacher ROC"];
        let cell = |(m, s): (f64, f64)| format!("{m:.4} ± {s:.4}");
        let lines: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let x = &r.student.summary;
                vec![
                    r.variant.clone(),
                    cell(x.roc_auc),
                    cell(x.accuracy),
                    cell(x.precision),
                    cell(x.recall),
                    cell(x.fbeta),
                    r.teacher.as_ref().map_or("-".to_string(), |t| cell(t.summary.roc_auc)),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).chain([headers[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut emit = |cells: Vec<String>| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        emit(headers.iter().map(|h| h.to_string()).collect());
        emit(widths.iter().map(|&w| "-".repeat(w)).collect());
        lines.into_iter().for_each(&mut emit);
        out
    }
}
