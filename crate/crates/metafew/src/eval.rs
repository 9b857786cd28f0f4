//! K-shot adaptation evaluation protocol.
//!
//! One repetition of a task evaluation draws a fresh adaptation pair
//! (balanced evalset first, K-per-class support second, disjoint), runs the
//! shared adaptation operation for G gradient steps, and scores the adapted
//! model on the evalset with a fixed 0.5 threshold (exact ties predict
//! negative). Repetitions use rng streams keyed by (seed, task, repetition),
//! never by the parameters, so two models evaluated under the same config
//! see byte-identical sample sequences and differ only in the θ supplied.
//!
//! Reports carry per-task accuracy means and standard deviations plus
//! per-attribute, per-subject, and grand aggregates, all plain arithmetic
//! means of their constituents.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, InputKind, ParameterVector};
use crate::fsio::atomic_write;
use crate::ids::{AttributeId, ExampleId, SubjectId, TaskId};
use crate::meta::inner_update;
use crate::rngutil::{hash_str, stream};
use crate::taskbank::{all_tasks, enumerate_tasks, sample_adaptation_pair, Dataset, TaskBankError};

/// Identifies the single evaluation code path; recorded on every result so
/// tests can assert that meta and baseline parameters went through the same
/// procedure.
pub const EVAL_PATH: &str = "adapt-eval/v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("task {task}")]
    Task {
        task: TaskId,
        #[source]
        source: TaskBankError,
    },
    #[error("no trained parameters for held-out subject {0}")]
    MissingFold(SubjectId),
    #[error("input kind mismatch: model expects {expected:?}, bank provides {got:?}")]
    InputKindMismatch { expected: InputKind, got: InputKind },
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Support sizes (per class) to evaluate, each its own report rows.
    pub k_values: Vec<usize>,
    /// Adaptation gradient steps G.
    pub steps: usize,
    /// Independent support/evalset redraws per task.
    pub repetitions: usize,
    /// Evalset examples per class.
    pub eval_per_class: usize,
    /// Test-time adaptation learning rate.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 5],
            steps: 5,
            repetitions: 500,
            eval_per_class: 10,
            alpha: 0.03,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(EvalError::InvalidConfig(
                "k_values must be non-empty, all >= 1".into(),
            ));
        }
        if self.repetitions == 0 || self.eval_per_class == 0 {
            return Err(EvalError::InvalidConfig(
                "repetitions and eval_per_class must be >= 1".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(EvalError::InvalidConfig(format!(
                "alpha {} must be positive and finite",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Accuracy distribution of one task under one support size.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task: TaskId,
    pub k: usize,
    pub steps: usize,
    pub accuracies: Vec<f64>,
    pub path: &'static str,
}

impl TaskEval {
    pub fn mean(&self) -> f64 {
        mean(&self.accuracies)
    }

    pub fn std(&self) -> f64 {
        pop_std(&self.accuracies)
    }
}

/// Everything one repetition saw, for recount and leakage audits.
#[derive(Debug, Clone)]
pub struct RepTrace {
    pub support_ids: Vec<ExampleId>,
    pub eval_ids: Vec<ExampleId>,
    pub labels: Vec<u8>,
    pub predictions: Vec<u8>,
}

fn task_err(task: &TaskId) -> impl FnOnce(TaskBankError) -> EvalError + '_ {
    move |source| EvalError::Task {
        task: task.clone(),
        source,
    }
}

/// Threshold rule: probability strictly above 0.5 predicts positive.
fn predictions(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > 0.5)).collect()
}

fn accuracy(preds: &[u8], labels: &[u8]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// One repetition: draw the pair, adapt step by step, record predictions at
/// every step in `record_steps` (sorted ascending). The rng stream depends
/// only on (seed, task, rep), so the draw is identical for any θ.
fn repetition_predictions(
    backbone: &Backbone,
    theta: &ParameterVector,
    dataset: &Dataset,
    task: &TaskId,
    k: usize,
    eval_per_class: usize,
    alpha: f64,
    record_steps: &[usize],
    seed: u64,
    rep: usize,
) -> Result<(crate::taskbank::AdaptationPair, Vec<Vec<u8>>), EvalError> {
    let mut rng = stream(seed, &[hash_str("eval"), task.stable_hash(), rep as u64]);
    let pair = sample_adaptation_pair(dataset, task, k, eval_per_class, &mut rng)
        .map_err(task_err(task))?;
    let max_step = *record_steps.last().expect("record_steps is non-empty");
    let mut recorded = Vec::with_capacity(record_steps.len());
    let mut params = theta.clone();
    for step in 0..=max_step {
        if step > 0 {
            params = inner_update(backbone, &params, &pair.support, alpha, 1)?;
        }
        if record_steps.contains(&step) {
            let probs = backbone.forward(&params, &pair.evalset, crate::backbone::Mode::Eval)?;
            recorded.push(predictions(&probs));
        }
    }
    Ok((pair, recorded))
}

pub fn evaluate_task(
    backbone: &Backbone,
    theta: &ParameterVector,
    dataset: &Dataset,
    task: &TaskId,
    k: usize,
    config: &EvalConfig,
) -> Result<TaskEval, EvalError> {
    evaluate_task_traced(backbone, theta, dataset, task, k, config).map(|(eval, _)| eval)
}

/// evaluate_task plus the per-repetition draw and prediction logs.
pub fn evaluate_task_traced(
    backbone: &Backbone,
    theta: &ParameterVector,
    dataset: &Dataset,
    task: &TaskId,
    k: usize,
    config: &EvalConfig,
) -> Result<(TaskEval, Vec<RepTrace>), EvalError> {
    config.validate()?;
    let record_steps = [config.steps];
    let mut accuracies = Vec::with_capacity(config.repetitions);
    let mut traces = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let (pair, mut preds) = repetition_predictions(
            backbone,
            theta,
            dataset,
            task,
            k,
            config.eval_per_class,
            config.alpha,
            &record_steps,
            config.seed,
            rep,
        )?;
        let preds = preds.pop().expect("one recorded step");
        accuracies.push(accuracy(&preds, pair.evalset.labels()));
        traces.push(RepTrace {
            support_ids: pair.support_ids,
            eval_ids: pair.eval_ids,
            labels: pair.evalset.labels().to_vec(),
            predictions: preds,
        });
    }
    Ok((
        TaskEval {
            task: task.clone(),
            k,
            steps: config.steps,
            accuracies,
            path: EVAL_PATH,
        },
        traces,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub task: TaskId,
    pub k: usize,
    pub steps: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_reps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributeAggregate {
    pub attribute: AttributeId,
    pub k: usize,
    pub mean_acc: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubjectAggregate {
    pub subject: SubjectId,
    pub k: usize,
    pub mean_acc: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrandAggregate {
    pub k: usize,
    pub mean_acc: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub per_attribute: Vec<AttributeAggregate>,
    pub per_subject: Vec<SubjectAggregate>,
    pub grand: Vec<GrandAggregate>,
    /// Attributes absent from the training bank, for transfer reports.
    pub novel_attributes: Vec<AttributeId>,
}

impl EvalReport {
    /// Aggregates are arithmetic means of the matching rows' mean_acc, in
    /// first-appearance order of attribute, subject, and k.
    pub fn from_rows(rows: Vec<ReportRow>, novel_attributes: Vec<AttributeId>) -> Self {
        let mut ks: Vec<usize> = Vec::new();
        let mut attributes: Vec<AttributeId> = Vec::new();
        let mut subjects: Vec<SubjectId> = Vec::new();
        for row in &rows {
            if !ks.contains(&row.k) {
                ks.push(row.k);
            }
            if !attributes.contains(&row.task.attribute) {
                attributes.push(row.task.attribute.clone());
            }
            if !subjects.contains(&row.task.subject) {
                subjects.push(row.task.subject.clone());
            }
        }
        let collect = |pred: &dyn Fn(&ReportRow) -> bool| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| pred(r))
                .map(|r| r.mean_acc)
                .collect();
            (mean(&accs), accs.len())
        };
        let mut per_attribute = Vec::new();
        let mut per_subject = Vec::new();
        let mut grand = Vec::new();
        for &k in &ks {
            for a in &attributes {
                let (mean_acc, n_tasks) =
                    collect(&|r: &ReportRow| r.k == k && &r.task.attribute == a);
                per_attribute.push(AttributeAggregate {
                    attribute: a.clone(),
                    k,
                    mean_acc,
                    n_tasks,
                });
            }
            for s in &subjects {
                let (mean_acc, n_tasks) =
                    collect(&|r: &ReportRow| r.k == k && &r.task.subject == s);
                per_subject.push(SubjectAggregate {
                    subject: s.clone(),
                    k,
                    mean_acc,
                    n_tasks,
                });
            }
            let (mean_acc, n_tasks) = collect(&|r: &ReportRow| r.k == k);
            grand.push(GrandAggregate {
                k,
                mean_acc,
                n_tasks,
            });
        }
        Self {
            rows,
            per_attribute,
            per_subject,
            grand,
            novel_attributes,
        }
    }

    pub fn grand_mean(&self, k: usize) -> Option<f64> {
        self.grand.iter().find(|g| g.k == k).map(|g| g.mean_acc)
    }
}

fn row_from(eval: &TaskEval) -> ReportRow {
    ReportRow {
        task: eval.task.clone(),
        k: eval.k,
        steps: eval.steps,
        mean_acc: eval.mean(),
        std_acc: eval.std(),
        n_reps: eval.accuracies.len(),
    }
}

/// Leave-one-subject-out evaluation of a (meta, baseline) model pair. Every
/// fold's test tasks are scored for every support size, both models seeing
/// the exact same draws. Returns (meta report, baseline report).
pub fn run_loso(
    backbone: &Backbone,
    dataset: &Dataset,
    meta_thetas: &BTreeMap<SubjectId, ParameterVector>,
    baseline_thetas: &BTreeMap<SubjectId, ParameterVector>,
    config: &EvalConfig,
) -> Result<(EvalReport, EvalReport), EvalError> {
    config.validate()?;
    check_input_kind(backbone, dataset)?;
    let mut meta_rows = Vec::new();
    let mut baseline_rows = Vec::new();
    for subject in dataset.subjects() {
        let meta_theta = meta_thetas
            .get(subject)
            .ok_or_else(|| EvalError::MissingFold(subject.clone()))?;
        let baseline_theta = baseline_thetas
            .get(subject)
            .ok_or_else(|| EvalError::MissingFold(subject.clone()))?;
        let plan = enumerate_tasks(dataset, subject).map_err(|source| EvalError::Task {
            task: TaskId::new(subject.as_str(), "*"),
            source,
        })?;
        for task in &plan.test_tasks {
            for &k in &config.k_values {
                let meta_eval = evaluate_task(backbone, meta_theta, dataset, task, k, config)?;
                let base_eval =
                    evaluate_task(backbone, baseline_theta, dataset, task, k, config)?;
                meta_rows.push(row_from(&meta_eval));
                baseline_rows.push(row_from(&base_eval));
            }
        }
    }
    Ok((
        EvalReport::from_rows(meta_rows, Vec::new()),
        EvalReport::from_rows(baseline_rows, Vec::new()),
    ))
}

/// Attributes of the target bank that the source bank never trained on.
pub fn novel_attributes(target: &Dataset, source_attributes: &[AttributeId]) -> Vec<AttributeId> {
    target
        .attributes()
        .iter()
        .filter(|a| !source_attributes.contains(a))
        .cloned()
        .collect()
}

/// Adaptation evaluation of one θ on a whole different bank, no held-out
/// folds: every (subject, attribute) task of the target is scored.
pub fn cross_bank_eval(
    backbone: &Backbone,
    theta: &ParameterVector,
    dataset: &Dataset,
    new_attributes: &[AttributeId],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    check_input_kind(backbone, dataset)?;
    let mut rows = Vec::new();
    for task in all_tasks(dataset) {
        for &k in &config.k_values {
            let eval = evaluate_task(backbone, theta, dataset, &task, k, config)?;
            rows.push(row_from(&eval));
        }
    }
    Ok(EvalReport::from_rows(rows, new_attributes.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: usize,
    pub step: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// tasks x repetitions samples behind this point.
    pub n_samples: usize,
}

/// Accuracy after each of 0..=max_steps adaptation steps, averaged over the
/// given tasks and all repetitions. Each repetition is a single adaptation
/// trajectory: step s extends the same support draw by one more update, so
/// the step-s entry equals evaluate_task run with G = s.
pub fn gradient_step_sweep(
    backbone: &Backbone,
    theta: &ParameterVector,
    dataset: &Dataset,
    tasks: &[TaskId],
    k_values: &[usize],
    max_steps: usize,
    config: &EvalConfig,
) -> Result<Vec<CurvePoint>, EvalError> {
    config.validate()?;
    if max_steps == 0 {
        return Err(EvalError::InvalidConfig("max_steps must be >= 1".into()));
    }
    if tasks.is_empty() || k_values.is_empty() {
        return Err(EvalError::InvalidConfig(
            "sweep needs at least one task and one k".into(),
        ));
    }
    check_input_kind(backbone, dataset)?;
    let record_steps: Vec<usize> = (0..=max_steps).collect();
    let mut points = Vec::with_capacity(k_values.len() * record_steps.len());
    for &k in k_values {
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); max_steps + 1];
        for task in tasks {
            for rep in 0..config.repetitions {
                let (pair, preds) = repetition_predictions(
                    backbone,
                    theta,
                    dataset,
                    task,
                    k,
                    config.eval_per_class,
                    config.alpha,
                    &record_steps,
                    config.seed,
                    rep,
                )?;
                for (step, pred) in preds.iter().enumerate() {
                    samples[step].push(accuracy(pred, pair.evalset.labels()));
                }
            }
        }
        for (step, accs) in samples.iter().enumerate() {
            points.push(CurvePoint {
                k,
                step,
                mean_acc: mean(accs),
                std_acc: pop_std(accs),
                n_samples: accs.len(),
            });
        }
    }
    Ok(points)
}

fn check_input_kind(backbone: &Backbone, dataset: &Dataset) -> Result<(), EvalError> {
    let expected = backbone.config().input_kind;
    let got = dataset.input_kind();
    if expected == got {
        Ok(())
    } else {
        Err(EvalError::InputKindMismatch { expected, got })
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Long-format per-task table; floats fixed to 6 decimals so identical
/// reports are byte-identical files.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task", "subject", "attribute", "K", "steps", "mean_acc", "std_acc", "n_reps",
    ])
    .expect("csv into Vec cannot fail");
    for row in &report.rows {
        w.write_record([
            row.task.to_string(),
            row.task.subject.to_string(),
            row.task.attribute.to_string(),
            row.k.to_string(),
            row.steps.to_string(),
            format!("{:.6}", row.mean_acc),
            format!("{:.6}", row.std_acc),
            row.n_reps.to_string(),
        ])
        .expect("csv into Vec cannot fail");
    }
    let bytes = w.into_inner().expect("csv into Vec cannot fail");
    atomic_write(path, &bytes).map_err(io_err(path))
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(io_err(path))
}

pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["K", "step", "mean_acc", "std_acc", "n_samples"])
        .expect("csv into Vec cannot fail");
    for p in points {
        w.write_record([
            p.k.to_string(),
            p.step.to_string(),
            format!("{:.6}", p.mean_acc),
            format!("{:.6}", p.std_acc),
            p.n_samples.to_string(),
        ])
        .expect("csv into Vec cannot fail");
    }
    let bytes = w.into_inner().expect("csv into Vec cannot fail");
    atomic_write(path, &bytes).map_err(io_err(path))
}
