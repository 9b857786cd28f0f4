//! Dataset model and task construction.
//!
//! A bank holds examples owned by subjects and binary labels per attribute;
//! every (subject, attribute) pair is one task. This module enumerates tasks
//! under leave-one-subject-out splits and implements the two sampling
//! regimes: balanced training episodes with a skip rule for starved tasks,
//! and test-time adaptation pairs where missing positives are filled with
//! negatives to preserve set sizes.

mod manifest;

pub use manifest::{load_dataset, write_manifest, LabelMode, PayloadKind};

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{BackboneError, InputKind, LabeledBatch};
use crate::ids::{AttributeId, ExampleId, SubjectId, TaskId};
use crate::meta::{EpisodeSource, MetaError, TaskEpisode};

#[derive(Debug, Error)]
pub enum TaskBankError {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate example id {0}")]
    DuplicateExample(ExampleId),
    #[error("label references unknown example id {id}")]
    UnknownLabelTarget { id: ExampleId },
    #[error("unknown subject {0}")]
    UnknownSubject(SubjectId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {task} has {available} examples but needs {needed}")]
    InsufficientExamples {
        task: TaskId,
        needed: usize,
        available: usize,
    },
    #[error("intensity {0} outside 0-5")]
    IntensityRange(u8),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Episode(#[from] MetaError),
}

#[derive(Debug, Clone)]
pub struct ExampleRecord {
    pub id: ExampleId,
    pub subject: SubjectId,
    pub payload: Vec<f64>,
}

/// Immutable bank of labeled examples. Attribute and subject order is their
/// first appearance in the construction input, so identical inputs yield
/// identical iteration order everywhere downstream.
#[derive(Debug, Clone)]
pub struct Dataset {
    input_kind: InputKind,
    ids: Vec<ExampleId>,
    subjects_of: Vec<usize>,
    payloads: Vec<f64>,
    input_len: usize,
    /// Dense example x attribute grid; None where no label was given.
    labels: Vec<Option<u8>>,
    attributes: Vec<AttributeId>,
    subjects: Vec<SubjectId>,
    subject_examples: Vec<Vec<usize>>,
    id_index: HashMap<ExampleId, usize>,
    attr_index: HashMap<AttributeId, usize>,
    subject_index: HashMap<SubjectId, usize>,
}

impl Dataset {
    pub fn new(
        input_kind: InputKind,
        examples: Vec<ExampleRecord>,
        labels: Vec<(ExampleId, AttributeId, u8)>,
    ) -> Result<Self, TaskBankError> {
        if examples.is_empty() {
            return Err(TaskBankError::Invalid("no examples".into()));
        }
        let input_len = input_kind.len();
        let mut ids = Vec::with_capacity(examples.len());
        let mut subjects_of = Vec::with_capacity(examples.len());
        let mut payloads = Vec::with_capacity(examples.len() * input_len);
        let mut subjects: Vec<SubjectId> = Vec::new();
        let mut subject_index = HashMap::new();
        let mut id_index = HashMap::new();
        for rec in examples {
            if rec.payload.len() != input_len {
                return Err(TaskBankError::Invalid(format!(
                    "example {} payload length {} does not match input length {}",
                    rec.id,
                    rec.payload.len(),
                    input_len
                )));
            }
            if id_index.insert(rec.id.clone(), ids.len()).is_some() {
                return Err(TaskBankError::DuplicateExample(rec.id));
            }
            let sidx = *subject_index.entry(rec.subject.clone()).or_insert_with(|| {
                subjects.push(rec.subject.clone());
                subjects.len() - 1
            });
            ids.push(rec.id);
            subjects_of.push(sidx);
            payloads.extend_from_slice(&rec.payload);
        }
        let mut attributes: Vec<AttributeId> = Vec::new();
        let mut attr_index = HashMap::new();
        for (eid, aid, _) in &labels {
            if !id_index.contains_key(eid) {
                return Err(TaskBankError::UnknownLabelTarget { id: eid.clone() });
            }
            attr_index.entry(aid.clone()).or_insert_with(|| {
                attributes.push(aid.clone());
                attributes.len() - 1
            });
        }
        let mut grid: Vec<Option<u8>> = vec![None; ids.len() * attributes.len()];
        for (eid, aid, value) in labels {
            if value > 1 {
                return Err(TaskBankError::Invalid(format!(
                    "label for ({eid}, {aid}) is {value}, not 0/1"
                )));
            }
            let e = id_index[&eid];
            let a = attr_index[&aid];
            let slot = &mut grid[e * attributes.len() + a];
            if slot.is_some() {
                return Err(TaskBankError::Invalid(format!(
                    "duplicate label for ({eid}, {aid})"
                )));
            }
            *slot = Some(value);
        }
        let mut subject_examples = vec![Vec::new(); subjects.len()];
        for (e, &s) in subjects_of.iter().enumerate() {
            subject_examples[s].push(e);
        }
        Ok(Self {
            input_kind,
            ids,
            subjects_of,
            payloads,
            input_len,
            labels: grid,
            attributes,
            subjects,
            subject_examples,
            id_index,
            attr_index,
            subject_index,
        })
    }

    pub fn input_kind(&self) -> InputKind {
        self.input_kind
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn example_id(&self, idx: usize) -> &ExampleId {
        &self.ids[idx]
    }

    pub fn subject_of(&self, idx: usize) -> &SubjectId {
        &self.subjects[self.subjects_of[idx]]
    }

    pub fn payload(&self, idx: usize) -> &[f64] {
        &self.payloads[idx * self.input_len..(idx + 1) * self.input_len]
    }

    pub fn attributes(&self) -> &[AttributeId] {
        &self.attributes
    }

    pub fn subjects(&self) -> &[SubjectId] {
        &self.subjects
    }

    pub fn subject_example_indices(&self, subject: &SubjectId) -> Option<&[usize]> {
        self.subject_index
            .get(subject)
            .map(|&s| self.subject_examples[s].as_slice())
    }

    pub fn label_by_index(&self, example: usize, attribute: usize) -> Option<u8> {
        self.labels[example * self.attributes.len() + attribute]
    }

    pub fn label(&self, example: &ExampleId, attribute: &AttributeId) -> Option<u8> {
        let e = *self.id_index.get(example)?;
        let a = *self.attr_index.get(attribute)?;
        self.label_by_index(e, a)
    }

    pub fn label_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Indices of the task's labeled examples, split (positives, negatives),
    /// in dataset order.
    pub fn task_pools(&self, task: &TaskId) -> Result<(Vec<usize>, Vec<usize>), TaskBankError> {
        let s = *self
            .subject_index
            .get(&task.subject)
            .ok_or_else(|| TaskBankError::UnknownTask(task.clone()))?;
        let a = *self
            .attr_index
            .get(&task.attribute)
            .ok_or_else(|| TaskBankError::UnknownTask(task.clone()))?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for &e in &self.subject_examples[s] {
            match self.label_by_index(e, a) {
                Some(1) => pos.push(e),
                Some(0) => neg.push(e),
                _ => {}
            }
        }
        Ok((pos, neg))
    }

    /// Builds a batch for the task's attribute from example indices,
    /// returning the ids alongside for disjointness audits.
    pub fn batch(
        &self,
        task: &TaskId,
        indices: &[usize],
    ) -> Result<(LabeledBatch, Vec<ExampleId>), TaskBankError> {
        let a = *self
            .attr_index
            .get(&task.attribute)
            .ok_or_else(|| TaskBankError::UnknownTask(task.clone()))?;
        let mut inputs = Vec::with_capacity(indices.len() * self.input_len);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &e in indices {
            let y = self.label_by_index(e, a).ok_or_else(|| {
                TaskBankError::Invalid(format!(
                    "example {} has no label for {}",
                    self.ids[e], task.attribute
                ))
            })?;
            inputs.extend_from_slice(self.payload(e));
            labels.push(y);
            ids.push(self.ids[e].clone());
        }
        let batch = LabeledBatch::from_flat(inputs, self.input_len, labels)?;
        Ok((batch, ids))
    }

    /// Same bank with labels kept only for the given attributes.
    pub fn restrict_attributes(
        &self,
        attributes: &[AttributeId],
    ) -> Result<Dataset, TaskBankError> {
        for a in attributes {
            if !self.attr_index.contains_key(a) {
                return Err(TaskBankError::Invalid(format!("unknown attribute {a}")));
            }
        }
        if attributes.is_empty() {
            return Err(TaskBankError::Invalid("attribute list is empty".into()));
        }
        let examples = self.to_records();
        let labels = self.to_label_rows_filtered(Some(attributes), None);
        Dataset::new(self.input_kind, examples, labels)
    }

    /// Sub-bank containing only the given subjects' examples.
    pub fn restrict_subjects(&self, subjects: &[SubjectId]) -> Result<Dataset, TaskBankError> {
        for s in subjects {
            if !self.subject_index.contains_key(s) {
                return Err(TaskBankError::UnknownSubject(s.clone()));
            }
        }
        if subjects.is_empty() {
            return Err(TaskBankError::Invalid("subject list is empty".into()));
        }
        let keep: Vec<bool> = (0..self.len())
            .map(|e| subjects.contains(self.subject_of(e)))
            .collect();
        let examples = self
            .to_records()
            .into_iter()
            .enumerate()
            .filter(|(e, _)| keep[*e])
            .map(|(_, r)| r)
            .collect();
        let labels = self.to_label_rows_filtered(None, Some(&keep));
        Dataset::new(self.input_kind, examples, labels)
    }

    fn to_records(&self) -> Vec<ExampleRecord> {
        (0..self.len())
            .map(|e| ExampleRecord {
                id: self.ids[e].clone(),
                subject: self.subject_of(e).clone(),
                payload: self.payload(e).to_vec(),
            })
            .collect()
    }

    fn to_label_rows_filtered(
        &self,
        attributes: Option<&[AttributeId]>,
        keep_example: Option<&[bool]>,
    ) -> Vec<(ExampleId, AttributeId, u8)> {
        let mut rows = Vec::new();
        for e in 0..self.len() {
            if let Some(keep) = keep_example {
                if !keep[e] {
                    continue;
                }
            }
            for (a, aid) in self.attributes.iter().enumerate() {
                if let Some(want) = attributes {
                    if !want.contains(aid) {
                        continue;
                    }
                }
                if let Some(v) = self.label_by_index(e, a) {
                    rows.push((self.ids[e].clone(), aid.clone(), v));
                }
            }
        }
        rows
    }

    pub fn label_rows(&self) -> Vec<(ExampleId, AttributeId, u8)> {
        self.to_label_rows_filtered(None, None)
    }
}

/// 0 stays negative; any nonzero intensity up to 5 is positive.
pub fn binarize_intensity(intensity: u8) -> Result<u8, TaskBankError> {
    match intensity {
        0 => Ok(0),
        1..=5 => Ok(1),
        other => Err(TaskBankError::IntensityRange(other)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub held_out_subject: SubjectId,
    pub train_tasks: Vec<TaskId>,
    pub test_tasks: Vec<TaskId>,
}

/// Full cross-product split: every (remaining subject, attribute) pair is a
/// training task; the held-out subject's attributes are the test tasks.
/// Starved-task skipping happens later, in the episode source.
pub fn enumerate_tasks(
    dataset: &Dataset,
    held_out_subject: &SubjectId,
) -> Result<SplitPlan, TaskBankError> {
    if !dataset.subjects().contains(held_out_subject) {
        return Err(TaskBankError::UnknownSubject(held_out_subject.clone()));
    }
    let mut train_tasks = Vec::new();
    let mut test_tasks = Vec::new();
    for s in dataset.subjects() {
        for a in dataset.attributes() {
            let task = TaskId::new(s.as_str(), a.as_str());
            if s == held_out_subject {
                test_tasks.push(task);
            } else {
                train_tasks.push(task);
            }
        }
    }
    Ok(SplitPlan {
        held_out_subject: held_out_subject.clone(),
        train_tasks,
        test_tasks,
    })
}

/// All (subject, attribute) tasks of the bank, for training without a
/// held-out fold.
pub fn all_tasks(dataset: &Dataset) -> Vec<TaskId> {
    dataset
        .subjects()
        .iter()
        .flat_map(|s| {
            dataset
                .attributes()
                .iter()
                .map(move |a| TaskId::new(s.as_str(), a.as_str()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipReason {
    pub task: TaskId,
    /// How many distinct positives short of 2N the task is.
    pub positive_deficit: usize,
    pub negative_deficit: usize,
}

#[derive(Debug, Clone)]
pub struct SampledEpisode {
    pub episode: TaskEpisode,
    pub support_ids: Vec<ExampleId>,
    pub query_ids: Vec<ExampleId>,
}

#[derive(Debug, Clone)]
pub enum EpisodeOutcome {
    Sampled(Box<SampledEpisode>),
    Skipped(SkipReason),
}

/// Balanced (N+, N-) support and query sets, all 4N examples distinct,
/// uniform without replacement within the episode. Tasks with fewer than 2N
/// distinct examples of either class are skipped with the deficit recorded;
/// across separate calls examples may repeat freely.
pub fn sample_episode(
    dataset: &Dataset,
    task: &TaskId,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome, TaskBankError> {
    assert!(shots >= 1, "shots must be >= 1");
    let (pos, neg) = dataset.task_pools(task)?;
    let need = 2 * shots;
    if pos.len() < need || neg.len() < need {
        return Ok(EpisodeOutcome::Skipped(SkipReason {
            task: task.clone(),
            positive_deficit: need.saturating_sub(pos.len()),
            negative_deficit: need.saturating_sub(neg.len()),
        }));
    }
    let pos_pick = draw(rng, &pos, need);
    let neg_pick = draw(rng, &neg, need);
    let support_idx: Vec<usize> = pos_pick[..shots]
        .iter()
        .chain(&neg_pick[..shots])
        .copied()
        .collect();
    let query_idx: Vec<usize> = pos_pick[shots..]
        .iter()
        .chain(&neg_pick[shots..])
        .copied()
        .collect();
    let (support, support_ids) = dataset.batch(task, &support_idx)?;
    let (query, query_ids) = dataset.batch(task, &query_idx)?;
    let episode = TaskEpisode::new(task.clone(), support, query)?;
    Ok(EpisodeOutcome::Sampled(Box::new(SampledEpisode {
        episode,
        support_ids,
        query_ids,
    })))
}

fn draw(rng: &mut ChaCha8Rng, pool: &[usize], amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[derive(Debug, Clone)]
pub struct AdaptationPair {
    pub support: LabeledBatch,
    pub evalset: LabeledBatch,
    pub support_ids: Vec<ExampleId>,
    pub eval_ids: Vec<ExampleId>,
}

/// Test-time draw: the evaluation set is drawn first (targeting
/// eval_per_class of each class), the support second (targeting K of each),
/// from disjoint pools. A class deficit is filled from the other class, so
/// sizes are always exactly 2*eval_per_class and 2K; only a task too small
/// to fill both sets is an error.
pub fn sample_adaptation_pair(
    dataset: &Dataset,
    task: &TaskId,
    k: usize,
    eval_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptationPair, TaskBankError> {
    assert!(k >= 1, "k must be >= 1");
    assert!(eval_per_class >= 1, "eval_per_class must be >= 1");
    let (pos, neg) = dataset.task_pools(task)?;
    let needed = 2 * k + 2 * eval_per_class;
    if pos.len() + neg.len() < needed {
        return Err(TaskBankError::InsufficientExamples {
            task: task.clone(),
            needed,
            available: pos.len() + neg.len(),
        });
    }
    let (eval_idx, pos_rest, neg_rest) = draw_filled(rng, &pos, &neg, eval_per_class);
    let (support_idx, _, _) = draw_filled(rng, &pos_rest, &neg_rest, k);
    let (evalset, eval_ids) = dataset.batch(task, &eval_idx)?;
    let (support, support_ids) = dataset.batch(task, &support_idx)?;
    Ok(AdaptationPair {
        support,
        evalset,
        support_ids,
        eval_ids,
    })
}

/// Draws a set targeting `target` of each class. Missing positives are
/// covered by extra negatives; if negatives also run short the remainder
/// comes from extra positives. Returns the drawn indices (positives first)
/// and both pools with the drawn examples removed, original order kept.
fn draw_filled(
    rng: &mut ChaCha8Rng,
    pos: &[usize],
    neg: &[usize],
    target: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let total = 2 * target;
    let pos_take = target.min(pos.len());
    let neg_take = (total - pos_take).min(neg.len());
    let pos_take = pos_take + (total - pos_take - neg_take).min(pos.len() - pos_take);
    debug_assert!(pos_take + neg_take == total || pos.len() + neg.len() < total);
    let pos_pick = draw(rng, pos, pos_take.min(pos.len()));
    let neg_pick = draw(rng, neg, neg_take);
    let mut taken: Vec<usize> = pos_pick.clone();
    taken.extend_from_slice(&neg_pick);
    let pos_rest: Vec<usize> = pos.iter().filter(|e| !pos_pick.contains(e)).copied().collect();
    let neg_rest: Vec<usize> = neg.iter().filter(|e| !neg_pick.contains(e)).copied().collect();
    (taken, pos_rest, neg_rest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceRow {
    pub subject: SubjectId,
    pub attribute: AttributeId,
    pub positives: usize,
    pub labeled: usize,
    pub fraction: f64,
}

/// Positive-example fraction per (subject, attribute), subject-major order.
/// Tasks with no labeled examples report fraction 0 over 0.
pub fn imbalance_stats(dataset: &Dataset) -> Vec<ImbalanceRow> {
    let mut rows = Vec::new();
    for s in dataset.subjects() {
        for a in dataset.attributes() {
            let task = TaskId::new(s.as_str(), a.as_str());
            let (pos, neg) = dataset.task_pools(&task).expect("enumerated task exists");
            let labeled = pos.len() + neg.len();
            rows.push(ImbalanceRow {
                subject: s.clone(),
                attribute: a.clone(),
                positives: pos.len(),
                labeled,
                fraction: if labeled == 0 {
                    0.0
                } else {
                    pos.len() as f64 / labeled as f64
                },
            });
        }
    }
    rows
}

/// Episode sampler over a bank's training tasks. Tasks without 2N distinct
/// examples of each class are dropped once at construction (the permanent
/// skip list is kept for audit); each training iteration then samples tasks
/// without replacement from the eligible set.
pub struct BankEpisodeSource<'a> {
    dataset: &'a Dataset,
    eligible: Vec<TaskId>,
    skipped: Vec<SkipReason>,
    shots: usize,
}

impl<'a> BankEpisodeSource<'a> {
    pub fn new(
        dataset: &'a Dataset,
        train_tasks: &[TaskId],
        shots: usize,
    ) -> Result<Self, TaskBankError> {
        assert!(shots >= 1, "shots must be >= 1");
        let mut eligible = Vec::new();
        let mut skipped = Vec::new();
        let need = 2 * shots;
        for task in train_tasks {
            let (pos, neg) = dataset.task_pools(task)?;
            if pos.len() >= need && neg.len() >= need {
                eligible.push(task.clone());
            } else {
                skipped.push(SkipReason {
                    task: task.clone(),
                    positive_deficit: need.saturating_sub(pos.len()),
                    negative_deficit: need.saturating_sub(neg.len()),
                });
            }
        }
        Ok(Self {
            dataset,
            eligible,
            skipped,
            shots,
        })
    }

    pub fn eligible_tasks(&self) -> &[TaskId] {
        &self.eligible
    }

    pub fn skipped_tasks(&self) -> &[SkipReason] {
        &self.skipped
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    /// Samples one audited episode batch; the trait method strips the ids.
    pub fn sample_audited(
        &self,
        n_tasks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SampledEpisode>, TaskBankError> {
        if n_tasks > self.eligible.len() {
            return Err(TaskBankError::Invalid(format!(
                "batch of {} tasks requested but only {} are eligible",
                n_tasks,
                self.eligible.len()
            )));
        }
        let picks = rand::seq::index::sample(rng, self.eligible.len(), n_tasks);
        let mut out = Vec::with_capacity(n_tasks);
        for i in picks {
            match sample_episode(self.dataset, &self.eligible[i], self.shots, rng)? {
                EpisodeOutcome::Sampled(ep) => out.push(*ep),
                EpisodeOutcome::Skipped(reason) => {
                    return Err(TaskBankError::Invalid(format!(
                        "eligible task {} skipped unexpectedly (deficits {}+/{}-)",
                        reason.task, reason.positive_deficit, reason.negative_deficit
                    )));
                }
            }
        }
        Ok(out)
    }
}

impl EpisodeSource for BankEpisodeSource<'_> {
    fn default_meta_batch(&self) -> usize {
        self.dataset.attributes().len()
    }

    fn sample_episodes(
        &self,
        n_tasks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TaskEpisode>, Box<dyn std::error::Error + Send + Sync>> {
        Ok(self
            .sample_audited(n_tasks, rng)?
            .into_iter()
            .map(|s| s.episode)
            .collect())
    }
}
