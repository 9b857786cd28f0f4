//! Pooled-training baseline.
//!
//! Instead of per-task episodes, all training attributes are merged into a
//! single binary problem: an example is positive when any of the training
//! attributes labels it positive. One detector is then trained on the pool
//! with conventional mini-batch gradient descent, using the same backbone,
//! outer optimizer, and learning rate as the meta path. At test time the
//! resulting parameters go through the identical adaptation procedure, so
//! comparisons differ only in how the initialization was trained.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, LabeledBatch, ParameterVector};
use crate::ids::{AttributeId, ExampleId};
use crate::meta::{OptimizerState, OuterOptimizer};
use crate::rngutil::{hash_str, stream};
use crate::taskbank::Dataset;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error("attribute list is empty")]
    EmptyAttributes,
    #[error("unknown attribute {0}")]
    UnknownAttribute(AttributeId),
    #[error(
        "merged pool has {positives} positives and {negatives} negatives; \
         balanced batches need both classes"
    )]
    SingleClass { positives: usize, negatives: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Dataset view with one OR-merged label per example. Examples carrying no
/// label for any of the merged attributes are left out of the pool.
pub struct MergedDataset<'a> {
    dataset: &'a Dataset,
    attributes: Vec<AttributeId>,
    merged: Vec<Option<u8>>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl<'a> MergedDataset<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn attributes(&self) -> &[AttributeId] {
        &self.attributes
    }

    pub fn merged_label(&self, example: &ExampleId) -> Option<u8> {
        let idx = (0..self.dataset.len()).find(|&e| self.dataset.example_id(e) == example)?;
        self.merged[idx]
    }

    pub fn merged_label_by_index(&self, example: usize) -> Option<u8> {
        self.merged[example]
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn negatives(&self) -> &[usize] {
        &self.negatives
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjunction over the listed attributes: positive iff any labels the
/// example positive, negative iff at least one label exists and none is
/// positive.
pub fn merge_labels<'a>(
    dataset: &'a Dataset,
    training_attributes: &[AttributeId],
) -> Result<MergedDataset<'a>, BaselineError> {
    if training_attributes.is_empty() {
        return Err(BaselineError::EmptyAttributes);
    }
    let mut attr_indices = Vec::with_capacity(training_attributes.len());
    for a in training_attributes {
        let idx = dataset
            .attributes()
            .iter()
            .position(|x| x == a)
            .ok_or_else(|| BaselineError::UnknownAttribute(a.clone()))?;
        attr_indices.push(idx);
    }
    let mut merged = Vec::with_capacity(dataset.len());
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for e in 0..dataset.len() {
        let mut label: Option<u8> = None;
        for &a in &attr_indices {
            if let Some(v) = dataset.label_by_index(e, a) {
                label = Some(label.unwrap_or(0).max(v));
            }
        }
        match label {
            Some(1) => positives.push(e),
            Some(0) => negatives.push(e),
            _ => {}
        }
        merged.push(label);
    }
    Ok(MergedDataset {
        dataset,
        attributes: training_attributes.to_vec(),
        merged,
        positives,
        negatives,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineHyper {
    /// Outer learning rate, matching the meta path's beta.
    pub beta: f64,
    /// Total gradient steps; compute parity with meta training is the
    /// caller's concern.
    pub iterations: usize,
    /// Per-class batch half-size, so batches have 2 * shots examples.
    pub shots: usize,
    pub outer_optimizer: OuterOptimizer,
    pub seed: u64,
}

impl Default for BaselineHyper {
    fn default() -> Self {
        Self {
            beta: 0.03,
            iterations: 2000,
            shots: 5,
            outer_optimizer: OuterOptimizer::Adam,
            seed: 0,
        }
    }
}

impl BaselineHyper {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(BaselineError::InvalidConfig(format!(
                "beta {} must be positive and finite",
                self.beta
            )));
        }
        if self.shots == 0 {
            return Err(BaselineError::InvalidConfig("shots must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: u128,
}

/// Conventional supervised training on the merged pool: one balanced batch
/// of 2 * shots per iteration, no inner loop, no task separation.
/// Deterministic given the seed.
pub fn train_baseline(
    backbone_config: &BackboneConfig,
    merged: &MergedDataset,
    hyper: &BaselineHyper,
    mut on_iteration: impl FnMut(&BaselineRecord),
) -> Result<ParameterVector, BaselineError> {
    hyper.validate()?;
    if merged.positives().is_empty() || merged.negatives().is_empty() {
        return Err(BaselineError::SingleClass {
            positives: merged.positives().len(),
            negatives: merged.negatives().len(),
        });
    }
    let backbone = Backbone::new(backbone_config.clone())?;
    let mut params = backbone.init_params(hyper.seed);
    let mut opt = OptimizerState::new(hyper.outer_optimizer, params.len());
    let started = Instant::now();
    for i in 0..hyper.iterations {
        let mut rng = stream(hyper.seed, &[hash_str("baseline.iter"), i as u64]);
        let batch = balanced_batch(merged, hyper.shots, &mut rng)?;
        let (loss, grad) = backbone.loss_and_grad(&params, &batch)?;
        opt.step(&mut params, &grad, hyper.beta);
        on_iteration(&BaselineRecord {
            iteration: i,
            loss,
            wall_ms: started.elapsed().as_millis(),
        });
    }
    Ok(params)
}

/// shots positives then shots negatives. Pools at least as large as shots
/// are drawn without replacement; smaller pools fall back to uniform draws
/// with replacement so the batch size never shrinks.
fn balanced_batch(
    merged: &MergedDataset,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledBatch, BaselineError> {
    let dataset = merged.dataset();
    let mut indices = Vec::with_capacity(2 * shots);
    for pool in [merged.positives(), merged.negatives()] {
        if pool.len() >= shots {
            indices.extend(
                rand::seq::index::sample(rng, pool.len(), shots)
                    .into_iter()
                    .map(|i| pool[i]),
            );
        } else {
            indices.extend((0..shots).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    let input_len = dataset.input_kind().len();
    let mut inputs = Vec::with_capacity(indices.len() * input_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &e in &indices {
        inputs.extend_from_slice(dataset.payload(e));
        labels.push(merged.merged_label_by_index(e).expect("pooled example is labeled"));
    }
    Ok(LabeledBatch::from_flat(inputs, input_len, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::InputKind;
    use crate::synthgen::{generate_bank, SynthConfig};
    use crate::taskbank::ExampleRecord;

    fn tiny_dataset() -> Dataset {
        // e0: (0,1) -> merged 1; e1: (0,0) -> 0; e2: (1, none) -> 1;
        // e3: no labels -> excluded.
        let examples = (0..4)
            .map(|e| ExampleRecord {
                id: format!("e{e}").as_str().into(),
                subject: "s".into(),
                payload: vec![e as f64],
            })
            .collect();
        let labels = vec![
            ("e0".into(), "a0".into(), 0),
            ("e0".into(), "a1".into(), 1),
            ("e1".into(), "a0".into(), 0),
            ("e1".into(), "a1".into(), 0),
            ("e2".into(), "a0".into(), 1),
        ];
        Dataset::new(InputKind::Vector { dim: 1 }, examples, labels).unwrap()
    }

    #[test]
    fn merge_is_a_disjunction() {
        let ds = tiny_dataset();
        let merged = merge_labels(&ds, &["a0".into(), "a1".into()]).unwrap();
        assert_eq!(merged.merged_label(&"e0".into()), Some(1));
        assert_eq!(merged.merged_label(&"e1".into()), Some(0));
        assert_eq!(merged.merged_label(&"e2".into()), Some(1));
        assert_eq!(merged.merged_label(&"e3".into()), None);
        assert_eq!(merged.positives().len(), 2);
        assert_eq!(merged.negatives().len(), 1);
    }

    #[test]
    fn merge_matches_brute_force_or() {
        let bank = generate_bank(&SynthConfig {
            n_subjects: 3,
            examples_per_subject: 25,
            ..SynthConfig::default()
        })
        .unwrap();
        let attrs = bank.attributes().to_vec();
        let merged = merge_labels(&bank, &attrs).unwrap();
        for e in 0..bank.len() {
            let id = bank.example_id(e);
            let want = attrs
                .iter()
                .filter_map(|a| bank.label(id, a))
                .max();
            assert_eq!(merged.merged_label_by_index(e), want);
        }
    }

    #[test]
    fn merge_ignores_attribute_order() {
        let ds = tiny_dataset();
        let fwd = merge_labels(&ds, &["a0".into(), "a1".into()]).unwrap();
        let rev = merge_labels(&ds, &["a1".into(), "a0".into()]).unwrap();
        assert_eq!(fwd.merged, rev.merged);
        assert_eq!(fwd.positives, rev.positives);
    }

    #[test]
    fn merge_rejects_bad_attribute_lists() {
        let ds = tiny_dataset();
        assert!(matches!(
            merge_labels(&ds, &[]),
            Err(BaselineError::EmptyAttributes)
        ));
        assert!(matches!(
            merge_labels(&ds, &["ghost".into()]),
            Err(BaselineError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn single_class_pool_is_an_error() {
        let ds = tiny_dataset();
        // a1 alone labels e0 positive, e1 negative: fine. a0 alone has one
        // positive (e2) and two negatives: fine. Craft all-negative pool:
        let merged = merge_labels(&ds, &["a1".into()]).unwrap();
        assert_eq!(merged.positives().len(), 1);
        let examples = vec![
            ExampleRecord {
                id: "x0".into(),
                subject: "s".into(),
                payload: vec![0.0],
            },
            ExampleRecord {
                id: "x1".into(),
                subject: "s".into(),
                payload: vec![1.0],
            },
        ];
        let labels = vec![("x0".into(), "a".into(), 0), ("x1".into(), "a".into(), 0)];
        let ds2 = Dataset::new(InputKind::Vector { dim: 1 }, examples, labels).unwrap();
        let merged2 = merge_labels(&ds2, &["a".into()]).unwrap();
        let cfg = BackboneConfig::vector(1);
        let hyper = BaselineHyper {
            iterations: 1,
            ..BaselineHyper::default()
        };
        assert!(matches!(
            train_baseline(&cfg, &merged2, &hyper, |_| {}),
            Err(BaselineError::SingleClass {
                positives: 0,
                negatives: 2
            })
        ));
    }

    fn small_backbone_config() -> BackboneConfig {
        let mut cfg = BackboneConfig::vector(12);
        cfg.conv_channels = vec![8];
        cfg.precision = crate::backbone::Precision::F64;
        cfg
    }

    #[test]
    fn zero_iterations_returns_init() {
        let bank = generate_bank(&SynthConfig {
            n_subjects: 2,
            examples_per_subject: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        let merged = merge_labels(&bank, bank.attributes()).unwrap();
        let cfg = small_backbone_config();
        let hyper = BaselineHyper {
            iterations: 0,
            seed: 9,
            ..BaselineHyper::default()
        };
        let trained = train_baseline(&cfg, &merged, &hyper, |_| {}).unwrap();
        let init = Backbone::new(cfg).unwrap().init_params(9);
        assert_eq!(trained.values(), init.values());
    }

    #[test]
    fn training_is_deterministic_in_f64() {
        let bank = generate_bank(&SynthConfig {
            n_subjects: 2,
            examples_per_subject: 30,
            ..SynthConfig::default()
        })
        .unwrap();
        let merged = merge_labels(&bank, bank.attributes()).unwrap();
        let cfg = small_backbone_config();
        let hyper = BaselineHyper {
            iterations: 8,
            seed: 3,
            ..BaselineHyper::default()
        };
        let a = train_baseline(&cfg, &merged, &hyper, |_| {}).unwrap();
        let b = train_baseline(&cfg, &merged, &hyper, |_| {}).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn loss_trends_down_across_seeds() {
        let bank = generate_bank(&SynthConfig {
            n_subjects: 4,
            examples_per_subject: 60,
            ..SynthConfig::default()
        })
        .unwrap();
        let merged = merge_labels(&bank, bank.attributes()).unwrap();
        let cfg = small_backbone_config();
        for seed in 0..5 {
            let hyper = BaselineHyper {
                iterations: 80,
                seed,
                ..BaselineHyper::default()
            };
            let mut losses = Vec::new();
            train_baseline(&cfg, &merged, &hyper, |r| losses.push(r.loss)).unwrap();
            let first = losses[0];
            let last: f64 =
                losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
            assert!(
                last < first,
                "seed {seed}: loss went from {first} to {last}"
            );
        }
    }

    #[test]
    fn baseline_and_meta_share_the_layout() {
        let cfg = small_backbone_config();
        let a = Backbone::new(cfg.clone()).unwrap();
        let b = Backbone::new(cfg).unwrap();
        assert_eq!(a.layout().digest(), b.layout().digest());
    }

    #[test]
    fn tiny_pools_fall_back_to_replacement() {
        let ds = tiny_dataset();
        let merged = merge_labels(&ds, &["a0".into(), "a1".into()]).unwrap();
        // 2 positives, 1 negative, shots 5: draws must still fill 10 slots.
        let mut rng = stream(1, &[1]);
        let batch = balanced_batch(&merged, 5, &mut rng).unwrap();
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.labels().iter().filter(|&&y| y == 1).count(), 5);
    }
}
