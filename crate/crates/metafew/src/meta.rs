//! Meta-training loop and test-time adaptation.
//!
//! Inner loop: plain gradient descent on a task's support set. Outer loop:
//! descend the summed query losses of the adapted parameters, with the exact
//! second-order gradient (differentiating through the inner steps via
//! Hessian-vector products) or the first-order approximation that drops the
//! Hessian terms.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, LabeledBatch, ParameterVector};
use crate::ids::TaskId;
use crate::model::Model;
use crate::rngutil;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid meta config: {0}")]
    InvalidConfig(String),
    #[error("episode list is empty")]
    EmptyEpisodes,
    #[error("unbalanced {which} set for task {task}: {pos} positive vs {neg} negative")]
    UnbalancedEpisode {
        task: TaskId,
        which: &'static str,
        pos: usize,
        neg: usize,
    },
    #[error("task source exhausted at iteration {iteration}")]
    SourceExhausted {
        iteration: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientOrder {
    /// Differentiate through the inner updates exactly.
    #[default]
    Exact,
    /// Drop the Hessian terms; the meta-gradient is the query gradient at
    /// the adapted parameters.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Sgd,
    #[default]
    Adam,
}

fn default_alpha() -> f64 {
    0.03
}
fn default_beta() -> f64 {
    0.03
}
fn default_inner_steps() -> usize {
    1
}
fn default_meta_iterations() -> usize {
    2000
}
fn default_shots_train() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner-loop step size.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Outer-loop step size.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps_train: usize,
    /// Tasks per meta-update; None means one per attribute in the bank.
    #[serde(default)]
    pub meta_batch_size: Option<usize>,
    #[serde(default)]
    pub gradient_order: GradientOrder,
    #[serde(default)]
    pub outer_optimizer: OuterOptimizer,
    #[serde(default = "default_meta_iterations")]
    pub meta_iterations: usize,
    /// Per-class examples in each of the support and query sets.
    #[serde(default = "default_shots_train")]
    pub shots_train: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop early when the mean query loss has not improved for this many
    /// consecutive iterations. None disables early stopping.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            inner_steps_train: default_inner_steps(),
            meta_batch_size: None,
            gradient_order: GradientOrder::default(),
            outer_optimizer: OuterOptimizer::default(),
            meta_iterations: default_meta_iterations(),
            shots_train: default_shots_train(),
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MetaError::InvalidConfig("alpha must be > 0".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MetaError::InvalidConfig("beta must be > 0".into()));
        }
        if self.inner_steps_train == 0 {
            return Err(MetaError::InvalidConfig(
                "inner_steps_train must be >= 1".into(),
            ));
        }
        if self.meta_batch_size == Some(0) {
            return Err(MetaError::InvalidConfig(
                "meta_batch_size must be >= 1".into(),
            ));
        }
        if self.shots_train == 0 {
            return Err(MetaError::InvalidConfig("shots_train must be >= 1".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(MetaError::InvalidConfig(
                "early_stop_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled (support, query) pair for one task. Both sets are class
/// balanced; the producing sampler guarantees they are disjoint by example.
#[derive(Debug, Clone)]
pub struct TaskEpisode {
    pub task: TaskId,
    pub support: LabeledBatch,
    pub query: LabeledBatch,
}

impl TaskEpisode {
    pub fn new(
        task: TaskId,
        support: LabeledBatch,
        query: LabeledBatch,
    ) -> Result<Self, MetaError> {
        for (which, batch) in [("support", &support), ("query", &query)] {
            let pos = batch.labels().iter().filter(|&&y| y == 1).count();
            let neg = batch.len() - pos;
            if pos != neg {
                return Err(MetaError::UnbalancedEpisode {
                    task,
                    which,
                    pos,
                    neg,
                });
            }
        }
        Ok(Self {
            task,
            support,
            query,
        })
    }
}

/// Supplies task episodes to the training loop. The rng passed in is the
/// only randomness a source may use, so a run is replayable from its seed.
pub trait EpisodeSource {
    /// Batch size used when the config leaves meta_batch_size unset;
    /// conventionally the number of attributes in the bank.
    fn default_meta_batch(&self) -> usize;

    fn sample_episodes(
        &self,
        n_tasks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TaskEpisode>, Box<dyn std::error::Error + Send + Sync>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub iteration: usize,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
    pub wall_ms: u64,
}

pub trait ProgressSink {
    fn record(&mut self, rec: &ProgressRecord);
}

impl<F: FnMut(&ProgressRecord)> ProgressSink for F {
    fn record(&mut self, rec: &ProgressRecord) {
        self(rec)
    }
}

/// Discards progress records.
pub struct NullSink;

impl ProgressSink for NullSink {
    fn record(&mut self, _rec: &ProgressRecord) {}
}

/// Collects progress records for inspection.
#[derive(Default)]
pub struct CollectSink(pub Vec<ProgressRecord>);

impl ProgressSink for CollectSink {
    fn record(&mut self, rec: &ProgressRecord) {
        self.0.push(rec.clone());
    }
}

/// `steps` plain gradient-descent updates on the support loss.
pub fn inner_update<M: Model>(
    model: &M,
    params: &ParameterVector,
    support: &LabeledBatch,
    alpha: f64,
    steps: usize,
) -> Result<ParameterVector, BackboneError> {
    let mut theta = params.clone();
    for _ in 0..steps {
        let (_, grad) = model.loss_and_grad(&theta, support)?;
        theta.axpy(-alpha, &grad);
    }
    Ok(theta)
}

/// Test-time adaptation: identical to [`inner_update`], named for the
/// user-facing action of specializing a trained initialization to a task.
pub fn adapt<M: Model>(
    model: &M,
    theta: &ParameterVector,
    support: &LabeledBatch,
    alpha: f64,
    steps: usize,
) -> Result<ParameterVector, BackboneError> {
    inner_update(model, theta, support, alpha, steps)
}

/// Gradient with respect to the ORIGINAL parameters of the summed query
/// losses after per-task inner adaptation. Contributions are accumulated in
/// episode order.
pub fn meta_gradient<M: Model>(
    model: &M,
    params: &ParameterVector,
    episodes: &[TaskEpisode],
    alpha: f64,
    inner_steps: usize,
    order: GradientOrder,
) -> Result<ParameterVector, MetaError> {
    Ok(meta_gradient_stats(model, params, episodes, alpha, inner_steps, order)?.0)
}

/// As [`meta_gradient`], also returning (mean initial support loss, mean
/// post-adaptation query loss) for progress diagnostics.
pub fn meta_gradient_stats<M: Model>(
    model: &M,
    params: &ParameterVector,
    episodes: &[TaskEpisode],
    alpha: f64,
    inner_steps: usize,
    order: GradientOrder,
) -> Result<(ParameterVector, f64, f64), MetaError> {
    if episodes.is_empty() {
        return Err(MetaError::EmptyEpisodes);
    }
    let mut total = ParameterVector::zeros(params.layout().clone());
    let mut support_loss_sum = 0.0;
    let mut query_loss_sum = 0.0;
    for ep in episodes {
        // Inner trajectory; theta_t for t in 0..inner_steps is kept so the
        // exact mode can chain Jacobians backward through every step.
        let mut trajectory = Vec::with_capacity(inner_steps);
        let mut theta = params.clone();
        for step in 0..inner_steps {
            let (loss, grad) = model.loss_and_grad(&theta, &ep.support)?;
            if step == 0 {
                support_loss_sum += loss;
            }
            trajectory.push(theta.clone());
            theta.axpy(-alpha, &grad);
        }
        let (query_loss, query_grad) = model.loss_and_grad(&theta, &ep.query)?;
        query_loss_sum += query_loss;
        let contribution = match order {
            GradientOrder::FirstOrder => query_grad,
            GradientOrder::Exact => {
                // d(theta_{t+1})/d(theta_t) = I - alpha * H_support(theta_t);
                // apply the transposed chain right-to-left onto the query
                // gradient: b <- (I - alpha * H(theta_t)) b for t = T-1 .. 0.
                let mut b = query_grad;
                for theta_t in trajectory.iter().rev() {
                    let hb = model.hessian_vector_product(theta_t, &ep.support, &b)?;
                    b.axpy(-alpha, &hb);
                }
                b
            }
        };
        total.axpy(1.0, &contribution);
    }
    let n = episodes.len() as f64;
    Ok((total, support_loss_sum / n, query_loss_sum / n))
}

/// Adam moments (0.9 / 0.999 / 1e-8) or plain SGD over the flat parameters.
pub struct OptimizerState {
    kind: OuterOptimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OuterOptimizer, dim: usize) -> Self {
        let (m, v) = match kind {
            OuterOptimizer::Sgd => (Vec::new(), Vec::new()),
            OuterOptimizer::Adam => (vec![0.0; dim], vec![0.0; dim]),
        };
        Self { kind, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterVector, grad: &ParameterVector, lr: f64) {
        match self.kind {
            OuterOptimizer::Sgd => params.axpy(-lr, grad),
            OuterOptimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                let values = params.values_mut();
                for (i, &g) in grad.values().iter().enumerate() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    values[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
                }
            }
        }
    }
}

/// The full training loop: sample a task batch, adapt per task, descend the
/// summed query losses. Deterministic given the configs' seeds; `wall_ms` in
/// progress records is the only nondeterministic output.
pub fn meta_train(
    backbone_config: &BackboneConfig,
    meta: &MetaConfig,
    source: &dyn EpisodeSource,
    sink: &mut dyn ProgressSink,
) -> Result<ParameterVector, MetaError> {
    meta.validate()?;
    let backbone = Backbone::new(backbone_config.clone())?;
    let mut theta = backbone.init_params(meta.seed);
    let batch_size = meta
        .meta_batch_size
        .unwrap_or_else(|| source.default_meta_batch());
    if batch_size == 0 {
        return Err(MetaError::InvalidConfig(
            "episode source reports an empty bank".into(),
        ));
    }
    let mut opt = OptimizerState::new(meta.outer_optimizer, theta.len());
    let iter_label = rngutil::hash_str("iter");
    let mut best_query = f64::INFINITY;
    let mut stale = 0usize;
    for i in 0..meta.meta_iterations {
        let t0 = Instant::now();
        let mut rng = rngutil::stream(meta.seed, &[iter_label, i as u64]);
        let episodes = source
            .sample_episodes(batch_size, &mut rng)
            .map_err(|e| MetaError::SourceExhausted {
                iteration: i,
                source: e,
            })?;
        if episodes.is_empty() {
            return Err(MetaError::SourceExhausted {
                iteration: i,
                source: "source returned no episodes".into(),
            });
        }
        let (grad, sup, qry) = meta_gradient_stats(
            &backbone,
            &theta,
            &episodes,
            meta.alpha,
            meta.inner_steps_train,
            meta.gradient_order,
        )?;
        opt.step(&mut theta, &grad, meta.beta);
        sink.record(&ProgressRecord {
            iteration: i + 1,
            mean_support_loss: sup,
            mean_query_loss: qry,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        if let Some(patience) = meta.early_stop_patience {
            if qry < best_query - 1e-12 {
                best_query = qry;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(theta)
}
