//! The differentiable detector network.
//!
//! A small conv-pool stack (or an MLP twin for vector inputs) ending in a
//! single sigmoid output, with exact gradient and Hessian-vector-product
//! evaluation. Parameters live in one flat vector with a named layout so the
//! meta-learning loop can treat the whole network as a point in R^n.

mod kernels;

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rngutil;
use crate::scalar::Dual;
use kernels::{ImagePlan, ImageStage, KernelCfg, Plan, VectorPlan};

/// Probability clamp applied after the sigmoid; a clamped output is treated
/// as a constant, so saturated examples contribute zero gradient.
pub const PROB_CLAMP: f64 = kernels::PROB_EPS;
/// Batchnorm variance stabilizer.
pub const BN_EPS: f64 = kernels::BN_EPS;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected input length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("parameter layout mismatch: expected {expected} values, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Vector {
        dim: usize,
    },
}

impl InputKind {
    pub fn len(&self) -> usize {
        match *self {
            InputKind::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            InputKind::Vector { dim } => dim,
        }
    }
}

/// Arithmetic width for the network kernels. Training runs at f32; gradient
/// oracles run at f64 so finite-difference comparisons are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_conv_channels() -> Vec<usize> {
    vec![64, 48, 32, 16]
}
fn default_kernel_size() -> usize {
    5
}
fn default_pool_size() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_fc_output_dim() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_kind: InputKind,
    /// Conv output channels per block for image inputs; hidden widths for
    /// vector inputs. Empty with vector input means a plain logistic head.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_true")]
    pub use_batchnorm: bool,
    #[serde(default = "default_fc_output_dim")]
    pub fc_output_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl BackboneConfig {
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        Self {
            input_kind: InputKind::Image {
                height,
                width,
                channels,
            },
            conv_channels: default_conv_channels(),
            kernel_size: default_kernel_size(),
            pool_size: default_pool_size(),
            use_batchnorm: true,
            fc_output_dim: 1,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn vector(dim: usize) -> Self {
        Self {
            input_kind: InputKind::Vector { dim },
            ..Self::image(1, 1, 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered map from parameter names to contiguous ranges of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn new(shapes: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, len) in shapes {
            entries.push(LayoutEntry { name, offset, len });
            offset += len;
        }
        Self {
            entries,
            total: offset,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.offset..e.offset + e.len)
    }

    /// Stable fingerprint of the entry list; two models share an architecture
    /// exactly when their layout digests agree.
    pub fn digest(&self) -> u64 {
        let mut h = rngutil::Fnv1a::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(&[0]);
            h.update(&(e.len as u64).to_le_bytes());
        }
        h.finish()
    }
}

/// Flat, ordered view of every network parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, BackboneError> {
        if values.len() != layout.total_len() {
            return Err(BackboneError::LayoutMismatch {
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(BackboneError::NonFinite("parameter vector".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.values {
            *x *= a;
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert!(self.same_layout(other));
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// A batch of examples with binary labels, inputs stored flattened row-major
/// (channel-major for images: all of channel 0, then channel 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<u8>,
}

impl LabeledBatch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, BackboneError> {
        if inputs.is_empty() {
            return Err(BackboneError::InvalidBatch("batch is empty".into()));
        }
        let input_dim = inputs[0].len();
        if inputs.iter().any(|x| x.len() != input_dim) {
            return Err(BackboneError::InvalidBatch(
                "examples have differing lengths".into(),
            ));
        }
        let flat: Vec<f64> = inputs.into_iter().flatten().collect();
        Self::from_flat(flat, input_dim, labels)
    }

    pub fn from_flat(
        inputs: Vec<f64>,
        input_dim: usize,
        labels: Vec<u8>,
    ) -> Result<Self, BackboneError> {
        if input_dim == 0 || inputs.is_empty() {
            return Err(BackboneError::InvalidBatch("batch is empty".into()));
        }
        if inputs.len() != input_dim * labels.len() {
            return Err(BackboneError::InvalidBatch(format!(
                "{} input values do not tile {} examples of length {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(BackboneError::InvalidBatch(
                "labels must be 0 or 1".into(),
            ));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(BackboneError::NonFinite("batch inputs".into()));
        }
        Ok(Self {
            inputs,
            input_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs_flat(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Batchnorm statistics policy marker. Both modes use current-batch
/// statistics (no running averages exist: statistics carried across tasks
/// would be ill-defined under per-task adaptation), so the mode currently
/// does not change the computation; it is part of the call contract so the
/// policy can be revisited without touching call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum EntryInit {
    WeightFanIn(usize),
    Zero,
    One,
}

/// Validated network: config plus the resolved layer plan and layout.
pub struct Backbone {
    config: BackboneConfig,
    kcfg: KernelCfg,
    layout: Arc<Layout>,
    inits: Vec<EntryInit>,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("config", &self.config)
            .field("params", &self.layout.total_len())
            .finish()
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self, BackboneError> {
        if config.kernel_size == 0 {
            return Err(BackboneError::InvalidConfig("kernel_size must be >= 1".into()));
        }
        if config.pool_size == 0 {
            return Err(BackboneError::InvalidConfig("pool_size must be >= 1".into()));
        }
        if config.fc_output_dim != 1 {
            return Err(BackboneError::InvalidConfig(
                "fc_output_dim must be 1 (single binary detector head)".into(),
            ));
        }
        let mut shapes: Vec<(String, usize)> = Vec::new();
        let mut inits: Vec<EntryInit> = Vec::new();
        let plan = match config.input_kind {
            InputKind::Image {
                height,
                width,
                channels,
            } => {
                if height == 0 || width == 0 || channels == 0 {
                    return Err(BackboneError::InvalidConfig(
                        "image dimensions must be >= 1".into(),
                    ));
                }
                if config.conv_channels.is_empty() {
                    return Err(BackboneError::InvalidConfig(
                        "conv_channels must be non-empty for image input".into(),
                    ));
                }
                let k = config.kernel_size;
                let p = config.pool_size;
                let mut c_in = channels;
                let mut h = height;
                let mut w = width;
                let mut stages = Vec::new();
                for (i, &c_out) in config.conv_channels.iter().enumerate() {
                    if c_out == 0 {
                        return Err(BackboneError::InvalidConfig(format!(
                            "conv stage {} has zero channels",
                            i + 1
                        )));
                    }
                    let h_out = h / p;
                    let w_out = w / p;
                    if h_out == 0 || w_out == 0 {
                        return Err(BackboneError::InvalidConfig(format!(
                            "pooling stage {} collapses spatial size {}x{} below 1x1",
                            i + 1,
                            h,
                            w
                        )));
                    }
                    shapes.push((format!("conv{}.weight", i + 1), c_out * c_in * k * k));
                    inits.push(EntryInit::WeightFanIn(c_in * k * k));
                    shapes.push((format!("conv{}.bias", i + 1), c_out));
                    inits.push(EntryInit::Zero);
                    if config.use_batchnorm {
                        shapes.push((format!("bn{}.scale", i + 1), c_out));
                        inits.push(EntryInit::One);
                        shapes.push((format!("bn{}.shift", i + 1), c_out));
                        inits.push(EntryInit::Zero);
                    }
                    stages.push(ImageStage {
                        c_in,
                        c_out,
                        h_in: h,
                        w_in: w,
                        h_out,
                        w_out,
                    });
                    c_in = c_out;
                    h = h_out;
                    w = w_out;
                }
                let flat_dim = c_in * h * w;
                shapes.push(("fc.weight".into(), flat_dim));
                inits.push(EntryInit::WeightFanIn(flat_dim));
                shapes.push(("fc.bias".into(), 1));
                inits.push(EntryInit::Zero);
                Plan::Image(ImagePlan { stages, flat_dim })
            }
            InputKind::Vector { dim } => {
                if dim == 0 {
                    return Err(BackboneError::InvalidConfig(
                        "vector dimension must be >= 1".into(),
                    ));
                }
                let mut d_in = dim;
                let mut hidden = Vec::new();
                for (i, &d_out) in config.conv_channels.iter().enumerate() {
                    if d_out == 0 {
                        return Err(BackboneError::InvalidConfig(format!(
                            "hidden stage {} has zero width",
                            i + 1
                        )));
                    }
                    shapes.push((format!("dense{}.weight", i + 1), d_out * d_in));
                    inits.push(EntryInit::WeightFanIn(d_in));
                    shapes.push((format!("dense{}.bias", i + 1), d_out));
                    inits.push(EntryInit::Zero);
                    if config.use_batchnorm {
                        shapes.push((format!("bn{}.scale", i + 1), d_out));
                        inits.push(EntryInit::One);
                        shapes.push((format!("bn{}.shift", i + 1), d_out));
                        inits.push(EntryInit::Zero);
                    }
                    hidden.push((d_in, d_out));
                    d_in = d_out;
                }
                shapes.push(("fc.weight".into(), d_in));
                inits.push(EntryInit::WeightFanIn(d_in));
                shapes.push(("fc.bias".into(), 1));
                inits.push(EntryInit::Zero);
                Plan::Vector(VectorPlan {
                    hidden,
                    final_in: d_in,
                })
            }
        };
        let layout = Arc::new(Layout::new(shapes));
        Ok(Self {
            kcfg: KernelCfg {
                plan,
                use_batchnorm: config.use_batchnorm,
                kernel_size: config.kernel_size,
                pool_size: config.pool_size,
            },
            config,
            layout,
            inits,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn input_len(&self) -> usize {
        self.config.input_kind.len()
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Fan-in-scaled normal weights, zero biases and shifts, unit scales.
    /// One derived rng stream per layout entry keeps draws independent of
    /// any other entry's size.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut params = ParameterVector::zeros(self.layout.clone());
        let init_label = rngutil::hash_str("init");
        for (idx, entry) in self.layout.entries().iter().enumerate() {
            let range = entry.offset..entry.offset + entry.len;
            match self.inits[idx] {
                EntryInit::WeightFanIn(fan_in) => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    let mut rng = rngutil::stream(seed, &[init_label, idx as u64]);
                    for v in &mut params.values_mut()[range] {
                        *v = dist.sample(&mut rng);
                    }
                }
                EntryInit::Zero => {}
                EntryInit::One => {
                    for v in &mut params.values_mut()[range] {
                        *v = 1.0;
                    }
                }
            }
        }
        params
    }

    fn check(&self, params: &ParameterVector, batch: &LabeledBatch) -> Result<(), BackboneError> {
        if params.len() != self.layout.total_len() {
            return Err(BackboneError::LayoutMismatch {
                expected: self.layout.total_len(),
                got: params.len(),
            });
        }
        if batch.input_dim() != self.input_len() {
            return Err(BackboneError::ShapeMismatch {
                expected: self.input_len(),
                got: batch.input_dim(),
            });
        }
        Ok(())
    }

    /// One probability per example, strictly inside (0, 1). Batchnorm uses
    /// current-batch statistics in both modes (see [`Mode`]).
    pub fn forward(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
        _mode: Mode,
    ) -> Result<Vec<f64>, BackboneError> {
        self.check(params, batch)?;
        let n = batch.len();
        let probs = match self.config.precision {
            Precision::F32 => {
                let p: Vec<f32> = params.values().iter().map(|&v| v as f32).collect();
                kernels::forward_probs(&self.kcfg, &p, batch.inputs_flat(), n)
                    .into_iter()
                    .map(f64::from)
                    .collect()
            }
            Precision::F64 => {
                kernels::forward_probs(&self.kcfg, params.values(), batch.inputs_flat(), n)
            }
        };
        Ok(probs)
    }

    /// Mean binary cross-entropy of the forward pass on the batch.
    pub fn loss(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
    ) -> Result<f64, BackboneError> {
        let probs = self.forward(params, batch, Mode::Train)?;
        bce_loss(&probs, batch.labels())
    }

    pub fn loss_grad(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
    ) -> Result<ParameterVector, BackboneError> {
        Ok(self.loss_and_grad(params, batch)?.1)
    }

    /// Loss and its exact gradient in one pass.
    pub fn loss_and_grad(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
    ) -> Result<(f64, ParameterVector), BackboneError> {
        self.check(params, batch)?;
        let n = batch.len();
        let (loss, grad) = match self.config.precision {
            Precision::F32 => {
                let p: Vec<f32> = params.values().iter().map(|&v| v as f32).collect();
                let (l, g) =
                    kernels::loss_and_grad(&self.kcfg, &p, batch.inputs_flat(), batch.labels(), n);
                (f64::from(l), g.into_iter().map(f64::from).collect())
            }
            Precision::F64 => kernels::loss_and_grad(
                &self.kcfg,
                params.values(),
                batch.inputs_flat(),
                batch.labels(),
                n,
            ),
        };
        Ok((
            loss,
            ParameterVector {
                layout: self.layout.clone(),
                values: grad,
            },
        ))
    }

    /// Exact H·v at `params` for the batch loss, computed as the directional
    /// derivative of the gradient: parameters are seeded as dual numbers
    /// (theta, v) and the backward pass is replayed, so no finite differences
    /// are involved.
    pub fn hessian_vector_product(
        &self,
        params: &ParameterVector,
        batch: &LabeledBatch,
        v: &ParameterVector,
    ) -> Result<ParameterVector, BackboneError> {
        self.check(params, batch)?;
        if v.len() != params.len() {
            return Err(BackboneError::LayoutMismatch {
                expected: params.len(),
                got: v.len(),
            });
        }
        let n = batch.len();
        let hv: Vec<f64> = match self.config.precision {
            Precision::F32 => {
                let seeded: Vec<Dual<f32>> = params
                    .values()
                    .iter()
                    .zip(v.values())
                    .map(|(&p, &t)| Dual::seeded(p, t))
                    .collect();
                let (_, g) =
                    kernels::loss_and_grad(&self.kcfg, &seeded, batch.inputs_flat(), batch.labels(), n);
                g.into_iter().map(|d| f64::from(d.d)).collect()
            }
            Precision::F64 => {
                let seeded: Vec<Dual<f64>> = params
                    .values()
                    .iter()
                    .zip(v.values())
                    .map(|(&p, &t)| Dual::seeded(p, t))
                    .collect();
                let (_, g) =
                    kernels::loss_and_grad(&self.kcfg, &seeded, batch.inputs_flat(), batch.labels(), n);
                g.into_iter().map(|d| d.d).collect()
            }
        };
        Ok(ParameterVector {
            layout: self.layout.clone(),
            values: hv,
        })
    }
}

/// Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [PROB_CLAMP, 1-PROB_CLAMP].
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64, BackboneError> {
    if probs.len() != labels.len() {
        return Err(BackboneError::InvalidBatch(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(BackboneError::InvalidBatch("batch is empty".into()));
    }
    let mut acc = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        acc += if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-acc / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector_config(dim: usize, hidden: Vec<usize>, bn: bool) -> BackboneConfig {
        BackboneConfig {
            conv_channels: hidden,
            use_batchnorm: bn,
            precision: Precision::F64,
            ..BackboneConfig::vector(dim)
        }
    }

    #[test]
    fn logistic_head_layout_and_zero_bias() {
        let bb = Backbone::new(vector_config(3, vec![], true)).unwrap();
        let params = bb.init_params(7);
        assert_eq!(params.len(), 4);
        let names: Vec<&str> = bb.layout().entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["fc.weight", "fc.bias"]);
        assert_eq!(params.slice("fc.bias").unwrap(), &[0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let bb = Backbone::new(BackboneConfig {
            conv_channels: vec![4, 3],
            precision: Precision::F64,
            ..BackboneConfig::image(8, 8, 1)
        })
        .unwrap();
        let a = bb.init_params(99);
        let b = bb.init_params(99);
        assert_eq!(a.values(), b.values());
        let c = bb.init_params(100);
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn default_conv_stack_parameter_count() {
        // Hand count for 32x32x1, channels [64, 48, 32, 16], k=5, batchnorm:
        //   conv1: 64*1*25 + 64 + 2*64   = 1792
        //   conv2: 48*64*25 + 48 + 2*48  = 76944
        //   conv3: 32*48*25 + 32 + 2*32  = 38496
        //   conv4: 16*32*25 + 16 + 2*16  = 12848
        //   fc: 16*2*2 + 1               = 65
        let bb = Backbone::new(BackboneConfig::image(32, 32, 1)).unwrap();
        assert_eq!(bb.param_count(), 1792 + 76944 + 38496 + 12848 + 65);
        assert_eq!(bb.param_count(), 130145);
    }

    #[test]
    fn zero_params_give_half_probability_on_both_paths() {
        let img = Backbone::new(BackboneConfig {
            conv_channels: vec![3, 2],
            precision: Precision::F64,
            ..BackboneConfig::image(8, 8, 1)
        })
        .unwrap();
        let batch = LabeledBatch::new(vec![vec![0.3; 64], vec![-1.2; 64]], vec![0, 1]).unwrap();
        let probs = img
            .forward(&ParameterVector::zeros(img.layout().clone()), &batch, Mode::Eval)
            .unwrap();
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-12));

        let vec_bb = Backbone::new(vector_config(5, vec![4], true)).unwrap();
        let batch = LabeledBatch::new(vec![vec![1.0, -2.0, 0.5, 3.0, 0.0]], vec![1]).unwrap();
        let probs = vec_bb
            .forward(&ParameterVector::zeros(vec_bb.layout().clone()), &batch, Mode::Eval)
            .unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_fc_layer_matches_direct_sigmoid() {
        let bb = Backbone::new(vector_config(3, vec![], false)).unwrap();
        let mut params = ParameterVector::zeros(bb.layout().clone());
        params.values_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let batch = LabeledBatch::new(vec![vec![1.0, 2.0, 3.0]], vec![1]).unwrap();
        let p = bb.forward(&params, &batch, Mode::Eval).unwrap();
        let z: f64 = 0.5 * 1.0 - 1.0 * 2.0 + 2.0 * 3.0 + 0.25;
        assert!((p[0] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }

    #[test]
    fn bce_loss_closed_forms() {
        assert!((bce_loss(&[0.5], &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bce_loss(&[0.8], &[1]).unwrap() - (-(0.8f64.ln()))).abs() < 1e-12);
        // Clamp engages: p = 1 - 1e-12 is pushed down to 1 - 1e-7.
        let clamped = bce_loss(&[1.0 - 1e-12], &[1]).unwrap();
        assert!((clamped - (-(1.0 - 1e-7f64).ln())).abs() < 1e-15);
        assert!(bce_loss(&[0.5, 0.5], &[1]).is_err());
    }

    #[test]
    fn bce_loss_monotone_in_probability() {
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let mut prev_pos = f64::INFINITY;
        let mut prev_neg = -f64::INFINITY;
        for &p in &grid {
            let lp = bce_loss(&[p], &[1]).unwrap();
            let ln = bce_loss(&[p], &[0]).unwrap();
            assert!(lp < prev_pos, "loss for y=1 must decrease in p");
            assert!(ln > prev_neg, "loss for y=0 must increase in p");
            assert!(lp >= 0.0 && ln >= 0.0);
            prev_pos = lp;
            prev_neg = ln;
        }
    }

    #[test]
    fn shape_and_layout_mismatches_are_reported() {
        let bb = Backbone::new(vector_config(4, vec![], false)).unwrap();
        let params = bb.init_params(0);
        let wrong_dim = LabeledBatch::new(vec![vec![1.0, 2.0]], vec![0]).unwrap();
        match bb.forward(&params, &wrong_dim, Mode::Eval) {
            Err(BackboneError::ShapeMismatch { expected: 4, got: 2 }) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let other_bb = Backbone::new(vector_config(7, vec![], false)).unwrap();
        let wrong_params = other_bb.init_params(0);
        let batch = LabeledBatch::new(vec![vec![0.0; 4]], vec![0]).unwrap();
        assert!(matches!(
            bb.forward(&wrong_params, &batch, Mode::Eval),
            Err(BackboneError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn pooling_collapse_error_names_stage() {
        let err = Backbone::new(BackboneConfig {
            conv_channels: vec![8, 8, 8],
            ..BackboneConfig::image(4, 4, 1)
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage 3"), "unexpected message: {msg}");
    }

    #[test]
    fn probabilities_stay_inside_open_interval_under_saturation() {
        let bb = Backbone::new(vector_config(2, vec![], false)).unwrap();
        let mut params = ParameterVector::zeros(bb.layout().clone());
        params.values_mut().copy_from_slice(&[500.0, 500.0, 0.0]);
        let batch =
            LabeledBatch::new(vec![vec![10.0, 10.0], vec![-10.0, -10.0]], vec![1, 0]).unwrap();
        let probs = bb.forward(&params, &batch, Mode::Eval).unwrap();
        for &p in &probs {
            assert!(p > 0.0 && p < 1.0);
            assert!(p >= PROB_CLAMP && p <= 1.0 - PROB_CLAMP);
        }
    }

    #[test]
    fn labeled_batch_validation() {
        assert!(LabeledBatch::new(vec![], vec![]).is_err());
        assert!(LabeledBatch::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 1]).is_err());
        assert!(LabeledBatch::new(vec![vec![1.0]], vec![2]).is_err());
        assert!(LabeledBatch::new(vec![vec![f64::NAN]], vec![0]).is_err());
    }

    #[test]
    fn layout_digest_distinguishes_architectures() {
        let a = Backbone::new(vector_config(4, vec![3], true)).unwrap();
        let b = Backbone::new(vector_config(4, vec![3], true)).unwrap();
        let c = Backbone::new(vector_config(4, vec![5], true)).unwrap();
        assert_eq!(a.layout().digest(), b.layout().digest());
        assert_ne!(a.layout().digest(), c.layout().digest());
    }

    // Independent loop-based reference forward pass over nested vectors,
    // written directly from the layer definitions. Kept deliberately naive.
    mod reference {
        pub fn conv_same(
            input: &[Vec<Vec<Vec<f64>>>],
            w: &[Vec<Vec<Vec<f64>>>],
            b: &[f64],
        ) -> Vec<Vec<Vec<Vec<f64>>>> {
            let k = w[0][0].len();
            let pad = (k - 1) / 2;
            let h = input[0][0].len();
            let wd = input[0][0][0].len();
            let c_in = input[0].len();
            input
                .iter()
                .map(|img| {
                    w.iter()
                        .zip(b)
                        .map(|(filt, &bias)| {
                            (0..h)
                                .map(|y| {
                                    (0..wd)
                                        .map(|x| {
                                            let mut acc = bias;
                                            for ci in 0..c_in {
                                                for ky in 0..k {
                                                    for kx in 0..k {
                                                        let iy = y as isize + ky as isize
                                                            - pad as isize;
                                                        let ix = x as isize + kx as isize
                                                            - pad as isize;
                                                        if iy >= 0
                                                            && ix >= 0
                                                            && (iy as usize) < h
                                                            && (ix as usize) < wd
                                                        {
                                                            acc += filt[ci][ky][kx]
                                                                * img[ci][iy as usize][ix as usize];
                                                        }
                                                    }
                                                }
                                            }
                                            acc
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }

        pub fn batchnorm(
            x: &[Vec<Vec<Vec<f64>>>],
            gamma: &[f64],
            beta: &[f64],
            eps: f64,
        ) -> Vec<Vec<Vec<Vec<f64>>>> {
            let c = x[0].len();
            let mut out = x.to_vec();
            for ch in 0..c {
                let mut vals = Vec::new();
                for img in x {
                    for row in &img[ch] {
                        vals.extend_from_slice(row);
                    }
                }
                let m = vals.len() as f64;
                let mean: f64 = vals.iter().sum::<f64>() / m;
                let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                for img in &mut out {
                    for row in &mut img[ch] {
                        for v in row {
                            *v = gamma[ch] * ((*v - mean) * inv) + beta[ch];
                        }
                    }
                }
            }
            out
        }

        pub fn relu(x: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<Vec<Vec<f64>>>> {
            x.iter()
                .map(|img| {
                    img.iter()
                        .map(|ch| {
                            ch.iter()
                                .map(|row| row.iter().map(|&v| v.max(0.0)).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }

        pub fn maxpool(x: &[Vec<Vec<Vec<f64>>>], p: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
            x.iter()
                .map(|img| {
                    img.iter()
                        .map(|ch| {
                            let h_out = ch.len() / p;
                            let w_out = ch[0].len() / p;
                            (0..h_out)
                                .map(|oy| {
                                    (0..w_out)
                                        .map(|ox| {
                                            let mut best = f64::NEG_INFINITY;
                                            for py in 0..p {
                                                for px in 0..p {
                                                    best =
                                                        best.max(ch[oy * p + py][ox * p + px]);
                                                }
                                            }
                                            best
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }
    }

    #[test]
    fn conv_stack_matches_naive_reference() {
        use rand::Rng;
        let bb = Backbone::new(BackboneConfig {
            precision: Precision::F64,
            ..BackboneConfig::image(32, 32, 1)
        })
        .unwrap();
        let params = bb.init_params(5);
        let mut rng = crate::rngutil::stream(5, &[1]);
        let imgs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch = LabeledBatch::new(imgs.clone(), vec![0, 1]).unwrap();
        let got = bb.forward(&params, &batch, Mode::Eval).unwrap();

        // Rebuild the same computation from named parameter slices.
        let to_tensor = |flat: &[f64], c: usize, h: usize, w: usize| -> Vec<Vec<Vec<f64>>> {
            (0..c)
                .map(|ci| {
                    (0..h)
                        .map(|y| (0..w).map(|x| flat[(ci * h + y) * w + x]).collect())
                        .collect()
                })
                .collect()
        };
        let mut act: Vec<Vec<Vec<Vec<f64>>>> =
            imgs.iter().map(|img| to_tensor(img, 1, 32, 32)).collect();
        let channels = [64usize, 48, 32, 16];
        let mut c_in = 1;
        for (i, &c_out) in channels.iter().enumerate() {
            let wf = params.slice(&format!("conv{}.weight", i + 1)).unwrap();
            let w: Vec<Vec<Vec<Vec<f64>>>> = (0..c_out)
                .map(|co| to_tensor(&wf[co * c_in * 25..(co + 1) * c_in * 25], c_in, 5, 5))
                .collect();
            let b = params.slice(&format!("conv{}.bias", i + 1)).unwrap();
            let gamma = params.slice(&format!("bn{}.scale", i + 1)).unwrap();
            let beta = params.slice(&format!("bn{}.shift", i + 1)).unwrap();
            act = reference::conv_same(&act, &w, b);
            act = reference::batchnorm(&act, gamma, beta, BN_EPS);
            act = reference::relu(&act);
            act = reference::maxpool(&act, 2);
            c_in = c_out;
        }
        let fc_w = params.slice("fc.weight").unwrap();
        let fc_b = params.slice("fc.bias").unwrap();
        for (n, img) in act.iter().enumerate() {
            let mut flat = Vec::new();
            for ch in img {
                for row in ch {
                    flat.extend_from_slice(row);
                }
            }
            let z: f64 =
                fc_b[0] + flat.iter().zip(fc_w).map(|(a, b)| a * b).sum::<f64>();
            let expect = 1.0 / (1.0 + (-z).exp());
            let rel = (got[n] - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-6, "example {n}: {} vs {expect}", got[n]);
        }
    }

    #[test]
    fn f32_and_f64_forward_agree_loosely() {
        let mut cfg = vector_config(6, vec![5, 4], true);
        cfg.precision = Precision::F32;
        let bb32 = Backbone::new(cfg.clone()).unwrap();
        cfg.precision = Precision::F64;
        let bb64 = Backbone::new(cfg).unwrap();
        let params = bb64.init_params(3);
        let batch = LabeledBatch::new(
            vec![vec![0.1, -0.4, 2.0, 0.7, -1.1, 0.3], vec![1.0, 0.2, -0.5, 0.9, 0.0, -2.0]],
            vec![1, 0],
        )
        .unwrap();
        let a = bb32.forward(&params, &batch, Mode::Eval).unwrap();
        let b = bb64.forward(&params, &batch, Mode::Eval).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
