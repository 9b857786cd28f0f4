//! Synthetic task-bank generator.
//!
//! Stands in for licensed corpora: a bank of subjects x attributes where
//! each attribute has a linear-plus-nonlinear decision rule in feature
//! space, each subject shifts the input distribution, and per-task positive
//! rates are drawn from a configurable range to mimic heavy class skew.
//! Attribute overlap blends every attribute's rule and rate toward a shared
//! one, controlling how related the tasks are.
//!
//! Per (subject, attribute), examples are ranked by noisy rule score and the
//! top fraction is labeled positive, so with zero noise and zero nonlinear
//! weight every task is linearly separable by construction. Generation is
//! deterministic given the seed, with independent rng streams per concern so
//! changing one dimension does not reshuffle unrelated draws.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::InputKind;
use crate::ids::{AttributeId, ExampleId, SubjectId};
use crate::rngutil::{hash_str, stream};
use crate::taskbank::{Dataset, ExampleRecord, TaskBankError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(
        "positive rate range [{lo}, {hi}] is infeasible for {examples_per_subject} examples \
         per subject: no integer count in [ceil(lo*n), floor(hi*n)]"
    )]
    InfeasibleRate {
        examples_per_subject: usize,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Bank(#[from] TaskBankError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_attributes: usize,
    pub examples_per_subject: usize,
    pub feature_dim: usize,
    /// Magnitude of the per-subject offset added to every example.
    pub subject_shift_scale: f64,
    /// 0 = fully independent attribute rules and rates, 1 = one shared rule.
    pub attribute_overlap: f64,
    /// Bounds on the per-task positive fraction, exclusive of 0 and 1.
    pub positive_rate_range: [f64; 2],
    /// Standard deviation of the label-noise term added to rule scores.
    pub noise_scale: f64,
    /// Weight of the tanh term in the decision rule; 0 keeps rules linear.
    pub nonlinear_scale: f64,
    /// Reshape features into a 1-channel grid so banks exercise the conv
    /// path; the values are identical to the vector payload.
    pub render_images: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_attributes: 6,
            examples_per_subject: 120,
            feature_dim: 12,
            subject_shift_scale: 1.5,
            attribute_overlap: 0.5,
            positive_rate_range: [0.05, 0.4],
            noise_scale: 0.05,
            nonlinear_scale: 0.6,
            render_images: false,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.n_subjects == 0 || self.n_attributes == 0 {
            return err("need at least one subject and one attribute".into());
        }
        if self.examples_per_subject == 0 {
            return err("examples_per_subject must be >= 1".into());
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be >= 1".into());
        }
        let [lo, hi] = self.positive_rate_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return err(format!(
                "positive_rate_range [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"
            ));
        }
        if !(0.0..=1.0).contains(&self.attribute_overlap) {
            return err(format!(
                "attribute_overlap {} must lie in [0, 1]",
                self.attribute_overlap
            ));
        }
        for (name, v) in [
            ("subject_shift_scale", self.subject_shift_scale),
            ("noise_scale", self.noise_scale),
            ("nonlinear_scale", self.nonlinear_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} {v} must be finite and >= 0"));
            }
        }
        let n = self.examples_per_subject;
        if min_positives(lo, n) > max_positives(hi, n) {
            return Err(SynthError::InfeasibleRate {
                examples_per_subject: n,
                lo,
                hi,
            });
        }
        Ok(())
    }

    pub fn input_kind(&self) -> InputKind {
        if self.render_images {
            let (h, w) = grid_shape(self.feature_dim);
            InputKind::Image {
                height: h,
                width: w,
                channels: 1,
            }
        } else {
            InputKind::Vector {
                dim: self.feature_dim,
            }
        }
    }
}

fn min_positives(lo: f64, n: usize) -> usize {
    (lo * n as f64).ceil() as usize
}

fn max_positives(hi: f64, n: usize) -> usize {
    (hi * n as f64).floor() as usize
}

/// Tallest grid no wider than it is long: largest divisor <= sqrt(dim).
fn grid_shape(dim: usize) -> (usize, usize) {
    let mut h = 1;
    let mut d = 1;
    while d * d <= dim {
        if dim % d == 0 {
            h = d;
        }
        d += 1;
    }
    (h, dim / h)
}

#[derive(Debug, Clone)]
pub struct AttributeRule {
    /// Unit-norm linear weights after blending toward the shared rule.
    pub weight: Vec<f64>,
    pub nonlinear_weight: Vec<f64>,
}

/// Generator internals exposed so tests can verify labels against the rules
/// that produced them instead of re-deriving anything.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub rules: Vec<AttributeRule>,
    pub subject_offsets: Vec<Vec<f64>>,
    /// Realized target positive rate per [subject][attribute].
    pub rates: Vec<Vec<f64>>,
    /// Score cut between the lowest positive and highest negative, per
    /// [subject][attribute].
    pub thresholds: Vec<Vec<f64>>,
}

pub fn generate_bank(config: &SynthConfig) -> Result<Dataset, SynthError> {
    generate_bank_with_truth(config).map(|(d, _)| d)
}

pub fn generate_bank_with_truth(
    config: &SynthConfig,
) -> Result<(Dataset, SynthTruth), SynthError> {
    config.validate()?;
    let d = config.feature_dim;
    let ov = config.attribute_overlap;
    let [lo, hi] = config.positive_rate_range;
    let n = config.examples_per_subject;

    let mut rule_rng = stream(config.seed, &[hash_str("synth.rules")]);
    let w_shared = gaussian(&mut rule_rng, d);
    let u_shared = gaussian(&mut rule_rng, d);
    let rules: Vec<AttributeRule> = (0..config.n_attributes)
        .map(|_| {
            let w_own = gaussian(&mut rule_rng, d);
            let u_own = gaussian(&mut rule_rng, d);
            AttributeRule {
                weight: normalize(blend(ov, &w_shared, &w_own)),
                nonlinear_weight: normalize(blend(ov, &u_shared, &u_own)),
            }
        })
        .collect();

    let mut rate_rng = stream(config.seed, &[hash_str("synth.rates")]);
    let rate_shared: f64 = rate_rng.gen_range(lo..=hi);
    let rates: Vec<Vec<f64>> = (0..config.n_subjects)
        .map(|_| {
            (0..config.n_attributes)
                .map(|_| {
                    let own: f64 = rate_rng.gen_range(lo..=hi);
                    ov * rate_shared + (1.0 - ov) * own
                })
                .collect()
        })
        .collect();

    let mut examples = Vec::with_capacity(config.n_subjects * n);
    let mut labels = Vec::new();
    let mut subject_offsets = Vec::with_capacity(config.n_subjects);
    let mut thresholds = vec![vec![f64::NAN; config.n_attributes]; config.n_subjects];
    for s in 0..config.n_subjects {
        let mut subj_rng = stream(config.seed, &[hash_str("synth.subject"), s as u64]);
        let offset: Vec<f64> = gaussian(&mut subj_rng, d)
            .into_iter()
            .map(|z| config.subject_shift_scale * z)
            .collect();
        let subject: SubjectId = format!("subj{s}").as_str().into();

        // scores[a][e]: noisy rule score of example e under attribute a.
        let mut scores = vec![Vec::with_capacity(n); config.n_attributes];
        let mut ids: Vec<ExampleId> = Vec::with_capacity(n);
        for e in 0..n {
            let mut ex_rng = stream(config.seed, &[hash_str("synth.example"), s as u64, e as u64]);
            let x: Vec<f64> = gaussian(&mut ex_rng, d)
                .iter()
                .zip(&offset)
                .map(|(z, o)| z + o)
                .collect();
            let mut noise_rng =
                stream(config.seed, &[hash_str("synth.noise"), s as u64, e as u64]);
            for (a, rule) in rules.iter().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut noise_rng);
                let score = dot(&rule.weight, &x)
                    + config.nonlinear_scale * dot(&rule.nonlinear_weight, &x).tanh()
                    + config.noise_scale * eps;
                scores[a].push(score);
            }
            let id: ExampleId = format!("subj{s}_e{e}").as_str().into();
            ids.push(id.clone());
            examples.push(ExampleRecord {
                id,
                subject: subject.clone(),
                payload: x,
            });
        }

        for (a, attr_scores) in scores.iter().enumerate() {
            let rate = rates[s][a];
            let m = ((rate * n as f64).round() as usize)
                .clamp(min_positives(lo, n), max_positives(hi, n));
            debug_assert!(m >= 1 && m < n, "rate bounds keep both classes non-empty");
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_unstable_by(|&i, &j| {
                attr_scores[j]
                    .partial_cmp(&attr_scores[i])
                    .expect("scores are finite")
                    .then(i.cmp(&j))
            });
            thresholds[s][a] = 0.5 * (attr_scores[order[m - 1]] + attr_scores[order[m]]);
            let attribute: AttributeId = format!("attr{a}").as_str().into();
            let mut positive = vec![false; n];
            for &e in &order[..m] {
                positive[e] = true;
            }
            for e in 0..n {
                labels.push((ids[e].clone(), attribute.clone(), u8::from(positive[e])));
            }
        }
        subject_offsets.push(offset);
    }

    let dataset = Dataset::new(config.input_kind(), examples, labels)?;
    Ok((
        dataset,
        SynthTruth {
            rules,
            subject_offsets,
            rates,
            thresholds,
        },
    ))
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn blend(ov: f64, shared: &[f64], own: &[f64]) -> Vec<f64> {
    shared
        .iter()
        .zip(own)
        .map(|(s, o)| ov * s + (1.0 - ov) * o)
        .collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 1e-12, "degenerate rule vector");
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
