//! Few-shot personalization of binary detectors.
//!
//! A task is one (subject, attribute) pair treated as its own binary
//! detection problem. The library meta-trains a shared network
//! initialization over a bank of such tasks so that a handful of labeled
//! examples and a few gradient steps adapt it to an unseen subject, and
//! ships the matching baseline, episodic samplers, evaluation protocol, and
//! a synthetic bank generator for end-to-end testing.

pub mod backbone;
pub mod baseline;
pub mod checkpoint;
pub mod eval;
pub mod fsio;
pub mod ids;
pub mod meta;
pub mod model;
pub mod rngutil;
pub mod scalar;
pub mod synthgen;
pub mod taskbank;

pub use backbone::{
    bce_loss, Backbone, BackboneConfig, BackboneError, InputKind, LabeledBatch, Layout,
    LayoutEntry, Mode, ParameterVector, Precision,
};
pub use ids::{AttributeId, ExampleId, SubjectId, TaskId};
pub use meta::{
    adapt, inner_update, meta_gradient, meta_train, EpisodeSource, GradientOrder, MetaConfig,
    MetaError, OuterOptimizer, ProgressRecord, ProgressSink, TaskEpisode,
};
pub use baseline::{
    merge_labels, train_baseline, BaselineError, BaselineHyper, BaselineRecord, MergedDataset,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, CheckpointTag,
};
pub use eval::{
    cross_bank_eval, evaluate_task, evaluate_task_traced, gradient_step_sweep, novel_attributes,
    run_loso, write_curve_csv, write_report_csv, write_report_json, CurvePoint, EvalConfig,
    EvalError, EvalReport, ReportRow, TaskEval,
};
pub use model::Model;
pub use synthgen::{generate_bank, generate_bank_with_truth, SynthConfig, SynthError, SynthTruth};
pub use taskbank::{
    all_tasks, binarize_intensity, enumerate_tasks, imbalance_stats, load_dataset,
    sample_adaptation_pair, sample_episode, write_manifest, AdaptationPair, BankEpisodeSource,
    Dataset, EpisodeOutcome, ExampleRecord, ImbalanceRow, SampledEpisode, SkipReason, SplitPlan,
    TaskBankError,
};
