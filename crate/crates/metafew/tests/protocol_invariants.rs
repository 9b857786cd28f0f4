//! End-to-end protocol audits on small banks: class balance, support/query
//! and support/eval disjointness, held-out-subject isolation, aggregate
//! recounts, and byte-level replay of the whole pipeline.

mod common;

use std::collections::{BTreeMap, HashSet};

use metafew::backbone::{Backbone, BackboneConfig, ParameterVector, Precision};
use metafew::eval::{evaluate_task_traced, run_loso, write_report_csv, EvalConfig};
use metafew::ids::{SubjectId, TaskId};
use metafew::meta::{meta_train, MetaConfig, NullSink};
use metafew::rngutil::{hash_str, stream};
use metafew::synthgen::{generate_bank, SynthConfig};
use metafew::taskbank::{
    enumerate_tasks, write_manifest, BankEpisodeSource, Dataset,
};

fn small_bank() -> Dataset {
    let config = SynthConfig {
        n_subjects: 4,
        n_attributes: 3,
        examples_per_subject: 40,
        feature_dim: 5,
        positive_rate_range: [0.25, 0.45],
        seed: 21,
        ..SynthConfig::default()
    };
    generate_bank(&config).unwrap()
}

fn small_backbone() -> BackboneConfig {
    let mut cfg = BackboneConfig::vector(5);
    cfg.conv_channels = vec![6];
    cfg.precision = Precision::F64;
    cfg
}

#[test]
fn training_episodes_respect_balance_labels_and_fold_isolation() {
    let bank = small_bank();
    let held_out = SubjectId::new("subj0");
    let plan = enumerate_tasks(&bank, &held_out).unwrap();
    assert_eq!(plan.train_tasks.len(), 9);
    assert_eq!(plan.test_tasks.len(), 3);
    let shots = 5;
    let source = BankEpisodeSource::new(&bank, &plan.train_tasks, shots).unwrap();
    let train_set: HashSet<&TaskId> = plan.train_tasks.iter().collect();
    for i in 0..50u64 {
        let mut rng = stream(3, &[hash_str("audit"), i]);
        let batch = source.sample_audited(3, &mut rng).unwrap();
        assert_eq!(batch.len(), 3);
        for sampled in &batch {
            let task = &sampled.episode.task;
            assert!(train_set.contains(task), "sampled task must be a training task");
            assert_ne!(task.subject, held_out, "held-out subject must never be trained on");
            let ids: Vec<_> = sampled
                .support_ids
                .iter()
                .chain(&sampled.query_ids)
                .collect();
            let distinct: HashSet<_> = ids.iter().collect();
            assert_eq!(distinct.len(), 4 * shots, "episode examples must be distinct");
            for (batch, batch_ids) in [
                (&sampled.episode.support, &sampled.support_ids),
                (&sampled.episode.query, &sampled.query_ids),
            ] {
                assert_eq!(batch.len(), 2 * shots);
                let pos = batch.labels().iter().filter(|&&y| y == 1).count();
                assert_eq!(pos, shots, "each set holds the same count of each class");
                for (id, &y) in batch_ids.iter().zip(batch.labels()) {
                    assert_eq!(
                        bank.label(id, &task.attribute),
                        Some(y),
                        "batch label must be the bank's label for {id:?}"
                    );
                    let idx = (0..bank.len()).position(|e| bank.example_id(e) == id).unwrap();
                    assert_eq!(bank.subject_of(idx), &task.subject);
                }
            }
        }
    }
}

#[test]
fn adaptation_draws_keep_support_and_eval_apart_inside_the_fold() {
    let bank = small_bank();
    let backbone = Backbone::new(small_backbone()).unwrap();
    let theta = backbone.init_params(9);
    let config = EvalConfig {
        repetitions: 25,
        eval_per_class: 4,
        steps: 3,
        seed: 5,
        ..EvalConfig::default()
    };
    for subject in bank.subjects() {
        for attribute in bank.attributes() {
            let task = TaskId::new(subject.as_str(), attribute.as_str());
            let (_, traces) =
                evaluate_task_traced(&backbone, &theta, &bank, &task, 2, &config).unwrap();
            assert_eq!(traces.len(), config.repetitions);
            for trace in &traces {
                let support: HashSet<_> = trace.support_ids.iter().collect();
                let eval: HashSet<_> = trace.eval_ids.iter().collect();
                assert!(
                    support.is_disjoint(&eval),
                    "support and evaluation examples must not overlap"
                );
                for id in trace.support_ids.iter().chain(&trace.eval_ids) {
                    let idx = (0..bank.len()).position(|e| bank.example_id(e) == id).unwrap();
                    assert_eq!(
                        bank.subject_of(idx),
                        subject,
                        "adaptation must only touch the task's own subject"
                    );
                }
                for (id, &y) in trace.eval_ids.iter().zip(&trace.labels) {
                    assert_eq!(bank.label(id, attribute), Some(y));
                }
            }
        }
    }
}

#[test]
fn report_aggregates_recount_from_rows() {
    let bank = small_bank();
    let backbone = Backbone::new(small_backbone()).unwrap();
    let config = EvalConfig {
        k_values: vec![1, 2],
        repetitions: 10,
        eval_per_class: 4,
        steps: 2,
        seed: 7,
        ..EvalConfig::default()
    };
    let thetas: BTreeMap<SubjectId, ParameterVector> = bank
        .subjects()
        .iter()
        .map(|s| (s.clone(), backbone.init_params(11)))
        .collect();
    let (report, _) = run_loso(&backbone, &bank, &thetas, &thetas, &config).unwrap();
    // 4 subjects x 3 attributes x 2 values of K.
    assert_eq!(report.rows.len(), 24);
    for agg in &report.per_attribute {
        let matching: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.task.attribute == agg.attribute && r.k == agg.k)
            .map(|r| r.mean_acc)
            .collect();
        assert_eq!(matching.len(), agg.n_tasks);
        let mean = matching.iter().sum::<f64>() / matching.len() as f64;
        assert!((mean - agg.mean_acc).abs() < 1e-12);
    }
    for agg in &report.per_subject {
        let matching: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.task.subject == agg.subject && r.k == agg.k)
            .map(|r| r.mean_acc)
            .collect();
        assert_eq!(matching.len(), agg.n_tasks);
        let mean = matching.iter().sum::<f64>() / matching.len() as f64;
        assert!((mean - agg.mean_acc).abs() < 1e-12);
    }
    for agg in &report.grand {
        let matching: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.k == agg.k)
            .map(|r| r.mean_acc)
            .collect();
        assert_eq!(matching.len(), agg.n_tasks);
        assert_eq!(agg.n_tasks, 12);
        let mean = matching.iter().sum::<f64>() / matching.len() as f64;
        assert!((mean - agg.mean_acc).abs() < 1e-12);
    }
}

#[test]
fn whole_pipeline_replays_byte_for_byte() {
    let bank = small_bank();
    let tmp = tempfile::tempdir().unwrap();

    // Bank export is stable.
    let dir_a = tmp.path().join("bank_a");
    let dir_b = tmp.path().join("bank_b");
    write_manifest(&bank, &dir_a).unwrap();
    write_manifest(&generate_bank(&SynthConfig {
        n_subjects: 4,
        n_attributes: 3,
        examples_per_subject: 40,
        feature_dim: 5,
        positive_rate_range: [0.25, 0.45],
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap(), &dir_b)
    .unwrap();
    for name in ["manifest.json", "examples.csv", "labels.csv", "features.f32"] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} must replay byte for byte");
    }

    // Training at f64 is bit-reproducible.
    let held_out = SubjectId::new("subj1");
    let plan = enumerate_tasks(&bank, &held_out).unwrap();
    let meta = MetaConfig {
        meta_iterations: 12,
        shots_train: 3,
        seed: 4,
        ..MetaConfig::default()
    };
    let backbone_config = small_backbone();
    let run = || {
        let source = BankEpisodeSource::new(&bank, &plan.train_tasks, meta.shots_train).unwrap();
        meta_train(&backbone_config, &meta, &source, &mut NullSink).unwrap()
    };
    let theta_a = run();
    let theta_b = run();
    assert_eq!(theta_a.values(), theta_b.values());

    // Reports serialize identically across runs.
    let backbone = Backbone::new(backbone_config).unwrap();
    let config = EvalConfig {
        k_values: vec![1],
        repetitions: 8,
        eval_per_class: 3,
        steps: 2,
        seed: 2,
        ..EvalConfig::default()
    };
    let thetas: BTreeMap<SubjectId, ParameterVector> = bank
        .subjects()
        .iter()
        .map(|s| (s.clone(), theta_a.clone()))
        .collect();
    let csv_a = tmp.path().join("a.csv");
    let csv_b = tmp.path().join("b.csv");
    let (report_a, _) = run_loso(&backbone, &bank, &thetas, &thetas, &config).unwrap();
    let (report_b, _) = run_loso(&backbone, &bank, &thetas, &thetas, &config).unwrap();
    write_report_csv(&report_a, &csv_a).unwrap();
    write_report_csv(&report_b, &csv_b).unwrap();
    assert_eq!(
        std::fs::read(csv_a).unwrap(),
        std::fs::read(csv_b).unwrap()
    );
}
