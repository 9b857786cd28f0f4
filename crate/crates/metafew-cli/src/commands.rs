//! The four commands. Each echoes the resolved config into its output
//! directory and writes every artifact atomically, so an interrupted run
//! never leaves a half-written file behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metafew::backbone::{Backbone, BackboneConfig, ParameterVector};
use metafew::baseline::{merge_labels, train_baseline, BaselineHyper, BaselineRecord};
use metafew::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CheckpointTag};
use metafew::eval::{
    cross_bank_eval, gradient_step_sweep, novel_attributes, run_loso, write_curve_csv,
    write_report_csv, write_report_json, EvalReport,
};
use metafew::fsio::atomic_write;
use metafew::ids::SubjectId;
use metafew::meta::{meta_train, ProgressRecord, ProgressSink};
use metafew::synthgen::generate_bank;
use metafew::taskbank::{
    all_tasks, enumerate_tasks, imbalance_stats, load_dataset, write_manifest, BankEpisodeSource,
    Dataset,
};

use crate::config::{echo_config, RunConfig};

pub fn cmd_synth(config: &RunConfig, workdir: &Path) -> Result<()> {
    let dir = config.manifest_dir(workdir);
    let bank = generate_bank(&config.synth).context("generating bank")?;
    write_manifest(&bank, &dir)
        .with_context(|| format!("writing manifest into {}", dir.display()))?;
    echo_config(config, &dir)?;
    println!(
        "wrote bank: {} subjects x {} attributes, {} examples, {} labels -> {}",
        bank.subjects().len(),
        bank.attributes().len(),
        bank.len(),
        bank.label_count(),
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    Meta,
    Baseline,
}

/// `all` trains one checkpoint per held-out subject, `none` trains a single
/// checkpoint on every task (for cross-bank use), a subject id trains that
/// one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fold {
    All,
    None,
    Subject(SubjectId),
}

impl std::str::FromStr for Fold {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => Fold::All,
            "none" => Fold::None,
            other => Fold::Subject(SubjectId::new(other)),
        })
    }
}

/// Buffers progress records and flushes them as one JSON-lines file.
struct JsonlSink {
    lines: String,
    path: PathBuf,
}

impl JsonlSink {
    fn new(path: PathBuf) -> Self {
        Self {
            lines: String::new(),
            path,
        }
    }

    fn push<T: serde::Serialize>(&mut self, record: &T) {
        let line = serde_json::to_string(record).expect("progress records serialize");
        self.lines.push_str(&line);
        self.lines.push('\n');
    }

    fn flush(&self) -> Result<()> {
        atomic_write(&self.path, self.lines.as_bytes())
            .with_context(|| format!("writing progress log {}", self.path.display()))?;
        Ok(())
    }
}

impl ProgressSink for JsonlSink {
    fn record(&mut self, rec: &ProgressRecord) {
        self.push(rec);
    }
}

fn held_out_subjects(dataset: &Dataset, fold: &Fold) -> Result<Vec<Option<SubjectId>>> {
    Ok(match fold {
        Fold::All => dataset.subjects().iter().cloned().map(Some).collect(),
        Fold::None => vec![None],
        Fold::Subject(s) => {
            if !dataset.subjects().contains(s) {
                bail!("fold {s} is not a subject of the dataset");
            }
            vec![Some(s.clone())]
        }
    })
}

/// meta_fold_<subject>.ckpt / meta_full.ckpt, and the baseline twins.
fn checkpoint_name(mode: TrainMode, held_out: Option<&SubjectId>) -> String {
    let prefix = match mode {
        TrainMode::Meta => "meta",
        TrainMode::Baseline => "baseline",
    };
    match held_out {
        Some(s) => format!("{prefix}_fold_{s}.ckpt"),
        None => format!("{prefix}_full.ckpt"),
    }
}

pub fn cmd_train(config: &RunConfig, workdir: &Path, mode: TrainMode, fold: &Fold) -> Result<()> {
    let manifest = config.manifest_dir(workdir);
    let dataset = load_dataset(&manifest)
        .with_context(|| format!("loading dataset from {}", manifest.display()))?;
    let backbone_config = config.backbone.resolve(dataset.input_kind())?;
    let ckpt_dir = config.checkpoint_dir(workdir);
    std::fs::create_dir_all(&ckpt_dir)
        .with_context(|| format!("creating {}", ckpt_dir.display()))?;

    for held_out in held_out_subjects(&dataset, fold)? {
        let name = checkpoint_name(mode, held_out.as_ref());
        let stem = name.trim_end_matches(".ckpt");
        let mut sink = JsonlSink::new(ckpt_dir.join(format!("{stem}.progress.jsonl")));
        let params = match mode {
            TrainMode::Meta => train_meta_fold(
                config,
                &backbone_config,
                &dataset,
                held_out.as_ref(),
                &mut sink,
            )?,
            TrainMode::Baseline => train_baseline_fold(
                config,
                &backbone_config,
                &dataset,
                held_out.as_ref(),
                &mut sink,
            )?,
        };
        sink.flush()?;
        let meta = CheckpointMeta {
            tag: match mode {
                TrainMode::Meta => CheckpointTag::Meta,
                TrainMode::Baseline => CheckpointTag::Baseline,
            },
            backbone: backbone_config.clone(),
            training_attributes: dataset.attributes().to_vec(),
            held_out_subject: held_out.clone(),
        };
        let path = ckpt_dir.join(&name);
        save_checkpoint(&path, &params, &meta)
            .with_context(|| format!("saving {}", path.display()))?;
        println!("wrote checkpoint {}", path.display());
    }
    echo_config(config, &ckpt_dir)?;
    Ok(())
}

fn train_meta_fold(
    config: &RunConfig,
    backbone_config: &BackboneConfig,
    dataset: &Dataset,
    held_out: Option<&SubjectId>,
    sink: &mut JsonlSink,
) -> Result<ParameterVector> {
    let tasks = match held_out {
        Some(s) => enumerate_tasks(dataset, s)?.train_tasks,
        None => all_tasks(dataset),
    };
    let source = BankEpisodeSource::new(dataset, &tasks, config.meta.shots_train)?;
    for skip in source.skipped_tasks() {
        eprintln!(
            "skipping task {}: short {} positives, {} negatives",
            skip.task, skip.positive_deficit, skip.negative_deficit
        );
    }
    Ok(meta_train(backbone_config, &config.meta, &source, sink)?)
}

fn train_baseline_fold(
    config: &RunConfig,
    backbone_config: &BackboneConfig,
    dataset: &Dataset,
    held_out: Option<&SubjectId>,
    sink: &mut JsonlSink,
) -> Result<ParameterVector> {
    let train_bank;
    let train_view = match held_out {
        Some(s) => {
            let keep: Vec<SubjectId> = dataset
                .subjects()
                .iter()
                .filter(|x| *x != s)
                .cloned()
                .collect();
            if keep.is_empty() {
                bail!("cannot hold out {s}: it is the only subject");
            }
            train_bank = dataset.restrict_subjects(&keep)?;
            &train_bank
        }
        None => dataset,
    };
    let merged = merge_labels(train_view, dataset.attributes())?;
    let hyper = BaselineHyper {
        beta: config.meta.beta,
        iterations: config.baseline_parity_iterations(dataset.attributes().len()),
        shots: config.meta.shots_train,
        outer_optimizer: config.meta.outer_optimizer,
        seed: config.meta.seed,
    };
    let params = train_baseline(backbone_config, &merged, &hyper, |rec: &BaselineRecord| {
        sink.push(rec)
    })?;
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Protocol {
    Loso,
    CrossBank,
    Sweep,
}

fn load_pair(
    backbone: &Backbone,
    ckpt_dir: &Path,
    mode: TrainMode,
    held_out: Option<&SubjectId>,
) -> Result<(ParameterVector, CheckpointMeta)> {
    let path = ckpt_dir.join(checkpoint_name(mode, held_out));
    let (params, meta) =
        load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    if meta.backbone != *backbone.config() {
        bail!(
            "checkpoint {} was trained with a different backbone configuration",
            path.display()
        );
    }
    Ok((params, meta))
}

pub fn cmd_eval(config: &RunConfig, workdir: &Path, protocol: Protocol) -> Result<()> {
    let manifest = config.manifest_dir(workdir);
    let dataset = load_dataset(&manifest)
        .with_context(|| format!("loading dataset from {}", manifest.display()))?;
    let backbone_config = config.backbone.resolve(dataset.input_kind())?;
    let backbone = Backbone::new(backbone_config)?;
    let ckpt_dir = config.checkpoint_dir(workdir);
    let report_dir = config.report_dir(workdir);
    std::fs::create_dir_all(&report_dir)
        .with_context(|| format!("creating {}", report_dir.display()))?;

    match protocol {
        Protocol::Loso => {
            let mut meta_thetas: BTreeMap<SubjectId, ParameterVector> = BTreeMap::new();
            let mut base_thetas: BTreeMap<SubjectId, ParameterVector> = BTreeMap::new();
            for subject in dataset.subjects() {
                let (m, _) = load_pair(&backbone, &ckpt_dir, TrainMode::Meta, Some(subject))?;
                let (b, _) = load_pair(&backbone, &ckpt_dir, TrainMode::Baseline, Some(subject))?;
                meta_thetas.insert(subject.clone(), m);
                base_thetas.insert(subject.clone(), b);
            }
            let (meta_report, base_report) =
                run_loso(&backbone, &dataset, &meta_thetas, &base_thetas, &config.eval)?;
            write_reports(&meta_report, &report_dir, "meta")?;
            write_reports(&base_report, &report_dir, "baseline")?;
            write_summary(&meta_report, &base_report, &report_dir)?;
            print_grand("loso", &meta_report, &base_report, &config.eval.k_values);
        }
        Protocol::CrossBank => {
            let (meta_theta, meta_meta) = load_pair(&backbone, &ckpt_dir, TrainMode::Meta, None)?;
            let (base_theta, base_meta) =
                load_pair(&backbone, &ckpt_dir, TrainMode::Baseline, None)?;
            let meta_report = cross_bank_eval(
                &backbone,
                &meta_theta,
                &dataset,
                &novel_attributes(&dataset, &meta_meta.training_attributes),
                &config.eval,
            )?;
            let base_report = cross_bank_eval(
                &backbone,
                &base_theta,
                &dataset,
                &novel_attributes(&dataset, &base_meta.training_attributes),
                &config.eval,
            )?;
            write_reports(&meta_report, &report_dir, "meta")?;
            write_reports(&base_report, &report_dir, "baseline")?;
            write_summary(&meta_report, &base_report, &report_dir)?;
            print_grand("cross-bank", &meta_report, &base_report, &config.eval.k_values);
        }
        Protocol::Sweep => {
            let tasks = all_tasks(&dataset);
            for (mode, name) in [(TrainMode::Meta, "meta"), (TrainMode::Baseline, "baseline")] {
                let (theta, _) = load_pair(&backbone, &ckpt_dir, mode, None)?;
                let curve = gradient_step_sweep(
                    &backbone,
                    &theta,
                    &dataset,
                    &tasks,
                    &config.eval.k_values,
                    config.eval.steps,
                    &config.eval,
                )?;
                let path = report_dir.join(format!("{name}_curve.csv"));
                write_curve_csv(&curve, &path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    echo_config(config, &report_dir)?;
    Ok(())
}

fn write_reports(report: &EvalReport, dir: &Path, name: &str) -> Result<()> {
    let csv = dir.join(format!("{name}_report.csv"));
    let json = dir.join(format!("{name}_report.json"));
    write_report_csv(report, &csv)?;
    write_report_json(report, &json)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

/// Per-attribute comparison table: one row per (attribute, K) plus an
/// average row per K, meta and baseline side by side.
fn write_summary(meta: &EvalReport, baseline: &EvalReport, dir: &Path) -> Result<()> {
    let mut text = String::from("attribute,K,meta_acc,baseline_acc\n");
    for m in &meta.per_attribute {
        let b = baseline
            .per_attribute
            .iter()
            .find(|b| b.attribute == m.attribute && b.k == m.k)
            .context("baseline report covers the same attributes")?;
        writeln!(
            text,
            "{},{},{:.6},{:.6}",
            m.attribute, m.k, m.mean_acc, b.mean_acc
        )
        .expect("writing to String cannot fail");
    }
    for g in &meta.grand {
        let b = baseline
            .grand
            .iter()
            .find(|b| b.k == g.k)
            .context("baseline report covers the same K values")?;
        writeln!(text, "AVG,{},{:.6},{:.6}", g.k, g.mean_acc, b.mean_acc)
            .expect("writing to String cannot fail");
    }
    let path = dir.join("summary.csv");
    atomic_write(&path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_grand(label: &str, meta: &EvalReport, baseline: &EvalReport, k_values: &[usize]) {
    for &k in k_values {
        let m = meta.grand_mean(k).unwrap_or(f64::NAN);
        let b = baseline.grand_mean(k).unwrap_or(f64::NAN);
        println!("{label} K={k}: meta {m:.4}, baseline {b:.4}, gap {:+.4}", m - b);
    }
}

pub fn cmd_stats(config: &RunConfig, workdir: &Path) -> Result<()> {
    let manifest = config.manifest_dir(workdir);
    let dataset = load_dataset(&manifest)
        .with_context(|| format!("loading dataset from {}", manifest.display()))?;
    let report_dir = config.report_dir(workdir);
    std::fs::create_dir_all(&report_dir)
        .with_context(|| format!("creating {}", report_dir.display()))?;
    let mut text = String::from("subject,attribute,positives,labeled,fraction\n");
    for row in imbalance_stats(&dataset) {
        writeln!(
            text,
            "{},{},{},{},{:.6}",
            row.subject, row.attribute, row.positives, row.labeled, row.fraction
        )
        .expect("writing to String cannot fail");
    }
    let path = report_dir.join("stats.csv");
    atomic_write(&path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    echo_config(config, &report_dir)?;
    println!("wrote {}", path.display());
    Ok(())
}
