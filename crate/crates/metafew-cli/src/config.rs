//! Run configuration: one TOML file with a section per module, every field
//! optional, unknown keys fatal. `--set section.key=value` flags edit the
//! parsed document before validation, so overrides go through the same
//! schema as the file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use metafew::backbone::{BackboneConfig, InputKind, Precision};
use metafew::eval::EvalConfig;
use metafew::meta::MetaConfig;
use metafew::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};

/// Backbone section: the full backbone schema with the input shape optional,
/// since it is normally taken from the dataset being loaded.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub input_kind: Option<InputKind>,
    pub conv_channels: Option<Vec<usize>>,
    pub kernel_size: Option<usize>,
    pub pool_size: Option<usize>,
    pub use_batchnorm: Option<bool>,
    pub fc_output_dim: Option<usize>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

impl BackboneSection {
    /// Concrete config, falling back to the dataset's input shape and the
    /// module defaults for everything unset.
    pub fn resolve(&self, dataset_kind: InputKind) -> Result<BackboneConfig> {
        let kind = self.input_kind.unwrap_or(dataset_kind);
        if kind != dataset_kind {
            bail!(
                "configured backbone input shape {kind:?} does not match the dataset's {dataset_kind:?}"
            );
        }
        let mut cfg = match kind {
            InputKind::Image {
                height,
                width,
                channels,
            } => BackboneConfig::image(height, width, channels),
            InputKind::Vector { dim } => BackboneConfig::vector(dim),
        };
        if let Some(c) = &self.conv_channels {
            cfg.conv_channels = c.clone();
        }
        if let Some(k) = self.kernel_size {
            cfg.kernel_size = k;
        }
        if let Some(p) = self.pool_size {
            cfg.pool_size = p;
        }
        if let Some(b) = self.use_batchnorm {
            cfg.use_batchnorm = b;
        }
        if let Some(f) = self.fc_output_dim {
            cfg.fc_output_dim = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        Ok(cfg)
    }
}

fn default_manifest() -> PathBuf {
    PathBuf::from("bank")
}
fn default_checkpoints() -> PathBuf {
    PathBuf::from("checkpoints")
}
fn default_reports() -> PathBuf {
    PathBuf::from("reports")
}

/// Artifact locations, each resolved relative to the working directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: default_manifest(),
            checkpoints: default_checkpoints(),
            reports: default_reports(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Gradient steps granted to the baseline: one per inner and outer step
    /// the meta run takes, summed over its task batches.
    pub fn baseline_parity_iterations(&self, n_attributes: usize) -> usize {
        let batch = self.meta.meta_batch_size.unwrap_or(n_attributes);
        self.meta.meta_iterations * batch * (self.meta.inner_steps_train + 1)
    }

    pub fn manifest_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.paths.manifest)
    }

    pub fn checkpoint_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.paths.checkpoints)
    }

    pub fn report_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.paths.reports)
    }
}

/// Parses the file (or starts from defaults), applies `--set` edits, then
/// deserializes with unknown keys rejected and validates every section that
/// has invariants.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for set in sets {
        apply_set(&mut doc, set)?;
    }
    let config: RunConfig = doc
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))?;
    config.meta.validate().context("meta section")?;
    config.eval.validate().context("eval section")?;
    config.synth.validate().context("synth section")?;
    Ok(config)
}

/// `section.key=value` (arbitrarily deep). The value is parsed as TOML when
/// possible and falls back to a plain string.
fn apply_set(doc: &mut toml::Value, set: &str) -> Result<()> {
    let (dotted, raw) = set
        .split_once('=')
        .ok_or_else(|| anyhow!("--set takes section.key=value, got {set:?}"))?;
    let segments: Vec<&str> = dotted.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("--set key must be a dotted path, got {dotted:?}");
    }
    let value = parse_value(raw);
    let mut node = doc;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("--set {dotted}: {seg} is not a section"))?
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(toml::map::Map::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| anyhow!("--set {dotted}: parent is not a section"))?
        .insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("key v was just parsed"),
        _ => toml::Value::String(raw.to_string()),
    }
}

/// Serializes the resolved config next to a command's outputs so a run can
/// be replayed without the original invocation.
pub fn echo_config(config: &RunConfig, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(config).context("serializing resolved config")?;
    metafew::fsio::atomic_write(&dir.join("config.resolved.toml"), text.as_bytes())
        .with_context(|| format!("writing resolved config into {}", dir.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let config = load_config(None, &[]).unwrap();
        assert_eq!(config.meta.alpha, 0.03);
        assert_eq!(config.eval.k_values, vec![1, 5]);
        assert_eq!(config.synth.n_subjects, 8);
        assert_eq!(config.paths.manifest, PathBuf::from("bank"));
    }

    #[test]
    fn set_overrides_types_and_nesting() {
        let config = load_config(
            None,
            &[
                "meta.alpha=0.25".into(),
                "meta.meta_iterations=7".into(),
                "eval.k_values=[2, 3]".into(),
                "paths.manifest=elsewhere".into(),
                "backbone.conv_channels=[4]".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.meta.alpha, 0.25);
        assert_eq!(config.meta.meta_iterations, 7);
        assert_eq!(config.eval.k_values, vec![2, 3]);
        assert_eq!(config.paths.manifest, PathBuf::from("elsewhere"));
        assert_eq!(config.backbone.conv_channels.as_deref(), Some(&[4][..]));
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let err = load_config(None, &["meta.alhpa=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("invalid config"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = load_config(None, &["synth.positive_rate_range=[0.9, 0.1]".into()])
            .unwrap_err();
        assert!(format!("{err:#}").contains("positive_rate_range"), "{err:#}");
    }

    #[test]
    fn parity_budget_counts_inner_and_outer_steps() {
        let config = load_config(None, &["meta.meta_iterations=100".into()]).unwrap();
        // batch defaults to one per attribute; 1 inner + 1 outer step each.
        assert_eq!(config.baseline_parity_iterations(6), 1200);
    }

    #[test]
    fn backbone_section_must_match_dataset_shape() {
        let section = BackboneSection {
            input_kind: Some(InputKind::Vector { dim: 3 }),
            ..BackboneSection::default()
        };
        assert!(section.resolve(InputKind::Vector { dim: 4 }).is_err());
        let ok = section.resolve(InputKind::Vector { dim: 3 }).unwrap();
        assert_eq!(ok.conv_channels, vec![64, 48, 32, 16]);
    }
}
