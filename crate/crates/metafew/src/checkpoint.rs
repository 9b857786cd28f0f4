//! Trained-parameter persistence.
//!
//! A checkpoint is two files: `<name>.ckpt` holding the raw parameter
//! vector, and `<name>.toml` describing where it came from. The binary
//! format is little-endian throughout:
//!
//! ```text
//! magic "MFCP" | version u32 | n_entries u32
//! per entry: name_len u16, name bytes, offset u64, len u64
//! total u64 | values f64 * total
//! ```
//!
//! The sidecar carries the model tag (meta or baseline), the full backbone
//! config, the training attribute list, the held-out subject if any, and a
//! sha256 of the value bytes. Loading rebuilds the layout from the header,
//! revalidates offsets, checks the hash, and cross-checks the layout digest
//! against one freshly derived from the sidecar's backbone config, so a
//! checkpoint can never silently pair with the wrong architecture.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, Layout, ParameterVector};
use crate::fsio::atomic_write;
use crate::ids::{AttributeId, SubjectId};

const MAGIC: &[u8; 4] = b"MFCP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: value bytes do not match the sidecar sha256")]
    HashMismatch { path: String },
    #[error("{path}: parameters do not fit the sidecar backbone config")]
    ConfigMismatch { path: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointTag {
    Meta,
    Baseline,
}

/// Provenance stored next to the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub tag: CheckpointTag,
    pub backbone: BackboneConfig,
    pub training_attributes: Vec<AttributeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_subject: Option<SubjectId>,
}

/// Field order keeps plain values ahead of the backbone table, as the TOML
/// serializer requires.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    tag: CheckpointTag,
    training_attributes: Vec<AttributeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    held_out_subject: Option<SubjectId>,
    values_sha256: String,
    backbone: BackboneConfig,
}

impl Sidecar {
    fn from_meta(meta: &CheckpointMeta, values_sha256: String) -> Self {
        Self {
            tag: meta.tag,
            training_attributes: meta.training_attributes.clone(),
            held_out_subject: meta.held_out_subject.clone(),
            values_sha256,
            backbone: meta.backbone.clone(),
        }
    }

    fn into_meta(self) -> (CheckpointMeta, String) {
        (
            CheckpointMeta {
                tag: self.tag,
                backbone: self.backbone,
                training_attributes: self.training_attributes,
                held_out_subject: self.held_out_subject,
            },
            self.values_sha256,
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("toml")
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterVector,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let layout = params.layout();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(layout.entries().len() as u32).to_le_bytes());
    for entry in layout.entries() {
        let name = entry.name.as_bytes();
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.extend_from_slice(&(entry.offset as u64).to_le_bytes());
        bytes.extend_from_slice(&(entry.len as u64).to_le_bytes());
    }
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let values_start = bytes.len();
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let sha = hex_sha256(&bytes[values_start..]);
    atomic_write(path, &bytes).map_err(io_err(path))?;

    let sidecar = Sidecar::from_meta(meta, sha);
    let side = sidecar_path(path);
    let text = toml::to_string_pretty(&sidecar).expect("sidecar serializes");
    atomic_write(&side, text.as_bytes()).map_err(io_err(&side))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterVector, CheckpointMeta), CheckpointError> {
    let side = sidecar_path(path);
    let side_text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: Sidecar =
        toml::from_str(&side_text).map_err(|e| format_err(&side, e.to_string()))?;
    let (meta, values_sha256) = sidecar.into_meta();

    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(format_err(path, "bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let n_entries = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_entries);
    let mut offsets = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err(path, "entry name is not utf-8"))?
            .to_owned();
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        shapes.push((name, len));
        offsets.push(offset);
    }
    let total = r.u64()? as usize;
    let layout = Layout::new(shapes);
    if layout.total_len() != total {
        return Err(format_err(
            path,
            format!(
                "entry lengths sum to {} but total field says {total}",
                layout.total_len()
            ),
        ));
    }
    for (entry, &stored) in layout.entries().iter().zip(&offsets) {
        if entry.offset != stored {
            return Err(format_err(
                path,
                format!(
                    "entry {} offset {} does not match recomputed {}",
                    entry.name, stored, entry.offset
                ),
            ));
        }
    }
    let value_bytes = r.take(total * 8)?;
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after values"));
    }
    if hex_sha256(value_bytes) != values_sha256 {
        return Err(CheckpointError::HashMismatch {
            path: path.display().to_string(),
        });
    }
    let values: Vec<f64> = value_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = ParameterVector::from_values(Arc::new(layout), values)?;

    // The sidecar's config must produce this exact layout.
    let backbone = Backbone::new(meta.backbone.clone())?;
    if backbone.layout().digest() != params.layout().digest() {
        return Err(CheckpointError::ConfigMismatch {
            path: path.display().to_string(),
        });
    }
    Ok((params, meta))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.path, "file truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
