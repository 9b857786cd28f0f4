//! On-disk bank format: a directory holding a small JSON header, two CSV
//! tables, and raw little-endian f32 payloads.
//!
//! ```text
//! bank/
//!   manifest.json        version, input kind, label mode, payload kind
//!   examples.csv         example_id,subject_id (payload row order)
//!   labels.csv           example_id,subject_id,attribute_id,value
//!   features.f32         one row per example       (payload = features)
//!   images/<id>.f32      one file per example      (payload = images)
//! ```
//!
//! Labels are either already binary or 0-5 intensities that get binarized
//! on load (nonzero is positive). Writing is deterministic: the same
//! dataset always produces byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binarize_intensity, Dataset, ExampleRecord, TaskBankError};
use crate::backbone::InputKind;
use crate::fsio::atomic_write;
use crate::ids::{AttributeId, ExampleId, SubjectId};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Binary,
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Features,
    Images,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    input_kind: InputKind,
    label_mode: LabelMode,
    payload: PayloadKind,
}

fn io_err(path: &Path, source: std::io::Error) -> TaskBankError {
    TaskBankError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> TaskBankError {
    TaskBankError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Image payloads become file names, so ids are restricted to a filesystem
/// safe alphabet.
fn check_filename_safe(id: &ExampleId, path: &Path) -> Result<(), TaskBankError> {
    let ok = !id.as_str().is_empty()
        && id
            .as_str()
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(parse_err(
            path,
            0,
            format!("example id {id:?} is not filesystem safe for image payloads"),
        ))
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, TaskBankError> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes = fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| parse_err(&manifest_path, e.line(), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(parse_err(
            &manifest_path,
            1,
            format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        ));
    }
    let input_len = manifest.input_kind.len();

    let examples_path = dir.join("examples.csv");
    let mut rows: Vec<(ExampleId, SubjectId)> = Vec::new();
    {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&examples_path)
            .map_err(|e| parse_err(&examples_path, 1, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| parse_err(&examples_path, 1, e.to_string()))?;
        if headers != vec!["example_id", "subject_id"] {
            return Err(parse_err(
                &examples_path,
                1,
                format!("expected header example_id,subject_id, got {headers:?}"),
            ));
        }
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(&examples_path, line, e.to_string()))?;
            if record.len() != 2 {
                return Err(parse_err(
                    &examples_path,
                    line,
                    format!("expected 2 columns, got {}", record.len()),
                ));
            }
            rows.push((record[0].into(), record[1].into()));
        }
    }
    if rows.is_empty() {
        return Err(parse_err(&examples_path, 2, "no examples listed"));
    }

    let mut examples = Vec::with_capacity(rows.len());
    match manifest.payload {
        PayloadKind::Features => {
            let feat_path = dir.join("features.f32");
            let bytes = fs::read(&feat_path).map_err(|e| io_err(&feat_path, e))?;
            let expected = rows.len() * input_len * 4;
            if bytes.len() != expected {
                return Err(parse_err(
                    &feat_path,
                    0,
                    format!(
                        "payload is {} bytes, expected {} ({} examples x {} values x 4)",
                        bytes.len(),
                        expected,
                        rows.len(),
                        input_len
                    ),
                ));
            }
            let mut values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            for (id, subject) in rows {
                let payload: Vec<f64> = values.by_ref().take(input_len).collect();
                check_finite(&payload, &id, &feat_path)?;
                examples.push(ExampleRecord {
                    id,
                    subject,
                    payload,
                });
            }
        }
        PayloadKind::Images => {
            for (id, subject) in rows {
                check_filename_safe(&id, &examples_path)?;
                let img_path = dir.join("images").join(format!("{id}.f32"));
                let bytes = fs::read(&img_path).map_err(|e| io_err(&img_path, e))?;
                if bytes.len() != input_len * 4 {
                    return Err(parse_err(
                        &img_path,
                        0,
                        format!(
                            "image is {} bytes, expected {} ({} values x 4)",
                            bytes.len(),
                            input_len * 4,
                            input_len
                        ),
                    ));
                }
                let payload: Vec<f64> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                check_finite(&payload, &id, &img_path)?;
                examples.push(ExampleRecord {
                    id,
                    subject,
                    payload,
                });
            }
        }
    }

    let labels_path = dir.join("labels.csv");
    let mut labels: Vec<(ExampleId, AttributeId, u8)> = Vec::new();
    {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&labels_path)
            .map_err(|e| parse_err(&labels_path, 1, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| parse_err(&labels_path, 1, e.to_string()))?;
        if headers != vec!["example_id", "subject_id", "attribute_id", "value"] {
            return Err(parse_err(
                &labels_path,
                1,
                format!("expected header example_id,subject_id,attribute_id,value, got {headers:?}"),
            ));
        }
        let subject_of: std::collections::HashMap<&str, &str> = examples
            .iter()
            .map(|r| (r.id.as_str(), r.subject.as_str()))
            .collect();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(&labels_path, line, e.to_string()))?;
            if record.len() != 4 {
                return Err(parse_err(
                    &labels_path,
                    line,
                    format!("expected 4 columns, got {}", record.len()),
                ));
            }
            let example_id = &record[0];
            let Some(&subject) = subject_of.get(example_id) else {
                return Err(parse_err(
                    &labels_path,
                    line,
                    format!("label references unknown example id {example_id:?}"),
                ));
            };
            if subject != &record[1] {
                return Err(parse_err(
                    &labels_path,
                    line,
                    format!(
                        "subject {:?} does not match example {:?} owned by {:?}",
                        &record[1], example_id, subject
                    ),
                ));
            }
            let raw: u8 = record[3].parse().map_err(|_| {
                parse_err(
                    &labels_path,
                    line,
                    format!("label value {:?} is not a small integer", &record[3]),
                )
            })?;
            let value = match manifest.label_mode {
                LabelMode::Binary => {
                    if raw > 1 {
                        return Err(parse_err(
                            &labels_path,
                            line,
                            format!("binary label value {raw} is not 0/1"),
                        ));
                    }
                    raw
                }
                LabelMode::Intensity => binarize_intensity(raw)
                    .map_err(|e| parse_err(&labels_path, line, e.to_string()))?,
            };
            labels.push((example_id.into(), record[2].into(), value));
        }
    }

    Dataset::new(manifest.input_kind, examples, labels).map_err(|e| match e {
        // Construction errors at load time get file context.
        TaskBankError::Invalid(msg) => parse_err(&labels_path, 0, msg),
        other => other,
    })
}

/// Writes the bank under `dir`. The same dataset always yields the same
/// bytes, so regeneration can be checked with a plain file compare.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<(), TaskBankError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let payload = match dataset.input_kind() {
        InputKind::Vector { .. } => PayloadKind::Features,
        InputKind::Image { .. } => PayloadKind::Images,
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        input_kind: dataset.input_kind(),
        label_mode: LabelMode::Binary,
        payload,
    };
    let manifest_path = dir.join("manifest.json");
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| parse_err(&manifest_path, 0, e.to_string()))?;
    manifest_bytes.push(b'\n');
    atomic_write(&manifest_path, &manifest_bytes).map_err(|e| io_err(&manifest_path, e))?;

    let examples_path = dir.join("examples.csv");
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["example_id", "subject_id"]).unwrap();
        for e in 0..dataset.len() {
            if payload == PayloadKind::Images {
                check_filename_safe(dataset.example_id(e), &examples_path)?;
            }
            w.write_record([
                dataset.example_id(e).as_str(),
                dataset.subject_of(e).as_str(),
            ])
            .unwrap();
        }
        let bytes = w.into_inner().expect("csv into Vec cannot fail");
        atomic_write(&examples_path, &bytes).map_err(|e| io_err(&examples_path, e))?;
    }

    let labels_path = dir.join("labels.csv");
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["example_id", "subject_id", "attribute_id", "value"])
            .unwrap();
        for e in 0..dataset.len() {
            for (a, aid) in dataset.attributes().iter().enumerate() {
                if let Some(value) = dataset.label_by_index(e, a) {
                    w.write_record([
                        dataset.example_id(e).as_str(),
                        dataset.subject_of(e).as_str(),
                        aid.as_str(),
                        if value == 1 { "1" } else { "0" },
                    ])
                    .unwrap();
                }
            }
        }
        let bytes = w.into_inner().expect("csv into Vec cannot fail");
        atomic_write(&labels_path, &bytes).map_err(|e| io_err(&labels_path, e))?;
    }

    match payload {
        PayloadKind::Features => {
            let feat_path = dir.join("features.f32");
            let mut bytes = Vec::with_capacity(dataset.len() * dataset.input_kind().len() * 4);
            for e in 0..dataset.len() {
                for &v in dataset.payload(e) {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            atomic_write(&feat_path, &bytes).map_err(|e| io_err(&feat_path, e))?;
        }
        PayloadKind::Images => {
            for e in 0..dataset.len() {
                let img_path = dir
                    .join("images")
                    .join(format!("{}.f32", dataset.example_id(e)));
                let mut bytes = Vec::with_capacity(dataset.input_kind().len() * 4);
                for &v in dataset.payload(e) {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
                atomic_write(&img_path, &bytes).map_err(|e| io_err(&img_path, e))?;
            }
        }
    }
    Ok(())
}

fn check_finite(payload: &[f64], id: &ExampleId, path: &Path) -> Result<(), TaskBankError> {
    if payload.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(parse_err(
            path,
            0,
            format!("example {id} payload contains a non-finite value"),
        ))
    }
}
