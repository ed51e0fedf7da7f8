//! JSON-lines dataset manifest.
//!
//! One record per line:
//!
//! ```text
//! {"id":"s0001","reference":{"image":"s0001/ref.png"},"frames":["s0001/01.png",...],
//!  "scores":{"consistency":7.3,...},"split":"train","source":"synthetic","style":2}
//! ```
//!
//! Paths are relative to the manifest's directory. `style` is an optional
//! hint for style embedders that can use one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scores::AttributeScores;
use crate::error::{Error, Result};
use crate::vision::Frame;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Image(String),
    Prompt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSample {
    pub id: String,
    pub reference: Reference,
    pub frames: Vec<String>,
    pub scores: AttributeScores,
    pub split: Split,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<usize>,
}

/// Frames and reference of one sample, read from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub frames: Vec<Frame>,
    pub reference: LoadedReference,
}

#[derive(Clone, Debug)]
pub enum LoadedReference {
    Image(Frame),
    Prompt(String),
}

impl ProcessSample {
    pub fn load(&self, base: &Path) -> Result<LoadedSample> {
        let frames = self
            .frames
            .iter()
            .map(|p| Frame::load(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = frames.iter().find(|f| f.dims() != frames[0].dims()) {
            return Err(Error::Contract(format!(
                "sample {}: frame sizes differ ({:?} vs {:?})",
                self.id,
                f.dims(),
                frames[0].dims()
            )));
        }
        let reference = match &self.reference {
            Reference::Image(p) => LoadedReference::Image(Frame::load(&base.join(p))?),
            Reference::Prompt(t) => LoadedReference::Prompt(t.clone()),
        };
        Ok(LoadedSample { frames, reference })
    }
}

fn parse_err(record: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        record,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Best guess at the field a serde error refers to.
fn serde_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for key in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.split(key).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "record".to_string()
}

/// Parses manifest text. Records are numbered from 0 in file order.
pub fn parse_manifest(text: &str) -> Result<Vec<ProcessSample>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record = out.len();
        // scores are range-checked on the raw value so the error names the field
        let raw: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_err(record, "record", e.to_string()))?;
        if let Some(scores) = raw.get("scores").and_then(|s| s.as_object()) {
            for (k, v) in scores {
                if let Some(x) = v.as_f64() {
                    if !(1.0..=10.0).contains(&x) {
                        return Err(parse_err(record, &format!("scores.{k}"), format!("{x} outside [1, 10]")));
                    }
                }
            }
        }
        let s: ProcessSample =
            serde_json::from_value(raw).map_err(|e| parse_err(record, &serde_field(&e), e.to_string()))?;
        if s.frames.is_empty() {
            return Err(parse_err(record, "frames", "at least one frame is required"));
        }
        out.push(s);
    }
    Ok(out)
}

/// Loads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ProcessSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let samples = parse_manifest(&text)?;
    let base = manifest_dir(path);
    for (i, s) in samples.iter().enumerate() {
        for (j, f) in s.frames.iter().enumerate() {
            if !base.join(f).is_file() {
                return Err(parse_err(i, &format!("frames[{j}]"), format!("missing file {f}")));
            }
        }
        if let Reference::Image(p) = &s.reference {
            if !base.join(p).is_file() {
                return Err(parse_err(i, "reference", format!("missing file {p}")));
            }
        }
    }
    Ok(samples)
}

pub fn manifest_to_string(samples: &[ProcessSample]) -> String {
    let mut s = String::new();
    for r in samples {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn save_manifest(path: &Path, samples: &[ProcessSample]) -> Result<()> {
    fs::write(path, manifest_to_string(samples)).map_err(|e| Error::io(path, e))
}

/// Directory that manifest paths are relative to.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
