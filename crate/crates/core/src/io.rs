//! On-disk container: a JSON manifest next to raw little-endian `f32` blobs.
//!
//! ```text
//! manifest.json
//! head_0_weight.f32   rows·cols values, row-major
//! head_0_bias.f32     rows values
//! features_id.f32     count·d values, one sample per row
//! ```
//!
//! Values are widened to `f64` on load. Saving narrows to `f32`, so only data
//! that is already `f32`-representable survives a round trip unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GscError, Result};
use crate::head::{Activation, HeadModel, Layer};
use crate::numcore::{Matrix, Vector};
use crate::scoring::Label;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub weight: String,
    pub bias: String,
    pub rows: usize,
    pub cols: usize,
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSetEntry {
    pub name: String,
    pub count: usize,
    pub file: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub dtype: String,
    pub head: Vec<LayerEntry>,
    pub feature_sets: Vec<FeatureSetEntry>,
}

impl Manifest {
    /// Parses and checks version, dtype and dimensions. File contents are not
    /// touched.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
            if v != u64::from(FORMAT_VERSION) {
                return Err(GscError::VersionMismatch {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: FORMAT_VERSION,
                });
            }
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(GscError::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.dtype != DTYPE {
            return Err(GscError::Config(format!(
                "unsupported dtype {:?}, expected {DTYPE:?}",
                self.dtype
            )));
        }
        if self.head.is_empty() {
            return Err(GscError::ManifestDims("head has no layers".into()));
        }
        for entry in &self.head {
            entry.activation.parse::<Activation>()?;
        }
        let first = &self.head[0];
        if first.cols != self.d {
            return Err(GscError::ManifestDims(format!(
                "d = {} but the first layer expects {} inputs",
                self.d, first.cols
            )));
        }
        for (i, pair) in self.head.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(GscError::ManifestDims(format!(
                    "layer {i} has {} outputs but layer {} expects {} inputs",
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        let last = self.head.last().expect("nonempty");
        if last.rows != self.k {
            return Err(GscError::ManifestDims(format!(
                "K = {} but the last layer has {} outputs",
                self.k, last.rows
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub name: String,
    pub label: Label,
    pub features: Vec<Vector>,
}

impl FeatureSet {
    pub fn new(name: impl Into<String>, label: Label, features: Vec<Vector>) -> Self {
        FeatureSet {
            name: name.into(),
            label,
            features,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub head: HeadModel,
    pub feature_sets: Vec<FeatureSet>,
}

impl Dataset {
    pub fn set(&self, name: &str) -> Option<&FeatureSet> {
        self.feature_sets.iter().find(|s| s.name == name)
    }

    /// All features with the given label, in set order.
    pub fn features_with(&self, label: Label) -> Vec<&Vector> {
        self.feature_sets
            .iter()
            .filter(|s| s.label == label)
            .flat_map(|s| &s.features)
            .collect()
    }
}

fn read_blob(path: &Path, expected_values: usize) -> Result<Vec<f64>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(GscError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let expected = expected_values as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(GscError::LengthMismatch {
            file: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(position) = values.iter().position(|v| !v.is_finite()) {
        return Err(GscError::NonFinite { position });
    }
    Ok(values)
}

fn blob_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Reads a manifest and every blob it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = match fs::read_to_string(manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(GscError::MissingFile(manifest_path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let manifest = Manifest::parse(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let mut layers = Vec::with_capacity(manifest.head.len());
    for entry in &manifest.head {
        let weight = read_blob(&dir.join(&entry.weight), entry.rows * entry.cols)?;
        let bias = read_blob(&dir.join(&entry.bias), entry.rows)?;
        layers.push(Layer::new(
            Matrix::new(entry.rows, entry.cols, weight)?,
            Vector::new(bias)?,
            entry.activation.parse()?,
        )?);
    }
    let head = HeadModel::new(layers)?;

    let mut feature_sets = Vec::with_capacity(manifest.feature_sets.len());
    for entry in &manifest.feature_sets {
        let flat = read_blob(&dir.join(&entry.file), entry.count * manifest.d)?;
        let features = flat
            .chunks_exact(manifest.d.max(1))
            .map(|row| Vector::new(row.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        feature_sets.push(FeatureSet::new(entry.name.clone(), entry.label, features));
    }
    Ok(Dataset { head, feature_sets })
}

/// Manifest describing `ds` with the default file names.
pub fn manifest_for(ds: &Dataset) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        d: ds.head.input_dim(),
        k: ds.head.output_dim(),
        dtype: DTYPE.to_string(),
        head: ds
            .head
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| LayerEntry {
                weight: format!("head_{i}_weight.f32"),
                bias: format!("head_{i}_bias.f32"),
                rows: l.out_dim(),
                cols: l.in_dim(),
                activation: l.activation().to_string(),
            })
            .collect(),
        feature_sets: ds
            .feature_sets
            .iter()
            .map(|s| FeatureSetEntry {
                name: s.name.clone(),
                count: s.features.len(),
                file: format!("features_{}.f32", s.name),
                label: s.label,
            })
            .collect(),
    }
}

/// Writes `ds` into `dir` (created if needed) and returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let d = ds.head.input_dim();
    for set in &ds.feature_sets {
        if let Some(bad) = set.features.iter().find(|f| f.len() != d) {
            return Err(GscError::Dimension {
                context: "feature set",
                expected: d,
                actual: bad.len(),
            });
        }
        if set.name.is_empty() || set.name.contains(['/', '\\']) {
            return Err(GscError::Config(format!("invalid feature set name {:?}", set.name)));
        }
    }
    fs::create_dir_all(dir)?;
    let manifest = manifest_for(ds);
    for (layer, entry) in ds.head.layers().iter().zip(&manifest.head) {
        fs::write(dir.join(&entry.weight), blob_bytes(layer.weight().data().iter()))?;
        fs::write(dir.join(&entry.bias), blob_bytes(layer.bias().iter()))?;
    }
    for (set, entry) in ds.feature_sets.iter().zip(&manifest.feature_sets) {
        fs::write(
            dir.join(&entry.file),
            blob_bytes(set.features.iter().flat_map(|f| f.iter())),
        )?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json())?;
    Ok(path)
}
