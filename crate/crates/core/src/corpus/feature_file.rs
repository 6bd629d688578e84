//! Feature files: one line of JSON manifest, a newline, then the payload as
//! row-major little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ClipGeometry;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Background,
    Appearance,
    Motion,
    Clip,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub video_id: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub role: FeatureRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub manifest: FeatureManifest,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn new(video_id: impl Into<String>, role: FeatureRole, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                what: "feature payload".into(),
                expected: (rows, cols),
                actual: (data.len(), 1),
            });
        }
        Ok(Self {
            manifest: FeatureManifest { video_id: video_id.into(), shape: [rows, cols], dtype: DTYPE_F32LE.into(), role },
            data,
        })
    }

    /// Narrows every entry to `f32`.
    pub fn from_mat(video_id: impl Into<String>, role: FeatureRole, m: &Mat) -> Self {
        let data = m.data().iter().map(|&v| v as f32).collect();
        Self::new(video_id, role, m.rows(), m.cols(), data).expect("matrix shape is consistent")
    }

    pub fn to_mat(&self) -> Mat {
        let [r, c] = self.manifest.shape;
        Mat::from_vec(r, c, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Checks that the row count matches the clip count of the named video.
    pub fn check_geometry(&self, geometry: &ClipGeometry) -> Result<()> {
        if self.manifest.role == FeatureRole::Embedding || self.manifest.shape[0] == geometry.clip_count {
            return Ok(());
        }
        Err(Error::Shape {
            what: format!("{} features of {}", role_name(self.manifest.role), self.manifest.video_id),
            expected: (geometry.clip_count, self.manifest.shape[1]),
            actual: (self.manifest.shape[0], self.manifest.shape[1]),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadManifest { path: origin.to_path_buf(), reason };
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("no manifest line".into()))?;
        let manifest: FeatureManifest =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| bad(e.to_string()))?;
        if manifest.dtype != DTYPE_F32LE {
            return Err(bad(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let payload = &bytes[newline + 1..];
        let expected = manifest.shape[0] * manifest.shape[1] * 4;
        if payload.len() != expected {
            return Err(Error::CorruptFeatureFile { path: origin.to_path_buf(), expected, actual: payload.len() });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { manifest, data })
    }
}

fn role_name(role: FeatureRole) -> &'static str {
    match role {
        FeatureRole::Background => "background",
        FeatureRole::Appearance => "appearance",
        FeatureRole::Motion => "motion",
        FeatureRole::Clip => "clip",
        FeatureRole::Embedding => "embedding",
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes, path)
}
