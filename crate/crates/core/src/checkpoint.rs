//! Versioned checkpoint files.
//!
//! Layout: the magic `CLSPCKPT`, a little-endian `u32` version, a `u32`
//! header length, the JSON header, then every array as `f32` LE values at
//! the offsets the header lists (in floats from the payload start).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputDims, Model};
use crate::trainer::ExperimentConfig;

const MAGIC: &[u8; 8] = b"CLSPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub epoch: usize,
    pub best_metric: f64,
    pub corpus_seed: u64,
    pub config: ExperimentConfig,
    pub dims: InputDims,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn capture(model: &Model, stage: Stage, epoch: usize, best_metric: f64, config: &ExperimentConfig) -> Self {
        let mut arrays = Vec::new();
        let mut values = Vec::new();
        for (_, p) in model.store.iter() {
            arrays.push(ArrayEntry {
                name: p.name.clone(),
                shape: [p.value.rows(), p.value.cols()],
                offset: values.len(),
            });
            values.extend(p.value.data().iter().map(|&v| v as f32));
        }
        Self {
            header: CheckpointHeader {
                stage,
                epoch,
                best_metric,
                corpus_seed: config.corpus_seed,
                config: config.clone(),
                dims: model.dims,
                arrays,
            },
            values,
        }
    }

    /// Rebuilds the model and loads every array by name.
    pub fn to_model(&self) -> Result<Model> {
        let h = &self.header;
        let mut model = Model::new(&h.config.model, h.dims, h.config.train.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if self.header.arrays.len() != model.store.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} arrays stored, the model has {}",
                self.header.arrays.len(),
                model.store.len()
            )));
        }
        for entry in &self.header.arrays {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown array `{}`", entry.name)))?;
            let target = model.store.get_mut(id);
            if [target.rows(), target.cols()] != entry.shape {
                return Err(Error::Shape {
                    what: format!("checkpoint array `{}`", entry.name),
                    expected: target.shape(),
                    actual: (entry.shape[0], entry.shape[1]),
                });
            }
            let n = entry.shape[0] * entry.shape[1];
            let src = self
                .values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("array `{}` runs past the payload", entry.name)))?;
            for (dst, &v) in target.data_mut().iter_mut().zip(src) {
                *dst = v as f64;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("version {version}, this build reads {VERSION}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes.get(16..16 + header_len).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let payload = &bytes[16 + header_len..];
        let expected: usize = header.arrays.iter().map(|a| a.shape[0] * a.shape[1]).sum();
        if payload.len() != 4 * expected {
            return Err(Error::CorruptCheckpoint(format!(
                "payload holds {} bytes, the header describes {}",
                payload.len(),
                4 * expected
            )));
        }
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { header, values })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::BamProviders;
    use crate::model::ModelConfig;
    use crate::spotter::GateConfig;
    use crate::corpus::{generate_synthetic_corpus, CorpusConfig};

    fn config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig { embed_dim: 8, query_hidden: 4, feature_dim: 8, clip_hidden: 8, hidden_dim: 8, heads: 2, max_clips: 40, top_k: 3 };
        cfg.train.seed = 5;
        cfg.train.learning_rate = 1.25e-3;
        cfg.train.gate.steps = 3;
        cfg
    }

    fn model(cfg: &ExperimentConfig) -> Model {
        let dims = InputDims { vocab_size: 200, raw_dim: 32, bam_dims: [16, 16, 16] };
        Model::new(&cfg.model, dims, 77).unwrap()
    }

    #[test]
    fn round_trip_reproduces_predictions() {
        let cfg = config();
        let m = model(&cfg);
        let ckpt = Checkpoint::capture(&m, Stage::Student, 4, 0.5, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.header.config, cfg);
        let restored = loaded.to_model().unwrap();
        assert_eq!(restored.store.checksum(), m.store.checksum());

        let corpus = CorpusConfig { samples: 10, ..Default::default() };
        let providers = BamProviders::stored([16, 16, 16]);
        for s in generate_synthetic_corpus(3, &corpus).unwrap() {
            let a = m.predict(&m.prepare(&s, &providers).unwrap(), Some(&GateConfig::default())).unwrap();
            let b = restored.predict(&restored.prepare(&s, &providers).unwrap(), Some(&GateConfig::default())).unwrap();
            assert_eq!(a.spans, b.spans);
            assert_eq!(a.selected_per_step, b.selected_per_step);
        }
    }

    #[test]
    fn truncation_and_bad_versions_are_rejected() {
        let cfg = config();
        let bytes = Checkpoint::capture(&model(&cfg), Stage::Teacher, 1, 0.1, &cfg).to_bytes().unwrap();
        for cut in [0, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        let err = Checkpoint::from_bytes(&wrong).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let cfg = config();
        let ckpt = Checkpoint::capture(&model(&cfg), Stage::Teacher, 1, 0.1, &cfg);
        let mut other_cfg = cfg.clone();
        other_cfg.model.hidden_dim = 16;
        let mut other = model(&other_cfg);
        let err = ckpt.load_into(&mut other).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }
}
