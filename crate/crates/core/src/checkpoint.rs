//! Versioned binary container for named tensors.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! (kind, free-form metadata, tensor names and shapes), then every tensor's
//! values as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{AlignmentModel, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore};

const MAGIC: &[u8; 8] = b"TTCTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), m.clone()));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Matrix)> {
        self.tensors.iter().filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone()))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, m)| TensorInfo { name: n.clone(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, m) in &self.tensors {
                for x in m.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("file too short"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version as u64,
                expected: CHECKPOINT_VERSION as u64,
            });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("file too short"))?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let mut data = vec![0.0; t.rows * t.cols];
            for x in data.iter_mut() {
                r.read_exact(&mut b8).map_err(|_| bad(&format!("truncated data in tensor {}", t.name)))?;
                *x = f64::from_le_bytes(b8);
            }
            tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)));
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: EncoderConfig,
    vocab: Vec<String>,
    max_text_len: usize,
}

pub const MODEL_PREFIX: &str = "model.";

impl AlignmentModel {
    pub fn model_meta(&self) -> serde_json::Value {
        serde_json::to_value(ModelMeta {
            config: self.cfg.clone(),
            vocab: self.vocab.words().to_vec(),
            max_text_len: self.vocab.max_len(),
        })
        .expect("model metadata serializes")
    }

    pub fn to_checkpoint(&self, kind: &str, mut extra: serde_json::Map<String, serde_json::Value>) -> Checkpoint {
        extra.insert("model".into(), self.model_meta());
        let mut c = Checkpoint::new(kind, serde_json::Value::Object(extra));
        c.add_store(MODEL_PREFIX, &self.params);
        c
    }

    /// Rebuilds a model from the `model` metadata and `model.`-prefixed tensors.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(
            c.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint carries no model metadata".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
        let vocab = Vocab::from_words(meta.vocab, meta.max_text_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.config.seed);
        let mut model = AlignmentModel::new(meta.config, vocab, &mut rng)?;
        model.params.load_from(&c.with_prefix(MODEL_PREFIX)).map_err(Error::Checkpoint)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint("alignment-model", serde_json::Map::new()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
