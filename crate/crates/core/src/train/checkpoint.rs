//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SQCHKPT\0"
//! version    u32
//! length     u64      whole file, trailer included
//! family     u8       1 transformer, 2 recurrent
//! dtype      u8       1 f32, 2 f64
//! config     u32 length + UTF-8 JSON
//! vocabulary u32 length + UTF-8 JSON token list
//! meta       u32 length + UTF-8 JSON {step, history, train_config}
//! params     u32 count, then records
//! optimizer  u8 flag; if 1: u64 t, then m records, then v records
//! trailer    SHA-256 of every preceding byte
//!
//! record     u32 name length, name, u8 dtype, u32 ndim, u64 dims…, raw data
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AdamState, TrainConfig};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::tensor::{DType, Scalar, Tensor};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQCHKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8 + 1 + 1;
const TRAILER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {found} of {expected} bytes")]
    Truncated { expected: u64, found: u64 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint stores {found:?} parameters, requested {expected:?}")]
    DType { expected: DType, found: DType },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    history: Vec<f64>,
    train_config: Option<TrainConfig>,
}

/// Everything needed to serve a model or continue its training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub vocab: Vocabulary,
    pub adam: Option<AdamState<T>>,
    pub step: u64,
    pub history: Vec<f64>,
    pub train_config: Option<TrainConfig>,
}

fn family_tag(config: &ModelConfig) -> u8 {
    match config {
        ModelConfig::Transformer(_) => 1,
        ModelConfig::Recurrent(_) => 2,
    }
}

fn put_payload(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn json<S: Serialize>(value: &S) -> Vec<u8> {
    serde_json::to_vec(value).expect("checkpoint metadata serializes")
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_payload(out, name.as_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("field at byte {} overruns the body", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn payload(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn json<D: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<D> {
        serde_json::from_slice(self.payload()?).map_err(|e| CheckpointError::Malformed(format!("{what}: {e}")))
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = String::from_utf8(self.payload()?.to_vec())
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let tag = self.u8()?;
        let found = DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("dtype tag {tag}")))?;
        if found != T::DTYPE {
            return Err(CheckpointError::DType {
                expected: T::DTYPE,
                found,
            });
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(found.size()))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
        let data = self.take(bytes)?.chunks_exact(found.size()).map(T::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Element type of a checkpoint file, from its header alone.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    use std::io::Read;
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut header = [0u8; HEADER_LEN];
    let mut f = std::fs::File::open(path).map_err(io)?;
    let n = f.read(&mut header).map_err(io)?;
    check_header(&header[..n], None)?;
    DType::from_tag(header[21]).ok_or_else(|| CheckpointError::Malformed(format!("dtype tag {}", header[21])))
}

/// Validates magic, version and, when the full file is given, its length.
fn check_header(bytes: &[u8], file_len: Option<u64>) -> Result<()> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let declared = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if let Some(found) = file_len {
        if found < declared || declared < (HEADER_LEN + TRAILER_LEN) as u64 {
            return Err(CheckpointError::Truncated { expected: declared, found });
        }
        if found > declared {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", found - declared)));
        }
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    /// Inference-only checkpoint.
    pub fn for_inference(model: Model<T>, vocab: Vocabulary) -> Self {
        Checkpoint {
            model,
            vocab,
            adam: None,
            step: 0,
            history: Vec::new(),
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.model.config();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.push(family_tag(&config));
        out.push(T::DTYPE as u8);
        put_payload(&mut out, &json(&config));
        put_payload(&mut out, &json(&self.vocab));
        let meta = Meta {
            step: self.step,
            history: self.history.clone(),
            train_config: self.train_config.clone(),
        };
        put_payload(&mut out, &json(&meta));
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.names().iter().zip(params.tensors()) {
            put_record(&mut out, name, t);
        }
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.t.to_le_bytes());
                for (kind, buffers) in [("m", &adam.m), ("v", &adam.v)] {
                    for (name, t) in params.names().iter().zip(buffers) {
                        put_record(&mut out, &format!("adam.{kind}.{name}"), t);
                    }
                }
            }
        }
        let total = (out.len() + TRAILER_LEN) as u64;
        out[12..20].copy_from_slice(&total.to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_header(bytes, Some(bytes.len() as u64))?;
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(CheckpointError::Checksum);
        }
        let found = DType::from_tag(body[21]).ok_or_else(|| CheckpointError::Malformed(format!("dtype tag {}", body[21])))?;
        if found != T::DTYPE {
            return Err(CheckpointError::DType {
                expected: T::DTYPE,
                found,
            });
        }
        let mut r = Reader {
            buf: body,
            pos: HEADER_LEN,
        };
        let config: ModelConfig = r.json("config")?;
        if family_tag(&config) != body[20] {
            return Err(CheckpointError::Malformed("family tag disagrees with config".into()));
        }
        let vocab: Vocabulary = r.json("vocabulary")?;
        let meta: Meta = r.json("meta")?;
        let mut model = Model::new(&config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let count = r.u32()? as usize;
        let named = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
        model
            .params_mut()
            .assign(named)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut buffers = |kind: &str| -> Result<Vec<Tensor<T>>> {
                    let mut set = ParamSet::default();
                    for (name, p) in model.params().names().iter().zip(model.params().tensors()) {
                        set.push(format!("adam.{kind}.{name}"), Tensor::zeros(p.shape()));
                    }
                    let named = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
                    set.assign(named).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                    Ok(set.tensors().to_vec())
                };
                let m = buffers("m")?;
                let v = buffers("v")?;
                Some(AdamState { m, v, t })
            }
            flag => return Err(CheckpointError::Malformed(format!("optimizer flag {flag}"))),
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} unread bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            vocab,
            adam,
            step: meta.step,
            history: meta.history,
            train_config: meta.train_config,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never replaces the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 over parameter names, shapes and values.
    pub fn param_digest(&self) -> String {
        let mut bytes = Vec::new();
        let params = self.model.params();
        for (name, t) in params.names().iter().zip(params.tensors()) {
            put_record(&mut bytes, name, t);
        }
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `family:digest-prefix`, stable for identical parameters.
    pub fn model_tag(&self) -> String {
        format!("{}:{}", self.model.config().family(), &self.param_digest()[..12])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKind, CellKind, RecurrentConfig};

    fn sample() -> Checkpoint<f64> {
        let config = ModelConfig::Recurrent(RecurrentConfig {
            cell: CellKind::Lstm,
            hidden_size: 4,
            embedding_size: 3,
            bidirectional_encoder: true,
            bidirectional_decoder: false,
            attention: AttentionKind::Dot,
            vocab_size: 7,
            max_encoder_len: 3,
            max_decoder_len: 3,
            dropout: 0.0,
        });
        let model = Model::new(&config, 9).unwrap();
        let vocab = Vocabulary::from_words(["এক", "দুই", "x"].map(String::from));
        let mut adam = AdamState::new(model.params());
        adam.t = 3;
        adam.m[0].data_mut()[0] = 0.125;
        Checkpoint {
            model,
            vocab,
            adam: Some(adam),
            step: 3,
            history: vec![2.5, 1.0 / 3.0, 0.1],
            train_config: Some(TrainConfig::default()),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.param_digest(), c.param_digest());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&flipped), Err(CheckpointError::Checksum)));
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 5]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&versioned),
            Err(CheckpointError::Version { found: 9, .. })
        ));
        assert!(matches!(Checkpoint::<f64>::from_bytes(b"PK\x03\x04"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(CheckpointError::DType { .. })));
    }

    #[test]
    fn save_load_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), DType::F64);
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), c);
        assert!(matches!(
            Checkpoint::<f64>::load(&dir.path().join("absent")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
