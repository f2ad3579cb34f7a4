//! Binary container shared by checkpoints (`RPTC`) and deltas (`RPTD`):
//!
//! ```text
//! magic [4] | version u32 LE | meta length u64 LE | meta JSON (UTF-8) | f32 LE arrays
//! ```
//!
//! Arrays follow the manifest order recorded in the JSON.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fingerprint, ManifestEntry, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::HeadParams;
use crate::tuple_codec::Vocabulary;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RPTC";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded container: JSON metadata plus the flat f32 payload widened to f64.
#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub payload: Vec<f64>,
}

impl Container {
    /// Splits the payload into tensors following `manifest`; the payload must
    /// be consumed exactly.
    pub fn take_tensors(&self, offset: &mut usize, manifest: &[ManifestEntry]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(manifest.len());
        for e in manifest {
            let n: usize = e.shape.iter().product();
            let end = *offset + n;
            if end > self.payload.len() {
                return Err(Error::Truncated(format!(
                    "array {} needs {n} values, {} left",
                    e.name,
                    self.payload.len() - *offset
                )));
            }
            out.push(Tensor::new(e.shape.clone(), self.payload[*offset..end].to_vec())?);
            *offset = end;
        }
        Ok(out)
    }
}

pub fn write_container<W: Write>(mut w: W, magic: &[u8; 4], meta: &impl Serialize, arrays: &[&Tensor]) -> Result<()> {
    let json = serde_json::to_vec(meta)?;
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(arrays.iter().map(|t| t.numel() * 4).sum());
    for t in arrays {
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_container(bytes: &[u8], magic: &[u8; 4], kind: &'static str) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic(kind));
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Truncated(format!("metadata declares {len} bytes, {} available", bytes.len() - 16))
    })?;
    let meta: serde_json::Value = serde_json::from_slice(&bytes[16..json_end])
        .map_err(|e| Error::Malformed(format!("metadata: {e}")))?;
    let rest = &bytes[json_end..];
    if rest.len() % 4 != 0 {
        return Err(Error::Truncated(format!("payload of {} bytes is not whole f32 values", rest.len())));
    }
    let payload = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Container { meta, payload })
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    kind: String,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vec<String>,
    manifest: Vec<ManifestEntry>,
    fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<HeadMeta>,
}

/// A trained (or freshly initialized) model with its vocabulary and an
/// optional fine-tuning head.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub head: Option<HeadParams>,
}

impl Checkpoint {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "config vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let params = ModelParams::init(&config, seed)?;
        Ok(Checkpoint { config, params, vocab, head: None })
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let head = self.head.as_ref().map(|h| HeadMeta { kind: h.kind().to_string(), manifest: h.manifest() });
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            manifest: self.params.manifest(),
            fingerprint: self.params.fingerprint().to_string(),
            head,
        };
        let mut arrays: Vec<&Tensor> = self.params.tensors().iter().collect();
        if let Some(h) = &self.head {
            arrays.extend(h.tensors());
        }
        write_container(w, &CHECKPOINT_MAGIC, &meta, &arrays)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes, &CHECKPOINT_MAGIC, "checkpoint")?;
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Malformed(format!("metadata: {e}")))?;
        meta.config.validate()?;
        let expected = fingerprint(&meta.config, &meta.manifest);
        if expected != meta.fingerprint {
            return Err(Error::Fingerprint { expected, found: meta.fingerprint });
        }
        let vocab = Vocabulary::from_tokens(meta.vocab)?;
        if vocab.len() != meta.config.vocab_size {
            return Err(Error::Malformed("vocabulary size disagrees with config".into()));
        }
        let mut offset = 0;
        let tensors = c.take_tensors(&mut offset, &meta.manifest)?;
        let params = ModelParams::from_tensors(&meta.config, tensors)?;
        if params.fingerprint() != expected {
            return Err(Error::Fingerprint { expected, found: params.fingerprint().to_string() });
        }
        let head = match meta.head {
            Some(h) => {
                let ts = c.take_tensors(&mut offset, &h.manifest)?;
                Some(HeadParams::from_parts(&h.kind, ts)?)
            }
            None => None,
        };
        if offset != c.payload.len() {
            return Err(Error::Malformed(format!("{} trailing values", c.payload.len() - offset)));
        }
        Ok(Checkpoint { config: meta.config, params, vocab, head })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
