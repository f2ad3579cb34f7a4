//! The encoder-decoder network: embedding sum, bidirectional pre-norm
//! encoder (optionally restricted by the tuple visibility matrix), causal
//! decoder with cross-attention, and an output projection tied to the
//! token embedding.

mod checkpoint;
mod forward;
mod visibility;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use checkpoint::{read_container, write_container, Checkpoint, Container, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use forward::{
    decode_step, decode_teacher_forced, decoder_columns, embed, encode, encoder_attention, EncoderOutput,
};
pub(crate) use forward::{decoder_hidden, encoder_hidden, output_logits};
pub use visibility::{build_visibility, VisibilityMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub n_columns_max: usize,
    pub use_visibility: bool,
}

impl ModelConfig {
    /// A desk-scale default for the given vocabulary size.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 64,
            max_seq_len: 48,
            vocab_size,
            n_columns_max: 8,
            use_visibility: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.max_seq_len,
            self.vocab_size,
            self.n_columns_max,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(format!("model config counts must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LnIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncLayer {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecLayer {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub ln2: LnIds,
    pub cross_attn: AttnIds,
    pub ln3: LnIds,
    pub ffn: FfnIds,
}

/// Parameter indices into [`ModelParams`], derived from the config alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub col: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: LnIds,
    pub dec: Vec<DecLayer>,
    pub dec_ln: LnIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gamma: self.add(format!("{prefix}.gamma"), vec![d], Init::One),
            beta: self.add(format!("{prefix}.beta"), vec![d], Init::Zero),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let mut w = |n: &str| self.add(format!("{prefix}.{n}"), vec![d, d], Init::Normal);
        AttnIds { wq: w("wq"), wk: w("wk"), wv: w("wv"), wo: w("wo") }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), vec![d, f], Init::Normal),
            b1: self.add(format!("{prefix}.b1"), vec![f], Init::Zero),
            w2: self.add(format!("{prefix}.w2"), vec![f, d], Init::Normal),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zero),
        }
    }
}

fn layout_for(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { entries: Vec::new() };
    let tok = b.add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal);
    let pos = b.add("pos_emb".into(), vec![cfg.max_seq_len, d], Init::Normal);
    let col = b.add("col_emb".into(), vec![cfg.n_columns_max + 1, d], Init::Normal);
    let enc = (0..cfg.n_enc_layers)
        .map(|i| {
            let p = format!("enc.{i}");
            EncLayer {
                ln1: b.ln(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln2: b.ln(&format!("{p}.ln2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
            }
        })
        .collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec = (0..cfg.n_dec_layers)
        .map(|i| {
            let p = format!("dec.{i}");
            DecLayer {
                ln1: b.ln(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self"), d),
                ln2: b.ln(&format!("{p}.ln2"), d),
                cross_attn: b.attn(&format!("{p}.cross"), d),
                ln3: b.ln(&format!("{p}.ln3"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
            }
        })
        .collect();
    let dec_ln = b.ln("dec.ln", d);
    (Layout { tok, pos, col, enc, enc_ln, dec, dec_ln }, b.entries)
}

/// One manifest line: parameter name and shape, in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Every parameter of the network, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub(crate) layout: Layout,
    fingerprint: String,
}

pub const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Normal(0, 0.02) truncated at two standard deviations; biases zero,
    /// layer-norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Ok(Self::build(cfg, |shape, init| {
            let n = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Normal => (0..n)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * INIT_STD {
                            break x;
                        }
                    })
                    .collect(),
            };
            Tensor::new(shape.to_vec(), data).expect("shape from layout")
        }))
    }

    /// Every parameter (gains included) set to zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, |shape, _| Tensor::zeros(shape)))
    }

    fn build(cfg: &ModelConfig, mut make: impl FnMut(&[usize], Init) -> Tensor) -> Self {
        let (layout, entries) = layout_for(cfg);
        let tensors = entries.iter().map(|(_, s, i)| make(s, *i)).collect();
        let names = entries.into_iter().map(|(n, _, _)| n).collect();
        let mut p = ModelParams { names, tensors, layout, fingerprint: String::new() };
        p.fingerprint = fingerprint(cfg, &p.manifest());
        p
    }

    /// Rebuilds params from tensors in manifest order, checking every shape.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if tensors.len() != p.tensors.len() {
            return Err(Error::Shape {
                op: "model params",
                detail: format!("expected {} tensors, got {}", p.tensors.len(), tensors.len()),
            });
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != p.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "model params",
                    detail: format!("{}: expected {:?}, got {:?}", p.names[i], p.tensors[i].shape(), t.shape()),
                });
            }
        }
        p.tensors = tensors;
        Ok(p)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect()
    }

    /// Hash of the config and parameter manifest.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Flat view `(tensor index, element index)` of scalar `k`.
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.numel() {
                return Some((i, k));
            }
            k -= t.numel();
        }
        None
    }
}

pub fn fingerprint(cfg: &ModelConfig, manifest: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(serde_json::to_vec(manifest).expect("manifest serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::small(20);
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let c = ModelConfig::small(20);
        let a = ModelParams::init(&c, 3).unwrap();
        assert_eq!(a, ModelParams::init(&c, 3).unwrap());
        assert_ne!(a, ModelParams::init(&c, 4).unwrap());
        let emb = a.tensor("tok_emb").unwrap();
        assert!(emb.data().iter().all(|x| x.abs() <= 0.04));
        assert!(a.tensor("enc.0.ln1.gamma").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(a.tensor("dec.1.ffn.b1").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let c = ModelConfig::small(20);
        let a = ModelParams::zeros(&c).unwrap();
        let mut c2 = c.clone();
        c2.vocab_size = 21;
        assert_ne!(a.fingerprint(), ModelParams::zeros(&c2).unwrap().fingerprint());
        assert_eq!(a.fingerprint(), ModelParams::init(&c, 9).unwrap().fingerprint());
    }
}
