//! Tuple-denoising encoder-decoder transformer for relational data preparation.
//!
//! Relational tuples are serialized with `[A]`/`[V]` markers, corrupted with
//! tuple-aware masking, and reconstructed by a bidirectional encoder plus an
//! autoregressive decoder. On top of the network sit cell filling, data
//! cleaning scans, auto-completion, misspelling repair, fine-tuning heads,
//! collaborative delta merging and few-shot prompt templates.
//!
//! Everything runs on a small 64-bit reverse-mode autodiff engine in
//! [`numerics`]. Batch work (per-example gradients, table scans, evaluation
//! sweeps) is spread over a rayon pool when the `parallel` feature is on and
//! falls back to plain iteration otherwise; see [`par`].

pub mod collab;
pub mod corruption;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod model;
pub mod numerics;
pub mod par;
pub mod training;
pub mod tuple_codec;

pub use error::{Error, Result};
pub use model::{Checkpoint, ModelConfig, ModelParams};

pub use tuple_codec::{Tuple, TokenSequence, Vocabulary};
