//! Forward passes built on the autodiff tape. Inference wrappers build a
//! throwaway graph and return plain tensors.

use super::{build_visibility, AttnIds, FfnIds, LnIds, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, LN_EPS};
use crate::tuple_codec::{TokenSequence, ATTR, BOS, EOS, PAD};

/// The encoder's final hidden states together with the key mask used.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[L, d_model]`.
    pub hidden: Tensor,
    /// `false` for source positions nothing may attend to (padding).
    pub key_allow: Vec<bool>,
}

fn pv<'p>(g: &mut Graph<'p>, p: &'p ModelParams, id: usize) -> Var {
    g.param(id, &p.tensors[id])
}

fn check_len(cfg: &ModelConfig, len: usize) -> Result<()> {
    if len == 0 || len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { tuple: format!("<{len} tokens>"), len, max: cfg.max_seq_len });
    }
    Ok(())
}

pub(crate) fn embed_graph<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    positions: &[usize],
    columns: &[usize],
) -> Result<Var> {
    check_len(cfg, tokens.len())?;
    if let Some(&c) = columns.iter().find(|&&c| c > cfg.n_columns_max) {
        return Err(Error::InvalidArgument(format!("column id {c} exceeds n_columns_max {}", cfg.n_columns_max)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let (tok, pos, col) = (pv(g, p, p.layout.tok), pv(g, p, p.layout.pos), pv(g, p, p.layout.col));
    let a = g.gather(tok, &ids)?;
    let b = g.gather(pos, positions)?;
    let c = g.gather(col, columns)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

fn layer_norm<'p>(g: &mut Graph<'p>, p: &'p ModelParams, ln: LnIds, x: Var) -> Result<Var> {
    let (gamma, beta) = (pv(g, p, ln.gamma), pv(g, p, ln.beta));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn ffn<'p>(g: &mut Graph<'p>, p: &'p ModelParams, ids: FfnIds, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (pv(g, p, ids.w1), pv(g, p, ids.b1), pv(g, p, ids.w2), pv(g, p, ids.b2));
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    g.add_bias(o, b2)
}

/// Multi-head attention; `allow` is a row-major `[Lq, Lk]` mask.
#[allow(clippy::too_many_arguments)]
fn attention<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    xq: Var,
    xkv: Var,
    ids: AttnIds,
    allow: &[bool],
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (wq, wk, wv, wo) = (pv(g, p, ids.wq), pv(g, p, ids.wk), pv(g, p, ids.wv), pv(g, p, ids.wo));
    let q = g.matmul(xq, wq)?;
    let k = g.matmul(xkv, wk)?;
    let v = g.matmul(xkv, wv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let masked = allow.iter().any(|a| !a);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let s = g.matmul_nt(qh, kh)?;
        let mut s = g.scale(s, scale);
        if masked {
            s = g.mask_fill(s, allow.to_vec())?;
        }
        let probs = g.softmax(s);
        if let Some(t) = trace.as_deref_mut() {
            t.push(probs);
        }
        heads.push(g.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, wo)
}

/// Encoder forward; returns the final hidden node and the key mask.
pub(crate) fn encoder_hidden<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    seq: &TokenSequence,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<(Var, Vec<bool>)> {
    let n = seq.len();
    let mut x = embed_graph(g, p, cfg, &seq.token_ids, &seq.position_ids, &seq.column_ids)?;
    let key_allow: Vec<bool> = seq.token_ids.iter().map(|&t| t != PAD).collect();
    let vis = cfg.use_visibility.then(|| build_visibility(seq));
    let mut allow = vec![true; n * n];
    for i in 0..n {
        for j in 0..n {
            let visible = vis.as_ref().map_or(true, |v| v.allowed(i, j));
            allow[i * n + j] = (key_allow[j] && visible) || i == j;
        }
    }
    for layer in p.layout.enc.clone() {
        let h = layer_norm(g, p, layer.ln1, x)?;
        let a = attention(g, p, cfg, h, h, layer.attn, &allow, trace.as_deref_mut())?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, layer.ln2, x)?;
        let f = ffn(g, p, layer.ffn, h)?;
        x = g.add(x, f)?;
    }
    let out = layer_norm(g, p, p.layout.enc_ln, x)?;
    Ok((out, key_allow))
}

/// Column channel for decoder tokens: the number of `[A]` markers seen so
/// far (clamped), 0 for control tokens. Depends only on the prefix.
pub fn decoder_columns(ids: &[u32], n_columns_max: usize) -> Vec<usize> {
    let mut col = 0usize;
    ids.iter()
        .map(|&t| {
            if t == ATTR {
                col += 1;
            }
            match t {
                BOS | EOS | PAD => 0,
                _ => col.min(n_columns_max),
            }
        })
        .collect()
}

/// Decoder forward over `ids` (teacher-forced input, starting with BOS).
pub(crate) fn decoder_hidden<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    ids: &[u32],
    enc: Var,
    enc_key_allow: &[bool],
) -> Result<Var> {
    let t = ids.len();
    let positions: Vec<usize> = (0..t).collect();
    let columns = decoder_columns(ids, cfg.n_columns_max);
    let mut x = embed_graph(g, p, cfg, ids, &positions, &columns)?;
    let causal: Vec<bool> = (0..t * t).map(|k| k % t <= k / t).collect();
    let s = enc_key_allow.len();
    let cross: Vec<bool> = (0..t * s).map(|k| enc_key_allow[k % s]).collect();
    for layer in p.layout.dec.clone() {
        let h = layer_norm(g, p, layer.ln1, x)?;
        let a = attention(g, p, cfg, h, h, layer.self_attn, &causal, None)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, layer.ln2, x)?;
        let c = attention(g, p, cfg, h, enc, layer.cross_attn, &cross, None)?;
        x = g.add(x, c)?;
        let h = layer_norm(g, p, layer.ln3, x)?;
        let f = ffn(g, p, layer.ffn, h)?;
        x = g.add(x, f)?;
    }
    layer_norm(g, p, p.layout.dec_ln, x)
}

/// `hidden · token_embᵀ`.
pub(crate) fn output_logits<'p>(g: &mut Graph<'p>, p: &'p ModelParams, hidden: Var) -> Result<Var> {
    let tok = pv(g, p, p.layout.tok);
    g.matmul_nt(hidden, tok)
}

/// Sum of token, position and column embeddings, `[L, d_model]`.
pub fn embed(seq: &TokenSequence, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = embed_graph(&mut g, p, cfg, &seq.token_ids, &seq.position_ids, &seq.column_ids)?;
    Ok(g.value(v).clone())
}

pub fn encode(seq: &TokenSequence, p: &ModelParams, cfg: &ModelConfig) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let (h, key_allow) = encoder_hidden(&mut g, p, cfg, seq, None)?;
    Ok(EncoderOutput { hidden: g.value(h).clone(), key_allow })
}

/// Post-softmax encoder self-attention weights, one `[L, L]` tensor per
/// layer and head (layer-major).
pub fn encoder_attention(seq: &TokenSequence, p: &ModelParams, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let mut trace = Vec::new();
    encoder_hidden(&mut g, p, cfg, seq, Some(&mut trace))?;
    Ok(trace.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Next-token logits after `prefix`, shape `[vocab_size]`.
pub fn decode_step(prefix: &[u32], enc: &EncoderOutput, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
    }
    let all = decode_teacher_forced(prefix, enc, p, cfg)?;
    let last = all.row(all.rows() - 1).to_vec();
    Tensor::new(vec![last.len()], last)
}

/// Logits for every position of a teacher-forced decoder input, `[T, V]`.
pub fn decode_teacher_forced(ids: &[u32], enc: &EncoderOutput, p: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(enc.hidden.clone());
    let h = decoder_hidden(&mut g, p, cfg, ids, e, &enc.key_allow)?;
    let l = output_logits(&mut g, p, h)?;
    Ok(g.value(l).clone())
}
