//! Task heads trained on top of the pre-trained encoder-decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_vocab, dense_grads, train_loop, ExampleResult, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::model::{decoder_hidden, encoder_hidden, Checkpoint, ManifestEntry, ModelConfig, ModelParams};
use crate::numerics::{Graph, Tensor, Var};
use crate::tuple_codec::{encode_tuple, TokenSequence, Tuple};

const HEAD_INIT_STD: f64 = 0.02;

/// Extra parameters owned by a fine-tuned model.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    /// Linear layer over the decoder's final hidden state, `w: [d, C]`, `b: [C]`.
    Classifier { w: Tensor, b: Tensor },
    /// Start/end scoring vectors over encoder states, each `[d, 1]`.
    Span { start: Tensor, end: Tensor },
    /// Projection applied to the mean-pooled encoder state, `[d, p]`.
    Siamese { w: Tensor },
}

impl HeadParams {
    pub fn kind(&self) -> &'static str {
        match self {
            HeadParams::Classifier { .. } => "classifier",
            HeadParams::Span { .. } => "span",
            HeadParams::Siamese { .. } => "siamese",
        }
    }

    fn names(kind: &str) -> Result<&'static [&'static str]> {
        Ok(match kind {
            "classifier" => &["head.w", "head.b"],
            "span" => &["head.start", "head.end"],
            "siamese" => &["head.w"],
            other => return Err(Error::Malformed(format!("unknown head kind {other:?}"))),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            HeadParams::Classifier { w, b } => vec![w, b],
            HeadParams::Span { start, end } => vec![start, end],
            HeadParams::Siamese { w } => vec![w],
        }
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        match self {
            HeadParams::Classifier { w, b } => vec![w, b],
            HeadParams::Span { start, end } => vec![start, end],
            HeadParams::Siamese { w } => vec![w],
        }
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let names = Self::names(self.kind()).expect("known kind");
        names
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| ManifestEntry { name: n.to_string(), shape: t.shape().to_vec() })
            .collect()
    }

    pub fn from_parts(kind: &str, tensors: Vec<Tensor>) -> Result<Self> {
        let names = Self::names(kind)?;
        if tensors.len() != names.len() {
            return Err(Error::Malformed(format!("{kind} head needs {} tensors, got {}", names.len(), tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let h = match kind {
            "classifier" => {
                let (w, b) = (next(), next());
                if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                    return Err(Error::Malformed("classifier head shapes".into()));
                }
                HeadParams::Classifier { w, b }
            }
            "span" => {
                let (start, end) = (next(), next());
                if start.shape().len() != 2 || start.shape()[1] != 1 || start.shape() != end.shape() {
                    return Err(Error::Malformed("span head shapes".into()));
                }
                HeadParams::Span { start, end }
            }
            _ => {
                let w = next();
                if w.shape().len() != 2 {
                    return Err(Error::Malformed("siamese head shape".into()));
                }
                HeadParams::Siamese { w }
            }
        };
        Ok(h)
    }

    /// Checks that the head matches the model width.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d = self.tensors()[0].shape()[0];
        if d != cfg.d_model {
            return Err(Error::Shape { op: "head", detail: format!("head expects d_model {d}, model has {}", cfg.d_model) });
        }
        Ok(())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
    let data = (0..shape.iter().product::<usize>()).map(|_| n.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn head_vars<'p>(g: &mut Graph<'p>, p: &ModelParams, head: &'p [Tensor]) -> Vec<Var> {
    head.iter().enumerate().map(|(i, t)| g.param(p.len() + i, t)).collect()
}

fn encode_all(ckpt: &Checkpoint, tuples: impl Iterator<Item = Tuple>) -> Result<Vec<TokenSequence>> {
    tuples.map(|t| encode_tuple(&t, &ckpt.vocab, ckpt.config.max_seq_len)).collect()
}

/// Class logits `[1, C]`: the decoder reads the source sequence
/// teacher-forced and its last hidden state feeds the linear head.
fn classifier_logits<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    seq: &TokenSequence,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (enc, allow) = encoder_hidden(g, p, cfg, seq, None)?;
    let h = decoder_hidden(g, p, cfg, &seq.token_ids, enc, &allow)?;
    let last = g.row(h, seq.len() - 1)?;
    let z = g.matmul(last, w)?;
    g.add_bias(z, b)
}

fn require_head<'a>(ckpt: &'a Checkpoint, kind: &str) -> Result<&'a HeadParams> {
    match &ckpt.head {
        Some(h) if h.kind() == kind => {
            h.check(&ckpt.config)?;
            Ok(h)
        }
        _ => Err(Error::InvalidArgument(format!("checkpoint has no {kind} head"))),
    }
}

/// Trains a classification head over `n_classes` labels.
pub fn finetune_classifier(
    base: &Checkpoint,
    labeled: &[(Tuple, usize)],
    n_classes: usize,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_vocab(base)?;
    if n_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if let Some((_, y)) = labeled.iter().find(|(_, y)| *y >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {n_classes} classes")));
    }
    let cfg = &base.config;
    let seqs = encode_all(base, labeled.iter().map(|(t, _)| t.clone()))?;
    let examples: Vec<(TokenSequence, u32)> = seqs.into_iter().zip(labeled.iter().map(|(_, y)| *y as u32)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x4845_4144);
    let head = HeadParams::Classifier { w: random(&[cfg.d_model, n_classes], &mut rng), b: Tensor::zeros(&[n_classes]) };
    train_loop(base, Some(head), &examples, tcfg, None, |p, h, (seq, y), _| {
        let h = h.expect("head present");
        let mut g = Graph::new();
        let hv = head_vars(&mut g, p, h);
        let logits = classifier_logits(&mut g, p, cfg, seq, hv[0], hv[1])?;
        let loss = g.cross_entropy(logits, &[*y], u32::MAX)?;
        let correct = usize::from(argmax(g.value(logits).data()) == *y as usize);
        let lv = g.value(loss).item();
        let grads = dense_grads(g.backward(loss)?, p, Some(h));
        Ok(ExampleResult { loss: lv, grads, correct, total: 1 })
    })
}

fn argmax(xs: &[f64]) -> usize {
    super::argmax(xs)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Predicted class and class probabilities.
pub fn classify(ckpt: &Checkpoint, t: &Tuple) -> Result<(usize, Vec<f64>)> {
    let HeadParams::Classifier { w, b } = require_head(ckpt, "classifier")? else { unreachable!() };
    let seq = encode_tuple(t, &ckpt.vocab, ckpt.config.max_seq_len)?;
    let mut g = Graph::new();
    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
    let logits = classifier_logits(&mut g, &ckpt.params, &ckpt.config, &seq, wv, bv)?;
    let probs = softmax(g.value(logits).data());
    Ok((argmax(&probs), probs))
}

fn span_scores<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    seq: &TokenSequence,
    start: Var,
    end: Var,
) -> Result<(Var, Var)> {
    let (enc, _) = encoder_hidden(g, p, cfg, seq, None)?;
    let n = seq.len();
    let s = g.matmul(enc, start)?;
    let e = g.matmul(enc, end)?;
    Ok((g.reshape(s, &[1, n])?, g.reshape(e, &[1, n])?))
}

/// Trains start/end pointers over encoder positions. Labels are inclusive
/// token positions in the encoded sequence.
pub fn finetune_span(base: &Checkpoint, labeled: &[(Tuple, usize, usize)], tcfg: &TrainConfig) -> Result<TrainOutcome> {
    check_vocab(base)?;
    let cfg = &base.config;
    let seqs = encode_all(base, labeled.iter().map(|(t, _, _)| t.clone()))?;
    let mut examples = Vec::with_capacity(seqs.len());
    for (seq, (_, s, e)) in seqs.into_iter().zip(labeled) {
        if s > e || *e >= seq.len() {
            return Err(Error::InvalidArgument(format!("span {s}..={e} outside sequence of length {}", seq.len())));
        }
        examples.push((seq, *s as u32, *e as u32));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5350_414e);
    let head = HeadParams::Span { start: random(&[cfg.d_model, 1], &mut rng), end: random(&[cfg.d_model, 1], &mut rng) };
    train_loop(base, Some(head), &examples, tcfg, None, |p, h, (seq, s, e), _| {
        let h = h.expect("head present");
        let mut g = Graph::new();
        let hv = head_vars(&mut g, p, h);
        let (ss, es) = span_scores(&mut g, p, cfg, seq, hv[0], hv[1])?;
        let ls = g.cross_entropy(ss, &[*s], u32::MAX)?;
        let le = g.cross_entropy(es, &[*e], u32::MAX)?;
        let loss = g.add(ls, le)?;
        let pred = best_span(g.value(ss).data(), g.value(es).data());
        let correct = usize::from(pred == (*s as usize, *e as usize));
        let lv = g.value(loss).item();
        let grads = dense_grads(g.backward(loss)?, p, Some(h));
        Ok(ExampleResult { loss: lv, grads, correct, total: 1 })
    })
}

fn best_span(s: &[f64], e: &[f64]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut score = f64::NEG_INFINITY;
    for i in 0..s.len() {
        for j in i..e.len() {
            if s[i] + e[j] > score {
                score = s[i] + e[j];
                best = (i, j);
            }
        }
    }
    best
}

/// Highest-scoring inclusive span `(start, end)` with `start <= end`.
pub fn extract_span(ckpt: &Checkpoint, t: &Tuple) -> Result<(usize, usize)> {
    let HeadParams::Span { start, end } = require_head(ckpt, "span")? else { unreachable!() };
    let seq = encode_tuple(t, &ckpt.vocab, ckpt.config.max_seq_len)?;
    let mut g = Graph::new();
    let (sv, ev) = (g.constant(start.clone()), g.constant(end.clone()));
    let (ss, es) = span_scores(&mut g, &ckpt.params, &ckpt.config, &seq, sv, ev)?;
    Ok(best_span(g.value(ss).data(), g.value(es).data()))
}

fn siamese_repr<'p>(g: &mut Graph<'p>, p: &'p ModelParams, cfg: &ModelConfig, seq: &TokenSequence, w: Var) -> Result<Var> {
    let (enc, _) = encoder_hidden(g, p, cfg, seq, None)?;
    let pooled = g.mean_rows(enc);
    let z = g.matmul(pooled, w)?;
    Ok(g.l2_normalize_rows(z))
}

/// Trains a shared-encoder pair scorer. Matched pairs are pulled toward
/// cosine 1; unmatched pairs are pushed below `1 - margin`.
pub fn finetune_siamese(
    base: &Checkpoint,
    pairs: &[(Tuple, Tuple, bool)],
    margin: f64,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_vocab(base)?;
    if !(margin > 0.0 && margin <= 2.0) {
        return Err(Error::InvalidArgument(format!("margin {margin} outside (0, 2]")));
    }
    let cfg = &base.config;
    let examples: Vec<(TokenSequence, TokenSequence, bool)> = pairs
        .iter()
        .map(|(a, b, m)| {
            Ok((
                encode_tuple(a, &base.vocab, cfg.max_seq_len)?,
                encode_tuple(b, &base.vocab, cfg.max_seq_len)?,
                *m,
            ))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5349_414d);
    let head = HeadParams::Siamese { w: random(&[cfg.d_model, cfg.d_model], &mut rng) };
    train_loop(base, Some(head), &examples, tcfg, None, |p, h, (a, b, matched), _| {
        let h = h.expect("head present");
        let mut g = Graph::new();
        let hv = head_vars(&mut g, p, h);
        let ra = siamese_repr(&mut g, p, cfg, a, hv[0])?;
        let rb = siamese_repr(&mut g, p, cfg, b, hv[0])?;
        let prod = g.mul(ra, rb)?;
        let cos = g.sum(prod);
        let loss = if *matched {
            let neg = g.scale(cos, -1.0);
            let gap = g.add_scalar(neg, 1.0);
            g.square(gap)
        } else {
            let over = g.add_scalar(cos, margin - 1.0);
            let r = g.relu(over);
            g.square(r)
        };
        let c = g.value(cos).item();
        let correct = usize::from((c > 1.0 - margin / 2.0) == *matched);
        let lv = g.value(loss).item();
        let grads = dense_grads(g.backward(loss)?, p, Some(h));
        Ok(ExampleResult { loss: lv, grads, correct, total: 1 })
    })
}

/// Unit-length representation of a tuple under a siamese head.
pub fn represent(ckpt: &Checkpoint, t: &Tuple) -> Result<Vec<f64>> {
    let HeadParams::Siamese { w } = require_head(ckpt, "siamese")? else { unreachable!() };
    let seq = encode_tuple(t, &ckpt.vocab, ckpt.config.max_seq_len)?;
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let r = siamese_repr(&mut g, &ckpt.params, &ckpt.config, &seq, wv)?;
    Ok(g.value(r).data().to_vec())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
