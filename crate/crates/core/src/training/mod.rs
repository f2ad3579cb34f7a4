//! Denoising pre-training and the fine-tuning procedures built on it.
//!
//! Each step samples a batch, builds one tape per example (in parallel when
//! enabled), and reduces the per-example gradients in batch order before a
//! single Adam update, so runs are reproducible bit-for-bit under a seed.

mod heads;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{apply_corruption, plan_corruption, DEFAULT_STRATEGY_WEIGHTS};
use crate::error::{Error, Result};
use crate::model::{decoder_hidden, encoder_hidden, output_logits, Checkpoint, ModelConfig, ModelParams};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Graph, Tensor, Var};
use crate::par::{self, Exec};
use crate::tuple_codec::{encode_tuple, normalize_token, TokenSequence, Tuple, Vocabulary, BOS, EOS, PAD};

pub use heads::{
    classify, cosine, extract_span, finetune_classifier, finetune_siamese, finetune_span, represent, HeadParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub strategy_weights: [f64; 3],
    pub eval_interval: usize,
    /// 0 disables periodic checkpoint callbacks.
    pub checkpoint_interval: usize,
    /// Only the task head is updated when set.
    pub freeze_base: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            strategy_weights: DEFAULT_STRATEGY_WEIGHTS,
            eval_interval: 100,
            checkpoint_interval: 0,
            freeze_base: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "need lr > 0, batch >= 1, steps >= 1 (got lr {}, batch {}, steps {})",
                self.lr, self.batch_size, self.max_steps
            )));
        }
        Ok(())
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub masked_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

/// Called every `checkpoint_interval` steps with the current model.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &Checkpoint) -> Result<()>;

pub(crate) struct ExampleResult {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub correct: usize,
    pub total: usize,
}

/// Zero-filled dense gradient list: base params then head params.
pub(crate) fn dense_grads(mut g: Gradients, params: &ModelParams, head: Option<&[Tensor]>) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| g.take(i).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    if let Some(h) = head {
        let n = params.len();
        out.extend(h.iter().enumerate().map(|(i, t)| g.take(n + i).unwrap_or_else(|| Tensor::zeros(t.shape()))));
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shared optimisation loop. `example` builds the loss for one example and
/// returns dense gradients for base + head tensors.
pub(crate) fn train_loop<E, F>(
    base: &Checkpoint,
    head: Option<HeadParams>,
    examples: &[E],
    tcfg: &TrainConfig,
    mut hook: Option<CheckpointHook<'_>>,
    example: F,
) -> Result<TrainOutcome>
where
    E: Sync,
    F: Fn(&ModelParams, Option<&[Tensor]>, &E, u64) -> Result<ExampleResult> + Sync + Send,
{
    tcfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ckpt = base.clone();
    ckpt.head = None;
    let head_kind = head.as_ref().map(|h| h.kind());
    let mut head_tensors: Option<Vec<Tensor>> = head.map(HeadParams::into_tensors);
    let adam = AdamConfig::with_lr(tcfg.lr);
    let mut base_state = AdamState::new(ckpt.params.tensors());
    let mut head_state = head_tensors.as_deref().map(AdamState::new);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(tcfg.max_steps);
    let (mut win_loss, mut win_steps, mut win_correct, mut win_total) = (0.0, 0usize, 0usize, 0usize);
    let n_base = ckpt.params.len();

    for step in 1..=tcfg.max_steps {
        let batch: Vec<(usize, u64)> =
            (0..tcfg.batch_size).map(|_| (rng.gen_range(0..examples.len()), rng.gen())).collect();
        let params = &ckpt.params;
        let head_ref = head_tensors.as_deref();
        let results = par::map(tcfg.exec, &batch, |&(i, seed)| example(params, head_ref, &examples[i], seed));
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let r = r?;
            loss += r.loss;
            win_correct += r.correct;
            win_total += r.total;
            match &mut grads {
                None => grads = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        a.axpy(1.0, g)?;
                    }
                }
            }
        }
        let scale = 1.0 / tcfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let mut grads = grads.expect("batch_size >= 1");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let head_grads = grads.split_off(n_base);
        if !tcfg.freeze_base {
            adam_step(ckpt.params.tensors_mut(), &grads, &mut base_state, &adam)?;
        }
        if let (Some(h), Some(st)) = (head_tensors.as_mut(), head_state.as_mut()) {
            adam_step(h, &head_grads, st, &adam)?;
        }
        losses.push(loss);
        win_loss += loss;
        win_steps += 1;
        if step % tcfg.eval_interval.max(1) == 0 || step == tcfg.max_steps {
            let entry = LogEntry {
                step,
                loss: win_loss / win_steps as f64,
                masked_acc: if win_total == 0 { 0.0 } else { win_correct as f64 / win_total as f64 },
            };
            log::info!("step {} loss {:.5} masked_acc {:.4}", entry.step, entry.loss, entry.masked_acc);
            log.push(entry);
            (win_loss, win_steps, win_correct, win_total) = (0.0, 0, 0, 0);
        }
        if let Some(h) = hook.as_deref_mut() {
            if tcfg.checkpoint_interval > 0 && step % tcfg.checkpoint_interval == 0 {
                let mut snap = ckpt.clone();
                snap.head = match (head_kind, &head_tensors) {
                    (Some(k), Some(t)) => Some(HeadParams::from_parts(k, t.clone())?),
                    _ => None,
                };
                h(step, &snap)?;
            }
        }
    }
    ckpt.head = match (head_kind, head_tensors) {
        (Some(k), Some(t)) => Some(HeadParams::from_parts(k, t)?),
        _ => None,
    };
    Ok(TrainOutcome { checkpoint: ckpt, log, losses })
}

/// Reconstruction loss graph: encoder reads `input`, decoder is
/// teacher-forced on `target` (BOS .. EOS) and scored on `target[1..]`.
pub(crate) fn seq2seq_loss<'p>(
    g: &mut Graph<'p>,
    p: &'p ModelParams,
    cfg: &ModelConfig,
    input: &TokenSequence,
    target: &[u32],
) -> Result<(Var, Var)> {
    let (enc, allow) = encoder_hidden(g, p, cfg, input, None)?;
    let h = decoder_hidden(g, p, cfg, &target[..target.len() - 1], enc, &allow)?;
    let logits = output_logits(g, p, h)?;
    let loss = g.cross_entropy(logits, &target[1..], PAD)?;
    Ok((loss, logits))
}

/// Value of the reconstruction loss.
pub fn reconstruction_loss(p: &ModelParams, cfg: &ModelConfig, input: &TokenSequence, target: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let (l, _) = seq2seq_loss(&mut g, p, cfg, input, target)?;
    Ok(g.value(l).item())
}

/// Reconstruction loss and its gradient for every parameter tensor.
pub fn reconstruction_grad(
    p: &ModelParams,
    cfg: &ModelConfig,
    input: &TokenSequence,
    target: &[u32],
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (l, _) = seq2seq_loss(&mut g, p, cfg, input, target)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item(), dense_grads(grads, p, None)))
}

fn check_vocab(ckpt: &Checkpoint) -> Result<()> {
    if ckpt.vocab.len() != ckpt.config.vocab_size {
        return Err(Error::InvalidArgument("vocabulary does not match model config".into()));
    }
    Ok(())
}

/// Pre-trains a freshly initialized model (seeded by `tcfg.seed`).
pub fn pretrain(tuples: &[Tuple], vocab: &Vocabulary, tcfg: &TrainConfig, mcfg: &ModelConfig) -> Result<TrainOutcome> {
    if tuples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut mcfg = mcfg.clone();
    mcfg.vocab_size = vocab.len();
    let base = Checkpoint::init(mcfg, vocab.clone(), tcfg.seed)?;
    pretrain_from(&base, tuples, tcfg, None)
}

/// Continues denoising training from an existing checkpoint.
pub fn pretrain_from(
    base: &Checkpoint,
    tuples: &[Tuple],
    tcfg: &TrainConfig,
    hook: Option<CheckpointHook<'_>>,
) -> Result<TrainOutcome> {
    check_vocab(base)?;
    let cfg = &base.config;
    let vocab = &base.vocab;
    let examples: Vec<(&Tuple, TokenSequence)> = tuples
        .iter()
        .map(|t| Ok((t, encode_tuple(t, vocab, cfg.max_seq_len)?)))
        .collect::<Result<_>>()?;
    let weights = tcfg.strategy_weights;
    train_loop(base, None, &examples, tcfg, hook, |p, _, (t, seq), seed| {
        let (input, span) = match plan_corruption(t, vocab, seed, &weights) {
            Ok(plan) => {
                let c = apply_corruption(seq, &plan)?;
                (c.input, c.original_span)
            }
            Err(Error::NothingToMask) => (seq.clone(), 0..0),
            Err(e) => return Err(e),
        };
        let mut g = Graph::new();
        let (loss, logits) = seq2seq_loss(&mut g, p, cfg, &input, &seq.token_ids)?;
        let lv = g.value(logits);
        // target position q is predicted by logits row q - 1
        let correct = span.clone().filter(|&q| argmax(lv.row(q - 1)) == seq.token_ids[q] as usize).count();
        let out = g.value(loss).item();
        let grads = dense_grads(g.backward(loss)?, p, None);
        Ok(ExampleResult { loss: out, grads, correct, total: span.len() })
    })
}

/// `BOS tokens.. EOS` for a free-text decoder target.
pub fn encode_target(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(normalize_token(text).iter().map(|t| vocab.id_or_unk(t)));
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong { tuple: format!("target {text:?}"), len: ids.len(), max: max_len });
    }
    Ok(ids)
}

/// Fine-tunes the full encoder-decoder to map an uncorrupted tuple to a
/// target token sequence (normalized values, JSON renderings, ...).
pub fn finetune_seq2seq(base: &Checkpoint, pairs: &[(Tuple, String)], tcfg: &TrainConfig) -> Result<TrainOutcome> {
    check_vocab(base)?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = &base.config;
    let examples: Vec<(TokenSequence, Vec<u32>)> = pairs
        .iter()
        .map(|(t, target)| {
            Ok((encode_tuple(t, &base.vocab, cfg.max_seq_len)?, encode_target(target, &base.vocab, cfg.max_seq_len)?))
        })
        .collect::<Result<_>>()?;
    train_loop(base, None, &examples, tcfg, None, |p, _, (src, tgt), _| {
        let mut g = Graph::new();
        let (loss, logits) = seq2seq_loss(&mut g, p, cfg, src, tgt)?;
        let lv = g.value(logits);
        let correct = (1..tgt.len()).filter(|&q| argmax(lv.row(q - 1)) == tgt[q] as usize).count();
        let out = g.value(loss).item();
        let grads = dense_grads(g.backward(loss)?, p, None);
        Ok(ExampleResult { loss: out, grads, correct, total: tgt.len() - 1 })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuple_codec::build_vocab;

    fn corpus() -> Vec<Tuple> {
        (0..8)
            .map(|i| Tuple::new([("id", format!("k{i}")), ("v", format!("w{} w{}", i % 3, i % 5))]).unwrap())
            .collect()
    }

    fn tiny(v: &Vocabulary) -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 16, ..ModelConfig::small(v.len()) }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn initial_loss_near_uniform_and_deterministic() {
        let data = corpus();
        let v = build_vocab(&data, 1).unwrap();
        let tc = TrainConfig { max_steps: 5, eval_interval: 2, lr: 1e-3, ..Default::default() };
        let a = pretrain(&data, &v, &tc, &tiny(&v)).unwrap();
        let ln_v = (v.len() as f64).ln();
        assert!((a.losses[0] - ln_v).abs() < 0.15 * ln_v, "{} vs {ln_v}", a.losses[0]);
        let b = pretrain(&data, &v, &TrainConfig { exec: Exec::Sequential, ..tc.clone() }, &tiny(&v)).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4, 5]);
    }

    #[test]
    fn empty_inputs_error() {
        let data = corpus();
        let v = build_vocab(&data, 1).unwrap();
        assert!(matches!(pretrain(&[], &v, &TrainConfig::default(), &tiny(&v)), Err(Error::EmptyCorpus)));
        let base = Checkpoint::init(tiny(&v), v.clone(), 0).unwrap();
        assert!(matches!(finetune_seq2seq(&base, &[], &TrainConfig::default()), Err(Error::EmptyCorpus)));
        let long = "x ".repeat(40);
        assert!(finetune_seq2seq(&base, &[(data[0].clone(), long)], &TrainConfig::default()).is_err());
    }

    #[test]
    fn hook_sees_periodic_snapshots() {
        let data = corpus();
        let v = build_vocab(&data, 1).unwrap();
        let base = Checkpoint::init(tiny(&v), v.clone(), 1).unwrap();
        let tc = TrainConfig { max_steps: 4, checkpoint_interval: 2, batch_size: 2, ..Default::default() };
        let mut seen = Vec::new();
        let mut hook = |s: usize, _: &Checkpoint| {
            seen.push(s);
            Ok(())
        };
        pretrain_from(&base, &data, &tc, Some(&mut hook)).unwrap();
        assert_eq!(seen, vec![2, 4]);
    }
}
