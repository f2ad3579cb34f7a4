//! Autoregressive generation and the constrained prediction tasks built on
//! it: cell filling, table scanning, auto-completion and misspelling repair.

mod cells;
pub(crate) mod complete;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_step, decode_teacher_forced, encode, Checkpoint, EncoderOutput, ModelConfig, ModelParams};
use crate::tuple_codec::{Kind, TokenSequence, BOS, EOS, PAD};

pub use cells::{
    fill_cell, scan_table, write_report_csv, write_report_jsonl, Candidate, CellError, ConstraintKind, DomainConstraint,
    FillResult,
};
pub use complete::{complete_chars, complete_word, levenshtein, repair_misspelling, Direction, Ranked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub mode: SearchMode,
    pub max_new_tokens: usize,
    /// Beam scores are `log_prob / len^length_penalty`; 0 compares raw log-probs.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { mode: SearchMode::Greedy, max_new_tokens: 64, length_penalty: 0.0 }
    }
}

impl GenerationConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(width: usize) -> Self {
        GenerationConfig { mode: SearchMode::Beam(width), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SearchMode::Beam(0) || self.max_new_tokens == 0 || !self.length_penalty.is_finite() {
            return Err(Error::InvalidArgument("beam width and max new tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// A generated continuation of `BOS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids (BOS excluded, EOS included when finished).
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.ids.len().max(1) as f64).powf(length_penalty)
        }
    }

    /// `exp(mean token log-prob)`.
    pub fn probability(&self) -> f64 {
        (self.log_prob / self.ids.len().max(1) as f64).exp()
    }

    /// Ids up to, not including, EOS.
    pub fn content(&self) -> &[u32] {
        match self.ids.iter().position(|&t| t == EOS) {
            Some(i) => &self.ids[..i],
            None => &self.ids,
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Next-token log-probs; PAD and BOS are never generated.
fn next_log_probs(prefix: &[u32], enc: &EncoderOutput, p: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let logits = decode_step(prefix, enc, p, cfg)?;
    let mut lp = log_softmax(logits.data());
    if lp.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("decoder"));
    }
    lp[PAD as usize] = f64::NEG_INFINITY;
    lp[BOS as usize] = f64::NEG_INFINITY;
    Ok(lp)
}

fn budget(cfg: &ModelConfig, gcfg: &GenerationConfig) -> usize {
    gcfg.max_new_tokens.min(cfg.max_seq_len.saturating_sub(1)).max(1)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy(enc: &EncoderOutput, p: &ModelParams, cfg: &ModelConfig, max_new: usize) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    let mut finished = false;
    for _ in 0..max_new {
        let lp = next_log_probs(&prefix, enc, p, cfg)?;
        let mut best = 0usize;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        log_prob += lp[best];
        prefix.push(best as u32);
        if best as u32 == EOS {
            finished = true;
            break;
        }
    }
    prefix.remove(0);
    Ok(Hypothesis { ids: prefix, log_prob, finished })
}

fn rank(hyps: &mut [Hypothesis], penalty: f64) {
    hyps.sort_by(|a, b| b.score(penalty).total_cmp(&a.score(penalty)).then_with(|| a.ids.cmp(&b.ids)));
}

/// Beam search returning every finished (or budget-truncated) hypothesis,
/// best first.
pub fn beam_search(
    enc: &EncoderOutput,
    p: &ModelParams,
    cfg: &ModelConfig,
    width: usize,
    max_new: usize,
    penalty: f64,
) -> Result<Vec<Hypothesis>> {
    let mut alive = vec![Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_new {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, h) in alive.iter().enumerate() {
            let mut prefix = vec![BOS];
            prefix.extend(&h.ids);
            let lp = next_log_probs(&prefix, enc, p, cfg)?;
            cands.extend(lp.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(t, &v)| (h.log_prob + v, b, t as u32)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(lp, b, t) in cands.iter().take(width) {
            let mut ids = alive[b].ids.clone();
            ids.push(t);
            let h = Hypothesis { ids, log_prob: lp, finished: t == EOS };
            if h.finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        // with no length penalty scores only fall, so a finished leader is final
        if penalty == 0.0 {
            let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if alive.iter().all(|h| h.log_prob <= best_done) {
                alive.clear();
                break;
            }
        }
    }
    done.extend(alive);
    rank(&mut done, penalty);
    Ok(done)
}

/// All hypotheses for the configured search, best first. Beam results also
/// contain the greedy path, so beam never ranks below greedy.
pub fn generate_hypotheses(
    enc: &EncoderOutput,
    p: &ModelParams,
    cfg: &ModelConfig,
    gcfg: &GenerationConfig,
) -> Result<Vec<Hypothesis>> {
    gcfg.validate()?;
    let max_new = budget(cfg, gcfg);
    let g = greedy(enc, p, cfg, max_new)?;
    match gcfg.mode {
        SearchMode::Greedy => Ok(vec![g]),
        SearchMode::Beam(w) => {
            let mut hyps = beam_search(enc, p, cfg, w, max_new, gcfg.length_penalty)?;
            if !hyps.iter().any(|h| h.ids == g.ids) {
                hyps.push(g);
                rank(&mut hyps, gcfg.length_penalty);
            }
            Ok(hyps)
        }
    }
}

/// Best output ids (BOS and EOS stripped).
pub fn generate(enc: &EncoderOutput, p: &ModelParams, cfg: &ModelConfig, gcfg: &GenerationConfig) -> Result<Vec<u32>> {
    let hyps = generate_hypotheses(enc, p, cfg, gcfg)?;
    Ok(hyps[0].content().to_vec())
}

/// Runs a seq2seq model on a tuple and renders the output as text.
pub fn transform(ckpt: &Checkpoint, input: &TokenSequence, gcfg: &GenerationConfig) -> Result<String> {
    let enc = encode(input, &ckpt.params, &ckpt.config)?;
    let ids = generate(&enc, &ckpt.params, &ckpt.config, gcfg)?;
    Ok(ids.iter().map(|&i| ckpt.vocab.token(i)).collect::<Vec<_>>().join(" "))
}

/// `log P(target[i] | target[..i], input)` for `i >= 1`.
pub fn token_log_probs(p: &ModelParams, cfg: &ModelConfig, input: &TokenSequence, target: &[u32]) -> Result<Vec<f64>> {
    if target.len() < 2 || target[0] != BOS {
        return Err(Error::InvalidArgument("target must start with BOS and have a token to score".into()));
    }
    let enc = encode(input, p, cfg)?;
    let logits = decode_teacher_forced(&target[..target.len() - 1], &enc, p, cfg)?;
    Ok((1..target.len()).map(|q| log_softmax(logits.row(q - 1))[target[q] as usize]).collect())
}

/// Length-normalized sequence probability, `exp(mean log-prob)`.
pub fn sequence_probability(log_probs: &[f64]) -> f64 {
    if log_probs.is_empty() {
        return 0.0;
    }
    (log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp()
}

/// Replaces the value tokens of 1-based column `col` with `ids`.
pub(crate) fn with_value_ids(seq: &TokenSequence, col: usize, ids: &[u32], max_len: usize) -> Result<TokenSequence> {
    let (_, vals) = seq
        .attr_spans(col)
        .ok_or_else(|| Error::InvalidArgument(format!("no attribute group {col} in sequence")))?;
    let mut out = seq.clone();
    out.token_ids.splice(vals.clone(), ids.iter().copied());
    out.column_ids.splice(vals.clone(), std::iter::repeat(col).take(ids.len()));
    out.kinds.splice(vals, std::iter::repeat(Kind::AttrValue).take(ids.len()));
    out.position_ids = (0..out.token_ids.len()).collect();
    if out.len() > max_len {
        return Err(Error::SequenceTooLong { tuple: format!("column {col}"), len: out.len(), max: max_len });
    }
    Ok(out)
}

pub(crate) fn value_start(seq: &TokenSequence, col: usize) -> usize {
    seq.attr_spans(col).expect("column present").1.start
}
