//! Word- and character-level auto-completion and misspelling repair.
//!
//! Candidate generation is purely lexical (dictionary prefix search, edit
//! distance); the model only ranks, by the probability it assigns to a
//! candidate at the masked position.

use serde::{Deserialize, Serialize};

use super::{log_softmax, value_start, with_value_ids};
use crate::error::{Error, Result};
use crate::model::{decode_step, encode, Checkpoint};
use crate::tuple_codec::{encode_tuple, normalize_token, Tuple, Vocabulary, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Successor,
    Predecessor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub token: String,
    pub prob: f64,
}

/// Distribution over the token that fills `[M]` when the value of `attr` is
/// `before [M] after`.
pub(crate) fn mask_distribution(ckpt: &Checkpoint, t: &Tuple, attr: &str, before: &[u32], after: &[u32]) -> Result<Vec<f64>> {
    let idx = t.position(attr).ok_or_else(|| Error::MissingAttribute(attr.to_string()))?;
    let cfg = &ckpt.config;
    let col = idx + 1;
    let full = encode_tuple(t, &ckpt.vocab, cfg.max_seq_len)?;
    let mut masked: Vec<u32> = before.to_vec();
    masked.push(MASK);
    masked.extend(after);
    let input = with_value_ids(&full, col, &masked, cfg.max_seq_len)?;
    let target = with_value_ids(&full, col, before, cfg.max_seq_len)?;
    let prefix = &target.token_ids[..value_start(&target, col) + before.len()];
    let enc = encode(&input, &ckpt.params, cfg)?;
    let logits = decode_step(prefix, &enc, &ckpt.params, cfg)?;
    Ok(log_softmax(logits.data()).into_iter().map(f64::exp).collect())
}

fn ids(ckpt: &Checkpoint, text: &str) -> Vec<u32> {
    normalize_token(text).iter().map(|w| ckpt.vocab.id_or_unk(w)).collect()
}

fn top_k(mut ranked: Vec<Ranked>, k: usize) -> Vec<Ranked> {
    ranked.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token)));
    ranked.truncate(k);
    ranked
}

/// Ranks vocabulary words for the slot after (or before) `obs`.
pub fn complete_word(
    ckpt: &Checkpoint,
    t: &Tuple,
    attr: &str,
    obs: &str,
    direction: Direction,
    k: usize,
) -> Result<Vec<Ranked>> {
    let obs_ids = ids(ckpt, obs);
    let probs = match direction {
        Direction::Successor => mask_distribution(ckpt, t, attr, &obs_ids, &[])?,
        Direction::Predecessor => mask_distribution(ckpt, t, attr, &[], &obs_ids)?,
    };
    let ranked: Vec<Ranked> =
        ckpt.vocab.ordinary().map(|(id, tok)| Ranked { token: tok.to_string(), prob: probs[id as usize] }).collect();
    if ranked.is_empty() {
        return Err(Error::NoCandidates(obs.to_string()));
    }
    Ok(top_k(ranked, k))
}

/// Completes the last, partial token of `obs` from `dict` (strict prefix
/// matches only).
pub fn complete_chars(
    ckpt: &Checkpoint,
    t: &Tuple,
    attr: &str,
    obs: &str,
    dict: &Vocabulary,
    k: usize,
) -> Result<Vec<Ranked>> {
    let (head, partial) = match obs.trim_end().rsplit_once(char::is_whitespace) {
        Some((h, p)) => (h, p),
        None => ("", obs.trim_end()),
    };
    let partial = partial.to_lowercase();
    if partial.is_empty() {
        return Err(Error::InvalidArgument("nothing to complete".into()));
    }
    let cands: Vec<&str> =
        dict.ordinary().map(|(_, w)| w).filter(|w| w.len() > partial.len() && w.starts_with(&partial)).collect();
    if cands.is_empty() {
        return Err(Error::NoCompletion(partial));
    }
    let probs = mask_distribution(ckpt, t, attr, &ids(ckpt, head), &[])?;
    let ranked = cands
        .into_iter()
        .map(|w| Ranked { token: w.to_string(), prob: probs[ckpt.vocab.id_or_unk(w) as usize] })
        .collect();
    Ok(top_k(ranked, k))
}

/// Unit-cost edit distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Dictionary tokens within `max_dist` edits of the value token at
/// `token_index`, ranked by the model with that token masked.
pub fn repair_misspelling(
    ckpt: &Checkpoint,
    t: &Tuple,
    attr: &str,
    token_index: usize,
    dict: &Vocabulary,
    max_dist: usize,
) -> Result<Vec<Ranked>> {
    if !(1..=2).contains(&max_dist) {
        return Err(Error::InvalidArgument(format!("max distance {max_dist} not in 1..=2")));
    }
    let value = t.get(attr).ok_or_else(|| Error::MissingAttribute(attr.to_string()))?;
    let words = normalize_token(value);
    let observed = words
        .get(token_index)
        .ok_or_else(|| Error::InvalidArgument(format!("token index {token_index} outside value {value:?}")))?;
    let cands: Vec<&str> = dict
        .ordinary()
        .map(|(_, w)| w)
        .filter(|w| *w != observed && levenshtein(w, observed) <= max_dist)
        .collect();
    if cands.is_empty() {
        return Err(Error::NoCandidates(observed.clone()));
    }
    let all = ids(ckpt, value);
    let probs = mask_distribution(ckpt, t, attr, &all[..token_index], &all[token_index + 1..])?;
    let ranked: Vec<Ranked> = cands
        .into_iter()
        .map(|w| Ranked { token: w.to_string(), prob: probs[ckpt.vocab.id_or_unk(w) as usize] })
        .collect();
    let n = ranked.len();
    Ok(top_k(ranked, n))
}


#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[char], b: &[char]) -> usize {
        match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("mkie", "mike"), 2);
        assert_eq!(levenshtein("mkie", "miss"), 3);
        assert_eq!(levenshtein("mkie", "mint"), 3);
        assert_eq!(levenshtein("mikes", "mike"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn levenshtein_matches_recursion() {
        let words = ["a", "ab", "ba", "abc", "cab", "mike", "mkie", "mikes", "michel", "miss"];
        for a in words {
            for b in words {
                let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
                assert_eq!(levenshtein(a, b), naive(&ca, &cb), "{a} {b}");
            }
        }
    }
}
