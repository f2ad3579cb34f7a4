//! Independent reference implementations used as test oracles.

use std::collections::BTreeSet;

use rpt_core::corruption::{apply_corruption, CorruptionPlan, Strategy};
use rpt_core::decoding::token_log_probs;
use rpt_core::fewshot::{split_prompt, PROMPT_ATTR};
use rpt_core::tuple_codec::{encode_tuple, normalize_token, BOS, EOS, PAD};
use rpt_core::Checkpoint;

use super::tuple;

/// Plain recursive edit distance.
pub fn naive_levenshtein(a: &[char], b: &[char]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => (naive_levenshtein(ra, rb) + usize::from(x != y))
            .min(naive_levenshtein(ra, b) + 1)
            .min(naive_levenshtein(a, rb) + 1),
    }
}

pub fn lev(a: &str, b: &str) -> usize {
    naive_levenshtein(&a.chars().collect::<Vec<_>>(), &b.chars().collect::<Vec<_>>())
}

/// Every output of at most `n` tokens that ends at EOS or at the budget.
pub fn enumerate_outputs(vocab: u32, n: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for step in 0..n {
        let mut next = Vec::new();
        for p in &frontier {
            for t in (0..vocab).filter(|&t| t != PAD && t != BOS) {
                let mut s: Vec<u32> = p.clone();
                s.push(t);
                if t == EOS || step + 1 == n {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Conflicting unmatched pairs via Floyd-Warshall reachability.
pub fn closure_oracle(n: usize, pairs: &[(usize, usize, bool)]) -> BTreeSet<(usize, usize)> {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b, m) in pairs {
        if m {
            reach[a][b] = true;
            reach[b][a] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    pairs.iter().filter(|p| !p.2 && reach[p.0][p.1]).map(|&(a, b, _)| (a.min(b), a.max(b))).collect()
}

/// `Σ_prompts log P(w)` via teacher forcing on each filled-in prompt.
pub fn joint_score(ck: &Checkpoint, prompts: &[&str], w: &str) -> f64 {
    prompts
        .iter()
        .map(|p| {
            let (l, r) = split_prompt(p).unwrap();
            let offset = normalize_token(l).len();
            let t = tuple(&[(PROMPT_ATTR, &format!("{l} {w} {r}"))]);
            let s = encode_tuple(&t, &ck.vocab, ck.config.max_seq_len).unwrap();
            let plan = CorruptionPlan::targeted(&t, &ck.vocab, Strategy::SingleValueToken, 0, offset).unwrap();
            let c = apply_corruption(&s, &plan).unwrap();
            let lps = token_log_probs(&ck.params, &ck.config, &c.input, &s.token_ids).unwrap();
            lps[c.original_span.start - 1]
        })
        .sum()
}

/// Best filler by scanning the whole vocabulary.
pub fn brute_force_filler(ck: &Checkpoint, prompts: &[&str]) -> (String, f64) {
    let mut best = (String::new(), f64::NEG_INFINITY);
    for (_, w) in ck.vocab.ordinary() {
        let s = joint_score(ck, prompts, w);
        if s > best.1 {
            best = (w.to_string(), s);
        }
    }
    best
}
