//! Tuple-aware masking: attribute-name, entire-value and single-value-token
//! corruption, each collapsing the chosen span into one `[M]`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tuple_codec::{normalize_token, Kind, TokenSequence, Tuple, Vocabulary, EOS, MASK};

/// Default sampling weights for (attribute name, entire value, single value token).
pub const DEFAULT_STRATEGY_WEIGHTS: [f64; 3] = [0.15, 0.60, 0.25];

const MAX_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    AttrName,
    EntireValue,
    SingleValueToken,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::AttrName, Strategy::EntireValue, Strategy::SingleValueToken];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionPlan {
    pub strategy: Strategy,
    /// 0-based attribute index.
    pub attr_index: usize,
    /// Offset inside the value (single-token strategy only, else 0).
    pub token_offset: usize,
    pub gold_ids: Vec<u32>,
    pub seed: u64,
}

impl CorruptionPlan {
    /// Plan for an explicit target. Fails when the span is empty.
    pub fn targeted(
        t: &Tuple,
        vocab: &Vocabulary,
        strategy: Strategy,
        attr_index: usize,
        token_offset: usize,
    ) -> Result<Self> {
        let (name, value) = t
            .attrs()
            .get(attr_index)
            .ok_or_else(|| Error::InvalidArgument(format!("attribute index {attr_index} out of range")))?;
        let ids = |s: &str| normalize_token(s).iter().map(|w| vocab.id_or_unk(w)).collect::<Vec<_>>();
        let gold_ids = match strategy {
            Strategy::AttrName => ids(name),
            Strategy::EntireValue => ids(value),
            Strategy::SingleValueToken => ids(value).get(token_offset).map(|&i| vec![i]).unwrap_or_default(),
        };
        if gold_ids.is_empty() {
            return Err(Error::NothingToMask);
        }
        let token_offset = if strategy == Strategy::SingleValueToken { token_offset } else { 0 };
        Ok(CorruptionPlan { strategy, attr_index, token_offset, gold_ids, seed: 0 })
    }
}

fn check_weights(w: &[f64; 3]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("strategy weights {w:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Samples a strategy by weight and a uniform target for it; deterministic in
/// `(t, seed, weights)`.
pub fn plan_corruption(t: &Tuple, vocab: &Vocabulary, seed: u64, weights: &[f64; 3]) -> Result<CorruptionPlan> {
    check_weights(weights)?;
    let lens: Vec<(usize, usize)> = t
        .attrs()
        .iter()
        .map(|(n, v)| (normalize_token(n).len(), normalize_token(v).len()))
        .collect();
    if lens.iter().all(|&(n, v)| n == 0 && v == 0) {
        return Err(Error::NothingToMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let u: f64 = rng.gen();
        let strategy = if u < weights[0] {
            Strategy::AttrName
        } else if u < weights[0] + weights[1] {
            Strategy::EntireValue
        } else {
            Strategy::SingleValueToken
        };
        let attr = rng.gen_range(0..lens.len());
        let (n_name, n_val) = lens[attr];
        let offset = match strategy {
            Strategy::AttrName if n_name > 0 => 0,
            Strategy::EntireValue if n_val > 0 => 0,
            Strategy::SingleValueToken if n_val > 0 => rng.gen_range(0..n_val),
            _ => continue,
        };
        let mut plan = CorruptionPlan::targeted(t, vocab, strategy, attr, offset)?;
        plan.seed = seed;
        return Ok(plan);
    }
    Err(Error::NothingToMask)
}

/// A corrupted encoder input with its targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corrupted {
    pub input: TokenSequence,
    /// Gold span followed by the EOS span-end sentinel.
    pub span_target: Vec<u32>,
    /// Uncorrupted sequence; the reconstruction target.
    pub original: TokenSequence,
    /// Where the gold span sits inside `original`.
    pub original_span: Range<usize>,
    /// Index of the `[M]` inside `input`.
    pub mask_pos: usize,
}

/// Replaces the planned span with a single `[M]` carrying its column and kind.
pub fn apply_corruption(s: &TokenSequence, plan: &CorruptionPlan) -> Result<Corrupted> {
    let col = plan.attr_index + 1;
    let (names, values) = s
        .attr_spans(col)
        .ok_or_else(|| Error::PlanMismatch(format!("no attribute group {col} in sequence")))?;
    let (span, kind) = match plan.strategy {
        Strategy::AttrName => (names, Kind::AttrName),
        Strategy::EntireValue => (values, Kind::AttrValue),
        Strategy::SingleValueToken => {
            let start = values.start + plan.token_offset;
            if start >= values.end {
                return Err(Error::PlanMismatch(format!("token offset {} outside value", plan.token_offset)));
            }
            (start..start + 1, Kind::AttrValue)
        }
    };
    if s.token_ids[span.clone()] != plan.gold_ids[..] {
        return Err(Error::PlanMismatch("gold tokens differ from sequence span".into()));
    }
    let mut input = s.clone();
    input.token_ids.splice(span.clone(), [MASK]);
    input.column_ids.splice(span.clone(), [col]);
    input.kinds.splice(span.clone(), [kind]);
    input.reindex_positions();
    let mut span_target = plan.gold_ids.clone();
    span_target.push(EOS);
    Ok(Corrupted { input, span_target, original: s.clone(), mask_pos: span.start, original_span: span })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuple_codec::{build_vocab, encode_tuple};

    fn jordan() -> Tuple {
        Tuple::new([("name", "Michael Jordan"), ("expertise", "Machine Learning"), ("city", "Berkeley")]).unwrap()
    }

    #[test]
    fn entire_value_on_expertise() {
        let t = jordan();
        let v = build_vocab(&[t.clone()], 1).unwrap();
        let seed = (0..100)
            .find(|&s| plan_corruption(&t, &v, s, &[0.0, 1.0, 0.0]).unwrap().attr_index == 1)
            .unwrap();
        let plan = plan_corruption(&t, &v, seed, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(plan.strategy, Strategy::EntireValue);
        assert_eq!(plan.gold_ids, vec![v.id("machine").unwrap(), v.id("learning").unwrap()]);
        let s = encode_tuple(&t, &v, 64).unwrap();
        let c = apply_corruption(&s, &plan).unwrap();
        assert_eq!(
            c.input.render(&v),
            "<bos> [A] name [V] michael jordan [A] expertise [V] [M] [A] city [V] berkeley <eos>"
        );
        assert_eq!(c.input.len(), s.len() - 1);
        assert_eq!(c.span_target, vec![v.id("machine").unwrap(), v.id("learning").unwrap(), EOS]);
        assert_eq!(c.input.column_ids[c.mask_pos], 2);
        assert_eq!(c.input.kinds[c.mask_pos], Kind::AttrValue);
        assert_eq!(c.input.position_ids, (0..c.input.len()).collect::<Vec<_>>());
    }

    #[test]
    fn single_token_and_name() {
        let t = jordan();
        let v = build_vocab(&[t.clone()], 1).unwrap();
        let s = encode_tuple(&t, &v, 64).unwrap();
        let p = CorruptionPlan::targeted(&t, &v, Strategy::SingleValueToken, 0, 1).unwrap();
        let c = apply_corruption(&s, &p).unwrap();
        assert_eq!(c.input.len(), s.len());
        assert!(c.input.render(&v).starts_with("<bos> [A] name [V] michael [M] [A]"));
        let p = CorruptionPlan::targeted(&t, &v, Strategy::AttrName, 1, 0).unwrap();
        let c = apply_corruption(&s, &p).unwrap();
        assert!(c.input.render(&v).contains("[A] [M] [V] machine learning"));
        assert_eq!(c.input.kinds[c.mask_pos], Kind::AttrName);
    }

    #[test]
    fn only_choice_and_errors() {
        let t = Tuple::new([("a", "x")]).unwrap();
        let v = build_vocab(&[t.clone()], 1).unwrap();
        for seed in 0..20 {
            let p = plan_corruption(&t, &v, seed, &[1.0, 0.0, 0.0]).unwrap();
            assert_eq!((p.strategy, p.attr_index), (Strategy::AttrName, 0));
        }
        let empty = Tuple::new([("a", "")]).unwrap();
        assert!(matches!(plan_corruption(&empty, &v, 1, &[0.0, 1.0, 0.0]), Err(Error::NothingToMask)));
        assert!(plan_corruption(&Tuple::default(), &v, 1, &DEFAULT_STRATEGY_WEIGHTS).is_err());
        assert!(plan_corruption(&t, &v, 1, &[0.5, 0.4, 0.0]).is_err());
        // plan from another tuple
        let other = Tuple::new([("a", "y")]).unwrap();
        let v2 = build_vocab(&[t.clone(), other.clone()], 1).unwrap();
        let p = CorruptionPlan::targeted(&other, &v2, Strategy::EntireValue, 0, 0).unwrap();
        let s = encode_tuple(&t, &v2, 16).unwrap();
        assert!(matches!(apply_corruption(&s, &p), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn strategy_frequencies_follow_weights() {
        let t = jordan();
        let v = build_vocab(&[t.clone()], 1).unwrap();
        let w = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let mut counts = [0usize; 3];
        let n = 10_000;
        for seed in 0..n {
            let p = plan_corruption(&t, &v, seed, &w).unwrap();
            counts[Strategy::ALL.iter().position(|s| *s == p.strategy).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn corruption_invariants_over_seeds() {
        let t = jordan();
        let v = build_vocab(&[t.clone()], 1).unwrap();
        let s = encode_tuple(&t, &v, 64).unwrap();
        for seed in 0..500 {
            let p = plan_corruption(&t, &v, seed, &DEFAULT_STRATEGY_WEIGHTS).unwrap();
            let c = apply_corruption(&s, &p).unwrap();
            assert_eq!(c, apply_corruption(&s, &p).unwrap());
            assert_eq!(c.input.token_ids.iter().filter(|&&x| x == MASK).count(), 1);
            assert_eq!(c.input.len(), s.len() - p.gold_ids.len() + 1);
            assert_eq!(c.input.token_ids[0], s.token_ids[0]);
            assert_eq!(c.input.token_ids.last(), s.token_ids.last());
            let markers = |q: &TokenSequence| q.kinds.iter().filter(|k| **k == Kind::Marker).count();
            assert_eq!(markers(&c.input), markers(&s));
        }
    }
}
