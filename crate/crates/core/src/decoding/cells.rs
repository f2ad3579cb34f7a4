//! Cell filling under domain constraints and whole-table error scanning.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{generate_hypotheses, sequence_probability, token_log_probs, with_value_ids, GenerationConfig};
use crate::error::{Error, Result};
use crate::model::{encode, Checkpoint};
use crate::par::{self, Exec};
use crate::tuple_codec::{csv_io, decode_tuple, encode_tuple, normalize_value, Tuple, MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    NumericRange { lo: f64, hi: f64 },
    AllowedSet(BTreeSet<String>),
}

/// Restricts the values a filled cell may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConstraint {
    pub attr: String,
    pub kind: ConstraintKind,
}

impl DomainConstraint {
    pub fn range(attr: impl Into<String>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("empty range [{lo}, {hi}]")));
        }
        Ok(DomainConstraint { attr: attr.into(), kind: ConstraintKind::NumericRange { lo, hi } })
    }

    /// Allowed values are compared after normalization.
    pub fn allowed<S: AsRef<str>>(attr: impl Into<String>, values: impl IntoIterator<Item = S>) -> Self {
        let set = values.into_iter().map(|v| normalize_value(v.as_ref())).collect();
        DomainConstraint { attr: attr.into(), kind: ConstraintKind::AllowedSet(set) }
    }

    pub fn admits(&self, value: &str) -> bool {
        match &self.kind {
            ConstraintKind::AllowedSet(set) => set.contains(&normalize_value(value)),
            ConstraintKind::NumericRange { lo, hi } => {
                // normalization splits "2.5" into "2 . 5"
                let compact: String = value.chars().filter(|c| !c.is_whitespace()).collect();
                compact.parse::<f64>().map_or(false, |x| x >= *lo && x <= *hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: String,
    /// Sequence probability of the tuple with this value re-inserted.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillResult {
    /// Best admissible value, if any.
    pub value: Option<String>,
    /// Admissible candidates, best first.
    pub candidates: Vec<Candidate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Predicts the value of `attr` by masking it, generating the whole tuple and
/// reading the attribute back out. Candidates are ranked by re-scoring.
pub fn fill_cell(
    ckpt: &Checkpoint,
    t: &Tuple,
    attr: &str,
    gcfg: &GenerationConfig,
    constraint: Option<&DomainConstraint>,
) -> Result<FillResult> {
    let idx = t.position(attr).ok_or_else(|| Error::MissingAttribute(attr.to_string()))?;
    let (cfg, vocab) = (&ckpt.config, &ckpt.vocab);
    let col = idx + 1;
    let full = encode_tuple(t, vocab, cfg.max_seq_len)?;
    let input = with_value_ids(&full, col, &[MASK], cfg.max_seq_len)?;
    let enc = encode(&input, &ckpt.params, cfg)?;
    let hyps = generate_hypotheses(&enc, &ckpt.params, cfg, gcfg)?;

    let mut seen = HashSet::new();
    let mut cands = Vec::new();
    for h in &hyps {
        let decoded = decode_tuple(&h.ids, vocab);
        let Some(value) = decoded.tuple.get(attr) else { continue };
        if !seen.insert(value.to_string()) {
            continue;
        }
        let ids: Vec<u32> = value.split(' ').filter(|w| !w.is_empty()).map(|w| vocab.id_or_unk(w)).collect();
        let Ok(target) = with_value_ids(&full, col, &ids, cfg.max_seq_len) else { continue };
        let lps = token_log_probs(&ckpt.params, cfg, &input, &target.token_ids)?;
        cands.push(Candidate { value: value.to_string(), score: sequence_probability(&lps) });
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.value.cmp(&b.value)));
    let before = cands.len();
    if let Some(c) = constraint {
        cands.retain(|cand| c.admits(&cand.value));
    }
    let note = if cands.is_empty() {
        Some(if before > 0 { "no candidate satisfies constraint" } else { "attribute not reconstructed" }.to_string())
    } else {
        None
    };
    Ok(FillResult { value: cands.first().map(|c| c.value.clone()), candidates: cands, note })
}

/// A suspected error found by [`scan_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub row: usize,
    pub attr: String,
    pub observed: String,
    pub suggested: String,
    pub score: f64,
}

/// Masks and predicts every scanned cell; flags cells whose prediction
/// differs from the observed value with probability at least `threshold`.
pub fn scan_table(
    ckpt: &Checkpoint,
    rows: &[Tuple],
    attrs: &[String],
    threshold: f64,
    gcfg: &GenerationConfig,
    exec: Exec,
) -> Result<Vec<CellError>> {
    for (r, t) in rows.iter().enumerate() {
        if let Some(a) = attrs.iter().find(|a| t.position(a).is_none()) {
            return Err(Error::MissingAttribute(format!("{a} (row {r})")));
        }
    }
    let cells: Vec<(usize, &String)> = rows.iter().enumerate().flat_map(|(r, _)| attrs.iter().map(move |a| (r, a))).collect();
    let found = par::map(exec, &cells, |&(r, a)| -> Result<Option<CellError>> {
        let t = &rows[r];
        let res = fill_cell(ckpt, t, a, gcfg, None)?;
        let observed = t.get(a).unwrap_or_default();
        Ok(res.candidates.into_iter().next().and_then(|best| {
            (normalize_value(&best.value) != normalize_value(observed) && best.score >= threshold).then(|| CellError {
                row: r,
                attr: a.clone(),
                observed: observed.to_string(),
                suggested: best.value,
                score: best.score,
            })
        }))
    });
    found.into_iter().filter_map(Result::transpose).collect()
}

pub fn write_report_csv<W: Write>(w: W, report: &[CellError]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row", "attr", "observed", "suggested", "score"]).map_err(csv_io)?;
    for e in report {
        out.write_record([e.row.to_string(), e.attr.clone(), e.observed.clone(), e.suggested.clone(), e.score.to_string()])
            .map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_jsonl<W: Write>(mut w: W, report: &[CellError]) -> Result<()> {
    for e in report {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_filters() {
        let set = DomainConstraint::allowed("city", ["X"]);
        assert!(set.admits("x"));
        assert!(!set.admits("y"));
        let r = DomainConstraint::range("age", 20.0, 60.0).unwrap();
        assert!(!r.admits("19"));
        assert!(r.admits("25"));
        assert!(r.admits("2 5 . 5") && r.admits("60"));
        assert!(!r.admits("abc"));
        assert!(DomainConstraint::range("age", 3.0, 1.0).is_err());
    }

    #[test]
    fn report_formats() {
        let rep = vec![CellError { row: 2, attr: "city".into(), observed: "a,b".into(), suggested: "c".into(), score: 0.5 }];
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &rep).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row,attr,observed,suggested,score\n2,city,\"a,b\",c,0.5\n");
        let mut buf = Vec::new();
        write_report_jsonl(&mut buf, &rep).unwrap();
        let back: CellError = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, rep[0]);
    }
}
