//! Cloze-style templates for few-shot matching, consolidation and question
//! generation, plus conflict detection over matched clusters.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::decoding::complete::mask_distribution;
use crate::decoding::Ranked;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tuple_codec::{normalize_token, Tuple};

pub const MASK_SLOT: &str = "[M]";
pub const MATCH_TEMPLATE: &str = "True: if {a} and {b} have the same [M]";
pub const NON_MATCH_TEMPLATE: &str = "False: if {a} and {b} have different [M]";
pub const CONSOLIDATOR_TEMPLATE: &str = "{a} is [M] than {b}";
pub const PROMPT_ATTR: &str = "text";

/// A pattern with placeholders `{a}`, `{b}` and one `[M]` slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    pub polarity: Option<bool>,
}

impl Template {
    pub fn new(pattern: impl Into<String>, polarity: Option<bool>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(MASK_SLOT).count() != 1 {
            return Err(Error::InvalidArgument(format!("template needs exactly one {MASK_SLOT}: {pattern:?}")));
        }
        for ph in ["{a}", "{b}"] {
            if pattern.matches(ph).count() > 1 {
                return Err(Error::InvalidArgument(format!("placeholder {ph} used twice in {pattern:?}")));
            }
        }
        Ok(Template { pattern, polarity })
    }

    /// Single-pass substitution, so placeholder-like text inside the
    /// arguments is copied verbatim.
    pub fn render(&self, a: &str, b: &str) -> String {
        let mut out = String::with_capacity(self.pattern.len() + a.len() + b.len());
        let mut rest = self.pattern.as_str();
        while let Some(i) = rest.find('{') {
            out.push_str(&rest[..i]);
            let tail = &rest[i..];
            if let Some(r) = tail.strip_prefix("{a}") {
                out.push_str(a);
                rest = r;
            } else if let Some(r) = tail.strip_prefix("{b}") {
                out.push_str(b);
                rest = r;
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        out
    }
}

fn non_empty(s: &str, what: &str) -> Result<()> {
    if s.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    Ok(())
}

pub fn instantiate_matcher(a: &str, b: &str, matched: bool) -> Result<String> {
    non_empty(a, "entity a")?;
    non_empty(b, "entity b")?;
    let pattern = if matched { MATCH_TEMPLATE } else { NON_MATCH_TEMPLATE };
    Ok(Template::new(pattern, Some(matched))?.render(a, b))
}

pub fn instantiate_consolidator(preferred: &str, other: &str) -> Result<String> {
    non_empty(preferred, "preferred entity")?;
    non_empty(other, "other entity")?;
    Ok(Template::new(CONSOLIDATOR_TEMPLATE, None)?.render(preferred, other))
}

/// Splits a prompt around its single mask slot.
pub fn split_prompt(prompt: &str) -> Result<(&str, &str)> {
    match prompt.matches(MASK_SLOT).count() {
        0 => Err(Error::MaskMissing(prompt.to_string())),
        1 => Ok(prompt.split_once(MASK_SLOT).expect("one slot")),
        n => Err(Error::InvalidArgument(format!("prompt has {n} mask slots: {prompt:?}"))),
    }
}

/// Mask-slot probabilities of one prompt, routed through the tuple codec as
/// a single `text` attribute.
pub fn prompt_distribution(ckpt: &Checkpoint, prompt: &str) -> Result<Vec<f64>> {
    let (left, right) = split_prompt(prompt)?;
    let ids = |s: &str| normalize_token(s).iter().map(|w| ckpt.vocab.id_or_unk(w)).collect::<Vec<_>>();
    let t = Tuple::new([(PROMPT_ATTR, "")])?;
    mask_distribution(ckpt, &t, PROMPT_ATTR, &ids(left), &ids(right))
}

/// Ranks single-token fillers `w` by `Σ_prompts log P(w)`, so one filler
/// must serve every prompt. `prob` holds the joint log-score.
pub fn infer_pattern(ckpt: &Checkpoint, prompts: &[String], k: usize) -> Result<Vec<Ranked>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    let dists = prompts.iter().map(|p| prompt_distribution(ckpt, p)).collect::<Result<Vec<_>>>()?;
    let mut ranked: Vec<Ranked> = ckpt
        .vocab
        .ordinary()
        .map(|(id, tok)| Ranked { token: tok.to_string(), prob: dists.iter().map(|d| d[id as usize].ln()).sum() })
        .collect();
    ranked.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Candidate questions for an extraction example. Without a model the
/// template itself is the only candidate.
pub fn generate_ie_question(
    template: &str,
    text: &str,
    label: &str,
    ckpt: Option<&Checkpoint>,
    k: usize,
) -> Result<Vec<String>> {
    split_prompt(template)?;
    if label.trim().is_empty() || !text.to_lowercase().contains(&label.to_lowercase()) {
        return Err(Error::LabelNotFound { label: label.to_string() });
    }
    let Some(ckpt) = ckpt else { return Ok(vec![template.to_string()]) };
    let prompt = format!("{text} {label} {template}");
    let fillers = infer_pattern(ckpt, &[prompt], k)?;
    Ok(fillers.into_iter().map(|f| template.replacen(MASK_SLOT, &f.token, 1)).collect())
}

/// An explicit non-match whose endpoints ended up in one matched cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub pair: [String; 2],
    /// Chain of matched pairs from `pair[0]` to `pair[1]`.
    pub path: Vec<String>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let next = self.0[x];
            self.0[x] = r;
            x = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Conflicts sorted by pair; each carries a shortest witnessing path
/// (neighbors visited in sorted order, so the output is input-order free).
pub fn detect_cluster_conflicts(pairs: &[(String, String, bool)]) -> Vec<Conflict> {
    let ids: BTreeSet<&str> = pairs.iter().flat_map(|(a, b, _)| [a.as_str(), b.as_str()]).collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let names: Vec<&str> = ids.into_iter().collect();
    let mut uf = UnionFind((0..names.len()).collect());
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); names.len()];
    for (a, b, _) in pairs.iter().filter(|p| p.2) {
        let (i, j) = (index[a.as_str()], index[b.as_str()]);
        uf.union(i, j);
        adj[i].insert(j);
        adj[j].insert(i);
    }
    let mut flagged: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (a, b, _) in pairs.iter().filter(|p| !p.2) {
        let (i, j) = (index[a.as_str()], index[b.as_str()]);
        let (i, j) = if names[i] <= names[j] { (i, j) } else { (j, i) };
        if uf.find(i) == uf.find(j) {
            flagged.insert((i, j));
        }
    }
    flagged
        .into_iter()
        .map(|(i, j)| Conflict {
            pair: [names[i].to_string(), names[j].to_string()],
            path: shortest_path(&adj, i, j).into_iter().map(|k| names[k].to_string()).collect(),
        })
        .collect()
}

fn shortest_path(adj: &[BTreeSet<usize>], from: usize, to: usize) -> Vec<usize> {
    let mut prev = vec![usize::MAX; adj.len()];
    prev[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        if x == to {
            break;
        }
        for &y in &adj[x] {
            if prev[y] == usize::MAX {
                prev[y] = x;
                queue.push_back(y);
            }
        }
    }
    let mut path = vec![to];
    while *path.last().unwrap() != from {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: &str, b: &str, m: bool) -> (String, String, bool) {
        (a.into(), b.into(), m)
    }

    #[test]
    fn templates_verbatim() {
        assert_eq!(
            instantiate_matcher("iPhone 10 black", "iPhone 10 red", true).unwrap(),
            "True: if iPhone 10 black and iPhone 10 red have the same [M]"
        );
        assert_eq!(
            instantiate_matcher("iPhone 10 black", "iPhone 10 red", false).unwrap(),
            "False: if iPhone 10 black and iPhone 10 red have different [M]"
        );
        assert_eq!(instantiate_consolidator("iPhone 10", "iPhone 9").unwrap(), "iPhone 10 is [M] than iPhone 9");
        assert_eq!(instantiate_consolidator("iPhone 12", "iPhone 10").unwrap(), "iPhone 12 is [M] than iPhone 10");
        assert_eq!(instantiate_consolidator("x", "x").unwrap(), "x is [M] than x");
        assert!(instantiate_matcher("", "b", true).is_err());
        assert_eq!(instantiate_consolidator("{b}", "z").unwrap(), "{b} is [M] than z");
    }

    #[test]
    fn template_validation() {
        assert!(Template::new("no slot", None).is_err());
        assert!(Template::new("[M] [M]", None).is_err());
        assert!(Template::new("{a} {a} [M]", None).is_err());
        assert!(matches!(split_prompt("what"), Err(Error::MaskMissing(_))));
    }

    #[test]
    fn conflict_example() {
        let c = detect_cluster_conflicts(&[p("a", "b", true), p("b", "c", true), p("a", "c", false)]);
        assert_eq!(c, vec![Conflict { pair: ["a".into(), "c".into()], path: vec!["a".into(), "b".into(), "c".into()] }]);
        assert!(detect_cluster_conflicts(&[p("a", "b", true), p("b", "c", true)]).is_empty());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"[{"pair":["a","c"],"path":["a","b","c"]}]"#);
    }

    #[test]
    fn ie_question_without_model() {
        let q = generate_ie_question("what is the [M]", "8gb ram laptop", "8gb", None, 3).unwrap();
        assert_eq!(q, vec!["what is the [M]".to_string()]);
        assert!(matches!(
            generate_ie_question("what is the [M]", "laptop", "8gb", None, 3),
            Err(Error::LabelNotFound { .. })
        ));
    }
}
