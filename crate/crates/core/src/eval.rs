//! Metrics, synthetic fixtures and the evaluation runs behind the
//! acceptance experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{fill_cell, GenerationConfig};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::par::{self, Exec};
use crate::training::{cosine, represent};
use crate::tuple_codec::{csv_io, normalize_token, Tuple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    pub seed: u64,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<String>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }
}

/// One masked-cell prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillPrediction {
    pub row: usize,
    pub attr: String,
    pub gold: String,
    pub predicted: String,
    pub exact: bool,
    pub token_acc: f64,
}

/// Position-wise token agreement over the longer of the two sequences.
pub fn token_accuracy(gold: &str, predicted: &str) -> f64 {
    let (g, p) = (normalize_token(gold), normalize_token(predicted));
    let n = g.len().max(p.len());
    if n == 0 {
        return 1.0;
    }
    g.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64
}

/// Masks every `(row, attr)` cell in turn and greedily predicts it.
pub fn masked_fill_eval(
    ckpt: &Checkpoint,
    table: &[Tuple],
    attrs: &[String],
    seed: u64,
    exec: Exec,
) -> Result<(EvalReport, Vec<FillPrediction>)> {
    if table.is_empty() || attrs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cells: Vec<(usize, &String)> = (0..table.len()).flat_map(|r| attrs.iter().map(move |a| (r, a))).collect();
    let gcfg = GenerationConfig::greedy();
    let preds = par::map(exec, &cells, |&(r, a)| -> Result<FillPrediction> {
        let t = &table[r];
        let gold = t.get(a).ok_or_else(|| Error::MissingAttribute(a.clone()))?.to_string();
        let predicted = fill_cell(ckpt, t, a, &gcfg, None)?.value.unwrap_or_default();
        let exact = normalize_token(&gold) == normalize_token(&predicted);
        let token_acc = token_accuracy(&gold, &predicted);
        Ok(FillPrediction { row: r, attr: a.clone(), gold, predicted, exact, token_acc })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = preds.len() as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("exact_match".into(), preds.iter().filter(|p| p.exact).count() as f64 / n);
    metrics.insert("token_accuracy".into(), preds.iter().map(|p| p.token_acc).sum::<f64>() / n);
    let report = EvalReport {
        task: "masked_fill".into(),
        metrics,
        samples: preds.len(),
        seed,
        config_digest: ckpt.params.fingerprint().to_string(),
        predictions: None,
    };
    Ok((report, preds))
}

pub fn write_predictions_csv<W: Write>(w: W, preds: &[FillPrediction]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in preds {
        out.serialize(p).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1; empty denominators give 0.
pub fn prf(predicted: &[bool], gold: &[bool]) -> Prf {
    let mut c = (0, 0, 0);
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    let (tp, fp, fn_) = c;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { tp, fp, fn_, precision, recall, f1 }
}

/// Threshold (predict `score >= t`) maximizing F1; ties keep the higher
/// threshold.
pub fn best_threshold(scores: &[f64], gold: &[bool]) -> (f64, Prf) {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut best = (f64::INFINITY, prf(&vec![false; gold.len()], gold));
    for t in ts {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let m = prf(&pred, gold);
        if m.f1 > best.1.f1 {
            best = (t, m);
        }
    }
    best
}

fn check_both_classes(pairs: &[(Tuple, Tuple, bool)], what: &str) -> Result<()> {
    if !pairs.iter().any(|p| p.2) || !pairs.iter().any(|p| !p.2) {
        return Err(Error::InvalidArgument(format!("{what} needs at least one positive and one negative pair")));
    }
    Ok(())
}

/// Cosine similarity of each pair under a siamese head.
pub fn pair_scores(ckpt: &Checkpoint, pairs: &[(Tuple, Tuple, bool)], exec: Exec) -> Result<Vec<f64>> {
    par::map(exec, pairs, |(a, b, _)| Ok(cosine(&represent(ckpt, a)?, &represent(ckpt, b)?))).into_iter().collect()
}

/// Picks the cosine threshold on `validation`, then reports P/R/F1 on `test`.
pub fn matcher_eval(
    ckpt: &Checkpoint,
    validation: &[(Tuple, Tuple, bool)],
    test: &[(Tuple, Tuple, bool)],
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    check_both_classes(validation, "validation split")?;
    check_both_classes(test, "test split")?;
    let vs = pair_scores(ckpt, validation, exec)?;
    let vg: Vec<bool> = validation.iter().map(|p| p.2).collect();
    let (threshold, _) = best_threshold(&vs, &vg);
    let ts = pair_scores(ckpt, test, exec)?;
    let pred: Vec<bool> = ts.iter().map(|&s| s >= threshold).collect();
    let m = prf(&pred, &test.iter().map(|p| p.2).collect::<Vec<_>>());
    let metrics = BTreeMap::from([
        ("precision".to_string(), m.precision),
        ("recall".to_string(), m.recall),
        ("f1".to_string(), m.f1),
        ("threshold".to_string(), threshold),
    ]);
    Ok(EvalReport {
        task: "matcher".into(),
        metrics,
        samples: test.len(),
        seed,
        config_digest: ckpt.params.fingerprint().to_string(),
        predictions: None,
    })
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), NUCLEI.choose(rng).unwrap())).collect()
}

fn distinct_words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A seeded universe of cities and countries with a fixed `country = g(city)`.
#[derive(Debug, Clone)]
pub struct FdWorld {
    pub cities: Vec<String>,
    pub country_of: BTreeMap<String, String>,
    rng: ChaCha8Rng,
    taken: BTreeSet<String>,
}

impl FdWorld {
    pub fn new(seed: u64, n_cities: usize, n_countries: usize) -> Result<Self> {
        if n_cities < 2 || n_countries < 1 || n_countries > n_cities {
            return Err(Error::InvalidArgument(format!("bad world size {n_cities} cities / {n_countries} countries")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken = BTreeSet::new();
        let cities = distinct_words(&mut rng, n_cities, 3, &mut taken);
        let countries = distinct_words(&mut rng, n_countries, 2, &mut taken);
        // every country gets at least one city
        let country_of = cities
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k = if i < n_countries { i } else { rng.gen_range(0..n_countries) };
                (c.clone(), countries[k].clone())
            })
            .collect();
        Ok(FdWorld { cities, country_of, rng, taken })
    }

    /// A table of `n_rows` over `n_keys` fresh names (never reused across
    /// tables of this world). The first `min(n_rows, n_keys)` rows are the
    /// distinct keys in shuffled order; the rest are drawn with replacement.
    pub fn table(&mut self, n_keys: usize, n_rows: usize) -> Result<Vec<Tuple>> {
        if n_keys < 2 {
            return Err(Error::InvalidArgument("need at least two keys".into()));
        }
        let firsts = distinct_words(&mut self.rng, n_keys, 2, &mut self.taken);
        let keys: Vec<(String, String)> = firsts
            .into_iter()
            .map(|f| {
                let name = format!("{f} {}", word(&mut self.rng, 2));
                let city = self.cities[self.rng.gen_range(0..self.cities.len())].clone();
                (name, city)
            })
            .collect();
        let mut order: Vec<usize> = (0..n_keys).collect();
        order.shuffle(&mut self.rng);
        order.truncate(n_rows);
        while order.len() < n_rows {
            order.push(self.rng.gen_range(0..n_keys));
        }
        order
            .into_iter()
            .map(|k| {
                let (name, city) = &keys[k];
                Tuple::new([("name", name.as_str()), ("city", city), ("country", &self.country_of[city])])
            })
            .collect()
    }
}

/// Table `(name, city, country)` with `city = f(name)` and
/// `country = g(city)`, all determined by `seed`.
pub fn fd_dataset(seed: u64, n_keys: usize, n_rows: usize) -> Result<Vec<Tuple>> {
    let n_cities = (n_keys / 2).max(2);
    let mut world = FdWorld::new(seed, n_cities, (n_cities / 2).max(1))?;
    world.table(n_keys, n_rows)
}

/// Table `(code, desc)` whose `desc` is a 1-4 token phrase fixed by `code`.
pub fn span_dataset(seed: u64, n_rows: usize) -> Result<Vec<Tuple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let words = distinct_words(&mut rng, 24, 2, &mut taken);
    (0..n_rows)
        .map(|i| {
            let len = 1 + i % 4;
            let desc: Vec<&str> = (0..len).map(|_| words.choose(&mut rng).unwrap().as_str()).collect();
            Tuple::new([("code", format!("c{i}")), ("desc", desc.join(" "))])
        })
        .collect()
}
