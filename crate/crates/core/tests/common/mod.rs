#![allow(dead_code)]

pub mod oracles;

use rpt_core::training::{pretrain, TrainConfig};
use rpt_core::tuple_codec::build_vocab;
use rpt_core::{Checkpoint, ModelConfig, Tuple};

pub fn tuple(pairs: &[(&str, &str)]) -> Tuple {
    Tuple::new(pairs.iter().copied()).unwrap()
}

pub fn toy_config(vocab_size: usize) -> ModelConfig {
    ModelConfig { max_seq_len: 32, ..ModelConfig::small(vocab_size) }
}

/// Pre-trains until the table is memorized.
pub fn memorize(rows: &[Tuple], steps: usize, seed: u64) -> Checkpoint {
    let vocab = build_vocab(rows, 1).unwrap();
    let tc = TrainConfig { lr: 1e-3, max_steps: steps, seed, eval_interval: steps, ..Default::default() };
    pretrain(rows, &vocab, &tc, &toy_config(vocab.len())).unwrap().checkpoint
}

/// Six people with `name -> city`, `city -> state`.
pub fn people() -> Vec<Tuple> {
    [
        ("michael jordan", "berkeley", "ca", "45"),
        ("ada lovelace", "london", "uk", "36"),
        ("alan turing", "london", "uk", "41"),
        ("grace hopper", "arlington", "va", "85"),
        ("donald knuth", "stanford", "ca", "80"),
        ("barbara liskov", "boston", "ma", "60"),
    ]
    .iter()
    .map(|(n, c, s, a)| tuple(&[("name", n), ("city", c), ("state", s), ("age", a)]))
    .collect()
}

/// Product listings whose `ram` value is the extraction target.
pub fn laptops() -> Vec<Tuple> {
    let brands = ["dell", "lenovo", "asus", "acer", "hp", "msi"];
    let sizes = ["4", "8", "16", "32", "8", "16"];
    brands
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (b, s))| tuple(&[("title", &format!("{b} book {}", i + 3)), ("ram", &format!("{s} gb")), ("color", "grey")]))
        .collect()
}

/// Inclusive token positions of the value of 1-based column `col`.
pub fn value_span(ck: &Checkpoint, t: &Tuple, col: usize) -> (usize, usize) {
    let s = rpt_core::tuple_codec::encode_tuple(t, &ck.vocab, ck.config.max_seq_len).unwrap();
    let (_, v) = s.attr_spans(col).unwrap();
    (v.start, v.end - 1)
}

/// Duplicate and non-duplicate product pairs.
pub fn er_pairs() -> (Vec<Tuple>, Vec<(Tuple, Tuple, bool)>) {
    let items = [("iphone 10", "black"), ("galaxy s9", "blue"), ("pixel 3", "white"), ("moto g7", "red")];
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for (i, (m, c)) in items.iter().enumerate() {
        let a = tuple(&[("title", &format!("{m} {c}")), ("maker", &format!("maker{i}"))]);
        let b = tuple(&[("title", &format!("{m} {c} phone")), ("maker", &format!("maker{i}"))]);
        rows.push(a.clone());
        rows.push(b.clone());
        pairs.push((a, b, true));
    }
    for i in 0..items.len() {
        let j = (i + 1) % items.len();
        pairs.push((rows[2 * i].clone(), rows[2 * j + 1].clone(), false));
    }
    (rows, pairs)
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}
