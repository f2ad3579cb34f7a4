mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use common::oracles::{brute_force_filler, closure_oracle};
use common::{memorize, tuple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpt_core::fewshot::{detect_cluster_conflicts, generate_ie_question, infer_pattern, Conflict, PROMPT_ATTR};
use rpt_core::{Checkpoint, Error};

const SENTENCES: [&str; 6] = [
    "iphone 10 is newer than iphone 9",
    "iphone 12 is newer than iphone 10",
    "pixel 2 is older than pixel 3",
    "galaxy s8 is older than galaxy s9",
    "dell laptop with 8 gb ram 8 gb what is the ram",
    "asus laptop with 16 gb ram 16 gb what is the ram",
];

fn model() -> &'static Checkpoint {
    static M: OnceLock<Checkpoint> = OnceLock::new();
    M.get_or_init(|| {
        let rows: Vec<_> = SENTENCES.iter().map(|s| tuple(&[(PROMPT_ATTR, s)])).collect();
        memorize(&rows, 1500, 11)
    })
}

#[test]
fn memorized_comparative_is_inferred() {
    let ck = model();
    let top = infer_pattern(ck, &["iphone 10 is [M] than iphone 9".to_string()], 3).unwrap();
    assert_eq!(top[0].token, "newer");
    assert_eq!(top.len(), 3);
}

#[test]
fn joint_argmax_equals_vocabulary_scan() {
    let ck = model();
    let cases: [&[&str]; 4] = [
        &["iphone 10 is [M] than iphone 9"],
        &["pixel 2 is [M] than pixel 3", "iphone 12 is [M] than iphone 10"],
        &["galaxy s8 is older than galaxy [M]", "pixel 2 is older than pixel [M]"],
        &["dell laptop with [M] gb ram", "asus laptop with [M] gb ram"],
    ];
    for prompts in cases {
        let owned: Vec<String> = prompts.iter().map(|s| s.to_string()).collect();
        let got = infer_pattern(ck, &owned, 1).unwrap();
        let (w, score) = brute_force_filler(ck, prompts);
        assert_eq!(got[0].token, w, "{prompts:?}");
        assert!((got[0].prob - score).abs() < 1e-6, "{} vs {score}", got[0].prob);
        // single prompts agree with their own scan too
        for p in prompts {
            let one = infer_pattern(ck, &[p.to_string()], 1).unwrap();
            assert_eq!(one[0].token, brute_force_filler(ck, &[p]).0);
        }
    }
    assert!(matches!(infer_pattern(ck, &["no slot".into()], 1), Err(Error::MaskMissing(_))));
}

#[test]
fn ie_question_from_memorized_examples() {
    let ck = model();
    let q = generate_ie_question("what is the [M]", "dell laptop with 8 gb ram", "8 gb", Some(ck), 3).unwrap();
    assert_eq!(q.len(), 3);
    assert!(q[0].contains("ram"), "{q:?}");
    assert!(q.iter().all(|s| s.starts_with("what is the ")));
    assert!(generate_ie_question("what is the [M]", "dell laptop", "16 gb", Some(ck), 3).is_err());
}

fn id(i: usize) -> String {
    format!("e{i:02}")
}

#[test]
fn conflicts_match_closure_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let n = rng.gen_range(2..12);
        let m = rng.gen_range(1..20);
        let pairs: Vec<(usize, usize, bool)> =
            (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_bool(0.6))).collect();
        let named: Vec<(String, String, bool)> = pairs.iter().map(|&(a, b, x)| (id(a), id(b), x)).collect();
        let got = detect_cluster_conflicts(&named);
        let want: BTreeSet<(String, String)> = closure_oracle(n, &pairs).into_iter().map(|(a, b)| (id(a), id(b))).collect();
        let have: BTreeSet<(String, String)> = got.iter().map(|c| (c.pair[0].clone(), c.pair[1].clone())).collect();
        assert_eq!(have, want);
        for c in &got {
            assert_eq!(c.path.first(), Some(&c.pair[0]));
            assert_eq!(c.path.last(), Some(&c.pair[1]));
            for w in c.path.windows(2) {
                assert!(named.iter().any(|(a, b, m)| *m && ((a == &w[0] && b == &w[1]) || (a == &w[1] && b == &w[0]))));
            }
        }
        let mut shuffled = named.clone();
        shuffled.reverse();
        shuffled.rotate_left(m / 2);
        assert_eq!(detect_cluster_conflicts(&shuffled), got);
    }
}

#[test]
fn three_record_cluster_scenario() {
    let pairs = vec![("a".into(), "b".into(), true), ("b".into(), "c".into(), true), ("a".into(), "c".into(), false)];
    assert_eq!(
        detect_cluster_conflicts(&pairs),
        vec![Conflict { pair: ["a".into(), "c".into()], path: vec!["a".into(), "b".into(), "c".into()] }]
    );
}
