use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rpt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const PEOPLE: &str = "name,city,state\n\
ada lovelace,london,uk\n\
alan turing,london,uk\n\
grace hopper,arlington,va\n\
donald knuth,stanford,ca\n";

const TINY: [&str; 10] = [
    "--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--max-seq-len", "32", "--batch-size", "4",
];

fn pretrain(dir: &Path, table: &Path, name: &str, steps: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["pretrain", "--table", table.to_str().unwrap(), "--steps", steps, "--lr", "1e-3"];
    args.extend(TINY);
    args.extend(["--seed", seed, "-o", out.to_str().unwrap()]);
    ok(&args);
    out
}

#[test]
fn missing_model_is_a_usage_error() {
    let out = rpt(&["fill", "--table", "t.csv", "--row", "0", "--attr", "city"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(rpt(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(rpt(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_and_corrupt_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "t.csv", PEOPLE);
    let out = rpt(&["fill", "--model", "nope.rptc", "--table", t.to_str().unwrap(), "--row", "0", "--attr", "city"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = write(dir.path(), "bad.rptc", "garbage");
    let out = rpt(&["fill", "--model", bad.to_str().unwrap(), "--table", t.to_str().unwrap(), "--row", "0", "--attr", "city"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not an RPT checkpoint"));
}

#[test]
fn workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = write(d, "people.csv", PEOPLE);
    let ts = table.to_str().unwrap();

    let vocab = d.join("vocab.txt");
    let v: Value = serde_json::from_str(&ok(&["build-vocab", "--table", ts, "-o", vocab.to_str().unwrap()])).unwrap();
    assert!(v["size"].as_u64().unwrap() > 7);

    let model = pretrain(d, &table, "m.rptc", "30", "5");
    let ms = model.to_str().unwrap();
    let again = pretrain(d, &table, "m2.rptc", "30", "5");
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap(), "--seed makes runs reproducible");

    let fill: Value = serde_json::from_str(&ok(&["fill", "--model", ms, "--table", ts, "--row", "0", "--attr", "city"])).unwrap();
    assert!(fill["candidates"].is_array());
    let allowed = ok(&["fill", "--model", ms, "--table", ts, "--row", "0", "--attr", "city", "--allowed", "paris"]);
    let allowed: Value = serde_json::from_str(&allowed).unwrap();
    assert!(allowed["value"].is_null() || allowed["value"] == "paris");

    let report = ok(&["scan", "--model", ms, "--table", ts, "--threshold", "0", "--beam", "1"]);
    assert!(report.starts_with("row,attr,observed,suggested,score"));

    let ev: Value = serde_json::from_str(&ok(&["eval", "--model", ms, "--table", ts, "--attrs", "city,state"])).unwrap();
    assert_eq!(ev["samples"], 8);
    assert!(ev["metrics"]["exact_match"].as_f64().unwrap() <= 1.0);

    let tuned = d.join("tuned.rptc");
    let labeled = write(d, "labels.csv", "name,city,label\nada lovelace,london,0\ndonald knuth,stanford,1\n");
    let mut args = vec!["finetune-annotate", "--model", ms, "--table", labeled.to_str().unwrap(), "--steps", "5"];
    args.extend(["-o", tuned.to_str().unwrap()]);
    ok(&args);

    let delta = d.join("c1.rptd");
    ok(&["collab-export", "--base", ms, "--tuned", tuned.to_str().unwrap(), "--client", "c1", "-o", delta.to_str().unwrap()]);
    let merged = d.join("merged.rptc");
    ok(&["collab-merge", "--base", ms, "--delta", delta.to_str().unwrap(), "-o", merged.to_str().unwrap()]);
    assert!(merged.exists());

    let dict = write(d, "dict.txt", "london\nlondom\nlisbon\n");
    let fixes: Value = serde_json::from_str(&ok(&[
        "repair", "--model", ms, "--table", ts, "--row", "0", "--attr", "city", "--token-index", "0", "--dict",
        dict.to_str().unwrap(), "--max-dist", "1",
    ]))
    .unwrap();
    assert_eq!(fixes[0]["token"], "londom");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = write(d, "people.csv", PEOPLE);
    let cfg = write(d, "cfg.json", r#"{"model": {"d_model": 16, "n_heads": 2, "d_ff": 32}, "train": {"max_steps": 50, "seed": 3}}"#);
    let out = d.join("m.rptc");
    let args = ["--config", cfg.to_str().unwrap(), "pretrain", "--table", table.to_str().unwrap(), "--steps", "4"];
    let v: Value = serde_json::from_str(&ok(&[&args[..], &["-o", out.to_str().unwrap()]].concat())).unwrap();
    assert_eq!(v["steps"], 4);
    assert_eq!(v["seed"], 3);
    let bad = write(d, "bad.json", r#"{"train": {"lr": "fast"}}"#);
    let code = rpt(&["--config", bad.to_str().unwrap(), "pretrain", "--table", table.to_str().unwrap(), "-o", "x"]).status.code();
    assert_eq!(code, Some(1));
}

#[test]
fn pet_commands_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let p: Value = serde_json::from_str(&ok(&["pet-matcher", "--a", "iPhone 10 black", "--b", "iPhone 10 red"])).unwrap();
    assert_eq!(p["prompt"], "True: if iPhone 10 black and iPhone 10 red have the same [M]");
    let p: Value = serde_json::from_str(&ok(&["pet-consolidate", "--preferred", "iPhone 10", "--other", "iPhone 9"])).unwrap();
    assert_eq!(p["prompt"], "iPhone 10 is [M] than iPhone 9");
    let pairs = write(dir.path(), "pairs.csv", "a,b,match\nx,y,1\ny,z,1\nx,z,0\n");
    let c: Value = serde_json::from_str(&ok(&["pet-conflicts", "--pairs", pairs.to_str().unwrap()])).unwrap();
    assert_eq!(c[0]["pair"], serde_json::json!(["x", "z"]));
    let q: Value = serde_json::from_str(&ok(&["pet-question", "--text", "8gb ram laptop", "--label", "ram"])).unwrap();
    assert_eq!(q[0], "what is the [M]");
}

fn flags(help: &str) -> BTreeSet<String> {
    help.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| w.starts_with("--") && w.len() > 2)
        .map(|w| w.trim_end_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|w| w != "--help" && w != "--version")
        .collect()
}

#[test]
fn every_flag_is_documented_in_readme() {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let top = ok(&["--help"]);
    let subs: Vec<String> = top
        .lines()
        .skip_while(|l| !l.starts_with("Commands:"))
        .skip(1)
        .take_while(|l| l.starts_with("  "))
        .filter_map(|l| l.split_whitespace().next().map(str::to_string))
        .filter(|s| s != "help")
        .collect();
    assert!(subs.len() >= 16);
    let mut missing = Vec::new();
    let global = flags(&top);
    for f in &global {
        if !mentions(&readme, f) {
            missing.push(f.clone());
        }
    }
    for s in &subs {
        let Some(section) = readme_section(&readme, &format!("### rpt {s}")) else {
            missing.push(format!("section rpt {s}"));
            continue;
        };
        for f in flags(&ok(&[s, "--help"])).difference(&global) {
            if !mentions(&section, f) {
                missing.push(format!("{s} {f}"));
            }
        }
    }
    assert!(missing.is_empty(), "undocumented: {missing:?}");
}

/// Whole-flag match: `--k` does not count as a mention inside `--keep`.
fn mentions(text: &str, flag: &str) -> bool {
    text.match_indices(flag).any(|(i, _)| {
        !text[i + flag.len()..].starts_with(|c: char| c.is_alphanumeric() || c == '-' || c == '_')
    })
}

/// Text under `heading` up to the next heading.
fn readme_section(readme: &str, heading: &str) -> Option<String> {
    let mut lines = readme.lines().skip_while(|l| l.trim_end() != heading);
    lines.next()?;
    Some(lines.take_while(|l| !l.starts_with("## ") && !l.starts_with("### ")).collect::<Vec<_>>().join("\n"))
}
