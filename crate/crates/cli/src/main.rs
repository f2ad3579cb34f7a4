//! `rpt`: command-line front end for the tuple-denoising toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use rpt_core::collab::{export_delta, merge, Delta};
use rpt_core::decoding::{
    complete_chars, complete_word, fill_cell, repair_misspelling, scan_table, write_report_csv, write_report_jsonl,
    Direction, DomainConstraint, GenerationConfig,
};
use rpt_core::eval::{masked_fill_eval, matcher_eval, write_predictions_csv};
use rpt_core::fewshot::{
    detect_cluster_conflicts, generate_ie_question, infer_pattern, instantiate_consolidator, instantiate_matcher,
};
use rpt_core::par::Exec;
use rpt_core::training::{
    finetune_classifier, finetune_seq2seq, finetune_siamese, finetune_span, pretrain_from, TrainConfig, TrainOutcome,
};
use rpt_core::tuple_codec::{encode_tuple, load_table, normalize_token, VocabBuilder};
use rpt_core::{Checkpoint, Error, ModelConfig, Tuple, Vocabulary};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => 1,
            CliError::Core(Error::Diverged { .. } | Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "rpt", version, about = "Tuple-denoising transformer toolkit for data preparation")]
struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with "model" and "train" sections; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from one or more CSV tables.
    BuildVocab {
        #[arg(long, required = true)]
        table: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Pre-train a model by tuple denoising.
    Pretrain {
        #[arg(long, required = true)]
        table: Vec<PathBuf>,
        /// Vocabulary file; built from the tables when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        min_freq: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Also write the model every this many steps (as OUTPUT.stepN).
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Write the training log as JSON.
        #[arg(long)]
        log_file: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Predict one cell and print the ranked candidates as JSON.
    Fill {
        #[command(flatten)]
        cell: CellFlags,
        #[command(flatten)]
        search: SearchFlags,
        /// Keep only numeric values in [lo, hi].
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        range: Option<Vec<f64>>,
        /// Keep only these values (comma separated).
        #[arg(long, value_delimiter = ',')]
        allowed: Option<Vec<String>>,
    },
    /// Flag cells whose prediction disagrees with the observed value.
    Scan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        table: PathBuf,
        /// Attributes to check (comma separated); all when omitted.
        #[arg(long, value_delimiter = ',')]
        attrs: Option<Vec<String>>,
        /// Minimum candidate score to report.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
        #[command(flatten)]
        search: SearchFlags,
        /// Report file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Rank completions of a partial value.
    Complete {
        #[command(flatten)]
        cell: CellFlags,
        /// The observed (partial) value.
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value_t = DirectionArg::Next)]
        direction: DirectionArg,
        /// Word list or vocabulary file; completes the last partial word from it instead.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Rank dictionary corrections for one token of a cell.
    Repair {
        #[command(flatten)]
        cell: CellFlags,
        /// 0-based token position inside the value.
        #[arg(long)]
        token_index: usize,
        /// Word list (one per line) or vocabulary file.
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 2)]
        max_dist: usize,
    },
    /// Fine-tune a tuple-to-text transformation (e.g. value normalization).
    FinetuneNorm {
        #[command(flatten)]
        task: TaskFlags,
        /// Column holding the target text; the other columns form the input.
        #[arg(long, default_value = "target")]
        target_col: String,
    },
    /// Fine-tune a tuple classifier.
    FinetuneAnnotate {
        #[command(flatten)]
        task: TaskFlags,
        /// Column holding the integer class label.
        #[arg(long, default_value = "label")]
        label_col: String,
        /// Number of classes; max label + 1 when omitted.
        #[arg(long)]
        classes: Option<usize>,
        /// Train only the head.
        #[arg(long)]
        freeze_base: bool,
    },
    /// Fine-tune a span extractor.
    FinetuneIe {
        #[command(flatten)]
        task: TaskFlags,
        /// Attribute the span is extracted from.
        #[arg(long)]
        attr: String,
        /// Column holding the text to extract.
        #[arg(long, default_value = "label")]
        label_col: String,
    },
    /// Fine-tune a Siamese matcher on pairs (columns left_*, right_*, match).
    FinetuneEr {
        #[command(flatten)]
        task: TaskFlags,
        /// Cosine margin for unmatched pairs, in (0, 2].
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
    },
    /// Write the parameter delta of a tuned model against its base.
    CollabExport {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long)]
        client: String,
        /// Local step count recorded in the delta.
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Merge client deltas into a base model.
    CollabMerge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, required = true)]
        delta: Vec<PathBuf>,
        /// One weight per delta summing to 1; equal weights when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Instantiate a matcher prompt and optionally rank fillers.
    PetMatcher {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Use the non-match template.
        #[arg(long)]
        unmatched: bool,
        #[command(flatten)]
        prompt: PromptFlags,
    },
    /// Instantiate a consolidation prompt and optionally rank fillers.
    PetConsolidate {
        #[arg(long)]
        preferred: String,
        #[arg(long)]
        other: String,
        #[command(flatten)]
        prompt: PromptFlags,
    },
    /// Report unmatched pairs that transitive matches put in one cluster.
    PetConflicts {
        /// CSV with columns a, b, match.
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Generate extraction questions from one labeled example.
    PetQuestion {
        #[arg(long, default_value = "what is the [M]")]
        template: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        label: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Evaluate a model and print a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalTask::Fill)]
        task: EvalTask,
        /// Table for the fill task.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Attributes for the fill task (comma separated); all when omitted.
        #[arg(long, value_delimiter = ',')]
        attrs: Option<Vec<String>>,
        /// Validation pairs for the matcher task.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Test pairs for the matcher task.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Per-example predictions CSV (fill task).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Report file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CellFlags {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// 0-based data row.
    #[arg(long)]
    row: usize,
    #[arg(long)]
    attr: String,
}

#[derive(Args)]
struct SearchFlags {
    /// Beam width; 1 is greedy.
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl SearchFlags {
    fn config(&self) -> GenerationConfig {
        let mut g = if self.beam <= 1 { GenerationConfig::greedy() } else { GenerationConfig::beam(self.beam) };
        if let Some(n) = self.max_new_tokens {
            g.max_new_tokens = n;
        }
        g
    }
}

#[derive(Args)]
struct TaskFlags {
    /// Pre-trained model to start from.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PromptFlags {
    /// Rank fillers for the prompt's [M] with this model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args, Serialize)]
struct ModelFlags {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_enc_layers: Option<usize>,
    #[arg(long)]
    n_dec_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    n_columns_max: Option<usize>,
    /// Restrict encoder attention by attribute structure.
    #[arg(long)]
    use_visibility: Option<bool>,
}

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "steps")]
    #[serde(rename = "max_steps")]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Next,
    Prev,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Fill,
    Matcher,
}

/// Run-wide settings shared by every subcommand.
struct Ctx {
    seed: Option<u64>,
    file: Value,
    exec: Exec,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.or_else(|| self.file["train"]["seed"].as_u64()).unwrap_or(0)
    }

    /// Defaults, then the config file section, then non-null flags.
    fn layered<T: Serialize + DeserializeOwned>(&self, base: T, section: &str, flags: &impl Serialize) -> Result<T> {
        let mut v = serde_json::to_value(base).map_err(Error::from)?;
        for layer in [self.file.get(section).cloned().unwrap_or(Value::Null), serde_json::to_value(flags).map_err(Error::from)?] {
            if let Value::Object(m) = layer {
                for (k, x) in m.into_iter().filter(|(_, x)| !x.is_null()) {
                    v[k] = x;
                }
            }
        }
        serde_json::from_value(v).map_err(|e| CliError::Usage(format!("bad {section} settings: {e}")))
    }

    fn train(&self, flags: &TrainFlags) -> Result<TrainConfig> {
        let mut tc: TrainConfig = self.layered(TrainConfig::default(), "train", flags)?;
        tc.seed = self.seed();
        tc.exec = self.exec;
        tc.validate()?;
        Ok(tc)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    require(path)?;
    Ok(Checkpoint::load(path)?)
}

fn load_rows(path: &Path) -> Result<Vec<Tuple>> {
    require(path)?;
    let rows = load_table(path)?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

/// A vocabulary file, or else a plain word list with one word per line.
fn load_dict(path: &Path) -> Result<Vocabulary> {
    require(path)?;
    match Vocabulary::load(path) {
        Err(Error::Malformed(_)) => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            Ok(Vocabulary::from_words(text.lines().map(str::trim).filter(|w| !w.is_empty()))?)
        }
        r => Ok(r?),
    }
}

fn row_of(rows: &[Tuple], row: usize) -> Result<&Tuple> {
    rows.get(row).ok_or_else(|| CliError::Data(format!("row {row} out of range ({} rows)", rows.len())))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(Error::from)?);
    Ok(())
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(Error::from)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn save_outcome(out: &TrainOutcome, path: &Path, seed: u64) -> Result<()> {
    out.checkpoint.save(path)?;
    let last = out.log.last();
    print_json(&json!({
        "output": path,
        "seed": seed,
        "steps": out.losses.len(),
        "final_loss": out.losses.last(),
        "masked_acc": last.map(|e| e.masked_acc),
    }))
}

/// Splits a column off every row: `(rest of tuple, column value)`.
fn split_column(rows: &[Tuple], col: &str) -> Result<Vec<(Tuple, String)>> {
    rows.iter()
        .map(|t| {
            let v = t.get(col).ok_or_else(|| CliError::Data(format!("missing column {col:?}")))?.to_string();
            let rest: Vec<(String, String)> = t.attrs().iter().filter(|(n, _)| n != col).cloned().collect();
            Ok((Tuple::new(rest)?, v))
        })
        .collect()
}

fn parse_flag(s: &str) -> Result<bool> {
    match s.trim().to_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(CliError::Data(format!("bad match flag {other:?}"))),
    }
}

/// Pairs from a CSV with `left_*`, `right_*` and `match` columns.
fn load_pairs(path: &Path) -> Result<Vec<(Tuple, Tuple, bool)>> {
    load_rows(path)?
        .iter()
        .map(|t| {
            let side = |prefix: &str| -> Result<Tuple> {
                let attrs: Vec<(String, String)> = t
                    .attrs()
                    .iter()
                    .filter_map(|(n, v)| n.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                    .collect();
                Ok(Tuple::new(attrs)?)
            };
            let m = t.get("match").ok_or_else(|| CliError::Data("missing column \"match\"".into()))?;
            Ok((side("left_")?, side("right_")?, parse_flag(m)?))
        })
        .collect()
}

/// Inclusive token positions of `label` inside the value of `attr`.
fn locate_span(ck: &Checkpoint, t: &Tuple, attr: &str, label: &str) -> Result<(usize, usize)> {
    let col = t.position(attr).ok_or_else(|| Error::MissingAttribute(attr.to_string()))? + 1;
    let s = encode_tuple(t, &ck.vocab, ck.config.max_seq_len)?;
    let (_, vals) = s.attr_spans(col).ok_or_else(|| Error::MissingAttribute(attr.to_string()))?;
    let want: Vec<u32> = normalize_token(label).iter().map(|w| ck.vocab.id_or_unk(w)).collect();
    if want.is_empty() {
        return Err(CliError::Data(format!("empty label for {t}")));
    }
    let hay = &s.token_ids[vals.clone()];
    hay.windows(want.len())
        .position(|w| w == want.as_slice())
        .map(|i| (vals.start + i, vals.start + i + want.len() - 1))
        .ok_or_else(|| CliError::Data(format!("label {label:?} not found in {attr} of {t}")))
}

fn rank_prompt(prompt: String, flags: &PromptFlags) -> Result<()> {
    let fillers = match &flags.model {
        Some(p) => Some(infer_pattern(&load_model(p)?, &[prompt.clone()], flags.k)?),
        None => None,
    };
    print_json(&json!({ "prompt": prompt, "fillers": fillers }))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => Value::Null,
    };
    let ctx = Ctx { seed: cli.seed, file, exec: if cli.sequential { Exec::Sequential } else { Exec::default() } };
    info!("seed {}", ctx.seed());
    match cli.command {
        Command::BuildVocab { table, min_freq, output } => {
            let mut b = VocabBuilder::new();
            for p in &table {
                for t in load_rows(p)? {
                    b.add_tuple(&t);
                }
            }
            let v = b.build(min_freq)?;
            v.save(&output)?;
            print_json(&json!({ "output": output, "size": v.len() }))
        }
        Command::Pretrain { table, vocab, min_freq, model, train, checkpoint_every, log_file, output } => {
            let mut rows = Vec::new();
            for p in &table {
                rows.extend(load_rows(p)?);
            }
            let vocab = match vocab {
                Some(p) => {
                    require(&p)?;
                    Vocabulary::load(&p)?
                }
                None => {
                    let mut b = VocabBuilder::new();
                    rows.iter().for_each(|t| {
                        b.add_tuple(t);
                    });
                    b.build(min_freq.unwrap_or(1))?
                }
            };
            let mcfg: ModelConfig = ctx.layered(ModelConfig::small(vocab.len()), "model", &model)?;
            let mcfg = ModelConfig { vocab_size: vocab.len(), ..mcfg };
            let mut tc = ctx.train(&train)?;
            tc.checkpoint_interval = checkpoint_every.unwrap_or(0);
            let base = Checkpoint::init(mcfg, vocab, tc.seed)?;
            let mut hook = |step: usize, ck: &Checkpoint| {
                let mut p = output.clone().into_os_string();
                p.push(format!(".step{step}"));
                ck.save(PathBuf::from(p))
            };
            let out = pretrain_from(&base, &rows, &tc, Some(&mut hook))?;
            if let Some(p) = log_file {
                serde_json::to_writer_pretty(sink(Some(&p))?, &out.log).map_err(Error::from)?;
            }
            save_outcome(&out, &output, tc.seed)
        }
        Command::Fill { cell, search, range, allowed } => {
            let ck = load_model(&cell.model)?;
            let rows = load_rows(&cell.table)?;
            let constraint = match (range, allowed) {
                (Some(_), Some(_)) => return Err(CliError::Usage("use either --range or --allowed".into())),
                (Some(r), None) => Some(DomainConstraint::range(&cell.attr, r[0], r[1])?),
                (None, Some(a)) => Some(DomainConstraint::allowed(&cell.attr, a)),
                (None, None) => None,
            };
            let r = fill_cell(&ck, row_of(&rows, cell.row)?, &cell.attr, &search.config(), constraint.as_ref())?;
            print_json(&r)
        }
        Command::Scan { model, table, attrs, threshold, format, search, output } => {
            let ck = load_model(&model)?;
            let rows = load_rows(&table)?;
            let attrs = attrs.unwrap_or_else(|| rows[0].names().map(str::to_string).collect());
            let report = scan_table(&ck, &rows, &attrs, threshold, &search.config(), ctx.exec)?;
            let w = sink(output.as_deref())?;
            match format {
                ReportFormat::Csv => write_report_csv(w, &report)?,
                ReportFormat::Jsonl => write_report_jsonl(w, &report)?,
            }
            info!("{} suspicious cells", report.len());
            Ok(())
        }
        Command::Complete { cell, text, direction, dict, k } => {
            let ck = load_model(&cell.model)?;
            let rows = load_rows(&cell.table)?;
            let t = row_of(&rows, cell.row)?;
            let ranked = match dict {
                Some(d) => complete_chars(&ck, t, &cell.attr, &text, &load_dict(&d)?, k)?,
                None => {
                    let dir = match direction {
                        DirectionArg::Next => Direction::Successor,
                        DirectionArg::Prev => Direction::Predecessor,
                    };
                    complete_word(&ck, t, &cell.attr, &text, dir, k)?
                }
            };
            print_json(&ranked)
        }
        Command::Repair { cell, token_index, dict, max_dist } => {
            let ck = load_model(&cell.model)?;
            let rows = load_rows(&cell.table)?;
            let dict = load_dict(&dict)?;
            print_json(&repair_misspelling(&ck, row_of(&rows, cell.row)?, &cell.attr, token_index, &dict, max_dist)?)
        }
        Command::FinetuneNorm { task, target_col } => {
            let base = load_model(&task.model)?;
            let pairs = split_column(&load_rows(&task.table)?, &target_col)?;
            let tc = ctx.train(&task.train)?;
            save_outcome(&finetune_seq2seq(&base, &pairs, &tc)?, &task.output, tc.seed)
        }
        Command::FinetuneAnnotate { task, label_col, classes, freeze_base } => {
            let base = load_model(&task.model)?;
            let labeled = split_column(&load_rows(&task.table)?, &label_col)?
                .into_iter()
                .map(|(t, l)| {
                    let y = l.trim().parse::<usize>().map_err(|_| CliError::Data(format!("label {l:?} is not a class index")))?;
                    Ok((t, y))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = classes.unwrap_or_else(|| labeled.iter().map(|p| p.1 + 1).max().unwrap_or(1));
            let mut tc = ctx.train(&task.train)?;
            tc.freeze_base = freeze_base;
            save_outcome(&finetune_classifier(&base, &labeled, n, &tc)?, &task.output, tc.seed)
        }
        Command::FinetuneIe { task, attr, label_col } => {
            let base = load_model(&task.model)?;
            let labeled = split_column(&load_rows(&task.table)?, &label_col)?
                .into_iter()
                .map(|(t, l)| {
                    let (s, e) = locate_span(&base, &t, &attr, &l)?;
                    Ok((t, s, e))
                })
                .collect::<Result<Vec<_>>>()?;
            let tc = ctx.train(&task.train)?;
            save_outcome(&finetune_span(&base, &labeled, &tc)?, &task.output, tc.seed)
        }
        Command::FinetuneEr { task, margin } => {
            let base = load_model(&task.model)?;
            let pairs = load_pairs(&task.table)?;
            let tc = ctx.train(&task.train)?;
            save_outcome(&finetune_siamese(&base, &pairs, margin, &tc)?, &task.output, tc.seed)
        }
        Command::CollabExport { base, tuned, client, steps, output } => {
            let (b, t) = (load_model(&base)?, load_model(&tuned)?);
            export_delta(&b.params, &t.params, client, steps)?.save(&output)?;
            print_json(&json!({ "output": output }))
        }
        Command::CollabMerge { base, delta, weights, output } => {
            let mut ck = load_model(&base)?;
            let deltas = delta
                .iter()
                .map(|p| {
                    require(p)?;
                    Ok(Delta::load(p)?)
                })
                .collect::<Result<Vec<_>>>()?;
            ck.params = merge(&ck.params, &deltas, weights.as_deref())?;
            ck.save(&output)?;
            let clients: Vec<&str> = deltas.iter().map(|d| d.client.as_str()).collect();
            print_json(&json!({ "output": output, "clients": clients }))
        }
        Command::PetMatcher { a, b, unmatched, prompt } => rank_prompt(instantiate_matcher(&a, &b, !unmatched)?, &prompt),
        Command::PetConsolidate { preferred, other, prompt } => {
            rank_prompt(instantiate_consolidator(&preferred, &other)?, &prompt)
        }
        Command::PetConflicts { pairs } => {
            let rows = load_rows(&pairs)?;
            let triples = rows
                .iter()
                .map(|t| {
                    let get = |c: &str| t.get(c).ok_or_else(|| CliError::Data(format!("missing column {c:?}")));
                    Ok((get("a")?.to_string(), get("b")?.to_string(), parse_flag(get("match")?)?))
                })
                .collect::<Result<Vec<_>>>()?;
            print_json(&detect_cluster_conflicts(&triples))
        }
        Command::PetQuestion { template, text, label, model, k } => {
            let ck = model.as_deref().map(load_model).transpose()?;
            print_json(&generate_ie_question(&template, &text, &label, ck.as_ref(), k)?)
        }
        Command::Eval { model, task, table, attrs, validation, test, predictions, output } => {
            let ck = load_model(&model)?;
            let seed = ctx.seed();
            let report = match task {
                EvalTask::Fill => {
                    let table = table.ok_or_else(|| CliError::Usage("--table is required for the fill task".into()))?;
                    let rows = load_rows(&table)?;
                    let attrs = attrs.unwrap_or_else(|| rows[0].names().map(str::to_string).collect());
                    let (mut report, preds) = masked_fill_eval(&ck, &rows, &attrs, seed, ctx.exec)?;
                    if let Some(p) = predictions {
                        write_predictions_csv(sink(Some(&p))?, &preds)?;
                        report.predictions = Some(p.display().to_string());
                    }
                    report
                }
                EvalTask::Matcher => {
                    let (Some(v), Some(t)) = (validation, test) else {
                        return Err(CliError::Usage("--validation and --test are required for the matcher task".into()));
                    };
                    matcher_eval(&ck, &load_pairs(&v)?, &load_pairs(&t)?, seed, ctx.exec)?
                }
            };
            let mut w = sink(output.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
            writeln!(w).map_err(Error::from)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RPT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
