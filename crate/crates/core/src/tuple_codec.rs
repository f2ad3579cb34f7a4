//! Tuple serialization: `[A] name [V] value ...` token sequences with
//! position and column channels, the word-level vocabulary, and CSV ingest.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const ATTR: u32 = 5;
pub const VAL: u32 = 6;

pub const SPECIALS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<unk>", "[M]", "[A]", "[V]"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

const VOCAB_HEADER: &str = "RPTVOCAB 1";

/// One relational row: ordered `(attribute name, value)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Tuple {
    attrs: Vec<(String, String)>,
}

impl Tuple {
    /// Builds a tuple, rejecting blank or duplicate attribute names.
    pub fn new<N, V, I>(attrs: I) -> Result<Self>
    where
        N: Into<String>,
        V: Into<String>,
        I: IntoIterator<Item = (N, V)>,
    {
        let attrs: Vec<(String, String)> =
            attrs.into_iter().map(|(n, v)| (n.into(), v.into())).collect();
        let mut seen = HashSet::new();
        for (name, _) in &attrs {
            if name.trim().is_empty() {
                return Err(Error::InvalidTuple("blank attribute name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidTuple(format!("duplicate attribute {name:?}")));
            }
        }
        Ok(Tuple { attrs })
    }

    /// Decoder output may violate the name invariants; it is kept as-is.
    pub(crate) fn from_raw(attrs: Vec<(String, String)>) -> Self {
        Tuple { attrs }
    }

    pub fn attrs(&self) -> &[(String, String)] {
        &self.attrs
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attrs.iter().map(|(n, _)| n.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.attrs.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    /// Returns a copy with `name` set to `value`.
    pub fn with_value(&self, name: &str, value: impl Into<String>) -> Result<Tuple> {
        let idx = self
            .position(name)
            .ok_or_else(|| Error::MissingAttribute(name.to_string()))?;
        let mut out = self.clone();
        out.attrs[idx].1 = value.into();
        Ok(out)
    }
}

impl fmt::Display for Tuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (n, v)) in self.attrs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{n}: {v:?}")?;
        }
        f.write_str("}")
    }
}

/// Lowercases and splits on whitespace; each punctuation character becomes
/// its own token.
pub fn normalize_token(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in raw.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Normalized tokens joined by single spaces.
pub fn normalize_value(raw: &str) -> String {
    normalize_token(raw).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIALS[..].iter().map(|s| s.to_string()).collect())
            .expect("specials are well-formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS[..] {
            return Err(Error::Malformed("vocabulary must start with the special tokens".into()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\t', '\n', '\r']) {
                return Err(Error::Malformed(format!("bad vocabulary token at id {i}")));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { token_to_id, id_to_token: tokens })
    }

    /// Specials followed by `words` in order, duplicates dropped. Handy for
    /// plain dictionaries.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Ordinary (non-special) tokens with their ids.
    pub fn ordinary(&self) -> impl Iterator<Item = (u32, &str)> {
        self.id_to_token
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for (i, t) in self.id_to_token.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim_end() == VOCAB_HEADER => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(Error::Malformed(format!("missing {VOCAB_HEADER:?} header"))),
        }
        let mut tokens = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Malformed(format!("vocabulary line {}: no tab", n + 2)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Malformed(format!("vocabulary line {}: bad id", n + 2)))?;
            if id != tokens.len() {
                return Err(Error::Malformed(format!(
                    "vocabulary line {}: id {id} out of order",
                    n + 2
                )));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Token frequency counter feeding [`Vocabulary`] construction.
#[derive(Debug, Default, Clone)]
pub struct VocabBuilder {
    counts: HashMap<String, usize>,
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_text(&mut self, raw: &str) -> &mut Self {
        for t in normalize_token(raw) {
            *self.counts.entry(t).or_default() += 1;
        }
        self
    }

    pub fn add_tuple(&mut self, t: &Tuple) -> &mut Self {
        for (n, v) in t.attrs() {
            self.add_text(n);
            self.add_text(v);
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Specials first, then tokens by descending frequency, ties broken
    /// lexicographically.
    pub fn build(&self, min_freq: usize) -> Result<Vocabulary> {
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be >= 1".into()));
        }
        let mut entries: Vec<(&String, usize)> = self
            .counts
            .iter()
            .filter(|(t, &c)| c >= min_freq && !SPECIALS.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t.clone()));
        Vocabulary::from_tokens(tokens)
    }
}

pub fn build_vocab(tables: &[Tuple], min_freq: usize) -> Result<Vocabulary> {
    if tables.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut b = VocabBuilder::new();
    for t in tables {
        b.add_tuple(t);
    }
    b.build(min_freq)
}

/// Role of a token inside an encoded tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Marker,
    AttrName,
    AttrValue,
    Control,
}

/// Parallel channels describing one encoded tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub column_ids: Vec<usize>,
    pub kinds: Vec<Kind>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of attribute groups (largest column id).
    pub fn n_columns(&self) -> usize {
        self.column_ids.iter().copied().max().unwrap_or(0)
    }

    /// Positions of the name tokens and value tokens of 1-based column `col`.
    pub fn attr_spans(&self, col: usize) -> Option<(Range<usize>, Range<usize>)> {
        let pos: Vec<usize> = (0..self.len()).filter(|&i| self.column_ids[i] == col).collect();
        let (&first, &last) = (pos.first()?, pos.last()?);
        let val = (first..=last).find(|&i| self.token_ids[i] == VAL && self.kinds[i] == Kind::Marker)?;
        Some((first + 1..val, val + 1..last + 1))
    }

    /// Kind used for attention rules: markers count as the span they open.
    pub fn effective_kind(&self, i: usize) -> Kind {
        match (self.kinds[i], self.token_ids[i]) {
            (Kind::Marker, ATTR) => Kind::AttrName,
            (Kind::Marker, VAL) => Kind::AttrValue,
            (k, _) => k,
        }
    }

    pub(crate) fn reindex_positions(&mut self) {
        self.position_ids = (0..self.token_ids.len()).collect();
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.token_ids.iter().map(|&id| vocab.token(id)).collect::<Vec<_>>().join(" ")
    }
}

/// Serializes a tuple as `BOS ([A] name.. [V] value..)* EOS`.
pub fn encode_tuple(t: &Tuple, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut seq = TokenSequence {
        token_ids: vec![BOS],
        position_ids: Vec::new(),
        column_ids: vec![0],
        kinds: vec![Kind::Control],
    };
    for (k, (name, value)) in t.attrs().iter().enumerate() {
        let col = k + 1;
        let mut push = |id: u32, kind: Kind| {
            seq.token_ids.push(id);
            seq.column_ids.push(col);
            seq.kinds.push(kind);
        };
        push(ATTR, Kind::Marker);
        for tok in normalize_token(name) {
            push(vocab.id_or_unk(&tok), Kind::AttrName);
        }
        push(VAL, Kind::Marker);
        for tok in normalize_token(value) {
            push(vocab.id_or_unk(&tok), Kind::AttrValue);
        }
    }
    seq.token_ids.push(EOS);
    seq.column_ids.push(0);
    seq.kinds.push(Kind::Control);
    seq.reindex_positions();
    if seq.len() > max_len {
        return Err(Error::SequenceTooLong { tuple: t.to_string(), len: seq.len(), max: max_len });
    }
    Ok(seq)
}

/// Output of [`decode_tuple`]; `malformed` is set when the marker structure
/// had to be repaired (stray `[V]`, missing `[V]`, blank or duplicate names).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tuple: Tuple,
    pub malformed: bool,
}

/// Lenient inverse of [`encode_tuple`]. Reading stops at the first EOS.
pub fn decode_tuple(ids: &[u32], vocab: &Vocabulary) -> Decoded {
    #[derive(PartialEq)]
    enum State {
        Outside,
        Name,
        Value,
    }
    let mut attrs: Vec<(Vec<&str>, Vec<&str>)> = Vec::new();
    let mut state = State::Outside;
    let mut malformed = false;
    for &id in ids {
        match id {
            EOS => break,
            BOS | PAD => {}
            ATTR => {
                if state == State::Name {
                    // name without [V]
                    malformed = true;
                }
                attrs.push((Vec::new(), Vec::new()));
                state = State::Name;
            }
            VAL => {
                if state != State::Name {
                    malformed = true;
                    attrs.push((Vec::new(), Vec::new()));
                }
                state = State::Value;
            }
            _ => {
                let tok = vocab.token(id);
                match state {
                    State::Name => attrs.last_mut().unwrap().0.push(tok),
                    State::Value => attrs.last_mut().unwrap().1.push(tok),
                    State::Outside => malformed = true,
                }
            }
        }
    }
    if state == State::Name {
        malformed = true;
    }
    let mut seen = HashSet::new();
    let pairs: Vec<(String, String)> = attrs
        .into_iter()
        .map(|(n, v)| (n.join(" "), v.join(" ")))
        .collect();
    for (n, _) in &pairs {
        if n.is_empty() || !seen.insert(n.clone()) {
            malformed = true;
        }
    }
    Decoded { tuple: Tuple::from_raw(pairs), malformed }
}

/// Reads a headed CSV table from any reader; `origin` names it in errors.
pub fn read_table<R: std::io::Read>(reader: R, origin: &Path) -> Result<Vec<Tuple>> {
    let err = |msg: String| Error::Table { path: origin.to_path_buf(), msg };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(err("missing header row".into())),
        Some(Err(e)) => return Err(err(format!("header: {}", csv_msg(&e)))),
        Some(Ok(h)) => h,
    };
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if names.iter().all(|n| n.is_empty()) {
        return Err(err("missing header row".into()));
    }
    // validate names once
    Tuple::new(names.iter().map(|n| (n.clone(), String::new())))
        .map_err(|e| err(format!("header: {e}")))?;
    let mut out = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| err(format!("row {row}: {}", csv_msg(&e))))?;
        if rec.len() != names.len() {
            return Err(err(format!(
                "row {row}: expected {} fields, found {}",
                names.len(),
                rec.len()
            )));
        }
        out.push(Tuple::from_raw(
            names.iter().cloned().zip(rec.iter().map(str::to_string)).collect(),
        ));
    }
    Ok(out)
}

fn csv_msg(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".to_string(),
        _ => e.to_string(),
    }
}

/// One tuple per data row, attribute names from the header.
pub fn load_table(path: impl AsRef<Path>) -> Result<Vec<Tuple>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::Table {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    read_table(std::io::BufReader::new(f), path)
}

/// Writes tuples sharing the first tuple's schema as CSV.
pub fn write_table<W: Write>(w: W, rows: &[Tuple]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if let Some(first) = rows.first() {
        wtr.write_record(first.names()).map_err(csv_io)?;
        for r in rows {
            wtr.write_record(r.attrs().iter().map(|(_, v)| v.as_str())).map_err(csv_io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
