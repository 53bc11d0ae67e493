//! Synthetic structured documents: vocabulary, generators, semantic shuffle
//! and the on-disk corpus format.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::{self, streams, Rng};
use crate::{fnv1a64, otsl};

pub type TokenId = u32;

/// Token classes used to build a [`Vocabulary`]. Order inside each class is
/// preserved; classes are laid out in field order.
#[derive(Debug, Clone)]
pub struct VocabConfig {
    /// MASK, EOS, PAD in that order.
    pub specials: [String; 3],
    /// Task tags for text, table, formula.
    pub tags: [String; 3],
    /// FCEL, ECEL, NL.
    pub structural: [String; 3],
    pub words: Vec<String>,
    pub digits: Vec<String>,
    /// Binary operators plus `^`, `{`, `}`.
    pub operators: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        let s = |x: &str| x.to_string();
        Self {
            specials: [s("[MASK]"), s("[EOS]"), s("[PAD]")],
            tags: [s("<text>"), s("<table>"), s("<formula>")],
            structural: [s("FCEL"), s("ECEL"), s("NL")],
            words: (b'a'..=b'z').map(|c| (c as char).to_string()).collect(),
            digits: (b'0'..=b'9').map(|c| (c as char).to_string()).collect(),
            operators: ["+", "-", "=", "^", "{", "}"].iter().map(|x| s(x)).collect(),
        }
    }
}

pub const MAX_VOCAB: usize = 128;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pub mask: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub tag_text: TokenId,
    pub tag_table: TokenId,
    pub tag_formula: TokenId,
    pub fcel: TokenId,
    pub ecel: TokenId,
    pub nl: TokenId,
    pub caret: TokenId,
    pub lbrace: TokenId,
    pub rbrace: TokenId,
    words: Vec<TokenId>,
    digits: Vec<TokenId>,
    binary_ops: Vec<TokenId>,
    class: Vec<TokenClass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Tag,
    Structural,
    Word,
    Digit,
    Operator,
}

pub fn build_vocabulary(config: &VocabConfig) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    let mut class = Vec::new();
    let groups: [(&[String], TokenClass); 6] = [
        (&config.specials, TokenClass::Special),
        (&config.tags, TokenClass::Tag),
        (&config.structural, TokenClass::Structural),
        (&config.words, TokenClass::Word),
        (&config.digits, TokenClass::Digit),
        (&config.operators, TokenClass::Operator),
    ];
    for (group, c) in groups {
        for t in group {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token string {t:?}")));
            }
            tokens.push(t.clone());
            class.push(c);
        }
    }
    if tokens.len() > MAX_VOCAB {
        return Err(Error::Config(format!(
            "vocabulary size {} exceeds {MAX_VOCAB}",
            tokens.len()
        )));
    }
    let mut index = HashMap::new();
    for (i, t) in tokens.iter().enumerate() {
        if index.insert(t.clone(), i as TokenId).is_some() {
            return Err(Error::Config(format!("duplicate token {t:?}")));
        }
    }
    if config.words.is_empty() {
        return Err(Error::Config("vocabulary needs at least one word".into()));
    }
    let find = |s: &str| -> Result<TokenId> {
        config
            .operators
            .iter()
            .position(|o| o == s)
            .map(|p| index[&config.operators[p]])
            .ok_or_else(|| Error::Config(format!("operator class must contain {s:?}")))
    };
    let caret = find("^")?;
    let lbrace = find("{")?;
    let rbrace = find("}")?;
    let ids_of = |c: TokenClass| -> Vec<TokenId> {
        (0..tokens.len() as TokenId)
            .filter(|&i| class[i as usize] == c)
            .collect()
    };
    let binary_ops: Vec<TokenId> = ids_of(TokenClass::Operator)
        .into_iter()
        .filter(|&i| i != caret && i != lbrace && i != rbrace)
        .collect();
    if binary_ops.is_empty() {
        return Err(Error::Config("operator class needs a binary operator".into()));
    }
    let id = |s: &String| index[s];
    Ok(Vocabulary {
        mask: id(&config.specials[0]),
        eos: id(&config.specials[1]),
        pad: id(&config.specials[2]),
        tag_text: id(&config.tags[0]),
        tag_table: id(&config.tags[1]),
        tag_formula: id(&config.tags[2]),
        fcel: id(&config.structural[0]),
        ecel: id(&config.structural[1]),
        nl: id(&config.structural[2]),
        caret,
        lbrace,
        rbrace,
        words: ids_of(TokenClass::Word),
        digits: ids_of(TokenClass::Digit),
        binary_ops,
        tokens,
        index,
        class,
    })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        self.class[id as usize]
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        self.class.get(id as usize) == Some(&TokenClass::Word)
    }

    pub fn words(&self) -> &[TokenId] {
        &self.words
    }

    pub fn digits(&self) -> &[TokenId] {
        &self.digits
    }

    pub fn binary_ops(&self) -> &[TokenId] {
        &self.binary_ops
    }

    pub fn tag_for(&self, kind: DocKind) -> TokenId {
        match kind {
            DocKind::Text => self.tag_text,
            DocKind::Table => self.tag_table,
            DocKind::Formula => self.tag_formula,
        }
    }

    /// Tokens a decoder may emit: everything except MASK, PAD and task tags.
    pub fn emittable(&self) -> Vec<bool> {
        (0..self.len() as TokenId)
            .map(|i| i != self.mask && i != self.pad && self.class(i) != TokenClass::Tag)
            .collect()
    }

    /// 64-bit FNV-1a over the ordered token list (each token's UTF-8 bytes
    /// followed by a NUL separator).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        fnv1a64(&bytes)
    }

    pub fn render_tokens(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_tokens(&self, s: &str) -> Result<Vec<TokenId>> {
        s.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Data(format!("unknown token {t:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DocKind {
    Text,
    Table,
    Formula,
}

impl DocKind {
    pub const ALL: [DocKind; 3] = [DocKind::Text, DocKind::Table, DocKind::Formula];

    pub fn as_str(self) -> &'static str {
        match self {
            DocKind::Text => "text",
            DocKind::Table => "table",
            DocKind::Formula => "formula",
        }
    }
}

impl fmt::Display for DocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DocKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(DocKind::Text),
            "table" => Ok(DocKind::Table),
            "formula" => Ok(DocKind::Formula),
            _ => Err(Error::Data(format!("unknown document kind {s:?}"))),
        }
    }
}

/// Generation parameters recorded with a document. Zero means not applicable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DocMeta {
    pub rows: u32,
    pub cols: u32,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: u64,
    pub kind: DocKind,
    /// Body tokens followed by a single EOS.
    pub tokens: Vec<TokenId>,
    pub meta: DocMeta,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions holding word tokens.
    pub fn word_positions(&self, vocab: &Vocabulary) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| vocab.is_word(self.tokens[i]))
            .collect()
    }
}

/// Order-1 Markov chain over the word tokens.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    states: Vec<TokenId>,
    state_of: HashMap<TokenId, usize>,
    initial: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl MarkovModel {
    /// Random peaked transition table: each row ranks successors by a seeded
    /// permutation and assigns mass proportional to `exp(-rank / sharpness)`.
    /// Every entry is positive so every state is reachable.
    pub fn random(vocab: &Vocabulary, sharpness: f64, seed: u64) -> Result<Self> {
        if !(sharpness > 0.0) {
            return Err(Error::Config("markov sharpness must be positive".into()));
        }
        let states = vocab.words().to_vec();
        let n = states.len();
        let mut rng = seed::child_rng(seed, streams::MARKOV, 0);
        let mut transitions = Vec::with_capacity(n);
        for _ in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut row = vec![0.0; n];
            for (rank, &j) in order.iter().enumerate() {
                row[j] = (-(rank as f64) / sharpness).exp();
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
            transitions.push(row);
        }
        Self::from_table(states, vec![1.0 / n as f64; n], transitions)
    }

    pub fn from_table(
        states: Vec<TokenId>,
        initial: Vec<f64>,
        transitions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = states.len();
        if n == 0 || initial.len() != n || transitions.len() != n {
            return Err(Error::Config("markov table shape mismatch".into()));
        }
        let check = |row: &[f64]| {
            row.len() == n
                && row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if !check(&initial) || !transitions.iter().all(|r| check(r)) {
            return Err(Error::Config("markov rows must be distributions".into()));
        }
        // Every state needs an incoming edge (or initial mass).
        for j in 0..n {
            if initial[j] == 0.0 && transitions.iter().all(|r| r[j] == 0.0) {
                return Err(Error::Config(format!("markov state {j} unreachable")));
            }
        }
        let state_of = states.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Ok(Self {
            states,
            state_of,
            initial,
            transitions,
        })
    }

    pub fn states(&self) -> &[TokenId] {
        &self.states
    }

    pub fn row(&self, token: TokenId) -> Option<&[f64]> {
        self.state_of.get(&token).map(|&i| self.transitions[i].as_slice())
    }

    pub fn state_index(&self, token: TokenId) -> Option<usize> {
        self.state_of.get(&token).copied()
    }

    fn draw(rng: &mut Rng, dist: &[f64]) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.len() - 1
    }

    /// Next word given the previous one (or the initial distribution).
    pub fn next(&self, prev: Option<TokenId>, rng: &mut Rng) -> TokenId {
        let dist = match prev.and_then(|t| self.state_of.get(&t)) {
            Some(&i) => &self.transitions[i],
            None => &self.initial,
        };
        self.states[Self::draw(rng, dist)]
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn exact(n: usize) -> Self {
        Self { min: n, max: n }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("empty {what} range {}..={}", self.min, self.max)));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// Shape knobs for each document kind.
#[derive(Debug, Clone, PartialEq)]
pub struct DocShape {
    /// Body length of text documents (EOS excluded).
    pub text_len: SizeRange,
    pub table_rows: SizeRange,
    pub table_cols: SizeRange,
    pub p_empty: f64,
    pub formula_depth: SizeRange,
    /// Maximum document length L including EOS.
    pub max_len: usize,
}

impl Default for DocShape {
    fn default() -> Self {
        Self {
            text_len: SizeRange::new(16, 48),
            table_rows: SizeRange::new(2, 4),
            table_cols: SizeRange::new(2, 4),
            p_empty: 0.15,
            formula_depth: SizeRange::new(1, 4),
            max_len: 128,
        }
    }
}

impl DocShape {
    /// Largest body a document of `kind` can reach under this shape.
    pub fn max_body(&self, kind: DocKind) -> usize {
        match kind {
            DocKind::Text => self.text_len.max,
            DocKind::Table => self.table_rows.max * (2 * self.table_cols.max + 1),
            DocKind::Formula => 4 * self.formula_depth.max + 3,
        }
    }

    pub fn validate(&self, kind: DocKind) -> Result<()> {
        match kind {
            DocKind::Text => {
                self.text_len.check("text length")?;
                if self.text_len.min == 0 {
                    return Err(Error::Config("text length must be at least 1".into()));
                }
            }
            DocKind::Table => {
                self.table_rows.check("table rows")?;
                self.table_cols.check("table cols")?;
                if self.table_rows.min == 0 || self.table_cols.min == 0 {
                    return Err(Error::Config("tables need at least one row and column".into()));
                }
                if !(0.0..=1.0).contains(&self.p_empty) {
                    return Err(Error::Config("p_empty must be in [0,1]".into()));
                }
            }
            DocKind::Formula => self.formula_depth.check("formula depth")?,
        }
        if self.max_len < 2 || self.max_body(kind) > self.max_len - 1 {
            return Err(Error::Config(format!(
                "{kind} documents can reach {} tokens, more than max length {} minus EOS",
                self.max_body(kind),
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Draws one document of `kind`; EOS is appended.
pub fn sample_document(
    id: u64,
    kind: DocKind,
    shape: &DocShape,
    vocab: &Vocabulary,
    markov: &MarkovModel,
    rng: &mut Rng,
) -> Result<Document> {
    shape.validate(kind)?;
    let mut meta = DocMeta::default();
    let mut tokens = Vec::new();
    match kind {
        DocKind::Text => {
            let n = shape.text_len.draw(rng);
            let mut prev = None;
            for _ in 0..n {
                let w = markov.next(prev, rng);
                tokens.push(w);
                prev = Some(w);
            }
        }
        DocKind::Table => {
            let rows = shape.table_rows.draw(rng);
            let cols = shape.table_cols.draw(rng);
            meta.rows = rows as u32;
            meta.cols = cols as u32;
            let mut prev = None;
            for _ in 0..rows {
                for _ in 0..cols {
                    if shape.p_empty > 0.0 && rng.gen_bool(shape.p_empty) {
                        tokens.push(vocab.ecel);
                    } else {
                        let w = markov.next(prev, rng);
                        prev = Some(w);
                        tokens.push(vocab.fcel);
                        tokens.push(w);
                    }
                }
                tokens.push(vocab.nl);
            }
        }
        DocKind::Formula => {
            let depth = shape.formula_depth.draw(rng);
            meta.depth = depth as u32;
            formula(depth, vocab, rng, &mut tokens);
        }
    }
    tokens.push(vocab.eos);
    Ok(Document {
        id,
        kind,
        tokens,
        meta,
    })
}

fn atom(vocab: &Vocabulary, rng: &mut Rng) -> TokenId {
    let n = vocab.words().len() + vocab.digits().len();
    let i = rng.gen_range(0..n);
    if i < vocab.words().len() {
        vocab.words()[i]
    } else {
        vocab.digits()[i - vocab.words().len()]
    }
}

/// expr := atom | atom op atom | atom ^ { expr }
fn formula(depth: usize, vocab: &Vocabulary, rng: &mut Rng, out: &mut Vec<TokenId>) {
    let production = if depth == 0 { 0 } else { rng.gen_range(0..3) };
    out.push(atom(vocab, rng));
    match production {
        0 => {}
        1 => {
            out.push(*vocab.binary_ops().choose(rng).expect("binary ops"));
            out.push(atom(vocab, rng));
        }
        _ => {
            out.push(vocab.caret);
            out.push(vocab.lbrace);
            formula(depth - 1, vocab, rng, out);
            out.push(vocab.rbrace);
        }
    }
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_docs: usize,
    pub shape: DocShape,
    /// Relative frequency of text, table and formula documents.
    pub kind_weights: [f64; 3],
    pub markov_sharpness: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_docs: 1000,
            shape: DocShape::default(),
            kind_weights: [1.0, 1.0, 1.0],
            markov_sharpness: 1.5,
        }
    }
}

/// Generates `config.n_docs` documents with ids `first_id..`. Each document
/// draws from its own stream, so the output is a pure function of
/// `(config, seed)`.
pub fn generate_corpus(
    config: &CorpusConfig,
    vocab: &Vocabulary,
    markov: &MarkovModel,
    seed: u64,
    first_id: u64,
) -> Result<Vec<Document>> {
    let total: f64 = config.kind_weights.iter().sum();
    if !(total > 0.0) || config.kind_weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("kind weights must be non-negative with positive sum".into()));
    }
    for (k, w) in DocKind::ALL.iter().zip(config.kind_weights) {
        if w > 0.0 {
            config.shape.validate(*k)?;
        }
    }
    (0..config.n_docs as u64)
        .map(|i| {
            let id = first_id + i;
            let mut rng = seed::child_rng(seed, streams::CORPUS, id);
            let u: f64 = rng.gen::<f64>() * total;
            let kind = if u < config.kind_weights[0] {
                DocKind::Text
            } else if u < config.kind_weights[0] + config.kind_weights[1] {
                DocKind::Table
            } else {
                DocKind::Formula
            };
            sample_document(id, kind, &config.shape, vocab, markov, &mut rng)
        })
        .collect()
}

/// Permutes a `proportion` of the word tokens among themselves. Structural
/// tokens, digits, operators and EOS keep their positions.
pub fn semantic_shuffle(
    doc: &Document,
    proportion: f64,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<Document> {
    let words = doc.word_positions(vocab);
    let moves = shuffle_moves(&words, proportion, rng)?;
    let mut out = doc.clone();
    for (dst, src) in moves {
        out.tokens[dst] = doc.tokens[src];
    }
    Ok(out)
}

/// Picks `round(proportion * W)` of the word positions and pairs each with
/// the source position it receives its token from (a derangement among the
/// chosen set).
fn shuffle_moves(words: &[usize], proportion: f64, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::Domain(format!("shuffle proportion {proportion} outside [0,1]")));
    }
    let m = (proportion * words.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = sample_indices(rng, words.len(), m)
        .into_iter()
        .map(|i| words[i])
        .collect();
    chosen.sort_unstable();
    if m < 2 {
        return Ok(chosen.iter().map(|&p| (p, p)).collect());
    }
    let perm = random_derangement(m, rng);
    Ok(perm.iter().enumerate().map(|(i, &p)| (chosen[i], chosen[p])).collect())
}

/// Uniform derangement of `0..m` (m ≥ 2) by rejection.
fn random_derangement(m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Train/validation/test partition of a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
}

pub const CORPUS_MAGIC: &str = "#blockdiff-corpus v1";

/// Assigns documents to splits. Validation and test sizes are
/// `round(n * ratio)`; the train split takes the remainder.
pub fn split(docs: &[Document], ratios: [f64; 3], rng: &mut Rng) -> Result<Splits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = docs.len();
    let n_val = (n as f64 * ratios[1]).round() as usize;
    let n_test = ((n as f64 * ratios[2]).round() as usize).min(n - n_val);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = Splits::default();
    for (rank, &i) in order.iter().enumerate() {
        let d = docs[i].clone();
        if rank < n_val {
            splits.val.push(d);
        } else if rank < n_val + n_test {
            splits.test.push(d);
        } else {
            splits.train.push(d);
        }
    }
    for part in [&mut splits.train, &mut splits.val, &mut splits.test] {
        part.sort_by_key(|d| d.id);
    }
    Ok(splits)
}

/// Splits the corpus and writes `train.tsv`, `val.tsv`, `test.tsv` into `dir`.
pub fn split_and_serialize(
    docs: &[Document],
    ratios: [f64; 3],
    rng: &mut Rng,
    dir: &Path,
    vocab: &Vocabulary,
) -> Result<Splits> {
    let splits = split(docs, ratios, rng)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, part) in split_files(dir).iter().zip([&splits.train, &splits.val, &splits.test]) {
        write_corpus(name, part, vocab)?;
    }
    Ok(splits)
}

pub fn split_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join("train.tsv"), dir.join("val.tsv"), dir.join("test.tsv")]
}

pub fn write_corpus(path: &Path, docs: &[Document], vocab: &Vocabulary) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{CORPUS_MAGIC} vocab={:016x}", vocab.fingerprint()).map_err(io)?;
    for d in docs {
        writeln!(w, "{}\t{}\t{}", d.id, d.kind, vocab.render_tokens(&d.tokens)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::Data(format!("{}: empty corpus file", path.display())))?;
    let expected = format!("{CORPUS_MAGIC} vocab={:016x}", vocab.fingerprint());
    if header != expected {
        return Err(Error::Data(format!(
            "{}: header {header:?} does not match vocabulary ({expected:?})",
            path.display()
        )));
    }
    let mut docs = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed record", path.display(), n + 2));
        let mut fields = line.split('\t');
        let id = fields.next().ok_or_else(bad)?.parse::<u64>().map_err(|_| bad())?;
        let kind: DocKind = fields.next().ok_or_else(bad)?.parse()?;
        let tokens = vocab.parse_tokens(fields.next().ok_or_else(bad)?)?;
        if fields.next().is_some() {
            return Err(bad());
        }
        let mut meta = DocMeta::default();
        if kind == DocKind::Table {
            if let Ok(t) = otsl::parse(&tokens, vocab) {
                meta.rows = t.n_rows() as u32;
                meta.cols = t.n_cols() as u32;
            }
        }
        docs.push(Document {
            id,
            kind,
            tokens,
            meta,
        });
    }
    Ok(docs)
}

pub fn read_splits(dir: &Path, vocab: &Vocabulary) -> Result<Splits> {
    let [train, val, test] = split_files(dir);
    Ok(Splits {
        train: read_corpus(&train, vocab)?,
        val: read_corpus(&val, vocab)?,
        test: read_corpus(&test, vocab)?,
    })
}
