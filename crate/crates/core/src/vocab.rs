//! Tokenization, vocabulary construction and the word-embedding table.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor, Var};

pub const UNK_TOKEN: &str = "<unk>";
pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";

pub const UNK: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
const RESERVED: [&str; 3] = [UNK_TOKEN, START_TOKEN, END_TOKEN];

/// Standard deviation of the random initialization of every parameter.
pub const INIT_STD: f64 = 0.1;

/// Lowercases, splits on whitespace, and peels leading/trailing ASCII
/// punctuation off each word as one-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| c.is_ascii_punctuation()).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| c.is_ascii_punctuation()).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    /// Builds from tokenized sentences, keeping tokens seen at least
    /// `min_count` times. Indices follow descending count, then token order.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Param("min_count must be at least 1".into()));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Index of `token`, or the unknown-token index.
    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Sentence> {
        encode_sentence(text, self)
    }

    /// `index<TAB>token` lines, preceded by a `#min_count=N` header.
    pub fn to_text(&self) -> String {
        let mut s = format!("#min_count={}\n", self.min_count);
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{i}\t{t}\n"));
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut min_count = 1;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            if let Some(rest) = line.strip_prefix("#min_count=") {
                min_count = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(origin, lineno, "bad min_count header"))?;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (idx, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(origin, lineno, "expected index<TAB>token"))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::format(origin, lineno, format!("bad index {idx:?}")))?;
            if idx != tokens.len() {
                return Err(Error::format(
                    origin,
                    lineno,
                    format!("expected index {}, found {idx}", tokens.len()),
                ));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED.map(String::from) {
            return Err(Error::format(origin, 1, "reserved tokens missing from vocabulary"));
        }
        Ok(Self::from_tokens(tokens, min_count))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(corpus, min_count)
}

/// A tokenized sentence wrapped in start/end markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl Sentence {
    /// The lowercase tokens between the markers, space-joined.
    pub fn detokenize(&self) -> String {
        self.tokens[1..self.tokens.len() - 1].join(" ")
    }

    pub fn unknown_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i == UNK).count()
    }
}

pub fn encode_sentence(text: &str, vocab: &Vocabulary) -> Result<Sentence> {
    let words = tokenize(text);
    if words.is_empty() {
        return Err(Error::Data("cannot encode an empty sentence".into()));
    }
    let mut tokens = Vec::with_capacity(words.len() + 2);
    tokens.push(START_TOKEN.to_string());
    tokens.extend(words);
    tokens.push(END_TOKEN.to_string());
    let ids = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| match i {
            0 => START,
            _ if i == tokens.len() - 1 => END,
            _ => vocab.index_of(t),
        })
        .collect();
    Ok(Sentence { tokens, ids })
}

/// One parsed line of a caption file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub image_id: String,
    pub text: String,
}

/// Reads `image_id<TAB>sentence` lines; blank lines are skipped.
pub fn read_captions(path: &Path) -> Result<Vec<Caption>> {
    read_tab_pairs(path)
        .map(|rows| rows.into_iter().map(|(image_id, text)| Caption { image_id, text }).collect())
}

pub(crate) fn read_tab_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, n + 1, "expected two tab-separated fields"))?;
        if a.is_empty() || b.trim().is_empty() {
            return Err(Error::format(path, n + 1, "empty field"));
        }
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

pub fn write_captions(path: &Path, captions: &[Caption]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for c in captions {
        writeln!(f, "{}\t{}", c.image_id, c.text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Every row drawn from N(0, 0.1²).
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let data = (0..vocab_size * dim).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Tensor::matrix(vocab_size, dim, data).unwrap(),
            trainable: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.weights.row_slice(index)
    }
}

/// Looks up each token's row in `table` (a tape node holding the embedding
/// matrix) and applies dropout, returning one `1 x d` node per token.
pub fn embed_sequence<R: Rng + ?Sized>(
    tape: &mut Tape,
    table: Var,
    sentence: &Sentence,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let dropped = embed_matrix(tape, table, sentence, p, mode, rng)?;
    (0..sentence.ids.len())
        .map(|i| tape.gather_rows(dropped, &[i]))
        .collect()
}

/// Same as [`embed_sequence`] but keeps the tokens as rows of one `N x d` node.
pub fn embed_matrix<R: Rng + ?Sized>(
    tape: &mut Tape,
    table: Var,
    sentence: &Sentence,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let rows = tape.value(table).rows();
    if let Some(&bad) = sentence.ids.iter().find(|&&i| i >= rows) {
        return Err(Error::Contract(format!(
            "token index {bad} out of range for a {rows}-row embedding table"
        )));
    }
    let looked_up = tape.gather_rows(table, &sentence.ids)?;
    tape.dropout(looked_up, p, mode, rng)
}

/// Overwrites rows of `table` for tokens found in a word-vector text file.
/// Returns the number of rows initialized.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, table: &mut EmbeddingTable) -> Result<usize> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let dim = table.dim();
    let mut matched = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 1 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
            continue;
        }
        let found = fields.len() - 1;
        if found != dim {
            return Err(Error::format(
                path,
                lineno,
                format!("expected {dim} vector components, found {found}"),
            ));
        }
        let Some(&row) = vocab.index.get(fields[0]) else {
            continue;
        };
        let mut values = Vec::with_capacity(dim);
        for f in &fields[1..] {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::format(path, lineno, format!("bad number {f:?}")))?,
            );
        }
        table.weights.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&values);
        matched += 1;
    }
    Ok(matched)
}
