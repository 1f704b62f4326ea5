//! Byte- and character-level vocabularies, corpus ingestion and
//! train/validation splitting.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default cap on tokens per corpus line.
pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary needs at least 2 symbols, found {0}")]
    TooSmall(usize),
    #[error("unknown symbol(s) not in vocabulary: {0:?}")]
    UnknownSymbols(Vec<String>),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("need at least 2 sequences to split, got {0}")]
    TooFewSequences(usize),
    #[error("unknown token mode {0:?} (expected byte or char)")]
    BadMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenMode {
    Byte,
    Char,
}

impl TokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenMode::Byte => "byte",
            TokenMode::Char => "char",
        }
    }
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenMode {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "byte" => Ok(TokenMode::Byte),
            "char" => Ok(TokenMode::Char),
            other => Err(VocabError::BadMode(other.to_string())),
        }
    }
}

/// An ordered set of atomic symbols. Ids `0..V` index `symbols`.
///
/// In byte mode a symbol is a byte value; in char mode it is a Unicode
/// scalar value. Symbols are kept sorted so that the id assignment only
/// depends on the set of symbols seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    symbols: Vec<u32>,
    index: HashMap<u32, u32>,
}

impl Vocab {
    /// Builds the vocabulary of distinct symbols in `corpus`.
    pub fn build(corpus: &str, mode: TokenMode) -> Result<Self, VocabError> {
        if corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut symbols: Vec<u32> = match mode {
            TokenMode::Byte => corpus.bytes().map(u32::from).collect(),
            TokenMode::Char => corpus.chars().map(u32::from).collect(),
        };
        symbols.sort_unstable();
        symbols.dedup();
        // A single-symbol corpus still needs a second id; newline is the
        // natural companion since lines are the sequence boundary.
        if symbols.len() == 1 {
            let nl = u32::from(b'\n');
            if symbols[0] != nl {
                symbols.push(nl);
                symbols.sort_unstable();
            }
        }
        Self::from_symbols(mode, symbols)
    }

    /// Reconstructs a vocabulary from an explicit symbol list (e.g. a checkpoint).
    pub fn from_symbols(mode: TokenMode, symbols: Vec<u32>) -> Result<Self, VocabError> {
        if symbols.len() < 2 {
            return Err(VocabError::TooSmall(symbols.len()));
        }
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i as u32))
            .collect::<HashMap<_, _>>();
        if index.len() != symbols.len() {
            return Err(VocabError::TooSmall(index.len()));
        }
        Ok(Self { mode, symbols, index })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn id_of(&self, symbol: u32) -> Option<u32> {
        self.index.get(&symbol).copied()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence, VocabError> {
        let units: Vec<u32> = match self.mode {
            TokenMode::Byte => text.bytes().map(u32::from).collect(),
            TokenMode::Char => text.chars().map(u32::from).collect(),
        };
        let mut ids = Vec::with_capacity(units.len());
        let mut unknown: Vec<String> = Vec::new();
        for u in units {
            match self.index.get(&u) {
                Some(&id) => ids.push(id),
                None => {
                    let shown = self.render_symbol(u);
                    if !unknown.contains(&shown) {
                        unknown.push(shown);
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(VocabError::UnknownSymbols(unknown));
        }
        Ok(TokenSequence::from(ids))
    }

    /// Decodes ids back to text. Byte sequences that are not valid UTF-8
    /// (possible when sampling byte tokens) are decoded lossily.
    pub fn decode(&self, seq: &[u32]) -> Result<String, VocabError> {
        let mut units = Vec::with_capacity(seq.len());
        for &id in seq {
            let sym = *self.symbols.get(id as usize).ok_or(VocabError::IdOutOfRange {
                id,
                size: self.size(),
            })?;
            units.push(sym);
        }
        Ok(match self.mode {
            TokenMode::Byte => {
                let bytes: Vec<u8> = units.iter().map(|&u| u as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            TokenMode::Char => units
                .iter()
                .map(|&u| char::from_u32(u).unwrap_or(char::REPLACEMENT_CHARACTER))
                .collect(),
        })
    }

    /// Splits `text` into one token sequence per non-empty line, truncating
    /// each to `max_len` tokens.
    pub fn encode_lines(&self, text: &str, max_len: usize) -> Result<Vec<TokenSequence>, VocabError> {
        text.lines()
            .filter(|line| !line.is_empty())
            .map(|line| {
                let mut seq = self.encode(line)?;
                seq.ids.truncate(max_len);
                Ok(seq)
            })
            .collect()
    }

    fn render_symbol(&self, unit: u32) -> String {
        match self.mode {
            TokenMode::Byte => format!("0x{unit:02x}"),
            TokenMode::Char => char::from_u32(unit).map(String::from).unwrap_or_default(),
        }
    }
}

/// A sequence of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.ids
    }

    /// Checks every id against a vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<(), VocabError> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(VocabError::IdOutOfRange { id, size: vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self { ids }
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    /// Fraction of sequences assigned to the training side.
    pub split_fraction: f64,
}

/// Shuffles sequence indices with a seeded generator and assigns
/// `round((1 - fraction) * N)` of them (at least one, at most `N - 1`) to
/// validation. Relative order inside each side follows the original order.
pub fn split_corpus(
    sequences: Vec<TokenSequence>,
    fraction: f64,
    seed: u64,
) -> Result<CorpusSplit, VocabError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(VocabError::BadFraction(fraction));
    }
    let n = sequences.len();
    if n < 2 {
        return Err(VocabError::TooFewSequences(n));
    }
    let n_val = (((1.0 - fraction) * n as f64).round() as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }

    let mut train = Vec::with_capacity(n - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (seq, val) in sequences.into_iter().zip(is_val) {
        if val {
            validation.push(seq);
        } else {
            train.push(seq);
        }
    }
    Ok(CorpusSplit {
        train,
        validation,
        split_fraction: fraction,
    })
}
