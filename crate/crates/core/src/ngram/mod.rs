//! N-gram counting and the co-occurrence mask: the ratio of the empirical
//! joint probability of an n-tuple to the product of its unigram
//! probabilities, stored sparsely in coordinate form.

mod counts;
mod io;
mod mask;

pub use counts::{count_ngrams, count_ngrams_with, shards_from_env, NgramCounts, Subsample, THREADS_ENV};
pub use io::{encoded_len, HEADER_LEN, MAGIC, VERSION};
pub use mask::{apply_transparency, build_mask, CooccurrenceMask, MaskSet, SmoothedEstimate, RATIO_MAX, RATIO_MIN};

use thiserror::Error;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("n-gram order {0} outside 1..=4")]
    BadOrder(usize),
    #[error("order mismatch: expected {expected}, found {found}")]
    OrderMismatch { expected: usize, found: usize },
    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("subsample fraction {0} outside (0, 1]")]
    BadSubsample(f64),
    #[error("smoothing floor {0} must be finite and nonnegative")]
    BadFloor(f64),
    #[error("no counted positions to estimate probabilities from")]
    NoData,
    #[error("mask value {0} must be positive and finite")]
    NonPositive(f64),
    #[error("transparency {0} outside [0, 1]")]
    BadTransparency(f64),
    #[error("no mask of order {0} supplied")]
    MissingOrder(usize),
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported mask version {version} at offset {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("invalid {field} at offset {offset}")]
    InvalidField { field: &'static str, offset: usize },
    #[error("truncated mask file: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("checksum mismatch at offset {offset}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { offset: usize, stored: u32, computed: u32 },
    #[error("{path}: {cause}")]
    File { path: String, cause: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-capacity n-tuple key of token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gram {
    len: u8,
    ids: [u32; MAX_ORDER],
}

impl Gram {
    /// Panics if `ids` is longer than [`MAX_ORDER`].
    pub fn new(ids: &[u32]) -> Self {
        assert!(ids.len() <= MAX_ORDER, "gram longer than {MAX_ORDER}");
        let mut buf = [0u32; MAX_ORDER];
        buf[..ids.len()].copy_from_slice(ids);
        Self {
            len: ids.len() as u8,
            ids: buf,
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
