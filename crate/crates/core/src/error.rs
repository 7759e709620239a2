//! Error type shared across the crate.
//!
//! Shape violations inside the computation graph are programmer errors and
//! panic; everything that can fail on user data or disk state goes through
//! [`Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Image dimensions are not divisible by the patch size.
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    BadPatchGrid {
        height: usize,
        width: usize,
        patch: usize,
    },

    /// An attention map whose maximum is not positive cannot be normalized.
    #[error("attention map has no positive mass (max = {max})")]
    DegenerateMap { max: f64 },

    /// A binary mask with no set pixels has no bounding box.
    #[error("mask contains no foreground pixels")]
    EmptyMask,

    /// Box extraction applies only to maps laid out on the patch grid.
    #[error("map length {len} does not match grid {rows}x{cols}")]
    BadGrid { len: usize, rows: usize, cols: usize },

    /// Metric computations need at least one record.
    #[error("no records to evaluate")]
    NoRecords,

    /// Corpus-level statistics need at least one caption.
    #[error("corpus is empty")]
    EmptyCorpus,

    /// Average precision is undefined without positive labels.
    #[error("no positive labels in any class")]
    NoPositives,

    /// A token id outside the vocabulary reached the decoder.
    #[error("token id {id} is outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    /// Paired sequences must have equal length.
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Scene construction gave up after the retry budget.
    #[error("could not place objects after {attempts} attempts (seed {seed})")]
    InfeasiblePlacement { attempts: usize, seed: u64 },

    /// Training aborts when the loss stops being a number.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    /// Checkpoint bytes do not describe the expected parameter set.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A corpus directory is missing files or contains malformed records.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Malformed image file.
    #[error("image format error: {0}")]
    ImageFormat(String),

    /// Vocabulary file or lookup problem.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the offending path to an i/o error.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
