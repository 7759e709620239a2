//! Grounded image captioning trained from captions alone.
//!
//! The model couples a transformer patch encoder with an LSTM decoder whose
//! cross-attention, summed over heads, doubles as a word-level localization
//! map. No box supervision enters training: boxes are read off the attention
//! maps afterwards by thresholding. The crate provides the numerics (a small
//! reverse-mode tape), the model, box extraction, grounding metrics, a
//! synthetic shape-scene corpus, and the training loop; `vlamcap-cli` wraps
//! it all in a command-line tool.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pixmap;
pub mod synthcorpus;
pub mod training;

pub use error::{Error, Result};
