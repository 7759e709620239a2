//! Synthetic shape-scene corpus.
//!
//! Scenes are colored shapes on a noisy gray canvas, each described by one
//! templated caption naming two objects and their spatial relation. The
//! generator guarantees that the caption is the unique canonical description
//! of the scene, so exact-match accuracy is a meaningful training signal,
//! and that object boxes sit on the encoder's patch grid, so a perfectly
//! attending model can reach IoU 1.

pub mod corpus;
pub mod scene;
pub mod vocab;

pub use corpus::{
    generate_corpus, groundable_words, load_split, relation_class_set, CorpusCounts, LoadedSample,
    SampleRecord,
};
pub use scene::{generate_scene, SceneSample, SceneSpec, COLOR_NAMES, RELATION_LEXICON, SHAPE_NOUNS};
pub use vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
