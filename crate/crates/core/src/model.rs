//! The assembled captioner: encoder and decoder parameters in a single
//! store, plus persistence.
//!
//! A saved model is a directory with two files: `params.vlam` holding the
//! tensors and `model.json` holding the architecture description needed to
//! rebuild the parameter layout. Loading reconstructs the model from the
//! description and then overwrites every tensor from the checkpoint, which
//! fails loudly on any name or shape mismatch.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    greedy_decode, prepare_visual_context, teacher_forced, DecodedCaption, DecoderConfig,
    DecoderFlags, DecoderParams, WordStepOutput,
};
use crate::encoder::{encode_image, EncoderConfig, EncoderParams, TokenFlags};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Graph, NodeId, ParamBinder, ParamStore};
use crate::pixmap::Image;

/// Architecture description stored beside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub token_flags: TokenFlags,
    pub decoder_flags: DecoderFlags,
    pub grid: (usize, usize),
}

impl ModelSpec {
    /// Default architecture over a square canvas. The grid is the canvas
    /// divided by the default patch side, which must divide it evenly;
    /// vocabulary size, relation-class count, and decode cap come from the
    /// corpus at hand.
    pub fn for_canvas(
        canvas: usize,
        vocab: usize,
        relation_classes: usize,
        max_len: usize,
    ) -> ModelSpec {
        let encoder = EncoderConfig {
            relation_classes,
            ..EncoderConfig::default()
        };
        assert!(
            canvas % encoder.patch == 0,
            "canvas {} is not a multiple of the patch side {}",
            canvas,
            encoder.patch
        );
        let side = canvas / encoder.patch;
        let decoder = DecoderConfig {
            dim: encoder.fused_dim,
            vocab,
            heads: 4,
            max_len,
        };
        ModelSpec {
            encoder,
            decoder,
            token_flags: TokenFlags::default(),
            decoder_flags: DecoderFlags::default(),
            grid: (side, side),
        }
    }
}

pub struct CaptionModel {
    pub store: ParamStore<f32>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub spec: ModelSpec,
}

/// Everything the training loss needs from one teacher-forced pass.
pub struct TeacherForward {
    /// One output per input token, aligned with the shifted targets.
    pub outputs: Vec<WordStepOutput>,
    /// Relation-class logits; present only when the relation row is on.
    pub rel_logits: Option<NodeId>,
}

impl CaptionModel {
    /// Builds a fresh model with seeded initialization. The decoder width
    /// must equal the encoder's fused width: the decoder state and the
    /// value-matrix rows share one space.
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        assert_eq!(
            spec.decoder.dim, spec.encoder.fused_dim,
            "decoder width must match the fused encoder width"
        );
        let n_patches = spec.grid.0 * spec.grid.1;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::new(&mut store, &mut rng, &spec.encoder, n_patches);
        let decoder = DecoderParams::new(&mut store, &mut rng, &spec.decoder, n_patches);
        CaptionModel {
            store,
            encoder,
            decoder,
            spec,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.spec.grid.0 * self.spec.grid.1
    }

    /// Encodes the image and runs the decoder over `input_tokens`
    /// (start token first, caption after it) on the caller's graph.
    pub fn forward_teacher(
        &self,
        g: &mut Graph<f32>,
        binder: &mut ParamBinder,
        image: &Image,
        input_tokens: &[usize],
    ) -> Result<TeacherForward> {
        let features = encode_image(
            g,
            &self.store,
            binder,
            &self.encoder,
            &self.spec.encoder,
            &self.spec.token_flags,
            image,
        )?;
        let rel_logits = features.rel_logits;
        let ctx = prepare_visual_context(g, &self.store, binder, &self.decoder, &features);
        let outputs = teacher_forced(
            g,
            &self.store,
            binder,
            &self.decoder,
            &self.spec.decoder,
            &self.spec.decoder_flags,
            &ctx,
            input_tokens,
        )?;
        Ok(TeacherForward {
            outputs,
            rel_logits,
        })
    }

    /// Greedy caption with localization maps, plus relation-class logit
    /// values when the relation row is on. Uses a throwaway graph.
    pub fn decode_image(
        &self,
        image: &Image,
        bos: usize,
        eos: usize,
    ) -> Result<(DecodedCaption, Option<Vec<f32>>)> {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&self.store);
        let features = encode_image(
            &mut g,
            &self.store,
            &mut binder,
            &self.encoder,
            &self.spec.encoder,
            &self.spec.token_flags,
            image,
        )?;
        let ctx = prepare_visual_context(&mut g, &self.store, &mut binder, &self.decoder, &features);
        let decoded = greedy_decode(
            &mut g,
            &self.store,
            &mut binder,
            &self.decoder,
            &self.spec.decoder,
            &self.spec.decoder_flags,
            &ctx,
            bos,
            eos,
        )?;
        let rel = features
            .rel_logits
            .map(|id| g.value(id).data().to_vec());
        Ok((decoded, rel))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec_path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&self.spec)?;
        fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
        checkpoint::save_params(&dir.join("params.vlam"), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("model.json");
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        let mut model = CaptionModel::new(spec, 0);
        checkpoint::load_params(&dir.join("params.vlam"), &mut model.store)?;
        Ok(model)
    }
}
