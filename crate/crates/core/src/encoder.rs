//! Visual encoder.
//!
//! The image is cut into non-overlapping patches, linearly projected, and
//! run through pre-norm transformer blocks together with a learned summary
//! token. A second, shallower stack reads the finished patch representations
//! (gradient-stopped, so relation learning cannot reshape them) behind a
//! dedicated relation token whose output also feeds a multi-label relation
//! classifier. Summary rows and patch rows are projected into the decoder
//! width and stacked into one value matrix: relation row, then summary row,
//! then one row per patch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{FeedForward, Linear};
use crate::numerics::{Graph, NodeId, ParamBinder, ParamId, ParamStore, Real, Tensor};
use crate::pixmap::Image;

/// Hidden width of encoder feed-forward sublayers, as a multiple of the
/// backbone width.
pub const FFN_HIDDEN_FACTOR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Patch side length in pixels.
    pub patch: usize,
    /// Backbone width `D`.
    pub backbone_dim: usize,
    /// Backbone depth `L`.
    pub backbone_layers: usize,
    /// Relation-branch depth. Zero skips the branch entirely and hands the
    /// raw relation token through, which tests use to isolate other parts.
    pub relation_layers: usize,
    /// Attention heads per encoder block; must divide `backbone_dim`.
    pub heads: usize,
    /// Output width `d`, shared with the decoder.
    pub fused_dim: usize,
    /// Number of relation classes the relation head scores.
    pub relation_classes: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale defaults, sized so a full training run fits on one CPU
    /// core. The architecture scales to the usual vision-transformer
    /// regime (16-pixel patches, width 768, 12 layers) without code changes.
    fn default() -> Self {
        EncoderConfig {
            patch: 8,
            backbone_dim: 64,
            backbone_layers: 2,
            relation_layers: 1,
            heads: 4,
            fused_dim: 64,
            relation_classes: 6,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.heads > 0 && self.backbone_dim % self.heads == 0,
            "heads {} must divide backbone dim {}",
            self.heads,
            self.backbone_dim
        );
        self.backbone_dim / self.heads
    }
}

/// Which optional rows the value matrix carries. Relation and summary rows
/// are independent switches; the patch rows are always present.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenFlags {
    pub use_rel: bool,
    pub use_cls: bool,
}

impl Default for TokenFlags {
    fn default() -> Self {
        TokenFlags {
            use_rel: true,
            use_cls: true,
        }
    }
}

impl TokenFlags {
    /// Rows in front of the patch rows: relation first, then summary.
    pub fn n_prefix(&self) -> usize {
        self.use_rel as usize + self.use_cls as usize
    }
}

/// Cuts an image into `patch x patch` tiles, row-major over the tile grid.
/// Each row of the result is one tile: pixels row-major, channels
/// interleaved. Returns the tile grid as `(rows, cols)`.
pub fn patchify<F: Real>(image: &Image, patch: usize) -> Result<(Tensor<F>, (usize, usize))> {
    if patch == 0 || image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::BadPatchGrid {
            height: image.height(),
            width: image.width(),
            patch,
        });
    }
    let rows = image.height() / patch;
    let cols = image.width() / patch;
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in pr * patch..(pr + 1) * patch {
                for x in pc * patch..(pc + 1) * patch {
                    let rgb = image.get(y, x);
                    data.extend(rgb.iter().map(|&v| F::from_f64(v as f64)));
                }
            }
        }
    }
    Ok((Tensor::matrix(rows * cols, dim, data), (rows, cols)))
}

struct AttnHead {
    q: Linear,
    k: Linear,
    v: Linear,
}

struct Block {
    ln1: crate::numerics::layers::LayerNorm,
    heads: Vec<AttnHead>,
    wo: Linear,
    ln2: crate::numerics::layers::LayerNorm,
    ffn: FeedForward,
}

impl Block {
    /// `identity_start` zeroes both residual branch outputs, so the
    /// untrained block passes rows through unchanged. Backbone blocks use
    /// it to keep patch rows local until training opens the mixing paths;
    /// relation blocks mix from the start, since only the relation row
    /// reads their output.
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &EncoderConfig,
        identity_start: bool,
    ) -> Self {
        let d = cfg.backbone_dim;
        let dh = cfg.head_dim();
        let ln1 = crate::numerics::layers::LayerNorm::new(store, &format!("{name}.ln1"), d);
        let heads = (0..cfg.heads)
            .map(|h| AttnHead {
                q: Linear::new(store, rng, &format!("{name}.h{h}.q"), d, dh),
                k: Linear::new(store, rng, &format!("{name}.h{h}.k"), d, dh),
                v: Linear::new(store, rng, &format!("{name}.h{h}.v"), d, dh),
            })
            .collect();
        let wo = Linear::new(store, rng, &format!("{name}.wo"), d, d);
        let ln2 = crate::numerics::layers::LayerNorm::new(store, &format!("{name}.ln2"), d);
        let ffn = FeedForward::new(
            store,
            rng,
            &format!("{name}.ffn"),
            d,
            FFN_HIDDEN_FACTOR * d,
        );
        if identity_start {
            store.set_value(wo.w, Tensor::zeros(vec![d, d]));
            store.set_value(ffn.l2.w, Tensor::zeros(vec![FFN_HIDDEN_FACTOR * d, d]));
        }
        Block {
            ln1,
            heads,
            wo,
            ln2,
            ffn,
        }
    }

    /// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
    fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        binder: &mut ParamBinder,
        scale: F,
        x: NodeId,
    ) -> NodeId {
        let n = self.ln1.forward(g, store, binder, x);
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.q.forward(g, store, binder, n);
            let k = head.k.forward(g, store, binder, n);
            let v = head.v.forward(g, store, binder, n);
            let raw = g.matmul_nt(q, k);
            let scaled = g.scale(raw, scale);
            let attn = g.softmax(scaled);
            head_outs.push(g.matmul(attn, v));
        }
        let concat = g.concat_cols(&head_outs);
        let o = self.wo.forward(g, store, binder, concat);
        let x = g.add(x, o);
        let n2 = self.ln2.forward(g, store, binder, x);
        let f = self.ffn.forward(g, store, binder, n2);
        g.add(x, f)
    }
}

/// All encoder parameters. Every parameter exists regardless of
/// [`TokenFlags`]; the flags only decide which rows reach the value matrix,
/// so ablations share checkpoints with the full model.
pub struct EncoderParams {
    patch_proj: Linear,
    pos: ParamId,
    cls_token: ParamId,
    rel_token: ParamId,
    blocks: Vec<Block>,
    final_ln: crate::numerics::layers::LayerNorm,
    rel_blocks: Vec<Block>,
    rel_final_ln: crate::numerics::layers::LayerNorm,
    rel_head_l1: Linear,
    rel_head_l2: Linear,
    fuse: Linear,
    n_patches: usize,
}

impl EncoderParams {
    /// Creates parameters for a fixed patch count (the grid is part of the
    /// architecture: position embeddings have one row per patch).
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        cfg: &EncoderConfig,
        n_patches: usize,
    ) -> Self {
        let d = cfg.backbone_dim;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let patch_proj = Linear::new(store, rng, "enc.patch_proj", patch_dim, d);
        // Zero-initialized positions keep the untrained backbone exactly
        // permutation-equivariant, which the tests rely on.
        let pos = store.add("enc.pos", Tensor::zeros(vec![n_patches + 1, d]), true);
        let cls_token = store.add(
            "enc.cls_token",
            crate::numerics::params::uniform_vector(rng, d, 0.02),
            true,
        );
        let rel_token = store.add(
            "enc.rel_token",
            crate::numerics::params::uniform_vector(rng, d, 0.02),
            true,
        );
        let blocks = (0..cfg.backbone_layers)
            .map(|i| Block::new(store, rng, &format!("enc.block{i}"), cfg, true))
            .collect();
        let final_ln = crate::numerics::layers::LayerNorm::new(store, "enc.ln_f", d);
        let rel_blocks = (0..cfg.relation_layers)
            .map(|i| Block::new(store, rng, &format!("enc.rel_block{i}"), cfg, false))
            .collect();
        let rel_final_ln = crate::numerics::layers::LayerNorm::new(store, "enc.rel_ln_f", d);
        let rel_head_l1 = Linear::new(store, rng, "enc.rel_head.l1", d, d);
        let rel_head_l2 = Linear::new(store, rng, "enc.rel_head.l2", d, cfg.relation_classes);
        let fuse = Linear::new(store, rng, "enc.fuse", d, cfg.fused_dim);
        EncoderParams {
            patch_proj,
            pos,
            cls_token,
            rel_token,
            blocks,
            final_ln,
            rel_blocks,
            rel_final_ln,
            rel_head_l1,
            rel_head_l2,
            fuse,
            n_patches,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }
}

/// Encoder output: the value matrix the decoder attends over, plus the
/// relation logits when the relation branch ran.
pub struct VisualFeatures {
    /// `(n_prefix + n_patches) x fused_dim`.
    pub v: NodeId,
    /// Rows in front of the patch rows (relation, then summary).
    pub n_prefix: usize,
    /// Rank-1 logits over relation classes; `None` without the relation row.
    pub rel_logits: Option<NodeId>,
    /// Patch grid as (rows, cols).
    pub grid: (usize, usize),
}

impl VisualFeatures {
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Runs the encoder on pre-cut patches. [`encode_image`] is the normal entry
/// point; this one exists so tests can control patch rows directly.
pub fn encode_patches<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    flags: &TokenFlags,
    patches: Tensor<F>,
    grid: (usize, usize),
) -> VisualFeatures {
    let n = grid.0 * grid.1;
    assert_eq!(n, params.n_patches, "patch count differs from build time");
    assert_eq!(patches.shape()[0], n, "patch rows vs grid");
    let scale = F::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());

    let raw = g.leaf(patches);
    let projected = params.patch_proj.forward(g, store, binder, raw);
    let cls = binder.node(g, store, params.cls_token);
    let mut x = g.concat_rows(&[cls, projected]);
    let pos = binder.node(g, store, params.pos);
    x = g.add(x, pos);
    for block in &params.blocks {
        x = block.forward(g, store, binder, scale, x);
    }
    x = params.final_ln.forward(g, store, binder, x);
    let z_cls = g.slice0(x, 0, 1);
    let z_patch = g.slice0(x, 1, n);

    // The relation branch reads finished patch rows through a gradient
    // stop: its loss trains only the branch and the relation token.
    let (z_rel, rel_logits) = if flags.use_rel {
        let rel_token = binder.node(g, store, params.rel_token);
        let z_rel = if cfg.relation_layers == 0 {
            let d = cfg.backbone_dim;
            g.reshape(rel_token, vec![1, d])
        } else {
            let frozen = g.stop_grad(z_patch);
            let mut r = g.concat_rows(&[rel_token, frozen]);
            for block in &params.rel_blocks {
                r = block.forward(g, store, binder, scale, r);
            }
            r = params.rel_final_ln.forward(g, store, binder, r);
            g.slice0(r, 0, 1)
        };
        let h = params.rel_head_l1.forward(g, store, binder, z_rel);
        let h = g.relu(h);
        let logits = params.rel_head_l2.forward(g, store, binder, h);
        let logits = g.reshape(logits, vec![cfg.relation_classes]);
        (Some(z_rel), Some(logits))
    } else {
        (None, None)
    };

    let mut rows: Vec<NodeId> = Vec::with_capacity(3);
    if let Some(zr) = z_rel {
        rows.push(zr);
    }
    if flags.use_cls {
        rows.push(z_cls);
    }
    rows.push(z_patch);
    let stacked = g.concat_rows(&rows);
    let v = params.fuse.forward(g, store, binder, stacked);

    VisualFeatures {
        v,
        n_prefix: flags.n_prefix(),
        rel_logits,
        grid,
    }
}

/// Full encoder pass over an image.
pub fn encode_image<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    flags: &TokenFlags,
    image: &Image,
) -> Result<VisualFeatures> {
    let (patches, grid) = patchify::<F>(image, cfg.patch)?;
    Ok(encode_patches(
        g, store, binder, params, cfg, flags, patches, grid,
    ))
}
