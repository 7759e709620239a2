//! Caption decoder with grounding attention.
//!
//! A single-layer LSTM drives multi-head attention over the encoder's value
//! matrix. Each step's query is the LSTM state, optionally shifted by a
//! linear read of the previous step's patch attention; that recurrence is
//! what lets attention settle on the object a word refers to before the
//! word is emitted. The per-head patch attentions, prefix rows dropped and
//! heads summed, form the word's localization map.

use rand::Rng;

use crate::encoder::VisualFeatures;
use crate::error::{Error, Result};
use crate::numerics::layers::{Embedding, FeedForward, Glu, LayerNorm, Linear, LstmCell};
use crate::numerics::{Graph, NodeId, ParamBinder, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    /// Hidden width `d`, shared with the encoder's fused output.
    pub dim: usize,
    /// Vocabulary size, including the specials.
    pub vocab: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// Decode length cap, not counting the start token.
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.heads > 0 && self.dim % self.heads == 0,
            "heads {} must divide dim {}",
            self.heads,
            self.dim
        );
        self.dim / self.heads
    }
}

/// Decoder behavior switches. `use_recurrent_attention` selects the
/// recurrence on the previous step's attention; without it each step attends
/// from the LSTM state alone.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderFlags {
    pub use_recurrent_attention: bool,
}

impl Default for DecoderFlags {
    fn default() -> Self {
        DecoderFlags {
            use_recurrent_attention: true,
        }
    }
}

struct RgmHead {
    q: Linear,
    k: Linear,
    v: Linear,
}

/// All decoder parameters. As with the encoder, every parameter exists
/// regardless of flags so checkpoints are layout-compatible across
/// ablations.
pub struct DecoderParams {
    embed: Embedding,
    lstm: LstmCell,
    /// Maps the previous patch attention (length = patch count) into the
    /// query space. Starts at zero so the first step, whose previous
    /// attention is all zeros, is exactly the plain query.
    attn_feedback: Linear,
    heads: Vec<RgmHead>,
    attn_out: Linear,
    glu: Glu,
    ffn: FeedForward,
    ln: LayerNorm,
    word: Linear,
}

/// Hidden width of the decoder feed-forward sublayer, as a multiple of the
/// decoder width.
pub const FFN_HIDDEN_FACTOR: usize = 2;

impl DecoderParams {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
        cfg: &DecoderConfig,
        n_patches: usize,
    ) -> Self {
        let d = cfg.dim;
        let dh = cfg.head_dim();
        let embed = Embedding::new(store, rng, "dec.embed", cfg.vocab, d);
        let lstm = LstmCell::new(store, rng, "dec.lstm", 2 * d, d);
        let attn_feedback = Linear::new(store, rng, "dec.attn_feedback", n_patches, d);
        let heads = (0..cfg.heads)
            .map(|h| RgmHead {
                q: Linear::new(store, rng, &format!("dec.h{h}.q"), d, dh),
                k: Linear::new(store, rng, &format!("dec.h{h}.k"), d, dh),
                v: Linear::new(store, rng, &format!("dec.h{h}.v"), d, dh),
            })
            .collect();
        let attn_out = Linear::new(store, rng, "dec.attn_out", d, d);
        let glu = Glu::new(store, rng, "dec.glu", d, d);
        let ffn = FeedForward::new(store, rng, "dec.ffn", d, FFN_HIDDEN_FACTOR * d);
        let ln = LayerNorm::new(store, "dec.ln", d);
        let word = Linear::new(store, rng, "dec.word", d, cfg.vocab);
        DecoderParams {
            embed,
            lstm,
            attn_feedback,
            heads,
            attn_out,
            glu,
            ffn,
            ln,
            word,
        }
    }
}

/// Per-decode view of the encoder output: per-head key and value
/// projections of the value matrix, computed once, plus the mean-pooled
/// patch feature fed to the LSTM every step.
pub struct VisualContext {
    keys: Vec<NodeId>,
    values: Vec<NodeId>,
    v_bar: NodeId,
    n_prefix: usize,
    n_patches: usize,
}

impl VisualContext {
    pub fn n_patches(&self) -> usize {
        self.n_patches
    }
}

/// Projects the value matrix into per-head keys and values. Call once per
/// decoded image; steps reuse the projections.
pub fn prepare_visual_context<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &DecoderParams,
    features: &VisualFeatures,
) -> VisualContext {
    let n_patches = features.n_patches();
    let keys = params
        .heads
        .iter()
        .map(|h| h.k.forward(g, store, binder, features.v))
        .collect();
    let values = params
        .heads
        .iter()
        .map(|h| h.v.forward(g, store, binder, features.v))
        .collect();
    let patch_rows = g.slice0(features.v, features.n_prefix, n_patches);
    let v_bar = g.mean_rows(patch_rows);
    VisualContext {
        keys,
        values,
        v_bar,
        n_prefix: features.n_prefix,
        n_patches,
    }
}

/// One step's attention, per head and combined.
#[derive(Clone, Debug)]
pub struct AttentionState {
    /// Per-head distribution over every value-matrix row; each sums to 1.
    pub full: Vec<NodeId>,
    /// Per-head distribution restricted to patch rows (prefix dropped).
    pub patch: Vec<NodeId>,
    /// Patch attention summed over heads: the word's localization map.
    pub patch_sum: NodeId,
}

/// Recurrent decoder state between steps. Everything starts at zero.
pub struct StepState {
    pub h: NodeId,
    pub cell: NodeId,
    /// Previous step's output context, added to the pooled visual feature
    /// at the LSTM input.
    pub context: NodeId,
    /// Previous step's head-summed patch attention.
    pub attn_sum: NodeId,
}

impl StepState {
    pub fn init<F: Real>(g: &mut Graph<F>, dim: usize, n_patches: usize) -> Self {
        StepState {
            h: g.leaf(Tensor::zeros(vec![dim])),
            cell: g.leaf(Tensor::zeros(vec![dim])),
            context: g.leaf(Tensor::zeros(vec![dim])),
            attn_sum: g.leaf(Tensor::zeros(vec![n_patches])),
        }
    }
}

/// Attention for one step. With the recurrence enabled the query is
/// `h + feedback(attn_prev_sum)`; without it, `h` alone, making the result
/// independent of the previous attention.
pub fn rgm_step<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    flags: &DecoderFlags,
    ctx: &VisualContext,
    h: NodeId,
    attn_prev_sum: NodeId,
) -> AttentionState {
    let u = if flags.use_recurrent_attention {
        let shift = params.attn_feedback.forward(g, store, binder, attn_prev_sum);
        g.add(h, shift)
    } else {
        h
    };
    let scale = F::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let mut full = Vec::with_capacity(params.heads.len());
    let mut patch = Vec::with_capacity(params.heads.len());
    for (head, &keys) in params.heads.iter().zip(&ctx.keys) {
        let q = head.q.forward(g, store, binder, u);
        let raw = g.matmul_nt(q, keys);
        let scaled = g.scale(raw, scale);
        let dist = g.softmax(scaled);
        full.push(dist);
        patch.push(g.slice0(dist, ctx.n_prefix, ctx.n_patches));
    }
    let mut patch_sum = patch[0];
    for &p in &patch[1..] {
        patch_sum = g.add(patch_sum, p);
    }
    AttentionState {
        full,
        patch,
        patch_sum,
    }
}

/// Everything one decode step produces.
#[derive(Clone, Debug)]
pub struct WordStepOutput {
    pub logits: NodeId,
    /// The step's output context `c_t`, also the word-classifier input.
    pub context: NodeId,
    pub attn: AttentionState,
}

/// One full decoder step: embed the input token, advance the LSTM, attend,
/// and produce word logits.
pub fn language_step<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    flags: &DecoderFlags,
    ctx: &VisualContext,
    token: usize,
    state: &StepState,
) -> Result<(WordStepOutput, StepState)> {
    if token >= cfg.vocab {
        return Err(Error::UnknownToken {
            id: token,
            vocab: cfg.vocab,
        });
    }
    let emb = params.embed.forward(g, store, binder, token);
    let visual_in = g.add(ctx.v_bar, state.context);
    let x = g.concat_vec(visual_in, emb);
    let (h, cell) = params.lstm.forward(g, store, binder, x, state.h, state.cell);
    let attn = rgm_step(g, store, binder, params, cfg, flags, ctx, h, state.attn_sum);

    let mut head_ctx = Vec::with_capacity(params.heads.len());
    for (dist, &values) in attn.full.iter().zip(&ctx.values) {
        head_ctx.push(g.matmul(*dist, values));
    }
    let mut joined = head_ctx[0];
    for &c in &head_ctx[1..] {
        joined = g.concat_vec(joined, c);
    }
    let attended = params.attn_out.forward(g, store, binder, joined);

    let mix = g.add(h, attended);
    let gated = params.glu.forward(g, store, binder, mix);
    let expanded = params.ffn.forward(g, store, binder, gated);
    let context = params.ln.forward(g, store, binder, expanded);
    let logits = params.word.forward(g, store, binder, context);

    let next = StepState {
        h,
        cell,
        context,
        attn_sum: attn.patch_sum,
    };
    Ok((
        WordStepOutput {
            logits,
            context,
            attn,
        },
        next,
    ))
}

/// Runs the decoder over a fixed token sequence, returning one output per
/// input token. Training feeds the start token plus the caption and scores
/// the outputs against the caption plus the end token.
pub fn teacher_forced<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    flags: &DecoderFlags,
    ctx: &VisualContext,
    tokens: &[usize],
) -> Result<Vec<WordStepOutput>> {
    let mut state = StepState::init(g, cfg.dim, ctx.n_patches);
    let mut outputs = Vec::with_capacity(tokens.len());
    for &token in tokens {
        let (out, next) = language_step(g, store, binder, params, cfg, flags, ctx, token, &state)?;
        outputs.push(out);
        state = next;
    }
    Ok(outputs)
}

/// A greedily decoded caption with one localization map per emitted token.
#[derive(Clone, Debug)]
pub struct DecodedCaption {
    /// Emitted tokens, end token excluded.
    pub token_ids: Vec<usize>,
    /// Head-summed patch attention for each emitted token.
    pub maps: Vec<Vec<f32>>,
    /// Per-head full-row attention for each emitted token, for invariant
    /// checks: `full_attn[t][head]` sums to 1.
    pub full_attn: Vec<Vec<Vec<f32>>>,
    /// True when the length cap stopped the decode before the end token.
    pub truncated: bool,
}

/// Greedy argmax decoding. Ties pick the smallest token id. Decoding stops
/// when the end token wins the argmax (it is not emitted) or after
/// `cfg.max_len` emitted tokens.
pub fn greedy_decode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    binder: &mut ParamBinder,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    flags: &DecoderFlags,
    ctx: &VisualContext,
    bos: usize,
    eos: usize,
) -> Result<DecodedCaption> {
    let mut state = StepState::init(g, cfg.dim, ctx.n_patches);
    let mut token = bos;
    let mut token_ids = Vec::new();
    let mut maps = Vec::new();
    let mut full_attn = Vec::new();
    let mut truncated = true;
    for _ in 0..cfg.max_len {
        let (out, next) = language_step(g, store, binder, params, cfg, flags, ctx, token, &state)?;
        let logits = g.value(out.logits).data();
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == eos {
            truncated = false;
            break;
        }
        token_ids.push(best);
        maps.push(
            g.value(out.attn.patch_sum)
                .data()
                .iter()
                .map(|&v| v.to_f64() as f32)
                .collect(),
        );
        full_attn.push(
            out.attn
                .full
                .iter()
                .map(|&id| g.value(id).data().iter().map(|&v| v.to_f64() as f32).collect())
                .collect(),
        );
        state = next;
        token = best;
    }
    Ok(DecodedCaption {
        token_ids,
        maps,
        full_attn,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_patches, EncoderConfig, EncoderParams, TokenFlags};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        enc_cfg: EncoderConfig,
        enc: EncoderParams,
        dec_cfg: DecoderConfig,
        dec: DecoderParams,
    }

    fn fixture(seed: u64) -> Fixture {
        let enc_cfg = EncoderConfig {
            patch: 4,
            backbone_dim: 8,
            backbone_layers: 1,
            relation_layers: 1,
            heads: 2,
            fused_dim: 8,
            relation_classes: 3,
        };
        let dec_cfg = DecoderConfig {
            dim: 8,
            vocab: 7,
            heads: 2,
            max_len: 5,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::new(&mut store, &mut rng, &enc_cfg, 4);
        let dec = DecoderParams::new(&mut store, &mut rng, &dec_cfg, 4);
        Fixture {
            store,
            enc_cfg,
            enc,
            dec_cfg,
            dec,
        }
    }

    fn encode(
        fx: &Fixture,
        g: &mut Graph<f64>,
        binder: &mut ParamBinder,
        flags: &TokenFlags,
    ) -> VisualContext {
        let patches = Tensor::matrix(4, 48, (0..192).map(|i| (i as f64 * 0.13).sin() * 0.2).collect());
        let features = encode_patches(
            g, &fx.store, binder, &fx.enc, &fx.enc_cfg, flags, patches, (2, 2),
        );
        prepare_visual_context(g, &fx.store, binder, &fx.dec, &features)
    }

    #[test]
    fn attention_rows_are_distributions_and_patch_split_drops_prefix() {
        let fx = fixture(21);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&fx.store);
        let ctx = encode(&fx, &mut g, &mut binder, &TokenFlags::default());
        let state = StepState::init(&mut g, fx.dec_cfg.dim, ctx.n_patches());
        let flags = DecoderFlags::default();
        let (out, _) = language_step(
            &mut g, &fx.store, &mut binder, &fx.dec, &fx.dec_cfg, &flags, &ctx, 2, &state,
        )
        .unwrap();
        for (&full, &patch) in out.attn.full.iter().zip(&out.attn.patch) {
            let f = g.value(full).data();
            assert_eq!(f.len(), 6);
            let sum: f64 = f.iter().sum();
            approx::assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            let p = g.value(patch).data();
            assert_eq!(p.len(), 4);
            assert_eq!(&f[2..], p);
        }
        let s = g.value(out.attn.patch_sum).data();
        let expected: Vec<f64> = (0..4)
            .map(|i| {
                out.attn
                    .patch
                    .iter()
                    .map(|&p| g.value(p).data()[i])
                    .sum::<f64>()
            })
            .collect();
        assert_eq!(s, expected.as_slice());
    }

    #[test]
    fn plain_attention_ignores_previous_maps_but_recurrent_does_not() {
        let mut fx = fixture(22);
        {
            let mut g = Graph::new();
            let mut binder = ParamBinder::new(&fx.store);
            let ctx = encode(&fx, &mut g, &mut binder, &TokenFlags::default());
            let h = g.leaf(Tensor::vector((0..8).map(|i| (i as f64) * 0.1 - 0.4).collect()));
            let zeros = g.leaf(Tensor::zeros(vec![4]));
            let spiked = g.leaf(Tensor::vector(vec![3.0, 0.0, 0.0, 0.0]));
            let plain = DecoderFlags {
                use_recurrent_attention: false,
            };
            let a = rgm_step(
                &mut g, &fx.store, &mut binder, &fx.dec, &fx.dec_cfg, &plain, &ctx, h, zeros,
            );
            let b = rgm_step(
                &mut g, &fx.store, &mut binder, &fx.dec, &fx.dec_cfg, &plain, &ctx, h, spiked,
            );
            assert_eq!(
                g.value(a.patch_sum).data(),
                g.value(b.patch_sum).data(),
                "plain attention must not read the previous map"
            );
        }

        // The feedback projection is zero-initialized; give it weight so the
        // recurrence is visible.
        let fb_w = fx.store.lookup("dec.attn_feedback.w").unwrap();
        fx.store.set_value(fb_w, Tensor::full(vec![4, 8], 0.3));
        let recurrent = DecoderFlags {
            use_recurrent_attention: true,
        };
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&fx.store);
        let ctx = encode(&fx, &mut g, &mut binder, &TokenFlags::default());
        let h = g.leaf(Tensor::vector((0..8).map(|i| (i as f64) * 0.1 - 0.4).collect()));
        let zeros = g.leaf(Tensor::zeros(vec![4]));
        let spiked = g.leaf(Tensor::vector(vec![3.0, 0.0, 0.0, 0.0]));
        let c = rgm_step(
            &mut g, &fx.store, &mut binder, &fx.dec, &fx.dec_cfg, &recurrent, &ctx, h, zeros,
        );
        let d = rgm_step(
            &mut g, &fx.store, &mut binder, &fx.dec, &fx.dec_cfg, &recurrent, &ctx, h, spiked,
        );
        assert_ne!(
            g.value(c.patch_sum).data(),
            g.value(d.patch_sum).data(),
            "recurrent attention must depend on the previous map"
        );
    }

    #[test]
    fn teacher_forcing_returns_one_output_per_token() {
        let fx = fixture(23);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&fx.store);
        let ctx = encode(&fx, &mut g, &mut binder, &TokenFlags::default());
        let outs = teacher_forced(
            &mut g,
            &fx.store,
            &mut binder,
            &fx.dec,
            &fx.dec_cfg,
            &DecoderFlags::default(),
            &ctx,
            &[0, 4, 5, 6],
        )
        .unwrap();
        assert_eq!(outs.len(), 4);
    }

    #[test]
    fn out_of_vocabulary_token_is_rejected() {
        let fx = fixture(24);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&fx.store);
        let ctx = encode(&fx, &mut g, &mut binder, &TokenFlags::default());
        let err = teacher_forced(
            &mut g,
            &fx.store,
            &mut binder,
            &fx.dec,
            &fx.dec_cfg,
            &DecoderFlags::default(),
            &ctx,
            &[0, 7],
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownToken { id: 7, vocab: 7 }));
    }

    #[test]
    fn greedy_ties_pick_the_smallest_token_and_cap_sets_truncated() {
        let fx = fixture(25);
        // Zero word projection: every step's logits are all equal, so the
        // argmax must pick token 0 every time and the decode never emits the
        // end token.
        let mut store = fx.store;
        let w = store.lookup("dec.word.w").unwrap();
        store.set_value(w, Tensor::zeros(vec![8, 7]));
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&store);
        let patches = Tensor::matrix(4, 48, (0..192).map(|i| (i as f64 * 0.13).sin() * 0.2).collect());
        let features = encode_patches(
            &mut g,
            &store,
            &mut binder,
            &fx.enc,
            &fx.enc_cfg,
            &TokenFlags::default(),
            patches,
            (2, 2),
        );
        let ctx = prepare_visual_context(&mut g, &store, &mut binder, &fx.dec, &features);
        let decoded = greedy_decode(
            &mut g,
            &store,
            &mut binder,
            &fx.dec,
            &fx.dec_cfg,
            &DecoderFlags::default(),
            &ctx,
            0,
            1,
        )
        .unwrap();
        assert!(decoded.truncated);
        assert_eq!(decoded.token_ids, vec![0; 5]);
        assert_eq!(decoded.maps.len(), 5);
        assert_eq!(decoded.full_attn[0].len(), 2);
    }
}
