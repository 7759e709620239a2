//! Losses, the training loop, and the ablation matrix runner.
//!
//! The objective is the caption cross-entropy plus the relation
//! classification loss, weighted equally. Gradients come from per-sample
//! graphs accumulated over a batch, scaled by the batch size, clipped at a
//! global norm, and applied with Adam. The learning rate anneals by a
//! fixed factor on a fixed epoch period.
//!
//! Everything is deterministic for a given seed: the shuffle order is a
//! function of (seed, epoch) alone, so an interrupted run resumed from the
//! saved trainer state retraces the uninterrupted trajectory bitwise.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalContext, EvalOutcome};
use crate::model::{CaptionModel, ModelSpec};
use crate::numerics::checkpoint::{self, NamedTensor};
use crate::numerics::{Adam, GradStore, Graph, NodeId, ParamBinder, Real};
use crate::synthcorpus::{LoadedSample, Vocabulary, BOS_ID, EOS_ID, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied every `anneal_every` epochs.
    pub anneal: f64,
    pub anneal_every: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 5e-4,
            anneal: 0.8,
            anneal_every: 3,
            clip_norm: 5.0,
            seed: 7,
        }
    }
}

/// Learning rate at a 0-indexed epoch: the base rate decayed once per
/// completed anneal period.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.anneal.powi((epoch / cfg.anneal_every) as i32)
}

/// One sample ready for teacher forcing: inputs start with the start
/// token, targets end with the end token, and the relation labels are a
/// multi-hot vector over the corpus relation classes.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub image: crate::pixmap::Image,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub relation_hot: Vec<f32>,
}

pub fn prepare_samples(
    samples: &[LoadedSample],
    vocab: &Vocabulary,
    classes: &[String],
) -> Vec<PreparedSample> {
    samples
        .iter()
        .map(|s| {
            let ids = vocab.encode(&s.caption);
            let mut inputs = vec![BOS_ID];
            inputs.extend(&ids);
            let mut targets = ids;
            targets.push(EOS_ID);
            let relation_hot = classes
                .iter()
                .map(|c| if s.relations.iter().any(|r| r == c) { 1.0 } else { 0.0 })
                .collect();
            PreparedSample {
                id: s.id.clone(),
                image: s.image.clone(),
                inputs,
                targets,
                relation_hot,
            }
        })
        .collect()
}

/// Mean step cross-entropy over non-padding targets.
pub fn loss_xe<F: Real>(
    g: &mut Graph<F>,
    step_logits: &[NodeId],
    targets: &[usize],
    pad: usize,
) -> Result<NodeId> {
    if step_logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: step_logits.len(),
            right: targets.len(),
        });
    }
    let mut sum: Option<NodeId> = None;
    let mut n = 0usize;
    for (&logits, &target) in step_logits.iter().zip(targets) {
        if target == pad {
            continue;
        }
        let ce = g.cross_entropy(logits, target);
        sum = Some(match sum {
            Some(s) => g.add(s, ce),
            None => ce,
        });
        n += 1;
    }
    let sum = sum.ok_or(Error::LengthMismatch { left: 0, right: 0 })?;
    Ok(g.scale(sum, F::from_f64(1.0 / n as f64)))
}

/// Relation classification loss: sigmoid binary cross-entropy summed over
/// classes. Batch averaging happens through the gradient scaling.
pub fn loss_mlc<F: Real>(g: &mut Graph<F>, logits: NodeId, targets: &[F]) -> NodeId {
    g.sigmoid_bce(logits, targets)
}

/// Loss values for logging. The total is the sum of the parts by
/// construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_xe: f64,
    pub l_mlc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_xe: f64, l_mlc: f64) -> Self {
        LossBreakdown {
            l_xe,
            l_mlc,
            total: l_xe + l_mlc,
        }
    }
}

/// One sample's loss nodes on its graph.
struct SampleLoss {
    total: NodeId,
    xe: NodeId,
    mlc: Option<NodeId>,
}

fn sample_loss(
    g: &mut Graph<f32>,
    model: &CaptionModel,
    binder: &mut ParamBinder,
    sample: &PreparedSample,
) -> Result<SampleLoss> {
    let fwd = model.forward_teacher(g, binder, &sample.image, &sample.inputs)?;
    let step_logits: Vec<NodeId> = fwd.outputs.iter().map(|o| o.logits).collect();
    let xe = loss_xe(g, &step_logits, &sample.targets, PAD_ID)?;
    let mlc = fwd
        .rel_logits
        .map(|logits| loss_mlc(g, logits, &sample.relation_hot));
    let total = match mlc {
        Some(m) => g.add(xe, m),
        None => xe,
    };
    Ok(SampleLoss { total, xe, mlc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Epochs executed by this call; zero when the saved state already
    /// covers the requested count.
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Best validation loss, kept in 32-bit precision so comparisons are
    /// identical before and after a resume.
    pub best_val: f32,
}

const TRAINER_STATE_FILE: &str = "trainer.vlam";

struct TrainerState {
    epochs_done: usize,
    best_epoch: usize,
    best_val: f32,
}

fn save_trainer_state(
    out_dir: &Path,
    model: &CaptionModel,
    adam: &Adam<f32>,
    state: &TrainerState,
) -> Result<()> {
    let (m, v, t) = adam.state();
    assert!(t < (1 << 24), "step count no longer exact in 32 bits");
    let mut records = Vec::with_capacity(2 * model.store.len() + 1);
    for id in model.store.ids_by_name() {
        let name = model.store.name(id);
        let len = m[id.0].len();
        records.push(NamedTensor {
            name: format!("adam.m.{name}"),
            shape: vec![len],
            data: m[id.0].clone(),
        });
        records.push(NamedTensor {
            name: format!("adam.v.{name}"),
            shape: vec![len],
            data: v[id.0].clone(),
        });
    }
    records.push(NamedTensor {
        name: "meta".to_string(),
        shape: vec![4],
        data: vec![
            state.epochs_done as f32,
            t as f32,
            state.best_val,
            state.best_epoch as f32,
        ],
    });
    checkpoint::write_tensors(&out_dir.join(TRAINER_STATE_FILE), records)
}

fn load_trainer_state(
    out_dir: &Path,
    model: &mut CaptionModel,
    adam: &mut Adam<f32>,
) -> Result<TrainerState> {
    // The saved spec must agree with the caller's model: parameter shapes
    // alone cannot distinguish ablation flags.
    let spec_text = fs::read_to_string(out_dir.join("model.json"))
        .map_err(|e| Error::io(&out_dir.join("model.json"), e))?;
    let saved: ModelSpec = serde_json::from_str(&spec_text)?;
    if saved != model.spec {
        return Err(Error::Checkpoint(
            "resume rejected: saved model spec differs from the requested one".to_string(),
        ));
    }
    checkpoint::load_params(&out_dir.join("params.vlam"), &mut model.store)?;

    let records = checkpoint::read_tensors(&out_dir.join(TRAINER_STATE_FILE))?;
    let by_name: std::collections::BTreeMap<String, NamedTensor> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut m = Vec::with_capacity(model.store.len());
    let mut v = Vec::with_capacity(model.store.len());
    for i in 0..model.store.len() {
        let id = crate::numerics::ParamId(i);
        let name = model.store.name(id);
        let numel = model.store.value(id).numel();
        for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
            let key = format!("{prefix}{name}");
            let rec = by_name
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("trainer state missing {key}")))?;
            if rec.data.len() != numel {
                return Err(Error::Checkpoint(format!(
                    "trainer state {key}: {} values, parameter has {numel}",
                    rec.data.len()
                )));
            }
            dst.push(rec.data.clone());
        }
    }
    let meta = by_name
        .get("meta")
        .ok_or_else(|| Error::Checkpoint("trainer state missing meta".to_string()))?;
    if meta.data.len() != 4 {
        return Err(Error::Checkpoint("trainer state meta malformed".to_string()));
    }
    adam.restore(m, v, meta.data[1] as u64);
    Ok(TrainerState {
        epochs_done: meta.data[0] as usize,
        best_epoch: meta.data[3] as usize,
        best_val: meta.data[2],
    })
}

/// Trains `model` until `cfg.epochs` epochs are complete, resuming from
/// `out_dir` when a trainer state is present. Writes the latest model,
/// the best-by-validation model under `best/`, and the trainer state
/// after every epoch.
pub fn train_model(
    model: &mut CaptionModel,
    train: &[PreparedSample],
    val: &[PreparedSample],
    cfg: &TrainConfig,
    out_dir: &Path,
    log: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    assert!(cfg.lr > 0.0, "learning rate must be positive");
    assert!(
        cfg.anneal > 0.0 && cfg.anneal <= 1.0,
        "anneal factor must lie in (0, 1]"
    );
    assert!(cfg.batch_size > 0 && cfg.anneal_every > 0);
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut adam = Adam::new(&model.store);
    let mut state = TrainerState {
        epochs_done: 0,
        best_epoch: 0,
        best_val: f32::INFINITY,
    };
    if out_dir.join(TRAINER_STATE_FILE).is_file() {
        state = load_trainer_state(out_dir, model, &mut adam)?;
    }
    if state.epochs_done >= cfg.epochs {
        return Ok(TrainOutcome {
            epochs_run: 0,
            history: Vec::new(),
            best_epoch: state.best_epoch,
            best_val: state.best_val,
        });
    }

    let mut history = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, epoch);

        let mut order: Vec<usize> = (0..train.len()).collect();
        let shuffle_seed = cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut xe_sum = 0.0f64;
        let mut mlc_sum = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = GradStore::zeros_like(&model.store);
            for &i in chunk {
                let sample = &train[i];
                let mut g = Graph::new();
                let mut binder = ParamBinder::new(&model.store);
                let loss = sample_loss(&mut g, model, &mut binder, sample)?;
                let total = g.value(loss.total).item().to_f64();
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        value: total,
                    });
                }
                xe_sum += g.value(loss.xe).item().to_f64();
                mlc_sum += loss
                    .mlc
                    .map_or(0.0, |n| g.value(n).item().to_f64());
                let node_grads = g.backward(loss.total);
                grads.add_assign(&g.param_grads(&node_grads, &model.store));
            }
            grads.scale(1.0 / chunk.len() as f32);
            grads.clip_global_norm(cfg.clip_norm as f32);
            adam.step(&mut model.store, &grads, lr as f32);
        }
        let train_losses = LossBreakdown::new(
            xe_sum / train.len() as f64,
            mlc_sum / train.len() as f64,
        );

        let val_losses = validation_loss(model, val)?;
        let val_total = val_losses.total as f32;
        if val_total < state.best_val {
            state.best_val = val_total;
            state.best_epoch = epoch;
            model.save(&out_dir.join("best"))?;
        }
        state.epochs_done = epoch + 1;
        model.save(out_dir)?;
        save_trainer_state(out_dir, model, &adam, &state)?;

        let stats = EpochStats {
            epoch,
            lr,
            train: train_losses,
            val: val_losses,
            seconds: started.elapsed().as_secs_f64(),
        };
        log(&stats);
        history.push(stats);
    }

    Ok(TrainOutcome {
        epochs_run: history.len(),
        history,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
    })
}

/// Forward-only mean loss over a sample set.
pub fn validation_loss(model: &CaptionModel, samples: &[PreparedSample]) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Ok(LossBreakdown::new(0.0, 0.0));
    }
    let mut xe_sum = 0.0f64;
    let mut mlc_sum = 0.0f64;
    for sample in samples {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&model.store);
        let loss = sample_loss(&mut g, model, &mut binder, sample)?;
        xe_sum += g.value(loss.xe).item().to_f64();
        mlc_sum += loss.mlc.map_or(0.0, |n| g.value(n).item().to_f64());
    }
    Ok(LossBreakdown::new(
        xe_sum / samples.len() as f64,
        mlc_sum / samples.len() as f64,
    ))
}

/// One ablation matrix cell: flag settings plus optional architecture
/// overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub use_rgm: bool,
    pub use_cls: bool,
    pub use_rel: bool,
    /// Decoder attention head count override.
    pub heads: Option<usize>,
    /// Relation branch depth override.
    pub relation_layers: Option<usize>,
}

impl AblationCell {
    pub fn flags_only(name: &str, use_rgm: bool, use_cls: bool, use_rel: bool) -> Self {
        AblationCell {
            name: name.to_string(),
            use_rgm,
            use_cls,
            use_rel,
            heads: None,
            relation_layers: None,
        }
    }

    /// The cell's model spec, derived from a base spec.
    pub fn apply(&self, base: &ModelSpec) -> ModelSpec {
        let mut spec = base.clone();
        spec.decoder_flags.use_recurrent_attention = self.use_rgm;
        spec.token_flags.use_cls = self.use_cls;
        spec.token_flags.use_rel = self.use_rel;
        if let Some(h) = self.heads {
            spec.decoder.heads = h;
        }
        if let Some(l) = self.relation_layers {
            spec.encoder.relation_layers = l;
        }
        spec
    }
}

/// The three-cell module comparison: plain attention with no extra
/// tokens, recurrent attention alone, and recurrent attention with both
/// prefix tokens.
pub fn standard_ablation_cells() -> Vec<AblationCell> {
    vec![
        AblationCell::flags_only("gm", false, false, false),
        AblationCell::flags_only("rgm", true, false, false),
        AblationCell::flags_only("rgm_cls_rel", true, true, true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// The cell's evaluation, or the error message that stopped it. One
    /// failing cell does not abort the others.
    pub outcome: std::result::Result<EvalOutcome, String>,
}

/// Trains and evaluates every cell with a shared seed and corpus.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_matrix(
    base: &ModelSpec,
    cells: &[AblationCell],
    train: &[PreparedSample],
    val: &[PreparedSample],
    test: &[LoadedSample],
    ctx: &EvalContext<'_>,
    cfg: &TrainConfig,
    out_root: &Path,
    log: &mut dyn FnMut(&str, &EpochStats),
) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|cell| {
            let outcome = run_cell(base, cell, train, val, test, ctx, cfg, out_root, log)
                .map_err(|e| e.to_string());
            AblationRow {
                cell: cell.clone(),
                outcome,
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    base: &ModelSpec,
    cell: &AblationCell,
    train: &[PreparedSample],
    val: &[PreparedSample],
    test: &[LoadedSample],
    ctx: &EvalContext<'_>,
    cfg: &TrainConfig,
    out_root: &Path,
    log: &mut dyn FnMut(&str, &EpochStats),
) -> Result<EvalOutcome> {
    let spec = cell.apply(base);
    let mut model = CaptionModel::new(spec, cfg.seed);
    let out_dir = out_root.join(&cell.name);
    let name = cell.name.clone();
    train_model(&mut model, train, val, cfg, &out_dir, &mut |s| {
        log(&name, s)
    })?;
    // Evaluation uses the best-by-validation parameters.
    let best = CaptionModel::load(&out_dir.join("best"))?;
    evaluate(&best, test, ctx)
}
