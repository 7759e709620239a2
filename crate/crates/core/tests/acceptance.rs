//! Release gate. Every test here states one externally checkable claim
//! about the pipeline and prints a single verdict line; together they are
//! the bar a build must clear before shipping. The slow desk-scale claims
//! (training thresholds, ablation directions) share one matrix run through
//! a process-wide cell so the gate trains each configuration exactly once.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlamcap::decoder::{
    prepare_visual_context, rgm_step, teacher_forced, DecoderConfig, DecoderFlags, DecoderParams,
};
use vlamcap::encoder::{encode_image, EncoderConfig, EncoderParams, TokenFlags};
use vlamcap::eval::{evaluate, evaluate_oracle, EvalContext};
use vlamcap::grounding::{
    iou, largest_component, normalize_max, threshold_mask, tight_box, BoundingBox,
};
use vlamcap::metrics::{corpus_bleu, f1_scores, GroundingRecord, WordBox, IOU_MATCH_THRESHOLD};
use vlamcap::model::{CaptionModel, ModelSpec};
use vlamcap::numerics::gradcheck::check_input;
use vlamcap::numerics::{Graph, NodeId, ParamBinder, ParamStore, Tensor};
use vlamcap::pixmap::Image;
use vlamcap::synthcorpus::{
    generate_corpus, groundable_words, load_split, relation_class_set, CorpusCounts, SceneSpec,
    Vocabulary, BOS_ID, EOS_ID, PAD_ID,
};
use vlamcap::training::{
    loss_mlc, loss_xe, prepare_samples, run_ablation_matrix, standard_ablation_cells, train_model,
    TrainConfig,
};

/// Box-extraction threshold the desk-scale evaluation runs at. On an 8x8
/// patch grid the survey mass each decode step spreads across the scene sits
/// near 0.1 of the peak, so the cut must sit above it; see the grounding
/// docs for the full calibration.
const EVAL_RHO: f64 = 0.2;

/// Training recipe for the desk-scale runs. Architecture and seed are
/// fixed; the optimizer settings are the tuned values the thresholds were
/// locked against.
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 7.5e-4,
        anneal: 0.8,
        anneal_every: 6,
        clip_norm: 5.0,
        seed: 7,
    }
}

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

/// Deterministic test values in `[-1.2, 1.2)`.
fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.2..1.2)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), values(rng, n))
}

/// Fixed-weight projection of any node to one scalar, so every output entry
/// contributes to the checked gradient.
fn scalarize(g: &mut Graph<f64>, out: NodeId) -> NodeId {
    let n = g.value(out).numel();
    let w: Vec<f64> = (0..n).map(|i| 0.25 + 0.15 * (1.7 * i as f64).sin()).collect();
    let flat = g.reshape(out, vec![1, n]);
    let weights = g.leaf(Tensor::matrix(1, n, w));
    g.matmul_nt(flat, weights)
}

/// Checks reverse-mode gradients of one operation against central
/// differences for every differentiable input. Returns the worst relative
/// error seen.
fn check_op(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let out = build(&mut g, &nodes);
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        scalarize(&mut g, out)
    };
    let grads = g.backward(loss);

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(nodes[i])
            .unwrap_or_else(|| panic!("{name}: input {i} received no gradient"))
            .to_vec();
        let mut f = |xs: &[f64]| {
            let mut g2 = Graph::new();
            let n2: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, tj)| {
                    if j == i {
                        g2.var(Tensor::from_vec(tj.shape().to_vec(), xs.to_vec()))
                    } else {
                        g2.var(tj.clone())
                    }
                })
                .collect();
            let out2 = build(&mut g2, &n2);
            let loss2 = if g2.value(out2).numel() == 1 {
                out2
            } else {
                scalarize(&mut g2, out2)
            };
            g2.value(loss2).item()
        };
        let label = format!("{name}[input {i}]");
        match check_input(&label, &mut f, input.data(), &analytic, 1e-5, 1e-4) {
            Ok(err) => worst = worst.max(err),
            Err(msg) => panic!("{msg}"),
        }
    }
    worst
}

/// Gradient suite: every tape operation, checked one at a time, then the
/// full two-step teacher-forced loss with every parameter perturbed. All in
/// 64-bit against central differences.
#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);

    // Away-from-kink values for relu: the central difference straddles the
    // origin otherwise.
    let relu_input = {
        let mut v = values(&mut rng, 12);
        for x in &mut v {
            if x.abs() < 0.05 {
                *x += 0.1;
            }
        }
        Tensor::from_vec(vec![3, 4], v)
    };

    let mut worst_op = 0.0f64;
    let mut ops_checked = 0usize;
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId| {
        worst_op = worst_op.max(check_op(name, &inputs, build));
        ops_checked += 1;
    };

    run(
        "add",
        vec![tensor(&mut rng, &[3, 4]), tensor(&mut rng, &[3, 4])],
        &|g, n| g.add(n[0], n[1]),
    );
    run(
        "add_row",
        vec![tensor(&mut rng, &[3, 4]), tensor(&mut rng, &[4])],
        &|g, n| g.add_row(n[0], n[1]),
    );
    run("scale", vec![tensor(&mut rng, &[3, 4])], &|g, n| {
        g.scale(n[0], 1.37)
    });
    run(
        "mul",
        vec![tensor(&mut rng, &[3, 4]), tensor(&mut rng, &[3, 4])],
        &|g, n| g.mul(n[0], n[1]),
    );
    run(
        "matmul",
        vec![tensor(&mut rng, &[3, 4]), tensor(&mut rng, &[4, 5])],
        &|g, n| g.matmul(n[0], n[1]),
    );
    run(
        "matmul_nt",
        vec![tensor(&mut rng, &[3, 4]), tensor(&mut rng, &[5, 4])],
        &|g, n| g.matmul_nt(n[0], n[1]),
    );
    run("relu", vec![relu_input], &|g, n| g.relu(n[0]));
    run("sigmoid", vec![tensor(&mut rng, &[3, 4])], &|g, n| {
        g.sigmoid(n[0])
    });
    run("tanh", vec![tensor(&mut rng, &[3, 4])], &|g, n| {
        g.tanh(n[0])
    });
    run("softmax", vec![tensor(&mut rng, &[3, 5])], &|g, n| {
        g.softmax(n[0])
    });
    run(
        "layer_norm",
        vec![
            tensor(&mut rng, &[3, 4]),
            tensor(&mut rng, &[4]),
            tensor(&mut rng, &[4]),
        ],
        &|g, n| g.layer_norm(n[0], n[1], n[2]),
    );
    run("mean_rows", vec![tensor(&mut rng, &[3, 4])], &|g, n| {
        g.mean_rows(n[0])
    });
    run(
        "concat_vec",
        vec![tensor(&mut rng, &[3]), tensor(&mut rng, &[4])],
        &|g, n| g.concat_vec(n[0], n[1]),
    );
    run(
        "concat_rows",
        vec![tensor(&mut rng, &[2, 4]), tensor(&mut rng, &[3, 4])],
        &|g, n| g.concat_rows(&[n[0], n[1]]),
    );
    run(
        "concat_cols",
        vec![tensor(&mut rng, &[3, 2]), tensor(&mut rng, &[3, 3])],
        &|g, n| g.concat_cols(&[n[0], n[1]]),
    );
    run("slice0", vec![tensor(&mut rng, &[5, 4])], &|g, n| {
        g.slice0(n[0], 1, 3)
    });
    run("reshape", vec![tensor(&mut rng, &[3, 4])], &|g, n| {
        g.reshape(n[0], vec![2, 6])
    });
    run("embed_row", vec![tensor(&mut rng, &[5, 4])], &|g, n| {
        g.embed_row(n[0], 2)
    });
    run("cross_entropy", vec![tensor(&mut rng, &[7])], &|g, n| {
        g.cross_entropy(n[0], 3)
    });
    run("sigmoid_bce", vec![tensor(&mut rng, &[6])], &|g, n| {
        g.sigmoid_bce(n[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    });

    // stop_grad blocks exactly one factor: for loss w . (x * sg(x)) the
    // gradient must be w * x, not 2 w * x.
    {
        let x = tensor(&mut rng, &[6]);
        let mut g = Graph::new();
        let xn = g.var(x.clone());
        let sg = g.stop_grad(xn);
        let y = g.mul(xn, sg);
        let loss = scalarize(&mut g, y);
        let grads = g.backward(loss);
        let got = grads.get(xn).expect("stop_grad input gradient");
        let w: Vec<f64> = (0..6).map(|i| 0.25 + 0.15 * (1.7 * i as f64).sin()).collect();
        for i in 0..6 {
            let expect = w[i] * x.data()[i];
            assert!(
                (got[i] - expect).abs() < 1e-12,
                "stop_grad leaked: entry {i} got {} want {expect}",
                got[i]
            );
        }
    }

    let composed_err = composed_two_step_check();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "gradient suite",
        worst_op <= 1e-4 && composed_err <= 1e-3 && secs < 120.0,
        &format!(
            "{ops_checked} ops worst rel {worst_op:.2e}, composed worst rel {composed_err:.2e}, {secs:.1}s"
        ),
    );
}

/// Builds a small encoder+decoder in 64-bit, jitters every parameter so no
/// zero-initialized layer hides a path, and checks the gradient of the full
/// two-step loss (caption cross-entropy plus relation classification) for
/// every parameter tensor.
fn composed_two_step_check() -> f64 {
    let enc_cfg = EncoderConfig {
        patch: 2,
        backbone_dim: 8,
        backbone_layers: 2,
        relation_layers: 1,
        heads: 2,
        fused_dim: 8,
        relation_classes: 3,
    };
    let dec_cfg = DecoderConfig {
        dim: 8,
        vocab: 7,
        heads: 2,
        max_len: 4,
    };
    let flags = TokenFlags::default();
    let dec_flags = DecoderFlags::default();
    let n_patches = 9;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store: ParamStore<f64> = ParamStore::new();
    let enc = EncoderParams::new(&mut store, &mut rng, &enc_cfg, n_patches);
    let dec = DecoderParams::new(&mut store, &mut rng, &dec_cfg, n_patches);
    for id in store.ids_by_name() {
        let t = store.value(id).clone();
        let jittered: Vec<f64> = t.data().iter().map(|&v| v + rng.gen_range(-0.05..0.05)).collect();
        store.set_value(id, Tensor::from_vec(t.shape().to_vec(), jittered));
    }

    let mut image = Image::new(6, 6);
    for y in 0..6 {
        for x in 0..6 {
            image.set(y, x, [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
        }
    }

    let tokens = [4usize, 5];
    let targets = [5usize, 6];
    let rel_hot = [1.0f64, 0.0, 1.0];

    let forward = |store: &ParamStore<f64>| -> (Graph<f64>, NodeId) {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(store);
        let feats = encode_image(&mut g, store, &mut binder, &enc, &enc_cfg, &flags, &image)
            .expect("encode");
        let ctx = prepare_visual_context(&mut g, store, &mut binder, &dec, &feats);
        let outs = teacher_forced(
            &mut g, store, &mut binder, &dec, &dec_cfg, &dec_flags, &ctx, &tokens,
        )
        .expect("decode");
        let logits: Vec<NodeId> = outs.iter().map(|o| o.logits).collect();
        let xe = loss_xe(&mut g, &logits, &targets, PAD_ID).expect("xe");
        let mlc = loss_mlc(&mut g, feats.rel_logits.expect("relation logits"), &rel_hot);
        let total = g.add(xe, mlc);
        (g, total)
    };

    let (g, total) = forward(&store);
    let grads = g.backward(total);
    let param_grads = g.param_grads(&grads, &store);

    let mut worst = 0.0f64;
    for id in store.ids_by_name() {
        let original = store.value(id).clone();
        let shape = original.shape().to_vec();
        let analytic = param_grads
            .get(id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; original.numel()]);
        let label = format!("composed[{}]", store.name(id));
        let mut f = |xs: &[f64]| {
            store.set_value(id, Tensor::from_vec(shape.clone(), xs.to_vec()));
            let (g2, total2) = forward(&store);
            g2.value(total2).item()
        };
        match check_input(&label, &mut f, original.data(), &analytic, 1e-5, 1e-3) {
            Ok(err) => worst = worst.max(err),
            Err(msg) => panic!("{msg}"),
        }
        store.set_value(id, original);
    }
    worst
}

/// Attention invariants on random decodes: per-head rows are probability
/// distributions, the localization map is exactly the head-summed patch
/// slice with both prefix rows dropped, and only the recurrent conditioning
/// reacts to the previous step's attention.
#[test]
fn attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let spec = ModelSpec::for_canvas(32, 12, 4, 8);
    let n_prefix = 2usize;
    let (rows, cols) = spec.grid;
    let n_patches = rows * cols;
    let mut model = CaptionModel::new(spec, 11);
    // Jitter breaks the zero initializations (output projections, position
    // rows, attention feedback) so the decode paths are all live.
    for id in model.store.ids_by_name() {
        let t = model.store.value(id).clone();
        let jittered: Vec<f32> =
            t.data().iter().map(|&v| v + rng.gen_range(-0.08..0.08f32)).collect();
        model
            .store
            .set_value(id, Tensor::from_vec(t.shape().to_vec(), jittered));
    }

    let mut steps = 0usize;
    let mut worst_sum = 0.0f64;
    let mut worst_split = 0.0f64;
    for _ in 0..100 {
        let mut image = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                image.set(
                    y,
                    x,
                    [
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ],
                );
            }
        }
        let (decoded, _) = model.decode_image(&image, BOS_ID, EOS_ID).expect("decode");
        assert_eq!(decoded.maps.len(), decoded.full_attn.len());
        for (map, heads) in decoded.maps.iter().zip(&decoded.full_attn) {
            steps += 1;
            assert_eq!(map.len(), n_patches);
            for head in heads {
                assert_eq!(head.len(), n_prefix + n_patches);
                let sum: f64 = head.iter().map(|&v| v as f64).sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
            }
            // Reconstruction at the correct offset must agree; shifting the
            // split by one row must not, or the prefix drop is off by one.
            let mut mismatch_at_wrong_offset = false;
            for offset in [0usize, 1, 2] {
                let mut diff = 0.0f64;
                for i in 0..n_patches {
                    let mut acc = 0.0f32;
                    for head in heads {
                        acc += head[offset + i];
                    }
                    diff = diff.max((acc as f64 - map[i] as f64).abs());
                }
                if offset == n_prefix {
                    worst_split = worst_split.max(diff);
                } else if diff > 1e-4 {
                    mismatch_at_wrong_offset = true;
                }
            }
            assert!(
                mismatch_at_wrong_offset,
                "prefix rows indistinguishable from patch rows; split check is vacuous"
            );
        }
    }
    assert!(steps >= 200, "decodes too short to exercise the invariants: {steps}");

    // Perturbation probe: feed two different previous-attention vectors into
    // one step. The plain configuration must ignore them; the recurrent one
    // must not.
    let mut gm_diff = 0.0f32;
    let mut rgm_diff = 0.0f32;
    for _ in 0..10 {
        let mut image = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                image.set(
                    y,
                    x,
                    [
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ],
                );
            }
        }
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&model.store);
        let feats = encode_image(
            &mut g,
            &model.store,
            &mut binder,
            &model.encoder,
            &model.spec.encoder,
            &model.spec.token_flags,
            &image,
        )
        .expect("encode");
        let ctx = prepare_visual_context(&mut g, &model.store, &mut binder, &model.decoder, &feats);
        let h = g.leaf(Tensor::vector(
            (0..model.spec.decoder.dim).map(|_| rng.gen_range(-0.5..0.5f32)).collect(),
        ));
        let attn_zero = g.leaf(Tensor::zeros(vec![n_patches]));
        let spread: Vec<f32> = {
            let raw: Vec<f32> = (0..n_patches).map(|_| rng.gen_range(0.0..1.0f32)).collect();
            let total: f32 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        };
        let attn_spread = g.leaf(Tensor::vector(spread));

        for (recurrent, diff) in [(false, &mut gm_diff), (true, &mut rgm_diff)] {
            let flags = DecoderFlags {
                use_recurrent_attention: recurrent,
            };
            let a = rgm_step(
                &mut g, &model.store, &mut binder, &model.decoder, &model.spec.decoder, &flags,
                &ctx, h, attn_zero,
            );
            let b = rgm_step(
                &mut g, &model.store, &mut binder, &model.decoder, &model.spec.decoder, &flags,
                &ctx, h, attn_spread,
            );
            let va = g.value(a.patch_sum).data().to_vec();
            let vb = g.value(b.patch_sum).data().to_vec();
            for (x, y) in va.iter().zip(&vb) {
                *diff = diff.max((x - y).abs());
            }
        }
    }
    verdict(
        "attention invariants",
        worst_sum <= 1e-6 && worst_split <= 1e-6 && gm_diff == 0.0 && rgm_diff > 1e-6,
        &format!(
            "{steps} steps, worst head-sum dev {worst_sum:.2e}, worst split dev {worst_split:.2e}, \
             plain perturbation {gm_diff:.2e}, recurrent perturbation {rgm_diff:.2e}"
        ),
    );
}

/// Breadth-first flood fill, written independently of the library's
/// depth-first version. Ties resolve to the component seen first in
/// row-major scan order, the same contract the library documents.
fn oracle_largest_component(mask: &[bool], rows: usize, cols: usize) -> Option<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut cells = Vec::new();
        while let Some(i) = queue.pop_front() {
            cells.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                push(i - cols);
            }
            if r + 1 < rows {
                push(i + cols);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < cols {
                push(i + 1);
            }
        }
        if cells.len() > best.len() {
            cells.sort_unstable();
            best = cells;
        }
    }
    if best.is_empty() {
        None
    } else {
        Some(best)
    }
}

/// Pixel-count IoU: enumerate every pixel of the canvas and count
/// memberships. Slow and unarguable.
fn oracle_iou(a: &BoundingBox, b: &BoundingBox, canvas: usize) -> f64 {
    let mut in_a = 0usize;
    let mut in_b = 0usize;
    let mut both = 0usize;
    for y in 0..canvas {
        for x in 0..canvas {
            let pa = x >= a.x1 && x <= a.x2 && y >= a.y1 && y <= a.y2;
            let pb = x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2;
            in_a += pa as usize;
            in_b += pb as usize;
            both += (pa && pb) as usize;
        }
    }
    if both == 0 {
        return 0.0;
    }
    both as f64 / (in_a + in_b - both) as f64
}

#[test]
fn grounding_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);

    // Largest-component boxes against the flood-fill oracle, component cells
    // included so tie-breaking is actually exercised.
    for case in 0..500 {
        let rows = rng.gen_range(1..=12);
        let cols = rng.gen_range(1..=12);
        let density = rng.gen_range(0.15..0.85);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(density)).collect();
        if !mask.iter().any(|&m| m) {
            let i = rng.gen_range(0..mask.len());
            mask[i] = true;
        }
        let oracle = oracle_largest_component(&mask, rows, cols).expect("oracle component");
        let lib = largest_component(&mask, rows, cols).expect("library component");
        assert_eq!(lib, oracle, "case {case}: component cells differ");
        let lib_box = tight_box(&lib, cols).expect("library box");
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for &i in &oracle {
            x1 = x1.min(i % cols);
            y1 = y1.min(i / cols);
            x2 = x2.max(i % cols);
            y2 = y2.max(i / cols);
        }
        assert_eq!(lib_box, BoundingBox::new(x1, y1, x2, y2), "case {case}: box differs");
    }

    // IoU against pixel counting, bit for bit.
    for case in 0..1000 {
        let make = |rng: &mut ChaCha8Rng| {
            let x1 = rng.gen_range(0..64);
            let y1 = rng.gen_range(0..64);
            let x2 = rng.gen_range(x1..64);
            let y2 = rng.gen_range(y1..64);
            BoundingBox::new(x1, y1, x2, y2)
        };
        let a = make(&mut rng);
        let b = make(&mut rng);
        let lib = iou(&a, &b);
        let oracle = oracle_iou(&a, &b, 64);
        assert!(
            lib == oracle,
            "case {case}: iou {lib} vs pixel count {oracle} for {a:?} {b:?}"
        );
    }

    // Scale invariance of normalize-then-threshold. Power-of-two factors
    // shift exponents without rounding; the arbitrary factors run on maps
    // whose normalized values keep a margin around the cut, so a last-ulp
    // division difference cannot flip a cell.
    for case in 0..200 {
        let n = rng.gen_range(12..=100);
        let rho = if case % 2 == 0 { 0.05f32 } else { 0.2 };
        let base = rng.gen_range(0.2..3.0f32);
        let mut ratios: Vec<f32> = (0..n)
            .map(|_| {
                let mut r = rng.gen_range(0.0..1.0f32);
                if (r - rho).abs() < 0.01 {
                    r += 0.02;
                }
                r
            })
            .collect();
        let peak = rng.gen_range(0..n);
        ratios[peak] = 1.0;
        let map: Vec<f32> = ratios.iter().map(|r| r * base).collect();
        let reference = threshold_mask(&normalize_max(&map).unwrap(), rho);
        for scale in [0.00390625f32, 0.125, 0.5, 2.0, 8.0, 1024.0, 0.37, 3.789] {
            let scaled: Vec<f32> = map.iter().map(|v| v * scale).collect();
            let got = threshold_mask(&normalize_max(&scaled).unwrap(), rho);
            assert_eq!(got, reference, "case {case}: scale {scale} flipped a cell");
        }
    }

    verdict(
        "grounding oracles",
        true,
        "500 component cases, 1000 iou cases, 200 scale cases, all exact",
    );
}

#[test]
fn metric_goldens() {
    let words = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };

    // Three of the same unigram against a two-word reference: one clipped
    // match out of three, no brevity penalty since the candidate is longer.
    let bleu = corpus_bleu(&[words("the the the")], &[vec![words("the cat")]], 1).unwrap();
    let bleu_err = (bleu[0] - 1.0 / 3.0).abs();

    // Candidate at half the reference length: the brevity penalty is
    // exp(1 - 2) on a perfect unigram precision.
    let short = corpus_bleu(&[words("a")], &[vec![words("a b")]], 1).unwrap();
    let short_err = (short[0] - (-1.0f64).exp()).abs();

    // One class, two annotated instances, one prediction that hits: the
    // harmonic mean of precision 1 and recall 1/2.
    let two_truth = GroundingRecord {
        image_id: "golden_0".into(),
        predictions: vec![WordBox {
            word: "square".into(),
            bbox: BoundingBox::new(0, 0, 9, 7),
        }],
        truth: vec![
            WordBox {
                word: "square".into(),
                bbox: BoundingBox::new(0, 0, 9, 9),
            },
            WordBox {
                word: "square".into(),
                bbox: BoundingBox::new(30, 30, 39, 39),
            },
        ],
    };
    assert!((iou(&two_truth.predictions[0].bbox, &two_truth.truth[0].bbox) - 0.8).abs() < 1e-12);
    let report = f1_scores(&[two_truth], IOU_MATCH_THRESHOLD).unwrap();
    let f1_all_err = (report.f1_all - 2.0 / 3.0).abs();
    // The single prediction names a word the image contains, so restricting
    // to word-correct predictions changes nothing.
    let f1_loc_err = (report.f1_loc - 2.0 / 3.0).abs();

    // Two predictions of one class, one above and one below the overlap
    // cut: precision and recall are both 1/2.
    let half = GroundingRecord {
        image_id: "golden_1".into(),
        predictions: vec![
            WordBox {
                word: "circle".into(),
                bbox: BoundingBox::new(0, 4, 9, 13),
            },
            WordBox {
                word: "circle".into(),
                bbox: BoundingBox::new(20, 0, 29, 8),
            },
        ],
        truth: vec![
            WordBox {
                word: "circle".into(),
                bbox: BoundingBox::new(0, 0, 9, 9),
            },
            WordBox {
                word: "circle".into(),
                bbox: BoundingBox::new(20, 0, 29, 9),
            },
        ],
    };
    let half_report = f1_scores(&[half], IOU_MATCH_THRESHOLD).unwrap();
    let half_err = (half_report.f1_all - 0.5).abs().max((half_report.f1_loc - 0.5).abs());

    // Feeding the annotations back as predictions must score perfectly for
    // every class, or the matcher itself is broken.
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(
        dir.path(),
        &SceneSpec::default(),
        &CorpusCounts {
            train: 24,
            val: 8,
            test: 24,
        },
        7,
    )
    .unwrap();
    let test = load_split(dir.path(), "test").unwrap();
    let oracle = evaluate_oracle(&test).unwrap();
    let oracle_perfect = oracle.f1_all == 1.0
        && oracle.f1_loc == 1.0
        && oracle
            .per_class
            .values()
            .all(|t| t.tp > 0 && t.tp == t.n_pred && t.tp == t.n_truth);

    let tol = 1e-9;
    verdict(
        "metric goldens",
        bleu_err <= tol
            && short_err <= tol
            && f1_all_err <= tol
            && f1_loc_err <= tol
            && half_err <= tol
            && oracle_perfect,
        &format!(
            "bleu dev {bleu_err:.1e}, brevity dev {short_err:.1e}, f1 dev {f1_all_err:.1e}/{f1_loc_err:.1e}, \
             half-case dev {half_err:.1e}, oracle injection perfect over {} classes",
            oracle.per_class.len()
        ),
    );
}

/// One desk-scale matrix run shared by the threshold and ablation tests:
/// the standard cells trained on the standard corpus with one seed and one
/// recipe, timed per cell.
struct CellResult {
    name: String,
    secs: f64,
    exact: f64,
    f1_all: f64,
    f1_loc: f64,
}

struct MatrixRun {
    corpus_secs: f64,
    corpus_hash: String,
    epochs: usize,
    cells: Vec<CellResult>,
}

static MATRIX: OnceLock<MatrixRun> = OnceLock::new();

fn desk_matrix() -> &'static MatrixRun {
    MATRIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let t0 = Instant::now();
        let summary =
            generate_corpus(&corpus_dir, &SceneSpec::default(), &CorpusCounts::default(), 7)
                .unwrap();
        let corpus_secs = t0.elapsed().as_secs_f64();

        let vocab = Vocabulary::load(&corpus_dir.join("vocab.txt")).unwrap();
        let classes = relation_class_set(&corpus_dir).unwrap();
        let groundable = groundable_words(&corpus_dir).unwrap();
        let train = prepare_samples(&load_split(&corpus_dir, "train").unwrap(), &vocab, &classes);
        let val = prepare_samples(&load_split(&corpus_dir, "val").unwrap(), &vocab, &classes);
        let test = load_split(&corpus_dir, "test").unwrap();
        let ctx = EvalContext {
            vocab: &vocab,
            groundable: &groundable,
            classes: &classes,
            rho: EVAL_RHO,
        };
        let base = ModelSpec::for_canvas(64, vocab.len(), classes.len(), 9);
        let cfg = desk_train_config();

        let mut cells = Vec::new();
        for cell in standard_ablation_cells() {
            let name = cell.name.clone();
            let t = Instant::now();
            let rows = run_ablation_matrix(
                &base,
                &[cell],
                &train,
                &val,
                &test,
                &ctx,
                &cfg,
                dir.path(),
                &mut |cell_name, s| {
                    eprintln!(
                        "[{cell_name}] epoch {:>2}  lr {:.2e}  train {:.4}  val {:.4}  {:.1}s",
                        s.epoch, s.lr, s.train.total, s.val.total, s.seconds
                    );
                },
            );
            let secs = t.elapsed().as_secs_f64();
            let row = rows.into_iter().next().unwrap();
            let outcome = row.outcome.unwrap_or_else(|e| panic!("cell {name} failed: {e}"));
            eprintln!(
                "[{name}] exact {:.4}  f1_all {:.4}  f1_loc {:.4}  {secs:.0}s",
                outcome.exact_match, outcome.f1_all, outcome.f1_loc
            );
            cells.push(CellResult {
                name,
                secs,
                exact: outcome.exact_match,
                f1_all: outcome.f1_all,
                f1_loc: outcome.f1_loc,
            });
        }
        MatrixRun {
            corpus_secs,
            corpus_hash: summary.hash,
            epochs: cfg.epochs,
            cells,
        }
    })
}

fn cell<'a>(run: &'a MatrixRun, name: &str) -> &'a CellResult {
    run.cells
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("matrix has no cell {name}"))
}

#[test]
fn desk_scale_end_to_end() {
    let run = desk_matrix();
    let full = cell(run, "rgm_cls_rel");
    let total_secs = run.corpus_secs + full.secs;
    verdict(
        "desk-scale end to end",
        full.exact >= 0.90 && full.f1_loc >= 0.50 && run.epochs <= 30 && total_secs < 1800.0,
        &format!(
            "exact {:.4} (>= 0.90), f1_loc {:.4} (>= 0.50), {} epochs, {:.0}s corpus+train+eval",
            full.exact, full.f1_loc, run.epochs, total_secs
        ),
    );
}

#[test]
fn ablation_directions() {
    let run = desk_matrix();
    let gm = cell(run, "gm");
    let rgm = cell(run, "rgm");
    let full = cell(run, "rgm_cls_rel");
    verdict(
        "ablation directions",
        rgm.f1_loc >= gm.f1_loc && full.f1_all >= rgm.f1_all,
        &format!(
            "f1_loc recurrent {:.4} vs plain {:.4}, f1_all with tokens {:.4} vs without {:.4}",
            rgm.f1_loc, gm.f1_loc, full.f1_all, rgm.f1_all
        ),
    );
}

/// Reruns of every pipeline stage with identical configs must reproduce
/// byte-identical artifacts: corpus hashes, trained parameters, epoch
/// losses, and evaluation reports.
#[test]
fn determinism() {
    // Corpus: the desk corpus generated again lands on the matrix run's
    // hash, and a second small config reproduces manifests byte for byte.
    let regen = tempfile::tempdir().unwrap();
    let summary = generate_corpus(
        regen.path(),
        &SceneSpec::default(),
        &CorpusCounts::default(),
        7,
    )
    .unwrap();
    let corpus_repro = summary.hash == desk_matrix().corpus_hash;

    let small = CorpusCounts {
        train: 120,
        val: 16,
        test: 16,
    };
    let (dir_a, dir_b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sum_a = generate_corpus(dir_a.path(), &SceneSpec::default(), &small, 21).unwrap();
    let sum_b = generate_corpus(dir_b.path(), &SceneSpec::default(), &small, 21).unwrap();
    let manifest_a = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
    let manifest_b = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
    let small_repro = sum_a.hash == sum_b.hash && manifest_a == manifest_b;

    // Training: the same config twice, from corpus to checkpoint. Epoch
    // losses and final parameter bytes must agree exactly; wall-clock
    // timings are the only field allowed to differ.
    let vocab = Vocabulary::load(&dir_a.path().join("vocab.txt")).unwrap();
    let classes = relation_class_set(dir_a.path()).unwrap();
    let groundable = groundable_words(dir_a.path()).unwrap();
    let train = prepare_samples(&load_split(dir_a.path(), "train").unwrap(), &vocab, &classes);
    let val = prepare_samples(&load_split(dir_a.path(), "val").unwrap(), &vocab, &classes);
    let test = load_split(dir_a.path(), "test").unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let spec = ModelSpec::for_canvas(64, vocab.len(), classes.len(), 9);

    let run = |out: &Path| {
        let mut model = CaptionModel::new(spec.clone(), cfg.seed);
        let outcome = train_model(&mut model, &train, &val, &cfg, out, &mut |_| {}).unwrap();
        let losses: Vec<(f64, f64)> = outcome
            .history
            .iter()
            .map(|e| (e.train.total, e.val.total))
            .collect();
        let params = std::fs::read(out.join("best").join("params.vlam")).unwrap();
        (losses, params)
    };
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let (losses_a, params_a) = run(out_a.path());
    let (losses_b, params_b) = run(out_b.path());
    let train_repro = losses_a == losses_b && params_a == params_b;

    // Evaluation: the same checkpoint scores the same split identically,
    // down to the serialized report.
    let model = CaptionModel::load(&out_a.path().join("best")).unwrap();
    let ctx = EvalContext {
        vocab: &vocab,
        groundable: &groundable,
        classes: &classes,
        rho: EVAL_RHO,
    };
    let report_a = serde_json::to_string(&evaluate(&model, &test, &ctx).unwrap()).unwrap();
    let report_b = serde_json::to_string(&evaluate(&model, &test, &ctx).unwrap()).unwrap();
    let eval_repro = report_a == report_b;

    verdict(
        "determinism",
        corpus_repro && small_repro && train_repro && eval_repro,
        &format!(
            "corpus hash repro {corpus_repro}, manifest repro {small_repro}, \
             training repro {train_repro}, eval repro {eval_repro}"
        ),
    );
}
