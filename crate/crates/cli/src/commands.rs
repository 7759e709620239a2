//! The five subcommand bodies.
//!
//! Every command claims its output directory first and echoes the resolved
//! configuration into it, so any run can be reproduced from its artifacts
//! alone. JSON artifacts are written with sorted keys, line-delimited where
//! records accumulate, so reruns diff cleanly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use vlamcap::decoder::{DecoderConfig, DecoderFlags};
use vlamcap::encoder::{EncoderConfig, TokenFlags};
use vlamcap::eval::{evaluate, evaluate_oracle, EvalContext};
use vlamcap::grounding::{extract_box, upsample_nearest};
use vlamcap::model::{CaptionModel, ModelSpec};
use vlamcap::pixmap::{write_pgm, Image};
use vlamcap::synthcorpus::scene::{CONTAINER_SIZE, GRID};
use vlamcap::synthcorpus::{
    generate_corpus, groundable_words, load_split, relation_class_set, CorpusCounts, SceneSpec,
    Vocabulary, BOS_ID, EOS_ID,
};
use vlamcap::training::{
    prepare_samples, run_ablation_matrix, standard_ablation_cells, train_model, AblationRow,
    EpochStats, TrainConfig,
};

use crate::config::RunConfig;
use crate::CliError;

/// Box color burned into overlays; outside the scene palette.
const BOX_COLOR: [f32; 3] = [1.0, 0.0, 1.0];

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Prepares `out` for writing. A non-empty directory is a usage error
/// unless `force` (wipe and recreate) or `keep` (write into it) says
/// otherwise; `keep` wins over `force`.
fn claim_out_dir(out: &Path, force: bool, keep: bool) -> Result<(), CliError> {
    let occupied = match fs::read_dir(out) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => false,
    };
    if occupied && !keep {
        if !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (pass --force to replace it)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| io_err(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    Ok(())
}

/// Vocabulary, relation classes, and groundable words of a corpus. The
/// `groundable` configuration key, when non-empty, replaces the corpus
/// word list.
struct CorpusAssets {
    vocab: Vocabulary,
    classes: Vec<String>,
    groundable: BTreeSet<String>,
}

fn load_assets(cfg: &RunConfig) -> Result<CorpusAssets, CliError> {
    let vocab = Vocabulary::load(&cfg.corpus.join("vocab.txt"))?;
    let classes = relation_class_set(&cfg.corpus)?;
    let groundable = if cfg.groundable.is_empty() {
        groundable_words(&cfg.corpus)?
    } else {
        cfg.groundable
            .split(',')
            .map(|w| w.trim().to_string())
            .filter(|w| !w.is_empty())
            .collect()
    };
    Ok(CorpusAssets {
        vocab,
        classes,
        groundable,
    })
}

/// Patch-grid shape of an image, or the patch-divisibility error.
fn image_grid(image: &Image, patch: usize) -> Result<(usize, usize), CliError> {
    let (h, w) = (image.height(), image.width());
    if h % patch != 0 || w % patch != 0 {
        return Err(vlamcap::Error::BadPatchGrid {
            height: h,
            width: w,
            patch,
        }
        .into());
    }
    Ok((h / patch, w / patch))
}

fn model_spec(cfg: &RunConfig, vocab: usize, relation_classes: usize, grid: (usize, usize)) -> ModelSpec {
    ModelSpec {
        encoder: EncoderConfig {
            patch: cfg.patch,
            backbone_dim: cfg.backbone_dim,
            backbone_layers: cfg.backbone_layers,
            relation_layers: cfg.relation_layers,
            heads: cfg.enc_heads,
            fused_dim: cfg.fused_dim,
            relation_classes,
        },
        decoder: DecoderConfig {
            dim: cfg.fused_dim,
            vocab,
            heads: cfg.heads,
            max_len: cfg.max_len,
        },
        token_flags: TokenFlags {
            use_rel: cfg.use_rel,
            use_cls: cfg.use_cls,
        },
        decoder_flags: DecoderFlags {
            use_recurrent_attention: cfg.use_rgm,
        },
        grid,
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        anneal: cfg.anneal,
        anneal_every: cfg.anneal_every,
        clip_norm: cfg.clip_norm,
        seed: cfg.seed,
    }
}

fn print_epoch(prefix: &str, s: &EpochStats) {
    println!(
        "{prefix}epoch {:>3}  lr {:.2e}  train {:.4} (xe {:.4} mlc {:.4})  val {:.4}  {:.1}s",
        s.epoch, s.lr, s.train.total, s.train.l_xe, s.train.l_mlc, s.val.total, s.seconds
    );
}

/// Serializes through `serde_json::Value`, which sorts keys at every level.
fn write_sorted_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let min_canvas = CONTAINER_SIZE + 2 * GRID;
    if cfg.canvas % GRID != 0 || cfg.canvas < min_canvas {
        return Err(CliError::Usage(format!(
            "canvas {} must be a multiple of {GRID} and at least {min_canvas}",
            cfg.canvas
        )));
    }
    if cfg.train == 0 {
        return Err(CliError::Usage("train count must be positive".into()));
    }
    claim_out_dir(&cfg.out, cfg.force, false)?;
    cfg.echo_into(&cfg.out)?;

    let scene = SceneSpec {
        canvas: cfg.canvas,
        distractor_prob: cfg.distractor_prob,
    };
    let counts = CorpusCounts {
        train: cfg.train,
        val: cfg.val,
        test: cfg.test,
    };
    let summary = generate_corpus(&cfg.out, &scene, &counts, cfg.seed)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        counts.train,
        counts.val,
        counts.test,
        cfg.out.display()
    );
    println!(
        "vocabulary {} tokens, {} relation classes, {} groundable words",
        summary.vocab_size,
        summary.relation_classes.len(),
        summary.groundable.len()
    );
    println!("corpus hash {}", summary.hash);
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let assets = load_assets(cfg)?;
    let train_raw = load_split(&cfg.corpus, "train")?;
    let val_raw = load_split(&cfg.corpus, "val")?;
    if train_raw.is_empty() {
        return Err(CliError::Runtime("train split has no samples".into()));
    }
    let grid = image_grid(&train_raw[0].image, cfg.patch)?;
    let spec = model_spec(cfg, assets.vocab.len(), assets.classes.len(), grid);
    let train_set = prepare_samples(&train_raw, &assets.vocab, &assets.classes);
    let val_set = prepare_samples(&val_raw, &assets.vocab, &assets.classes);

    claim_out_dir(&cfg.out, cfg.force, cfg.resume)?;
    cfg.echo_into(&cfg.out)?;

    let mut model = CaptionModel::new(spec, cfg.seed);
    let outcome = train_model(
        &mut model,
        &train_set,
        &val_set,
        &train_config(cfg),
        &cfg.out,
        &mut |s| print_epoch("", s),
    )?;

    // A resumed run extends the history already on disk; the trainer only
    // reports the epochs it executed itself.
    let history_path = cfg.out.join("history.json");
    let mut history: Vec<EpochStats> = if cfg.resume && history_path.is_file() {
        let text = fs::read_to_string(&history_path).map_err(|e| io_err(&history_path, e))?;
        serde_json::from_str(&text)?
    } else {
        Vec::new()
    };
    history.extend(outcome.history.iter().copied());
    write_sorted_json(&history_path, &history)?;

    println!(
        "best epoch {} (val {:.4}); latest model in {}, best in {}",
        outcome.best_epoch,
        outcome.best_val,
        cfg.out.display(),
        cfg.out.join("best").display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let assets = load_assets(cfg)?;
    let test = load_split(&cfg.corpus, "test")?;
    claim_out_dir(&cfg.out, cfg.force, false)?;
    cfg.echo_into(&cfg.out)?;

    // Oracle mode replaces the model's boxes with the ground truth and
    // exercises the full metric path; every F1 must come back 1.
    if cfg.oracle {
        let report = evaluate_oracle(&test)?;
        let value = json!({
            "f1_all": report.f1_all,
            "f1_loc": report.f1_loc,
            "n": test.len(),
            "oracle": true,
        });
        write_sorted_json(&cfg.out.join("report.json"), &value)?;
        println!(
            "oracle: n {}  f1_all {:.4}  f1_loc {:.4}",
            test.len(),
            report.f1_all,
            report.f1_loc
        );
        return Ok(());
    }

    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(CliError::Usage(
            "eval needs checkpoint=<model directory> (or oracle=true)".into(),
        ));
    }
    let model = CaptionModel::load(&cfg.checkpoint)?;
    let ctx = EvalContext {
        vocab: &assets.vocab,
        groundable: &assets.groundable,
        classes: &assets.classes,
        rho: cfg.rho,
    };
    let outcome = evaluate(&model, &test, &ctx)?;

    let mut lines = String::new();
    for sample in &outcome.samples {
        for b in &sample.boxes {
            let record = json!({
                "box": [b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2],
                "image": sample.id,
                "score": b.score,
                "word": b.word,
            });
            writeln!(lines, "{record}").unwrap();
        }
    }
    let results_path = cfg.out.join("results.jsonl");
    fs::write(&results_path, lines).map_err(|e| io_err(&results_path, e))?;
    write_sorted_json(&cfg.out.join("report.json"), &outcome)?;

    let rel = outcome
        .relation_map
        .map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "n {}  exact {:.4}  bleu1 {:.4}  f1_all {:.4}  f1_loc {:.4}  relation_map {rel}",
        outcome.n, outcome.exact_match, outcome.bleu[0], outcome.f1_all, outcome.f1_loc
    );
    Ok(())
}

pub fn ground(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(CliError::Usage("ground needs checkpoint=<model directory>".into()));
    }
    if cfg.image.as_os_str().is_empty() {
        return Err(CliError::Usage("ground needs image=<file.ppm>".into()));
    }
    let assets = load_assets(cfg)?;
    let image = Image::read_ppm(&cfg.image)?;
    let model = CaptionModel::load(&cfg.checkpoint)?;
    let patch = model.spec.encoder.patch;
    let grid = image_grid(&image, patch)?;
    if grid != model.spec.grid {
        return Err(CliError::Runtime(format!(
            "image grid {}x{} does not match the model grid {}x{}",
            grid.0, grid.1, model.spec.grid.0, model.spec.grid.1
        )));
    }
    claim_out_dir(&cfg.out, cfg.force, false)?;
    cfg.echo_into(&cfg.out)?;

    let (decoded, rel_logits) = model.decode_image(&image, BOS_ID, EOS_ID)?;
    let words = assets.vocab.decode(&decoded.token_ids)?;
    let caption = words.join(" ");
    let caption_path = cfg.out.join("caption.txt");
    fs::write(&caption_path, format!("{caption}\n")).map_err(|e| io_err(&caption_path, e))?;
    println!("caption: {caption}");
    if decoded.truncated {
        println!("note: the decode hit the length cap before the end token");
    }

    let (rows, cols) = model.spec.grid;
    let mut overlay = image.clone();
    let mut lines = String::new();
    for (t, word) in words.iter().enumerate() {
        if !assets.groundable.contains(word) {
            continue;
        }
        let map = &decoded.maps[t];
        let up = upsample_nearest(map, rows, cols, patch);
        let map_path = cfg.out.join(format!("vlam_{t:02}_{word}.pgm"));
        write_pgm(&map_path, rows * patch, cols * patch, &up)?;

        let bbox = extract_box(map, rows, cols, patch, cfg.rho as f32)?;
        let score = map.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        overlay.draw_rect(bbox.x1, bbox.y1, bbox.x2, bbox.y2, BOX_COLOR);
        let record = json!({
            "box": [bbox.x1, bbox.y1, bbox.x2, bbox.y2],
            "image": cfg.image.display().to_string(),
            "score": score as f64,
            "word": word,
        });
        writeln!(lines, "{record}").unwrap();
        println!(
            "word {t:>2} {word:<10} box ({}, {})..({}, {})  peak {score:.4}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        );
    }
    let boxes_path = cfg.out.join("boxes.jsonl");
    fs::write(&boxes_path, lines).map_err(|e| io_err(&boxes_path, e))?;
    overlay.write_ppm(&cfg.out.join("overlay.ppm"))?;

    if let Some(logits) = rel_logits {
        let scored: Vec<String> = assets
            .classes
            .iter()
            .zip(&logits)
            .map(|(class, &logit)| {
                let p = 1.0 / (1.0 + (-f64::from(logit)).exp());
                format!("{class} {p:.3}")
            })
            .collect();
        println!("relations: {}", scored.join(", "));
    }
    Ok(())
}

fn render_table(rows: &[AblationRow]) -> String {
    let mut text = String::new();
    writeln!(
        text,
        "{:<14}{:>8}{:>8}{:>9}{:>9}{:>9}",
        "cell", "exact", "bleu1", "f1_all", "f1_loc", "rel_map"
    )
    .unwrap();
    for row in rows {
        match &row.outcome {
            Ok(o) => {
                let rel = o
                    .relation_map
                    .map_or("n/a".to_string(), |v| format!("{v:.4}"));
                writeln!(
                    text,
                    "{:<14}{:>8.4}{:>8.4}{:>9.4}{:>9.4}{:>9}",
                    row.cell.name, o.exact_match, o.bleu[0], o.f1_all, o.f1_loc, rel
                )
                .unwrap();
            }
            Err(msg) => writeln!(text, "{:<14}error: {msg}", row.cell.name).unwrap(),
        }
    }
    text
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let assets = load_assets(cfg)?;
    let train_raw = load_split(&cfg.corpus, "train")?;
    let val_raw = load_split(&cfg.corpus, "val")?;
    let test = load_split(&cfg.corpus, "test")?;
    if train_raw.is_empty() {
        return Err(CliError::Runtime("train split has no samples".into()));
    }
    let grid = image_grid(&train_raw[0].image, cfg.patch)?;
    let base = model_spec(cfg, assets.vocab.len(), assets.classes.len(), grid);
    let train_set = prepare_samples(&train_raw, &assets.vocab, &assets.classes);
    let val_set = prepare_samples(&val_raw, &assets.vocab, &assets.classes);

    claim_out_dir(&cfg.out, cfg.force, false)?;
    cfg.echo_into(&cfg.out)?;

    let ctx = EvalContext {
        vocab: &assets.vocab,
        groundable: &assets.groundable,
        classes: &assets.classes,
        rho: cfg.rho,
    };
    let cells = standard_ablation_cells();
    let rows = run_ablation_matrix(
        &base,
        &cells,
        &train_set,
        &val_set,
        &test,
        &ctx,
        &train_config(cfg),
        &cfg.out,
        &mut |name, s| print_epoch(&format!("[{name}] "), s),
    );

    let mut records = Vec::new();
    for row in &rows {
        let record = match &row.outcome {
            Ok(o) => json!({
                "cell": row.cell.name,
                "use_rgm": row.cell.use_rgm,
                "use_cls": row.cell.use_cls,
                "use_rel": row.cell.use_rel,
                "exact_match": o.exact_match,
                "bleu1": o.bleu[0],
                "f1_all": o.f1_all,
                "f1_loc": o.f1_loc,
                "relation_map": o.relation_map,
                "error": serde_json::Value::Null,
            }),
            Err(msg) => json!({
                "cell": row.cell.name,
                "use_rgm": row.cell.use_rgm,
                "use_cls": row.cell.use_cls,
                "use_rel": row.cell.use_rel,
                "error": msg,
            }),
        };
        records.push(record);
    }
    write_sorted_json(&cfg.out.join("ablation.json"), &records)?;

    let table = render_table(&rows);
    let table_path = cfg.out.join("table.txt");
    fs::write(&table_path, &table).map_err(|e| io_err(&table_path, e))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vlamcap::training::AblationCell;

    #[test]
    fn claiming_an_occupied_directory_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        claim_out_dir(&out, false, false).unwrap();
        fs::write(out.join("marker"), "x").unwrap();

        let err = claim_out_dir(&out, false, false).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));

        claim_out_dir(&out, true, false).unwrap();
        assert!(!out.join("marker").exists());
    }

    #[test]
    fn keep_preserves_existing_contents() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        claim_out_dir(&out, false, false).unwrap();
        fs::write(out.join("marker"), "x").unwrap();

        claim_out_dir(&out, true, true).unwrap();
        assert!(out.join("marker").exists());
    }

    #[test]
    fn table_rows_survive_a_failed_cell() {
        let rows = vec![AblationRow {
            cell: AblationCell::flags_only("gm", false, false, false),
            outcome: Err("broken".into()),
        }];
        let table = render_table(&rows);
        assert!(table.contains("gm"));
        assert!(table.contains("error: broken"));
    }
}
