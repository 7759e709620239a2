//! Held-out evaluation: greedy decoding, box extraction from the
//! localization maps, and the caption and grounding metrics.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grounding::{extract_box, BoundingBox};
use crate::metrics::{corpus_bleu, f1_scores, mean_average_precision, F1Report, GroundingRecord, WordBox, IOU_MATCH_THRESHOLD};
use crate::model::CaptionModel;
use crate::synthcorpus::{LoadedSample, Vocabulary, BOS_ID, EOS_ID};

/// Everything evaluation needs besides the model and the samples.
pub struct EvalContext<'a> {
    pub vocab: &'a Vocabulary,
    /// Words eligible for box extraction.
    pub groundable: &'a BTreeSet<String>,
    /// Relation class names in classification-head order.
    pub classes: &'a [String],
    /// Box-extraction threshold on the max-normalized map.
    pub rho: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictedBox {
    pub word: String,
    pub bbox: BoundingBox,
    /// Peak of the word's localization map before normalization.
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleEval {
    pub id: String,
    /// Greedily decoded caption words.
    pub caption: Vec<String>,
    pub exact_match: bool,
    /// True when the length cap cut the decode short.
    pub truncated: bool,
    pub boxes: Vec<PredictedBox>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub n: usize,
    /// Fraction of decoded captions equal to the reference word for word.
    pub exact_match: f64,
    /// Cumulative BLEU-1 through BLEU-4.
    pub bleu: Vec<f64>,
    pub f1_all: f64,
    pub f1_loc: f64,
    /// Mean average precision of the relation classifier; absent when the
    /// relation row is off.
    pub relation_map: Option<f64>,
    pub samples: Vec<SampleEval>,
}

fn truth_word_boxes(sample: &LoadedSample) -> Vec<WordBox> {
    sample
        .truth
        .iter()
        .map(|t| WordBox {
            word: t.word.clone(),
            bbox: t.bbox,
        })
        .collect()
}

/// Decodes and scores every sample.
pub fn evaluate(
    model: &CaptionModel,
    samples: &[LoadedSample],
    ctx: &EvalContext<'_>,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::NoRecords);
    }
    let (rows, cols) = model.spec.grid;
    let patch = model.spec.encoder.patch;

    let mut records = Vec::with_capacity(samples.len());
    let mut sample_evals = Vec::with_capacity(samples.len());
    let mut candidates = Vec::with_capacity(samples.len());
    let mut references = Vec::with_capacity(samples.len());
    let mut rel_scores: Vec<Vec<f64>> = Vec::new();
    let mut rel_labels: Vec<Vec<bool>> = Vec::new();
    let mut exact = 0usize;

    for sample in samples {
        let (decoded, rel) = model.decode_image(&sample.image, BOS_ID, EOS_ID)?;
        let words = ctx.vocab.decode(&decoded.token_ids)?;
        let exact_match = words == sample.caption;
        exact += exact_match as usize;

        let mut boxes = Vec::new();
        for (t, word) in words.iter().enumerate() {
            if !ctx.groundable.contains(word) {
                continue;
            }
            let map = &decoded.maps[t];
            let bbox = extract_box(map, rows, cols, patch, ctx.rho as f32)?;
            let score = map.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
            boxes.push(PredictedBox {
                word: word.clone(),
                bbox,
                score: score as f64,
            });
        }
        records.push(GroundingRecord {
            image_id: sample.id.clone(),
            predictions: boxes
                .iter()
                .map(|b| WordBox {
                    word: b.word.clone(),
                    bbox: b.bbox,
                })
                .collect(),
            truth: truth_word_boxes(sample),
        });

        if let Some(logits) = &rel {
            if logits.len() != ctx.classes.len() {
                return Err(Error::LengthMismatch {
                    left: logits.len(),
                    right: ctx.classes.len(),
                });
            }
            rel_scores.push(logits.iter().map(|&v| v as f64).collect());
            rel_labels.push(
                ctx.classes
                    .iter()
                    .map(|c| sample.relations.iter().any(|r| r == c))
                    .collect(),
            );
        }

        candidates.push(words.clone());
        references.push(vec![sample.caption.clone()]);
        sample_evals.push(SampleEval {
            id: sample.id.clone(),
            caption: words,
            exact_match,
            truncated: decoded.truncated,
            boxes,
        });
    }

    let bleu = corpus_bleu(&candidates, &references, 4)?;
    let report = f1_scores(&records, IOU_MATCH_THRESHOLD)?;
    let relation_map = if rel_scores.len() == samples.len() {
        Some(mean_average_precision(&rel_scores, &rel_labels)?)
    } else {
        None
    };

    Ok(EvalOutcome {
        n: samples.len(),
        exact_match: exact as f64 / samples.len() as f64,
        bleu,
        f1_all: report.f1_all,
        f1_loc: report.f1_loc,
        relation_map,
        samples: sample_evals,
    })
}

/// Scores the annotations against themselves. Every class must come out
/// with a perfect F1; anything else means the matcher is broken.
pub fn evaluate_oracle(samples: &[LoadedSample]) -> Result<F1Report> {
    if samples.is_empty() {
        return Err(Error::NoRecords);
    }
    let records: Vec<GroundingRecord> = samples
        .iter()
        .map(|s| {
            let truth = truth_word_boxes(s);
            GroundingRecord {
                image_id: s.id.clone(),
                predictions: truth.clone(),
                truth,
            }
        })
        .collect();
    f1_scores(&records, IOU_MATCH_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::{EncoderConfig, TokenFlags};
    use crate::decoder::DecoderFlags;
    use crate::model::ModelSpec;
    use crate::pixmap::Image;
    use crate::synthcorpus::scene::TruthBox;

    fn tiny_model(use_rel: bool) -> CaptionModel {
        CaptionModel::new(
            ModelSpec {
                encoder: EncoderConfig {
                    patch: 4,
                    backbone_dim: 8,
                    backbone_layers: 1,
                    relation_layers: 1,
                    heads: 2,
                    fused_dim: 8,
                    relation_classes: 2,
                },
                decoder: DecoderConfig {
                    dim: 8,
                    vocab: 8,
                    heads: 2,
                    max_len: 3,
                },
                token_flags: TokenFlags {
                    use_rel,
                    use_cls: true,
                },
                decoder_flags: DecoderFlags::default(),
                grid: (2, 2),
            },
            11,
        )
    }

    fn tiny_vocab() -> Vocabulary {
        let captions: Vec<Vec<String>> = vec![
            vec!["red".into(), "square".into(), "blue".into(), "circle".into()],
        ];
        Vocabulary::build(captions.iter().map(Vec::as_slice), 1)
    }

    fn tiny_samples(n: usize) -> Vec<LoadedSample> {
        (0..n)
            .map(|i| {
                let mut image = Image::new(8, 8);
                image.set(i % 8, i % 8, [1.0, 0.0, 0.0]);
                LoadedSample {
                    id: format!("s{i}"),
                    image,
                    caption: vec!["red".into(), "square".into()],
                    truth: vec![TruthBox {
                        word: "square".into(),
                        pos: 1,
                        bbox: BoundingBox::new(0, 0, 3, 3),
                    }],
                    relations: vec!["above".into()],
                }
            })
            .collect()
    }

    #[test]
    fn untrained_model_evaluates_with_finite_scores() {
        let model = tiny_model(true);
        let vocab = tiny_vocab();
        let groundable: BTreeSet<String> = ["square".to_string()].into();
        let classes = vec!["above".to_string(), "below".to_string()];
        let ctx = EvalContext {
            vocab: &vocab,
            groundable: &groundable,
            classes: &classes,
            rho: 0.05,
        };
        let samples = tiny_samples(4);
        let outcome = evaluate(&model, &samples, &ctx).unwrap();
        assert_eq!(outcome.n, 4);
        assert!(outcome.exact_match >= 0.0 && outcome.exact_match <= 1.0);
        assert_eq!(outcome.bleu.len(), 4);
        assert!(outcome.relation_map.is_some());
        assert_eq!(outcome.samples.len(), 4);
        // Decoded words come from the vocabulary, so every groundable one
        // must have produced a box.
        for s in &outcome.samples {
            for b in &s.boxes {
                assert_eq!(b.word, "square");
            }
        }
    }

    #[test]
    fn relation_scores_are_absent_without_the_relation_row() {
        let model = tiny_model(false);
        let vocab = tiny_vocab();
        let groundable = BTreeSet::new();
        let ctx = EvalContext {
            vocab: &vocab,
            groundable: &groundable,
            classes: &[],
            rho: 0.05,
        };
        let outcome = evaluate(&model, &tiny_samples(2), &ctx).unwrap();
        assert!(outcome.relation_map.is_none());
    }

    #[test]
    fn class_count_disagreement_is_an_error() {
        let model = tiny_model(true);
        let vocab = tiny_vocab();
        let groundable = BTreeSet::new();
        let classes = vec!["above".to_string()];
        let ctx = EvalContext {
            vocab: &vocab,
            groundable: &groundable,
            classes: &classes,
            rho: 0.05,
        };
        assert!(matches!(
            evaluate(&model, &tiny_samples(2), &ctx),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn oracle_injection_scores_perfectly() {
        let report = evaluate_oracle(&tiny_samples(5)).unwrap();
        assert_eq!(report.f1_all, 1.0);
        assert_eq!(report.f1_loc, 1.0);
        for (word, tally) in &report.per_class {
            assert_eq!(tally.tp, tally.n_truth, "{word}");
        }
    }
}
