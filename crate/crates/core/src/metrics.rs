//! Evaluation metrics: grounding F1, corpus BLEU, relation mAP.
//!
//! Grounding quality is scored per word class and macro-averaged. Two
//! variants share the same matching: `f1_all` charges every predicted and
//! every ground-truth instance, while `f1_loc` keeps only predictions whose
//! word also appears in the image and ground-truth instances of words the
//! model actually produced, isolating localization quality from word errors.
//! Shrinking denominators while keeping the matches fixed can only raise
//! precision and recall, so `f1_loc >= f1_all` holds per class and in the
//! macro average.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::grounding::{iou, BoundingBox};

/// IoU above which a predicted box counts as hitting a ground-truth box.
pub const IOU_MATCH_THRESHOLD: f64 = 0.5;

/// One localized word instance.
#[derive(Clone, Debug, PartialEq)]
pub struct WordBox {
    pub word: String,
    pub bbox: BoundingBox,
}

/// Everything the grounding metrics need from one image: the localized
/// words the model produced and the annotated instances.
#[derive(Clone, Debug)]
pub struct GroundingRecord {
    pub image_id: String,
    pub predictions: Vec<WordBox>,
    pub truth: Vec<WordBox>,
}

/// Per-class tallies after matching.
#[derive(Clone, Debug, Default)]
pub struct ClassTally {
    /// Matched prediction/truth pairs with IoU above the threshold.
    pub tp: usize,
    /// All predicted instances.
    pub n_pred: usize,
    /// All ground-truth instances.
    pub n_truth: usize,
    /// Predicted instances in images whose truth contains the word.
    pub n_pred_word_correct: usize,
    /// Ground-truth instances in images where the word was predicted.
    pub n_truth_word_covered: usize,
}

impl ClassTally {
    fn f1_all(&self) -> f64 {
        f1_from_counts(self.tp, self.n_pred, self.n_truth)
    }

    fn f1_loc(&self) -> f64 {
        f1_from_counts(self.tp, self.n_pred_word_correct, self.n_truth_word_covered)
    }
}

fn f1_from_counts(tp: usize, n_pred: usize, n_truth: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_truth as f64;
    2.0 * p * r / (p + r)
}

/// Macro-averaged grounding F1 over every class seen in predictions or
/// truth.
#[derive(Clone, Debug)]
pub struct F1Report {
    pub f1_all: f64,
    pub f1_loc: f64,
    pub per_class: BTreeMap<String, ClassTally>,
}

/// Matches predictions to ground truth and scores both F1 variants.
///
/// Matching is per image and per class: predictions in caption order each
/// take the unmatched ground-truth box of the same word with the highest
/// IoU, and the pair counts as a true positive when that IoU exceeds
/// `iou_threshold`.
pub fn f1_scores(records: &[GroundingRecord], iou_threshold: f64) -> Result<F1Report> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut classes: BTreeMap<String, ClassTally> = BTreeMap::new();
    for rec in records {
        let mut words: BTreeSet<&str> = BTreeSet::new();
        words.extend(rec.predictions.iter().map(|p| p.word.as_str()));
        words.extend(rec.truth.iter().map(|t| t.word.as_str()));
        for word in words {
            let preds: Vec<&WordBox> = rec
                .predictions
                .iter()
                .filter(|p| p.word == word)
                .collect();
            let truths: Vec<&WordBox> = rec.truth.iter().filter(|t| t.word == word).collect();
            let tally = classes.entry(word.to_string()).or_default();
            tally.n_pred += preds.len();
            tally.n_truth += truths.len();
            if !truths.is_empty() {
                tally.n_pred_word_correct += preds.len();
            }
            if !preds.is_empty() {
                tally.n_truth_word_covered += truths.len();
            }
            let mut taken = vec![false; truths.len()];
            for pred in &preds {
                let mut best: Option<(usize, f64)> = None;
                for (j, truth) in truths.iter().enumerate() {
                    if taken[j] {
                        continue;
                    }
                    let overlap = iou(&pred.bbox, &truth.bbox);
                    if best.map_or(true, |(_, b)| overlap > b) {
                        best = Some((j, overlap));
                    }
                }
                if let Some((j, overlap)) = best {
                    if overlap > iou_threshold {
                        taken[j] = true;
                        tally.tp += 1;
                    }
                }
            }
        }
    }
    // Records with no instances at all leave nothing to average; both
    // scores are zero rather than 0/0.
    let (f1_all, f1_loc) = if classes.is_empty() {
        (0.0, 0.0)
    } else {
        let n = classes.len() as f64;
        (
            classes.values().map(ClassTally::f1_all).sum::<f64>() / n,
            classes.values().map(ClassTally::f1_loc).sum::<f64>() / n,
        )
    };
    Ok(F1Report {
        f1_all,
        f1_loc,
        per_class: classes,
    })
}

/// Cumulative corpus BLEU-1..max_n with clipped n-gram counts and the
/// standard brevity penalty. No smoothing: a missing n-gram order zeroes
/// that cumulative score. Reference length uses, per candidate, the
/// reference closest in length (ties to the shorter).
pub fn corpus_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    assert!((1..=8).contains(&max_n), "unreasonable n-gram order {max_n}");

    let mut match_count = vec![0usize; max_n];
    let mut total_count = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            if cand.len() < n {
                continue;
            }
            let cand_grams = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_grams {
                let clip = max_ref.get(gram).copied().unwrap_or(0);
                match_count[n - 1] += count.min(&clip);
                total_count[n - 1] += count;
            }
        }
    }

    let bp = if cand_len >= ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };

    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut log_sum = 0.0;
        let mut degenerate = false;
        for k in 0..n {
            if match_count[k] == 0 || total_count[k] == 0 {
                degenerate = true;
                break;
            }
            log_sum += (match_count[k] as f64 / total_count[k] as f64).ln();
        }
        scores.push(if degenerate {
            0.0
        } else {
            bp * (log_sum / n as f64).exp()
        });
    }
    Ok(scores)
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let d = r.len().abs_diff(cand_len);
        let bd = best.abs_diff(cand_len);
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() < n {
        return counts;
    }
    for start in 0..=tokens.len() - n {
        *counts.entry(&tokens[start..start + n]).or_insert(0) += 1;
    }
    counts
}

/// Macro mean average precision for multi-label scores.
///
/// Rows are samples, columns are classes. Per class, samples are ranked by
/// score (descending, ties by ascending sample index) and AP is the mean of
/// precision taken at each positive. Classes without positives are skipped;
/// if no class has a positive the metric is undefined.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::NoRecords);
    }
    let n_classes = scores[0].len();
    for (s, l) in scores.iter().zip(labels) {
        assert_eq!(s.len(), n_classes, "ragged score rows");
        assert_eq!(l.len(), n_classes, "ragged label rows");
    }
    let mut aps = Vec::new();
    for c in 0..n_classes {
        let n_pos = labels.iter().filter(|row| row[c]).count();
        if n_pos == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b][c]
                .partial_cmp(&scores[a][c])
                .expect("non-finite score")
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &idx) in order.iter().enumerate() {
            if labels[idx][c] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / n_pos as f64);
    }
    if aps.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn wb(word: &str, x1: usize, y1: usize, x2: usize, y2: usize) -> WordBox {
        WordBox {
            word: word.into(),
            bbox: BoundingBox::new(x1, y1, x2, y2),
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn perfect_predictions_score_one_on_both_f1s() {
        let records = vec![GroundingRecord {
            image_id: "a".into(),
            predictions: vec![wb("square", 0, 0, 15, 15), wb("circle", 32, 32, 47, 47)],
            truth: vec![wb("square", 0, 0, 15, 15), wb("circle", 32, 32, 47, 47)],
        }];
        let report = f1_scores(&records, IOU_MATCH_THRESHOLD).unwrap();
        assert_eq!(report.f1_all, 1.0);
        assert_eq!(report.f1_loc, 1.0);
    }

    #[test]
    fn wrong_word_right_box_hurts_all_more_than_loc() {
        // Image truth: one square. Prediction: "circle" on the square's box
        // plus a correctly grounded "square" in a second image.
        let records = vec![
            GroundingRecord {
                image_id: "a".into(),
                predictions: vec![wb("circle", 0, 0, 15, 15)],
                truth: vec![wb("square", 0, 0, 15, 15)],
            },
            GroundingRecord {
                image_id: "b".into(),
                predictions: vec![wb("square", 8, 8, 23, 23)],
                truth: vec![wb("square", 8, 8, 23, 23)],
            },
        ];
        let report = f1_scores(&records, IOU_MATCH_THRESHOLD).unwrap();
        // Class "square": f1_all uses 1 TP over 1 pred and 2 truths
        // (precision 1, recall 1/2, f1 2/3); f1_loc drops the image-a truth
        // because "square" was never predicted there, giving 1.
        // Class "circle": no truth anywhere, f1 = 0 either way.
        assert_abs_diff_eq!(report.f1_all, (2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.f1_loc, 1.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_words_match_distinct_truth_boxes() {
        // Two squares in the image, two "square" predictions. Each must
        // consume a different truth box: the second prediction cannot reuse
        // the first box even though its IoU with it is higher.
        let records = vec![GroundingRecord {
            image_id: "a".into(),
            predictions: vec![wb("square", 0, 0, 15, 15), wb("square", 0, 0, 15, 15)],
            truth: vec![wb("square", 0, 0, 15, 15), wb("square", 40, 40, 55, 55)],
        }];
        let report = f1_scores(&records, IOU_MATCH_THRESHOLD).unwrap();
        let tally = &report.per_class["square"];
        assert_eq!(tally.tp, 1);
        assert_eq!(tally.n_pred, 2);
        assert_eq!(tally.n_truth, 2);
    }

    #[test]
    fn boundary_iou_does_not_count_as_match() {
        // IoU exactly at the threshold is rejected: matching is strict.
        // Boxes 16x8 and 8x8 sharing an 8x8 half give IoU exactly 0.5.
        let records = vec![GroundingRecord {
            image_id: "a".into(),
            predictions: vec![wb("square", 0, 0, 15, 7)],
            truth: vec![wb("square", 0, 0, 7, 7)],
        }];
        let report = f1_scores(&records, IOU_MATCH_THRESHOLD).unwrap();
        assert_eq!(report.per_class["square"].tp, 0);
        assert_eq!(report.f1_all, 0.0);
    }

    #[test]
    fn empty_record_list_is_an_error() {
        assert!(matches!(f1_scores(&[], 0.5), Err(Error::NoRecords)));
    }

    #[test]
    fn bleu_is_one_for_exact_matches() {
        let cands = vec![toks("a red square above a blue circle")];
        let refs = vec![vec![toks("a red square above a blue circle")]];
        let scores = corpus_bleu(&cands, &refs, 4).unwrap();
        for s in scores {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bleu_matches_hand_computed_partial_overlap() {
        // cand = a b c vs ref = a b d: p1 = 2/3, p2 = 1/2, p3 = 0.
        let cands = vec![toks("a b c")];
        let refs = vec![vec![toks("a b d")]];
        let scores = corpus_bleu(&cands, &refs, 3).unwrap();
        assert_abs_diff_eq!(scores[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[1], (2.0f64 / 3.0 * 0.5).sqrt(), epsilon = 1e-12);
        assert_eq!(scores[2], 0.0);
    }

    #[test]
    fn bleu_clips_repeated_unigrams() {
        // "the the the the" against "the cat": only one "the" is creditable.
        let cands = vec![toks("the the the the")];
        let refs = vec![vec![toks("the cat")]];
        let scores = corpus_bleu(&cands, &refs, 1).unwrap();
        assert_abs_diff_eq!(scores[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn bleu_applies_brevity_penalty() {
        // One-token candidate against a two-token reference: p1 = 1 but the
        // brevity penalty is e^(1 - 2/1).
        let cands = vec![toks("a")];
        let refs = vec![vec![toks("a b")]];
        let scores = corpus_bleu(&cands, &refs, 1).unwrap();
        assert_abs_diff_eq!(scores[0], (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn bleu_rejects_mismatched_lengths() {
        let cands = vec![toks("a")];
        assert!(matches!(
            corpus_bleu(&cands, &[], 1),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn map_matches_hand_computed_ranking() {
        // One class, scores [0.9, 0.8, 0.7], labels [+, -, +]:
        // AP = (1/1 + 2/3) / 2 = 5/6.
        let scores = vec![vec![0.9], vec![0.8], vec![0.7]];
        let labels = vec![vec![true], vec![false], vec![true]];
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert_abs_diff_eq!(map, 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn map_breaks_score_ties_by_sample_index() {
        // Equal scores: sample 0 (negative) ranks before sample 1, so the
        // positive sits at rank 2.
        let scores = vec![vec![0.5], vec![0.5]];
        let labels = vec![vec![false], vec![true]];
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert_abs_diff_eq!(map, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn map_skips_positive_free_classes_and_errors_when_none_remain() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let labels = vec![vec![true, false], vec![false, false]];
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert_abs_diff_eq!(map, 1.0, epsilon = 1e-12);
        let none = vec![vec![false, false], vec![false, false]];
        assert!(matches!(
            mean_average_precision(&scores, &none),
            Err(Error::NoPositives)
        ));
    }

    proptest! {
        /// The localization F1 never falls below the full F1: its
        /// denominators are subsets under identical matches.
        #[test]
        fn f1_loc_dominates_f1_all(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let words = ["square", "circle", "triangle"];
            let mut records = Vec::new();
            for i in 0..rng.gen_range(1..5) {
                let mut predictions = Vec::new();
                let mut truth = Vec::new();
                for _ in 0..rng.gen_range(0..4usize) {
                    let w = words[rng.gen_range(0..3)];
                    let x = rng.gen_range(0..40usize);
                    let y = rng.gen_range(0..40usize);
                    let s = rng.gen_range(4..20usize);
                    predictions.push(wb(w, x, y, x + s, y + s));
                }
                for _ in 0..rng.gen_range(0..4usize) {
                    let w = words[rng.gen_range(0..3)];
                    let x = rng.gen_range(0..40usize);
                    let y = rng.gen_range(0..40usize);
                    let s = rng.gen_range(4..20usize);
                    truth.push(wb(w, x, y, x + s, y + s));
                }
                records.push(GroundingRecord {
                    image_id: format!("img{i}"),
                    predictions,
                    truth,
                });
            }
            if let Ok(report) = f1_scores(&records, 0.5) {
                prop_assert!(report.f1_loc >= report.f1_all - 1e-12);
                for tally in report.per_class.values() {
                    prop_assert!(tally.f1_loc() >= tally.f1_all() - 1e-12);
                }
            }
        }

        /// BLEU stays in [0, 1] and equals 1 when candidate == reference.
        #[test]
        fn bleu_bounds(words in proptest::collection::vec(0usize..5, 1..10)) {
            let names = ["a", "b", "c", "d", "e"];
            let sent: Vec<String> = words.iter().map(|&w| names[w].to_string()).collect();
            let scores = corpus_bleu(
                &[sent.clone()],
                &[vec![sent]],
                4,
            ).unwrap();
            for s in scores {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            }
        }
    }
}
