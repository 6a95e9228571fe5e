//! Ranking metrics: ROC-AUC, average precision, abnormal-subset variants,
//! and class-wise average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Scores and ground truth for one video, assembled by evaluation.
#[derive(Debug, Clone)]
pub struct VideoScores {
    pub video_id: String,
    pub label: Label,
    pub class_name: Option<String>,
    pub scores: Vec<f64>,
    pub snippet_labels: Vec<bool>,
}

/// The evaluation summary emitted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub ap: f64,
    pub auc_abn: f64,
    pub ap_abn: f64,
    pub classwise_ap: BTreeMap<String, f64>,
}

/// Rank-based ROC-AUC: the probability that a positive outranks a negative,
/// counting ties as half. Computed from mid-rank sums.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteFeature);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // mid-ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision over the descending-score sweep with step-wise
/// interpolation; tied scores enter as one group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteFeature);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_tp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / j as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Repeat every snippet score/label `k` times, turning snippet-level metrics
/// into frame-level ones when all snippets cover `k` frames.
fn expand(scores: &[f64], labels: &[bool], k: usize) -> (Vec<f64>, Vec<bool>) {
    if k <= 1 {
        return (scores.to_vec(), labels.to_vec());
    }
    let mut s = Vec::with_capacity(scores.len() * k);
    let mut l = Vec::with_capacity(labels.len() * k);
    for (score, label) in scores.iter().zip(labels.iter()) {
        for _ in 0..k {
            s.push(*score);
            l.push(*label);
        }
    }
    (s, l)
}

/// Full report: overall AUC/AP, the same restricted to abnormal videos, and
/// per-class AP where each class's videos are pooled with all normal videos.
pub fn report(videos: &[VideoScores], frames_per_snippet: usize) -> Result<MetricReport> {
    if videos.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for v in videos {
        if v.scores.len() != v.snippet_labels.len() {
            return Err(Error::MissingSnippetLabels);
        }
    }
    let collect = |pred: &dyn Fn(&VideoScores) -> bool| -> (Vec<f64>, Vec<bool>) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for v in videos.iter().filter(|v| pred(v)) {
            s.extend_from_slice(&v.scores);
            l.extend_from_slice(&v.snippet_labels);
        }
        expand(&s, &l, frames_per_snippet)
    };

    let (all_s, all_l) = collect(&|_| true);
    let auc = roc_auc(&all_s, &all_l)?;
    let ap = average_precision(&all_s, &all_l)?;

    let (abn_s, abn_l) = collect(&|v| v.label == Label::Abnormal);
    if abn_s.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    let auc_abn = roc_auc(&abn_s, &abn_l)?;
    let ap_abn = average_precision(&abn_s, &abn_l)?;

    let mut classwise_ap = BTreeMap::new();
    let classes: Vec<String> = {
        let mut set = std::collections::BTreeSet::new();
        for v in videos {
            if let Some(name) = &v.class_name {
                set.insert(name.clone());
            }
        }
        set.into_iter().collect()
    };
    for class in classes {
        let (s, l) = collect(&|v| {
            v.class_name.as_deref() == Some(class.as_str()) || v.label == Label::Normal
        });
        classwise_ap.insert(class, average_precision(&s, &l)?);
    }

    Ok(MetricReport {
        auc,
        ap,
        auc_abn,
        ap_abn,
        classwise_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_perfect_and_ties() {
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 1.0);
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_hand_case() {
        // positive scores 0.35, 0.8 against negatives 0.1, 0.4: 3 of 4 pairs won
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_errors() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedAuc)
        ));
    }

    #[test]
    fn ap_base_cases() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
        let ap = average_precision(&[0.9, 0.1], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        assert!(matches!(
            average_precision(&[0.5], &[false]),
            Err(Error::NoPositives)
        ));
    }

    /// Exhaustive threshold-sweep oracle: walk distinct scores descending,
    /// recompute precision/recall from scratch at each threshold.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &th in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= th && **l)
                .count() as f64;
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= th && !**l)
                .count() as f64;
            let recall = tp / n_pos;
            let precision = tp / (tp + fp);
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn ap_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 20;
            // coarse grid so ties actually occur
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * 8.0).round() / 8.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let ap = average_precision(&scores, &labels).unwrap();
            let oracle = ap_oracle(&scores, &labels);
            assert!((ap - oracle).abs() < 1e-9, "{ap} vs {oracle}");
        }
    }

    #[test]
    fn report_subsets_and_classes() {
        // 3 hand-labeled videos: one normal, two abnormal of distinct classes
        let videos = vec![
            VideoScores {
                video_id: "n0".into(),
                label: Label::Normal,
                class_name: None,
                scores: vec![0.1, 0.2],
                snippet_labels: vec![false, false],
            },
            VideoScores {
                video_id: "a0".into(),
                label: Label::Abnormal,
                class_name: Some("spike".into()),
                scores: vec![0.9, 0.15],
                snippet_labels: vec![true, false],
            },
            VideoScores {
                video_id: "a1".into(),
                label: Label::Abnormal,
                class_name: Some("drift".into()),
                scores: vec![0.3, 0.8],
                snippet_labels: vec![false, true],
            },
        ];
        let rep = report(&videos, 1).unwrap();
        // positives 0.9 and 0.8 outrank every negative
        assert_eq!(rep.auc, 1.0);
        assert_eq!(rep.ap, 1.0);
        assert_eq!(rep.auc_abn, 1.0);
        assert_eq!(rep.classwise_ap.len(), 2);
        assert!(rep.classwise_ap.contains_key("spike"));
        assert!(rep.classwise_ap.contains_key("drift"));
        assert_eq!(rep.classwise_ap["spike"], 1.0);

        // abnormal-only dataset: auc equals auc_abn
        let rep2 = report(&videos[1..], 1).unwrap();
        assert_eq!(rep2.auc, rep2.auc_abn);
    }

    #[test]
    fn frames_per_snippet_preserves_metrics() {
        let scores = vec![0.9, 0.4, 0.6, 0.2, 0.2];
        let labels = vec![true, false, true, false, false];
        let (s, l) = expand(&scores, &labels, 7);
        assert!((roc_auc(&s, &l).unwrap() - roc_auc(&scores, &labels).unwrap()).abs() < 1e-12);
        assert!(
            (average_precision(&s, &l).unwrap()
                - average_precision(&scores, &labels).unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn random_scores_ap_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 400;
        let mut sum = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let labels: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
            sum += average_precision(&scores, &labels).unwrap();
        }
        let mean_ap = sum / trials as f64;
        assert!((mean_ap - 0.25).abs() < 0.05, "mean AP {mean_ap}");
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_monotone_transform(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            let transformed: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() + 1.0).collect();
            let a1 = roc_auc(&scores, &labels).unwrap();
            let a2 = roc_auc(&transformed, &labels).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-12);
            let p1 = average_precision(&scores, &labels).unwrap();
            let p2 = average_precision(&transformed, &labels).unwrap();
            prop_assert!((p1 - p2).abs() < 1e-12);
        }

        #[test]
        fn auc_complement_under_negation(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 25;
            // distinct scores: a shuffled grid
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                scores.swap(i, j);
            }
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = roc_auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let b = roc_auc(&neg, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
