//! Classification metrics: per-class and macro AP/AUC, accuracy, F1,
//! sensitivity, specificity, confusion matrices, and ROC points.
//!
//! AUC integrates the exact ROC step function with the trapezoid rule over
//! tie groups, which equals the pairwise-comparison statistic with ties
//! credited 0.5. A class with no positives or no negatives has undefined
//! ranking metrics; it is reported as absent and excluded from macro means.

use crate::error::{Error, Result};
use crate::model::HeadMode;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: HeadMode,
    pub per_class: Vec<ClassMetrics>,
    pub macro_ap: Option<f64>,
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Vec<Vec<usize>>,
    pub confusion_normalized: Vec<Vec<f64>>,
}

/// Raw and row-normalized confusion counts; rows without support stay zero.
pub fn confusion(labels: &[usize], preds: &[usize], k: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    if labels.len() != preds.len() {
        return Err(Error::DimMismatch(format!(
            "labels {} vs predictions {}",
            labels.len(),
            preds.len()
        )));
    }
    let mut raw = vec![vec![0usize; k]; k];
    for (&l, &p) in labels.iter().zip(preds) {
        if l >= k || p >= k {
            return Err(Error::DegenerateLabels(format!(
                "entry ({l},{p}) outside 0..{k}"
            )));
        }
        raw[l][p] += 1;
    }
    let normalized = raw
        .iter()
        .map(|row| {
            let support: usize = row.iter().sum();
            row.iter()
                .map(|&v| {
                    if support > 0 {
                        v as f64 / support as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok((raw, normalized))
}

/// One-vs-rest ROC over distinct thresholds, descending.
fn roc_curve(scores: &[f64], positives: &[bool]) -> Vec<RocPoint> {
    let p = positives.iter().filter(|&&x| x).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold,
        });
    }
    points
}

fn auc_from_roc(points: &[RocPoint]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
    }
    Some(area)
}

/// Average precision as precision-weighted recall increments over distinct
/// thresholds.
fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let p = positives.iter().filter(|&&x| x).count();
    if p == 0 || p == positives.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Computes the full report. `probs` rows must be valid distributions over
/// `mode`'s class count; `labels` are class indices.
pub fn compute_metrics(labels: &[usize], probs: &Array2<f64>, mode: HeadMode) -> Result<MetricsReport> {
    let k = match mode {
        HeadMode::TriClass => 3,
        HeadMode::Binary => 2,
    };
    if labels.is_empty() {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    if probs.dim() != (labels.len(), k) {
        return Err(Error::DimMismatch(format!(
            "probs shape {:?} vs {} labels of {k} classes",
            probs.dim(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::DegenerateLabels(format!("label outside 0..{k}")));
    }

    let preds: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect();
    let (raw, normalized) = confusion(labels, &preds, k)?;

    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let scores: Vec<f64> = probs.column(class).to_vec();
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let roc = roc_curve(&scores, &positives);
        per_class.push(ClassMetrics {
            ap: average_precision(&scores, &positives),
            auc: auc_from_roc(&roc),
            roc,
        });
    }

    let total: usize = raw.iter().map(|r| r.iter().sum::<usize>()).sum();
    let trace: usize = (0..k).map(|i| raw[i][i]).sum();
    let accuracy = trace as f64 / total as f64;

    // one-vs-rest counts per class
    let ovr = |class: usize| -> (usize, usize, usize, usize) {
        let tp = raw[class][class];
        let fn_: usize = raw[class].iter().sum::<usize>() - tp;
        let fp: usize = (0..k).filter(|&i| i != class).map(|i| raw[i][class]).sum();
        let tn = total - tp - fn_ - fp;
        (tp, fp, tn, fn_)
    };
    let recall_of = |class: usize| -> Option<f64> {
        let (tp, _, _, fn_) = ovr(class);
        (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
    };
    let specificity_of = |class: usize| -> Option<f64> {
        let (_, fp, tn, _) = ovr(class);
        (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64)
    };
    let f1_of = |class: usize| -> Option<f64> {
        let (tp, fp, _, fn_) = ovr(class);
        if tp + fn_ == 0 {
            return None;
        }
        let denom = 2 * tp + fp + fn_;
        Some(if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        })
    };

    let (sensitivity, specificity, f1) = match mode {
        HeadMode::Binary => (
            recall_of(1).unwrap_or(0.0),
            specificity_of(1).unwrap_or(0.0),
            f1_of(1).unwrap_or(0.0),
        ),
        HeadMode::TriClass => {
            let sens: Vec<Option<f64>> = (0..k).map(recall_of).collect();
            let spec: Vec<Option<f64>> = (0..k).map(specificity_of).collect();
            let f1s: Vec<Option<f64>> = (0..k).map(f1_of).collect();
            (
                mean_defined(&sens).unwrap_or(0.0),
                mean_defined(&spec).unwrap_or(0.0),
                mean_defined(&f1s).unwrap_or(0.0),
            )
        }
    };

    Ok(MetricsReport {
        mode,
        macro_ap: mean_defined(&per_class.iter().map(|c| c.ap).collect::<Vec<_>>()),
        macro_auc: mean_defined(&per_class.iter().map(|c| c.auc).collect::<Vec<_>>()),
        per_class,
        accuracy,
        f1,
        sensitivity,
        specificity,
        confusion: raw,
        confusion_normalized: normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::to_binary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary_probs(scores: &[f64]) -> Array2<f64> {
        let mut p = Array2::<f64>::zeros((scores.len(), 2));
        for (i, &s) in scores.iter().enumerate() {
            p[(i, 1)] = s;
            p[(i, 0)] = 1.0 - s;
        }
        p
    }

    /// Mann-Whitney statistic: fraction of (pos, neg) pairs ranked correctly,
    /// ties counted half.
    fn pairwise_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(positives)
            .filter(|(_, &p)| p)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(positives)
            .filter(|(_, &p)| !p)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn reference_auc_case_is_three_quarters() {
        let labels = vec![1usize, 0, 1, 0];
        let probs = binary_probs(&[0.9, 0.8, 0.7, 0.2]);
        let report = compute_metrics(&labels, &probs, HeadMode::Binary).unwrap();
        assert!((report.per_class[1].auc.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = vec![0usize, 1, 1, 0];
        let probs = binary_probs(&[0.1, 0.9, 0.8, 0.2]);
        let r = compute_metrics(&labels, &probs, HeadMode::Binary).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.sensitivity, 1.0);
        assert_eq!(r.specificity, 1.0);
        assert_eq!(r.macro_auc.unwrap(), 1.0);
        assert_eq!(r.macro_ap.unwrap(), 1.0);
    }

    #[test]
    fn auc_matches_pairwise_statistic_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.random_range(5..200);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            // quantized scores force ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) / 10.0)
                .collect();
            let probs = binary_probs(&scores);
            let r = compute_metrics(&labels, &probs, HeadMode::Binary).unwrap();
            let positives: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let expect = pairwise_auc(&scores, &positives).unwrap();
            assert!(
                (r.per_class[1].auc.unwrap() - expect).abs() < 1e-9,
                "{} vs {expect}",
                r.per_class[1].auc.unwrap()
            );
        }
    }

    #[test]
    fn confusion_identity_and_counts() {
        let (raw, norm) = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(raw[i][j], usize::from(i == j));
                assert_eq!(norm[i][j], f64::from(u8::from(i == j)));
            }
        }
        let (raw, _) = confusion(&[0, 0], &[1, 1], 3).unwrap();
        assert_eq!(raw, vec![vec![0, 2, 0], vec![0, 0, 0], vec![0, 0, 0]]);
    }

    #[test]
    fn confusion_matches_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        let (raw, norm) = confusion(&labels, &preds, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = labels
                    .iter()
                    .zip(&preds)
                    .filter(|(&l, &p)| l == i && p == j)
                    .count();
                assert_eq!(raw[i][j], expect);
            }
            let support: usize = raw[i].iter().sum();
            if support > 0 {
                let row_sum: f64 = norm[i].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn absent_class_excluded_from_macro() {
        // no Suspect labels: its AUC/AP are undefined
        let labels = vec![0usize, 0, 1, 1];
        let mut probs = Array2::<f64>::zeros((4, 3));
        for (i, &l) in labels.iter().enumerate() {
            probs[(i, l)] = 0.8;
            probs[(i, (l + 1) % 3)] = 0.1;
            probs[(i, (l + 2) % 3)] = 0.1;
        }
        let r = compute_metrics(&labels, &probs, HeadMode::TriClass).unwrap();
        assert!(r.per_class[2].auc.is_none());
        assert!(r.per_class[2].ap.is_none());
        assert!(r.macro_auc.is_some());
    }

    #[test]
    fn binary_merge_commutes_with_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut tri = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            let mut row = [0.0; 3];
            let mut sum = 0.0;
            for v in &mut row {
                *v = rng.random_range(0.01..1.0);
                sum += *v;
            }
            for (j, v) in row.iter().enumerate() {
                tri[(i, j)] = v / sum;
            }
        }
        let merged_labels: Vec<usize> = labels.iter().map(|&l| usize::from(l != 0)).collect();

        // route A: merge probabilities, then compute binary metrics
        let binary = to_binary(&tri);
        let a = compute_metrics(&merged_labels, &binary, HeadMode::Binary).unwrap();

        // route B: build the referable score directly from tri columns
        let mut direct = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            direct[(i, 1)] = tri[(i, 1)] + tri[(i, 2)];
            direct[(i, 0)] = tri[(i, 0)];
        }
        let b = compute_metrics(&merged_labels, &direct, HeadMode::Binary).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert!((a.macro_auc.unwrap() - b.macro_auc.unwrap()).abs() < 1e-12);
        assert!((a.f1 - b.f1).abs() < 1e-12);
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn report_serializes_to_json() {
        let labels = vec![0usize, 1];
        let probs = binary_probs(&[0.2, 0.9]);
        let r = compute_metrics(&labels, &probs, HeadMode::Binary).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"accuracy\":1.0"));
    }
}
