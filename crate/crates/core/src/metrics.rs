//! Accuracy, average precision and ROC AUC over raw score matrices.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lssvm::ScoreMatrix;
use crate::spectral::LabelMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Accuracy,
    Map,
    Auc,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Accuracy => "accuracy",
            Measure::Map => "map",
            Measure::Auc => "auc",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Measure::Accuracy),
            "map" => Ok(Measure::Map),
            "auc" => Ok(Measure::Auc),
            other => Err(Error::InvalidInput(format!("unknown measure '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub measure: Measure,
}

impl EvalResult {
    fn from_per_class(per_class: Vec<f64>, measure: Measure) -> Self {
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Self {
            per_class,
            mean,
            measure,
        }
    }
}

fn check_shapes(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<()> {
    if scores.n() != labels.n() || scores.k() != labels.k() {
        return Err(Error::DimensionMismatch(format!(
            "scores are {}x{}, labels are {}x{}",
            scores.n(),
            scores.k(),
            labels.n(),
            labels.k()
        )));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Mean per-class accuracy (per-class recall) of argmax predictions.
pub fn accuracy(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<EvalResult> {
    check_shapes(scores, labels)?;
    if !labels.is_one_hot() {
        return Err(Error::InvalidInput(
            "accuracy needs single-label (one-hot) targets".into(),
        ));
    }
    let k = labels.k();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for i in 0..labels.n() {
        let truth = labels.first_positive(i).expect("one-hot row");
        let predicted = argmax(scores.data().row(i).iter().copied());
        totals[truth] += 1;
        if predicted == truth {
            hits[truth] += 1;
        }
    }
    // classes absent from the evaluation set are skipped
    let per_class: Vec<f64> = (0..k)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .collect();
    Ok(EvalResult::from_per_class(per_class, Measure::Accuracy))
}

/// Non-interpolated average precision; ties in score keep index order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::InvalidInput("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Mann-Whitney AUC with half credit for tied pairs.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput("AUC needs both positive and negative samples".into()));
    }
    // rank-sum with midranks for ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += midrank * pos_in_group as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

fn per_class_binary(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    measure: Measure,
    metric: fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<EvalResult> {
    check_shapes(scores, labels)?;
    let per_class = (0..labels.k())
        .map(|c| {
            let y: Vec<u8> = (0..labels.n()).map(|i| labels.get(i, c)).collect();
            metric(&scores.column(c), &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_per_class(per_class, measure))
}

pub fn mean_average_precision(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<EvalResult> {
    per_class_binary(scores, labels, Measure::Map, average_precision)
}

pub fn mean_auc(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<EvalResult> {
    per_class_binary(scores, labels, Measure::Auc, auc)
}

pub fn evaluate(scores: &ScoreMatrix, labels: &LabelMatrix, measure: Measure) -> Result<EvalResult> {
    match measure {
        Measure::Accuracy => accuracy(scores, labels),
        Measure::Map => mean_average_precision(scores, labels),
        Measure::Auc => mean_auc(scores, labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut credit, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn accuracy_examples() {
        let labels = LabelMatrix::one_hot(&[0, 1, 1], 2).unwrap();
        let perfect = ScoreMatrix::new(labels.to_matrix()).unwrap();
        assert_eq!(accuracy(&perfect, &labels).unwrap().mean, 1.0);
        let wrong = ScoreMatrix::new(labels.to_matrix().map(|v| 1.0 - v)).unwrap();
        assert_eq!(accuracy(&wrong, &labels).unwrap().mean, 0.0);
        let multi = LabelMatrix::from_row_major(2, 2, vec![1, 1, 0, 1]).unwrap();
        assert!(accuracy(&ScoreMatrix::new(DMatrix::zeros(2, 2)).unwrap(), &multi).is_err());
    }

    #[test]
    fn accuracy_matches_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<usize> = (0..90).map(|_| rng.random_range(0..3)).collect();
        let labels = LabelMatrix::one_hot(&truth, 3).unwrap();
        let scores = ScoreMatrix::new(DMatrix::from_fn(90, 3, |_, _| rng.random_range(0.0..1.0))).unwrap();
        let mut confusion = [[0usize; 3]; 3];
        for i in 0..90 {
            let row = scores.data().row(i);
            let mut pred = 0;
            for c in 1..3 {
                if row[c] > row[pred] {
                    pred = c;
                }
            }
            confusion[truth[i]][pred] += 1;
        }
        let result = accuracy(&scores, &labels).unwrap();
        for (c, row) in confusion.iter().enumerate() {
            let total: usize = row.iter().sum();
            assert!((result.per_class[c] - row[c] as f64 / total as f64).abs() < 1e-15);
        }
        let mean = result.per_class.iter().sum::<f64>() / 3.0;
        assert!((result.mean - mean).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!(average_precision(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.3, 0.4], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(2..60);
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8))).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_measures_average_per_class() {
        let labels = LabelMatrix::from_row_major(4, 2, vec![1, 0, 0, 1, 1, 1, 0, 0]).unwrap();
        let scores = ScoreMatrix::new(DMatrix::from_row_slice(4, 2, &[0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.1, 0.5])).unwrap();
        let m = evaluate(&scores, &labels, Measure::Map).unwrap();
        assert_eq!(m.per_class.len(), 2);
        assert!((m.mean - (m.per_class[0] + m.per_class[1]) / 2.0).abs() < 1e-12);
        let a = evaluate(&scores, &labels, Measure::Auc).unwrap();
        assert_eq!(a.per_class[0], 1.0);
    }

    proptest! {
        #[test]
        fn ranking_metrics_ignore_monotone_transforms(
            scores in prop::collection::vec(-100.0f64..100.0, 2..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let shifted: Vec<f64> = scores.iter().map(|v| 2.0 * v + 1.0).collect();
            prop_assert!((auc(&scores, &labels).unwrap() - auc(&shifted, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((average_precision(&scores, &labels).unwrap()
                - average_precision(&shifted, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn reversed_scores_flip_auc(
            scores in prop::collection::hash_set(-1_000_000i64..1_000_000, 2..40),
            seed in any::<u64>(),
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|v| v as f64).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let reversed: Vec<f64> = scores.iter().map(|v| -v).collect();
            let sum = auc(&scores, &labels).unwrap() + auc(&reversed, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
