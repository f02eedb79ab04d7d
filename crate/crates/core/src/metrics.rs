//! ROC AUC, average precision, MSE and RMSE.

use crate::error::{NamError, Result};

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(NamError::Dimension(format!(
            "{} predictions for {} targets",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(NamError::Usage("metric of an empty set".into()));
    }
    Ok(())
}

fn check_binary(labels: &[f64]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for y in labels {
        if *y == 1.0 {
            pos += 1;
        } else if *y != 0.0 {
            return Err(NamError::Data(format!("labels must be 0 or 1, got {y}")));
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Groups of tied scores in the given order, as (positives, negatives).
fn tie_groups(order: &[usize], scores: &[f64], labels: &[f64]) -> Vec<(f64, f64)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0.0, 0.0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                p += 1.0;
            } else {
                n += 1.0;
            }
            i += 1;
        }
        groups.push((p, n));
    }
    groups
}

fn sorted_order(scores: &[f64], descending: bool) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(NamError::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    Ok(order)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let (pos, neg) = check_binary(labels)?;
    if pos == 0 || neg == 0 {
        return Err(NamError::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let order = sorted_order(scores, false)?;
    let mut neg_below = 0.0;
    let mut wins = 0.0;
    for (p, n) in tie_groups(&order, scores, labels) {
        wins += p * (neg_below + 0.5 * n);
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: recall-weighted precision over a descending sweep,
/// with tied scores entering together.
pub fn pr_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let (pos, _) = check_binary(labels)?;
    if pos == 0 {
        return Err(NamError::UndefinedMetric("PR AUC needs at least one positive".into()));
    }
    let order = sorted_order(scores, true)?;
    let (mut tp, mut fp, mut ap) = (0.0, 0.0, 0.0);
    for (p, n) in tie_groups(&order, scores, labels) {
        tp += p;
        fp += n;
        if p > 0.0 {
            ap += p / pos as f64 * (tp / (tp + fp));
        }
    }
    Ok(ap)
}

pub fn mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(pred, y)?;
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    Ok(mse(pred, y)?.sqrt())
}

/// Share of probabilities on the correct side of 0.5.
pub fn accuracy(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(probs, labels)?;
    check_binary(labels)?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y == 1.0))
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn pairwise_auc(s: &[f64], y: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn sweep_ap(s: &[f64], y: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let total_pos = y.iter().filter(|v| **v == 1.0).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = s.iter().zip(y).filter(|(si, yi)| **si >= t && **yi == 1.0).count() as f64;
            let pp = s.iter().filter(|si| **si >= t).count() as f64;
            let recall = tp / total_pos;
            ap += (recall - prev_recall) * (tp / pp);
            prev_recall = recall;
        }
        ap
    }

    fn random_case(rng: &mut Rng, n: usize, levels: usize) -> (Vec<f64>, Vec<f64>) {
        let s: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let mut y: Vec<f64> = (0..n).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        (s, y)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1.0, 1.0]), Err(NamError::UndefinedMetric(_))));
        let mut rng = Rng::new(1);
        let (s, y) = random_case(&mut rng, 200, 1_000_000);
        assert!((roc_auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(pr_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        let y = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(pr_auc(&y, &y).unwrap(), 1.0);
        assert!(matches!(pr_auc(&[0.1, 0.2], &[0.0, 0.0]), Err(NamError::UndefinedMetric(_))));
        let mut rng = Rng::new(2);
        let (s, y) = random_case(&mut rng, 100, 1_000_000);
        assert!((pr_auc(&s, &y).unwrap() - sweep_ap(&s, &y)).abs() < 1e-10);
    }

    #[test]
    fn regression_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 3.5355).abs() < 1e-4);
        assert!(matches!(mse(&[], &[]), Err(NamError::Usage(_))));
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(accuracy(&[0.9, 0.2, 0.6], &[1.0, 0.0, 0.0]).unwrap(), 2.0 / 3.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle_with_ties(seed in 0u64..10_000, n in 2usize..300, levels in 1usize..20) {
            let mut rng = Rng::new(seed);
            let (s, y) = random_case(&mut rng, n, levels);
            prop_assert!((roc_auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-12);
            prop_assert!((pr_auc(&s, &y).unwrap() - sweep_ap(&s, &y)).abs() < 1e-10);
        }

        #[test]
        fn auc_monotone_invariance(seed in 0u64..10_000, n in 2usize..150) {
            let mut rng = Rng::new(seed);
            let (s, y) = random_case(&mut rng, n, 50);
            let a = roc_auc(&s, &y).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let lin: Vec<f64> = s.iter().map(|v| 3.0 * v - 7.0).collect();
            prop_assert_eq!(a, roc_auc(&e, &y).unwrap());
            prop_assert_eq!(a, roc_auc(&lin, &y).unwrap());
        }

        #[test]
        fn auc_negation_complements(seed in 0u64..10_000, n in 2usize..150, levels in 1usize..1000) {
            let mut rng = Rng::new(seed);
            let (s, y) = random_case(&mut rng, n, levels);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            // Half credit on both sides makes ties cancel exactly.
            let total = roc_auc(&s, &y).unwrap() + roc_auc(&neg, &y).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rmse_squared_is_mse_and_permutation_invariant(vals in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200), seed in 0u64..1000) {
            let (p, y): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
            let m = mse(&p, &y).unwrap();
            let r = rmse(&p, &y).unwrap();
            prop_assert!((r * r - m).abs() <= 1e-12 * m.max(1.0));
            let perm = Rng::new(seed).permutation(p.len());
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            prop_assert!((rmse(&pp, &yp).unwrap() - r).abs() <= 1e-12 * r.max(1.0));
        }
    }
}
