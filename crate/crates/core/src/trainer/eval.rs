use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: String,
    /// `R@K` keyed by K.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recall: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Sign agreement of regression outputs with their targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
}

/// Candidate indices by descending score, ties by ascending index.
pub fn rank_candidates(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of `target` under [`rank_candidates`].
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// `R@K` for a square score matrix whose row `i` scores every candidate for
/// query `i`, the true candidate being `i`.
pub fn recall_at_k(scores: &[Vec<f64>], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::contract(format!("retrieval needs at least 2 items, got {n}")));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != n) {
        return Err(Error::shape(format!("score row of {} for {n} queries", row.len())));
    }
    let ranks: Vec<usize> = scores.iter().enumerate().map(|(i, row)| rank_of(row, i)).collect();
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
        .collect())
}

pub fn sign_accuracy(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred
        .iter()
        .zip(target)
        .filter(|(p, t)| (**p >= 0.0) == (**t >= 0.0))
        .count();
    hits as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_rank(scores: &[f64], target: usize) -> usize {
        // Every ordering position that could hold the target, enumerated.
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in 0..n - 1 - i {
                let (a, b) = (order[j], order[j + 1]);
                if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                    order.swap(j, j + 1);
                }
            }
        }
        order.iter().position(|&c| c == target).unwrap() + 1
    }

    #[test]
    fn perfect_scorer_recalls_everything() {
        let n = 6;
        let s: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = recall_at_k(&s, &[1, 5]).unwrap();
        assert_eq!(r[&1], 1.0);
        assert_eq!(r[&5], 1.0);
    }

    #[test]
    fn constant_scorer_only_ranks_first_item_first() {
        let n = 8;
        let s = vec![vec![0.5; n]; n];
        let r = recall_at_k(&s, &[1, 5, 10]).unwrap();
        assert_eq!(r[&1], 1.0 / n as f64);
        assert_eq!(r[&5], 5.0 / n as f64);
        assert_eq!(r[&10], 1.0);
        for (i, row) in s.iter().enumerate() {
            assert_eq!(rank_of(row, i), brute_rank(row, i));
        }
    }

    #[test]
    fn too_few_items_is_rejected() {
        assert!(matches!(recall_at_k(&[vec![1.0]], &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn sign_accuracy_counts_agreement() {
        assert_eq!(sign_accuracy(&[0.3, -0.1, 2.0, -4.0], &[1.0, 1.0, 0.5, -0.5]), 0.75);
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(
            scores in proptest::collection::vec(prop_oneof![Just(0.0), Just(0.5), -1.0f64..1.0], 2..12),
        ) {
            let order = rank_candidates(&scores);
            for t in 0..scores.len() {
                let r = brute_rank(&scores, t);
                prop_assert_eq!(rank_of(&scores, t), r);
                prop_assert_eq!(order[r - 1], t);
            }
        }

        #[test]
        fn recall_is_monotone_in_k(
            flat in proptest::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 36),
        ) {
            let s: Vec<Vec<f64>> = flat.chunks(6).map(<[f64]>::to_vec).collect();
            let r = recall_at_k(&s, &[1, 2, 5, 10]).unwrap();
            let v: Vec<f64> = r.values().copied().collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
