use std::collections::BTreeMap;

use acrec_autodiff::Scalar;

/// 1-based rank of `target` (dense id) in the score vector over real items;
/// `scores[c]` scores item c+1. Ties resolve in favor of the lower id.
pub fn rank_of_target<F: Scalar>(scores: &[F], target: u32) -> usize {
    let t = target as usize - 1;
    let ts = scores[t];
    let mut rank = 1;
    for (c, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && c < t) {
            rank += 1;
        }
    }
    rank
}

/// All items sorted by score descending, ties by lower dense id.
pub fn full_rank<F: Scalar>(scores: &[F]) -> Vec<u32> {
    let mut order: Vec<u32> = (1..=scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a as usize - 1], scores[b as usize - 1]);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    order
}

pub fn recall_at_k(rank: usize, k: u32) -> f64 {
    if rank as u32 <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: u32) -> f64 {
    if rank as u32 <= k {
        1.0 / ((rank as f64) + 1.0).log2()
    } else {
        0.0
    }
}

/// Average recall/NDCG over a set of ranks for each cutoff.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[u32]) -> (BTreeMap<u32, f64>, BTreeMap<u32, f64>) {
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let count = ranks.len().max(1) as f64;
    for &k in ks {
        let r: f64 = ranks.iter().map(|&rank| recall_at_k(rank, k)).sum();
        let n: f64 = ranks.iter().map(|&rank| ndcg_at_k(rank, k)).sum();
        recall.insert(k, r / count);
        ndcg.insert(k, n / count);
    }
    (recall, ndcg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_rank_by_id() {
        let scores = [0.5f64, 0.5, 0.5];
        assert_eq!(full_rank(&scores), vec![1, 2, 3]);
        assert_eq!(rank_of_target(&scores, 1), 1);
        assert_eq!(rank_of_target(&scores, 3), 3);
    }

    #[test]
    fn ranking_matches_hand_sorted_scores() {
        let scores = [0.2f64, 0.9, 0.4];
        assert_eq!(full_rank(&scores), vec![2, 3, 1]);
        assert_eq!(rank_of_target(&scores, 2), 1);
        assert_eq!(rank_of_target(&scores, 3), 2);
        assert_eq!(rank_of_target(&scores, 1), 3);
    }

    #[test]
    fn ranking_is_a_permutation() {
        let scores = [0.3f64, 0.3, 0.1, 0.9, 0.3];
        let mut r = full_rank(&scores);
        r.sort_unstable();
        assert_eq!(r, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn rank_of_target_agrees_with_full_rank_scan() {
        // Brute-force oracle: position of the target in the sorted list.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
            let target = rng.gen_range(1..=n as u32);
            let via_sort = full_rank(&scores)
                .iter()
                .position(|&i| i == target)
                .unwrap()
                + 1;
            assert_eq!(rank_of_target(&scores, target), via_sort);
        }
    }

    #[test]
    fn metric_values_at_boundaries() {
        assert_eq!(recall_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(recall_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5, "1/log2(4) = 0.5");
    }
}
