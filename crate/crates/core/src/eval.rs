//! Full-ranking top-K evaluation: every item the user has not interacted with in
//! train is a candidate.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{Dataset, EvalSplit, InteractionIndex};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 4] = [5, 10, 20, 40];

fn by_score_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Indices of the `k_max` highest-scoring items for `user`, skipping `exclude`
/// (sorted). Ties go to the lower item index.
pub fn rank_user(table: &EmbeddingTable, user: usize, exclude: &[usize], k_max: usize) -> Vec<usize> {
    let eu = table.user(user);
    let mut scored: Vec<(f64, usize)> = (0..table.n_items())
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (eu.iter().zip(table.item(i)).map(|(a, b)| a * b).sum(), i))
        .collect();
    if k_max == 0 {
        return Vec::new();
    }
    if k_max < scored.len() {
        scored.select_nth_unstable_by(k_max - 1, by_score_then_index);
        scored.truncate(k_max);
    }
    scored.sort_unstable_by(by_score_then_index);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Recall, hit ratio and NDCG at `k` with binary relevance.
///
/// `relevant` must be sorted. Recall divides by `|relevant|`; the ideal DCG truncates
/// at `min(k, |relevant|)`.
pub fn metrics_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64, f64) {
    if relevant.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let recall = hits as f64 / relevant.len() as f64;
    let hit = if hits > 0 { 1.0 } else { 0.0 };
    (recall, hit, dcg / idcg)
}

/// Mean metrics over evaluated users, one entry per K.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub hit_ratio: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_users: usize,
}

impl MetricsReport {
    fn position(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|p| self.recall[p])
    }

    pub fn hit_ratio_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|p| self.hit_ratio[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|p| self.ndcg[p])
    }

    /// `(name, value)` pairs such as `("recall@20", 0.1)`.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (p, k) in self.ks.iter().enumerate() {
            out.push((format!("recall@{k}"), self.recall[p]));
            out.push((format!("hr@{k}"), self.hit_ratio[p]));
            out.push((format!("ndcg@{k}"), self.ndcg[p]));
        }
        out
    }

    /// CSV lines `split,K,metric,value,n_users`, with header.
    pub fn to_csv(&self, split: EvalSplit) -> String {
        let mut s = String::from("split,K,metric,value,n_users\n");
        for (p, k) in self.ks.iter().enumerate() {
            for (name, v) in [("recall", self.recall[p]), ("hr", self.hit_ratio[p]), ("ndcg", self.ndcg[p])] {
                s.push_str(&format!("{},{k},{name},{v},{}\n", split.as_str(), self.n_users));
            }
        }
        s
    }
}

/// Sum in a fixed pairwise tree so the result does not depend on thread count.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Evaluates every user with at least one item in `split`.
pub fn evaluate(table: &EmbeddingTable, ds: &Dataset, split: EvalSplit, ks: &[usize]) -> Result<MetricsReport> {
    evaluate_users(table, ds, &ds.train_index(), split, ks, None)
}

/// Like [`evaluate`], optionally restricted to `users`, reusing a train index.
pub fn evaluate_users(
    table: &EmbeddingTable,
    ds: &Dataset,
    train: &InteractionIndex,
    split: EvalSplit,
    ks: &[usize],
    users: Option<&[usize]>,
) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("evaluation cutoffs must be positive".into()));
    }
    if table.n_users() != ds.n_users || table.n_items() != ds.n_items {
        return Err(Error::Config("checkpoint shape does not match the dataset".into()));
    }
    let mut held: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in ds.split_edges(split) {
        held.entry(e.user).or_default().push(e.item);
    }
    if let Some(us) = users {
        held.retain(|u, _| us.contains(u));
    }
    for items in held.values_mut() {
        items.sort_unstable();
        items.dedup();
    }
    let k_max = *ks.iter().max().unwrap();
    let held: Vec<(usize, Vec<usize>)> = held.into_iter().collect();

    let per_user: Vec<Vec<f64>> = held
        .par_iter()
        .map(|(u, relevant)| {
            let exclude = train.items(*u);
            let ranked = rank_user(table, *u, exclude, k_max);
            assert!(
                ranked.iter().all(|i| exclude.binary_search(i).is_err()),
                "ranking for user {u} contains a train item"
            );
            ks.iter()
                .flat_map(|&k| {
                    let (r, h, n) = metrics_at_k(&ranked, relevant, k);
                    [r, h, n]
                })
                .collect()
        })
        .collect();

    let n_users = per_user.len();
    let mean = |slot: usize| {
        if n_users == 0 {
            return 0.0;
        }
        let col: Vec<f64> = per_user.iter().map(|m| m[slot]).collect();
        pairwise_sum(&col) / n_users as f64
    };
    Ok(MetricsReport {
        ks: ks.to_vec(),
        recall: (0..ks.len()).map(|p| mean(3 * p)).collect(),
        hit_ratio: (0..ks.len()).map(|p| mean(3 * p + 1)).collect(),
        ndcg: (0..ks.len()).map(|p| mean(3 * p + 2)).collect(),
        n_users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use crate::encoder::init_embeddings;
    use proptest::prelude::*;

    fn scored_table(scores: &[f64]) -> EmbeddingTable {
        let mut v = vec![1.0];
        v.extend_from_slice(scores);
        EmbeddingTable::from_values(1, scores.len(), 1, v).unwrap()
    }

    #[test]
    fn rank_sorts_and_excludes() {
        let t = scored_table(&[0.9, 0.1, 0.5]);
        assert_eq!(rank_user(&t, 0, &[], 2), vec![0, 2]);
        assert_eq!(rank_user(&t, 0, &[0], 2), vec![2, 1]);
        assert_eq!(rank_user(&t, 0, &[], 10), vec![0, 2, 1]);
    }

    #[test]
    fn ties_break_by_index() {
        let t = scored_table(&[0.5, 0.7, 0.5, 0.7]);
        assert_eq!(rank_user(&t, 0, &[], 3), vec![1, 3, 0]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics_at_k(&[7, 1, 2], &[7], 5), (1.0, 1.0, 1.0));
        assert_eq!(metrics_at_k(&[1, 2], &[7], 2), (0.0, 0.0, 0.0));
        let (r, h, n) = metrics_at_k(&[10, 99], &[10, 11], 2);
        assert_eq!((r, h), (0.5, 1.0));
        let expected = 1.0 / (1.0 + 1.0 / 3f64.log2());
        assert!((n - expected).abs() < 1e-15);
        assert!((n - 0.6131).abs() < 1e-4);
    }

    #[test]
    fn mean_over_users() {
        // User 0 ranks its test item first; user 1 never sees it in the top 1.
        let t = EmbeddingTable::from_values(2, 2, 1, vec![1.0, -1.0, 1.0, 0.0]).unwrap();
        let ds = Dataset::from_splits(2, 2, vec![], vec![], vec![Edge::new(0, 0), Edge::new(1, 0)]).unwrap();
        let rep = evaluate(&t, &ds, EvalSplit::Test, &[1]).unwrap();
        assert_eq!(rep.n_users, 2);
        assert_eq!(rep.recall_at(1), Some(0.5));
        assert_eq!(rep.hit_ratio_at(1), Some(0.5));
    }

    #[test]
    fn users_without_split_items_are_skipped() {
        let t = scored_table(&[0.9, 0.1]);
        let ds = Dataset::from_splits(1, 2, vec![Edge::new(0, 1)], vec![], vec![Edge::new(0, 0)]).unwrap();
        assert_eq!(evaluate(&t, &ds, EvalSplit::Val, &[1]).unwrap().n_users, 0);
        let rep = evaluate(&t, &ds, EvalSplit::Test, &[1]).unwrap();
        assert_eq!(rep.recall_at(1), Some(1.0));
        assert_eq!(rep.ndcg_at(1), Some(1.0));
    }

    #[test]
    fn csv_layout() {
        let rep = MetricsReport {
            ks: vec![5],
            recall: vec![0.25],
            hit_ratio: vec![0.5],
            ndcg: vec![0.125],
            n_users: 4,
        };
        assert_eq!(
            rep.to_csv(EvalSplit::Test),
            "split,K,metric,value,n_users\ntest,5,recall,0.25,4\ntest,5,hr,0.5,4\ntest,5,ndcg,0.125,4\n"
        );
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort(seed in 0u64..1000, k in 1usize..30) {
            let t = init_embeddings(3, 40, 4, seed).unwrap();
            let exclude = [2usize, 5, 17];
            let mut all: Vec<(f64, usize)> = (0..40)
                .filter(|i| !exclude.contains(i))
                .map(|i| (t.user(1).iter().zip(t.item(i)).map(|(a, b)| a * b).sum(), i))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let oracle: Vec<usize> = all.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(rank_user(&t, 1, &exclude, k), oracle);
        }

        #[test]
        fn metric_bounds(ranked in proptest::collection::vec(0usize..30, 0..30), rel in proptest::collection::btree_set(0usize..30, 1..10), k in 1usize..30) {
            let mut seen = std::collections::HashSet::new();
            let ranked: Vec<usize> = ranked.into_iter().filter(|i| seen.insert(*i)).collect();
            let rel: Vec<usize> = rel.into_iter().collect();
            let (r, h, n) = metrics_at_k(&ranked, &rel, k);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            prop_assert!(h >= r);
            let (r2, _, _) = metrics_at_k(&ranked, &rel, k + 1);
            prop_assert!(r2 >= r);
        }
    }
}
