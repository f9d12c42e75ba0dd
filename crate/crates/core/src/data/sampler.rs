use rand::Rng;

use super::{AuxEdgeSet, Dataset, InteractionIndex, Side};
use crate::error::{Error, Result};

/// Rejection-sampling budget for negatives before a triplet is accepted as flagged.
pub const NEGATIVE_ATTEMPTS: usize = 100;

/// User `anchor` interacted with item `positive` but (unless `flagged`) not with `negative`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub flagged: bool,
}

/// Triplet over an auxiliary relation; indices are local to their side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub flagged: bool,
}

fn draw_negative<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    mut excluded: impl FnMut(usize) -> bool,
) -> (usize, bool) {
    let mut candidate = rng.random_range(0..n);
    for _ in 1..NEGATIVE_ATTEMPTS {
        if !excluded(candidate) {
            return (candidate, false);
        }
        candidate = rng.random_range(0..n);
    }
    let flagged = excluded(candidate);
    (candidate, flagged)
}

/// Draws `batch_size` (user, positive, negative) triplets from the train split.
pub fn sample_bpr_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    train_index: &InteractionIndex,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BprTriplet>> {
    if ds.train.is_empty() {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    let mut n_flagged = 0usize;
    for _ in 0..batch_size {
        let e = ds.train[rng.random_range(0..ds.train.len())];
        let (negative, flagged) =
            draw_negative(rng, ds.n_items, |j| train_index.contains(e.user, j));
        n_flagged += flagged as usize;
        out.push(BprTriplet {
            anchor: e.user,
            positive: e.item,
            negative,
            flagged,
        });
    }
    if n_flagged > 0 {
        log::debug!("{n_flagged} BPR triplets accepted without a valid negative");
    }
    Ok(out)
}

/// Partner lists for one auxiliary relation, used for negative rejection.
#[derive(Debug, Clone)]
pub struct AuxSampler<'a> {
    edges: &'a AuxEdgeSet,
    partners: Vec<Vec<usize>>,
    n_candidates: usize,
}

impl<'a> AuxSampler<'a> {
    pub fn new(edges: &'a AuxEdgeSet, n_users: usize, n_items: usize) -> Self {
        let (n_anchor, n_candidates) = match edges.side() {
            Side::UserUser => (n_users, n_users),
            Side::ItemItem => (n_items, n_items),
            Side::UserItem => (n_users, n_items),
        };
        let mut partners = vec![Vec::new(); n_anchor];
        for &(a, b) in edges.pairs() {
            partners[a].push(b);
            if edges.side().is_homogeneous() {
                partners[b].push(a);
            }
        }
        for p in &mut partners {
            p.sort_unstable();
            p.dedup();
        }
        AuxSampler {
            edges,
            partners,
            n_candidates,
        }
    }

    pub fn partners(&self, anchor: usize) -> &[usize] {
        &self.partners[anchor]
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<AuxTriplet> {
        if self.edges.is_empty() {
            log::warn!("auxiliary edge set is empty; task disabled");
            return Vec::new();
        }
        let homogeneous = self.edges.side().is_homogeneous();
        let pairs = self.edges.pairs();
        (0..batch_size)
            .map(|_| {
                let (a, b) = pairs[rng.random_range(0..pairs.len())];
                let (anchor, positive) = if homogeneous && rng.random_bool(0.5) {
                    (b, a)
                } else {
                    (a, b)
                };
                let partners = &self.partners[anchor];
                let (negative, flagged) = draw_negative(rng, self.n_candidates, |c| {
                    (homogeneous && c == anchor) || partners.binary_search(&c).is_ok()
                });
                AuxTriplet {
                    anchor,
                    positive,
                    negative,
                    flagged,
                }
            })
            .collect()
    }
}

/// Convenience wrapper building the partner index on every call.
pub fn sample_aux_batch<R: Rng + ?Sized>(
    edges: &AuxEdgeSet,
    n_users: usize,
    n_items: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<AuxTriplet> {
    AuxSampler::new(edges, n_users, n_items).sample(batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn single_valid_negative() {
        let ds = Dataset::from_splits(1, 2, vec![Edge::new(0, 0)], vec![], vec![]).unwrap();
        let idx = ds.train_index();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_bpr_batch(&ds, &idx, 64, &mut rng).unwrap();
        assert!(batch.iter().all(|t| (t.anchor, t.positive, t.negative, t.flagged) == (0, 0, 1, false)));
    }

    #[test]
    fn batch_size_is_exact() {
        let ds = Dataset::from_splits(3, 4, vec![Edge::new(0, 0), Edge::new(1, 2)], vec![], vec![])
            .unwrap();
        let idx = ds.train_index();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_bpr_batch(&ds, &idx, 2048, &mut rng).unwrap().len(), 2048);
        assert!(sample_bpr_batch(&ds, &idx, 0, &mut rng).is_err());
    }

    #[test]
    fn saturated_user_is_flagged_not_fatal() {
        let ds = Dataset::from_splits(1, 2, vec![Edge::new(0, 0), Edge::new(0, 1)], vec![], vec![])
            .unwrap();
        let idx = ds.train_index();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_bpr_batch(&ds, &idx, 10, &mut rng).unwrap();
        assert!(batch.iter().all(|t| t.flagged));
    }

    #[test]
    fn negatives_are_uniform_over_non_interacted_items() {
        let n_items = 10;
        let train = vec![Edge::new(0, 0), Edge::new(0, 3), Edge::new(0, 7)];
        let ds = Dataset::from_splits(1, n_items, train, vec![], vec![]).unwrap();
        let idx = ds.train_index();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = vec![0usize; n_items];
        let n = 100_000;
        for t in sample_bpr_batch(&ds, &idx, n, &mut rng).unwrap() {
            assert!(!idx.contains(0, t.negative));
            counts[t.negative] += 1;
        }
        let allowed: Vec<usize> = (0..n_items).filter(|j| !idx.contains(0, *j)).collect();
        let expected = n as f64 / allowed.len() as f64;
        let chi2: f64 = allowed
            .iter()
            .map(|&j| (counts[j] as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((allowed.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2={chi2} p={p}");
    }

    #[test]
    fn social_single_pair() {
        let set = AuxEdgeSet::new(Side::UserUser, vec![(0, 1)], None, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_aux_batch(&set, 3, 0, 500, &mut rng);
        let mut saw = [false; 2];
        for t in batch {
            match (t.anchor, t.positive, t.negative) {
                (0, 1, 2) => saw[0] = true,
                (1, 0, 2) => saw[1] = true,
                other => panic!("unexpected triplet {other:?}"),
            }
        }
        assert_eq!(saw, [true, true]);
    }

    #[test]
    fn homogeneous_negative_never_equals_anchor() {
        let set = AuxEdgeSet::new(Side::ItemItem, vec![(0, 1), (2, 3), (1, 4)], None, 0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in sample_aux_batch(&set, 0, 6, 100_000, &mut rng) {
            assert_ne!(t.anchor, t.negative);
            assert_ne!(t.positive, t.negative);
        }
    }

    #[test]
    fn empty_set_disables_task() {
        let set = AuxEdgeSet::new(Side::UserUser, vec![], None, 3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(sample_aux_batch(&set, 3, 0, 10, &mut rng).is_empty());
    }

    #[test]
    fn co_view_toy_file_anchors_come_from_pairs() {
        let items = crate::data::Vocab::from(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        let set = crate::data::io::parse_aux_edges(
            "#side=item-item\na\tb\nc\td\n",
            &crate::data::Vocab::new(),
            &items,
        )
        .unwrap();
        let allowed = [(0, 1), (1, 0), (2, 3), (3, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in sample_aux_batch(&set, 0, 4, 1000, &mut rng) {
            assert!(allowed.contains(&(t.anchor, t.positive)));
        }
    }
}
