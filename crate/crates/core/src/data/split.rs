use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Edge, RawInteractions, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("invalid split ratios {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Randomly partitions interactions into train/val/test and indexes ids densely.
///
/// Assignment is a seeded global shuffle cut at the rounded ratio boundaries. Val/test
/// edges whose user or item never occurs in train are then moved to train, val first,
/// in shuffled order; the number moved is recorded in [`Dataset::relocated`].
pub fn split(filtered: &RawInteractions, ratios: SplitRatios, seed: u64) -> Result<Dataset> {
    ratios.validate()?;

    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let mut seen = HashSet::new();
    let mut edges = Vec::with_capacity(filtered.records.len());
    for r in &filtered.records {
        let u = users.intern(&r.user);
        let i = items.intern(&r.item);
        if seen.insert((u, i)) {
            edges.push(Edge {
                user: u,
                item: i,
                rating: r.rating,
            });
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptyDataset("no interactions to split".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);

    let n = edges.len();
    let n_train = (((n as f64) * ratios.train).round() as usize).min(n);
    let n_val = (((n as f64) * ratios.val).round() as usize).min(n - n_train);
    let test = edges.split_off(n_train + n_val);
    let val = edges.split_off(n_train);
    let mut train = edges;

    let mut train_users: HashSet<usize> = train.iter().map(|e| e.user).collect();
    let mut train_items: HashSet<usize> = train.iter().map(|e| e.item).collect();
    let mut relocated = 0;
    let mut keep_warm = |held: Vec<Edge>, train: &mut Vec<Edge>| -> Vec<Edge> {
        let mut kept = Vec::with_capacity(held.len());
        for e in held {
            if train_users.contains(&e.user) && train_items.contains(&e.item) {
                kept.push(e);
            } else {
                train_users.insert(e.user);
                train_items.insert(e.item);
                train.push(e);
                relocated += 1;
            }
        }
        kept
    };
    let val = keep_warm(val, &mut train);
    let test = keep_warm(test, &mut train);
    if relocated > 0 {
        log::info!("moved {relocated} cold val/test interactions into train");
    }

    let ds = Dataset {
        n_users: users.len(),
        n_items: items.len(),
        train,
        val,
        test,
        user_vocab: users,
        item_vocab: items,
        aux_edges: BTreeMap::new(),
        relocated,
    };
    ds.validate()?;
    Ok(ds)
}
