//! Interaction data: ingestion, k-core filtering, splitting and mini-batch sampling.
//!
//! Users and items are addressed by dense indices `0..n_users` and `0..n_items`.
//! The embedding table places users first, so item `i` lives in row `n_users + i`.

mod io;
mod kcore;
mod sampler;
mod split;

pub use io::{load_aux_edges, load_categories, load_interactions, Format, RawInteractions, Record};
pub use kcore::k_core_filter;
pub use sampler::{
    sample_aux_batch, sample_bpr_batch, AuxSampler, AuxTriplet, BprTriplet, NEGATIVE_ATTEMPTS,
};
pub use split::{split, SplitRatios};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bidirectional map between opaque external ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `id`, assigning the next free one if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { ids, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.ids
    }
}

/// One observed user-item interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub user: usize,
    pub item: usize,
    pub rating: Option<f64>,
}

impl Edge {
    pub fn new(user: usize, item: usize) -> Self {
        Edge {
            user,
            item,
            rating: None,
        }
    }

    pub fn rated(user: usize, item: usize, rating: f64) -> Self {
        Edge {
            user,
            item,
            rating: Some(rating),
        }
    }
}

/// Which entity types an auxiliary edge set connects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    UserUser,
    ItemItem,
    UserItem,
}

impl Side {
    pub fn is_homogeneous(self) -> bool {
        !matches!(self, Side::UserItem)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::UserUser => "user-user",
            Side::ItemItem => "item-item",
            Side::UserItem => "user-item",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "user-user" => Ok(Side::UserUser),
            "item-item" => Ok(Side::ItemItem),
            "user-item" => Ok(Side::UserItem),
            other => Err(Error::Format(format!("unknown edge side `{other}`"))),
        }
    }
}

/// Auxiliary relation (social links, co-views, shared categories, ...).
///
/// Homogeneous sets are stored canonically as `(min, max)` with self-pairs removed
/// and duplicates collapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxEdgeSet {
    side: Side,
    pairs: Vec<(usize, usize)>,
    labels: Option<Vec<f64>>,
}

impl AuxEdgeSet {
    pub fn new(
        side: Side,
        pairs: Vec<(usize, usize)>,
        labels: Option<Vec<f64>>,
        n_users: usize,
        n_items: usize,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != pairs.len() {
                return Err(Error::Format(format!(
                    "{} labels for {} pairs",
                    l.len(),
                    pairs.len()
                )));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite auxiliary label".into()));
            }
        }
        let (na, nb) = match side {
            Side::UserUser => (n_users, n_users),
            Side::ItemItem => (n_items, n_items),
            Side::UserItem => (n_users, n_items),
        };
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= na || b >= nb) {
            return Err(Error::Format(format!(
                "auxiliary pair ({a}, {b}) out of range for side {}",
                side.as_str()
            )));
        }

        let mut seen = HashSet::with_capacity(pairs.len());
        let mut out_pairs = Vec::with_capacity(pairs.len());
        let mut out_labels = labels.as_ref().map(|_| Vec::with_capacity(pairs.len()));
        for (k, &(a, b)) in pairs.iter().enumerate() {
            let key = if side.is_homogeneous() {
                if a == b {
                    continue;
                }
                (a.min(b), a.max(b))
            } else {
                (a, b)
            };
            if seen.insert(key) {
                out_pairs.push(key);
                if let (Some(out), Some(src)) = (out_labels.as_mut(), labels.as_ref()) {
                    out.push(src[k]);
                }
            }
        }
        Ok(AuxEdgeSet {
            side,
            pairs: out_pairs,
            labels: out_labels,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sorted per-user item lists over a set of edges.
#[derive(Debug, Clone)]
pub struct InteractionIndex {
    by_user: Vec<Vec<usize>>,
}

impl InteractionIndex {
    pub fn build(n_users: usize, edges: &[Edge]) -> Self {
        let mut by_user = vec![Vec::new(); n_users];
        for e in edges {
            by_user[e.user].push(e.item);
        }
        for items in &mut by_user {
            items.sort_unstable();
            items.dedup();
        }
        InteractionIndex { by_user }
    }

    pub fn items(&self, user: usize) -> &[usize] {
        &self.by_user[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.by_user[user].binary_search(&item).is_ok()
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }
}

/// Filtered, split interaction data with auxiliary relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Edge>,
    pub val: Vec<Edge>,
    pub test: Vec<Edge>,
    pub user_vocab: Vocab,
    pub item_vocab: Vocab,
    pub aux_edges: BTreeMap<String, AuxEdgeSet>,
    /// Val/test edges moved into train because an endpoint was absent from train.
    pub relocated: usize,
}

const BUNDLE_MAGIC: &[u8; 8] = b"PMTDATA1";

impl Dataset {
    /// Builds a dataset from pre-indexed splits, checking index ranges and split disjointness.
    ///
    /// Unlike [`split`], this does not require val/test entities to occur in train, so
    /// cold-start scenarios can be expressed directly.
    pub fn from_splits(
        n_users: usize,
        n_items: usize,
        train: Vec<Edge>,
        val: Vec<Edge>,
        test: Vec<Edge>,
    ) -> Result<Self> {
        let user_vocab = Vocab::from((0..n_users).map(|u| format!("u{u}")).collect::<Vec<_>>());
        let item_vocab = Vocab::from((0..n_items).map(|i| format!("i{i}")).collect::<Vec<_>>());
        let ds = Dataset {
            n_users,
            n_items,
            train,
            val,
            test,
            user_vocab,
            item_vocab,
            aux_edges: BTreeMap::new(),
            relocated: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_vocab.len() != self.n_users || self.item_vocab.len() != self.n_items {
            return Err(Error::Format("vocabulary size mismatch".into()));
        }
        let mut seen: HashMap<(usize, usize), &str> = HashMap::new();
        for (name, edges) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for e in edges {
                if e.user >= self.n_users || e.item >= self.n_items {
                    return Err(Error::Format(format!(
                        "{name} edge ({}, {}) out of range",
                        e.user, e.item
                    )));
                }
                if let Some(r) = e.rating {
                    if !r.is_finite() {
                        return Err(Error::Format(format!("{name} edge has non-finite rating")));
                    }
                }
                if let Some(prev) = seen.insert((e.user, e.item), name) {
                    if prev != name {
                        return Err(Error::Format(format!(
                            "edge ({}, {}) appears in both {prev} and {name}",
                            e.user, e.item
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn item_row(&self, item: usize) -> usize {
        self.n_users + item
    }

    pub fn train_index(&self) -> InteractionIndex {
        InteractionIndex::build(self.n_users, &self.train)
    }

    pub fn split_edges(&self, split: EvalSplit) -> &[Edge] {
        match split {
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
        }
    }

    pub fn n_interactions(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn density(&self) -> f64 {
        self.n_interactions() as f64 / (self.n_users as f64 * self.n_items as f64)
    }

    pub fn add_aux(&mut self, name: impl Into<String>, edges: AuxEdgeSet) {
        self.aux_edges.insert(name.into(), edges);
    }

    /// Human-readable statistics written next to a prepared bundle.
    pub fn stats(&self) -> String {
        let mut s = format!(
            "users\t{}\nitems\t{}\ninteractions\t{}\ndensity\t{:.3}%\ntrain\t{}\nval\t{}\ntest\t{}\nrelocated\t{}\n",
            self.n_users,
            self.n_items,
            self.n_interactions(),
            100.0 * self.density(),
            self.train.len(),
            self.val.len(),
            self.test.len(),
            self.relocated,
        );
        for (name, set) in &self.aux_edges {
            s.push_str(&format!("aux.{name}\t{}\t{}\n", set.side().as_str(), set.len()));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(BUNDLE_MAGIC).map_err(|e| Error::io(path, e))?;
        bincode::serialize_into(&mut w, self)
            .map_err(|e| Error::Format(format!("cannot encode dataset bundle: {e}")))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format(format!("{} is not a dataset bundle", path.display())));
        }
        let ds: Dataset = bincode::deserialize_from(r)
            .map_err(|e| Error::Format(format!("corrupt dataset bundle: {e}")))?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Held-out split used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" | "valid" | "validation" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homogeneous_sets_are_canonical() {
        let set = AuxEdgeSet::new(
            Side::UserUser,
            vec![(1, 0), (0, 1), (2, 2), (2, 1)],
            None,
            3,
            0,
        )
        .unwrap();
        assert_eq!(set.pairs(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn user_item_sets_keep_orientation() {
        let set = AuxEdgeSet::new(Side::UserItem, vec![(1, 0), (0, 1)], None, 2, 2).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn out_of_range_aux_pair_rejected() {
        assert!(AuxEdgeSet::new(Side::ItemItem, vec![(0, 5)], None, 10, 3).is_err());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let err = Dataset::from_splits(1, 2, vec![Edge::new(0, 0)], vec![Edge::new(0, 0)], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::from_splits(
            2,
            3,
            vec![Edge::rated(0, 0, 4.0), Edge::new(1, 1)],
            vec![Edge::new(0, 2)],
            vec![],
        )
        .unwrap();
        ds.add_aux("social", AuxEdgeSet::new(Side::UserUser, vec![(0, 1)], None, 2, 3).unwrap());
        let path = dir.path().join("ds.bin");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.user_vocab.get("u1"), Some(1));
    }
}
