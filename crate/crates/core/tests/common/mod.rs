#![allow(dead_code)]

use pmtrec::data::{AuxEdgeSet, Dataset, Edge, Side};
use pmtrec::encoder::EmbeddingTable;
use pmtrec::TaskGradient;
use rand::Rng;

/// Table with entries uniform in [-1, 1].
pub fn random_table<R: Rng>(n_users: usize, n_items: usize, d: usize, rng: &mut R) -> EmbeddingTable {
    let values = (0..(n_users + n_items) * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingTable::from_values(n_users, n_items, d, values).unwrap()
}

/// Dense copy of a sparse gradient, row-major over the whole table.
pub fn dense(grad: &TaskGradient, n_rows: usize) -> Vec<f64> {
    let d = grad.dim();
    let mut out = vec![0.0; n_rows * d];
    for (r, v) in grad.rows() {
        out[r * d..(r + 1) * d].copy_from_slice(v);
    }
    out
}

/// Central finite differences of `loss` at `table`, step `h`.
pub fn finite_difference(table: &EmbeddingTable, h: f64, loss: impl Fn(&EmbeddingTable) -> f64) -> Vec<f64> {
    let mut t = table.clone();
    (0..table.values().len())
        .map(|k| {
            let x = t.values()[k];
            t.values_mut()[k] = x + h;
            let up = loss(&t);
            t.values_mut()[k] = x - h;
            let down = loss(&t);
            t.values_mut()[k] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Block-preference data: `n_warm` users each prefer one of `n_blocks` item blocks
/// of `block_size` items. Warm user `u` belongs to block `u % n_blocks` and
/// interacts with every block item: the first `n_train` go to train, then one to
/// val, the rest to test. Cold users (`n_cold`, indices after the warm ones) have
/// no train interactions, all block items as test items, and social edges to
/// `friends` warm users of their block.
pub struct BlockWorld {
    pub ds: Dataset,
    pub cold_users: Vec<usize>,
}

pub fn block_world(
    n_warm: usize,
    n_cold: usize,
    n_blocks: usize,
    block_size: usize,
    n_train: usize,
    friends: usize,
) -> BlockWorld {
    let n_users = n_warm + n_cold;
    let n_items = n_blocks * block_size;
    let (mut train, mut val, mut test) = (vec![], vec![], vec![]);
    for u in 0..n_warm {
        let b = u % n_blocks;
        // Rotate so warm users of a block do not all share the same train items.
        for k in 0..block_size {
            let item = b * block_size + (k + u / n_blocks) % block_size;
            let e = Edge::new(u, item);
            if k < n_train {
                train.push(e);
            } else if k == n_train {
                val.push(e);
            } else {
                test.push(e);
            }
        }
    }
    let mut social = vec![];
    let cold_users: Vec<usize> = (n_warm..n_users).collect();
    for (c, &u) in cold_users.iter().enumerate() {
        let b = c % n_blocks;
        for k in 0..block_size {
            test.push(Edge::new(u, b * block_size + k));
        }
        let block_members: Vec<usize> = (0..n_warm).filter(|w| w % n_blocks == b).collect();
        for f in 0..friends.min(block_members.len()) {
            social.push((u, block_members[(c / n_blocks + f) % block_members.len()]));
        }
    }
    let mut ds = Dataset::from_splits(n_users, n_items, train, val, test).unwrap();
    ds.add_aux("social", AuxEdgeSet::new(Side::UserUser, social, None, n_users, n_items).unwrap());
    BlockWorld { ds, cold_users }
}
