//! Embedding table and the linear encoders applied to it.
//!
//! Two encoders are supported: the identity (plain matrix factorization) and
//! LightGCN-style propagation, `(1/(K+1)) Σ_{k=0..K} Â^k E` with
//! `Â = D^{-1/2} A D^{-1/2}` over the bipartite train graph. Both are linear, so the
//! backward map is the same propagation applied to the gradient.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Edge;
use crate::error::{Error, Result};
use crate::tasks::TaskGradient;

/// Dense `(n_users + n_items) × d` table, users first.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    n_users: usize,
    n_items: usize,
    d: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(n_users: usize, n_items: usize, d: usize) -> Self {
        EmbeddingTable {
            n_users,
            n_items,
            d,
            values: vec![0.0; (n_users + n_items) * d],
        }
    }

    pub fn from_values(n_users: usize, n_items: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if values.len() != (n_users + n_items) * d {
            return Err(Error::Format(format!(
                "expected {} values, got {}",
                (n_users + n_items) * d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("embedding table contains non-finite values".into()));
        }
        Ok(EmbeddingTable {
            n_users,
            n_items,
            d,
            values,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_rows(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.d..(r + 1) * self.d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.d..(r + 1) * self.d]
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.row(self.n_users + i)
    }

    pub fn same_shape(&self, other: &EmbeddingTable) -> bool {
        self.n_users == other.n_users && self.n_items == other.n_items && self.d == other.d
    }

    /// Writes the binary checkpoint: `b"PMTE"`, then version, n_users, n_items and d as
    /// little-endian `u32`, then the row-major `f64` payload in little-endian order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let narrow = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
        };
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER + self.values.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&narrow(self.n_users, "n_users")?.to_le_bytes());
        out.extend_from_slice(&narrow(self.n_items, "n_items")?.to_le_bytes());
        out.extend_from_slice(&narrow(self.d, "d")?.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_HEADER || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an embedding checkpoint".into()));
        }
        let word = |k: usize| {
            let at = 4 + 4 * k;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let version = word(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (n_users, n_items, d) = (word(1), word(2), word(3));
        let payload = &bytes[CHECKPOINT_HEADER..];
        if payload.len() != (n_users + n_items) * d * 8 {
            return Err(Error::Format("checkpoint payload has the wrong length".into()));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(n_users, n_items, d, values)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PMTE";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER: usize = 4 + 4 * 4;

/// Xavier-uniform initialization: entries i.i.d. on `(−a, a)`, `a = sqrt(6 / (rows + d))`.
pub fn init_embeddings(n_users: usize, n_items: usize, d: usize, seed: u64) -> Result<EmbeddingTable> {
    let n_rows = n_users + n_items;
    if d == 0 || n_rows == 0 {
        return Err(Error::Config(format!(
            "cannot initialize a {n_rows}×{d} embedding table"
        )));
    }
    let a = (6.0 / (n_rows + d) as f64).sqrt();
    let dist = Uniform::new(-a, a).expect("bound is positive and finite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_rows * d)
        .map(|_| loop {
            // Uniform::new samples [−a, a); keep the interval open.
            let x = dist.sample(&mut rng);
            if x != -a {
                break x;
            }
        })
        .collect();
    Ok(EmbeddingTable {
        n_users,
        n_items,
        d,
        values,
    })
}

/// Symmetric-normalized bipartite adjacency `D^{-1/2} A D^{-1/2}` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n_users: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Builds `Â` over `n_users + n_items` nodes from train edges. No self-loops.
    pub fn from_edges(n_users: usize, n_items: usize, edges: &[Edge]) -> Self {
        let n = n_users + n_items;
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in edges {
            nbrs[e.user].push(n_users + e.item);
            nbrs[n_users + e.item].push(e.user);
        }
        for list in &mut nbrs {
            list.sort_unstable();
            list.dedup();
        }
        let inv_sqrt: Vec<f64> = nbrs
            .iter()
            .map(|l| if l.is_empty() { 0.0 } else { 1.0 / (l.len() as f64).sqrt() })
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (r, list) in nbrs.iter().enumerate() {
            for &c in list {
                cols.push(c);
                vals.push(inv_sqrt[r] * inv_sqrt[c]);
            }
            row_ptr.push(cols.len());
        }
        NormalizedAdjacency {
            n_users,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn neighbors(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Entry `Â[r, c]`, zero when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    fn mul_dense(&self, x: &[f64], d: usize, out: &mut [f64]) {
        for r in 0..self.n_nodes() {
            let dst = &mut out[r * d..(r + 1) * d];
            dst.fill(0.0);
            for (c, a) in self.neighbors(r) {
                for (o, v) in dst.iter_mut().zip(&x[c * d..(c + 1) * d]) {
                    *o += a * v;
                }
            }
        }
    }

    fn mul_sparse(&self, x: &BTreeMap<usize, Vec<f64>>, d: usize) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        // Â symmetric: (Â x)[r] = Σ_c Â[c, r] x[c], scattered from each stored c.
        for (&c, g) in x {
            for (r, a) in self.neighbors(c) {
                let dst = out.entry(r).or_insert_with(|| vec![0.0; d]);
                for (o, v) in dst.iter_mut().zip(g) {
                    *o += a * v;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Identity,
    LightGcn,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" | "identity" => Ok(EncoderKind::Identity),
            "lightgcn" => Ok(EncoderKind::LightGcn),
            other => Err(Error::Config(format!("unknown encoder `{other}`"))),
        }
    }
}

/// The encoder map `E ↦ Encoder(E)` and its adjoint.
#[derive(Debug, Clone)]
pub struct PropagationOperator {
    kind: EncoderKind,
    layers: usize,
    adjacency: Option<NormalizedAdjacency>,
}

impl PropagationOperator {
    pub fn identity() -> Self {
        PropagationOperator {
            kind: EncoderKind::Identity,
            layers: 0,
            adjacency: None,
        }
    }

    pub fn lightgcn(adjacency: NormalizedAdjacency, layers: usize) -> Self {
        PropagationOperator {
            kind: EncoderKind::LightGcn,
            layers,
            adjacency: Some(adjacency),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn active(&self) -> Option<&NormalizedAdjacency> {
        match self.kind {
            EncoderKind::LightGcn if self.layers > 0 => self.adjacency.as_ref(),
            _ => None,
        }
    }

    /// Applies the encoder. The identity (and zero-layer propagation) borrows the input.
    pub fn encode<'a>(&self, table: &'a EmbeddingTable) -> Cow<'a, EmbeddingTable> {
        let Some(adj) = self.active() else {
            return Cow::Borrowed(table);
        };
        assert_eq!(adj.n_nodes(), table.n_rows(), "adjacency does not match the table");
        let d = table.d;
        let mut acc = table.values.clone();
        let mut cur = table.values.clone();
        let mut next = vec![0.0; cur.len()];
        for _ in 0..self.layers {
            adj.mul_dense(&cur, d, &mut next);
            std::mem::swap(&mut cur, &mut next);
            for (a, v) in acc.iter_mut().zip(&cur) {
                *a += v;
            }
        }
        let scale = 1.0 / (self.layers + 1) as f64;
        acc.iter_mut().for_each(|v| *v *= scale);
        Cow::Owned(EmbeddingTable {
            values: acc,
            ..*table
        })
    }

    /// Maps a gradient on the encoded table back onto the base table.
    ///
    /// The propagation is self-adjoint, so this applies the same layer mean to the
    /// sparse gradient; touched rows grow to the K-hop neighborhood.
    pub fn backpropagate(&self, grad: TaskGradient) -> TaskGradient {
        let Some(adj) = self.active() else {
            return grad;
        };
        let d = grad.dim();
        let (task_id, loss, rows) = grad.into_parts();
        let mut acc = rows.clone();
        let mut cur = rows;
        for _ in 0..self.layers {
            cur = adj.mul_sparse(&cur, d);
            for (r, g) in &cur {
                let dst = acc.entry(*r).or_insert_with(|| vec![0.0; d]);
                for (o, v) in dst.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        let scale = 1.0 / (self.layers + 1) as f64;
        for g in acc.values_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        TaskGradient::from_parts(task_id, loss, d, acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn xavier_bound_and_determinism() {
        let a = init_embeddings(2, 2, 2, 9).unwrap();
        assert!(a.values().iter().all(|v| v.abs() < 1.0));
        assert_eq!(a, init_embeddings(2, 2, 2, 9).unwrap());
        assert_ne!(a, init_embeddings(2, 2, 2, 10).unwrap());
    }

    #[test]
    fn empty_shapes_rejected() {
        assert!(matches!(init_embeddings(3, 3, 0, 0), Err(Error::Config(_))));
        assert!(matches!(init_embeddings(0, 0, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn xavier_mean_within_three_sigma() {
        let t = init_embeddings(500_000, 0, 2, 1).unwrap();
        let n = t.values().len() as f64;
        let a = (6.0 / (500_000.0 + 2.0f64)).sqrt();
        let mean = t.values().iter().sum::<f64>() / n;
        // Var of U(−a, a) is a²/3.
        let sigma = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    }

    #[test]
    fn identity_encode_borrows() {
        let t = init_embeddings(2, 3, 4, 0).unwrap();
        let enc = PropagationOperator::identity().encode(&t);
        assert!(matches!(enc, Cow::Borrowed(_)));
        assert_eq!(*enc, t);
    }

    #[test]
    fn zero_layer_lightgcn_is_identity() {
        let t = init_embeddings(2, 2, 3, 0).unwrap();
        let adj = NormalizedAdjacency::from_edges(2, 2, &[Edge::new(0, 1), Edge::new(1, 0)]);
        let op = PropagationOperator::lightgcn(adj, 0);
        assert_eq!(*op.encode(&t), t);
        let mut g = TaskGradient::new("t", 3);
        g.add(1, 1.0, &[1.0, 2.0, 3.0]);
        assert_eq!(op.backpropagate(g.clone()), g);
    }

    #[test]
    fn two_node_propagation_by_hand() {
        let t = EmbeddingTable::from_values(1, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let adj = NormalizedAdjacency::from_edges(1, 1, &[Edge::new(0, 0)]);
        assert_eq!(adj.get(0, 1), 1.0);
        let enc = PropagationOperator::lightgcn(adj, 1).encode(&t).into_owned();
        assert_eq!(enc.user(0), &[0.5, 0.5]);
        assert_eq!(enc.item(0), &[0.5, 0.5]);
    }

    #[test]
    fn checkpoint_roundtrip_and_layout() {
        let t = init_embeddings(3, 2, 4, 5).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PMTE");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 20 + 5 * 4 * 8);
        assert_eq!(EmbeddingTable::from_bytes(&bytes).unwrap(), t);
        assert!(EmbeddingTable::from_bytes(&bytes[..30]).is_err());
    }

    fn random_graph(seed: u64, n_users: usize, n_items: usize) -> Vec<Edge> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random_bool(0.5) {
                    edges.push(Edge::new(u, i));
                }
            }
        }
        edges
    }

    fn dense_grad(t: &EmbeddingTable) -> TaskGradient {
        let mut g = TaskGradient::new("g", t.dim());
        for r in 0..t.n_rows() {
            g.add(r, 1.0, t.row(r));
        }
        g
    }

    proptest! {
        #[test]
        fn encode_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, layers in 0usize..4) {
            let adj = NormalizedAdjacency::from_edges(4, 5, &random_graph(seed, 4, 5));
            let op = PropagationOperator::lightgcn(adj, layers);
            let x = init_embeddings(4, 5, 3, seed).unwrap();
            let y = init_embeddings(4, 5, 3, seed + 1).unwrap();
            let mix: Vec<f64> = x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect();
            let z = EmbeddingTable::from_values(4, 5, 3, mix).unwrap();
            let (ex, ey, ez) = (op.encode(&x), op.encode(&y), op.encode(&z));
            for k in 0..ez.values().len() {
                let lin = a * ex.values()[k] + b * ey.values()[k];
                prop_assert!((ez.values()[k] - lin).abs() < 1e-10);
            }
        }

        #[test]
        fn backpropagate_is_adjoint(seed in 0u64..1000, layers in 0usize..4) {
            let adj = NormalizedAdjacency::from_edges(3, 4, &random_graph(seed, 3, 4));
            let op = PropagationOperator::lightgcn(adj, layers);
            let x = init_embeddings(3, 4, 2, seed).unwrap();
            let gt = init_embeddings(3, 4, 2, seed + 7).unwrap();
            let lhs: f64 = op.encode(&x).values().iter().zip(gt.values()).map(|(p, q)| p * q).sum();
            let back = op.backpropagate(dense_grad(&gt));
            let rhs: f64 = (0..x.n_rows())
                .filter_map(|r| back.row(r).map(|g| g.iter().zip(x.row(r)).map(|(p, q)| p * q).sum::<f64>()))
                .sum();
            prop_assert!((lhs - rhs).abs() < 1e-8, "lhs {} rhs {}", lhs, rhs);
        }
    }
}
