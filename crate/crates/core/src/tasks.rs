//! Task losses and their exact sparse gradients on the (encoded) embedding table.
//!
//! Every loss is a batch mean, so gradient magnitudes do not depend on batch size.

use std::collections::BTreeMap;

use crate::data::{AuxTriplet, BprTriplet, Side};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};

/// Row -> slot in the value buffer; slots follow insertion order.
///
/// Stays a plain vector while rows arrive in increasing order.
#[derive(Debug, Clone)]
enum RowIndex {
    Sorted(Vec<usize>),
    Map(BTreeMap<usize, usize>),
}

impl RowIndex {
    fn len(&self) -> usize {
        match self {
            RowIndex::Sorted(v) => v.len(),
            RowIndex::Map(m) => m.len(),
        }
    }

    fn get(&self, row: usize) -> Option<usize> {
        match self {
            RowIndex::Sorted(v) => v.binary_search(&row).ok(),
            RowIndex::Map(m) => m.get(&row).copied(),
        }
    }

    fn slot_or_insert(&mut self, row: usize) -> usize {
        if let RowIndex::Sorted(v) = self {
            match v.last() {
                None => {
                    v.push(row);
                    return 0;
                }
                Some(&last) if row > last => {
                    v.push(row);
                    return v.len() - 1;
                }
                _ => {
                    if let Ok(slot) = v.binary_search(&row) {
                        return slot;
                    }
                    let m = v.iter().enumerate().map(|(slot, &r)| (r, slot)).collect();
                    *self = RowIndex::Map(m);
                }
            }
        }
        let RowIndex::Map(m) = self else { unreachable!() };
        let next = m.len();
        *m.entry(row).or_insert(next)
    }

    /// `(row, slot)` in ascending row order.
    fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (sorted, map) = match self {
            RowIndex::Sorted(v) => (Some(v.iter().copied().enumerate().map(|(s, r)| (r, s))), None),
            RowIndex::Map(m) => (None, Some(m.iter().map(|(&r, &s)| (r, s)))),
        };
        sorted.into_iter().flatten().chain(map.into_iter().flatten())
    }
}

/// Per-row gradient of one task loss, plus the loss value.
///
/// Rows are global table rows (users first, then items). A row is present iff the
/// batch referenced the entity, even when its gradient happens to be zero.
#[derive(Debug, Clone)]
pub struct TaskGradient {
    pub task_id: String,
    pub loss: f64,
    d: usize,
    index: RowIndex,
    values: Vec<f64>,
}

impl PartialEq for TaskGradient {
    fn eq(&self, other: &Self) -> bool {
        self.task_id == other.task_id
            && self.loss == other.loss
            && self.d == other.d
            && self.len() == other.len()
            && self.rows().eq(other.rows())
    }
}

impl TaskGradient {
    pub fn new(task_id: impl Into<String>, d: usize) -> Self {
        TaskGradient {
            task_id: task_id.into(),
            loss: 0.0,
            d,
            index: RowIndex::Sorted(Vec::new()),
            values: Vec::new(),
        }
    }

    pub fn from_parts(
        task_id: impl Into<String>,
        loss: f64,
        d: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    ) -> Self {
        debug_assert!(rows.values().all(|g| g.len() == d));
        let mut values = Vec::with_capacity(rows.len() * d);
        let index = RowIndex::Sorted(
            rows.into_iter()
                .map(|(r, g)| {
                    values.extend_from_slice(&g);
                    r
                })
                .collect(),
        );
        TaskGradient {
            task_id: task_id.into(),
            loss,
            d,
            index,
            values,
        }
    }

    /// Builds from strictly increasing `rows` and their row-major `values`.
    pub fn from_sorted_rows(task_id: impl Into<String>, loss: f64, d: usize, rows: &[usize], values: Vec<f64>) -> Self {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(values.len(), rows.len() * d);
        TaskGradient {
            task_id: task_id.into(),
            loss,
            d,
            index: RowIndex::Sorted(rows.to_vec()),
            values,
        }
    }

    pub fn into_parts(self) -> (String, f64, BTreeMap<usize, Vec<f64>>) {
        let rows = self.rows().map(|(r, g)| (r, g.to_vec())).collect();
        (self.task_id, self.loss, rows)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn slot(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.d..(slot + 1) * self.d]
    }

    /// Marks `row` as referenced without changing its gradient.
    pub fn touch(&mut self, row: usize) -> &mut [f64] {
        let d = self.d;
        let next = self.index.len();
        let slot = self.index.slot_or_insert(row);
        if slot == next {
            self.values.resize(self.values.len() + d, 0.0);
        }
        &mut self.values[slot * d..(slot + 1) * d]
    }

    /// `grad[row] += coef * v`
    pub fn add(&mut self, row: usize, coef: f64, v: &[f64]) {
        for (g, x) in self.touch(row).iter_mut().zip(v) {
            *g += coef * x;
        }
    }

    pub fn row(&self, row: usize) -> Option<&[f64]> {
        self.index.get(row).map(|s| self.slot(s))
    }

    /// Rows in ascending order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.index.iter().map(|(r, s)| (r, self.slot(s)))
    }

    pub fn row_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.iter().map(|(r, _)| r)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.len() == 0
    }

    /// Scales the loss and every gradient row by `c`.
    pub fn scale(&mut self, c: f64) {
        self.loss *= c;
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// Adds `other` into `self` (loss and rows).
    pub fn accumulate(&mut self, other: &TaskGradient) {
        self.loss += other.loss;
        for (r, g) in other.rows() {
            self.add(r, 1.0, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.values.iter().all(|v| v.is_finite())
    }

    /// First row holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.rows()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(r, _)| r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Main recommendation task: BPR over sampled train triplets.
    BprMain,
    /// BPR over an auxiliary relation (social, co-view, co-buy, shared category).
    LinkBpr,
    Alignment,
    Uniformity,
    /// Alignment plus uniformity on one batch, as a single task.
    AlignmentUniformity,
    RatingMse,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BprMain => "bpr-main",
            TaskKind::LinkBpr => "link-bpr",
            TaskKind::Alignment => "alignment",
            TaskKind::Uniformity => "uniformity",
            TaskKind::AlignmentUniformity => "alignment-uniformity",
            TaskKind::RatingMse => "rating-mse",
        }
    }

    /// Whether this kind reads an auxiliary edge set rather than the train split.
    pub fn uses_aux_source(self) -> bool {
        matches!(self, TaskKind::LinkBpr)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bpr-main" | "bpr" => TaskKind::BprMain,
            "link-bpr" => TaskKind::LinkBpr,
            "alignment" => TaskKind::Alignment,
            "uniformity" => TaskKind::Uniformity,
            "alignment-uniformity" => TaskKind::AlignmentUniformity,
            "rating-mse" => TaskKind::RatingMse,
            other => return Err(Error::Config(format!("unknown task kind `{other}`"))),
        })
    }
}

/// Source name for tasks that read the train split.
pub const TRAIN_SOURCE: &str = "train";

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub source: String,
    pub is_main: bool,
    /// Loss scale applied before pooling.
    pub weight: f64,
}

impl TaskSpec {
    pub fn main_bpr() -> Self {
        TaskSpec {
            task_id: "rec".into(),
            kind: TaskKind::BprMain,
            source: TRAIN_SOURCE.into(),
            is_main: true,
            weight: 1.0,
        }
    }

    pub fn aux(task_id: impl Into<String>, kind: TaskKind, source: impl Into<String>) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind,
            source: source.into(),
            is_main: false,
            weight: 1.0,
        }
    }
}

/// Checks that exactly one task is main and that it is a `bpr-main` task.
pub fn validate_specs(specs: &[TaskSpec]) -> Result<()> {
    let mains: Vec<_> = specs.iter().filter(|s| s.is_main).collect();
    if mains.len() != 1 {
        return Err(Error::Config(format!(
            "exactly one main task required, found {}",
            mains.len()
        )));
    }
    if mains[0].kind != TaskKind::BprMain {
        return Err(Error::Config("the main task must be of kind bpr-main".into()));
    }
    for s in specs {
        if !(s.weight.is_finite() && s.weight > 0.0) {
            return Err(Error::Config(format!("task {} has invalid weight", s.task_id)));
        }
        if s.kind.uses_aux_source() == (s.source == TRAIN_SOURCE) {
            return Err(Error::Config(format!(
                "task {} of kind {} cannot read source `{}`",
                s.task_id,
                s.kind.as_str(),
                s.source
            )));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^{-x})` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BPR over global rows `(anchor, positive, negative)`.
fn bpr_rows(
    enc: &EmbeddingTable,
    task_id: &str,
    triplets: impl ExactSizeIterator<Item = (usize, usize, usize)>,
) -> TaskGradient {
    let mut grad = TaskGradient::new(task_id, enc.dim());
    let n = triplets.len();
    if n == 0 {
        return grad;
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut diff = vec![0.0; enc.dim()];
    for (a, p, q) in triplets {
        let (ea, ep, eq) = (enc.row(a), enc.row(p), enc.row(q));
        let x = dot(ea, ep) - dot(ea, eq);
        loss += softplus_neg(x);
        let s = sigmoid(-x);
        for ((d, vp), vq) in diff.iter_mut().zip(ep).zip(eq) {
            *d = vp - vq;
        }
        grad.add(a, -s * inv, &diff);
        grad.add(p, -s * inv, ea);
        grad.add(q, s * inv, ea);
    }
    grad.loss = loss * inv;
    grad
}

/// `L = −(1/|B|) Σ ln σ(e_u·e_i − e_u·e_j)` over (user, positive item, negative item).
pub fn bpr_loss_grad(enc: &EmbeddingTable, triplets: &[BprTriplet]) -> TaskGradient {
    let nu = enc.n_users();
    bpr_rows(
        enc,
        "bpr",
        triplets.iter().map(|t| (t.anchor, nu + t.positive, nu + t.negative)),
    )
}

/// BPR over an auxiliary relation; triplet indices are local to `side`.
pub fn link_bpr_loss_grad(enc: &EmbeddingTable, triplets: &[AuxTriplet], side: Side) -> TaskGradient {
    let nu = enc.n_users();
    let (oa, ob) = match side {
        Side::UserUser => (0, 0),
        Side::ItemItem => (nu, nu),
        Side::UserItem => (0, nu),
    };
    bpr_rows(
        enc,
        "link-bpr",
        triplets.iter().map(|t| (oa + t.anchor, ob + t.positive, ob + t.negative)),
    )
}

const MIN_NORM: f64 = 1e-12;

/// Row-normalized view of the rows a hypersphere loss touches.
struct UnitRows {
    d: usize,
    unit: BTreeMap<usize, (Vec<f64>, f64)>,
}

impl UnitRows {
    fn new(enc: &EmbeddingTable, rows: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut unit = BTreeMap::new();
        for r in rows {
            if unit.contains_key(&r) {
                continue;
            }
            let e = enc.row(r);
            let norm = dot(e, e).sqrt();
            if norm.is_nan() || norm < MIN_NORM {
                return Err(Error::DegenerateRow { row: r, norm });
            }
            unit.insert(r, (e.iter().map(|v| v / norm).collect(), norm));
        }
        Ok(UnitRows {
            d: enc.dim(),
            unit,
        })
    }

    fn get(&self, r: usize) -> &[f64] {
        &self.unit[&r].0
    }

    /// Pulls gradients w.r.t. unit vectors back through `ê = e/‖e‖`:
    /// `∂L/∂e = (g − ê (ê·g)) / ‖e‖`.
    fn pull_back(&self, task_id: &str, loss: f64, on_unit: BTreeMap<usize, Vec<f64>>) -> TaskGradient {
        let mut out = BTreeMap::new();
        for (r, g) in on_unit {
            let (u, norm) = &self.unit[&r];
            let proj = dot(u, &g);
            out.insert(r, g.iter().zip(u).map(|(gv, uv)| (gv - uv * proj) / norm).collect());
        }
        TaskGradient::from_parts(task_id, loss, self.d, out)
    }
}

/// `L = (1/|B|) Σ ‖ê_u − ê_i‖²` over (user, item) pairs, `ê = e/‖e‖`.
pub fn alignment_loss_grad(enc: &EmbeddingTable, pairs: &[(usize, usize)]) -> Result<TaskGradient> {
    let nu = enc.n_users();
    let d = enc.dim();
    if pairs.is_empty() {
        return Ok(TaskGradient::new("alignment", d));
    }
    let units = UnitRows::new(enc, pairs.iter().flat_map(|&(u, i)| [u, nu + i]))?;
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut on_unit: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(u, i) in pairs {
        let (ru, ri) = (u, nu + i);
        let diff: Vec<f64> = units.get(ru).iter().zip(units.get(ri)).map(|(a, b)| a - b).collect();
        loss += dot(&diff, &diff);
        let gu = on_unit.entry(ru).or_insert_with(|| vec![0.0; d]);
        gu.iter_mut().zip(&diff).for_each(|(g, v)| *g += 2.0 * inv * v);
        let gi = on_unit.entry(ri).or_insert_with(|| vec![0.0; d]);
        gi.iter_mut().zip(&diff).for_each(|(g, v)| *g -= 2.0 * inv * v);
    }
    Ok(units.pull_back("alignment", loss * inv, on_unit))
}

/// `ln( (2/(m(m−1))) Σ_{a<b} exp(−2‖ê_a − ê_b‖²) )` for one side; returns the loss
/// and accumulates `scale · ∂/∂ê` into `on_unit`.
fn uniformity_side(
    units: &UnitRows,
    rows: &[usize],
    scale: f64,
    on_unit: &mut BTreeMap<usize, Vec<f64>>,
) -> f64 {
    let m = rows.len();
    let d = units.d;
    let mut logits = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in a + 1..m {
            let (ua, ub) = (units.get(rows[a]), units.get(rows[b]));
            let sq: f64 = ua.iter().zip(ub).map(|(x, y)| (x - y) * (x - y)).sum();
            logits.push(-2.0 * sq);
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = (2.0 / (m * (m - 1)) as f64).ln() + lse;

    let mut k = 0;
    for a in 0..m {
        for b in a + 1..m {
            let w = (logits[k] - lse).exp();
            k += 1;
            // ∂/∂ê_a of −2‖ê_a − ê_b‖² is −4(ê_a − ê_b).
            let coef = -4.0 * w * scale;
            let diff: Vec<f64> = units
                .get(rows[a])
                .iter()
                .zip(units.get(rows[b]))
                .map(|(x, y)| x - y)
                .collect();
            let ga = on_unit.entry(rows[a]).or_insert_with(|| vec![0.0; d]);
            ga.iter_mut().zip(&diff).for_each(|(g, v)| *g += coef * v);
            let gb = on_unit.entry(rows[b]).or_insert_with(|| vec![0.0; d]);
            gb.iter_mut().zip(&diff).for_each(|(g, v)| *g -= coef * v);
        }
    }
    loss
}

/// Uniformity over the given global rows: one term per side (users, items) with at
/// least two distinct rows, averaged over those sides.
pub fn uniformity_loss_grad(enc: &EmbeddingTable, rows: &[usize]) -> Result<TaskGradient> {
    let nu = enc.n_users();
    let mut users: Vec<usize> = rows.iter().copied().filter(|&r| r < nu).collect();
    let mut items: Vec<usize> = rows.iter().copied().filter(|&r| r >= nu).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();

    let units = UnitRows::new(enc, users.iter().chain(&items).copied())?;
    let sides: Vec<&[usize]> = [users.as_slice(), items.as_slice()]
        .into_iter()
        .filter(|s| {
            if s.len() == 1 {
                log::warn!("uniformity side has a single row; term skipped");
            }
            s.len() >= 2
        })
        .collect();
    let mut on_unit: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    if !sides.is_empty() {
        let scale = 1.0 / sides.len() as f64;
        for side in sides {
            loss += scale * uniformity_side(&units, side, scale, &mut on_unit);
        }
    }
    let mut grad = units.pull_back("uniformity", loss, on_unit);
    for r in users.iter().chain(&items) {
        grad.touch(*r);
    }
    Ok(grad)
}

/// `L = (1/|B|) Σ (e_u·e_i − r)²` over (user, item, rating) triples.
pub fn rating_mse_loss_grad(enc: &EmbeddingTable, labeled: &[(usize, usize, f64)]) -> TaskGradient {
    let nu = enc.n_users();
    let mut grad = TaskGradient::new("rating-mse", enc.dim());
    if labeled.is_empty() {
        return grad;
    }
    let inv = 1.0 / labeled.len() as f64;
    let mut loss = 0.0;
    for &(u, i, r) in labeled {
        let (eu, ei) = (enc.row(u), enc.row(nu + i));
        let err = dot(eu, ei) - r;
        loss += err * err;
        grad.add(u, 2.0 * err * inv, ei);
        grad.add(nu + i, 2.0 * err * inv, eu);
    }
    grad.loss = loss * inv;
    grad
}
