//! Gradient pooling: turning one gradient per task into a single descent direction.
//!
//! The personalized pooler weights tasks separately for every embedding row. For a
//! row `e` touched by tasks `t = 0..T` (task 0 is the main recommendation task):
//!
//! 1. `n_t = ‖∇_e L_t‖₂`, zero when task `t` did not touch the row;
//! 2. `n_0 ← n_0 · α^s` where `s` is the epoch counter;
//! 3. `w = softmax(n / τ)`;
//! 4. `∇_e = Σ_t w_t ∇_e L_t`.
//!
//! The baselines (equal weighting, random loss weighting, PCGrad and GradDrop) pool
//! the same sparse bundle. Their published forms act on a global parameter vector, so
//! they flatten the bundle over the union of touched rows.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tasks::TaskGradient;

/// Ordered task gradients; position 0 is the main task.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    grads: Vec<TaskGradient>,
    row_union: Vec<usize>,
    d: usize,
    /// `[union row][task][d]` copy of every task row; absent rows stay zero.
    dense: Vec<f64>,
    /// `[union row][task]`: whether the task touched the row.
    present: Vec<bool>,
}

impl GradientBundle {
    pub fn new(grads: Vec<TaskGradient>) -> Result<Self> {
        let Some(first) = grads.first() else {
            return Err(Error::Config("gradient bundle needs at least one task".into()));
        };
        let d = first.dim();
        if let Some(g) = grads.iter().find(|g| g.dim() != d) {
            return Err(Error::Config(format!(
                "task {} has dimension {}, expected {d}",
                g.task_id,
                g.dim()
            )));
        }
        let row_union: Vec<usize> = grads
            .iter()
            .flat_map(|g| g.row_indices())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n_tasks = grads.len();
        let mut dense = vec![0.0; row_union.len() * n_tasks * d];
        let mut present = vec![false; row_union.len() * n_tasks];
        for (t, g) in grads.iter().enumerate() {
            // Both sequences are sorted, so one forward walk aligns them.
            let mut k = 0;
            for (r, v) in g.rows() {
                while row_union[k] < r {
                    k += 1;
                }
                let slot = k * n_tasks + t;
                present[slot] = true;
                dense[slot * d..(slot + 1) * d].copy_from_slice(v);
            }
        }
        Ok(GradientBundle {
            grads,
            row_union,
            d,
            dense,
            present,
        })
    }

    /// Task `t`'s gradient on the `k`-th union row, if the task touched it.
    fn slot(&self, k: usize, t: usize) -> Option<&[f64]> {
        let slot = k * self.grads.len() + t;
        self.present[slot].then(|| &self.dense[slot * self.d..(slot + 1) * self.d])
    }

    pub fn n_tasks(&self) -> usize {
        self.grads.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn grads(&self) -> &[TaskGradient] {
        &self.grads
    }

    /// Sorted union of rows touched by any task.
    pub fn row_union(&self) -> &[usize] {
        &self.row_union
    }

    fn total_loss(&self) -> f64 {
        self.grads.iter().map(|g| g.loss).sum()
    }

    /// Each task's gradient flattened over `row_union` (absent rows are zero).
    fn flatten(&self) -> Vec<Vec<f64>> {
        let (d, n_tasks) = (self.d, self.grads.len());
        (0..n_tasks)
            .map(|t| {
                let mut flat = Vec::with_capacity(self.row_union.len() * d);
                for k in 0..self.row_union.len() {
                    let slot = k * n_tasks + t;
                    flat.extend_from_slice(&self.dense[slot * d..(slot + 1) * d]);
                }
                flat
            })
            .collect()
    }

    fn unflatten(&self, flat: &[f64]) -> TaskGradient {
        TaskGradient::from_sorted_rows(COMBINED, self.total_loss(), self.d, &self.row_union, flat.to_vec())
    }
}

/// Task id carried by pooled gradients.
pub const COMBINED: &str = "combined";

/// Per-row task gradient norms, one row per entry of `row_union`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTable {
    rows: Vec<usize>,
    n_tasks: usize,
    norms: Vec<f64>,
}

impl NormTable {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    /// Norms of the `k`-th row (in `rows()` order), one per task.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.norms[k * self.n_tasks..(k + 1) * self.n_tasks]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.norms[k * self.n_tasks..(k + 1) * self.n_tasks]
    }

    pub fn from_rows(rows: Vec<usize>, n_tasks: usize, norms: Vec<f64>) -> Result<Self> {
        if n_tasks == 0 || norms.len() != rows.len() * n_tasks {
            return Err(Error::Config("norm table shape mismatch".into()));
        }
        Ok(NormTable {
            rows,
            n_tasks,
            norms,
        })
    }
}

/// Convex task weights per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowWeights {
    rows: Vec<usize>,
    n_tasks: usize,
    weights: Vec<f64>,
}

impl RowWeights {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_tasks..(k + 1) * self.n_tasks]
    }

    /// Weights of table row `row`, if it is present.
    pub fn for_row(&self, row: usize) -> Option<&[f64]> {
        self.rows.binary_search(&row).ok().map(|k| self.row(k))
    }

    /// The same weight vector for every row of `rows`.
    pub fn uniform(rows: Vec<usize>, weights: &[f64]) -> Self {
        let n_tasks = weights.len();
        let flat = rows.iter().flat_map(|_| weights.iter().copied()).collect();
        RowWeights {
            rows,
            n_tasks,
            weights: flat,
        }
    }
}

/// `n[row][t] = ‖∇_row L_t‖₂`.
pub fn collect_norms(bundle: &GradientBundle) -> NormTable {
    let n_tasks = bundle.n_tasks();
    let norms = bundle
        .dense
        .chunks_exact(bundle.d)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    NormTable {
        rows: bundle.row_union.clone(),
        n_tasks,
        norms,
    }
}

/// Multiplies the main-task column by `α^s`.
pub fn apply_task_focus(mut norms: NormTable, alpha: f64, s: u32) -> Result<NormTable> {
    let factor = alpha.powi(s as i32);
    if !factor.is_finite() {
        return Err(Error::Numerical(format!(
            "task focus factor {alpha}^{s} overflows; use a smaller alpha or cap the epochs"
        )));
    }
    for k in 0..norms.rows.len() {
        let main = &mut norms.row_mut(k)[0];
        *main *= factor;
        if !main.is_finite() {
            return Err(Error::Numerical(format!(
                "focused main-task norm overflows at epoch {s}; use a smaller alpha"
            )));
        }
    }
    Ok(norms)
}

fn softmax_into(logits: impl Iterator<Item = f64>, out: &mut Vec<f64>) {
    let start = out.len();
    out.extend(logits);
    let row = &mut out[start..];
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, m), (i, &z)| if z > m { (i, z) } else { (a, m) });
    let mut sum = 0.0;
    for (i, z) in row.iter_mut().enumerate() {
        // exp(0) = 1 exactly, so the arg-max entry skips the call.
        *z = if i == arg { 1.0 } else { (*z - max).exp() };
        sum += *z;
    }
    row.iter_mut().for_each(|w| *w /= sum);
}

/// Row-wise temperature softmax `w_t = exp(n_t/τ) / Σ exp(n_t*/τ)`.
pub fn balance_weights(norms: &NormTable, tau: f64) -> Result<RowWeights> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut weights = Vec::with_capacity(norms.norms.len());
    for row in norms.norms.chunks_exact(norms.n_tasks) {
        softmax_into(row.iter().map(|n| n / tau), &mut weights);
    }
    Ok(RowWeights {
        rows: norms.rows.clone(),
        n_tasks: norms.n_tasks,
        weights,
    })
}

/// `∇_e = Σ_t w_t ∇_e L_t` per row, summed in task order.
pub fn combine(bundle: &GradientBundle, weights: &RowWeights) -> TaskGradient {
    let d = bundle.d;
    let aligned = weights.rows == bundle.row_union;
    let mut out = vec![0.0; bundle.row_union.len() * d];
    for (k, (&r, acc)) in bundle.row_union.iter().zip(out.chunks_exact_mut(d)).enumerate() {
        let w = if aligned {
            weights.row(k)
        } else {
            weights.for_row(r).expect("weights cover every row of the bundle")
        };
        let mut first = true;
        for (t, &wt) in w.iter().enumerate() {
            let Some(v) = bundle.slot(k, t) else { continue };
            if first {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a = wt * x);
                first = false;
            } else {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += wt * x);
            }
        }
    }
    TaskGradient::from_sorted_rows(COMBINED, bundle.total_loss(), d, &bundle.row_union, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerKind {
    Pmtrec,
    Ew,
    Rlw,
    PcGrad,
    GradDrop,
}

impl CombinerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CombinerKind::Pmtrec => "pmtrec",
            CombinerKind::Ew => "ew",
            CombinerKind::Rlw => "rlw",
            CombinerKind::PcGrad => "pcgrad",
            CombinerKind::GradDrop => "graddrop",
        }
    }
}

impl std::str::FromStr for CombinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pmtrec" => CombinerKind::Pmtrec,
            "ew" => CombinerKind::Ew,
            "rlw" => CombinerKind::Rlw,
            "pcgrad" => CombinerKind::PcGrad,
            "graddrop" => CombinerKind::GradDrop,
            "gradvac" | "cagrad" | "aligned-mtl" | "nash-mtl" => {
                return Err(Error::Config(format!("combiner `{s}` is not available")))
            }
            other => return Err(Error::Config(format!("unknown combiner `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinerConfig {
    pub kind: CombinerKind,
    /// Task-focusing base, `α ≥ 1` (1 disables focusing).
    pub alpha: f64,
    /// Balancing temperature, `τ > 0`.
    pub tau: f64,
    /// Epoch counter `s`.
    pub epoch: u32,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            kind: CombinerKind::Pmtrec,
            alpha: 1.0,
            tau: 1.0,
            epoch: 0,
        }
    }
}

impl CombinerConfig {
    pub fn pmtrec(alpha: f64, tau: f64) -> Self {
        CombinerConfig {
            kind: CombinerKind::Pmtrec,
            alpha,
            tau,
            epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::Config(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Personalized pooling; also returns the per-row weights for diagnostics.
pub fn pmtrec_pool_with_weights(
    bundle: &GradientBundle,
    cfg: &CombinerConfig,
) -> Result<(TaskGradient, RowWeights)> {
    cfg.validate()?;
    let norms = apply_task_focus(collect_norms(bundle), cfg.alpha, cfg.epoch)?;
    let weights = balance_weights(&norms, cfg.tau)?;
    Ok((combine(bundle, &weights), weights))
}

pub fn pmtrec_pool(bundle: &GradientBundle, cfg: &CombinerConfig) -> Result<TaskGradient> {
    pmtrec_pool_with_weights(bundle, cfg).map(|(g, _)| g)
}

/// Unweighted per-row sum (the gradient of the summed loss).
pub fn ew_pool(bundle: &GradientBundle) -> TaskGradient {
    let ones = vec![1.0; bundle.n_tasks()];
    combine(bundle, &RowWeights::uniform(bundle.row_union.clone(), &ones))
}

/// Softmax of `n_tasks` standard-normal draws, seeded by `(run_seed, epoch)`.
pub fn rlw_weights(run_seed: u64, epoch: u32, n_tasks: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(epoch as u64);
    let draws: Vec<f64> = (0..n_tasks).map(|_| rng.sample(StandardNormal)).collect();
    let mut w = Vec::with_capacity(n_tasks);
    softmax_into(draws.into_iter(), &mut w);
    w
}

/// One global random weight vector per epoch, applied to every row.
pub fn rlw_pool(bundle: &GradientBundle, run_seed: u64, epoch: u32) -> TaskGradient {
    let w = rlw_weights(run_seed, epoch, bundle.n_tasks());
    combine(bundle, &RowWeights::uniform(bundle.row_union.clone(), &w))
}

/// One executed PCGrad projection of task `task` onto the normal plane of `against`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub task: usize,
    pub against: usize,
    pub dot_before: f64,
    pub dot_after: f64,
}

/// PCGrad surgery on flattened task gradients, in place.
///
/// Each task is projected, in random order, against every other task's original
/// gradient it conflicts with (negative dot product). Zero-norm targets are skipped.
pub fn project_conflicting<R: Rng + ?Sized>(grads: &mut [Vec<f64>], rng: &mut R) -> Vec<Projection> {
    let original: Vec<Vec<f64>> = grads.to_vec();
    let sq_norms: Vec<f64> = original
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut log = Vec::new();
    for (i, gi) in grads.iter_mut().enumerate() {
        let mut order: Vec<usize> = (0..original.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            if sq_norms[j] == 0.0 {
                continue;
            }
            let gj = &original[j];
            let before = dot(gi, gj);
            if before < 0.0 {
                let c = before / sq_norms[j];
                gi.iter_mut().zip(gj).for_each(|(x, y)| *x -= c * y);
                log.push(Projection {
                    task: i,
                    against: j,
                    dot_before: before,
                    dot_after: dot(gi, gj),
                });
            }
        }
    }
    log
}

pub fn pcgrad_pool<R: Rng + ?Sized>(bundle: &GradientBundle, rng: &mut R) -> TaskGradient {
    let mut flat = bundle.flatten();
    project_conflicting(&mut flat, rng);
    let mut sum = vec![0.0; bundle.row_union.len() * bundle.d];
    for g in &flat {
        sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
    bundle.unflatten(&sum)
}

/// GradDrop on one coordinate: keeps only positive or only negative contributions,
/// choosing positive with probability `P = ½(1 + Σg / Σ|g|)`.
pub fn graddrop_coordinate(values: &[f64], u: f64) -> f64 {
    let total: f64 = values.iter().sum();
    let abs: f64 = values.iter().map(|v| v.abs()).sum();
    if abs == 0.0 {
        return 0.0;
    }
    let purity = 0.5 * (1.0 + total / abs);
    if u < purity {
        values.iter().filter(|v| **v > 0.0).sum()
    } else {
        values.iter().filter(|v| **v < 0.0).sum()
    }
}

pub fn graddrop_pool<R: Rng + ?Sized>(bundle: &GradientBundle, rng: &mut R) -> TaskGradient {
    let flat = bundle.flatten();
    let n = bundle.row_union.len() * bundle.d;
    let mut column = vec![0.0; flat.len()];
    let out: Vec<f64> = (0..n)
        .map(|x| {
            for (c, g) in column.iter_mut().zip(&flat) {
                *c = g[x];
            }
            let u: f64 = rng.random();
            graddrop_coordinate(&column, u)
        })
        .collect();
    bundle.unflatten(&out)
}

/// A gradient pooling strategy. Implementations own whatever random state they need.
pub trait GradientPooler: Send {
    fn name(&self) -> &'static str;

    fn pool(&mut self, bundle: &GradientBundle, epoch: u32) -> Result<TaskGradient>;

    /// Per-row weights from the most recent call, for poolers that compute them.
    fn last_weights(&self) -> Option<&RowWeights> {
        None
    }
}

pub struct PmtrecPooler {
    cfg: CombinerConfig,
    last: Option<RowWeights>,
}

impl PmtrecPooler {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        let cfg = CombinerConfig::pmtrec(alpha, tau);
        cfg.validate()?;
        Ok(PmtrecPooler { cfg, last: None })
    }
}

impl GradientPooler for PmtrecPooler {
    fn name(&self) -> &'static str {
        "pmtrec"
    }

    fn pool(&mut self, bundle: &GradientBundle, epoch: u32) -> Result<TaskGradient> {
        let cfg = CombinerConfig { epoch, ..self.cfg };
        let (g, w) = pmtrec_pool_with_weights(bundle, &cfg)?;
        self.last = Some(w);
        Ok(g)
    }

    fn last_weights(&self) -> Option<&RowWeights> {
        self.last.as_ref()
    }
}

pub struct EwPooler;

impl GradientPooler for EwPooler {
    fn name(&self) -> &'static str {
        "ew"
    }

    fn pool(&mut self, bundle: &GradientBundle, _epoch: u32) -> Result<TaskGradient> {
        Ok(ew_pool(bundle))
    }
}

pub struct RlwPooler {
    seed: u64,
}

impl GradientPooler for RlwPooler {
    fn name(&self) -> &'static str {
        "rlw"
    }

    fn pool(&mut self, bundle: &GradientBundle, epoch: u32) -> Result<TaskGradient> {
        Ok(rlw_pool(bundle, self.seed, epoch))
    }
}

pub struct PcGradPooler {
    rng: ChaCha8Rng,
}

impl GradientPooler for PcGradPooler {
    fn name(&self) -> &'static str {
        "pcgrad"
    }

    fn pool(&mut self, bundle: &GradientBundle, _epoch: u32) -> Result<TaskGradient> {
        Ok(pcgrad_pool(bundle, &mut self.rng))
    }
}

pub struct GradDropPooler {
    rng: ChaCha8Rng,
}

impl GradientPooler for GradDropPooler {
    fn name(&self) -> &'static str {
        "graddrop"
    }

    fn pool(&mut self, bundle: &GradientBundle, _epoch: u32) -> Result<TaskGradient> {
        Ok(graddrop_pool(bundle, &mut self.rng))
    }
}

/// Builds the pooler selected by `cfg`, seeding any random state from `seed`.
pub fn build_pooler(cfg: &CombinerConfig, seed: u64) -> Result<Box<dyn GradientPooler>> {
    Ok(match cfg.kind {
        CombinerKind::Pmtrec => Box::new(PmtrecPooler::new(cfg.alpha, cfg.tau)?),
        CombinerKind::Ew => Box::new(EwPooler),
        CombinerKind::Rlw => Box::new(RlwPooler { seed }),
        CombinerKind::PcGrad => Box::new(PcGradPooler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }),
        CombinerKind::GradDrop => Box::new(GradDropPooler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }),
    })
}
