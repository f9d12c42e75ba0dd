//! Epoch loop: sample every task, compute per-task gradients on the encoded table,
//! map them back to the base table, pool, and take one optimizer step per batch.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combiner::{build_pooler, collect_norms, CombinerConfig, GradientBundle, GradientPooler};
use crate::data::{sample_bpr_batch, AuxSampler, Dataset, Edge, EvalSplit, InteractionIndex, Side};
use crate::encoder::{
    init_embeddings, EmbeddingTable, EncoderKind, NormalizedAdjacency, PropagationOperator,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_users, MetricsReport, DEFAULT_KS};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tasks::{
    alignment_loss_grad, bpr_loss_grad, link_bpr_loss_grad, rating_mse_loss_grad,
    uniformity_loss_grad, validate_specs, TaskGradient, TaskKind, TaskSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    /// Batch size for auxiliary tasks; defaults to `batch_size`.
    pub aux_batch_size: Option<usize>,
    /// Rows per side used by uniformity losses.
    pub uniformity_side: usize,
    pub max_epochs: u32,
    pub patience: u32,
    /// Early stopping tracks validation Recall@`early_stop_k`.
    pub early_stop_k: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub encoder: EncoderKind,
    pub layers: usize,
    pub optimizer: OptimizerConfig,
    pub combiner: CombinerConfig,
    /// Record per-row norms and weights for the first batch of each epoch.
    pub diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            batch_size: 2048,
            aux_batch_size: None,
            uniformity_side: 256,
            max_epochs: 500,
            patience: 10,
            early_stop_k: 20,
            ks: DEFAULT_KS.to_vec(),
            seed: 0,
            encoder: EncoderKind::Identity,
            layers: 3,
            optimizer: OptimizerConfig::default(),
            combiner: CombinerConfig::default(),
            diagnostics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.aux_batch_size == Some(0) {
            return Err(Error::Config("dimension and batch sizes must be positive".into()));
        }
        if self.uniformity_side < 2 {
            return Err(Error::Config("uniformity side size must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("epoch cap must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.combiner.validate()
    }

    /// Evaluation cutoffs including the early-stopping cutoff.
    pub fn eval_ks(&self) -> Vec<usize> {
        let mut ks = self.ks.clone();
        if !ks.contains(&self.early_stop_k) {
            ks.push(self.early_stop_k);
        }
        ks
    }
}

/// One `row,task,norm,weight` record of the combiner diagnostics dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub row: usize,
    pub task: String,
    pub norm: f64,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    /// Mean loss per task, in task order.
    pub losses: Vec<(String, f64)>,
    pub val: Option<MetricsReport>,
    pub seconds: f64,
    /// Mean main-task weight over all pooled rows, for poolers with per-row weights.
    pub mean_main_weight: Option<f64>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub flagged_triplets: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Long-format CSV `epoch,field,value`. Wall-clock time is not included so that
    /// equal seeds produce identical files; see [`TrainLog::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,field,value\n");
        for e in &self.epochs {
            for (task, loss) in &e.losses {
                s.push_str(&format!("{},loss.{task},{loss}\n", e.epoch));
            }
            if let Some(w) = e.mean_main_weight {
                s.push_str(&format!("{},combiner.main_weight,{w}\n", e.epoch));
            }
            if let Some(val) = &e.val {
                for (name, v) in val.named() {
                    s.push_str(&format!("{},val.{name},{v}\n", e.epoch));
                }
            }
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{}\n", e.epoch, e.seconds));
        }
        s
    }

    /// `row,task,norm,weight` CSV over all recorded first-batch diagnostics,
    /// prefixed with the epoch.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = String::from("epoch,row,task,norm,weight\n");
        for e in &self.epochs {
            for d in &e.diagnostics {
                let w = d.weight.map(|w| w.to_string()).unwrap_or_default();
                s.push_str(&format!("{},{},{},{},{w}\n", e.epoch, d.row, d.task, d.norm));
            }
        }
        s
    }
}

enum TaskData<'a> {
    Main,
    Link(AuxSampler<'a>, Side),
    Train,
    Rated(Vec<Edge>),
}

struct TaskRuntime<'a> {
    spec: TaskSpec,
    data: TaskData<'a>,
    rng: ChaCha8Rng,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the propagation operator over the train graph of `ds`.
pub fn build_encoder(ds: &Dataset, kind: EncoderKind, layers: usize) -> PropagationOperator {
    match kind {
        EncoderKind::Identity => PropagationOperator::identity(),
        EncoderKind::LightGcn => PropagationOperator::lightgcn(
            NormalizedAdjacency::from_edges(ds.n_users, ds.n_items, &ds.train),
            layers,
        ),
    }
}

/// Training state for one run.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: TrainConfig,
    train_index: InteractionIndex,
    tasks: Vec<TaskRuntime<'a>>,
    encoder: PropagationOperator,
    table: EmbeddingTable,
    optimizer: OptimizerState,
    pooler: Box<dyn GradientPooler>,
    epoch: u32,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, specs: &[TaskSpec], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        validate_specs(specs)?;
        if ds.train.is_empty() {
            return Err(Error::EmptyDataset("train split is empty".into()));
        }
        // Main task first: it is the one task focusing boosts.
        let mut ordered: Vec<&TaskSpec> = specs.iter().filter(|s| s.is_main).collect();
        ordered.extend(specs.iter().filter(|s| !s.is_main));

        let mut tasks = Vec::new();
        for (k, spec) in ordered.into_iter().enumerate() {
            let data = match spec.kind {
                TaskKind::BprMain => TaskData::Main,
                TaskKind::LinkBpr => {
                    let set = ds.aux_edges.get(&spec.source).ok_or_else(|| {
                        Error::Config(format!(
                            "task {} reads unknown edge set `{}`",
                            spec.task_id, spec.source
                        ))
                    })?;
                    if set.is_empty() {
                        log::warn!("edge set `{}` is empty; task {} disabled", spec.source, spec.task_id);
                        continue;
                    }
                    TaskData::Link(AuxSampler::new(set, ds.n_users, ds.n_items), set.side())
                }
                TaskKind::Alignment | TaskKind::Uniformity | TaskKind::AlignmentUniformity => {
                    TaskData::Train
                }
                TaskKind::RatingMse => {
                    let rated: Vec<Edge> = ds.train.iter().copied().filter(|e| e.rating.is_some()).collect();
                    if rated.is_empty() {
                        log::warn!("no rated train interactions; task {} disabled", spec.task_id);
                        continue;
                    }
                    TaskData::Rated(rated)
                }
            };
            tasks.push(TaskRuntime {
                spec: spec.clone(),
                data,
                rng: stream_rng(cfg.seed, 1 + k as u64),
            });
        }

        let table = init_embeddings(ds.n_users, ds.n_items, cfg.dim, cfg.seed)?;
        let optimizer = OptimizerState::new(cfg.optimizer, table.n_rows())?;
        let pooler = build_pooler(&cfg.combiner, cfg.seed)?;
        let encoder = build_encoder(ds, cfg.encoder, cfg.layers);
        Ok(Trainer {
            ds,
            train_index: ds.train_index(),
            cfg,
            tasks,
            encoder,
            table,
            optimizer,
            pooler,
            epoch: 0,
        })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    /// Replaces the base table (e.g. to resume from a checkpoint).
    pub fn set_table(&mut self, table: EmbeddingTable) -> Result<()> {
        if !table.same_shape(&self.table) {
            return Err(Error::Config("table shape does not match the trainer".into()));
        }
        self.table = table;
        Ok(())
    }

    pub fn encoder(&self) -> &PropagationOperator {
        &self.encoder
    }

    pub fn encoded(&self) -> EmbeddingTable {
        self.encoder.encode(&self.table).into_owned()
    }

    pub fn train_index(&self) -> &InteractionIndex {
        &self.train_index
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.spec.task_id.as_str()).collect()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ds.train.len().div_ceil(self.cfg.batch_size)
    }

    fn task_gradient(
        task: &mut TaskRuntime<'_>,
        ds: &Dataset,
        enc: &EmbeddingTable,
        main: &[crate::data::BprTriplet],
        aux_batch: usize,
        uniformity_side: usize,
    ) -> Result<TaskGradient> {
        let rng = &mut task.rng;
        let sample_edges = |rng: &mut ChaCha8Rng| -> Vec<Edge> {
            (0..aux_batch)
                .map(|_| ds.train[rng.random_range(0..ds.train.len())])
                .collect()
        };
        let uniformity_rows = |edges: &[Edge]| -> Vec<usize> {
            let mut users = Vec::new();
            let mut items = Vec::new();
            for e in edges {
                if users.len() < uniformity_side && !users.contains(&e.user) {
                    users.push(e.user);
                }
                let row = ds.n_users + e.item;
                if items.len() < uniformity_side && !items.contains(&row) {
                    items.push(row);
                }
            }
            users.extend(items);
            users
        };
        let mut grad = match (&task.spec.kind, &task.data) {
            (TaskKind::BprMain, _) => bpr_loss_grad(enc, main),
            (TaskKind::LinkBpr, TaskData::Link(sampler, side)) => {
                let triplets = sampler.sample(aux_batch, rng);
                link_bpr_loss_grad(enc, &triplets, *side)
            }
            (TaskKind::Alignment, _) => {
                let pairs: Vec<_> = sample_edges(rng).iter().map(|e| (e.user, e.item)).collect();
                alignment_loss_grad(enc, &pairs)?
            }
            (TaskKind::Uniformity, _) => uniformity_loss_grad(enc, &uniformity_rows(&sample_edges(rng)))?,
            (TaskKind::AlignmentUniformity, _) => {
                let edges = sample_edges(rng);
                let pairs: Vec<_> = edges.iter().map(|e| (e.user, e.item)).collect();
                let mut g = alignment_loss_grad(enc, &pairs)?;
                g.accumulate(&uniformity_loss_grad(enc, &uniformity_rows(&edges))?);
                g
            }
            (TaskKind::RatingMse, TaskData::Rated(rated)) => {
                let batch: Vec<_> = (0..aux_batch)
                    .map(|_| {
                        let e = rated[rng.random_range(0..rated.len())];
                        (e.user, e.item, e.rating.expect("filtered to rated edges"))
                    })
                    .collect();
                rating_mse_loss_grad(enc, &batch)
            }
            _ => unreachable!("task data matches its kind by construction"),
        };
        grad.task_id = task.spec.task_id.clone();
        if task.spec.weight != 1.0 {
            grad.scale(task.spec.weight);
        }
        Ok(grad)
    }

    /// Runs one epoch of mini-batch updates. Validation is left to the caller.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        self.epoch += 1;
        let s = self.epoch;
        let n_batches = self.batches_per_epoch();
        let aux_batch = self.cfg.aux_batch_size.unwrap_or(self.cfg.batch_size);
        let mut loss_sums = vec![0.0; self.tasks.len()];
        let mut weight_sum = 0.0;
        let mut weight_rows = 0usize;
        let mut diagnostics = Vec::new();
        let mut flagged = 0usize;

        for batch in 0..n_batches {
            let main = {
                let main_rng = &mut self.tasks[0].rng;
                sample_bpr_batch(self.ds, &self.train_index, self.cfg.batch_size, main_rng)?
            };
            flagged += main.iter().filter(|t| t.flagged).count();

            let enc = self.encoder.encode(&self.table);
            let mut grads = Vec::with_capacity(self.tasks.len());
            for (k, task) in self.tasks.iter_mut().enumerate() {
                let g = Self::task_gradient(task, self.ds, &enc, &main, aux_batch, self.cfg.uniformity_side)?;
                loss_sums[k] += g.loss;
                grads.push(self.encoder.backpropagate(g));
            }
            drop(enc);

            let bundle = GradientBundle::new(grads)?;
            let combined = self.pooler.pool(&bundle, s)?;
            if let Some(w) = self.pooler.last_weights() {
                for k in 0..w.rows().len() {
                    weight_sum += w.row(k)[0];
                }
                weight_rows += w.rows().len();
            }
            if batch == 0 && self.cfg.diagnostics {
                let norms = collect_norms(&bundle);
                let weights = self.pooler.last_weights();
                for (k, &row) in norms.rows().iter().enumerate() {
                    for (t, g) in bundle.grads().iter().enumerate() {
                        diagnostics.push(DiagnosticRow {
                            row,
                            task: g.task_id.clone(),
                            norm: norms.row(k)[t],
                            weight: weights.map(|w| w.row(k)[t]),
                        });
                    }
                }
            }
            self.optimizer.step(&mut self.table, &combined).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {s}, batch {batch}: {m}")),
                other => other,
            })?;
        }

        Ok(EpochLog {
            epoch: s,
            losses: self
                .tasks
                .iter()
                .zip(loss_sums)
                .map(|(t, l)| (t.spec.task_id.clone(), l / n_batches as f64))
                .collect(),
            val: None,
            seconds: start.elapsed().as_secs_f64(),
            mean_main_weight: (weight_rows > 0).then(|| weight_sum / weight_rows as f64),
            diagnostics,
            flagged_triplets: flagged,
        })
    }
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: u32,
    best: f64,
    best_epoch: u32,
    stale: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: u32) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: u32, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> u32 {
        self.best_epoch
    }
}

/// Scores the encoded table after each epoch.
pub trait Validator {
    fn validate(&mut self, encoded: &EmbeddingTable, epoch: u32) -> Result<MetricsReport>;
}

/// Full-ranking evaluation on a held-out split.
pub struct SplitValidator<'a> {
    ds: &'a Dataset,
    index: InteractionIndex,
    split: EvalSplit,
    ks: Vec<usize>,
}

impl<'a> SplitValidator<'a> {
    pub fn new(ds: &'a Dataset, split: EvalSplit, ks: Vec<usize>) -> Self {
        SplitValidator {
            ds,
            index: ds.train_index(),
            split,
            ks,
        }
    }
}

impl Validator for SplitValidator<'_> {
    fn validate(&mut self, encoded: &EmbeddingTable, _epoch: u32) -> Result<MetricsReport> {
        evaluate_users(encoded, self.ds, &self.index, self.split, &self.ks, None)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Base (pre-encoder) table of the best epoch.
    pub best: EmbeddingTable,
    pub best_epoch: u32,
    pub best_metric: f64,
    pub best_val: Option<MetricsReport>,
    pub log: TrainLog,
    pub encoder: PropagationOperator,
}

impl FitResult {
    pub fn encoded_best(&self) -> EmbeddingTable {
        self.encoder.encode(&self.best).into_owned()
    }
}

/// Trains with validation Recall@K early stopping, using the val split.
pub fn fit(ds: &Dataset, specs: &[TaskSpec], cfg: &TrainConfig) -> Result<FitResult> {
    let mut validator = SplitValidator::new(ds, EvalSplit::Val, cfg.eval_ks());
    fit_with(ds, specs, cfg, &mut validator)
}

/// Trains until `cfg.patience` epochs pass without improving validation
/// Recall@`cfg.early_stop_k`, or until `cfg.max_epochs`; returns the best epoch's table.
pub fn fit_with(
    ds: &Dataset,
    specs: &[TaskSpec],
    cfg: &TrainConfig,
    validator: &mut dyn Validator,
) -> Result<FitResult> {
    let mut trainer = Trainer::new(ds, specs, cfg.clone())?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best = trainer.table().clone();
    let mut best_val = None;
    for _ in 0..cfg.max_epochs {
        let mut entry = trainer.train_epoch()?;
        let report = validator.validate(&trainer.encoded(), entry.epoch)?;
        let metric = report.recall_at(cfg.early_stop_k).ok_or_else(|| {
            Error::Config(format!("validator did not report recall@{}", cfg.early_stop_k))
        })?;
        let decision = stopper.update(entry.epoch, metric);
        if decision == StopDecision::Improved {
            best = trainer.table().clone();
            best_val = Some(report.clone());
        }
        entry.val = Some(report);
        log::info!("epoch {} recall@{} {metric:.5}", entry.epoch, cfg.early_stop_k);
        log.epochs.push(entry);
        if decision == StopDecision::Stop {
            break;
        }
    }
    Ok(FitResult {
        best,
        best_epoch: stopper.best_epoch(),
        best_metric: stopper.best(),
        best_val,
        log,
        encoder: trainer.encoder.clone(),
    })
}

/// Inclusive arithmetic range `start, start+step, ..., stop`, rounded to 12 decimals.
pub fn grid_range(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || stop < start {
        return Err(Error::Config(format!("invalid range {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Hyperparameter grid; an empty axis keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl Grid {
    /// Cartesian product in `lr, weight_decay, alpha, tau` nesting order.
    pub fn points(&self, base: &TrainConfig) -> Vec<GridPoint> {
        let axis = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let mut out = Vec::new();
        for &lr in &axis(&self.lr, base.optimizer.lr) {
            for &weight_decay in &axis(&self.weight_decay, base.optimizer.weight_decay) {
                for &alpha in &axis(&self.alpha, base.combiner.alpha) {
                    for &tau in &axis(&self.tau, base.combiner.tau) {
                        out.push(GridPoint {
                            lr,
                            weight_decay,
                            alpha,
                            tau,
                        });
                    }
                }
            }
        }
        out
    }
}

impl GridPoint {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.optimizer.lr = self.lr;
        cfg.optimizer.weight_decay = self.weight_decay;
        cfg.combiner.alpha = self.alpha;
        cfg.combiner.tau = self.tau;
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub point: GridPoint,
    pub best_epoch: u32,
    pub val: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub selected: usize,
    pub test: MetricsReport,
}

impl GridReport {
    /// One row per grid point; test metrics are filled in for the selected point only.
    pub fn to_csv(&self) -> String {
        let names: Vec<String> = self.rows[0].val.named().into_iter().map(|(n, _)| n).collect();
        let mut s = String::from("point,lr,weight_decay,alpha,tau,best_epoch");
        for n in &names {
            s.push_str(&format!(",val.{n}"));
        }
        s.push_str(",selected");
        for n in &names {
            s.push_str(&format!(",test.{n}"));
        }
        s.push('\n');
        let test = self.test.named();
        for (k, row) in self.rows.iter().enumerate() {
            let p = row.point;
            s.push_str(&format!(
                "{k},{},{},{},{},{}",
                p.lr, p.weight_decay, p.alpha, p.tau, row.best_epoch
            ));
            for (_, v) in row.val.named() {
                s.push_str(&format!(",{v}"));
            }
            let selected = k == self.selected;
            s.push_str(if selected { ",1" } else { ",0" });
            for (_, v) in &test {
                if selected {
                    s.push_str(&format!(",{v}"));
                } else {
                    s.push(',');
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Fits every grid point (up to `jobs` at a time), selects the best validation
/// Recall@K, and evaluates only that point on the test split.
pub fn grid_search(
    ds: &Dataset,
    specs: &[TaskSpec],
    base: &TrainConfig,
    grid: &Grid,
    jobs: usize,
) -> Result<GridReport> {
    let points = grid.points(base);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FitResult>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(points.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= points.len() {
                    break;
                }
                let res = fit(ds, specs, &points[k].apply(base));
                slots.lock().unwrap()[k] = Some(res);
            });
        }
    });

    let mut rows = Vec::with_capacity(points.len());
    let mut fits = Vec::with_capacity(points.len());
    for (point, slot) in points.iter().zip(slots.into_inner().unwrap()) {
        let fit = slot.expect("every grid point ran")?;
        rows.push(GridRow {
            point: *point,
            best_epoch: fit.best_epoch,
            val: fit.best_val.clone().unwrap_or_else(|| empty_report(&base.eval_ks())),
        });
        fits.push(fit);
    }
    let mut selected = 0;
    for k in 1..fits.len() {
        if fits[k].best_metric > fits[selected].best_metric {
            selected = k;
        }
    }
    let test = evaluate_users(
        &fits[selected].encoded_best(),
        ds,
        &ds.train_index(),
        EvalSplit::Test,
        &base.eval_ks(),
        None,
    )?;
    Ok(GridReport {
        rows,
        selected,
        test,
    })
}

fn empty_report(ks: &[usize]) -> MetricsReport {
    MetricsReport {
        ks: ks.to_vec(),
        recall: vec![0.0; ks.len()],
        hit_ratio: vec![0.0; ks.len()],
        ndcg: vec![0.0; ks.len()],
        n_users: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_stops_after_ten_stale_epochs() {
        let mut es = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=50 {
            if es.update(epoch, 1.0 / epoch as f64) == StopDecision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(11));
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn alpha_grid_has_eleven_values() {
        let alphas = grid_range(1.0, 1.2, 0.02).unwrap();
        assert_eq!(alphas.len(), 11);
        assert_eq!(alphas[1], 1.02);
        assert_eq!(*alphas.last().unwrap(), 1.2);
    }

    #[test]
    fn grid_points_are_a_cartesian_product() {
        let grid = Grid {
            lr: vec![0.1, 0.05, 0.01, 0.005, 0.001],
            weight_decay: vec![1e-2, 1e-4, 1e-6, 1e-8],
            alpha: grid_range(1.0, 1.2, 0.02).unwrap(),
            tau: vec![10.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
        };
        assert_eq!(grid.points(&TrainConfig::default()).len(), 5 * 4 * 11 * 8);
        assert_eq!(Grid::default().points(&TrainConfig::default()).len(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            dim: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.combiner.tau = 0.0;
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn eval_ks_include_early_stop_cutoff() {
        let cfg = TrainConfig {
            ks: vec![5],
            early_stop_k: 20,
            ..Default::default()
        };
        assert_eq!(cfg.eval_ks(), vec![5, 20]);
    }
}
