mod common;

use pmtrec::data::{Dataset, Edge, EvalSplit};
use pmtrec::encoder::EmbeddingTable;
use pmtrec::error::Result;
use pmtrec::eval::{evaluate, MetricsReport};
use pmtrec::trainer::{fit, fit_with, Trainer, Validator};
use pmtrec::{CombinerConfig, CombinerKind, EncoderKind, TaskKind, TaskSpec, TrainConfig};

use common::block_world;

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        dim: 8,
        batch_size: 32,
        aux_batch_size: Some(16),
        max_epochs: 30,
        seed,
        ks: vec![5, 10, 20],
        ..Default::default()
    };
    cfg.optimizer.lr = 0.01;
    cfg
}

fn social_tasks() -> Vec<TaskSpec> {
    vec![TaskSpec::main_bpr(), TaskSpec::aux("social", TaskKind::LinkBpr, "social")]
}

#[test]
fn single_task_pooling_matches_equal_weighting_bitwise() {
    let world = block_world(24, 0, 4, 8, 5, 0);
    let mut tables = Vec::new();
    for kind in [CombinerKind::Ew, CombinerKind::Pmtrec] {
        let mut cfg = small_config(3);
        cfg.combiner = CombinerConfig {
            kind,
            alpha: 1.1,
            tau: 0.3,
            epoch: 0,
        };
        let mut tr = Trainer::new(&world.ds, &[TaskSpec::main_bpr()], cfg).unwrap();
        for _ in 0..3 {
            tr.train_epoch().unwrap();
        }
        tables.push(tr.table().clone());
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn batches_per_epoch_round_up() {
    let edges: Vec<Edge> = (0..5).flat_map(|u| (0..4).map(move |i| Edge::new(u, (u + i) % 9))).collect();
    assert_eq!(edges.len(), 20);
    let ds = Dataset::from_splits(5, 9, edges, vec![], vec![]).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        ..small_config(1)
    };
    let mut tr = Trainer::new(&ds, &[TaskSpec::main_bpr()], cfg).unwrap();
    assert_eq!(tr.batches_per_epoch(), 3);
    let log = tr.train_epoch().unwrap();
    assert_eq!(log.epoch, 1);
}

#[test]
fn toy_loss_drops_below_chance() {
    let world = block_world(24, 0, 4, 8, 5, 0);
    let mut tr = Trainer::new(&world.ds, &[TaskSpec::main_bpr()], small_config(5)).unwrap();
    let first = tr.train_epoch().unwrap().losses[0].1;
    let mut last = first;
    for _ in 0..40 {
        last = tr.train_epoch().unwrap().losses[0].1;
    }
    assert!((first - std::f64::consts::LN_2).abs() < 0.05, "initial loss {first}");
    assert!(last < std::f64::consts::LN_2 - 0.1, "final loss {last}");
}

/// Replays a fixed metric sequence.
struct Scripted(Vec<f64>);

impl Validator for Scripted {
    fn validate(&mut self, _: &EmbeddingTable, epoch: u32) -> Result<MetricsReport> {
        let v = self.0[(epoch - 1) as usize];
        Ok(MetricsReport {
            ks: vec![20],
            recall: vec![v],
            hit_ratio: vec![v],
            ndcg: vec![v],
            n_users: 1,
        })
    }
}

#[test]
fn early_stopping_after_patience() {
    let world = block_world(12, 0, 3, 6, 4, 0);
    let cfg = TrainConfig {
        max_epochs: 100,
        patience: 10,
        ..small_config(2)
    };
    let mut peak_first = Scripted((0..100).map(|e| 1.0 / (1.0 + e as f64)).collect());
    let res = fit_with(&world.ds, &[TaskSpec::main_bpr()], &cfg, &mut peak_first).unwrap();
    assert_eq!(res.log.epochs.len(), 11);
    assert_eq!(res.best_epoch, 1);

    let mut rising = Scripted((0..100).map(|e| e as f64).collect());
    let cfg = TrainConfig {
        max_epochs: 30,
        ..cfg
    };
    let res = fit_with(&world.ds, &[TaskSpec::main_bpr()], &cfg, &mut rising).unwrap();
    assert_eq!(res.log.epochs.len(), 30);
    assert_eq!(res.best_epoch, 30);
}

#[test]
fn best_table_reproduces_logged_metric() {
    let world = block_world(24, 4, 4, 8, 5, 2);
    for encoder in [EncoderKind::Identity, EncoderKind::LightGcn] {
        let cfg = TrainConfig {
            encoder,
            layers: 2,
            max_epochs: 15,
            patience: 5,
            ..small_config(9)
        };
        let res = fit(&world.ds, &social_tasks(), &cfg).unwrap();
        let rep = evaluate(&res.encoded_best(), &world.ds, EvalSplit::Val, &cfg.eval_ks()).unwrap();
        assert_eq!(rep.recall_at(20), Some(res.best_metric));
        assert_eq!(Some(&rep), res.best_val.as_ref());
    }
}

#[test]
fn equal_seeds_give_identical_runs() {
    let world = block_world(24, 4, 4, 8, 5, 2);
    let cfg = TrainConfig {
        max_epochs: 5,
        diagnostics: true,
        ..small_config(11)
    };
    let a = fit(&world.ds, &social_tasks(), &cfg).unwrap();
    let b = fit(&world.ds, &social_tasks(), &cfg).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.log.diagnostics_csv(), b.log.diagnostics_csv());
    let c = fit(&world.ds, &social_tasks(), &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.best, c.best);
}

#[test]
fn every_task_kind_and_combiner_trains() {
    let mut world = block_world(24, 4, 4, 8, 5, 2);
    for e in world.ds.train.iter_mut() {
        e.rating = Some(1.0 + ((e.user + e.item) % 5) as f64);
    }
    let tasks = vec![
        TaskSpec::main_bpr(),
        TaskSpec::aux("social", TaskKind::LinkBpr, "social"),
        TaskSpec::aux("align", TaskKind::Alignment, "train"),
        TaskSpec::aux("uniform", TaskKind::Uniformity, "train"),
        TaskSpec::aux("au", TaskKind::AlignmentUniformity, "train"),
        TaskSpec::aux("rating", TaskKind::RatingMse, "train"),
    ];
    for kind in [
        CombinerKind::Pmtrec,
        CombinerKind::Ew,
        CombinerKind::Rlw,
        CombinerKind::PcGrad,
        CombinerKind::GradDrop,
    ] {
        let mut cfg = small_config(4);
        cfg.combiner.kind = kind;
        cfg.combiner.alpha = 1.05;
        let mut tr = Trainer::new(&world.ds, &tasks, cfg).unwrap();
        assert_eq!(tr.task_ids().len(), 6);
        for _ in 0..2 {
            let log = tr.train_epoch().unwrap();
            assert!(log.losses.iter().all(|(_, l)| l.is_finite()));
            assert_eq!(log.mean_main_weight.is_some(), kind == CombinerKind::Pmtrec);
        }
    }
}

#[test]
fn unrated_data_disables_rating_task() {
    let world = block_world(12, 0, 3, 6, 4, 0);
    let tasks = vec![TaskSpec::main_bpr(), TaskSpec::aux("rating", TaskKind::RatingMse, "train")];
    let tr = Trainer::new(&world.ds, &tasks, small_config(1)).unwrap();
    assert_eq!(tr.task_ids(), vec!["rec"]);
}

#[test]
fn unknown_source_is_a_config_error() {
    let world = block_world(12, 0, 3, 6, 4, 0);
    let tasks = vec![TaskSpec::main_bpr(), TaskSpec::aux("x", TaskKind::LinkBpr, "missing")];
    assert!(matches!(
        Trainer::new(&world.ds, &tasks, small_config(1)),
        Err(pmtrec::Error::Config(_))
    ));
}

#[test]
fn focusing_raises_main_weight_over_epochs() {
    let world = block_world(24, 4, 4, 8, 5, 2);
    let mut cfg = small_config(6);
    cfg.combiner = CombinerConfig::pmtrec(1.2, 1.0);
    let mut tr = Trainer::new(&world.ds, &social_tasks(), cfg).unwrap();
    let early = tr.train_epoch().unwrap().mean_main_weight.unwrap();
    let mut late = early;
    for _ in 0..20 {
        late = tr.train_epoch().unwrap().mean_main_weight.unwrap();
    }
    assert!(late > early, "main weight {early} -> {late}");
}
