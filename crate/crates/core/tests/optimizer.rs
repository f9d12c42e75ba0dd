mod common;

use pmtrec::encoder::EmbeddingTable;
use pmtrec::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use pmtrec::TaskGradient;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Adam on one row, with its own step counter.
struct ReferenceAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, x: &mut [f64], g: &[f64], cfg: &OptimizerConfig) {
        self.t += 1;
        for k in 0..x.len() {
            let gk = g[k] + cfg.weight_decay * x[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * gk;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = self.m[k] / (1.0 - cfg.beta1.powi(self.t));
            let v_hat = self.v[k] / (1.0 - cfg.beta2.powi(self.t));
            x[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[test]
fn sparse_adam_matches_reference_over_100_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n_users, n_items, d) = (3, 4, 5);
    let n_rows = n_users + n_items;
    let cfg = OptimizerConfig {
        kind: OptimizerKind::Adam,
        lr: 0.01,
        weight_decay: 1e-3,
        ..Default::default()
    };
    let mut table = common::random_table(n_users, n_items, d, &mut rng);
    let mut reference: Vec<Vec<f64>> = (0..n_rows).map(|r| table.row(r).to_vec()).collect();
    let mut ref_state: Vec<ReferenceAdam> = (0..n_rows)
        .map(|_| ReferenceAdam {
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        })
        .collect();
    let mut opt = OptimizerState::new(cfg, n_rows).unwrap();

    for _ in 0..100 {
        let mut grad = TaskGradient::new("g", d);
        for r in 0..n_rows {
            // Rows are touched intermittently; untouched rows keep their step count.
            if rng.random_bool(0.6) {
                let g: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                grad.add(r, 1.0, &g);
                ref_state[r].step(&mut reference[r], &g, &cfg);
            }
        }
        opt.step(&mut table, &grad).unwrap();
    }
    for r in 0..n_rows {
        assert_eq!(opt.steps(r), ref_state[r].t as u32);
        for (a, b) in table.row(r).iter().zip(&reference[r]) {
            assert!((a - b).abs() < 1e-10, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn first_adam_step_moves_each_coordinate_by_lr() {
    let cfg = OptimizerConfig::default();
    let mut table = EmbeddingTable::from_values(1, 1, 2, vec![0.0; 4]).unwrap();
    let mut opt = OptimizerState::new(cfg, 2).unwrap();
    let mut g = TaskGradient::new("g", 2);
    g.add(1, 1.0, &[5.0, -0.2]);
    opt.step(&mut table, &g).unwrap();
    assert!((table.row(1)[0] + cfg.lr).abs() < 1e-10);
    assert!((table.row(1)[1] - cfg.lr).abs() < 1e-10);
    assert_eq!(table.row(0), &[0.0, 0.0]);
}
