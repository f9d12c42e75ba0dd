//! Sparse row-wise optimizers. Only rows present in a gradient are read or written.

use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tasks::TaskGradient;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 0.001,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RowMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

/// Optimizer hyperparameters plus lazily created per-row Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    moments: Vec<Option<RowMoments>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_rows: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            moments: vec![None; n_rows],
        })
    }

    /// Number of Adam updates applied to `row` so far.
    pub fn steps(&self, row: usize) -> u32 {
        self.moments[row].as_ref().map_or(0, |m| m.steps)
    }

    /// Rows that have moment accumulators.
    pub fn n_tracked_rows(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }

    /// Applies one update for the rows in `grad`, with `λ·e` added to each row's gradient.
    ///
    /// A non-finite gradient entry aborts before any row is modified.
    pub fn step(&mut self, table: &mut EmbeddingTable, grad: &TaskGradient) -> Result<()> {
        if let Some(r) = grad.first_non_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient on row {r} (task {})",
                grad.task_id
            )));
        }
        if grad.dim() != table.dim() {
            return Err(Error::Config("gradient and table dimensions differ".into()));
        }
        if let Some(r) = grad.row_indices().find(|&r| r >= table.n_rows()) {
            return Err(Error::Config(format!("gradient row {r} outside the table")));
        }
        let cfg = self.config;
        let d = table.dim();
        let mut g = vec![0.0; d];
        for (r, raw) in grad.rows() {
            let e = table.row_mut(r);
            for ((gi, ri), ei) in g.iter_mut().zip(raw).zip(e.iter()) {
                *gi = ri + cfg.weight_decay * ei;
            }
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (ei, gi) in e.iter_mut().zip(&g) {
                        *ei -= cfg.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let st = self.moments[r].get_or_insert_with(|| RowMoments {
                        m: vec![0.0; d],
                        v: vec![0.0; d],
                        steps: 0,
                    });
                    st.steps += 1;
                    let bc1 = 1.0 - cfg.beta1.powi(st.steps as i32);
                    let bc2 = 1.0 - cfg.beta2.powi(st.steps as i32);
                    for k in 0..d {
                        st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g[k];
                        st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                        let m_hat = st.m[k] / bc1;
                        let v_hat = st.v[k] / bc2;
                        e[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(rows: &[(usize, &[f64])]) -> TaskGradient {
        let mut g = TaskGradient::new("g", rows[0].1.len());
        for (r, v) in rows {
            g.add(*r, 1.0, v);
        }
        g
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_values(2, 1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = OptimizerConfig {
                kind,
                lr: 0.1,
                ..Default::default()
            };
            let mut st = OptimizerState::new(cfg, 3).unwrap();
            let mut t = table();
            st.step(&mut t, &grad(&[(0, &[0.0, 0.0]), (2, &[0.0, 0.0])])).unwrap();
            assert_eq!(t, table());
        }
    }

    #[test]
    fn sgd_definition() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, 3).unwrap();
        let mut t = table();
        st.step(&mut t, &grad(&[(1, &[1.0, 0.0])])).unwrap();
        assert!((t.row(1)[0] - 0.2).abs() < 1e-15);
        assert_eq!(t.row(1)[1], 0.4);
        assert_eq!(t.row(0), table().row(0));
        assert_eq!(t.row(2), table().row(2));
    }

    #[test]
    fn untouched_rows_have_no_moments() {
        let mut st = OptimizerState::new(OptimizerConfig::default(), 3).unwrap();
        let mut t = table();
        st.step(&mut t, &grad(&[(2, &[1.0, -1.0])])).unwrap();
        st.step(&mut t, &grad(&[(2, &[1.0, -1.0])])).unwrap();
        assert_eq!(st.n_tracked_rows(), 1);
        assert_eq!(st.steps(2), 2);
        assert_eq!(st.steps(0), 0);
    }

    #[test]
    fn weight_decay_only_on_touched_rows() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1.0,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, 3).unwrap();
        let mut t = table();
        st.step(&mut t, &grad(&[(0, &[0.0, 0.0])])).unwrap();
        assert!((t.row(0)[0] - 0.05).abs() < 1e-15);
        assert_eq!(t.row(1), table().row(1));
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut st = OptimizerState::new(OptimizerConfig::default(), 3).unwrap();
        let mut t = table();
        let err = st.step(&mut t, &grad(&[(0, &[1.0, 1.0]), (1, &[f64::NAN, 0.0])]));
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(t, table());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(OptimizerState::new(bad, 1).is_err());
    }
}
