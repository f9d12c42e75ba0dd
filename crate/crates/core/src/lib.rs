//! Multi-task training for recommender embedding tables, with per-row pooling of
//! task gradients.
//!
//! Pipeline: [`data`] loads and splits interactions, [`encoder`] maps base
//! embeddings to scoring embeddings, [`tasks`] produces sparse per-task gradients,
//! [`combiner`] pools them per row, [`optim`] applies the update, and [`eval`]
//! ranks the full catalogue.

pub mod cli;
pub mod combiner;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod optim;
pub mod tasks;
pub mod trainer;

pub use combiner::{CombinerConfig, CombinerKind, GradientBundle, GradientPooler};
pub use data::{Dataset, Edge, EvalSplit, Side};
pub use encoder::{EmbeddingTable, EncoderKind, PropagationOperator};
pub use error::{Error, Result};
pub use eval::{evaluate, MetricsReport};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use tasks::{TaskGradient, TaskKind, TaskSpec};
pub use trainer::{fit, grid_search, FitResult, TrainConfig, Trainer};
