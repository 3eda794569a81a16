//! Desk-scale Vision Transformer training with tri-level data sparsity:
//! online example filtering, token pruning and attention-connection
//! pruning, with exact MAC accounting.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod forgetting;
pub mod macs;
pub mod model;
pub mod selector;
pub mod subset;
pub mod train;

pub use config::{
    DatasetKind, Precision, RemovalPolicy, RunConfig, SparsityConfig, TiebreakDirection, ViTConfig,
};
pub use error::{CoreError, Result};
pub use model::{AttentionRecord, ForwardOutput, ViT};
pub use selector::SelectionMask;
pub use train::{EpochMetrics, RunSummary, TrainOptions};
