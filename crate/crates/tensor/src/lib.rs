//! Dense row-major tensors with a define-by-run autodiff tape.
//!
//! The tape records every operation of a forward pass together with the
//! values its backward rule needs. `Tape::backward` walks the nodes in
//! reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! All arithmetic is generic over [`Float`], so the same model code runs in
//! `f32` for training and `f64` for finite-difference checks.

pub mod attention;
mod error;
mod float;
pub mod kernels;
pub mod macs;
pub mod optim;
pub mod parallel;
pub mod schedule;
mod tape;
mod tensor;

pub use attention::{AttnLayout, KeySets};
pub use error::TensorError;
pub use float::Float;
pub use macs::{Component, MacCounter, Scope};
pub use optim::AdamW;
pub use schedule::{cosine_schedule, LrSchedule};
pub use tape::{Grads, NodeId, ParamEntry, ParamId, ParamStore, Tape};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
