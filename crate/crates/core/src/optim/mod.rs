//! Optimizer state machines and the learning-rate schedule.
//!
//! Every optimizer serves a list of [`ParamStore`](crate::model::ParamStore)
//! blocks and is stepped with the full gradient list of the store. Update
//! expressions are written in one canonical order so that the equivalences
//! between optimizers (Signum and Lion with tied betas, Adalayer on singleton
//! blocks and AdamW, Adafactor on vectors and AdamW) hold bit for bit.

pub mod hyper;
pub mod optimizer;
pub mod partition;
pub mod schedule;

pub use hyper::{HyperParams, OptimizerKind, OptimizerSpec, PartitionMode, SecondMomentNorm};
pub use optimizer::{effective_lr, BlockState, EffectiveLr, OptimState, Optimizer, ScalarMoments};
pub use partition::{BlockPartition, Group, Segment};
pub use schedule::{schedule, Schedule};
