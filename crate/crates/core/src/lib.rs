//! Optimizer workbench for small language-model experiments.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndcore`]: dense tensors, a seedable RNG and a reverse-mode tape with the
//!   handful of ops a decoder-only transformer needs.
//! - [`model`]: role-tagged parameter registry, the nano transformer, analytic
//!   testbeds and a Zipf/Markov synthetic token stream.
//! - [`optim`]: SGDW, AdamW, Adafactor with momentum, Lion, Signum, Adalayer,
//!   Adalayer* and AdaSGD, plus the warmup/cosine schedule.
//! - [`compose`]: routing of parameter blocks to optimizer instances, second
//!   moment warm-start/freeze and trainability switches.
//! - [`harness`]: run configs, deterministic training runs, 1-D sweeps and
//!   their on-disk formats.
//! - [`analysis`]: the Adam/Signum identity checker, effective learning rate
//!   quantiles, curve alignment and stability width.
//!
//! Runnable walkthroughs live in `examples/`; the `optbench` binary is a thin
//! CLI over [`harness`] and [`analysis`].

pub mod analysis;
pub mod compose;
pub mod error;
pub mod harness;
pub mod model;
pub mod ndcore;
pub mod optim;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
