//! Masked (absorbing-state) discrete diffusion.
//!
//! The crate covers the whole pipeline for desk-scale experiments:
//!
//! - [`schedule`]: scalar masking schedules and the per-value polynomial schedule
//! - [`forward`]: closed-form forward kernels, reverse posteriors and rate matrices
//! - [`predictor`]: mean-parameterized predictors with hand-written backprop, AdamW and EMA
//! - [`losses`]: every ELBO form (discrete-time, cross-entropy, CTMC, score entropy,
//!   MaskGIT, state-dependent) plus exact enumeration evaluators for tiny instances
//! - [`genmd4_grad`]: two-sample REINFORCE leave-one-out gradients for the schedule exponents
//! - [`sampler`]: ancestral (iterative unmasking) samplers
//! - [`corpus`]: character-level ingestion and synthetic Markov sources
//! - [`trainer`]: training loop, BPC evaluation and checkpoint persistence
//! - [`selfcheck`]: the bundled property-oracle suite
//!
//! The `mdc` binary in this crate exposes the same functionality on the command line.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod forward;
pub mod genmd4_grad;
pub mod losses;
pub mod predictor;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
pub use forward::{ForwardKernel, Masking, TokenSequence, Vocabulary};
pub use schedule::{Schedule, ScheduleKind, VectorSchedule};
