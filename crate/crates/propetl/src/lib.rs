//! Desk-scale engine for parameter-efficient transfer learning with a single
//! shared "prototype" module per network. Per-layer (and per-task) binary
//! top-k masks carve sub-networks out of the prototype; masks train through
//! a straight-through estimator at their own learning rate. Checkpoints
//! store 32-bit weights plus 1-bit packed masks, and an exact bit-level
//! accountant prices every configuration.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod masking;
pub mod petl;
pub mod storage;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
