//! Layer-wise pruning and layer-wise learning-rate auto-tuning.
//!
//! The crate is organised bottom-up:
//!
//! * [`micronet`] is a small dense-network engine with exact backpropagation,
//!   block-structured parameters and value-semantic snapshots.
//! * [`optim`] is per-block momentum SGD that also measures how much every
//!   block moved during an epoch and the momentum-weighted accumulated gradient.
//! * [`autolr`] holds the trial/rollback controller that renews per-block
//!   learning rates until the block variations are sorted in ascending order.
//! * [`pruning`] removes top blocks while the fine-tuned score does not drop.
//! * [`schedules`] are the single-LR baselines (step decay, cyclic, SGDR).
//! * [`harness`] wires datasets, metrics, configuration and reports together.

pub mod autolr;
pub mod error;
pub mod harness;
pub mod micronet;
pub mod optim;
pub mod pruning;
pub mod schedules;

pub use error::{Error, Result};
