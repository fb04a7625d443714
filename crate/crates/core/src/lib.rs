//! Dynamic subset tuning.
//!
//! Fine-tuning where, after every optimizer step, only a fixed fraction ε of
//! the parameters in each silo may differ from the pre-trained seed; all other
//! parameters are reset to their seed values. The selected subset is
//! re-chosen each step from a per-parameter distance between the fully
//! updated model and the seed.
//!
//! Modules:
//! - [`param_store`]: flat parameters, layout, seed snapshot, DSTC checkpoints
//! - [`partition`]: silo partitions and per-silo budgets
//! - [`distance`]: distance scores and normalization
//! - [`selection`]: exact top-k and iterative threshold tracking
//! - [`optimizer`]: inner optimizers and the subset-tuning step
//! - [`subset_delta`]: sparse deltas, DSTD files, on-the-fly application
//! - [`analysis`]: subset overlap and distribution statistics
//! - [`harness`]: toy MLP tasks, training loops and experiments

mod codec;
pub mod error;
pub mod rng;

pub mod analysis;
pub mod distance;
pub mod harness;
pub mod optimizer;
pub mod param_store;
pub mod partition;
pub mod selection;
pub mod subset_delta;

pub use error::{DstError, Result};
