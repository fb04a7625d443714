//! Toy pretrain → fine-tune pipeline used by the experiments and the CLI.

pub mod bench;
pub mod mlp;
pub mod sweep;
pub mod task;
pub mod train;

pub use bench::{bench_csv, bench_deltas, synthetic_delta, BenchRow};
pub use mlp::{Activation, ForwardCache, Loss, MlpSpec};
pub use sweep::{lr_epsilon_sweep, SweepCell, SweepGrid, SweepTable};
pub use task::{gen_task, Dataset, TaskKind, TaskShift, TaskSpec};
pub use train::{
    finetune, metrics_csv, pretrain, random_mask, records_csv, train, Experiment, Method,
    MetricRow, PretrainConfig, RunArtifacts, TrainConfig,
};
