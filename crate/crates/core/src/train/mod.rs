//! Two-stage training with intermediate supervision, SGD with momentum,
//! evaluation with stream fusion, and checkpoints.

mod batch;
mod checkpoint;
mod config;
mod eval;
mod optim;
mod trainer;

pub use batch::{accuracy, gather_segments, sample_train_batch};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CKPT_BLOB, CKPT_MANIFEST};
pub use config::TrainConfig;
pub use eval::{evaluate, score_dataset, EvalReport, EvalScores};
pub use optim::{lr_at, sgd_momentum_step, Sgd};
pub use trainer::{
    check_dataset, metrics_csv, stage1_train, stage2_train, write_metrics, MetricsRow, TrainOutcome,
    METRICS_FILE,
};
