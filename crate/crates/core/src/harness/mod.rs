//! Training pipeline around the partitioned encoder: synthetic data,
//! optimisation, scheduled surgery, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod probe;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointManifest, TrainState};
pub use config::{DataConfig, TrainConfig, TrainSettings};
pub use data::{generate_synthetic_batch, SyntheticTask, Utterance};
pub use optim::{one_cycle_lr, scheduled_lr, Adam};
pub use probe::encoder_gradcheck;
pub use report::{evaluate, report_distribution, DistributionReport};
pub use train::{run_training, RunSummary, StepRecord, Trainer};
