//! Synthetic data, the training loop, evaluation, and the expert-count
//! sweep.

mod config;
mod data;
mod eval;
mod gradcheck;
mod optim;
mod sweep;
mod train;

pub use config::{Ablation, CuePrompt, DataConfig, TrainConfig};
pub use data::{
    generate_dataset, load_dataset, load_split, save_dataset, save_split, OptionEntry, Sample, SplitData,
    HELDOUT_CUES_FILE, HELDOUT_FILE, TRAIN_CUES_FILE, TRAIN_FILE,
};
pub use eval::{accuracy, evaluate, sample_sim, EvalReport};
pub use gradcheck::{batch_loss, gradient_check, topk_margin};
pub use optim::{clip_global_norm, global_norm, lr_at, AdamW};
pub use sweep::{read_sweep, sweep, write_sweep, SweepRow};
pub use train::{
    initial_model, read_metrics, sample_gradient, train, train_step, write_metrics, MetricsRow, SampleGradient, StepReport,
    TrainRun,
};
