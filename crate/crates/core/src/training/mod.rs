//! Synthetic scene generation, the differentiable training objective and
//! the two-stage training loop.

pub mod graph;
pub mod optim;
pub mod synth;
pub mod train;

pub use optim::{lr_schedule, optimizer_step, LrSchedule, OptimizerConfig, OptimizerState, REFERENCE_ITERATIONS};
pub use synth::{generate_scene, GenerationConfig, Supervision, SyntheticScene, Warp, WarpKind};
pub use graph::{batch_loss, loss_and_gradient, unfrozen_loss_and_gradient, LossBreakdown, Stage};
pub use train::{
    geometric_matching_score, probe_loss, run_training, scene_seed, train, train_with, training_batch, write_loss_log, Checkpoint, LossLogRow, MatchingScore, RunOptions, TrainConfig, TrainOutput,
    LOSS_LOG_HEADER,
};
