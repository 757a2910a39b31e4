//! Staged training: optimizer, curriculum loop and checkpoints.

pub mod checkpoint;
pub mod curriculum;
pub mod optimizer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint};
pub use curriculum::{
    draw_choices, stage_checkpoint_path, CurriculumPlan, Cursor, DataSource, MetricRow, PlanScale, StageConfig,
    SynthSource, TrainState, Trainer,
};
pub use optimizer::{clip_tunable, cosine_lr, Adam, AdamConfig};
