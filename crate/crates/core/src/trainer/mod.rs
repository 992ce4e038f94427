//! Optimization, checkpointing, ablations and gradient verification.

mod ablation;
mod adam;
mod checkpoint;
mod config;
mod fit;
pub mod gradcheck;
mod step;
pub mod verify;

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationTable, StructureCheck, Variant};
pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use fit::{
    evaluate_model, fit, EpochRecord, IterRecord, TrainLog, Trainer, BEST_CHECKPOINT, EPOCH_LOG_FILE,
    ITER_LOG_FILE, LAST_CHECKPOINT,
};
pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckOptions, GradCheckReport};
pub use step::train_step;
pub use verify::{run_verification, ssim_oracle_check, VerifyReport};
