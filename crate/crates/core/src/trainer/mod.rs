//! Losses, the Adam optimizer, the alternating training loop, checkpoints
//! and evaluation.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod fit;
pub mod step;

pub use crate::ndtensor::ops::{gan_bce, l1_loss};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{desk_encoder, TrainConfig};
pub use eval::{evaluate, evaluate_with, psnr_db, EvalReport, PSNR_CAP_DB};
pub use fit::{checkpoint_name, fit, init_models, sample_name, FitOptions, FitSummary, LOSS_LOG_HEADER};
pub use step::{disc_update, gen_update, generate_for_step, train_step, Models, StepReport};
