//! Loss, optimizer, training loop, checkpoints and evaluation.

mod checkpoint;
mod eval;
mod fit;
pub mod loss;
mod optim;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use eval::{
    evaluate_horizons, future_errors, future_mpjpe, horizon_offset, HorizonRow, HorizonTable,
    Predictor, ZeroVelocity,
};
pub use fit::{eval_loss, fit, history_csv, parse_history_csv, EpochRecord, FitReport, TrainConfig};
pub use loss::{mpjpe, mpjpe_per_frame};
pub use optim::{
    clip_gradients, lr_at_epoch, step_lr, Adam, AdamConfig, BASE_LR, BATCH_SIZE, CLIP_NORM,
    DECAY_EVERY, EPOCHS, LR_DECAY,
};
