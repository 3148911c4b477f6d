//! Trainable phase predictor and its anti-wrapping losses.

mod checkpoint;
mod gradcheck;
mod losses;
mod model;
mod train;

pub use checkpoint::{
    decode_model, encode_model, load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, nudge_target, GradCheckReport, GRAD_CHECK_FLOOR};
pub use losses::{
    anti_wrap, anti_wrap_slope, gd_loss, iaf_loss, ip_loss, kink_distance, kink_violations, weighted_loss,
    LossBreakdown, LossWeights,
};
pub use model::{
    forward, init_params, loss_and_grad, phase_formula, predict_phase, total_loss, Gradients,
    ModelArch, ModelParams, Tensor,
};
pub use train::{train, Optimizer, TrainConfig, TrainError, TrainOutcome, TrainingExample};
