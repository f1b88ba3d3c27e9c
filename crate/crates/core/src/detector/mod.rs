//! Miniature anchor-free multi-scale detector: backbone with optional
//! receptive-field attention and triplet attention, SPPF, a top-down neck and
//! per-level heads at strides 4 (optional), 8, 16 and 32.

mod assign;
mod decode;
mod loss;
mod model;
mod sgd;

pub use assign::{assign_targets, level_for_size, LevelTargets, Positive, Targets};
pub use decode::{decode_predictions, encode_box, HeadOutput};
pub use loss::{detection_loss, LossReport, LossWeights};
pub use model::{build_model, forward, DetectorModel, HeadParams, LevelVars, ModelConfig, Stage, STRIDES};
pub use sgd::{global_grad_norm, sgd_step, SgdConfig, TrainState};
