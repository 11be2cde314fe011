//! Mean-teacher self-training with feature modulation, plausibility gating
//! and anomaly pruning, on a per-pixel linear decoder.

pub mod decoder;
pub mod loss;
pub mod train;

pub use decoder::{backward, decode, ema_update, logits, softmax, DecoderGrad, DecoderParams};
pub use loss::{dice_loss, focal_loss, seg_loss, LossGrad};
pub use train::{
    evaluate_decoder, feature_scale, predict, ramp_weight, seg_loss_grad, sup_loss, teacher_ensemble,
    load_decoder, save_checkpoint, unsup_loss, AdaptConfig, AdaptOutcome, Adapter, CheckpointManifest, EpochReport,
    FeatureSet, TrainConfig, TrainState,
};
