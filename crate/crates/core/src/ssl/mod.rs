//! iBOT-style self-supervised pretraining: augmentation, blockwise masking,
//! self-distillation losses and the training driver.

pub mod augment;
pub mod loss;
pub mod mask;
pub mod trainer;

pub use augment::{augment_pair, identity_pair, AugmentConfig, AugmentRecord, AugmentedViewPair};
pub use loss::{distill_loss, ema_update, entropy, teacher_probs, update_center};
pub use mask::blockwise_mask;
pub use trainer::{
    batch_for_step, ibot_objective, ibot_objective_probe_teacher, ibot_step, pretrain, LossBreakdown,
    Objective, PatchSource, PretrainConfig, RunOptions, SslConfig, TrainState, CHECKPOINT_STEM,
    ENCODER_STEM, TRAIN_LOG,
};
