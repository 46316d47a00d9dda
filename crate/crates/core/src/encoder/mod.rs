//! Trainable encoder, optimizer and training loop.

pub mod network;
pub mod optim;
pub mod train;

pub use network::{
    backward, forward, forward_cached, load_checkpoint, save_checkpoint, EncoderParams, ForwardCache, Layer,
};
pub use optim::{adam_step, lr_at, AdamConfig, OptimizerState};
pub use train::{
    cluster_with_model, embed_corpus, save_checkpoint_with_meta, train, train_with_hook, voiceprints_and_map,
    warm_epochs, warm_start, CheckpointMeta, EpochEnd, EpochRecord, LossMode, SamplerMode, StepRecord, TrainConfig,
    TrainLog, TrainOutcome,
};
