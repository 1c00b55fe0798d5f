//! Two-head neural classifier with mean-pool, bidirectional LSTM and
//! dual-tower encoders, and the hierarchy-masked subcategory softmax.

mod lstm;
mod mask;
mod network;
mod train;

pub use mask::{
    build_mask, masked_softmax, masked_softmax_vjp, softmax, softmax_vjp, HierarchyMask, MaskedSoftmax,
    MASK_SMOOTHING,
};
pub use network::{
    ClassifierNetwork, EncodedTitle, EncoderConfig, EncoderKind, NetworkConfig, TowerInput, TowerKind,
};
pub use train::{
    train_network, train_with_validator, Adam, EarlyStopping, EpochLog, TrainConfig, TrainLog, Verdict,
    PRETRAINED_LEARNING_RATE,
};
