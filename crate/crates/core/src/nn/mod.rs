//! Convolutional network engine: layers, backpropagation, losses, Adam,
//! the VDSR and U-Net builders, training and weight files.

pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod weights;

pub use loss::{mse_loss, ssim_loss, Loss};
pub use network::{
    adam_update, build_unet, build_unet_with, build_vdsr, he_init, AdamConfig, Gradients, Layer, LayerKind, Network,
    Topology, Trace,
};
pub use tensor::Tensor;
pub use train::{
    predict, score_pair, score_pairs, train, train_observed, EpochRecord, PairScore, TrainConfig, TrainHistory,
};
pub use weights::{load_weights, read_weights, save_weights, warm_start, warm_start_from, write_weights};
