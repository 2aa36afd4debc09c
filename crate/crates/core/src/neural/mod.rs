//! Decoder-only Transformer language model over subword ids.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub(crate) mod model;
pub mod params;
pub mod scalar;
pub mod train;

pub use checkpoint::{AdamState, NeuralLmCheckpoint};
pub use config::TransformerConfig;
pub use decode::DecodeState;
pub use params::{Layout, Params, TensorSpec};
pub use scalar::Scalar;
pub use train::{
    backward, finetune, forward, loss_log_csv, neural_perplexity, nll_loss, train, write_loss_log, Decay,
    LossRecord, TrainHyper, TrainOutcome,
};
