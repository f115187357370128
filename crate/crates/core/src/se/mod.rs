//! Stage 2: dual-input TF-Mamba speech enhancement.

mod config;
mod enhance;
mod loss;
mod model;
mod train;

#[cfg(test)]
mod tests;

pub use config::{LossWeights, SeConfig, DENSE_DILATIONS, MASK_BETA};
pub use enhance::{
    batch_input, se_forward, spectral_features, Enhancer, SpectralFeatures, CHECKPOINT_KIND,
};
pub use loss::{phase_loss, stage2_loss, LossParts, LossValues, SpeechTensors};
pub use model::{
    to_complex, CrossFuse, Decoder, DenseBlock, DenseEncoder, ForwardOptions, SeNetwork, SeOutputs,
    SpectralInput, PHASE_INIT_SCALE,
};
pub use train::{SeExample, SeStepLog, SeTrainConfig, SeTrainReport, SeTrainer};

use crate::checkpoint::CheckpointError;
use crate::dsp::DspError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
