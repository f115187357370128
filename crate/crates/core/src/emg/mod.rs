//! Stage 1: EMG → speech units → mel → waveform.

mod config;
mod loss;
mod model;
mod pipeline;
mod recording;
mod train;
mod units;


pub use config::{EmgConfig, EmgTrainConfig, Stage1Weights, CONV_GEOMETRY};
pub use loss::{frame_accuracy, loss_phoneme, loss_su, loss_total};
pub use model::{
    position_encoding, AcousticDecoder, Conv1d, DecodeMode, EmgEncoder, EncoderLayer,
    EncoderOutputs, MEL_OFFSET, MEL_SCALE, UNIT_SCALE,
};
pub use pipeline::{emg_batch, Stage1Model, CHECKPOINT_KIND, OUTPUT_PEAK};
pub use recording::{EmgRecording, PhonemeSeq, EMG_CHANNELS, EMG_HOP, EMG_MAGIC, EMG_RATE};
pub use train::{Stage1Item, Stage1Losses, Stage1Report, Stage1StepLog, Stage1Trainer};
pub use units::{project_mel, pseudo_unit_targets, unit_projection, SpeechUnitSeq, D_UNIT};

use crate::checkpoint::CheckpointError;
use crate::dsp::DspError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmgError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("malformed EMG data: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmgError>;
