//! Spectral front- and back-end: STFT/iSTFT, magnitude compression, mel
//! analysis, Griffin-Lim phase retrieval, resampling and WAV I/O.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_mel, GriffinLimOutput};
pub use mel::{mel_filterbank, mel_spectrogram, MelConfig, MelSpectrogram};
pub use resample::resample;
pub use stft::{
    compress_magnitude, decompress_magnitude, istft, istft_tape, principal_phase, stft,
    Spectrogram, StftConfig, StftEngine, WindowKind,
};
pub use wav::{read_wav, read_wav_from, write_wav, write_wav_to};

use thiserror::Error;

pub const AUDIO_RATE: u32 = 16_000;
pub const STOI_RATE: u32 = 10_000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("unsupported WAV layout: {0}")]
    WavFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio with a known sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != AUDIO_RATE && sample_rate != STOI_RATE {
            return Err(DspError::Input(format!(
                "sample rate {sample_rate} Hz not supported (expected {AUDIO_RATE} or {STOI_RATE})"
            )));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(DspError::Input(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// 16 kHz audio.
    pub fn audio(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, AUDIO_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
