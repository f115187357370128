use super::{EmgError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const EMG_CHANNELS: usize = 8;
pub const EMG_RATE: u32 = 1000;
/// EMG samples per 50 Hz unit frame.
pub const EMG_HOP: usize = 20;
pub const EMG_MAGIC: &[u8; 4] = b"EMG8";

/// Surface EMG, frame-major: `samples[t * 8 + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmgRecording {
    samples: Vec<f32>,
}

impl EmgRecording {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() % EMG_CHANNELS != 0 {
            return Err(EmgError::Input(format!(
                "{} values do not form whole 8-channel frames",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(EmgError::Input("EMG contains non-finite samples".into()));
        }
        Ok(Self { samples })
    }

    pub fn zeros(frames: usize) -> Self {
        Self {
            samples: vec![0.0; frames * EMG_CHANNELS],
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// Number of time steps (1 kHz).
    pub fn len(&self) -> usize {
        self.samples.len() / EMG_CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of 50 Hz frames covered.
    pub fn unit_frames(&self) -> usize {
        self.len() / EMG_HOP
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / EMG_RATE as f64
    }

    /// Makes the length a multiple of 20. In strict mode a ragged length
    /// is an error; otherwise the tail is dropped with a warning.
    pub fn aligned(mut self, strict: bool) -> Result<Self> {
        let extra = self.len() % EMG_HOP;
        if extra != 0 {
            if strict {
                return Err(EmgError::Input(format!(
                    "EMG length {} is not a multiple of {EMG_HOP}",
                    self.len()
                )));
            }
            log::warn!("dropping {extra} trailing EMG samples to align to 50 Hz frames");
            self.samples.truncate((self.len() - extra) * EMG_CHANNELS);
        }
        Ok(self)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(EMG_MAGIC)?;
        w.write_all(&(EMG_CHANNELS as u32).to_le_bytes())?;
        w.write_all(&EMG_RATE.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.samples {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head)
            .map_err(|_| EmgError::Format("truncated header".into()))?;
        if &head[..4] != EMG_MAGIC {
            return Err(EmgError::Format("missing EMG8 magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        let (channels, rate) = (word(4), word(8));
        if channels as usize != EMG_CHANNELS {
            return Err(EmgError::Format(format!("{channels} channels, expected 8")));
        }
        if rate != EMG_RATE {
            return Err(EmgError::Format(format!(
                "sample rate {rate} Hz, expected 1000"
            )));
        }
        let frames = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
        let n = usize::try_from(frames)
            .ok()
            .and_then(|f| f.checked_mul(EMG_CHANNELS * 4))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| EmgError::Format(format!("implausible sample count {frames}")))?;
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes)
            .map_err(|_| EmgError::Format("truncated sample data".into()))?;
        let samples = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(samples)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Phoneme label per 50 Hz frame; label 0 is silence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSeq {
    pub labels: Vec<usize>,
    pub vocab: usize,
}

impl PhonemeSeq {
    pub fn new(labels: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(EmgError::Contract(format!(
                "label {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(Self { labels, vocab })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One label per line.
    pub fn to_text(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn from_text(text: &str, vocab: usize) -> Result<Self> {
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| EmgError::Format(format!("bad phoneme label `{l}`")))
            })
            .collect::<Result<_>>()?;
        Self::new(labels, vocab)
    }
}
