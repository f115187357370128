use super::{EmgError, Result};
use crate::kv::KvMap;

/// Weights of the speech-unit and phoneme terms of the Stage-1 loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Weights {
    pub su: f64,
    pub phoneme: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            su: 0.5,
            phoneme: 0.5,
        }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        if !(self.su >= 0.0 && self.phoneme >= 0.0)
            || !self.su.is_finite()
            || !self.phoneme.is_finite()
        {
            return Err(EmgError::Config(format!(
                "loss weights must be finite and non-negative, got ({}, {})",
                self.su, self.phoneme
            )));
        }
        Ok(())
    }
}

/// Architecture of the EMG encoder and the acoustic decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EmgConfig {
    /// Output widths of the three downsampling convolutions.
    pub conv_channels: [usize; 3],
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub d_unit: usize,
    pub phonemes: usize,
    pub n_mels: usize,
    pub prenet: usize,
    pub lstm_hidden: usize,
    /// Seed of the fixed mel → unit projection.
    pub unit_seed: u64,
    pub weights: Stage1Weights,
    /// Griffin-Lim iterations used by `emg_to_speech`.
    pub gl_iters: usize,
}

impl Default for EmgConfig {
    fn default() -> Self {
        Self {
            conv_channels: [32, 64, 128],
            d_model: 128,
            heads: 4,
            layers: 2,
            ffn: 256,
            d_unit: 64,
            phonemes: 16,
            n_mels: 80,
            prenet: 128,
            lstm_hidden: 128,
            unit_seed: 7,
            weights: Stage1Weights::default(),
            gl_iters: 32,
        }
    }
}

/// Kernel, stride and padding of each downsampling convolution.
pub const CONV_GEOMETRY: [(usize, usize, usize); 3] = [(4, 2, 1), (4, 2, 1), (5, 5, 0)];

impl EmgConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.heads,
            self.layers,
            self.ffn,
            self.d_unit,
            self.phonemes,
        ];
        if dims.contains(&0)
            || self.conv_channels.contains(&0)
            || self.prenet == 0
            || self.lstm_hidden == 0
        {
            return Err(EmgError::Config(
                "all widths and counts must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(EmgError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(EmgError::Config(
                "d_model must be even for the position encoding".into(),
            ));
        }
        if self.conv_channels[2] != self.d_model {
            return Err(EmgError::Config(format!(
                "last conv width {} must equal d_model {}",
                self.conv_channels[2], self.d_model
            )));
        }
        if self.d_unit > self.n_mels {
            return Err(EmgError::Config(format!(
                "d_unit {} exceeds the {} mel bands it is projected from",
                self.d_unit, self.n_mels
            )));
        }
        self.weights.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let c = self.conv_channels;
        kv.set("emg.conv_channels", format!("{} {} {}", c[0], c[1], c[2]));
        kv.set("emg.d_model", self.d_model);
        kv.set("emg.heads", self.heads);
        kv.set("emg.layers", self.layers);
        kv.set("emg.ffn", self.ffn);
        kv.set("emg.d_unit", self.d_unit);
        kv.set("emg.phonemes", self.phonemes);
        kv.set("emg.n_mels", self.n_mels);
        kv.set("emg.prenet", self.prenet);
        kv.set("emg.lstm_hidden", self.lstm_hidden);
        kv.set("emg.unit_seed", self.unit_seed);
        kv.set("emg.lambda_su", self.weights.su);
        kv.set("emg.lambda_p", self.weights.phoneme);
        kv.set("emg.gl_iters", self.gl_iters);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let e = |err: crate::kv::KvError| EmgError::Config(err.to_string());
        let conv_channels = match kv.get_str("emg.conv_channels") {
            Some(s) => {
                let v: Vec<usize> = s
                    .split_whitespace()
                    .map(|x| {
                        x.parse()
                            .map_err(|_| EmgError::Config(format!("bad conv width `{x}`")))
                    })
                    .collect::<Result<_>>()?;
                <[usize; 3]>::try_from(v)
                    .map_err(|_| EmgError::Config("emg.conv_channels needs three widths".into()))?
            }
            None => d.conv_channels,
        };
        let cfg = Self {
            conv_channels,
            d_model: kv.get_or("emg.d_model", d.d_model).map_err(e)?,
            heads: kv.get_or("emg.heads", d.heads).map_err(e)?,
            layers: kv.get_or("emg.layers", d.layers).map_err(e)?,
            ffn: kv.get_or("emg.ffn", d.ffn).map_err(e)?,
            d_unit: kv.get_or("emg.d_unit", d.d_unit).map_err(e)?,
            phonemes: kv.get_or("emg.phonemes", d.phonemes).map_err(e)?,
            n_mels: kv.get_or("emg.n_mels", d.n_mels).map_err(e)?,
            prenet: kv.get_or("emg.prenet", d.prenet).map_err(e)?,
            lstm_hidden: kv.get_or("emg.lstm_hidden", d.lstm_hidden).map_err(e)?,
            unit_seed: kv.get_or("emg.unit_seed", d.unit_seed).map_err(e)?,
            weights: Stage1Weights {
                su: kv.get_or("emg.lambda_su", d.weights.su).map_err(e)?,
                phoneme: kv.get_or("emg.lambda_p", d.weights.phoneme).map_err(e)?,
            },
            gl_iters: kv.get_or("emg.gl_iters", d.gl_iters).map_err(e)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimisation settings of Stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EmgTrainConfig {
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub encoder_steps: usize,
    pub decoder_steps: usize,
    /// Utterances per step; 0 uses every training item.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation period in steps (0 disables validation).
    pub val_every: usize,
}

impl Default for EmgTrainConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 3e-4,
            decoder_lr: 1e-4,
            encoder_steps: 2000,
            decoder_steps: 2000,
            batch_size: 4,
            clip_norm: 5.0,
            seed: 0,
            val_every: 100,
        }
    }
}

impl EmgTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.encoder_lr, self.decoder_lr];
        if lrs.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(EmgError::Config(
                "learning rates and clip norm must be positive".into(),
            ));
        }
        Ok(())
    }
}
