use super::SeError;
use crate::dsp::{StftConfig, WindowKind};
use crate::kv::KvMap;
use crate::ssm::{MambaDims, TfMamba};

/// Weights of the four Stage-2 loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub phase: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            time: 0.2,
            mag: 0.9,
            complex: 0.1,
            phase: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeConfig {
    pub num_tf_blocks: usize,
    /// Feature width `C` of encoders, fusion, TF-Mamba and decoders.
    pub channels: usize,
    /// `false` builds the SE(AC) baseline without the second encoder and
    /// the fusion module.
    pub multimodal: bool,
    pub d_state: usize,
    pub stft: StftConfig,
    pub weights: LossWeights,
}

impl Default for SeConfig {
    fn default() -> Self {
        Self {
            num_tf_blocks: 4,
            channels: 16,
            multimodal: true,
            d_state: 16,
            stft: StftConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

/// Dilations of the dense block along time.
pub const DENSE_DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Upper bound of the magnitude mask.
pub const MASK_BETA: f64 = 2.0;

fn conv_params(cin: usize, cout: usize, kh: usize, kw: usize) -> usize {
    cout * cin * kh * kw + cout
}

impl SeConfig {
    pub fn validate(&self) -> Result<(), SeError> {
        if self.num_tf_blocks == 0 {
            return Err(SeError::Config("num_tf_blocks must be at least 1".into()));
        }
        if self.channels == 0 || self.d_state == 0 {
            return Err(SeError::Config(
                "channels and d_state must be positive".into(),
            ));
        }
        self.stft
            .validate()
            .map_err(|e| SeError::Config(e.to_string()))?;
        let w = self.weights;
        if [w.time, w.mag, w.complex, w.phase]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(SeError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            d_state: self.d_state,
            ..MambaDims::new(self.channels)
        }
    }

    /// Frequency extent after the encoder's stride-2 exit convolution.
    pub fn reduced_bins(&self) -> usize {
        (self.stft.bins() - 1) / 2 + 1
    }

    pub fn dense_block_params(&self) -> usize {
        let c = self.channels;
        (0..DENSE_DILATIONS.len())
            .map(|i| conv_params(c * (i + 1), c, 3, 3))
            .sum()
    }

    pub fn encoder_params(&self) -> usize {
        let c = self.channels;
        conv_params(2, c, 1, 1) + self.dense_block_params() + conv_params(c, c, 1, 3)
    }

    pub fn fusion_params(&self) -> usize {
        let c = self.channels;
        (2 * c * 2 * c + 2 * c) + (2 * c * c + c)
    }

    pub fn decoder_params(&self, out_channels: usize) -> usize {
        let c = self.channels;
        self.dense_block_params() + (c * c * 3 + c) + conv_params(c, out_channels, 1, 1)
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let encoders = if self.multimodal { 2 } else { 1 };
        let fusion = if self.multimodal {
            self.fusion_params()
        } else {
            0
        };
        encoders * self.encoder_params()
            + fusion
            + self.num_tf_blocks * TfMamba::param_count(&self.mamba_dims())
            + self.decoder_params(1)
            + self.decoder_params(2)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("se.num_tf_blocks", self.num_tf_blocks);
        kv.set("se.channels", self.channels);
        kv.set("se.multimodal", self.multimodal);
        kv.set("se.d_state", self.d_state);
        kv.set("stft.n_fft", self.stft.n_fft);
        kv.set("stft.hop", self.stft.hop);
        kv.set("stft.window", self.stft.window.name());
        kv.set("stft.compression", self.stft.compression);
        kv.set("stft.center", self.stft.center);
        kv.set("loss.time", self.weights.time);
        kv.set("loss.mag", self.weights.mag);
        kv.set("loss.complex", self.weights.complex);
        kv.set("loss.phase", self.weights.phase);
        kv
    }

    /// Reads every key of [`Self::to_kv`], falling back to defaults for
    /// absent keys.
    pub fn from_kv(kv: &KvMap) -> Result<Self, SeError> {
        let d = Self::default();
        let e = |err: crate::kv::KvError| SeError::Config(err.to_string());
        let window = match kv.get_str("stft.window") {
            Some(s) => WindowKind::parse(s)
                .ok_or_else(|| SeError::Config(format!("unknown window `{s}`")))?,
            None => d.stft.window,
        };
        let cfg = Self {
            num_tf_blocks: kv.get_or("se.num_tf_blocks", d.num_tf_blocks).map_err(e)?,
            channels: kv.get_or("se.channels", d.channels).map_err(e)?,
            multimodal: kv.get_or("se.multimodal", d.multimodal).map_err(e)?,
            d_state: kv.get_or("se.d_state", d.d_state).map_err(e)?,
            stft: StftConfig {
                n_fft: kv.get_or("stft.n_fft", d.stft.n_fft).map_err(e)?,
                hop: kv.get_or("stft.hop", d.stft.hop).map_err(e)?,
                window,
                compression: kv
                    .get_or("stft.compression", d.stft.compression)
                    .map_err(e)?,
                center: kv.get_or("stft.center", d.stft.center).map_err(e)?,
            },
            weights: LossWeights {
                time: kv.get_or("loss.time", d.weights.time).map_err(e)?,
                mag: kv.get_or("loss.mag", d.weights.mag).map_err(e)?,
                complex: kv.get_or("loss.complex", d.weights.complex).map_err(e)?,
                phase: kv.get_or("loss.phase", d.weights.phase).map_err(e)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
