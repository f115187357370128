use super::config::EmgConfig;
use super::model::{AcousticDecoder, DecodeMode, EmgEncoder};
use super::recording::{EmgRecording, EMG_CHANNELS, EMG_HOP};
use super::units::{project_mel, unit_projection, SpeechUnitSeq};
use super::{EmgError, Result};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::dsp::{griffin_lim_mel, mel_spectrogram, MelConfig, MelSpectrogram, Waveform};
use crate::tensor::{ParamStore, Scalar, Tape, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CHECKPOINT_KIND: &str = "emg";

/// Peak level of synthesised speech.
pub const OUTPUT_PEAK: f64 = 0.9;

/// Pushes equally long recordings as a `[B, T, 8]` constant.
pub fn emg_batch<T: Scalar>(tape: &mut Tape<T>, items: &[&EmgRecording]) -> Result<Var> {
    let len = items.first().map(|r| r.len()).unwrap_or(0);
    if len == 0 || items.iter().any(|r| r.len() != len) {
        return Err(EmgError::Input(
            "batch recordings must be non-empty and equally long".into(),
        ));
    }
    if len % EMG_HOP != 0 {
        return Err(EmgError::Input(format!(
            "EMG length {len} is not a multiple of {EMG_HOP}"
        )));
    }
    let data: Vec<T> = items
        .iter()
        .flat_map(|r| r.samples().iter().map(|&v| T::of(v as f64)))
        .collect();
    Ok(tape.constant(&[items.len(), len, EMG_CHANNELS], data)?)
}

fn frozen<T: Scalar>(store: &ParamStore<T>) -> ParamStore<T> {
    let mut s = store.clone();
    for id in s.ids().collect::<Vec<_>>() {
        s.set_frozen(id, true);
    }
    s
}

/// Stage-1 networks with separate parameter stores for the encoder and the
/// decoder (they train at different rates).
#[derive(Clone, Debug)]
pub struct Stage1Model<T: Scalar> {
    pub config: EmgConfig,
    pub encoder: EmgEncoder,
    pub decoder: AcousticDecoder,
    pub enc_store: ParamStore<T>,
    pub dec_store: ParamStore<T>,
    basis: DMatrix<f64>,
    /// Reject EMG whose length is not a multiple of 20 instead of trimming.
    pub strict: bool,
}

impl<T: Scalar> Stage1Model<T> {
    pub fn new(cfg: &EmgConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_store = ParamStore::new();
        let encoder = EmgEncoder::new(cfg, &mut enc_store, &mut rng);
        let mut dec_store = ParamStore::new();
        let decoder = AcousticDecoder::new(cfg, &mut dec_store, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            encoder,
            decoder,
            enc_store,
            dec_store,
            basis: unit_projection(cfg.unit_seed, cfg.n_mels, cfg.d_unit)?,
            strict: false,
        })
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            n_mels: self.config.n_mels,
            ..MelConfig::default()
        }
    }

    /// Log-mel frames of clean speech and their unit projection.
    pub fn targets(&self, clean: &Waveform) -> Result<(MelSpectrogram, SpeechUnitSeq)> {
        let mel = mel_spectrogram(clean, &self.mel_config())?;
        let units = project_mel(&mel, &self.basis)?;
        Ok((mel, units))
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Units and `[C, |P|]` phoneme logits for one recording.
    pub fn encode(&self, emg: &EmgRecording) -> Result<(SpeechUnitSeq, Vec<f64>)> {
        let emg = emg.clone().aligned(self.strict)?;
        if emg.unit_frames() == 0 {
            return Err(EmgError::Input("EMG shorter than one 50 Hz frame".into()));
        }
        let store = frozen(&self.enc_store);
        let mut tape = Tape::new();
        let x = emg_batch(&mut tape, &[&emg])?;
        let out = self.encoder.forward(&mut tape, &store, x)?;
        let c = emg.unit_frames();
        let units: Vec<f64> = tape.value(out.units).iter().map(|v| v.as_f64()).collect();
        let logits = tape.value(out.logits).iter().map(|v| v.as_f64()).collect();
        Ok((SpeechUnitSeq::new(c, self.config.d_unit, units)?, logits))
    }

    /// Autoregressive decoding of units to log-mel frames.
    pub fn decode(&self, units: &SpeechUnitSeq) -> Result<MelSpectrogram> {
        let n_mels = self.config.n_mels;
        if units.dim != self.config.d_unit {
            return Err(EmgError::Contract(format!(
                "decoder expects {}-dim units, got {}",
                self.config.d_unit, units.dim
            )));
        }
        if units.frames == 0 {
            return Ok(MelSpectrogram {
                frames: 0,
                n_mels,
                data: Vec::new(),
            });
        }
        let store = frozen(&self.dec_store);
        let mut tape = Tape::new();
        let u = tape.constant_f64(&[1, units.frames, units.dim], &units.data)?;
        let mel = self
            .decoder
            .forward(&mut tape, &store, u, DecodeMode::Autoregressive)?;
        let data: Vec<f64> = tape.value(mel).iter().map(|v| v.as_f64()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EmgError::Numeric(
                "decoder produced non-finite mel values".into(),
            ));
        }
        Ok(MelSpectrogram {
            frames: units.frames,
            n_mels,
            data,
        })
    }

    /// Full Stage-1 chain: EMG → units → mel → Griffin-Lim, peak-normalised.
    pub fn emg_to_speech(&self, emg: &EmgRecording) -> Result<Waveform> {
        let (units, _) = self.encode(emg)?;
        let mel = self.decode(&units)?;
        let mut mel = mel;
        // Griffin-Lim reads exp(mel); keep it in a sane range.
        mel.data
            .iter_mut()
            .for_each(|v| *v = v.clamp(MelConfig::default().log_floor_value(), 10.0));
        let out = griffin_lim_mel(&mel, &self.mel_config(), self.config.gl_iters)?;
        let mut samples = out.wave.into_samples();
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            samples.iter_mut().for_each(|v| *v *= OUTPUT_PEAK / peak);
        }
        Ok(Waveform::audio(samples)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(CHECKPOINT_KIND, self.config.to_kv(), &self.enc_store);
        ck.tensors.extend(
            Checkpoint::from_store(CHECKPOINT_KIND, self.config.to_kv(), &self.dec_store).tensors,
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg = EmgConfig::from_kv(&ck.config)?;
        let mut model = Self::new(&cfg, 0)?;
        let part = |prefix: &str| Checkpoint {
            kind: ck.kind.clone(),
            config: ck.config.clone(),
            tensors: ck
                .tensors
                .iter()
                .filter(|t| t.name.starts_with(prefix))
                .cloned()
                .collect::<Vec<NamedTensor>>(),
        };
        part("enc.").load_into(&mut model.enc_store)?;
        part("dec.").load_into(&mut model.dec_store)?;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.enc_store.num_scalars() + self.dec_store.num_scalars()
    }
}
