use super::model::{to_complex, ForwardOptions, SeNetwork, SpectralInput};
use super::{SeConfig, SeError};
use crate::checkpoint::Checkpoint;
use crate::dsp::{istft_tape, StftConfig, StftEngine, Waveform, AUDIO_RATE};
use crate::tensor::{ParamStore, Scalar, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const CHECKPOINT_KIND: &str = "se";

/// Compressed magnitude and phase planes `[frames, bins]` of one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFeatures {
    pub frames: usize,
    pub mag: Vec<f64>,
    pub phase: Vec<f64>,
}

pub fn spectral_features(engine: &StftEngine<f64>, x: &[f64]) -> SpectralFeatures {
    let cfg = engine.config();
    let (frames, re, im) = engine.analyze(x);
    let mag = re
        .iter()
        .zip(&im)
        .map(|(r, i)| r.hypot(*i).powf(cfg.compression))
        .collect();
    let phase = re
        .iter()
        .zip(&im)
        .map(|(&r, &i)| crate::dsp::principal_phase(i, r))
        .collect();
    SpectralFeatures { frames, mag, phase }
}

/// Pushes a batch of equally sized feature planes as `[B, T, F]` constants.
pub fn batch_input<T: Scalar>(
    tape: &mut Tape<T>,
    items: &[&SpectralFeatures],
    bins: usize,
) -> crate::tensor::Result<SpectralInput> {
    let frames = items[0].frames;
    let shape = [items.len(), frames, bins];
    let mag: Vec<f64> = items.iter().flat_map(|f| f.mag.iter().copied()).collect();
    let phase: Vec<f64> = items.iter().flat_map(|f| f.phase.iter().copied()).collect();
    Ok(SpectralInput {
        mag: tape.constant_f64(&shape, &mag)?,
        phase: tape.constant_f64(&shape, &phase)?,
    })
}

/// Trained Stage-2 network ready for inference.
#[derive(Debug)]
pub struct Enhancer<T: Scalar> {
    pub net: SeNetwork,
    pub store: ParamStore<T>,
    analysis: StftEngine<f64>,
    synthesis: Arc<StftEngine<T>>,
}

impl<T: Scalar> Enhancer<T> {
    /// Freezes `store` and prepares the STFT engines.
    pub fn new(net: SeNetwork, mut store: ParamStore<T>) -> Result<Self, SeError> {
        for id in store.ids().collect::<Vec<_>>() {
            store.set_frozen(id, true);
        }
        let cfg: StftConfig = net.config.stft;
        Ok(Self {
            analysis: StftEngine::new(&cfg)?,
            synthesis: Arc::new(StftEngine::new(&cfg)?),
            net,
            store,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SeError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let cfg = SeConfig::from_kv(&ck.config)?;
        let mut store = ParamStore::new();
        let net = SeNetwork::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        ck.load_into(&mut store)?;
        Self::new(net, store)
    }

    pub fn config(&self) -> &SeConfig {
        &self.net.config
    }

    /// Enhances `noisy` (16 kHz). The auxiliary signal is required by a
    /// multimodal network and ignored otherwise.
    pub fn enhance(
        &self,
        noisy: &Waveform,
        aux: Option<&Waveform>,
        opts: ForwardOptions,
    ) -> Result<Waveform, SeError> {
        let cfg = &self.net.config;
        if noisy.sample_rate() != AUDIO_RATE {
            return Err(SeError::Input(format!(
                "noisy input is {} Hz, expected {AUDIO_RATE} Hz",
                noisy.sample_rate()
            )));
        }
        if noisy.len() < cfg.stft.n_fft {
            return Err(SeError::Input(format!(
                "noisy input of {} samples is shorter than one STFT frame",
                noisy.len()
            )));
        }
        let aux = if cfg.multimodal {
            let a = aux.ok_or_else(|| {
                SeError::Input("multimodal model needs an EMG-derived signal".into())
            })?;
            if a.sample_rate() != noisy.sample_rate() || a.len() != noisy.len() {
                return Err(SeError::Input(format!(
                    "auxiliary signal ({} samples at {} Hz) does not match noisy input ({} samples at {} Hz)",
                    a.len(),
                    a.sample_rate(),
                    noisy.len(),
                    noisy.sample_rate()
                )));
            }
            Some(spectral_features(&self.analysis, a.samples()))
        } else {
            None
        };
        let nf = spectral_features(&self.analysis, noisy.samples());
        let bins = cfg.stft.bins();
        let mut tape = Tape::<T>::new();
        let ni = batch_input(&mut tape, &[&nf], bins)?;
        let ai = match &aux {
            Some(f) => Some(batch_input(&mut tape, &[f], bins)?),
            None => None,
        };
        let out = self
            .net
            .forward_opts(&mut tape, &self.store, ni, ai, opts)?;
        let (re, im) = to_complex(&mut tape, out.mag, out.phase, cfg.stft.compression)?;
        let wave = istft_tape(&mut tape, re, im, &self.synthesis, noisy.len())?;
        let y = tape.value(wave).iter().map(|v| v.as_f64()).collect();
        Ok(Waveform::audio(y)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, self.net.config.to_kv(), &self.store)
    }
}

/// One-call inference: `se_forward(noisy, emg_pred)` with a built network.
pub fn se_forward<T: Scalar>(
    enhancer: &Enhancer<T>,
    noisy: &Waveform,
    emg_pred: &Waveform,
) -> Result<Waveform, SeError> {
    if enhancer.config().multimodal && emg_pred.len() != noisy.len() {
        return Err(SeError::Input(format!(
            "noisy ({}) and EMG-predicted ({}) lengths differ",
            noisy.len(),
            emg_pred.len()
        )));
    }
    enhancer.enhance(noisy, Some(emg_pred), ForwardOptions::default())
}
