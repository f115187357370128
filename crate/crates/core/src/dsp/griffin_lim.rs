use super::mel::{mel_filterbank, MelConfig, MelSpectrogram};
use super::{DspError, Result, StftConfig, StftEngine, Waveform};
use nalgebra::DMatrix;

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub wave: Waveform,
    /// Spectral-consistency residual `‖STFT(iSTFT(Y)) − Y‖` before each
    /// phase update.
    pub residuals: Vec<f64>,
}

/// Weighted energy of a half spectrum, counting interior bins twice so it
/// matches the full-spectrum norm.
fn half_spectrum_energy(re: &[f64], im: &[f64], bins: usize, n_fft: usize) -> f64 {
    re.iter()
        .zip(im)
        .enumerate()
        .map(|(i, (r, m))| {
            let k = i % bins;
            let w = if k == 0 || (n_fft % 2 == 0 && k == n_fft / 2) {
                1.0
            } else {
                2.0
            };
            w * (r * r + m * m)
        })
        .sum()
}

/// Phase retrieval from a linear magnitude `[frames, bins]` starting from
/// zero phase.
pub fn griffin_lim(
    mag: &[f64],
    frames: usize,
    cfg: &StftConfig,
    iterations: usize,
    length: usize,
) -> Result<GriffinLimOutput> {
    if iterations == 0 {
        return Err(DspError::Input(
            "griffin-lim needs at least one iteration".into(),
        ));
    }
    let bins = cfg.bins();
    if mag.len() != frames * bins {
        return Err(DspError::Input(format!(
            "magnitude of {} values does not match {frames}×{bins}",
            mag.len()
        )));
    }
    if cfg.frames(length) != frames {
        return Err(DspError::Input(format!(
            "{frames} frames cannot describe {length} samples (expected {})",
            cfg.frames(length)
        )));
    }
    if let Some(v) = mag.iter().find(|v| !(**v >= 0.0)) {
        return Err(DspError::Input(format!(
            "magnitude entry {v} is negative or NaN"
        )));
    }
    let engine = StftEngine::<f64>::new(cfg)?;
    let mut re = mag.to_vec();
    let mut im = vec![0.0; mag.len()];
    let mut residuals = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let y = engine.synthesize(&re, &im, frames, length)?;
        let (_, cre, cim) = engine.analyze(&y);
        let dre: Vec<f64> = cre.iter().zip(&re).map(|(a, b)| a - b).collect();
        let dim: Vec<f64> = cim.iter().zip(&im).map(|(a, b)| a - b).collect();
        residuals.push(half_spectrum_energy(&dre, &dim, bins, cfg.n_fft).sqrt());
        for i in 0..mag.len() {
            let r = cre[i].hypot(cim[i]);
            if r > 0.0 {
                re[i] = mag[i] * cre[i] / r;
                im[i] = mag[i] * cim[i] / r;
            } else {
                re[i] = mag[i];
                im[i] = 0.0;
            }
        }
    }
    let y = engine.synthesize(&re, &im, frames, length)?;
    Ok(GriffinLimOutput {
        wave: Waveform::audio(y)?,
        residuals,
    })
}

/// Log-mel frames to audio: pseudo-inverse of the filterbank to a linear
/// magnitude, then [`griffin_lim`]. Produces `frames · hop` samples.
pub fn griffin_lim_mel(
    mel: &MelSpectrogram,
    cfg: &MelConfig,
    iterations: usize,
) -> Result<GriffinLimOutput> {
    if mel.n_mels != cfg.n_mels || mel.data.len() != mel.frames * mel.n_mels || mel.frames == 0 {
        return Err(DspError::Input(format!(
            "mel spectrogram {}×{} does not match {} bands",
            mel.frames, mel.n_mels, cfg.n_mels
        )));
    }
    let bins = cfg.n_fft / 2 + 1;
    let fb = DMatrix::from_row_slice(cfg.n_mels, bins, &mel_filterbank(cfg)?);
    let pinv = fb
        .pseudo_inverse(1e-10)
        .map_err(|e| DspError::Config(format!("filterbank pseudo-inverse failed: {e}")))?;
    let floor = cfg.log_floor;
    let power = DMatrix::from_fn(cfg.n_mels, mel.frames, |m, t| {
        let e = mel.data[t * cfg.n_mels + m].exp();
        if e <= floor * (1.0 + 1e-9) {
            0.0
        } else {
            e
        }
    });
    let linear = pinv * power;
    let frames = mel.frames + 1;
    let mut mag = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let src = t.min(mel.frames - 1);
        mag.extend((0..bins).map(|k| linear[(k, src)].max(0.0).sqrt()));
    }
    griffin_lim(&mag, frames, &cfg.stft(), iterations, mel.frames * cfg.hop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel_spectrogram;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn voiced(len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let t = n as f64 / 16000.0;
                let f0 = 140.0 + 30.0 * (TAU * 2.0 * t).sin();
                (1..12)
                    .map(|h| (TAU * f0 * h as f64 * t).sin() / h as f64)
                    .sum::<f64>()
                    * 0.2
            })
            .collect()
    }

    fn magnitude(x: &[f64], cfg: &StftConfig) -> Vec<f64> {
        let (_, re, im) = StftEngine::<f64>::new(cfg).unwrap().analyze(x);
        re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect()
    }

    fn chirp(len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let t = n as f64 / 16000.0;
                (TAU * (200.0 * t + 1500.0 * t * t)).sin()
            })
            .collect()
    }

    #[test]
    fn recovers_consistent_magnitude() {
        let cfg = StftConfig::default();
        let x = chirp(8000);
        let mag = magnitude(&x, &cfg);
        let out = griffin_lim(&mag, cfg.frames(x.len()), &cfg, 100, x.len()).unwrap();
        let got = magnitude(out.wave.samples(), &cfg);
        let num: f64 = got.iter().zip(&mag).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = mag.iter().map(|b| b * b).sum();
        assert!(
            (num / den).sqrt() < 0.10,
            "relative error {}",
            (num / den).sqrt()
        );
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let cfg = StftConfig::default();
        let frames = cfg.frames(1000);
        let out = griffin_lim(&vec![0.0; frames * 201], frames, &cfg, 5, 1000).unwrap();
        assert!(out.wave.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_never_increases_on_random_input() {
        let cfg = StftConfig::default();
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = cfg.frames(2000);
            let mag: Vec<f64> = (0..frames * 201).map(|_| rng.random::<f64>()).collect();
            let out = griffin_lim(&mag, frames, &cfg, 30, 2000).unwrap();
            for w in out.residuals.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = StftConfig::default();
        let x = voiced(3000);
        let mag = magnitude(&x, &cfg);
        let a = griffin_lim(&mag, cfg.frames(3000), &cfg, 10, 3000).unwrap();
        let b = griffin_lim(&mag, cfg.frames(3000), &cfg, 10, 3000).unwrap();
        assert_eq!(a.wave, b.wave);
    }

    #[test]
    fn frame_length_mismatch_rejected() {
        let cfg = StftConfig::default();
        assert!(griffin_lim(&vec![0.0; 5 * 201], 5, &cfg, 1, 4000).is_err());
        assert!(griffin_lim(&[], 0, &cfg, 0, 0).is_err());
    }

    #[test]
    fn mel_path_produces_matching_duration() {
        let cfg = MelConfig::default();
        let x = voiced(16000);
        let mel = mel_spectrogram(&Waveform::audio(x).unwrap(), &cfg).unwrap();
        let out = griffin_lim_mel(&mel, &cfg, 20).unwrap();
        assert_eq!(out.wave.len(), 16000);
        let again = mel_spectrogram(&out.wave, &cfg).unwrap();
        // Loud bands stay loud after the round trip.
        let err: f64 = again
            .data
            .iter()
            .zip(&mel.data)
            .filter(|(_, b)| **b > -5.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / mel.data.iter().filter(|b| **b > -5.0).count() as f64;
        assert!(err < 1.0, "mean log-mel error {err}");
    }
}
