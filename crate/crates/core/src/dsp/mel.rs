use super::{DspError, Result, StftConfig, StftEngine, Waveform, WindowKind, AUDIO_RATE};

/// Log-mel analysis parameters. The default hop of 320 samples gives exactly
/// 50 frames per second at 16 kHz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Energies are clamped to this floor before the logarithm.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 640,
            hop: 320,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
            window: WindowKind::Hann,
            compression: 1.0,
            center: true,
        }
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop
    }

    pub fn frame_rate(&self) -> f64 {
        AUDIO_RATE as f64 / self.hop as f64
    }

    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// `[frames, n_mels]` natural-log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const STEP: f64 = 200.0 / 3.0;
    if f < 1000.0 {
        f / STEP
    } else {
        1000.0 / STEP + (f / 1000.0).ln() / (6.4f64.ln() / 27.0)
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const STEP: f64 = 200.0 / 3.0;
    let knee = 1000.0 / STEP;
    if m < knee {
        m * STEP
    } else {
        1000.0 * ((m - knee) * 6.4f64.ln() / 27.0).exp()
    }
}

/// Triangular Slaney-scale filterbank `[n_mels, n_fft/2 + 1]` with every
/// row normalised to sum to one.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let nyquist = AUDIO_RATE as f64 / 2.0;
    if cfg.n_mels == 0
        || !(0.0..nyquist).contains(&cfg.fmin)
        || cfg.fmax <= cfg.fmin
        || cfg.fmax > nyquist
    {
        return Err(DspError::Config(format!(
            "bad mel range: n_mels={} fmin={} fmax={}",
            cfg.n_mels, cfg.fmin, cfg.fmax
        )));
    }
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * AUDIO_RATE as f64 / cfg.n_fft as f64)
        .collect();
    let mut fb = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (v, &f) in row.iter_mut().zip(&freqs) {
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            *v = up.min(down).max(0.0);
        }
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            return Err(DspError::Config(format!(
                "{} mel bands exceed the {} usable bins of a {}-point FFT (band {m} is empty)",
                cfg.n_mels, bins, cfg.n_fft
            )));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(fb)
}

pub fn mel_spectrogram(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if wave.sample_rate() != AUDIO_RATE {
        return Err(DspError::Input(format!(
            "mel analysis expects {AUDIO_RATE} Hz audio"
        )));
    }
    let frames = cfg.frames(wave.len());
    if frames == 0 {
        return Err(DspError::Input(format!(
            "waveform of {} samples is shorter than one hop ({})",
            wave.len(),
            cfg.hop
        )));
    }
    let fb = mel_filterbank(cfg)?;
    let engine = StftEngine::<f64>::new(&cfg.stft())?;
    let (_, re, im) = engine.analyze(wave.samples());
    let bins = cfg.n_fft / 2 + 1;
    let mut data = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let power: Vec<f64> = (0..bins)
            .map(|k| re[t * bins + k].powi(2) + im[t * bins + k].powi(2))
            .collect();
        for m in 0..cfg.n_mels {
            let e: f64 = fb[m * bins..(m + 1) * bins]
                .iter()
                .zip(&power)
                .map(|(a, b)| a * b)
                .sum();
            data.push(e.max(cfg.log_floor).ln());
        }
    }
    Ok(MelSpectrogram {
        frames,
        n_mels: cfg.n_mels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_round_trips() {
        for f in [0.0, 300.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let bins = cfg.n_fft / 2 + 1;
        for row in fb.chunks(bins) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn too_many_bands_rejected() {
        let cfg = MelConfig {
            n_fft: 64,
            n_mels: 80,
            ..MelConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(DspError::Config(_))));
    }

    #[test]
    fn one_second_gives_fifty_frames() {
        let m = mel_spectrogram(
            &Waveform::audio(vec![0.1; 16000]).unwrap(),
            &MelConfig::default(),
        )
        .unwrap();
        assert_eq!(m.frames, 50);
        assert_eq!(m.data.len(), 50 * 80);
    }

    #[test]
    fn silence_sits_at_floor() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&Waveform::audio(vec![0.0; 8000]).unwrap(), &cfg).unwrap();
        assert!(m.data.iter().all(|&v| v == cfg.log_floor_value()));
    }

    #[test]
    fn tone_peaks_in_matching_band() {
        let cfg = MelConfig::default();
        let f0 = 2000.0;
        let x = (0..16000)
            .map(|n| (std::f64::consts::TAU * f0 * n as f64 / 16000.0).sin())
            .collect();
        let m = mel_spectrogram(&Waveform::audio(x).unwrap(), &cfg).unwrap();
        let row = m.frame(25);
        let best = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(8000.0));
        let centre = mel_to_hz(lo + (hi - lo) * (best + 1) as f64 / 81.0);
        assert!(
            (centre - f0).abs() < 100.0,
            "band {best} centred at {centre}"
        );
    }
}
