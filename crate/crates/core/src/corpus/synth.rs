use super::{CorpusError, Result};
use crate::dsp::{Waveform, AUDIO_RATE};
use crate::emg::{EmgRecording, PhonemeSeq, EMG_CHANNELS, EMG_HOP, EMG_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Phoneme inventory size; label 0 is silence.
pub const PHONEMES: usize = 16;
pub const FRAME_RATE: f64 = 50.0;
/// Audio samples per 50 Hz frame.
pub const AUDIO_PER_FRAME: usize = 320;
/// Labels from this index on are noise-excited.
const FIRST_UNVOICED: usize = 12;
const SPEECH_RMS: f64 = 0.1;

/// Phoneme inventories. The corpus speaker uses `Main`; the two babble
/// languages draw from their own, disjoint parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Language {
    Main,
    BabbleA,
    BabbleB,
}

impl Language {
    fn seed(self) -> u64 {
        match self {
            Language::Main => 0x5eed_0001,
            Language::BabbleA => 0x5eed_00a0,
            Language::BabbleB => 0x5eed_00b0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct PhonemeVoice {
    f0: f64,
    f1: f64,
    f2: f64,
    loudness: f64,
}

fn inventory(lang: Language) -> Vec<PhonemeVoice> {
    let mut r = ChaCha8Rng::seed_from_u64(lang.seed());
    let mut inv = vec![PhonemeVoice {
        f0: 120.0,
        f1: 500.0,
        f2: 1500.0,
        loudness: 0.0,
    }];
    for p in 1..PHONEMES {
        // Spread formants over a grid so phonemes stay distinguishable.
        let slot = (p - 1) as f64 / (PHONEMES - 1) as f64;
        inv.push(PhonemeVoice {
            f0: r.random_range(95.0..210.0),
            f1: 280.0 + 650.0 * slot + r.random_range(-40.0..40.0),
            f2: r.random_range(900.0..3000.0),
            loudness: if p >= FIRST_UNVOICED {
                r.random_range(0.35..0.6)
            } else {
                r.random_range(0.6..1.0)
            },
        });
    }
    inv
}

/// Fixed `[8, |P|]` non-negative gains mapping phoneme activity to EMG
/// channel envelopes.
fn emg_gains() -> Vec<[f64; PHONEMES]> {
    let mut r = ChaCha8Rng::seed_from_u64(0xe36_9a15);
    (0..EMG_CHANNELS)
        .map(|_| {
            let mut row = [0.0; PHONEMES];
            row[0] = 0.05;
            for g in row.iter_mut().skip(1) {
                *g = r.random_range(0.0f64..1.0).powi(2);
            }
            row
        })
        .collect()
}

/// Phoneme track from a sticky Markov chain, starting and ending in silence.
fn phoneme_track(frames: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = Vec::with_capacity(frames);
    let mut cur = 0;
    for t in 0..frames {
        if t < 3 || t + 3 >= frames {
            cur = 0;
        } else if r.random::<f64>() > 0.82 {
            cur = if cur != 0 && r.random::<f64>() < 0.15 {
                0
            } else {
                let mut next = r.random_range(1..PHONEMES);
                if next == cur {
                    next = next % (PHONEMES - 1) + 1;
                }
                next
            };
        }
        labels.push(cur);
    }
    labels
}

/// Two-pole resonator at `freq` with bandwidth `bw`, unit peak gain.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, fs: f64) -> f64 {
        let r = (-PI * bw / fs).exp();
        let c = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let y = (1.0 - r) * x + c * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn smooth_coeff(tau_secs: f64, fs: f64) -> f64 {
    (-1.0 / (tau_secs * fs)).exp()
}

/// Renders a 16 kHz voice for a label track of `lang`, RMS-normalised.
fn render_voice(labels: &[usize], lang: Language, r: &mut ChaCha8Rng) -> Vec<f64> {
    let inv = inventory(lang);
    let fs = AUDIO_RATE as f64;
    let pitch = r.random_range(0.85..1.2);
    let formant = r.random_range(0.95..1.05);
    let vibrato = r.random_range(0.0..2.0 * PI);
    let (a_amp, a_freq) = (smooth_coeff(0.008, fs), smooth_coeff(0.015, fs));
    let n = labels.len() * AUDIO_PER_FRAME;
    let mut out = Vec::with_capacity(n);
    let (mut f0, mut f1, mut f2) = (inv[1].f0 * pitch, inv[1].f1, inv[1].f2);
    let (mut av, mut au) = (0.0, 0.0);
    let mut phase = 0.0f64;
    let (mut r1, mut r2) = (
        Resonator { y1: 0.0, y2: 0.0 },
        Resonator { y1: 0.0, y2: 0.0 },
    );
    for i in 0..n {
        let p = labels[i / AUDIO_PER_FRAME];
        let v = inv[p];
        let (tv, tu) = match p {
            0 => (0.0, 0.0),
            p if p >= FIRST_UNVOICED => (0.0, v.loudness),
            _ => (v.loudness, 0.0),
        };
        av = a_amp * av + (1.0 - a_amp) * tv;
        au = a_amp * au + (1.0 - a_amp) * tu;
        if p != 0 {
            f0 = a_freq * f0 + (1.0 - a_freq) * v.f0 * pitch;
            f1 = a_freq * f1 + (1.0 - a_freq) * v.f1 * formant;
            f2 = a_freq * f2 + (1.0 - a_freq) * v.f2 * formant;
        }
        let t = i as f64 / fs;
        let inst = f0 * (1.0 + 0.03 * (2.0 * PI * 5.0 * t + vibrato).sin());
        phase = (phase + 2.0 * PI * inst / fs) % (2.0 * PI);
        let harmonics = ((4000.0 / inst) as usize).clamp(1, 30);
        let voiced: f64 = (1..=harmonics)
            .map(|h| (h as f64 * phase).sin() / h as f64)
            .sum();
        let noise: f64 = r.sample(StandardNormal);
        let src = av * voiced + au * noise * 0.5;
        let y = r2.step(r1.step(src, f1, 90.0, fs), f2, 160.0, fs);
        out.push(y + 0.05 * r1.y1);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= SPEECH_RMS / rms);
    }
    out
}

/// Band-limited noise carrier at 1 kHz (RBJ band-pass around 150 Hz),
/// unit RMS.
fn emg_carrier(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = EMG_RATE as f64;
    let w0 = 2.0 * PI * 150.0 / fs;
    let alpha = w0.sin() / (2.0 * 0.8);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = r.sample(StandardNormal);
            let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn render_emg(labels: &[usize], r: &mut ChaCha8Rng) -> Vec<f32> {
    let gains = emg_gains();
    let n = labels.len() * EMG_HOP;
    let a = smooth_coeff(0.008, EMG_RATE as f64);
    let channels: Vec<Vec<f64>> = gains
        .iter()
        .map(|g| {
            let carrier = emg_carrier(n, r);
            let mut env = 0.0;
            (0..n)
                .map(|i| {
                    env = a * env + (1.0 - a) * g[labels[i / EMG_HOP]];
                    let sensor: f64 = r.sample(StandardNormal);
                    (0.05 + env) * carrier[i] + 0.01 * sensor
                })
                .collect()
        })
        .collect();
    (0..n)
        .flat_map(|i| channels.iter().map(move |c| c[i] as f32))
        .collect()
}

/// One synchronised (speech, EMG, phonemes) item.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub clean: Waveform,
    pub emg: EmgRecording,
    pub phonemes: PhonemeSeq,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.phonemes.len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / FRAME_RATE
    }
}

fn frames_for(duration: f64) -> Result<usize> {
    let frames = duration * FRAME_RATE;
    if !(frames >= 1.0) || (frames - frames.round()).abs() > 1e-6 {
        return Err(CorpusError::Input(format!(
            "duration {duration} s is not a positive multiple of 0.02 s"
        )));
    }
    Ok(frames.round() as usize)
}

/// Synthesises a voice of `lang` lasting `frames` 50 Hz frames.
pub fn synth_voice(lang: Language, seed: u64, frames: usize) -> (Vec<f64>, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels = phoneme_track(frames, &mut r);
    let audio = render_voice(&labels, lang, &mut r);
    (audio, labels)
}

/// Deterministic synthetic utterance of `duration` seconds (a multiple of
/// 20 ms).
pub fn synth_utterance(seed: u64, duration: f64) -> Result<Utterance> {
    let frames = frames_for(duration)?;
    let (audio, labels) = synth_voice(Language::Main, seed, frames);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xe36_0000_0000);
    let emg = render_emg(&labels, &mut r);
    Ok(Utterance {
        id: format!("syn{seed:016x}"),
        clean: Waveform::audio(audio)?,
        emg: EmgRecording::new(emg)?,
        phonemes: PhonemeSeq::new(labels, PHONEMES)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn deterministic_given_seed() {
        let a = synth_utterance(7, 0.5).unwrap();
        assert_eq!(a, synth_utterance(7, 0.5).unwrap());
        assert_ne!(a.clean, synth_utterance(8, 0.5).unwrap().clean);
    }

    #[test]
    fn one_second_rate_bookkeeping() {
        let u = synth_utterance(1, 1.0).unwrap();
        assert_eq!(u.clean.len(), 16000);
        assert_eq!(u.emg.len(), 1000);
        assert_eq!(u.emg.samples().len(), 8000);
        assert_eq!(u.phonemes.len(), 50);
        assert_eq!(u.emg.unit_frames(), u.frames());
    }

    #[test]
    fn ragged_duration_is_rejected() {
        assert!(synth_utterance(1, 0.03).is_err());
        assert!(synth_utterance(1, 0.0).is_err());
    }

    #[test]
    fn speech_is_finite_and_normalised() {
        let u = synth_utterance(3, 2.0).unwrap();
        let x = u.clean.samples();
        assert!(x.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        assert!((rms - SPEECH_RMS).abs() < 1e-12);
        // The edges are silent, the middle is not.
        assert!(u.phonemes.labels[..3].iter().all(|&l| l == 0));
        assert!(u.phonemes.labels.iter().any(|&l| l != 0));
    }

    #[test]
    fn inventories_differ_by_language() {
        let (a, b) = (inventory(Language::BabbleA), inventory(Language::BabbleB));
        assert!(a.iter().zip(&b).skip(1).all(|(x, y)| x.f2 != y.f2));
    }

    /// Per-frame log energy of each EMG channel.
    fn emg_features(u: &Utterance) -> Vec<[f64; EMG_CHANNELS]> {
        let s = u.emg.samples();
        (0..u.frames())
            .map(|k| {
                let mut f = [0.0; EMG_CHANNELS];
                for t in k * EMG_HOP..(k + 1) * EMG_HOP {
                    for c in 0..EMG_CHANNELS {
                        f[c] += (s[t * EMG_CHANNELS + c] as f64).powi(2);
                    }
                }
                f.map(|e| (e / EMG_HOP as f64 + 1e-6).ln())
            })
            .collect()
    }

    #[test]
    fn emg_energy_predicts_phonemes_above_chance() {
        // Ridge regression from frame energies to one-hot labels, fitted on
        // the first half of a long utterance and scored on the second.
        let u = synth_utterance(11, 12.0).unwrap();
        let feats = emg_features(&u);
        let labels = &u.phonemes.labels;
        let half = feats.len() / 2;
        let design = |rows: std::ops::Range<usize>| {
            DMatrix::from_fn(rows.len(), EMG_CHANNELS + 1, |i, j| {
                if j == EMG_CHANNELS {
                    1.0
                } else {
                    feats[rows.start + i][j]
                }
            })
        };
        let x = design(0..half);
        let y = DMatrix::from_fn(half, PHONEMES, |i, p| (labels[i] == p) as u8 as f64);
        let gram =
            x.transpose() * &x + DMatrix::identity(EMG_CHANNELS + 1, EMG_CHANNELS + 1) * 1e-3;
        let w = gram.lu().solve(&(x.transpose() * y)).unwrap();
        let xt = design(half..feats.len());
        let pred = xt * w;
        let correct = (0..pred.nrows())
            .filter(|&i| {
                let row: DVector<f64> = pred.row(i).transpose();
                row.argmax().0 == labels[half + i]
            })
            .count();
        let acc = correct as f64 / pred.nrows() as f64;
        // Baseline: always guess the most frequent training label.
        let mut counts = [0usize; PHONEMES];
        labels[..half].iter().for_each(|&l| counts[l] += 1);
        let major = (0..PHONEMES).max_by_key(|&p| counts[p]).unwrap();
        let base =
            labels[half..].iter().filter(|&&l| l == major).count() as f64 / pred.nrows() as f64;
        assert!(
            acc > base + 0.1,
            "held-out accuracy {acc}, majority baseline {base}"
        );
    }
}
