use super::synth::{synth_voice, Language, AUDIO_PER_FRAME};
use super::{derive_seed, CorpusError, Result};
use crate::dsp::{Waveform, AUDIO_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Synthetic noise families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    White,
    Pink,
    Brown,
    /// Amplitude-modulated harmonic stack.
    Engine,
    /// Filtered noise bursts over a rumble floor.
    Street,
    /// Six summed voices of babble language A.
    BabbleA,
    /// Six summed voices of babble language B.
    BabbleB,
    Hum,
    Siren,
    Car,
    Rain,
    Fan,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 12] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Brown,
        NoiseKind::Engine,
        NoiseKind::Street,
        NoiseKind::BabbleA,
        NoiseKind::BabbleB,
        NoiseKind::Hum,
        NoiseKind::Siren,
        NoiseKind::Car,
        NoiseKind::Rain,
        NoiseKind::Fan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Brown => "brown",
            NoiseKind::Engine => "engine",
            NoiseKind::Street => "street",
            NoiseKind::BabbleA => "babble-a",
            NoiseKind::BabbleB => "babble-b",
            NoiseKind::Hum => "hum",
            NoiseKind::Siren => "siren",
            NoiseKind::Car => "car",
            NoiseKind::Rain => "rain",
            NoiseKind::Fan => "fan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorpusError::Config(format!("unknown noise kind `{s}`")))
    }
}

/// Noise realisation request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub kind: NoiseKind,
    pub snr_db: f64,
    pub seed: u64,
}

fn gaussian(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// Shapes white noise so that power falls as `f^-exponent`.
fn coloured(n: usize, exponent: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = gaussian(n, r)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for (k, z) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *z *= f.powf(-exponent / 2.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}

fn one_pole_lowpass(x: &mut [f64], cutoff: f64) {
    let a = (-2.0 * PI * cutoff / AUDIO_RATE as f64).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = a * y + (1.0 - a) * *v;
        *v = y;
    }
}

fn time(i: usize) -> f64 {
    i as f64 / AUDIO_RATE as f64
}

fn engine(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let base = r.random_range(40.0..70.0);
    let firing = r.random_range(8.0..25.0);
    let phases: Vec<f64> = (0..12).map(|_| r.random_range(0.0..2.0 * PI)).collect();
    let hiss = gaussian(n, r);
    (0..n)
        .map(|i| {
            let t = time(i);
            let am = 1.0 + 0.5 * (2.0 * PI * firing * t).sin();
            let stack: f64 = (1..=12)
                .map(|h| {
                    (2.0 * PI * base * h as f64 * t + phases[h - 1]).sin() / (h as f64).powf(0.7)
                })
                .sum();
            am * stack + 0.05 * hiss[i]
        })
        .collect()
}

fn street(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut floor = coloured(n, 2.0, r);
    let scale = rms(&floor).max(1e-12);
    floor.iter_mut().for_each(|v| *v *= 0.3 / scale);
    let mut burst_src = gaussian(n, r);
    one_pole_lowpass(&mut burst_src, 1500.0);
    let events = ((time(n) * 1.5).ceil() as usize).max(1);
    for _ in 0..events {
        let start = r.random_range(0..n);
        let len = (r.random_range(0.2..1.0) * AUDIO_RATE as f64) as usize;
        let gain = r.random_range(1.0..4.0);
        let horn = r.random_bool(0.3);
        for j in 0..len.min(n - start) {
            let env = gain * (-(j as f64) / (0.25 * len as f64)).exp();
            let v = if horn {
                (2.0 * PI * 400.0 * time(j)).sin()
            } else {
                burst_src[start + j]
            };
            floor[start + j] += env * v;
        }
    }
    floor
}

fn babble(n: usize, lang: Language, seed: u64) -> Vec<f64> {
    let frames = n.div_ceil(AUDIO_PER_FRAME) + 1;
    let mut out = vec![0.0; n];
    for k in 0..6 {
        let (voice, _) = synth_voice(lang, derive_seed(seed, &["voice", &k.to_string()]), frames);
        for (o, v) in out.iter_mut().zip(voice.iter().skip(k * 37)) {
            *o += v;
        }
    }
    out
}

fn hum(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mains = if r.random_bool(0.5) { 50.0 } else { 60.0 };
    let hiss = gaussian(n, r);
    (0..n)
        .map(|i| {
            let t = time(i);
            let tones: f64 = (1..=9)
                .map(|h| (2.0 * PI * mains * h as f64 * t).sin() / h as f64)
                .sum();
            tones + 0.02 * hiss[i]
        })
        .collect()
}

fn siren(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = r.random_range(0.3..0.8);
    let (lo, hi) = (r.random_range(500.0..700.0), r.random_range(1200.0..1600.0));
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let f = lo + (hi - lo) * 0.5 * (1.0 + (2.0 * PI * rate * time(i)).sin());
            phase = (phase + 2.0 * PI * f / AUDIO_RATE as f64) % (2.0 * PI);
            phase.sin() + 0.3 * (2.0 * phase).sin() + 0.1 * (3.0 * phase).sin()
        })
        .collect()
}

fn car(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rumble = coloured(n, 2.0, r);
    one_pole_lowpass(&mut rumble, 200.0);
    let scale = rms(&rumble).max(1e-12);
    let f = r.random_range(25.0..40.0);
    (0..n)
        .map(|i| rumble[i] / scale + 0.4 * (2.0 * PI * f * time(i)).sin())
        .collect()
}

fn rain(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out: Vec<f64> = gaussian(n, r).into_iter().map(|v| 0.05 * v).collect();
    let drops = (time(n) * 200.0).ceil() as usize;
    for _ in 0..drops {
        let start = r.random_range(0..n);
        let amp = r.random_range(0.2..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let f = r.random_range(2000.0..6000.0);
        for j in 0..(n - start).min(160) {
            out[start + j] += amp * (-(j as f64) / 20.0).exp() * (2.0 * PI * f * time(j)).sin();
        }
    }
    out
}

fn fan(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut band = gaussian(n, r);
    let mut low = band.clone();
    one_pole_lowpass(&mut band, 800.0);
    one_pole_lowpass(&mut low, 300.0);
    let blade = r.random_range(90.0..150.0);
    (0..n)
        .map(|i| {
            let t = time(i);
            let tones: f64 = (1..=4)
                .map(|h| (2.0 * PI * blade * h as f64 * t).sin() / h as f64)
                .sum();
            (band[i] - low[i]) * 3.0 + 0.3 * tones
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// `length` samples of unit-RMS noise at 16 kHz, fully determined by
/// `(kind, seed)`.
pub fn synth_noise(kind: NoiseKind, seed: u64, length: usize) -> Result<Waveform> {
    if length == 0 {
        return Err(CorpusError::Input(
            "noise length must be at least one sample".into(),
        ));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = match kind {
        NoiseKind::White => gaussian(length, &mut r),
        NoiseKind::Pink => coloured(length, 1.0, &mut r),
        NoiseKind::Brown => coloured(length, 2.0, &mut r),
        NoiseKind::Engine => engine(length, &mut r),
        NoiseKind::Street => street(length, &mut r),
        NoiseKind::BabbleA => babble(length, Language::BabbleA, seed),
        NoiseKind::BabbleB => babble(length, Language::BabbleB, seed),
        NoiseKind::Hum => hum(length, &mut r),
        NoiseKind::Siren => siren(length, &mut r),
        NoiseKind::Car => car(length, &mut r),
        NoiseKind::Rain => rain(length, &mut r),
        NoiseKind::Fan => fan(length, &mut r),
    };
    let s = rms(&x);
    if s == 0.0 || !s.is_finite() {
        // A single-sample coloured realisation has no AC energy.
        x = gaussian(length, &mut r);
    }
    let s = rms(&x);
    x.iter_mut().for_each(|v| *v /= s);
    Ok(Waveform::audio(x)?)
}
