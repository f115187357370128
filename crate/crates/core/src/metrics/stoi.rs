use super::{MetricError, Result};
use crate::dsp::{resample, Waveform, STOI_RATE};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Constants of the reference STOI procedure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoiConstants {
    pub frame: usize,
    pub fft: usize,
    pub bands: usize,
    pub min_freq: f64,
    /// Frames per intermediate-intelligibility segment (384 ms).
    pub segment: usize,
    /// Lower SDR bound in dB used for clipping.
    pub beta_db: f64,
    /// Frames this far below the loudest clean frame are dropped.
    pub dyn_range_db: f64,
}

pub const STOI: StoiConstants = StoiConstants {
    frame: 256,
    fft: 512,
    bands: 15,
    min_freq: 150.0,
    segment: 30,
    beta_db: -15.0,
    dyn_range_db: 40.0,
};

const EPS: f64 = f64::EPSILON;

/// `hanning(n + 2)[1:-1]`: a symmetric Hann without the zero endpoints.
fn window(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize, inclusive: bool) -> Vec<usize> {
    if len < frame {
        return Vec::new();
    }
    let last = if inclusive {
        len - frame
    } else {
        (len - frame).saturating_sub(1)
    };
    if !inclusive && len == frame {
        return Vec::new();
    }
    (0..=last).step_by(hop).collect()
}

/// Drops frames whose clean energy is more than the dynamic range below
/// the loudest clean frame and overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64], c: &StoiConstants) -> (Vec<f64>, Vec<f64>) {
    let hop = c.frame / 2;
    let w = window(c.frame);
    let starts = frame_starts(x.len(), c.frame, hop, false);
    let framed = |s: &[f64], i: usize| -> Vec<f64> {
        w.iter()
            .zip(&s[i..i + c.frame])
            .map(|(a, b)| a * b)
            .collect()
    };
    let energy: Vec<f64> = starts
        .iter()
        .map(|&i| {
            let f = framed(x, i);
            20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10()
        })
        .collect();
    let peak = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| peak - c.dyn_range_db - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (kept.len() - 1) * hop + c.frame;
    let (mut xs, mut ys) = (vec![0.0; len], vec![0.0; len]);
    for (k, &i) in kept.iter().enumerate() {
        let (fx, fy) = (framed(x, i), framed(y, i));
        for j in 0..c.frame {
            xs[k * hop + j] += fx[j];
            ys[k * hop + j] += fy[j];
        }
    }
    (xs, ys)
}

/// One-third-octave band matrix `[bands, fft/2 + 1]` snapped to FFT bins.
fn third_octave_bands(c: &StoiConstants, fs: f64) -> Vec<Vec<f64>> {
    let bins = c.fft / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|k| k as f64 * fs / c.fft as f64).collect();
    let nearest = |target: f64| {
        (0..bins)
            .min_by(|&a, &b| (f[a] - target).powi(2).total_cmp(&(f[b] - target).powi(2)))
            .unwrap_or(0)
    };
    (0..c.bands)
        .map(|k| {
            let k = k as f64;
            let lo = nearest(c.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0));
            let hi = nearest(c.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0));
            (0..bins)
                .map(|j| if j >= lo && j < hi { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Band envelopes `[frames][bands]`.
fn band_envelopes(x: &[f64], c: &StoiConstants, obm: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let hop = c.frame / 2;
    let w = window(c.frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(c.fft);
    let bins = c.fft / 2 + 1;
    frame_starts(x.len(), c.frame, hop, false)
        .into_iter()
        .map(|i| {
            let mut buf = vec![Complex::new(0.0, 0.0); c.fft];
            for j in 0..c.frame {
                buf[j].re = w[j] * x[i + j];
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..bins].iter().map(|z| z.norm_sqr()).collect();
            obm.iter()
                .map(|band| {
                    band.iter()
                        .zip(&power)
                        .map(|(m, p)| m * p)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

fn normalise(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|x| *x /= n);
}

/// Short-time objective intelligibility of `degraded` against `clean`
/// (both 16 kHz or both 10 kHz, equal length).
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    if clean.len() != degraded.len() || clean.sample_rate() != degraded.sample_rate() {
        return Err(MetricError::Input(format!(
            "signals differ: {} samples at {} Hz vs {} samples at {} Hz",
            clean.len(),
            clean.sample_rate(),
            degraded.len(),
            degraded.sample_rate()
        )));
    }
    let c = STOI;
    let x = resample(clean, STOI_RATE)?;
    let y = resample(degraded, STOI_RATE)?;
    let (xs, ys) = remove_silent_frames(x.samples(), y.samples(), &c);
    let obm = third_octave_bands(&c, STOI_RATE as f64);
    let xe = band_envelopes(&xs, &c, &obm);
    let ye = band_envelopes(&ys, &c, &obm);
    if xe.is_empty() || xs.iter().all(|&v| v == 0.0) {
        return Err(MetricError::NoSpeech);
    }
    if xe.len() < c.segment {
        return Err(MetricError::Input(format!(
            "{} speech frames after silence removal, need at least {}",
            xe.len(),
            c.segment
        )));
    }
    let clip = 10f64.powf(-c.beta_db / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in c.segment..=xe.len() {
        for j in 0..c.bands {
            let mut xv: Vec<f64> = (m - c.segment..m).map(|t| xe[t][j]).collect();
            let yv: Vec<f64> = (m - c.segment..m).map(|t| ye[t][j]).collect();
            let nx = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = nx / (ny + EPS);
            let mut yp: Vec<f64> = yv
                .iter()
                .zip(&xv)
                .map(|(yy, xx)| (yy * scale).min(xx * (1.0 + clip)))
                .collect();
            normalise(&mut xv);
            normalise(&mut yp);
            total += xv.iter().zip(&yp).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Vowel-like test signal: a harmonic source whose pitch and loudness
    /// drift syllabically, with short pauses.
    fn speechlike(len: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f0 = r.random_range(100.0..180.0);
        let mut phase = 0.0;
        (0..len)
            .map(|i| {
                let t = i as f64 / 16000.0;
                let syll = (2.0 * PI * 4.0 * t).sin();
                let env = syll.max(0.0).powf(0.7);
                phase += 2.0 * PI * f0 * (1.0 + 0.1 * (2.0 * PI * 1.3 * t).sin()) / 16000.0;
                let s: f64 = (1..20).map(|h| (h as f64 * phase).sin() / h as f64).sum();
                env * s * 0.3 + 1e-4 * r.random_range(-1.0..1.0)
            })
            .collect()
    }

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::audio(x).unwrap()
    }

    #[test]
    fn self_score_is_one() {
        let x = speechlike(24000, 1);
        let s = stoi(&wave(x.clone()), &wave(x)).unwrap();
        assert!(s >= 0.999 && s <= 1.0 + 1e-9, "{s}");
    }

    #[test]
    fn sign_flip_is_invisible() {
        let x = speechlike(24000, 2);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = stoi(&wave(x.clone()), &wave(x.clone())).unwrap();
        let b = stoi(&wave(x), &wave(neg)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn more_noise_scores_lower() {
        let x = speechlike(32000, 3);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let n: Vec<f64> = (0..x.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let px = x.iter().map(|v| v * v).sum::<f64>();
        let pn = n.iter().map(|v| v * v).sum::<f64>();
        let mut last = f64::NEG_INFINITY;
        for snr in [-10.0, -5.0, 0.0, 5.0] {
            let g = (px / (pn * 10f64.powf(snr / 10.0))).sqrt();
            let y: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + g * b).collect();
            let s = stoi(&wave(x.clone()), &wave(y)).unwrap();
            assert!(s > last, "{snr} dB: {s} after {last}");
            last = s;
        }
    }

    #[test]
    fn silent_reference_has_no_speech() {
        let z = vec![0.0; 16000];
        assert!(matches!(
            stoi(&wave(z.clone()), &wave(z)),
            Err(MetricError::NoSpeech)
        ));
    }

    #[test]
    fn too_short_or_mismatched_is_input_error() {
        let x = speechlike(3000, 4);
        assert!(matches!(
            stoi(&wave(x.clone()), &wave(x.clone())),
            Err(MetricError::Input(_))
        ));
        assert!(stoi(&wave(x.clone()), &wave(x[..2000].to_vec())).is_err());
    }

    #[test]
    fn bands_start_near_150_hz_and_grow() {
        let obm = third_octave_bands(&STOI, 10000.0);
        assert_eq!(obm.len(), 15);
        let first = |b: &Vec<f64>| b.iter().position(|&v| v > 0.0).unwrap();
        let widths: Vec<usize> = obm
            .iter()
            .map(|b| b.iter().filter(|&&v| v > 0.0).count())
            .collect();
        // Bin spacing 10000/512 ≈ 19.5 Hz; 150·2^(−1/6) ≈ 133.6 Hz → bin 7.
        assert_eq!(first(&obm[0]), 7);
        assert!(widths.windows(2).all(|w| w[1] >= w[0]));
    }

    /// Reference values from an independent implementation of the same
    /// procedure, run on this exact signal at 10 kHz.
    #[test]
    fn matches_reference_implementation() {
        let n = 20000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / 10000.0;
                let env = (2.0 * PI * 3.0 * t).sin().max(0.0).powf(1.5);
                env * (0.5 * (2.0 * PI * 140.0 * t).sin()
                    + 0.3 * (2.0 * PI * 420.0 * t).sin()
                    + 0.2 * (2.0 * PI * 1900.0 * t).sin())
            })
            .collect();
        let mut state: u64 = 12345;
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                state = (1103515245 * state + 12345) % (1 << 31);
                state as f64 / (1u64 << 30) as f64 - 1.0
            })
            .collect();
        let clean = Waveform::new(x.clone(), STOI_RATE).unwrap();
        for (g, want) in [
            (0.05, 0.45270993823345546),
            (0.3, 0.3726769525756014),
            (1.0, 0.3024189513074006),
        ] {
            let y = x.iter().zip(&noise).map(|(a, b)| a + g * b).collect();
            let got = stoi(&clean, &Waveform::new(y, STOI_RATE).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-9, "gain {g}: {got} vs {want}");
        }
    }
}
