use super::{DspError, Result, Waveform};

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term) = (1.0, 1.0);
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Kaiser β giving roughly 65 dB stopband attenuation.
const KAISER_BETA: f64 = 6.2;
/// Filter half-length in units of the coarser of the two sample periods.
const ZERO_CROSSINGS: usize = 16;

/// Rational polyphase resampling with a Kaiser-windowed sinc low-pass.
pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    let from = wave.sample_rate() as usize;
    let to = target_rate as usize;
    if to == 0 {
        return Err(DspError::Input("target rate must be positive".into()));
    }
    if from == to {
        return Waveform::new(wave.samples().to_vec(), target_rate);
    }
    let g = gcd(from, to);
    let (up, down) = (to / g, from / g);
    let x = wave.samples();
    let stride = up.max(down);
    let half = ZERO_CROSSINGS * stride;
    // Taps on the upsampled grid, centred at index `half`.
    let h: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let j = i as f64 - half as f64;
            let arg = j / stride as f64;
            let sinc = if j == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
            };
            let r = j / half as f64;
            let win =
                bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(KAISER_BETA);
            sinc * win * up as f64 / stride as f64
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    let mut y = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let pos = (m * down) as isize;
        let lo = (pos - half as isize).max(0);
        let first = (lo as usize).div_ceil(up);
        let mut acc = 0.0;
        let mut n = first;
        while n < x.len() {
            let off = pos - (n * up) as isize;
            if off < -(half as isize) {
                break;
            }
            acc += x[n] * h[(off + half as isize) as usize];
            n += 1;
        }
        y.push(acc);
    }
    Waveform::new(y, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{AUDIO_RATE, STOI_RATE};
    use std::f64::consts::TAU;

    fn tone(f: f64, len: usize) -> Waveform {
        Waveform::audio(
            (0..len)
                .map(|n| (TAU * f * n as f64 / 16000.0).sin())
                .collect(),
        )
        .unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-13);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_45).abs() < 1e-10);
    }

    #[test]
    fn passband_tone_preserved() {
        let y = resample(&tone(1000.0, 16000), STOI_RATE).unwrap();
        assert_eq!(y.len(), 10000);
        let expect: Vec<f64> = (0..10000)
            .map(|n| (TAU * 1000.0 * n as f64 / 10000.0).sin())
            .collect();
        let mid = 500..9500;
        let err: Vec<f64> = y.samples()[mid.clone()]
            .iter()
            .zip(&expect[mid])
            .map(|(a, b)| a - b)
            .collect();
        assert!(rms(&err) < 1e-3, "rms error {}", rms(&err));
    }

    #[test]
    fn stopband_tone_rejected() {
        let y = resample(&tone(6500.0, 16000), STOI_RATE).unwrap();
        let level = rms(&y.samples()[500..9500]) / (0.5f64).sqrt();
        assert!(
            20.0 * level.log10() < -60.0,
            "leak {} dB",
            20.0 * level.log10()
        );
    }

    #[test]
    fn identity_rate_is_copy() {
        let w = tone(440.0, 100);
        assert_eq!(resample(&w, AUDIO_RATE).unwrap(), w);
    }
}
