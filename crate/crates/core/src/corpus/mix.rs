use super::{CorpusError, Result};
use crate::dsp::Waveform;

/// Crossfade used when looping a short noise recording.
pub const CROSSFADE_SECS: f64 = 0.05;

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Truncates `noise` to `len`, or loops it with a linear crossfade of
/// `fade` samples at every seam.
pub fn fit_noise(noise: &[f64], len: usize, fade: usize) -> Vec<f64> {
    if noise.len() >= len {
        return noise[..len].to_vec();
    }
    let fade = fade.min(noise.len() / 2);
    let mut out = noise.to_vec();
    while out.len() < len {
        let seam = out.len() - fade;
        for j in 0..fade {
            let w = (j as f64 + 0.5) / fade as f64;
            out[seam + j] = (1.0 - w) * out[seam + j] + w * noise[j];
        }
        out.extend_from_slice(&noise[fade..]);
    }
    out.truncate(len);
    out
}

/// Adds `noise` scaled to give `snr_db` against `clean`. Returns the
/// mixture and the applied noise gain.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(CorpusError::Input(format!(
            "clean at {} Hz, noise at {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(CorpusError::Input(format!("SNR {snr_db} dB is not finite")));
    }
    let pc = power(clean.samples());
    if pc == 0.0 {
        return Err(CorpusError::Input("clean signal is silent".into()));
    }
    if noise.is_empty() {
        return Err(CorpusError::Input("noise is empty".into()));
    }
    let fade = (CROSSFADE_SECS * clean.sample_rate() as f64).round() as usize;
    let n = fit_noise(noise.samples(), clean.len(), fade);
    let pn = power(&n);
    if pn == 0.0 {
        return Err(CorpusError::Input("noise is silent".into()));
    }
    let scale = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = clean
        .samples()
        .iter()
        .zip(&n)
        .map(|(c, v)| c + scale * v)
        .collect();
    Ok((Waveform::new(noisy, clean.sample_rate())?, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::measured_snr_db;
    use proptest::prelude::*;

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::audio(x).unwrap()
    }

    fn square(n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| if i % 2 == 0 { amp } else { -amp })
            .collect()
    }

    #[test]
    fn closed_form_scales() {
        let c = wave(square(400, 1.0));
        let n = wave(
            (0..400)
                .map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
        );
        for (snr, want) in [
            (0.0, 1.0),
            (10.0, 0.31622776601683794),
            (-10.0, 3.1622776601683795),
        ] {
            let (_, s) = mix_at_snr(&c, &n, snr).unwrap();
            assert!((s - want).abs() < 1e-12, "{snr} dB: {s}");
        }
    }

    #[test]
    fn silent_clean_is_input_error() {
        let r = mix_at_snr(&wave(vec![0.0; 10]), &wave(vec![1.0; 10]), 0.0);
        assert!(matches!(r, Err(CorpusError::Input(_))));
    }

    #[test]
    fn short_noise_is_looped_with_crossfade() {
        let noise: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let out = fit_noise(&noise, 2500, 100);
        assert_eq!(out.len(), 2500);
        assert_eq!(&out[..900], &noise[..900]);
        // Mid-fade sample blends the tail and the head equally.
        assert!((out[950] - 0.5 * (950.0 + 50.0)).abs() < 5.0);
        assert_eq!(out[1000], noise[100]);
        assert_eq!(fit_noise(&noise, 10, 100), noise[..10].to_vec());
    }

    proptest! {
        #[test]
        fn measured_snr_is_exact(seed in 0u64..1000, snr_idx in 0usize..9, noise_len in 200usize..3000) {
            use rand::{Rng, SeedableRng};
            let snrs = [-11.0, -10.0, -6.0, -5.0, -1.0, 0.0, 4.0, 5.0, 10.0];
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..2000).map(|_| r.random_range(-1.0..1.0)).collect();
            let n: Vec<f64> = (0..noise_len).map(|_| r.random_range(-1.0..1.0)).collect();
            let clean = wave(c);
            let (noisy, _) = mix_at_snr(&clean, &wave(n), snrs[snr_idx]).unwrap();
            let got = measured_snr_db(&clean, &noisy).unwrap();
            prop_assert!((got - snrs[snr_idx]).abs() < 0.01);
        }
    }
}
