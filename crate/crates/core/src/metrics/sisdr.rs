use super::{MetricError, Result};
use crate::dsp::Waveform;

/// Output range of [`si_sdr`] in dB.
pub const SI_SDR_CAP_DB: f64 = 100.0;

fn same_length(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() || a.sample_rate() != b.sample_rate() {
        return Err(MetricError::Input(format!(
            "signals differ: {} samples at {} Hz vs {} samples at {} Hz",
            a.len(),
            a.sample_rate(),
            b.len(),
            b.sample_rate()
        )));
    }
    Ok(())
}

fn centred(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to ±100.
pub fn si_sdr(clean: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_length(clean, estimate)?;
    let x = centred(clean.samples());
    let y = centred(estimate.samples());
    let xx = dot(&x, &x);
    if xx == 0.0 {
        return Err(MetricError::Input("clean reference is silent".into()));
    }
    let alpha = dot(&y, &x) / xx;
    let target: f64 = alpha * alpha * xx;
    let residual: f64 = y
        .iter()
        .zip(&x)
        .map(|(yi, xi)| (yi - alpha * xi).powi(2))
        .sum();
    let db = if residual == 0.0 {
        if target > 0.0 {
            SI_SDR_CAP_DB
        } else {
            -SI_SDR_CAP_DB
        }
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// `10·log10(P_clean / P_noise)` with the noise taken as `noisy − clean`.
pub fn measured_snr_db(clean: &Waveform, noisy: &Waveform) -> Result<f64> {
    same_length(clean, noisy)?;
    let pc: f64 = clean.samples().iter().map(|v| v * v).sum();
    let pn: f64 = noisy
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(n, c)| (n - c).powi(2))
        .sum();
    if pc == 0.0 {
        return Err(MetricError::Input("clean reference is silent".into()));
    }
    Ok(10.0 * (pc / pn).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::audio(x).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scaled_copy_hits_the_cap() {
        let x = random(1000, 1);
        let y = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&wave(x), &wave(y)).unwrap(), 100.0);
    }

    #[test]
    fn orthogonal_noise_of_equal_energy_is_zero_db() {
        let x = centred(&random(2000, 2));
        let n0 = centred(&random(2000, 3));
        // Gram-Schmidt: remove the component along x, then match norms.
        let a = dot(&n0, &x) / dot(&x, &x);
        let n1: Vec<f64> = n0.iter().zip(&x).map(|(n, c)| n - a * c).collect();
        let s = (dot(&x, &x) / dot(&n1, &n1)).sqrt();
        let y: Vec<f64> = x.iter().zip(&n1).map(|(c, n)| c + s * n).collect();
        assert!(si_sdr(&wave(x), &wave(y)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn orthogonal_estimate_hits_the_floor() {
        let x: Vec<f64> = (0..1000)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let y: Vec<f64> = (0..1000)
            .map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert_eq!(si_sdr(&wave(x), &wave(y)).unwrap(), -100.0);
    }

    #[test]
    fn positive_scaling_is_invisible() {
        let x = random(1500, 4);
        let y: Vec<f64> = x
            .iter()
            .zip(random(1500, 5))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let base = si_sdr(&wave(x.clone()), &wave(y.clone())).unwrap();
        for alpha in [0.01, 0.5, 3.0, 1e3] {
            let z = y.iter().map(|v| alpha * v).collect();
            assert!((si_sdr(&wave(x.clone()), &wave(z)).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn silent_or_mismatched_reference_is_input_error() {
        assert!(si_sdr(&wave(vec![0.0; 10]), &wave(vec![1.0; 10])).is_err());
        assert!(si_sdr(&wave(vec![1.0; 10]), &wave(vec![1.0; 11])).is_err());
    }

    #[test]
    fn measured_snr_matches_construction() {
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let y = vec![1.1, -1.1, 1.1, -1.1];
        // Noise power 0.01 against signal power 1 → 20 dB.
        assert!((measured_snr_db(&wave(x), &wave(y)).unwrap() - 20.0).abs() < 1e-10);
    }
}
