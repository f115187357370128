use super::{EmgError, Result};
use crate::dsp::{mel_spectrogram, MelConfig, MelSpectrogram, Waveform};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Default width of a speech-unit vector.
pub const D_UNIT: usize = 64;

/// `[frames, dim]` soft speech units at 50 Hz, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechUnitSeq {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SpeechUnitSeq {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(EmgError::Contract(format!(
                "{} values for {frames} frames of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EmgError::Numeric(
                "speech units contain non-finite values".into(),
            ));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Fixed `[n_mels, d_unit]` matrix with orthonormal columns, drawn from
/// `seed` (Gaussian matrix followed by a thin QR factorisation).
pub fn unit_projection(seed: u64, n_mels: usize, d_unit: usize) -> Result<DMatrix<f64>> {
    if d_unit == 0 || d_unit > n_mels {
        return Err(EmgError::Config(format!(
            "cannot draw {d_unit} orthonormal columns in {n_mels} dimensions"
        )));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n_mels, d_unit, |_, _| StandardNormal.sample(&mut r));
    let qr = g.qr();
    let mut q = qr.q();
    // Fix the sign ambiguity of QR so the basis is a function of the seed alone.
    let rd = qr.r();
    for j in 0..d_unit {
        if rd[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Projects log-mel frames onto the unit basis.
pub fn project_mel(mel: &MelSpectrogram, basis: &DMatrix<f64>) -> Result<SpeechUnitSeq> {
    if basis.nrows() != mel.n_mels {
        return Err(EmgError::Contract(format!(
            "projection expects {} mel bands, got {}",
            basis.nrows(),
            mel.n_mels
        )));
    }
    let m = DMatrix::from_row_slice(mel.frames, mel.n_mels, &mel.data);
    let u = m * basis;
    let data = (0..u.nrows())
        .flat_map(|t| u.row(t).iter().copied().collect::<Vec<_>>())
        .collect();
    SpeechUnitSeq::new(mel.frames, basis.ncols(), data)
}

/// Stand-in for a pre-trained unit teacher: 50 Hz log-mel frames of the
/// clean speech through the seeded orthonormal projection.
pub fn pseudo_unit_targets(clean: &Waveform, seed: u64) -> Result<SpeechUnitSeq> {
    let cfg = MelConfig::default();
    let mel = mel_spectrogram(clean, &cfg)?;
    project_mel(&mel, &unit_projection(seed, cfg.n_mels, D_UNIT)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_columns_are_orthonormal() {
        let g = unit_projection(3, 80, 64).unwrap();
        let gram = g.transpose() * &g;
        let err = (gram - DMatrix::identity(64, 64)).abs().max();
        assert!(err < 1e-10, "{err}");
        assert_eq!(g, unit_projection(3, 80, 64).unwrap());
        assert_ne!(g, unit_projection(4, 80, 64).unwrap());
        assert!(unit_projection(3, 8, 9).is_err());
    }

    #[test]
    fn one_second_gives_fifty_frames() {
        let w =
            Waveform::audio((0..16000).map(|i| (i as f64 * 0.05).sin() * 0.1).collect()).unwrap();
        let u = pseudo_unit_targets(&w, 1).unwrap();
        assert_eq!((u.frames, u.dim), (50, 64));
        assert_eq!(u, pseudo_unit_targets(&w, 1).unwrap());
    }

    #[test]
    fn projection_is_a_plain_matrix_product() {
        let mel = MelSpectrogram {
            frames: 2,
            n_mels: 3,
            data: vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0],
        };
        let basis = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let u = project_mel(&mel, &basis).unwrap();
        assert_eq!(u.data, [1.0, 2.0, -1.0, 0.0]);
    }
}
