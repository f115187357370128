use super::config::LossWeights;
use super::SeError;
use crate::tensor::{Result, Scalar, Tape, Var};

/// Waveform `[B, L]` plus compressed magnitude and phase `[B, T, F]`.
#[derive(Clone, Copy, Debug)]
pub struct SpeechTensors {
    pub wave: Var,
    pub mag: Var,
    pub phase: Var,
}

/// Weighted total and the four unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub time: Var,
    pub mag: Var,
    pub complex: Var,
    pub phase: Var,
}

/// Scalar values of a [`LossParts`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub phase: f64,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        LossValues {
            total: tape.item(self.total).as_f64(),
            time: tape.item(self.time).as_f64(),
            mag: tape.item(self.mag).as_f64(),
            complex: tape.item(self.complex).as_f64(),
            phase: tape.item(self.phase).as_f64(),
        }
    }
}

impl LossValues {
    /// Fails when any component is not finite.
    pub fn check_finite(&self) -> std::result::Result<(), SeError> {
        let parts = [
            ("total", self.total),
            ("time", self.time),
            ("magnitude", self.mag),
            ("complex", self.complex),
            ("phase", self.phase),
        ];
        match parts.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(SeError::Numeric(format!("{name} loss is {v}"))),
            None => Ok(()),
        }
    }
}

fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let q = tape.square(d);
    Ok(tape.mean(q))
}

/// Forward difference along `axis`.
fn diff<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let n = tape.shape(x)[axis];
    let hi = tape.narrow(x, axis, 1, n - 1)?;
    let lo = tape.narrow(x, axis, 0, n - 1)?;
    tape.sub(hi, lo)
}

fn anti_wrap_mean<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let w = tape.anti_wrap(d);
    Ok(tape.mean(w))
}

/// Instantaneous-phase, group-delay (frequency difference) and
/// instantaneous-frequency (time difference) anti-wrapping distances, summed.
pub fn phase_loss<T: Scalar>(tape: &mut Tape<T>, est: Var, clean: Var) -> Result<Var> {
    let ip = anti_wrap_mean(tape, est, clean)?;
    let shape = tape.shape(est).to_vec();
    let mut total = ip;
    if shape[2] > 1 {
        let (de, dc) = (diff(tape, est, 2)?, diff(tape, clean, 2)?);
        let gd = anti_wrap_mean(tape, de, dc)?;
        total = tape.add(total, gd)?;
    }
    if shape[1] > 1 {
        let (de, dc) = (diff(tape, est, 1)?, diff(tape, clean, 1)?);
        let iaf = anti_wrap_mean(tape, de, dc)?;
        total = tape.add(total, iaf)?;
    }
    Ok(total)
}

/// `λ_time·L1 + λ_mag·MSE(|·|^c) + λ_complex·MSE(re, im of |·|^c e^{iφ}) + λ_phase·AW`.
pub fn stage2_loss<T: Scalar>(
    tape: &mut Tape<T>,
    est: SpeechTensors,
    clean: SpeechTensors,
    w: &LossWeights,
) -> Result<LossParts> {
    let dt = tape.sub(est.wave, clean.wave)?;
    let at = tape.abs(dt);
    let time = tape.mean(at);
    let mag = mse(tape, est.mag, clean.mag)?;
    let (ce, se) = (tape.cos(est.phase), tape.sin(est.phase));
    let (cc, sc) = (tape.cos(clean.phase), tape.sin(clean.phase));
    let (re_e, im_e) = (tape.mul(est.mag, ce)?, tape.mul(est.mag, se)?);
    let (re_c, im_c) = (tape.mul(clean.mag, cc)?, tape.mul(clean.mag, sc)?);
    let mr = mse(tape, re_e, re_c)?;
    let mi = mse(tape, im_e, im_c)?;
    let complex = tape.add(mr, mi)?;
    let phase = phase_loss(tape, est.phase, clean.phase)?;
    let terms = [
        (time, w.time),
        (mag, w.mag),
        (complex, w.complex),
        (phase, w.phase),
    ];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, lambda) in &terms[1..] {
        let s = tape.scale(v, lambda);
        total = tape.add(total, s)?;
    }
    Ok(LossParts {
        total,
        time,
        mag,
        complex,
        phase,
    })
}
