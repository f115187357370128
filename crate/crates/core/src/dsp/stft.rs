use super::{DspError, Result, Waveform, AUDIO_RATE};
use crate::tensor::{self, CustomOp, Scalar, Tape, TensorError, Var};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Rectangular => "rect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hann" => Some(WindowKind::Hann),
            "rect" | "rectangular" => Some(WindowKind::Rectangular),
            _ => None,
        }
    }

    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
    /// Magnitude compression exponent `c` in (0, 1].
    pub compression: f64,
    /// Zero-pad `n_fft/2` on both sides so frame `t` is centred on `t·hop`.
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 400,
            hop: 100,
            window: WindowKind::Hann,
            compression: 0.3,
            center: true,
        }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, window: WindowKind, compression: f64) -> Result<Self> {
        let cfg = Self {
            n_fft,
            hop,
            window,
            compression,
            center: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks hop ≤ n_fft, the compression range and that shifted copies of
    /// the window sum to a constant.
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft {
            return Err(DspError::Config(format!(
                "need 2 ≤ n_fft and 1 ≤ hop ≤ n_fft, got n_fft={} hop={}",
                self.n_fft, self.hop
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(DspError::Config(format!(
                "compression exponent {} outside (0, 1]",
                self.compression
            )));
        }
        let w = self.window.coefficients(self.n_fft);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if sums
            .iter()
            .any(|s| (s - mean).abs() > 1e-9 * mean.abs().max(1e-300))
        {
            return Err(DspError::Config(format!(
                "{} window of {} samples is not COLA at hop {}",
                self.window.name(),
                self.n_fft,
                self.hop
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.center {
            self.n_fft / 2
        } else {
            0
        }
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        if self.center {
            len / self.hop + 1
        } else if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }
}

/// Planned FFTs and window for one [`StftConfig`], reusable across calls.
pub struct StftEngine<T: Scalar> {
    cfg: StftConfig,
    window: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> fmt::Debug for StftEngine<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftEngine")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl<T: Scalar> StftEngine<T> {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::<T>::new();
        Ok(Self {
            cfg: *cfg,
            window: cfg
                .window
                .coefficients(cfg.n_fft)
                .into_iter()
                .map(T::of)
                .collect(),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Complex spectrum `[frames, bins]` of `x` as separate real and
    /// imaginary planes.
    pub fn analyze(&self, x: &[T]) -> (usize, Vec<T>, Vec<T>) {
        let (n, f) = (self.cfg.n_fft, self.cfg.bins());
        let frames = self.cfg.frames(x.len());
        let pad = self.cfg.pad() as isize;
        let mut re = vec![T::zero(); frames * f];
        let mut im = vec![T::zero(); frames * f];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.fwd.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - pad;
            for (i, c) in buf.iter_mut().enumerate() {
                let j = start + i as isize;
                let v = if j >= 0 && (j as usize) < x.len() {
                    x[j as usize] * self.window[i]
                } else {
                    T::zero()
                };
                *c = Complex::new(v, T::zero());
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..f {
                re[t * f + k] = buf[k].re;
                im[t * f + k] = buf[k].im;
            }
        }
        (frames, re, im)
    }

    /// Real inverse DFT of one half spectrum (imaginary parts of the DC and
    /// Nyquist bins are ignored), written into `out`.
    fn irfft(
        &self,
        re: &[T],
        im: &[T],
        buf: &mut [Complex<T>],
        scratch: &mut [Complex<T>],
        out: &mut [T],
    ) {
        let n = self.cfg.n_fft;
        let f = self.cfg.bins();
        buf[0] = Complex::new(re[0], T::zero());
        for k in 1..f {
            buf[k] = Complex::new(re[k], im[k]);
            if n - k != k {
                buf[n - k] = Complex::new(re[k], -im[k]);
            }
        }
        if n % 2 == 0 {
            buf[n / 2].im = T::zero();
        }
        self.inv.process_with_scratch(buf, scratch);
        let scale = T::one() / T::of(n as f64);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.re * scale;
        }
    }

    /// Σ_t w²(n − t·hop) over the output span; zero where no frame reaches.
    fn envelope(&self, frames: usize, length: usize) -> Vec<T> {
        let pad = self.cfg.pad() as isize;
        let mut env = vec![T::zero(); length];
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - pad;
            for (i, &w) in self.window.iter().enumerate() {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < length {
                    env[j as usize] += w * w;
                }
            }
        }
        let floor = T::of(1e-10);
        env.iter_mut().for_each(|e| {
            if *e < floor {
                *e = T::zero();
            }
        });
        env
    }

    /// Weighted overlap-add: the least-squares signal whose STFT is closest to
    /// the given spectrum.
    pub fn synthesize(&self, re: &[T], im: &[T], frames: usize, length: usize) -> Result<Vec<T>> {
        let (n, f) = (self.cfg.n_fft, self.cfg.bins());
        if frames == 0 || re.len() != frames * f || im.len() != frames * f {
            return Err(DspError::Input(format!(
                "spectrum of {} / {} values is inconsistent with {frames} frames of {f} bins",
                re.len(),
                im.len()
            )));
        }
        let pad = self.cfg.pad() as isize;
        let env = self.envelope(frames, length);
        let mut y = vec![T::zero(); length];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.inv.get_inplace_scratch_len()];
        let mut frame = vec![T::zero(); n];
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - pad;
            if start >= length as isize {
                break;
            }
            self.irfft(
                &re[t * f..(t + 1) * f],
                &im[t * f..(t + 1) * f],
                &mut buf,
                &mut scratch,
                &mut frame,
            );
            for i in 0..n {
                let j = start + i as isize;
                if j >= 0 && (j as usize) < length {
                    y[j as usize] += frame[i] * self.window[i];
                }
            }
        }
        for (v, &e) in y.iter_mut().zip(&env) {
            *v = if e > T::zero() { *v / e } else { T::zero() };
        }
        Ok(y)
    }

    /// Adjoint of [`Self::synthesize`]: maps a gradient on the output
    /// samples to gradients on the real and imaginary planes.
    pub fn synthesize_adjoint(&self, g: &[T], frames: usize) -> (Vec<T>, Vec<T>) {
        let (n, f) = (self.cfg.n_fft, self.cfg.bins());
        let length = g.len();
        let pad = self.cfg.pad() as isize;
        let env = self.envelope(frames, length);
        let gs: Vec<T> = g
            .iter()
            .zip(&env)
            .map(|(&gi, &e)| if e > T::zero() { gi / e } else { T::zero() })
            .collect();
        let mut dre = vec![T::zero(); frames * f];
        let mut dim = vec![T::zero(); frames * f];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.fwd.get_inplace_scratch_len()];
        let inv_n = T::one() / T::of(n as f64);
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - pad;
            let mut any = false;
            for (i, c) in buf.iter_mut().enumerate() {
                let j = start + i as isize;
                let v = if j >= 0 && (j as usize) < length {
                    any = true;
                    gs[j as usize] * self.window[i]
                } else {
                    T::zero()
                };
                *c = Complex::new(v, T::zero());
            }
            if !any {
                continue;
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..f {
                let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                let ck = if edge { inv_n } else { T::of(2.0) * inv_n };
                dre[t * f + k] = ck * buf[k].re;
                dim[t * f + k] = if edge { T::zero() } else { ck * buf[k].im };
            }
        }
        (dre, dim)
    }
}

/// Complex STFT with its compressed magnitude and phase views.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub compressed_mag: Vec<f64>,
    pub phase: Vec<f64>,
    pub config: StftConfig,
}

/// `atan2` with the origin mapped to 0 and the result folded into (−π, π].
pub fn principal_phase(im: f64, re: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

impl Spectrogram {
    pub fn from_complex(
        re: Vec<f64>,
        im: Vec<f64>,
        frames: usize,
        config: StftConfig,
    ) -> Result<Self> {
        let bins = config.bins();
        if re.len() != frames * bins || im.len() != re.len() {
            return Err(DspError::Input(format!(
                "complex planes of {} / {} values do not match {frames}×{bins}",
                re.len(),
                im.len()
            )));
        }
        let c = config.compression;
        let compressed_mag = re
            .iter()
            .zip(&im)
            .map(|(r, i)| r.hypot(*i).powf(c))
            .collect();
        let phase = re
            .iter()
            .zip(&im)
            .map(|(&r, &i)| principal_phase(i, r))
            .collect();
        Ok(Self {
            frames,
            bins,
            re,
            im,
            compressed_mag,
            phase,
            config,
        })
    }

    /// Rebuilds the complex planes from a compressed magnitude and a phase.
    pub fn from_mag_phase(
        compressed_mag: Vec<f64>,
        phase: Vec<f64>,
        frames: usize,
        config: StftConfig,
    ) -> Result<Self> {
        let bins = config.bins();
        if compressed_mag.len() != frames * bins || phase.len() != compressed_mag.len() {
            return Err(DspError::Input(format!(
                "magnitude/phase of {} / {} values do not match {frames}×{bins}",
                compressed_mag.len(),
                phase.len()
            )));
        }
        let mut re = Vec::with_capacity(phase.len());
        let mut im = Vec::with_capacity(phase.len());
        for (&m, &p) in compressed_mag.iter().zip(&phase) {
            let mag = decompress_magnitude(m, config.compression)?;
            re.push(mag * p.cos());
            im.push(mag * p.sin());
        }
        Ok(Self {
            frames,
            bins,
            re,
            im,
            compressed_mag,
            phase,
            config,
        })
    }

    /// Uncompressed magnitude `|X|`.
    pub fn magnitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    if wave.sample_rate() != AUDIO_RATE {
        return Err(DspError::Input(format!(
            "stft expects {AUDIO_RATE} Hz audio, got {} Hz",
            wave.sample_rate()
        )));
    }
    if wave.len() < cfg.n_fft {
        return Err(DspError::Input(format!(
            "waveform of {} samples is shorter than n_fft = {}",
            wave.len(),
            cfg.n_fft
        )));
    }
    let engine = StftEngine::<f64>::new(cfg)?;
    let (frames, re, im) = engine.analyze(wave.samples());
    Spectrogram::from_complex(re, im, frames, *cfg)
}

pub fn istft(spec: &Spectrogram, cfg: &StftConfig, length: usize) -> Result<Waveform> {
    if spec.config != *cfg {
        return Err(DspError::Config(
            "spectrogram was produced with a different STFT configuration".into(),
        ));
    }
    if length == 0 {
        return Err(DspError::Input(
            "istft output length must be positive".into(),
        ));
    }
    let engine = StftEngine::<f64>::new(cfg)?;
    let y = engine.synthesize(&spec.re, &spec.im, spec.frames, length)?;
    Waveform::audio(y)
}

pub fn compress_magnitude(mag: f64, c: f64) -> Result<f64> {
    check_exponent(c)?;
    if mag < 0.0 || mag.is_nan() {
        return Err(DspError::Contract(format!("magnitude {mag} is negative")));
    }
    Ok(mag.powf(c))
}

pub fn decompress_magnitude(compressed: f64, c: f64) -> Result<f64> {
    check_exponent(c)?;
    if compressed < 0.0 || compressed.is_nan() {
        return Err(DspError::Contract(format!(
            "compressed magnitude {compressed} is negative"
        )));
    }
    Ok(compressed.powf(1.0 / c))
}

fn check_exponent(c: f64) -> Result<()> {
    if c > 0.0 && c <= 1.0 {
        Ok(())
    } else {
        Err(DspError::Contract(format!(
            "compression exponent {c} outside (0, 1]"
        )))
    }
}

#[derive(Debug)]
struct IstftOp<T: Scalar> {
    engine: Arc<StftEngine<T>>,
    batch: usize,
    frames: usize,
    length: usize,
}

impl<T: Scalar> CustomOp<T> for IstftOp<T> {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(
        &self,
        _inputs: &[&[T]],
        _output: &[T],
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let f = self.engine.cfg.bins();
        let plane = self.frames * f;
        let mut dre = vec![T::zero(); self.batch * plane];
        let mut dim = vec![T::zero(); self.batch * plane];
        for b in 0..self.batch {
            let (r, i) = self.engine.synthesize_adjoint(
                &grad_out[b * self.length..(b + 1) * self.length],
                self.frames,
            );
            dre[b * plane..(b + 1) * plane].copy_from_slice(&r);
            dim[b * plane..(b + 1) * plane].copy_from_slice(&i);
        }
        vec![needs[0].then_some(dre), needs[1].then_some(dim)]
    }
}

/// Differentiable iSTFT of `[B, frames, bins]` real/imaginary planes to
/// `[B, length]` waveforms.
pub fn istft_tape<T: Scalar>(
    tape: &mut Tape<T>,
    re: Var,
    im: Var,
    engine: &Arc<StftEngine<T>>,
    length: usize,
) -> tensor::Result<Var> {
    let shape = tape.shape(re).to_vec();
    let f = engine.cfg.bins();
    if shape.len() != 3 || shape[2] != f || tape.shape(im) != shape.as_slice() {
        return Err(TensorError::Shape {
            op: "istft",
            detail: format!(
                "expected matching [B, T, {f}] planes, got {shape:?} and {:?}",
                tape.shape(im)
            ),
        });
    }
    let (batch, frames) = (shape[0], shape[1]);
    let plane = frames * f;
    let mut out = Vec::with_capacity(batch * length);
    for b in 0..batch {
        let y = engine
            .synthesize(
                &tape.value(re)[b * plane..(b + 1) * plane],
                &tape.value(im)[b * plane..(b + 1) * plane],
                frames,
                length,
            )
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        out.extend(y);
    }
    let op = IstftOp {
        engine: Arc::clone(engine),
        batch,
        frames,
        length,
    };
    tape.custom(&[re, im], &[batch, length], out, Box::new(op))
}
