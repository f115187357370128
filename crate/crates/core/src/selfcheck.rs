//! Built-in verification suite: gradient checks, scan oracle, STFT round
//! trip, loss identities, mixing exactness and STOI sanity.

use crate::corpus::{mix_at_snr, synth_noise, synth_utterance, NoiseKind};
use crate::dsp::{istft, stft, StftConfig, Waveform};
use crate::emg::{
    emg_batch, loss_phoneme, loss_su, loss_total, AcousticDecoder, DecodeMode, EmgConfig,
    EmgEncoder, EmgRecording, EncoderLayer, Stage1Weights, EMG_CHANNELS, MEL_OFFSET,
};
use crate::metrics::{measured_snr_db, stoi};
use crate::se::{
    phase_loss, stage2_loss, CrossFuse, Decoder, DenseEncoder, LossWeights, SpeechTensors,
};
use crate::ssm::{causal_depthwise_conv, selective_scan, BiMamba, Mamba, MambaDims, TfMamba};
use crate::tensor::gradcheck::{check_store, primitive_cases, GradCheckOptions};
use crate::tensor::{fault, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Outcome of one property check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    /// Human-readable bound, e.g. `rel err < 1e-4`.
    pub tolerance: String,
    /// The measured quantity compared against the bound.
    pub value: f64,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: {:.3e} ({})",
            if self.pass { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            self.value,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

fn below(
    module: &'static str,
    name: impl Into<String>,
    value: f64,
    bound: f64,
    detail: String,
) -> CheckResult {
    CheckResult {
        module,
        name: name.into(),
        tolerance: format!("< {bound:e}"),
        value,
        pass: value < bound,
        detail,
    }
}

fn failed(module: &'static str, name: impl Into<String>, err: impl fmt::Display) -> CheckResult {
    CheckResult {
        module,
        name: name.into(),
        tolerance: "no error".into(),
        value: f64::NAN,
        pass: false,
        detail: err.to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfCheckOptions {
    /// Perturbs one backward rule so that the gradient checks must fail.
    pub inject_fault: bool,
}

/// Runs every check in a fixed order.
pub fn run_all(opts: SelfCheckOptions) -> Vec<CheckResult> {
    let mut out = gradient_checks(opts.inject_fault);
    out.push(scan_oracle(120, 7));
    out.push(stft_round_trip(50, 3));
    out.extend(loss_identities());
    out.push(snr_exactness(1000, 11));
    out.extend(stoi_properties(10));
    out
}

const RELATIVE_BOUND: f64 = 1e-4;

const COMPOSITE: GradCheckOptions = GradCheckOptions {
    h: 1e-6,
    max_probes: 12,
    floor: 1e-3,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Weighted sum with fixed random coefficients, so every output matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant_f64(&shape, &uniform(shape.iter().product(), seed))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn contract<E: fmt::Display>(e: E) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn composite<F>(module: &'static str, name: &str, store: &mut ParamStore<f64>, f: F) -> CheckResult
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> crate::tensor::Result<Var>,
{
    match check_store(store, f, &COMPOSITE) {
        Ok(r) if r.probes == 0 => failed(module, name, "no parameter was probed"),
        Ok(r) => below(module, name, r.max_rel_err, RELATIVE_BOUND, r.worst),
        Err(e) => failed(module, name, e),
    }
}

fn small_mamba() -> MambaDims {
    MambaDims {
        d_model: 4,
        expand: 2,
        d_state: 3,
        conv_width: 4,
        dt_rank: 2,
    }
}

fn small_emg() -> EmgConfig {
    EmgConfig {
        conv_channels: [3, 4, 8],
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn: 8,
        d_unit: 4,
        phonemes: 5,
        n_mels: 6,
        prenet: 5,
        lstm_hidden: 3,
        ..EmgConfig::default()
    }
}

/// Finite-difference checks of every primitive and composite block in
/// 64-bit precision. With `inject_fault` the sigmoid backward rule is
/// perturbed for the duration of the checks.
pub fn gradient_checks(inject_fault: bool) -> Vec<CheckResult> {
    fault::inject_backward_fault(inject_fault);
    let out = gradient_checks_inner();
    fault::inject_backward_fault(false);
    out
}

fn gradient_checks_inner() -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = primitive_cases()
        .iter()
        .enumerate()
        .map(|(k, c)| match c.run(100 + k as u64) {
            Ok(r) => below("tensor", c.name, r.max_rel_err, RELATIVE_BOUND, r.worst),
            Err(e) => failed("tensor", c.name, e),
        })
        .collect();

    // Custom operations of the state-space layer.
    let (bs, l, di, n) = (2, 6, 3, 4);
    let mut r = rng(21);
    let mut s = ParamStore::new();
    let add = |s: &mut ParamStore<f64>, name: &str, shape: &[usize], data: Vec<f64>| {
        s.add(name, Tensor::from_f64(shape, &data).expect("valid shape"))
    };
    let ids = [
        add(&mut s, "u", &[bs, l, di], uniform(bs * l * di, 22)),
        add(
            &mut s,
            "delta",
            &[bs, l, di],
            (0..bs * l * di).map(|_| r.random_range(0.1..1.0)).collect(),
        ),
        add(
            &mut s,
            "a",
            &[di, n],
            (0..di * n).map(|_| -r.random_range(0.1..2.0)).collect(),
        ),
        add(&mut s, "b", &[bs, l, n], uniform(bs * l * n, 23)),
        add(&mut s, "c", &[bs, l, n], uniform(bs * l * n, 24)),
        add(&mut s, "d", &[di], uniform(di, 25)),
    ];
    out.push(composite("ssm", "selective_scan", &mut s, |t, s| {
        let v: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
        let y = selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5])?;
        probe(t, y, 26)
    }));

    let mut s = ParamStore::new();
    let x = add(&mut s, "x", &[2, 7, 3], uniform(42, 27));
    let w = add(&mut s, "w", &[3, 4], uniform(12, 28));
    let b = add(&mut s, "b", &[3], uniform(3, 29));
    out.push(composite("ssm", "causal_depthwise_conv", &mut s, |t, s| {
        let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = causal_depthwise_conv(t, xv, wv, bv)?;
        probe(t, y, 30)
    }));

    let mut s = ParamStore::new();
    let m = Mamba::new(&mut s, "m", small_mamba(), &mut rng(31));
    let xin = uniform(2 * 5 * 4, 32);
    out.push(composite("ssm", "mamba", &mut s, |t, s| {
        let v = t.constant_f64(&[2, 5, 4], &xin)?;
        let y = m.forward(t, s, v)?;
        probe(t, y, 33)
    }));

    let mut s = ParamStore::new();
    let m = BiMamba::new(&mut s, "bi", small_mamba(), &mut rng(34));
    out.push(composite("ssm", "bidirectional_mamba", &mut s, |t, s| {
        let v = t.constant_f64(&[2, 5, 4], &xin)?;
        let y = m.forward(t, s, v)?;
        probe(t, y, 35)
    }));

    let mut s = ParamStore::new();
    let m = TfMamba::new(&mut s, "tf", small_mamba(), &mut rng(36));
    let grid = uniform(4 * 3 * 4, 37);
    out.push(composite("ssm", "tf_mamba", &mut s, |t, s| {
        let v = t.constant_f64(&[1, 4, 3, 4], &grid)?;
        let y = m.forward(t, s, v)?;
        probe(t, y, 38)
    }));

    // Stage-2 blocks.
    let mut s = ParamStore::new();
    let enc = DenseEncoder::new(&mut s, "enc", 2, &mut rng(41));
    let xin = uniform(2 * 3 * 7, 42);
    out.push(composite("se", "dense_encoder", &mut s, |t, s| {
        let v = t.constant_f64(&[1, 2, 3, 7], &xin)?;
        let y = enc.forward(t, s, v)?;
        probe(t, y, 43)
    }));

    let mut s = ParamStore::new();
    let fuse = CrossFuse::new(&mut s, "fuse", 2, &mut rng(44));
    let (ac, aux) = (uniform(24, 45), uniform(24, 46));
    out.push(composite("se", "cross_fuse", &mut s, |t, s| {
        let a = t.constant_f64(&[1, 2, 3, 4], &ac)?;
        let e = t.constant_f64(&[1, 2, 3, 4], &aux)?;
        let y = fuse.forward(t, s, a, e)?;
        probe(t, y, 47)
    }));

    for (name, outc, bins) in [("magnitude_decoder", 1, 9), ("complex_decoder", 2, 10)] {
        let mut s = ParamStore::new();
        let dec = Decoder::new(&mut s, "dec", 2, outc, bins, &mut rng(48));
        let fr = (bins - 1) / 2 + 1;
        let xin = uniform(2 * 3 * fr, 49);
        out.push(composite("se", name, &mut s, |t, s| {
            let v = t.constant_f64(&[1, 2, 3, fr], &xin)?;
            let y = dec.forward(t, s, v)?;
            probe(t, y, 50)
        }));
    }

    let (tf, ff, len) = (3, 4, 10);
    let mut s = ParamStore::new();
    let spectral = |seed: u64| -> (Vec<f64>, Vec<f64>) {
        let mut r = rng(seed);
        let m = (0..tf * ff).map(|_| r.random_range(0.1..1.0)).collect();
        let p = (0..tf * ff).map(|_| r.random_range(-3.0..3.0)).collect();
        (m, p)
    };
    let (em, ep) = spectral(51);
    let (cm, cp) = spectral(52);
    let cw = uniform(len, 53);
    let wave = add(&mut s, "wave", &[1, len], uniform(len, 54));
    let mag = add(&mut s, "mag", &[1, tf, ff], em);
    let phase = add(&mut s, "phase", &[1, tf, ff], ep);
    out.push(composite("se", "stage2_loss", &mut s, |t, s| {
        let est = SpeechTensors {
            wave: t.param(s, wave),
            mag: t.param(s, mag),
            phase: t.param(s, phase),
        };
        let clean = SpeechTensors {
            wave: t.constant_f64(&[1, len], &cw)?,
            mag: t.constant_f64(&[1, tf, ff], &cm)?,
            phase: t.constant_f64(&[1, tf, ff], &cp)?,
        };
        Ok(stage2_loss(t, est, clean, &LossWeights::default())
            .map_err(contract)?
            .total)
    }));
    out.push(composite("se", "phase_loss", &mut s, |t, s| {
        let e = t.param(s, phase);
        let c = t.constant_f64(&[1, tf, ff], &cp)?;
        phase_loss(t, e, c).map_err(contract)
    }));

    // Stage-1 blocks.
    let cfg = small_emg();
    let mut s = ParamStore::new();
    let enc = EmgEncoder::new(&cfg, &mut s, &mut rng(61));
    let emg = uniform(60 * EMG_CHANNELS, 62)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let emg = EmgRecording::new(emg).expect("whole frames");
    let target = uniform(3 * 4, 63);
    out.push(composite("emg", "encoder_with_losses", &mut s, |t, s| {
        let x = emg_batch(t, &[&emg]).map_err(contract)?;
        let o = enc.forward(t, s, x)?;
        let tv = t.constant_f64(&[1, 3, 4], &target)?;
        let su = loss_su(t, o.units, tv).map_err(contract)?;
        let p = loss_phoneme(t, o.logits, &[0, 4, 2]).map_err(contract)?;
        loss_total(t, su, p, &Stage1Weights::default()).map_err(contract)
    }));

    let mut s = ParamStore::new();
    let layer = EncoderLayer::new(&mut s, "layer", &cfg, &mut rng(64));
    let xin = uniform(2 * 4 * 8, 65);
    out.push(composite("emg", "attention_layer", &mut s, |t, s| {
        let v = t.constant_f64(&[2, 4, 8], &xin)?;
        let y = layer.forward(t, s, v)?;
        probe(t, y, 66)
    }));

    let mut s = ParamStore::new();
    let dec = AcousticDecoder::new(&cfg, &mut s, &mut rng(67));
    let units = uniform(16, 68);
    let mel: Vec<f64> = uniform(24, 69)
        .iter()
        .map(|v| MEL_OFFSET + 3.0 * v)
        .collect();
    for teacher in [true, false] {
        let name = if teacher {
            "decoder_teacher_forced"
        } else {
            "decoder_autoregressive"
        };
        out.push(composite("emg", name, &mut s, |t, s| {
            let u = t.constant_f64(&[1, 4, 4], &units)?;
            let m = t.constant_f64(&[1, 4, 6], &mel)?;
            let mode = if teacher {
                DecodeMode::TeacherForced(m)
            } else {
                DecodeMode::Autoregressive
            };
            let y = dec.forward(t, s, u, mode)?;
            let y = t.scale(y, 0.1);
            probe(t, y, 70)
        }));
    }
    out
}

/// Plain sequential recurrence over `[B, L, D]` inputs, one channel at a time.
#[allow(clippy::too_many_arguments)]
fn sequential_scan(
    (bs, l, di, n): (usize, usize, usize, usize),
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; bs * l * di];
    for bi in 0..bs {
        for ch in 0..di {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let row = bi * l + t;
                let (dt, ut) = (delta[row * di + ch], u[row * di + ch]);
                let mut y = d[ch] * ut;
                for j in 0..n {
                    h[j] = (dt * a[ch * n + j]).exp() * h[j] + dt * b[row * n + j] * ut;
                    y += c[row * n + j] * h[j];
                }
                out[row * di + ch] = y;
            }
        }
    }
    out
}

/// Compares the tape scan against the sequential recurrence on `configs`
/// random shapes with sequence lengths up to 64.
pub fn scan_oracle(configs: usize, seed: u64) -> CheckResult {
    let name = format!("selective_scan_vs_recurrence_{configs}_configs");
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut at = String::new();
    for _ in 0..configs {
        let dims = (
            r.random_range(1..3),
            r.random_range(1..=64),
            r.random_range(1..6),
            r.random_range(1..9),
        );
        let (bs, l, di, n) = dims;
        let mut draw = |k: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..k).map(|_| r.random_range(lo..hi)).collect()
        };
        let u = draw(bs * l * di, -1.0, 1.0);
        let delta = draw(bs * l * di, 1e-3, 2.0);
        let a: Vec<f64> = draw(di * n, 0.01, 5.0).into_iter().map(|v| -v).collect();
        let b = draw(bs * l * n, -1.0, 1.0);
        let c = draw(bs * l * n, -1.0, 1.0);
        let d = draw(di, -1.0, 1.0);
        let run = || -> crate::tensor::Result<Vec<f64>> {
            let mut t = Tape::<f64>::new();
            let vu = t.constant_f64(&[bs, l, di], &u)?;
            let vd = t.constant_f64(&[bs, l, di], &delta)?;
            let va = t.constant_f64(&[di, n], &a)?;
            let vb = t.constant_f64(&[bs, l, n], &b)?;
            let vc = t.constant_f64(&[bs, l, n], &c)?;
            let vdd = t.constant_f64(&[di], &d)?;
            let y = selective_scan(&mut t, vu, vd, va, vb, vc, vdd)?;
            Ok(t.value(y).to_vec())
        };
        let fast = match run() {
            Ok(v) => v,
            Err(e) => return failed("ssm", name, e),
        };
        let slow = sequential_scan(dims, &u, &delta, &a, &b, &c, &d);
        for (x, y) in fast.iter().zip(&slow) {
            let err = (x - y).abs() / y.abs().max(1.0);
            if err > worst {
                worst = err;
                at = format!("at {dims:?}");
            }
        }
    }
    below("ssm", name, worst, 1e-10, at)
}

/// Relative L2 error of STFT followed by inverse STFT on random 1 s signals.
pub fn stft_round_trip(signals: usize, seed: u64) -> CheckResult {
    let name = format!("stft_round_trip_{signals}_signals");
    let cfg = StftConfig::default();
    let mut worst = 0.0f64;
    for k in 0..signals {
        let x = uniform(16_000, seed.wrapping_mul(1000) + k as u64);
        let result = Waveform::audio(x.clone())
            .and_then(|w| stft(&w, &cfg))
            .and_then(|s| istft(&s, &cfg, x.len()));
        let y = match result {
            Ok(y) => y,
            Err(e) => return failed("dsp", name, e),
        };
        let num: f64 = x
            .iter()
            .zip(y.samples())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let den: f64 = x.iter().map(|a| a * a).sum();
        worst = worst.max((num / den).sqrt());
    }
    below("dsp", name, worst, 1e-6, String::new())
}

/// Exact loss identities of both stages.
pub fn loss_identities() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (frames, dim) = (7, 5);
    let a = uniform(frames * dim, 81);
    let b = uniform(frames * dim, 82);
    let unit = |x: &[f64], y: &[f64]| -> crate::emg::Result<f64> {
        let mut t = Tape::<f64>::new();
        let xv = t.constant_f64(&[1, frames, dim], x)?;
        let yv = t.constant_f64(&[1, frames, dim], y)?;
        let l = loss_su(&mut t, xv, yv)?;
        Ok(t.item(l))
    };
    match unit(&a, &a) {
        Ok(v) => out.push(below(
            "emg",
            "unit_loss_identical_is_zero",
            v.abs(),
            1e-300,
            String::new(),
        )),
        Err(e) => out.push(failed("emg", "unit_loss_identical_is_zero", e)),
    }
    let oracle = a
        .chunks(dim)
        .zip(b.chunks(dim))
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / frames as f64;
    match unit(&a, &b) {
        Ok(v) => out.push(below(
            "emg",
            "unit_loss_matches_frame_norms",
            (v - oracle).abs(),
            1e-12,
            String::new(),
        )),
        Err(e) => out.push(failed("emg", "unit_loss_matches_frame_norms", e)),
    }

    let classes = 16;
    let uniform_ce = || -> crate::emg::Result<f64> {
        let mut t = Tape::<f64>::new();
        let logits = t.constant_f64(&[1, 3, classes], &[0.75; 3 * 16])?;
        let l = loss_phoneme(&mut t, logits, &[0, 7, 15])?;
        Ok(t.item(l))
    };
    match uniform_ce() {
        Ok(v) => out.push(below(
            "emg",
            "phoneme_loss_uniform_is_log_classes",
            (v - (classes as f64).ln()).abs(),
            1e-10,
            String::new(),
        )),
        Err(e) => out.push(failed("emg", "phoneme_loss_uniform_is_log_classes", e)),
    }

    // 0.5·1.5 + 0.5·2.25 = 1.875, exact in binary floating point.
    let total = || -> crate::emg::Result<f64> {
        let mut t = Tape::<f64>::new();
        let su = t.constant_f64(&[1], &[1.5])?;
        let p = t.constant_f64(&[1], &[2.25])?;
        let l = loss_total(
            &mut t,
            su,
            p,
            &Stage1Weights {
                su: 0.5,
                phoneme: 0.5,
            },
        )?;
        Ok(t.item(l))
    };
    match total() {
        Ok(v) => out.push(CheckResult {
            module: "emg",
            name: "total_loss_hand_arithmetic".into(),
            tolerance: "== 1.875".into(),
            value: v,
            pass: v == 1.875,
            detail: String::new(),
        }),
        Err(e) => out.push(failed("emg", "total_loss_hand_arithmetic", e)),
    }

    let composite = || -> Result<f64, crate::se::SeError> {
        let (tf, ff) = (4, 5);
        let w = uniform(64, 91);
        let m: Vec<f64> = uniform(tf * ff, 92).iter().map(|v| v.abs() + 0.1).collect();
        let p: Vec<f64> = uniform(tf * ff, 93).iter().map(|v| 3.0 * v).collect();
        let mut t = Tape::<f64>::new();
        let speech = |t: &mut Tape<f64>| -> crate::tensor::Result<SpeechTensors> {
            Ok(SpeechTensors {
                wave: t.constant_f64(&[1, 64], &w)?,
                mag: t.constant_f64(&[1, tf, ff], &m)?,
                phase: t.constant_f64(&[1, tf, ff], &p)?,
            })
        };
        let (e, c) = (speech(&mut t)?, speech(&mut t)?);
        let parts = stage2_loss(&mut t, e, c, &LossWeights::default())?;
        Ok(t.item(parts.total))
    };
    match composite() {
        Ok(v) => out.push(CheckResult {
            module: "se",
            name: "composite_loss_identical_is_zero".into(),
            tolerance: "== 0".into(),
            value: v,
            pass: v == 0.0,
            detail: String::new(),
        }),
        Err(e) => out.push(failed("se", "composite_loss_identical_is_zero", e)),
    }
    out
}

/// SNR grid used by every corpus condition.
pub const SNR_GRID: [f64; 9] = [-11.0, -10.0, -6.0, -5.0, -1.0, 0.0, 4.0, 5.0, 10.0];

/// Mixes `triples` random (utterance, noise, SNR) combinations and reports
/// the largest deviation of the measured SNR from the request, in dB.
pub fn snr_exactness(triples: usize, seed: u64) -> CheckResult {
    let name = format!("mix_at_snr_{triples}_triples");
    let mut r = rng(seed);
    let clean: Vec<Waveform> = match (0..8)
        .map(|k| synth_utterance(seed * 100 + k, 0.5).map(|u| u.clean))
        .collect::<Result<_, _>>()
    {
        Ok(c) => c,
        Err(e) => return failed("corpus", name, e),
    };
    let kinds = NoiseKind::ALL;
    let mut worst = 0.0f64;
    let mut at = String::new();
    for _ in 0..triples {
        let c = &clean[r.random_range(0..clean.len())];
        let kind = kinds[r.random_range(0..kinds.len())];
        let snr = SNR_GRID[r.random_range(0..SNR_GRID.len())];
        let nseed = r.random::<u64>();
        let measured = synth_noise(kind, nseed, c.len())
            .and_then(|n| mix_at_snr(c, &n, snr))
            .map_err(|e| e.to_string())
            .and_then(|(noisy, _)| measured_snr_db(c, &noisy).map_err(|e| e.to_string()));
        match measured {
            Ok(m) => {
                let err = (m - snr).abs();
                if err > worst {
                    worst = err;
                    at = format!("{kind:?} at {snr} dB");
                }
            }
            Err(e) => return failed("corpus", name, e),
        }
    }
    below("corpus", name, worst, 0.01, at)
}

/// STOI of clean speech against itself, and strict growth with SNR for
/// white and pink noise over `seeds` utterances.
pub fn stoi_properties(seeds: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut self_min = f64::INFINITY;
    let mut violations = 0usize;
    let mut smallest_step = f64::INFINITY;
    for seed in 0..seeds {
        let u = match synth_utterance(500 + seed, 1.5) {
            Ok(u) => u,
            Err(e) => return vec![failed("metrics", "stoi_properties", e)],
        };
        match stoi(&u.clean, &u.clean) {
            Ok(v) => self_min = self_min.min(v),
            Err(e) => return vec![failed("metrics", "stoi_self_score", e)],
        }
        for kind in [NoiseKind::White, NoiseKind::Pink] {
            let scores: Result<Vec<f64>, String> = [-10.0, -5.0, 0.0, 5.0]
                .iter()
                .map(|&snr| {
                    let n =
                        synth_noise(kind, 700 + seed, u.clean.len()).map_err(|e| e.to_string())?;
                    let (noisy, _) = mix_at_snr(&u.clean, &n, snr).map_err(|e| e.to_string())?;
                    stoi(&u.clean, &noisy).map_err(|e| e.to_string())
                })
                .collect();
            match scores {
                Ok(s) => {
                    for w in s.windows(2) {
                        smallest_step = smallest_step.min(w[1] - w[0]);
                        if w[1] <= w[0] {
                            violations += 1;
                        }
                    }
                }
                Err(e) => return vec![failed("metrics", "stoi_monotonic_in_snr", e)],
            }
        }
    }
    out.push(CheckResult {
        module: "metrics",
        name: "stoi_self_score".into(),
        tolerance: ">= 0.999".into(),
        value: self_min,
        pass: self_min >= 0.999,
        detail: String::new(),
    });
    out.push(CheckResult {
        module: "metrics",
        name: format!("stoi_monotonic_in_snr_{seeds}_seeds"),
        tolerance: "every step > 0".into(),
        value: smallest_step,
        pass: violations == 0,
        detail: format!("{violations} violations"),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let results = run_all(SelfCheckOptions::default());
        let failed: Vec<String> = results
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.to_string())
            .collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(results.len() > 30);
    }

    #[test]
    fn injected_fault_is_caught() {
        let results = gradient_checks(true);
        let sig: Vec<_> = results
            .iter()
            .filter(|r| r.name.contains("sigmoid"))
            .collect();
        assert!(!sig.is_empty());
        assert!(sig.iter().all(|r| !r.pass));
        // The hook is cleared afterwards.
        assert!(gradient_checks(false).iter().all(|r| r.pass));
    }

    #[test]
    fn sequential_oracle_agrees_on_one_config() {
        let r = scan_oracle(3, 99);
        assert!(r.pass, "{r}");
    }
}
