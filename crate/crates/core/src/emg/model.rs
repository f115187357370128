use super::config::{EmgConfig, CONV_GEOMETRY};
use super::recording::EMG_CHANNELS;
use crate::nn::{uniform, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, Var};
use rand::Rng;

/// Fixed offset and scale between network outputs and log-mel values, so
/// the decoder works on roughly unit-range numbers.
pub const MEL_OFFSET: f64 = -10.0;
pub const MEL_SCALE: f64 = 5.0;

/// Scale applied to the unit head, matching the spread of projected
/// log-mel targets.
pub const UNIT_SCALE: f64 = 10.0;

/// 1-D convolution over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.w"),
                uniform(&[cout, cin, kernel], bound, rng),
            ),
            b: store.add(format!("{name}.b"), uniform(&[cout], bound, rng)),
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, Some(b), self.stride, 1, self.padding)
    }
}

/// Sinusoidal position table `[frames, d]`: sine on even, cosine on odd
/// columns.
pub fn position_encoding(frames: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d / 2 {
            let a = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + 2 * i] = a.sin();
            pe[t * d + 2 * i + 1] = a.cos();
        }
    }
    pe
}

/// Pre-norm transformer layer: self-attention then feed-forward, each
/// wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EmgConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ffn, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn, d, true, rng),
            heads: cfg.heads,
        }
    }

    /// Multi-head scaled dot-product self-attention over `[B, C, d]`.
    pub fn attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, c, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(tape, store, x)?;
        let split = |i: usize, tape: &mut Tape<T>| -> Result<Var> {
            let p = tape.narrow(qkv, 2, i * d, d)?;
            let p = tape.reshape(p, &[b, c, h, dh])?;
            let p = tape.permute(p, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * h, c, dh])
        };
        let q = split(0, tape)?;
        let k = split(1, tape)?;
        let v = split(2, tape)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores);
        let y = tape.bmm(att, v)?;
        let y = tape.reshape(y, &[b, h, c, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[b, c, d])?;
        self.out.forward(tape, store, y)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let n = self.norm1.forward(tape, store, x)?;
        let a = self.attention(tape, store, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm2.forward(tape, store, x)?;
        let f = self.ff1.forward(tape, store, n)?;
        let f = tape.silu(f);
        let f = self.ff2.forward(tape, store, f)?;
        tape.add(x, f)
    }
}

/// Encoder outputs for a batch: units `[B, C, d_unit]` and phoneme logits
/// `[B, C, |P|]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutputs {
    pub units: Var,
    pub logits: Var,
}

/// Strided convolutions from 1 kHz to 50 Hz followed by a transformer and
/// two linear heads.
#[derive(Clone, Debug)]
pub struct EmgEncoder {
    pub convs: Vec<Conv1d>,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub unit_head: Linear,
    pub phoneme_head: Linear,
    pub d_model: usize,
}

impl EmgEncoder {
    pub fn new<T: Scalar>(cfg: &EmgConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let mut cin = EMG_CHANNELS;
        let mut convs = Vec::new();
        for (i, (&cout, &(k, s, p))) in cfg.conv_channels.iter().zip(&CONV_GEOMETRY).enumerate() {
            convs.push(Conv1d::new(
                store,
                &format!("enc.conv{i}"),
                cin,
                cout,
                k,
                s,
                p,
                rng,
            ));
            cin = cout;
        }
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("enc.layer{i}"), cfg, rng))
            .collect();
        Self {
            convs,
            layers,
            norm: LayerNorm::new(store, "enc.norm", cfg.d_model),
            unit_head: Linear::new(store, "enc.units", cfg.d_model, cfg.d_unit, true, rng),
            phoneme_head: Linear::new(store, "enc.phonemes", cfg.d_model, cfg.phonemes, true, rng),
            d_model: cfg.d_model,
        }
    }

    /// Convolutional front end plus position encoding: `[B, T, 8]` EMG
    /// (frame-major, `T` a multiple of 20) to `[B, T/20, d]`.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        emg: Var,
    ) -> Result<Var> {
        let mut x = tape.permute(emg, &[0, 2, 1])?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, store, x)?;
            if i + 1 < self.convs.len() {
                x = tape.silu(x);
            }
        }
        let x = tape.permute(x, &[0, 2, 1])?;
        let frames = tape.shape(x)[1];
        let pe = tape.constant_f64(
            &[frames, self.d_model],
            &position_encoding(frames, self.d_model),
        )?;
        tape.add(x, pe)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        emg: Var,
    ) -> Result<EncoderOutputs> {
        let mut x = self.embed(tape, store, emg)?;
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        let units = self.unit_head.forward(tape, store, x)?;
        let units = tape.scale(units, UNIT_SCALE);
        let logits = self.phoneme_head.forward(tape, store, x)?;
        Ok(EncoderOutputs { units, logits })
    }
}

/// Pre-Net and a single LSTM layer mapping units to log-mel frames, fed
/// the previous mel frame at every step.
#[derive(Clone, Debug)]
pub struct AcousticDecoder {
    pub pre1: Linear,
    pub pre2: Linear,
    /// Input-to-gate maps for the Pre-Net features, the previous mel frame
    /// and the hidden state; gates ordered (input, forget, cell, output).
    pub gate_x: Linear,
    pub gate_mel: Linear,
    pub gate_h: Linear,
    pub proj: Linear,
    pub hidden: usize,
    pub n_mels: usize,
}

/// Whether the previous frame fed to the decoder is the target or the
/// decoder's own prediction.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode {
    TeacherForced(Var),
    Autoregressive,
}

struct LstmState {
    h: Option<Var>,
    c: Option<Var>,
}

impl AcousticDecoder {
    pub fn new<T: Scalar>(cfg: &EmgConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let h = cfg.lstm_hidden;
        Self {
            pre1: Linear::new(store, "dec.pre1", cfg.d_unit, cfg.prenet, true, rng),
            pre2: Linear::new(store, "dec.pre2", cfg.prenet, cfg.prenet, true, rng),
            gate_x: Linear::new(store, "dec.gate_x", cfg.prenet, 4 * h, true, rng),
            gate_mel: Linear::new(store, "dec.gate_mel", cfg.n_mels, 4 * h, false, rng),
            gate_h: Linear::new(store, "dec.gate_h", h, 4 * h, false, rng),
            proj: Linear::new(store, "dec.proj", h, cfg.n_mels, true, rng),
            hidden: h,
            n_mels: cfg.n_mels,
        }
    }

    fn normalise<T: Scalar>(tape: &mut Tape<T>, mel: Var) -> Var {
        let m = tape.shift(mel, -MEL_OFFSET);
        tape.scale(m, 1.0 / MEL_SCALE)
    }

    fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        gates: Var,
        state: &mut LstmState,
    ) -> Result<Var> {
        let hd = self.hidden;
        let gates = match state.h {
            Some(h) => {
                let r = self.gate_h.forward(tape, store, h)?;
                tape.add(gates, r)?
            }
            None => gates,
        };
        let i = tape.narrow(gates, 1, 0, hd)?;
        let f = tape.narrow(gates, 1, hd, hd)?;
        let g = tape.narrow(gates, 1, 2 * hd, hd)?;
        let o = tape.narrow(gates, 1, 3 * hd, hd)?;
        let (i, f, g, o) = (
            tape.sigmoid(i),
            tape.sigmoid(f),
            tape.tanh(g),
            tape.sigmoid(o),
        );
        let ig = tape.mul(i, g)?;
        let c = match state.c {
            Some(c) => {
                let fc = tape.mul(f, c)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        state.h = Some(h);
        state.c = Some(c);
        Ok(h)
    }

    fn to_mel<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let y = self.proj.forward(tape, store, h)?;
        let y = tape.scale(y, MEL_SCALE);
        Ok(tape.shift(y, MEL_OFFSET))
    }

    /// Units `[B, C, d_unit]` to log-mel `[B, C, n_mels]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        units: Var,
        mode: DecodeMode,
    ) -> Result<Var> {
        let s = tape.shape(units).to_vec();
        let (b, c) = (s[0], s[1]);
        let p = self.pre1.forward(tape, store, units)?;
        let p = tape.silu(p);
        let p = self.pre2.forward(tape, store, p)?;
        let p = tape.silu(p);
        let gx = self.gate_x.forward(tape, store, p)?;
        let mut state = LstmState { h: None, c: None };
        let four = 4 * self.hidden;
        let frame = |tape: &mut Tape<T>, v: Var, t: usize, width: usize| -> Result<Var> {
            let x = tape.narrow(v, 1, t, 1)?;
            tape.reshape(x, &[b, width])
        };
        match mode {
            DecodeMode::TeacherForced(target) => {
                // Previous-frame gate input for all steps at once; the first
                // step sees the all-zero normalised frame.
                let gm = if c > 1 {
                    let prev = tape.narrow(target, 1, 0, c - 1)?;
                    let prev = Self::normalise(tape, prev);
                    Some(self.gate_mel.forward(tape, store, prev)?)
                } else {
                    None
                };
                let mut hs = Vec::with_capacity(c);
                for t in 0..c {
                    let mut g = frame(tape, gx, t, four)?;
                    if t > 0 {
                        let m = frame(tape, gm.expect("c > 1"), t - 1, four)?;
                        g = tape.add(g, m)?;
                    }
                    let h = self.step(tape, store, g, &mut state)?;
                    hs.push(tape.reshape(h, &[b, 1, self.hidden])?);
                }
                let h = tape.concat(&hs, 1)?;
                self.to_mel(tape, store, h)
            }
            DecodeMode::Autoregressive => {
                let mut mels = Vec::with_capacity(c);
                let mut prev: Option<Var> = None;
                for t in 0..c {
                    let mut g = frame(tape, gx, t, four)?;
                    if let Some(p) = prev {
                        let pn = Self::normalise(tape, p);
                        let m = self.gate_mel.forward(tape, store, pn)?;
                        g = tape.add(g, m)?;
                    }
                    let h = self.step(tape, store, g, &mut state)?;
                    let mel = self.to_mel(tape, store, h)?;
                    mels.push(tape.reshape(mel, &[b, 1, self.n_mels])?);
                    prev = Some(mel);
                }
                tape.concat(&mels, 1)
            }
        }
    }
}
