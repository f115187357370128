use super::config::{SeConfig, DENSE_DILATIONS, MASK_BETA};
use crate::nn::{self, Conv2d, ConvTranspose2d, Linear};
use crate::ssm::TfMamba;
use crate::tensor::{Conv2dGeom, ParamStore, Result, Scalar, Tape, TensorError, Var};
use rand::Rng;

/// Four dilated 3×3 convolutions, each fed the concatenation of the block
/// input and all earlier outputs. Returns the last layer's output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<Conv2d>,
}

impl DenseBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = DENSE_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let geom = Conv2dGeom {
                    stride: (1, 1),
                    dilation: (d, 1),
                    padding: (d, 1),
                };
                Conv2d::new(
                    store,
                    &format!("{name}.{i}"),
                    c * (i + 1),
                    c,
                    (3, 3),
                    geom,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut skip = x;
        let mut out = x;
        for layer in &self.layers {
            let y = layer.forward(tape, store, skip)?;
            out = tape.silu(y);
            skip = tape.concat(&[out, skip], 1)?;
        }
        Ok(out)
    }
}

/// Entry 1×1 conv (2 → C), dense block, stride-2 frequency exit conv.
#[derive(Clone, Debug)]
pub struct DenseEncoder {
    pub entry: Conv2d,
    pub dense: DenseBlock,
    pub exit: Conv2d,
}

impl DenseEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let exit_geom = Conv2dGeom {
            stride: (1, 2),
            dilation: (1, 1),
            padding: (0, 1),
        };
        Self {
            entry: Conv2d::new(
                store,
                &format!("{name}.entry"),
                2,
                c,
                (1, 1),
                Conv2dGeom::unit(),
                rng,
            ),
            dense: DenseBlock::new(store, &format!("{name}.dense"), c, rng),
            exit: Conv2d::new(store, &format!("{name}.exit"), c, c, (1, 3), exit_geom, rng),
        }
    }

    /// `[B, 2, T, F]` → `[B, C, T, (F−1)/2 + 1]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 2 {
            return Err(TensorError::Shape {
                op: "dense_encoder",
                detail: format!("expected [B, 2, T, F], got {s:?}"),
            });
        }
        let h = self.entry.forward(tape, store, x)?;
        let h = tape.silu(h);
        let h = self.dense.forward(tape, store, h)?;
        let h = self.exit.forward(tape, store, h)?;
        Ok(tape.silu(h))
    }
}

/// Per-position two-layer fusion of the acoustic and auxiliary features.
#[derive(Clone, Debug)]
pub struct CrossFuse {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CrossFuse {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), 2 * c, 2 * c, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * c, c, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ac: Var,
        aux: Var,
    ) -> Result<Var> {
        self.forward_with(tape, store, ac, aux, true)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ac: Var,
        aux: Var,
        residual: bool,
    ) -> Result<Var> {
        if tape.shape(ac) != tape.shape(aux) {
            return Err(TensorError::Shape {
                op: "cross_fuse",
                detail: format!("{:?} vs {:?}", tape.shape(ac), tape.shape(aux)),
            });
        }
        let cat = tape.concat(&[ac, aux], 1)?;
        let h = tape.permute(cat, &[0, 2, 3, 1])?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, store, h)?;
        let y = tape.permute(h, &[0, 3, 1, 2])?;
        if residual {
            tape.add(y, ac)
        } else {
            Ok(y)
        }
    }
}

/// Initial scale of the complex head's output weights relative to the
/// default initialisation.
pub const PHASE_INIT_SCALE: f64 = 0.1;

/// Dense block, transposed-conv frequency upsampling and a 1×1 projection.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub dense: DenseBlock,
    pub up: ConvTranspose2d,
    pub out: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        out_channels: usize,
        bins: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let geom = Conv2dGeom {
            stride: (1, 2),
            dilation: (1, 1),
            padding: (0, 1),
        };
        // Odd bin counts come back exactly; even ones need one extra column.
        let output_padding = (0, 1 - bins % 2);
        Self {
            dense: DenseBlock::new(store, &format!("{name}.dense"), c, rng),
            up: ConvTranspose2d::new(
                store,
                &format!("{name}.up"),
                c,
                c,
                (1, 3),
                geom,
                output_padding,
                rng,
            ),
            out: Conv2d::new(
                store,
                &format!("{name}.out"),
                c,
                out_channels,
                (1, 1),
                Conv2dGeom::unit(),
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.dense.forward(tape, store, x)?;
        let h = self.up.forward(tape, store, h)?;
        let h = tape.silu(h);
        self.out.forward(tape, store, h)
    }
}

/// Compressed magnitude and phase planes `[B, T, F]` of one input signal.
#[derive(Clone, Copy, Debug)]
pub struct SpectralInput {
    pub mag: Var,
    pub phase: Var,
}

/// Tape handles of one network evaluation, all `[B, T, F]`.
#[derive(Clone, Copy, Debug)]
pub struct SeOutputs {
    pub mask: Var,
    /// Enhanced compressed magnitude `mask ⊙ |Y|^c`.
    pub mag: Var,
    pub phase: Var,
    /// Real and imaginary parts whose angle is the enhanced phase: the
    /// complex head output plus the noisy unit phasor.
    pub real: Var,
    pub imag: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Forces mask ≡ 1 and the noisy phase (debug identity path).
    pub pass_through: bool,
}

#[derive(Clone, Debug)]
pub struct SeNetwork {
    pub config: SeConfig,
    pub enc_ac: DenseEncoder,
    pub enc_aux: Option<DenseEncoder>,
    pub fuse: Option<CrossFuse>,
    pub blocks: Vec<TfMamba>,
    pub mask_dec: Decoder,
    pub complex_dec: Decoder,
}

impl SeNetwork {
    pub fn new<T: Scalar>(
        config: &SeConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let c = config.channels;
        let bins = config.stft.bins();
        let enc_ac = DenseEncoder::new(store, "enc_ac", c, rng);
        let (enc_aux, fuse) = if config.multimodal {
            (
                Some(DenseEncoder::new(store, "enc_emg", c, rng)),
                Some(CrossFuse::new(store, "cross", c, rng)),
            )
        } else {
            (None, None)
        };
        let dims = config.mamba_dims();
        let blocks = (0..config.num_tf_blocks)
            .map(|i| TfMamba::new(store, &format!("tf{i}"), dims, rng))
            .collect();
        let mask_dec = Decoder::new(store, "mask_dec", c, 1, bins, rng);
        let complex_dec = Decoder::new(store, "complex_dec", c, 2, bins, rng);
        // The complex head starts as a small correction to the noisy phasor.
        for v in store.get_mut(complex_dec.out.w).data_mut() {
            *v *= T::of(PHASE_INIT_SCALE);
        }
        store.get_mut(complex_dec.out.b).data_mut().fill(T::zero());
        Self {
            config: config.clone(),
            enc_ac,
            enc_aux,
            fuse,
            blocks,
            mask_dec,
            complex_dec,
        }
    }

    fn stack<T: Scalar>(tape: &mut Tape<T>, s: SpectralInput) -> Result<Var> {
        let shape = tape.shape(s.mag).to_vec();
        if shape.len() != 3 || tape.shape(s.phase) != shape.as_slice() {
            return Err(TensorError::Shape {
                op: "se_input",
                detail: format!("magnitude {shape:?} / phase {:?}", tape.shape(s.phase)),
            });
        }
        let four = [shape[0], 1, shape[1], shape[2]];
        let m = tape.reshape(s.mag, &four)?;
        let p = tape.reshape(s.phase, &four)?;
        tape.concat(&[m, p], 1)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        noisy: SpectralInput,
        aux: Option<SpectralInput>,
    ) -> Result<SeOutputs> {
        self.forward_opts(tape, store, noisy, aux, ForwardOptions::default())
    }

    pub fn forward_opts<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        noisy: SpectralInput,
        aux: Option<SpectralInput>,
        opts: ForwardOptions,
    ) -> Result<SeOutputs> {
        let shape = tape.shape(noisy.mag).to_vec();
        let x = Self::stack(tape, noisy)?;
        let mut feat = nn::scoped(tape, |t| self.enc_ac.forward(t, store, x))?;
        if let (Some(enc), Some(fuse)) = (&self.enc_aux, &self.fuse) {
            let a = aux.ok_or_else(|| {
                TensorError::Contract("multimodal network needs the auxiliary input".into())
            })?;
            if tape.shape(a.mag) != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "se_input",
                    detail: format!("auxiliary {:?} vs noisy {shape:?}", tape.shape(a.mag)),
                });
            }
            let xa = Self::stack(tape, a)?;
            let fa = nn::scoped(tape, |t| enc.forward(t, store, xa))?;
            feat = fuse.forward(tape, store, feat, fa)?;
        }
        for block in &self.blocks {
            feat = nn::scoped(tape, |t| block.forward(t, store, feat))?;
        }
        let z = nn::scoped(tape, |t| self.mask_dec.forward(t, store, feat))?;
        let z = tape.reshape(z, &shape)?;
        let s = tape.sigmoid(z);
        let mut mask = tape.scale(s, MASK_BETA);
        let ri = nn::scoped(tape, |t| self.complex_dec.forward(t, store, feat))?;
        let r = tape.narrow(ri, 1, 0, 1)?;
        let real = tape.reshape(r, &shape)?;
        let i = tape.narrow(ri, 1, 1, 1)?;
        let imag = tape.reshape(i, &shape)?;
        // Residual on the unit phasor of the noisy phase.
        let cos_n = tape.cos(noisy.phase);
        let sin_n = tape.sin(noisy.phase);
        let real = tape.add(real, cos_n)?;
        let imag = tape.add(imag, sin_n)?;
        let mut phase = tape.atan2(imag, real)?;
        if opts.pass_through {
            mask = tape.constant(&shape, vec![T::one(); shape.iter().product()])?;
            phase = noisy.phase;
        }
        let mag = tape.mul(mask, noisy.mag)?;
        Ok(SeOutputs {
            mask,
            mag,
            phase,
            real,
            imag,
        })
    }

    /// Every parameter tensor name, for auditing.
    pub fn param_names<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
        store.iter().map(|(n, _)| n.to_string()).collect()
    }
}

/// Compressed magnitude and phase to the real/imaginary planes of the
/// uncompressed spectrum.
pub fn to_complex<T: Scalar>(
    tape: &mut Tape<T>,
    mag_c: Var,
    phase: Var,
    compression: f64,
) -> Result<(Var, Var)> {
    let mag = tape.powf(mag_c, 1.0 / compression)?;
    let c = tape.cos(phase);
    let s = tape.sin(phase);
    Ok((tape.mul(mag, c)?, tape.mul(mag, s)?))
}
