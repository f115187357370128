use super::scan::{causal_depthwise_conv, selective_scan};
use crate::nn::{self, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, Tensor, TensorError, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
}

impl MambaDims {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            expand: 2,
            d_state: 16,
            conv_width: 4,
            dt_rank: d_model.div_ceil(16),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Scalar count of one uni-directional block.
    pub fn param_count(&self) -> usize {
        let (d, di, n, r, k) = (
            self.d_model,
            self.d_inner(),
            self.d_state,
            self.dt_rank,
            self.conv_width,
        );
        d * 2 * di + di * k + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d
    }
}

/// One uni-directional selective state-space block.
#[derive(Clone, Debug)]
pub struct Mamba {
    pub dims: MambaDims,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: Linear,
}

impl Mamba {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: MambaDims,
        rng: &mut impl Rng,
    ) -> Self {
        let (d, di, n, r, k) = (
            dims.d_model,
            dims.d_inner(),
            dims.d_state,
            dims.dt_rank,
            dims.conv_width,
        );
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, 2 * di, false, rng);
        let conv_w = store.add(
            format!("{name}.conv.w"),
            nn::uniform(&[di, k], 1.0 / (k as f64).sqrt(), rng),
        );
        let conv_b = store.add(format!("{name}.conv.b"), nn::zeros(&[di]));
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), di, r + 2 * n, false, rng);
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), r, di, true, rng);
        // Δ initialised log-uniformly in [1e-3, 1e-1] through the inverse softplus.
        let bias: Vec<f64> = (0..di)
            .map(|_| {
                let dt = (rng.random_range(0.0..1.0) * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln())
                    .exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        *store.get_mut(dt_proj.b.expect("dt_proj has a bias")) = Tensor::from_f64(&[di], &bias)
            .expect("bias length")
            .with_grad();
        let a_init: Vec<f64> = (0..di)
            .flat_map(|_| (1..=n).map(|j| (j as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{name}.A_log"),
            Tensor::from_f64(&[di, n], &a_init)
                .expect("A length")
                .with_grad(),
        );
        let dskip = store.add(format!("{name}.D"), nn::filled(&[di], 1.0));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, d, false, rng);
        Self {
            dims,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            d: dskip,
            out_proj,
        }
    }

    /// `x: [B, L, d_model]` → same shape, residual included.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dims.d_model {
            return Err(TensorError::Shape {
                op: "mamba",
                detail: format!("expected [B, L, {}], got {s:?}", self.dims.d_model),
            });
        }
        let y = self.mix(tape, store, x)?;
        tape.add(x, y)
    }

    /// The block without its residual connection.
    pub fn mix<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (di, n, r) = (self.dims.d_inner(), self.dims.d_state, self.dims.dt_rank);
        let xz = self.in_proj.forward(tape, store, x)?;
        let xi = tape.narrow(xz, 2, 0, di)?;
        let z = tape.narrow(xz, 2, di, di)?;
        let (cw, cb) = (
            tape.param(store, self.conv_w),
            tape.param(store, self.conv_b),
        );
        let xc = causal_depthwise_conv(tape, xi, cw, cb)?;
        let u = tape.silu(xc);
        let proj = self.x_proj.forward(tape, store, u)?;
        let dt_in = tape.narrow(proj, 2, 0, r)?;
        let bm = tape.narrow(proj, 2, r, n)?;
        let cm = tape.narrow(proj, 2, r + n, n)?;
        let dt = self.dt_proj.forward(tape, store, dt_in)?;
        let delta = tape.softplus(dt)?;
        let a_log = tape.param(store, self.a_log);
        let a_pos = tape.exp(a_log);
        let a = tape.neg(a_pos);
        let dskip = tape.param(store, self.d);
        let y = selective_scan(tape, u, delta, a, bm, cm, dskip)?;
        let gate = tape.silu(z);
        let g = tape.mul(y, gate)?;
        self.out_proj.forward(tape, store, g)
    }
}

/// `Conv1D_{k=1}(M_fwd(x) ⊕ flip(M_bwd(flip(x))))` with the merge written
/// out so either branch can be replaced.
pub fn bidirectional<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    fwd: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    bwd: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    merge_w: Var,
    merge_b: Var,
) -> Result<Var> {
    let yf = fwd(tape, x)?;
    let xr = tape.flip(x, 1)?;
    let yr = bwd(tape, xr)?;
    let yb = tape.flip(yr, 1)?;
    let cat = tape.concat(&[yf, yb], 2)?;
    let m = tape.matmul(cat, merge_w)?;
    tape.add(m, merge_b)
}

/// Forward and backward Mamba branches merged by a width-1 convolution.
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub fwd: Mamba,
    pub bwd: Mamba,
    /// Width-1 Conv1D from `2·d_model` to `d_model` channels, stored `[2d, d]`.
    pub merge: Linear,
}

impl BiMamba {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: MambaDims,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fwd: Mamba::new(store, &format!("{name}.fwd"), dims, rng),
            bwd: Mamba::new(store, &format!("{name}.bwd"), dims, rng),
            merge: Linear::new(
                store,
                &format!("{name}.merge"),
                2 * dims.d_model,
                dims.d_model,
                true,
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
        let w = tape.param(store, self.merge.w);
        let b = tape.param(store, self.merge.b.expect("merge has a bias"));
        bidirectional(
            tape,
            x,
            |t, v| nn::scoped(t, |t| self.fwd.forward(t, store, v)),
            |t, v| nn::scoped(t, |t| self.bwd.forward(t, store, v)),
            w,
            b,
        )
    }

    pub fn param_count(dims: &MambaDims) -> usize {
        2 * dims.param_count() + 2 * dims.d_model * dims.d_model + dims.d_model
    }
}

/// Time pass then frequency pass over a `[B, C, T, F]` feature grid, each
/// a normalised bidirectional Mamba with a residual connection.
#[derive(Clone, Debug)]
pub struct TfMamba {
    pub time_norm: LayerNorm,
    pub time: BiMamba,
    pub freq_norm: LayerNorm,
    pub freq: BiMamba,
}

impl TfMamba {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: MambaDims,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            time_norm: LayerNorm::new(store, &format!("{name}.time_norm"), dims.d_model),
            time: BiMamba::new(store, &format!("{name}.time"), dims, rng),
            freq_norm: LayerNorm::new(store, &format!("{name}.freq_norm"), dims.d_model),
            freq: BiMamba::new(store, &format!("{name}.freq"), dims, rng),
        }
    }

    pub fn param_count(dims: &MambaDims) -> usize {
        2 * BiMamba::param_count(dims) + 4 * dims.d_model
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        self.forward_passes(tape, store, x, true, true)
    }

    /// Runs the selected passes; a disabled pass is the identity.
    pub fn forward_passes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        time: bool,
        freq: bool,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.time.fwd.dims.d_model {
            return Err(TensorError::Shape {
                op: "tf_mamba",
                detail: format!(
                    "expected [B, {}, T, F], got {s:?}",
                    self.time.fwd.dims.d_model
                ),
            });
        }
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        // [B, C, T, F] → [B, F, T, C] → sequences over T.
        let mut h = tape.permute(x, &[0, 3, 2, 1])?;
        if time {
            let seq = tape.reshape(h, &[b * f, t, c])?;
            let out = nn::scoped(tape, |t| {
                self.pass(t, store, seq, &self.time_norm, &self.time)
            })?;
            h = tape.reshape(out, &[b, f, t, c])?;
        }
        // → [B, T, F, C] → sequences over F.
        let mut h = tape.permute(h, &[0, 2, 1, 3])?;
        if freq {
            let seq = tape.reshape(h, &[b * t, f, c])?;
            let out = nn::scoped(tape, |t| {
                self.pass(t, store, seq, &self.freq_norm, &self.freq)
            })?;
            h = tape.reshape(out, &[b, t, f, c])?;
        }
        tape.permute(h, &[0, 3, 1, 2])
    }

    fn pass<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: Var,
        norm: &LayerNorm,
        block: &BiMamba,
    ) -> Result<Var> {
        let n = norm.forward(tape, store, seq)?;
        let y = block.forward(tape, store, n)?;
        tape.add(seq, y)
    }
}
