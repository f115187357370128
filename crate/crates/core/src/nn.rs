//! Parameterised layers shared by the Stage-1 and Stage-2 networks.

use crate::tensor::{Conv2dGeom, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};
use rand::Rng;

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data)
        .expect("length matches shape")
        .with_grad()
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_grad()
}

pub fn filled<T: Scalar>(shape: &[usize], v: f64) -> Tensor<T> {
    Tensor::full(shape, T::of(v)).with_grad()
}

/// `y = x·W + b` over the last axis, `W` stored as `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[d_in, d_out], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform(&[d_out], bound, rng)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), filled(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let n = tape.layer_norm(x, Self::EPS);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// 2-D convolution layer over `[B, Cin, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: Conv2dGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel.0 * kernel.1) as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.w"),
                uniform(&[cout, cin, kernel.0, kernel.1], bound, rng),
            ),
            b: store.add(format!("{name}.b"), uniform(&[cout], bound, rng)),
            geom,
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
        tape.conv2d(x, w, Some(b), self.geom)
    }
}

/// Transposed 2-D convolution, kernel `[Cin, Cout, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: Conv2dGeom,
    pub output_padding: (usize, usize),
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: Conv2dGeom,
        output_padding: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cout * kernel.0 * kernel.1) as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.w"),
                uniform(&[cin, cout, kernel.0, kernel.1], bound, rng),
            ),
            b: store.add(format!("{name}.b"), uniform(&[cout], bound, rng)),
            geom,
            output_padding,
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
        tape.conv_transpose2d(x, w, Some(b), self.geom, self.output_padding)
    }
}

/// Applies a `[.., C]`-last linear map to a `[B, C, H, W]` grid.
pub fn pointwise<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &Linear,
    x: Var,
) -> Result<Var> {
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    let y = layer.forward(tape, store, p)?;
    tape.permute(y, &[0, 3, 1, 2])
}

/// Runs `f`; when its result carries no gradient, the nodes it recorded
/// are released and only the result is kept on the tape.
pub fn scoped<T: Scalar>(
    tape: &mut Tape<T>,
    f: impl FnOnce(&mut Tape<T>) -> Result<Var>,
) -> Result<Var> {
    let mark = tape.mark();
    let y = f(tape)?;
    if y.index() < mark || tape.requires_grad(y) {
        return Ok(y);
    }
    Ok(tape.compact(y, mark).unwrap_or(y))
}
