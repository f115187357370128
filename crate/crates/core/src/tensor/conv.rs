//! im2col-based 2-D convolution kernels shared by the conv, transposed-conv
//! and 1-D conv tape primitives.

use super::scalar::gemm;
use super::Scalar;

/// Stride, dilation and zero padding along (height/time, width/frequency).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub fn unit() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    /// "Same" padding for odd kernels at stride 1.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        Self {
            stride: (1, 1),
            dilation,
            padding: (
                dilation.0 * (kernel.0 - 1) / 2,
                dilation.1 * (kernel.1 - 1) / 2,
            ),
        }
    }
}

pub(crate) fn out_extent(
    len: usize,
    k: usize,
    stride: usize,
    dil: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || dil == 0 || k == 0 {
        return None;
    }
    let eff = dil * (k - 1) + 1;
    if len + 2 * pad < eff {
        return None;
    }
    Some((len + 2 * pad - eff) / stride + 1)
}

/// Extents of a convolution from an input grid `[b, cin, h, w]` to an output
/// grid `[b, cout, oh, ow]` with kernel `[cout, cin, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self, g: &Conv2dGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == (1, 1) && g.padding == (0, 0)
    }
}

/// Output columns `ox` whose input column `ox·stride + offset − pad` lies in
/// `[0, w)`, as a half-open range.
fn valid_columns(ow: usize, w: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // ix = ox·stride + offset − pad
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if w + pad > offset {
        (w + pad - offset - 1) / stride + 1
    } else {
        0
    };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, g: &Conv2dGeom, col: &mut [T]) {
    let p = d.p();
    let sw = g.stride.1;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * p;
                let dst = &mut col[row..row + p];
                let off = kx * g.dilation.1;
                let (lo, hi) = valid_columns(d.ow, d.w, sw, off, g.padding.1);
                for oy in 0..d.oh {
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    let seg = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy as usize >= d.h {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * sw + off - g.padding.1;
                        if sw == 1 {
                            seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = src[start + j * sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &ConvDims, g: &Conv2dGeom, x: &mut [T]) {
    let p = d.p();
    let sw = g.stride.1;
    for ci in 0..d.cin {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((ci * d.kh + ky) * d.kw + kx) * p;
                let src = &col[row..row + p];
                let off = kx * g.dilation.1;
                let (lo, hi) = valid_columns(d.ow, d.w, sw, off, g.padding.1);
                if lo >= hi {
                    continue;
                }
                let start = lo * sw + off - g.padding.1;
                for oy in 0..d.oh {
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let seg = &src[oy * d.ow + lo..oy * d.ow + hi];
                    if sw == 1 {
                        dst[start..start + seg.len()]
                            .iter_mut()
                            .zip(seg)
                            .for_each(|(a, &v)| *a += v);
                    } else {
                        for (j, &v) in seg.iter().enumerate() {
                            dst[start + j * sw] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b]) + bias`.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &Conv2dGeom,
) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let mut y = vec![T::zero(); d.b * d.cout * p];
    let pointwise = d.is_pointwise(g);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for bi in 0..d.b {
        let xb = &x[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, d, g, &mut col);
            &col
        };
        let yb = &mut y[bi * d.cout * p..(bi + 1) * d.cout * p];
        gemm(
            d.cout,
            k,
            p,
            T::one(),
            w,
            (k, 1),
            src,
            (p, 1),
            T::zero(),
            yb,
            (p, 1),
        );
        if let Some(bias) = bias {
            for (co, row) in yb.chunks_mut(p).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Gradient w.r.t. the input grid given `dy` on the output grid.
pub(crate) fn grad_input<T: Scalar>(dy: &[T], w: &[T], d: &ConvDims, g: &Conv2dGeom) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let mut dx = vec![T::zero(); d.b * d.cin * d.h * d.w];
    let pointwise = d.is_pointwise(g);
    let mut dcol = vec![T::zero(); k * p];
    for bi in 0..d.b {
        let dyb = &dy[bi * d.cout * p..(bi + 1) * d.cout * p];
        let dxb = &mut dx[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        if pointwise {
            gemm(
                k,
                d.cout,
                p,
                T::one(),
                w,
                (1, k),
                dyb,
                (p, 1),
                T::zero(),
                dxb,
                (p, 1),
            );
        } else {
            gemm(
                k,
                d.cout,
                p,
                T::one(),
                w,
                (1, k),
                dyb,
                (p, 1),
                T::zero(),
                &mut dcol,
                (p, 1),
            );
            col2im(&dcol, d, g, dxb);
        }
    }
    dx
}

/// Gradient w.r.t. the kernel, summed over the batch.
pub(crate) fn grad_weight<T: Scalar>(x: &[T], dy: &[T], d: &ConvDims, g: &Conv2dGeom) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let mut dw = vec![T::zero(); d.cout * k];
    let pointwise = d.is_pointwise(g);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for bi in 0..d.b {
        let xb = &x[bi * d.cin * d.h * d.w..(bi + 1) * d.cin * d.h * d.w];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, d, g, &mut col);
            &col
        };
        let dyb = &dy[bi * d.cout * p..(bi + 1) * d.cout * p];
        gemm(
            d.cout,
            p,
            k,
            T::one(),
            dyb,
            (p, 1),
            src,
            (1, p),
            T::one(),
            &mut dw,
            (k, 1),
        );
    }
    dw
}

pub(crate) fn grad_bias<T: Scalar>(dy: &[T], cout: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for chunk in dy.chunks(cout * p) {
        for (co, row) in chunk.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    db
}
