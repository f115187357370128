//! Fused selective-scan and depthwise causal convolution primitives.

use crate::tensor::{CustomOp, Result, Scalar, Tape, TensorError, Var};

fn shape_error(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Sequence extents shared by the scan inputs.
#[derive(Clone, Copy, Debug)]
struct ScanDims {
    b: usize,
    l: usize,
    d: usize,
    n: usize,
}

#[derive(Debug)]
struct ScanOp<T> {
    dims: ScanDims,
    /// Hidden states `h_t` for every step, `[B, L, D, N]`.
    states: Vec<T>,
    /// Per-step decays `exp(Δ_t·A)`, same layout as `states`.
    decays: Vec<T>,
}

/// Runs the recurrence, returning `y` and (when kept) every hidden state
/// and decay factor.
fn scan_forward<T: Scalar>(
    keep_states: bool,
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    bm: &[T],
    cm: &[T],
    dskip: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ScanDims { b, l, d, n } = dims;
    let mut y = vec![T::zero(); b * l * d];
    let kept = if keep_states { b * l * d * n } else { 0 };
    let mut states = vec![T::zero(); kept];
    let mut decays = vec![T::zero(); kept];
    let mut abar = vec![T::zero(); n];
    let mut h = vec![T::zero(); d * n];
    for bi in 0..b {
        h.fill(T::zero());
        for t in 0..l {
            let row = (bi * l + t) * d;
            let bt = &bm[(bi * l + t) * n..(bi * l + t + 1) * n];
            let ct = &cm[(bi * l + t) * n..(bi * l + t + 1) * n];
            for c in 0..d {
                let (dt, ut) = (delta[row + c], u[row + c]);
                let du = dt * ut;
                let hc = &mut h[c * n..(c + 1) * n];
                let ac = &a[c * n..(c + 1) * n];
                let mut acc = T::zero();
                for j in 0..n {
                    abar[j] = (dt * ac[j]).exp();
                    let v = abar[j] * hc[j] + du * bt[j];
                    hc[j] = v;
                    acc += ct[j] * v;
                }
                y[row + c] = acc + dskip[c] * ut;
                if keep_states {
                    let at = ((bi * l + t) * d + c) * n;
                    decays[at..at + n].copy_from_slice(&abar);
                }
            }
            if keep_states {
                states[(bi * l + t) * d * n..(bi * l + t + 1) * d * n].copy_from_slice(&h);
            }
        }
    }
    (y, states, decays)
}

impl<T: Scalar> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&[T]],
        _output: &[T],
        gy: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let ScanDims { b, l, d, n } = self.dims;
        let (u, delta, a, bm, cm, dskip) = (
            inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5],
        );
        let mut du = vec![T::zero(); u.len()];
        let mut ddelta = vec![T::zero(); delta.len()];
        let mut da = vec![T::zero(); a.len()];
        let mut dbm = vec![T::zero(); bm.len()];
        let mut dcm = vec![T::zero(); cm.len()];
        let mut dd = vec![T::zero(); dskip.len()];
        let mut carry = vec![T::zero(); d * n];
        let zeros = vec![T::zero(); d * n];
        for bi in 0..b {
            carry.fill(T::zero());
            for t in (0..l).rev() {
                let row = (bi * l + t) * d;
                let nrow = (bi * l + t) * n;
                let h_t = &self.states[row * n..(row + d) * n];
                let h_prev: &[T] = if t == 0 {
                    &zeros
                } else {
                    &self.states[(row - d) * n..row * n]
                };
                let bt = &bm[nrow..nrow + n];
                let ct = &cm[nrow..nrow + n];
                for c in 0..d {
                    let g = gy[row + c];
                    let (dt, ut) = (delta[row + c], u[row + c]);
                    dd[c] += g * ut;
                    let mut du_acc = g * dskip[c];
                    let mut ddt = T::zero();
                    let ac = &a[c * n..(c + 1) * n];
                    for j in 0..n {
                        let k = c * n + j;
                        dcm[nrow + j] += g * h_t[k];
                        let dh = g * ct[j] + carry[k];
                        let abar = self.decays[row * n + k];
                        let decay = abar * h_prev[k];
                        du_acc += dh * dt * bt[j];
                        ddt += dh * (ac[j] * decay + bt[j] * ut);
                        da[k] += dh * dt * decay;
                        dbm[nrow + j] += dh * dt * ut;
                        carry[k] = dh * abar;
                    }
                    du[row + c] = du_acc;
                    ddelta[row + c] = ddt;
                }
            }
        }
        let grads = [du, ddelta, da, dbm, dcm, dd];
        grads
            .into_iter()
            .zip(needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }
}

/// Selective state-space scan over `u, Δ: [B, L, D]`, `A: [D, N]`,
/// `B, C: [B, L, N]`, `D: [D]`:
///
/// `h_t = exp(Δ_t·A) ⊙ h_{t−1} + Δ_t·B_t·u_t`, `y_t = C_t·h_t + D⊙u_t`, `h_0 = 0`.
pub fn selective_scan<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
) -> Result<Var> {
    let su = tape.shape(u).to_vec();
    if su.len() != 3 {
        return Err(shape_error(
            "selective_scan",
            format!("u must be [B, L, D], got {su:?}"),
        ));
    }
    let sa = tape.shape(a).to_vec();
    if sa.len() != 2 || sa[0] != su[2] {
        return Err(shape_error(
            "selective_scan",
            format!("A {sa:?} does not match u {su:?}"),
        ));
    }
    let dims = ScanDims {
        b: su[0],
        l: su[1],
        d: su[2],
        n: sa[1],
    };
    let bn = [dims.b, dims.l, dims.n];
    if tape.shape(delta) != su.as_slice()
        || tape.shape(b) != bn.as_slice()
        || tape.shape(c) != bn.as_slice()
        || tape.shape(d) != [dims.d].as_slice()
    {
        return Err(shape_error(
            "selective_scan",
            format!(
                "Δ {:?}, B {:?}, C {:?}, D {:?} inconsistent with u {su:?} and N = {}",
                tape.shape(delta),
                tape.shape(b),
                tape.shape(c),
                tape.shape(d),
                dims.n
            ),
        ));
    }
    if let Some(v) = tape.value(delta).iter().find(|v| !(**v > T::zero())) {
        return Err(TensorError::Contract(format!(
            "selective_scan needs Δ > 0, found {v}"
        )));
    }
    let keep = [u, delta, a, b, c, d]
        .iter()
        .any(|&v| tape.requires_grad(v));
    let (y, states, decays) = scan_forward(
        keep,
        dims,
        tape.value(u),
        tape.value(delta),
        tape.value(a),
        tape.value(b),
        tape.value(c),
        tape.value(d),
    );
    tape.custom(
        &[u, delta, a, b, c, d],
        &su,
        y,
        Box::new(ScanOp {
            dims,
            states,
            decays,
        }),
    )
}

#[derive(Debug)]
struct CausalConvOp {
    b: usize,
    l: usize,
    d: usize,
    k: usize,
}

impl<T: Scalar> CustomOp<T> for CausalConvOp {
    fn name(&self) -> &'static str {
        "causal_depthwise_conv"
    }

    fn backward(
        &self,
        inputs: &[&[T]],
        _output: &[T],
        gy: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, l, d, k) = (self.b, self.l, self.d, self.k);
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); d];
        for bi in 0..b {
            for t in 0..l {
                let row = (bi * l + t) * d;
                for c in 0..d {
                    let g = gy[row + c];
                    db[c] += g;
                    for j in 0..k {
                        let Some(s) = (t + j + 1).checked_sub(k) else {
                            continue;
                        };
                        let src = (bi * l + s) * d + c;
                        dw[c * k + j] += g * x[src];
                        dx[src] += g * w[c * k + j];
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dx),
            needs[1].then_some(dw),
            needs[2].then_some(db),
        ]
    }
}

/// Depthwise causal convolution over `x: [B, L, D]` with per-channel taps
/// `w: [D, K]` and bias `[D]`:
/// `y[t, c] = bias[c] + Σ_j w[c, j]·x[t − (K−1) + j, c]` (zero before the start).
pub fn causal_depthwise_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Var,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(w).to_vec();
    if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || tape.shape(bias) != [sx[2]].as_slice() {
        return Err(shape_error(
            "causal_depthwise_conv",
            format!("x {sx:?}, w {sw:?}, bias {:?}", tape.shape(bias)),
        ));
    }
    let (b, l, d, k) = (sx[0], sx[1], sx[2], sw[1]);
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(bias));
    let mut y = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for t in 0..l {
            let row = (bi * l + t) * d;
            for c in 0..d {
                let mut acc = bv[c];
                for j in 0..k {
                    if let Some(s) = (t + j + 1).checked_sub(k) {
                        acc += wv[c * k + j] * xv[(bi * l + s) * d + c];
                    }
                }
                y[row + c] = acc;
            }
        }
    }
    tape.custom(&[x, w, bias], &sx, y, Box::new(CausalConvOp { b, l, d, k }))
}
