//! Reverse-mode tape. Every primitive appends a node holding its value and
//! enough context to run its backward rule; nodes are stored in creation
//! order, which is a valid topological order.

use super::conv::{self, Conv2dGeom, ConvDims};
use super::dense::shape_err;
use super::{fault, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};
use std::collections::HashMap;
use std::fmt::Debug;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
    Relu,
    Abs,
    Square,
    Sqrt,
    Sin,
    Cos,
    /// `|d − 2π·round(d/2π)|`, the principal-value phase distance.
    AntiWrap,
}

/// A primitive whose forward pass is computed by the caller and whose
/// backward rule lives next to that forward code.
pub trait CustomOp<T: Scalar>: Debug {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Unary(Var, Unary),
    Powf(Var, T),
    Atan2(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Flip(Var, usize),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    RowNorm(Var),
    LayerNorm(Var, Vec<T>),
    Softmax(Var),
    LogSoftmax(Var),
    GatherLast(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        geom: Conv2dGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        geom: Conv2dGeom,
    },
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by tape variable.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_trailing(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn wrap_residual<T: Scalar>(x: T) -> T {
    let two_pi = T::of(std::f64::consts::TAU);
    x - two_pi * (x / two_pi).round()
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let last = nd - 1;
    let (n_last, s_last) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; nd];
    let rows = src.len() / n_last;
    for _ in 0..rows {
        let base: usize = (0..last).map(|i| idx[i] * src_strides[i]).sum();
        if s_last == 1 {
            out.extend_from_slice(&src[base..base + n_last]);
        } else {
            out.extend((0..n_last).map(|j| src[base + j * s_last]));
        }
        for i in (0..last).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Whether gradients flow to `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Current tape position, for [`Self::compact`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded since `mark` and re-inserts `v` as an
    /// untracked leaf. Only valid when nothing since `mark` is tracked.
    pub fn compact(&mut self, v: Var, mark: usize) -> Result<Var> {
        if v.0 < mark || mark > self.nodes.len() {
            return Err(TensorError::Contract(
                "compact: variable precedes the mark".into(),
            ));
        }
        if self.nodes[mark..].iter().any(|n| n.tracked) {
            return Err(TensorError::Contract(
                "compact: tape holds tracked nodes after the mark".into(),
            ));
        }
        let node = self.nodes.swap_remove(v.0);
        self.nodes.truncate(mark);
        self.bindings.retain(|_, var| var.0 < mark);
        Ok(self.push(node.shape, node.value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes are well formed")
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Leaf from a tensor; tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Untracked constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        self.constant(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// Binds a parameter once per tape; later calls return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
            t.requires_grad,
        );
        self.bindings.insert(id, v);
        v
    }

    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings.iter().map(|(&p, &v)| (p, v))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if !is_trailing(&sa, sb) {
            return shape_err(
                name,
                format!("{sb:?} is not a trailing sub-shape of {sa:?}"),
            );
        }
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<T> = self
            .value(a)
            .chunks(nb)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(sa, out, op, tracked))
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), tracked)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let tracked = self.tracked(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Shift(a), tracked)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        match kind {
            Unary::Log if x.iter().any(|&v| !(v > T::zero())) => {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: "input must be strictly positive".into(),
                })
            }
            Unary::Sqrt if x.iter().any(|&v| !(v >= T::zero())) => {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    detail: "input must be non-negative".into(),
                })
            }
            Unary::Softplus if x.iter().any(|v| !v.is_finite()) => {
                return Err(TensorError::Domain {
                    op: "softplus",
                    detail: "input must be finite".into(),
                })
            }
            _ => {}
        }
        let f: fn(T) -> T = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => T::exp,
            Unary::Log => T::ln,
            Unary::Tanh => T::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Silu => |v| v * sigmoid(v),
            Unary::Softplus => softplus,
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Abs => <T as num_traits::Float>::abs,
            Unary::Square => |v| v * v,
            Unary::Sqrt => T::sqrt,
            Unary::Sin => T::sin,
            Unary::Cos => T::cos,
            Unary::AntiWrap => |v| wrap_residual(v).abs(),
        };
        let out = x.iter().map(|&v| f(v)).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Unary(a, kind), tracked))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg).expect("neg is total")
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp).expect("exp is total")
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh).expect("tanh is total")
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu).expect("silu is total")
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("relu is total")
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs).expect("abs is total")
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square).expect("square is total")
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin).expect("sin is total")
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos).expect("cos is total")
    }
    pub fn anti_wrap(&mut self, a: Var) -> Var {
        self.unary(a, Unary::AntiWrap).expect("anti-wrap is total")
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let x = self.value(a);
        if x.iter().any(|&v| !(v >= T::zero())) {
            return Err(TensorError::Domain {
                op: "powf",
                detail: "base must be non-negative".into(),
            });
        }
        let p = T::of(p);
        let out = x.iter().map(|&v| v.powf(p)).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Powf(a, p), tracked))
    }

    /// Elementwise `atan2(y, x)`, with `atan2(0, 0) = 0`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        if self.shape(y) != self.shape(x) {
            return shape_err(
                "atan2",
                format!("{:?} vs {:?}", self.shape(y), self.shape(x)),
            );
        }
        let out = self
            .value(y)
            .iter()
            .zip(self.value(x))
            .map(|(&yy, &xx)| {
                if yy == T::zero() && xx == T::zero() {
                    T::zero()
                } else {
                    yy.atan2(xx)
                }
            })
            .collect();
        let tracked = self.tracked(&[y, x]);
        Ok(self.push(self.shape(y).to_vec(), out, Op::Atan2(y, x), tracked))
    }

    /// `a[..., K] · b[K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        super::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), tracked))
    }

    /// `[G, M, K] · [G, K, N] -> [G, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..g {
            super::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                (k, 1),
                &bv[i * k * n..],
                (n, 1),
                T::zero(),
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul(a, b), tracked))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(
                "permute",
                format!("invalid permutation {perm:?} for {shape:?}"),
            );
        }
        let (out_shape, out) = permute_data(self.value(a), shape, perm);
        let tracked = self.tracked(&[a]);
        Ok(self.push(out_shape, out, Op::Permute(a, perm.to_vec()), tracked))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return shape_err("transpose", "needs at least two dimensions");
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), tracked))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(
                    "concat",
                    format!("{s:?} incompatible with {first:?} on axis {axis}"),
                );
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.tracked(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), tracked))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let tracked = self.tracked(&[a]);
        Ok(self.push(s, out, Op::Narrow(a, axis, start), tracked))
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err("flip", format!("axis {axis} out of range for {shape:?}"));
        }
        let out = flip_axis(self.value(a), &shape, axis);
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape, out, Op::Flip(a, axis), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let tracked = self.tracked(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let tracked = self.tracked(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), tracked)
    }

    fn reduced_shape(&self, a: Var) -> (Vec<usize>, usize) {
        let s = self.shape(a);
        let k = s[s.len() - 1];
        let mut out = s[..s.len() - 1].to_vec();
        if out.is_empty() {
            out.push(1);
        }
        (out, k)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let (shape, k) = self.reduced_shape(a);
        let out = self
            .value(a)
            .chunks(k)
            .map(|r| r.iter().copied().sum())
            .collect();
        let tracked = self.tracked(&[a]);
        self.push(shape, out, Op::SumLast(a), tracked)
    }

    /// Euclidean norm over the last axis.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (shape, k) = self.reduced_shape(a);
        let out = self
            .value(a)
            .chunks(k)
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let tracked = self.tracked(&[a]);
        self.push(shape, out, Op::RowNorm(a), tracked)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let k = *self.shape(a).last().unwrap();
        let eps = T::of(eps);
        let kk = T::of(k as f64);
        let src = self.value(a);
        let mut out = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / k);
        for row in src.chunks(k) {
            let mu = row.iter().copied().sum::<T>() / kk;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / kk;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&x| (x - mu) * r));
        }
        let tracked = self.tracked(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::LayerNorm(a, rstd), tracked)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let k = *self.shape(a).last().unwrap();
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - m).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let tracked = self.tracked(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), tracked)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let k = *self.shape(a).last().unwrap();
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let tracked = self.tracked(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), tracked)
    }

    /// Picks `a[r, idx[r]]` for each row of the last axis.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (shape, k) = self.reduced_shape(a);
        let rows = self.value(a).len() / k;
        if idx.len() != rows {
            return Err(TensorError::Contract(format!(
                "{} indices for {rows} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(TensorError::Contract(format!(
                "index {bad} out of range 0..{k}"
            )));
        }
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| self.value(a)[r * k + i])
            .collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape, out, Op::GatherLast(a, idx.to_vec()), tracked))
    }

    fn conv_dims(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &Conv2dGeom,
        name: &'static str,
    ) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err(
                name,
                format!("expected 4-D input and kernel, got {sx:?}, {sw:?}"),
            );
        }
        if sx[1] != sw[1] {
            return shape_err(
                name,
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return shape_err(
                    name,
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                );
            }
        }
        let oh = conv::out_extent(sx[2], sw[2], geom.stride.0, geom.dilation.0, geom.padding.0);
        let ow = conv::out_extent(sx[3], sw[3], geom.stride.1, geom.dilation.1, geom.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvDims {
                b: sx[0],
                cin: sx[1],
                h: sx[2],
                w: sx[3],
                cout: sw[0],
                kh: sw[2],
                kw: sw[3],
                oh,
                ow,
            }),
            _ => shape_err(
                name,
                format!("kernel {sw:?} with {geom:?} does not fit input {sx:?}"),
            ),
        }
    }

    /// Cross-correlation of `x[B, Cin, H, W]` with `w[Cout, Cin, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, &geom, "conv2d")?;
        let y = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &dims,
            &geom,
        );
        let mut vars = vec![x, w];
        vars.extend(b);
        let tracked = self.tracked(&vars);
        Ok(self.push(
            vec![dims.b, dims.cout, dims.oh, dims.ow],
            y,
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                geom,
            },
            tracked,
        ))
    }

    /// Transposed convolution with `w[Cin, Cout, kH, kW]`: the adjoint of
    /// `conv2d` with the same geometry, plus `output_padding` extra rows/cols.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return shape_err("conv_transpose2d", format!("input {sx:?} vs kernel {sw:?}"));
        }
        let ext =
            |len: usize, k: usize, s: usize, d: usize, p: usize, op: usize| -> Option<usize> {
                ((len - 1) * s + d * (k - 1) + 1 + op).checked_sub(2 * p)
            };
        let (oh, ow) = match (
            ext(
                sx[2],
                sw[2],
                geom.stride.0,
                geom.dilation.0,
                geom.padding.0,
                output_padding.0,
            ),
            ext(
                sx[3],
                sw[3],
                geom.stride.1,
                geom.dilation.1,
                geom.padding.1,
                output_padding.1,
            ),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return shape_err("conv_transpose2d", "negative output extent"),
        };
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return shape_err("conv_transpose2d", "bias length must equal output channels");
            }
        }
        // Forward of a transposed conv is the input-gradient of the conv that
        // maps the output grid back onto the input grid.
        let dims = ConvDims {
            b: sx[0],
            cin: sw[1],
            h: oh,
            w: ow,
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh: sx[2],
            ow: sx[3],
        };
        if conv::out_extent(oh, dims.kh, geom.stride.0, geom.dilation.0, geom.padding.0)
            != Some(sx[2])
            || conv::out_extent(ow, dims.kw, geom.stride.1, geom.dilation.1, geom.padding.1)
                != Some(sx[3])
        {
            return shape_err(
                "conv_transpose2d",
                "output padding inconsistent with stride",
            );
        }
        let mut y = conv::grad_input(self.value(x), self.value(w), &dims, &geom);
        if let Some(b) = b {
            let bv = self.value(b);
            let p = oh * ow;
            for chunk in y.chunks_mut(dims.cin * p) {
                for (c, row) in chunk.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let mut vars = vec![x, w];
        vars.extend(b);
        let tracked = self.tracked(&vars);
        Ok(self.push(
            vec![sx[0], sw[1], oh, ow],
            y,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                dims,
                geom,
            },
            tracked,
        ))
    }

    /// Cross-correlation of `x[B, Cin, L]` with `w[Cout, Cin, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return shape_err(
                "conv1d",
                format!("expected [B,C,L] and [Cout,Cin,K], got {sx:?}, {sw:?}"),
            );
        }
        if sx[1] != sw[1] {
            return shape_err(
                "conv1d",
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            );
        }
        let x4 = self.reshape(x, &[sx[0], sx[1], sx[2], 1])?;
        let w4 = self.reshape(w, &[sw[0], sw[1], sw[2], 1])?;
        let geom = Conv2dGeom {
            stride: (stride, 1),
            dilation: (dilation, 1),
            padding: (padding, 0),
        };
        let y = self.conv2d(x4, w4, b, geom)?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[1], s[2]])
    }

    /// Registers a primitive computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return shape_err(op.name(), "custom op output length does not match shape");
        }
        let tracked = self.tracked(inputs);
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom(inputs.to_vec(), op),
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.bindings {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let nb = gb.len();
                    for row in g.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (gr, row) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((x, &y), &bb) in gr.iter_mut().zip(row).zip(bv) {
                            *x += y * bb;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (row, arow) in g.chunks(nb).zip(av.chunks(nb)) {
                        for ((x, &y), &aa) in gb.iter_mut().zip(row).zip(arow) {
                            *x += y * aa;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Unary(a, kind) => {
                let xv = self.value(*a);
                let kind = *kind;
                let fault = fault::active() && kind == Unary::Sigmoid;
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..ga.len() {
                        let (x, y) = (xv[j], out[j]);
                        let d = match kind {
                            Unary::Neg => -T::one(),
                            Unary::Exp => y,
                            Unary::Log => T::one() / x,
                            Unary::Tanh => T::one() - y * y,
                            Unary::Sigmoid => {
                                let d = y * (T::one() - y);
                                if fault {
                                    d * T::of(1.05)
                                } else {
                                    d
                                }
                            }
                            Unary::Silu => {
                                let s = sigmoid(x);
                                s + x * s * (T::one() - s)
                            }
                            Unary::Softplus => sigmoid(x),
                            Unary::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Abs => sign(x),
                            Unary::Square => T::of(2.0) * x,
                            Unary::Sqrt => {
                                if y > T::zero() {
                                    T::of(0.5) / y
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sin => x.cos(),
                            Unary::Cos => -x.sin(),
                            Unary::AntiWrap => sign(wrap_residual(x)),
                        };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::Powf(a, p) => {
                let xv = self.value(*a);
                let p = *p;
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..ga.len() {
                        let x = xv[j];
                        let d = if x > T::zero() {
                            p * x.powf(p - T::one())
                        } else if p == T::one() {
                            T::one()
                        } else {
                            T::zero()
                        };
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::Atan2(y, x) => {
                let (yv, xv) = (self.value(*y), self.value(*x));
                let r2 = |j: usize| yv[j] * yv[j] + xv[j] * xv[j];
                if let Some(gy) = self.slot(grads, *y) {
                    for j in 0..gy.len() {
                        let d = r2(j);
                        if d > T::zero() {
                            gy[j] += g[j] * xv[j] / d;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..gx.len() {
                        let d = r2(j);
                        if d > T::zero() {
                            gx[j] -= g[j] * yv[j] / d;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = av.len() / k;
                if let Some(ga) = self.slot(grads, *a) {
                    super::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n, 1),
                        bv,
                        (1, n),
                        T::one(),
                        ga,
                        (k, 1),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    super::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av,
                        (1, k),
                        g,
                        (n, 1),
                        T::one(),
                        gb,
                        (n, 1),
                    );
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (gn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for q in 0..gn {
                        super::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[q * m * n..],
                            (n, 1),
                            &bv[q * k * n..],
                            (1, n),
                            T::one(),
                            &mut ga[q * m * k..],
                            (k, 1),
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for q in 0..gn {
                        super::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[q * m * k..],
                            (1, k),
                            &g[q * m * n..],
                            (n, 1),
                            T::one(),
                            &mut gb[q * k * n..],
                            (n, 1),
                        );
                    }
                }
            }
            Op::Permute(a, perm) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(g, &node.shape, &inv);
                    ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + n];
                            gp[o * n..(o + 1) * n]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    off += n;
                }
            }
            Op::Narrow(a, axis, start) => {
                let src_shape = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&src_shape, *axis);
                let len = node.shape[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Flip(a, axis) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let back = flip_axis(g, &node.shape, *axis);
                    ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / T::of(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumLast(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let k = ga.len() / g.len();
                    for (row, &gg) in ga.chunks_mut(k).zip(g) {
                        row.iter_mut().for_each(|x| *x += gg);
                    }
                }
            }
            Op::RowNorm(a) => {
                let xv = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    let k = ga.len() / g.len();
                    for r in 0..g.len() {
                        if out[r] > T::zero() {
                            let s = g[r] / out[r];
                            for j in r * k..(r + 1) * k {
                                ga[j] += s * xv[j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm(a, rstd) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let k = ga.len() / rstd.len();
                    let kk = T::of(k as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gr, yr) = (&g[r * k..(r + 1) * k], &out[r * k..(r + 1) * k]);
                        let mg = gr.iter().copied().sum::<T>() / kk;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / kk;
                        for j in 0..k {
                            ga[r * k + j] += rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let k = *node.shape.last().unwrap();
                    for ((gr, yr), dst) in g.chunks(k).zip(out.chunks(k)).zip(ga.chunks_mut(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let k = *node.shape.last().unwrap();
                    for ((gr, yr), dst) in g.chunks(k).zip(out.chunks(k)).zip(ga.chunks_mut(k)) {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..k {
                            dst[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::GatherLast(a, idx) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let k = ga.len() / idx.len();
                    for (r, &i) in idx.iter().enumerate() {
                        ga[r * k + i] += g[r];
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                geom,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let d = conv::grad_input(g, self.value(*w), dims, geom);
                    gx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    let d = conv::grad_weight(self.value(*x), g, dims, geom);
                    gw.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        let d = conv::grad_bias(g, dims.cout, dims.oh * dims.ow);
                        gb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                dims,
                geom,
            } => {
                // `dims` describes the conv from this node's grid onto `x`'s grid.
                if let Some(gx) = self.slot(grads, *x) {
                    let d = conv::forward(g, self.value(*w), None, dims, geom);
                    gx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    let d = conv::grad_weight(g, self.value(*x), dims, geom);
                    gw.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        let d = conv::grad_bias(g, dims.cin, dims.h * dims.w);
                        gb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
                let result = op.backward(&vals, out, g, &needs);
                for (&v, d) in inputs.iter().zip(result) {
                    if let (Some(d), Some(gv)) = (d, self.slot(grads, v)) {
                        gv.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn flip_axis<T: Scalar>(src: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            let base = (o * n + i) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    out
}
