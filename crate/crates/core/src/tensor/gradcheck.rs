//! Central finite-difference gradient checking over a [`ParamStore`].

use super::{Conv2dGeom, ParamId, ParamStore, Result, Tape, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates probed per tensor; larger tensors are sampled with a stride.
    pub max_probes: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_probes: 24,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub probes: usize,
}

/// Compares analytic gradients of `f` against central differences for every
/// parameter the loss touches.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut bound: Vec<_> = tape
        .bindings()
        .filter(|(id, _)| store.get(*id).requires_grad)
        .map(|(id, v)| (id, grads.get(v).map(<[f64]>::to_vec)))
        .collect();
    bound.sort_by_key(|(id, _)| *id);

    let mut report = GradCheckReport::default();
    for (id, analytic) in bound {
        let n = store.get(id).numel();
        let analytic = analytic.unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(opts.max_probes).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            let mut eval = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).data_mut()[j] = v;
                let mut t = Tape::new();
                let l = f(&mut t, store)?;
                Ok(t.item(l))
            };
            let plus = eval(orig + opts.h, store)?;
            let minus = eval(orig - opts.h, store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.probes += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = format!(
                    "{}[{j}]: analytic {a:.6e} vs numeric {numeric:.6e}",
                    store.name(id)
                );
            }
        }
    }
    Ok(report)
}

type Builder =
    Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Result<Var> + Send + Sync>;

/// One primitive under test: parameter shapes, input range, and a loss builder.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    pub(crate) build: Builder,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    range: (f64, f64),
    build: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Result<Var> + Send + Sync + 'static,
) -> PrimitiveCase {
    PrimitiveCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        build: Box::new(build),
    }
}

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so that
/// every output element carries a distinct upstream gradient.
pub(crate) fn weighted_sum(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let shape = t.shape(y).to_vec();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
        .collect();
    let wv = t.constant_f64(&shape, &w)?;
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn unary_case(name: &'static str, kind: Unary, range: (f64, f64)) -> PrimitiveCase {
    case(name, &[&[3, 4]], range, move |t, s, ids| {
        let x = t.param(s, ids[0]);
        let y = t.unary(x, kind)?;
        weighted_sum(t, y)
    })
}

/// Every differentiable tape operation, each on small random shapes.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let geom = Conv2dGeom {
        stride: (1, 2),
        dilation: (2, 1),
        padding: (2, 1),
    };
    vec![
        case("add", &[&[2, 3], &[3]], (-1.0, 1.0), |t, s, i| {
            let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
            let y = t.add(a, b)?;
            weighted_sum(t, y)
        }),
        case("sub", &[&[2, 3], &[3]], (-1.0, 1.0), |t, s, i| {
            let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
            let y = t.sub(a, b)?;
            weighted_sum(t, y)
        }),
        case("mul", &[&[2, 3], &[3]], (-1.0, 1.0), |t, s, i| {
            let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
            let y = t.mul(a, b)?;
            weighted_sum(t, y)
        }),
        case("scale_shift", &[&[4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.scale(a, -1.7);
            let y = t.shift(y, 0.3);
            weighted_sum(t, y)
        }),
        unary_case("neg", Unary::Neg, (-1.0, 1.0)),
        unary_case("exp", Unary::Exp, (-1.0, 1.0)),
        unary_case("log", Unary::Log, (0.2, 1.0)),
        unary_case("tanh", Unary::Tanh, (-1.0, 1.0)),
        unary_case("sigmoid", Unary::Sigmoid, (-1.0, 1.0)),
        unary_case("silu", Unary::Silu, (-1.0, 1.0)),
        unary_case("softplus", Unary::Softplus, (-1.0, 1.0)),
        unary_case("relu", Unary::Relu, (0.05, 1.0)),
        unary_case("abs", Unary::Abs, (0.05, 1.0)),
        unary_case("square", Unary::Square, (-1.0, 1.0)),
        unary_case("sqrt", Unary::Sqrt, (0.1, 1.0)),
        unary_case("sin", Unary::Sin, (-1.0, 1.0)),
        unary_case("cos", Unary::Cos, (-1.0, 1.0)),
        unary_case("anti_wrap", Unary::AntiWrap, (0.1, 3.0)),
        case("powf", &[&[5]], (0.1, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.powf(a, 1.0 / 0.3)?;
            weighted_sum(t, y)
        }),
        case("atan2", &[&[6], &[6]], (-1.0, 1.0), |t, s, i| {
            let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
            let y = t.atan2(a, b)?;
            weighted_sum(t, y)
        }),
        case("matmul", &[&[2, 3, 4], &[4, 5]], (-1.0, 1.0), |t, s, i| {
            let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
            let y = t.matmul(a, b)?;
            weighted_sum(t, y)
        }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], (-1.0, 1.0), |t, s, i| {
            let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
            let y = t.bmm(a, b)?;
            weighted_sum(t, y)
        }),
        case("permute", &[&[2, 3, 4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.permute(a, &[2, 0, 1])?;
            weighted_sum(t, y)
        }),
        case("reshape", &[&[2, 6]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.reshape(a, &[3, 4])?;
            weighted_sum(t, y)
        }),
        case(
            "concat",
            &[&[2, 2, 3], &[2, 1, 3]],
            (-1.0, 1.0),
            |t, s, i| {
                let (a, b) = (t.param(s, i[0]), t.param(s, i[1]));
                let y = t.concat(&[a, b], 1)?;
                weighted_sum(t, y)
            },
        ),
        case("narrow", &[&[3, 5]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.narrow(a, 1, 1, 3)?;
            weighted_sum(t, y)
        }),
        case("flip", &[&[2, 4, 3]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.flip(a, 1)?;
            weighted_sum(t, y)
        }),
        case("mean", &[&[7]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.square(a);
            Ok(t.mean(y))
        }),
        case("sum_last", &[&[3, 4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.sum_last(a);
            weighted_sum(t, y)
        }),
        case("row_norm", &[&[3, 4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.row_norm(a);
            weighted_sum(t, y)
        }),
        case("layer_norm", &[&[3, 5]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.layer_norm(a, 1e-5);
            weighted_sum(t, y)
        }),
        case("softmax", &[&[3, 4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.softmax(a);
            weighted_sum(t, y)
        }),
        case("log_softmax", &[&[3, 4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.log_softmax(a);
            weighted_sum(t, y)
        }),
        case("gather_last", &[&[3, 4]], (-1.0, 1.0), |t, s, i| {
            let a = t.param(s, i[0]);
            let y = t.gather_last(a, &[3, 0, 2])?;
            weighted_sum(t, y)
        }),
        case(
            "conv2d",
            &[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]],
            (-1.0, 1.0),
            move |t, s, i| {
                let (x, w, b) = (t.param(s, i[0]), t.param(s, i[1]), t.param(s, i[2]));
                let y = t.conv2d(x, w, Some(b), geom)?;
                weighted_sum(t, y)
            },
        ),
        case(
            "conv2d_pointwise",
            &[&[2, 3, 2, 4], &[2, 3, 1, 1]],
            (-1.0, 1.0),
            |t, s, i| {
                let (x, w) = (t.param(s, i[0]), t.param(s, i[1]));
                let y = t.conv2d(x, w, None, Conv2dGeom::unit())?;
                weighted_sum(t, y)
            },
        ),
        case(
            "conv_transpose2d",
            &[&[2, 3, 3, 4], &[3, 2, 1, 3], &[2]],
            (-1.0, 1.0),
            |t, s, i| {
                let (x, w, b) = (t.param(s, i[0]), t.param(s, i[1]), t.param(s, i[2]));
                let g = Conv2dGeom {
                    stride: (1, 2),
                    dilation: (1, 1),
                    padding: (0, 1),
                };
                let y = t.conv_transpose2d(x, w, Some(b), g, (0, 1))?;
                weighted_sum(t, y)
            },
        ),
        case(
            "conv1d",
            &[&[2, 3, 10], &[4, 3, 4], &[4]],
            (-1.0, 1.0),
            |t, s, i| {
                let (x, w, b) = (t.param(s, i[0]), t.param(s, i[1]), t.param(s, i[2]));
                let y = t.conv1d(x, w, Some(b), 2, 1, 1)?;
                weighted_sum(t, y)
            },
        ),
    ]
}

impl PrimitiveCase {
    /// Checks every coordinate of every input drawn from `seed`.
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = self
            .shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let n = s.iter().product();
                let data = (0..n)
                    .map(|_| rng.random_range(self.range.0..self.range.1))
                    .collect();
                store.add(
                    format!("in{k}"),
                    Tensor::new(s, data).expect("case shapes are valid"),
                )
            })
            .collect();
        let opts = GradCheckOptions {
            max_probes: usize::MAX,
            ..GradCheckOptions::default()
        };
        check_store(&mut store, |t, s| (self.build)(t, s, &ids), &opts)
    }
}

/// The sigmoid case alone, the one perturbed by fault injection.
pub fn sigmoid_case() -> PrimitiveCase {
    unary_case("sigmoid", Unary::Sigmoid, (-1.0, 1.0))
}
