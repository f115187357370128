use super::gradcheck::{primitive_cases, sigmoid_case, weighted_sum};
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Naive nested-loop 1-D cross-correlation, independent of the im2col path.
fn naive_conv1d(
    x: &[f64],
    l: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    dil: usize,
    pad: usize,
) -> Vec<f64> {
    let lout = (l + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut y = vec![0.0; cout * lout];
    for co in 0..cout {
        for o in 0..lout {
            let mut acc = 0.0;
            for ci in 0..cin {
                for kk in 0..k {
                    let i = (o * stride + kk * dil) as isize - pad as isize;
                    if i >= 0 && (i as usize) < l {
                        acc += x[ci * l + i as usize] * w[(co * cin + ci) * k + kk];
                    }
                }
            }
            y[co * lout + o] = acc;
        }
    }
    y
}

#[test]
fn conv1d_difference_kernel() {
    let mut t = Tape::<f64>::new();
    let x = t.constant_f64(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = t.constant_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap();
    let y = t.conv1d(x, w, None, 1, 1, 0).unwrap();
    assert_eq!(t.value(y), &[-1.0, -1.0, -1.0]);
    assert_eq!(
        naive_conv1d(&[1.0, 2.0, 3.0, 4.0], 4, 1, &[1.0, -1.0], 1, 2, 1, 1, 0),
        vec![-1.0; 3]
    );
}

#[test]
fn conv1d_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(cin, cout, l, k, s, d, p) in &[
        (2, 3, 11, 3, 1, 1, 1),
        (3, 2, 20, 4, 2, 1, 1),
        (1, 4, 17, 3, 3, 2, 2),
        (2, 2, 9, 5, 5, 1, 0),
    ] {
        let xt = rand_tensor(&mut rng, &[1, cin, l], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[cout, cin, k], -1.0, 1.0);
        let mut t = Tape::new();
        let (x, w) = (t.leaf(&xt), t.leaf(&wt));
        let y = t.conv1d(x, w, None, s, d, p).unwrap();
        let oracle = naive_conv1d(xt.data(), l, cin, wt.data(), cout, k, s, d, p);
        for (a, b) in t.value(y).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&mut rng, &[2, 1, 7], -1.0, 1.0);
    let mut t = Tape::new();
    let x = t.leaf(&xt);
    let w = t.constant_f64(&[1, 1, 1], &[1.0]).unwrap();
    let y = t.conv1d(x, w, None, 1, 1, 0).unwrap();
    assert_eq!(t.value(y), xt.data());
    let z = t.constant(&[1, 1, 6], vec![0.0; 6]).unwrap();
    let w3 = t
        .constant_f64(&[2, 1, 3], &[0.3, -2.0, 1.0, 4.0, 5.0, 6.0])
        .unwrap();
    let y = t.conv1d(z, w3, None, 1, 1, 1).unwrap();
    assert!(t.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv1d_channel_mismatch_is_shape_error() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[1, 2, 5], vec![0.0; 10]).unwrap();
    let w = t.constant(&[1, 3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(
        t.conv1d(x, w, None, 1, 1, 0),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn conv2d_ones_sum() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[1, 1, 4, 4], vec![1.0; 16]).unwrap();
    let w = t.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = t
        .conv2d(x, w, None, Conv2dGeom::same((3, 3), (1, 1)))
        .unwrap();
    assert_eq!(t.shape(y), &[1, 1, 4, 4]);
    let v = t.value(y);
    assert_eq!(v[5], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[15], 4.0);
}

#[test]
fn conv2d_unit_kernel_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&mut rng, &[2, 1, 3, 5], -1.0, 1.0);
    let mut t = Tape::new();
    let x = t.leaf(&xt);
    let w = t.constant_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
    let y = t.conv2d(x, w, None, Conv2dGeom::unit()).unwrap();
    assert_eq!(t.value(y), xt.data());
}

#[test]
fn conv2d_dilated_impulse_response() {
    // Impulse at row t0: a dilation-2 3x3 kernel sees it only from rows t0-2, t0, t0+2.
    let (h, w) = (9, 5);
    let mut x = vec![0.0; h * w];
    x[4 * w + 2] = 1.0;
    let mut t = Tape::<f64>::new();
    let xv = t.constant(&[1, 1, h, w], x).unwrap();
    let k = t.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let geom = Conv2dGeom::same((3, 3), (2, 1));
    let y = t.conv2d(xv, k, None, geom).unwrap();
    assert_eq!(t.shape(y), &[1, 1, h, w]);
    for r in 0..h {
        let row_has = t.value(y)[r * w..(r + 1) * w].iter().any(|&v| v != 0.0);
        assert_eq!(row_has, [2, 4, 6].contains(&r), "row {r}");
    }
}

#[test]
fn conv2d_invalid_geometry() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
    let k = t.constant(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
    let g = Conv2dGeom {
        stride: (1, 1),
        dilation: (2, 1),
        padding: (0, 0),
    };
    assert!(t.conv2d(x, k, None, g).is_err());
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(&[1], vec![0.0]).unwrap();
    let s = t.sigmoid(z);
    assert_eq!(t.value(s), &[0.5]);
    let u = t.constant(&[5], vec![0.7; 5]).unwrap();
    let sm = t.softmax(u);
    assert!(t.value(sm).iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let a = t.constant_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = t.constant_f64(&[2, 1], &[1.0, 1.0]).unwrap();
    let m = t.matmul(a, b).unwrap();
    assert_eq!(t.value(m), &[3.0, 7.0]);
    let neg = t.constant_f64(&[2], &[1.0, -1.0]).unwrap();
    assert!(matches!(t.log(neg), Err(TensorError::Domain { .. })));
    let nan = t.constant_f64(&[1], &[f64::NAN]).unwrap();
    assert!(matches!(t.softplus(nan), Err(TensorError::Domain { .. })));
}

#[test]
fn broadcast_is_trailing_only() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(&[2, 3], vec![1.0; 6]).unwrap();
    let b = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    let bad = t.constant(&[2], vec![1.0; 2]).unwrap();
    assert!(t.add(a, bad).is_err());
}

#[test]
fn backward_simple_rules() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add(
        "x",
        Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
    );
    let mut t = Tape::new();
    let x = t.param(&store, id);
    let l = t.sum(x);
    t.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.as_deref().unwrap(), &[1.0; 6]);

    let mut s2 = ParamStore::<f64>::new();
    let id2 = s2.add("x", Tensor::from_f64(&[1], &[3.0]).unwrap());
    let mut t = Tape::new();
    let x = t.param(&s2, id2);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    t.backward_into(l, &mut s2).unwrap();
    assert_eq!(s2.get(id2).grad.as_deref().unwrap(), &[6.0]);
    // A second pass without reset accumulates.
    t.backward_into(l, &mut s2).unwrap();
    assert_eq!(s2.get(id2).grad.as_deref().unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::zeros(&[3]).with_grad());
    assert!(matches!(t.backward(x), Err(TensorError::Contract(_))));
}

#[test]
fn requires_grad_leaf_receives_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
    let c = t.leaf(&Tensor::from_f64(&[2], &[5.0, 5.0]).unwrap());
    let p = t.mul(x, c).unwrap();
    let l = t.sum(p);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap(), &[5.0, 5.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn every_primitive_passes_finite_difference_check() {
    for (k, c) in primitive_cases().iter().enumerate() {
        let r = c.run(100 + k as u64).unwrap();
        assert!(
            r.max_rel_err < 1e-4,
            "{}: {} ({})",
            c.name,
            r.max_rel_err,
            r.worst
        );
        assert!(r.probes > 0);
    }
}

#[test]
fn fault_injection_is_caught() {
    let c = sigmoid_case();
    fault::inject_backward_fault(true);
    let r = c.run(1).unwrap();
    fault::inject_backward_fault(false);
    assert!(r.max_rel_err > 1e-3);
}

#[test]
fn composite_matches_fused_equivalents() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0).with_grad();
    let grad_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Var| {
        let mut t = Tape::new();
        let x = t.leaf(&xt);
        let y = build(&mut t, x);
        let l = weighted_sum(&mut t, y).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(y).to_vec(), g.get(x).unwrap().to_vec())
    };
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);

    // silu(x) = x·sigmoid(x)
    let fused = grad_of(&|t, x| t.silu(x));
    let comp = grad_of(&|t, x| {
        let s = t.sigmoid(x);
        t.mul(x, s).unwrap()
    });
    assert!(close(&fused.0, &comp.0) && close(&fused.1, &comp.1));

    // log_softmax(x) = log(softmax(x))
    let fused = grad_of(&|t, x| t.log_softmax(x));
    let comp = grad_of(&|t, x| {
        let s = t.softmax(x);
        t.log(s).unwrap()
    });
    assert!(close(&fused.0, &comp.0) && close(&fused.1, &comp.1));

    // row_norm(x) = sqrt(sum_last(x²))
    let fused = grad_of(&|t, x| t.row_norm(x));
    let comp = grad_of(&|t, x| {
        let sq = t.square(x);
        let s = t.sum_last(sq);
        t.sqrt(s).unwrap()
    });
    assert!(close(&fused.0, &comp.0) && close(&fused.1, &comp.1));
}

#[test]
fn deterministic_forward_and_backward() {
    let run = || {
        let cases = primitive_cases();
        let c = cases.iter().find(|c| c.name == "conv2d").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = c
            .shapes
            .iter()
            .enumerate()
            .map(|(k, s)| store.add(format!("p{k}"), rand_tensor(&mut rng, s, -1.0, 1.0)))
            .collect();
        let mut t = Tape::new();
        let l = (c.build)(&mut t, &store, &ids).unwrap();
        t.backward_into(l, &mut store).unwrap();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| store.get(i).grad.clone().unwrap())
            .collect();
        (t.item(l).to_bits(), grads)
    };
    assert_eq!(run(), run());
}
