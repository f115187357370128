use super::{ParamStore, Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment slot for one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamWState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam step on a single parameter tensor.
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(TensorError::Contract(format!(
            "adamw: param {} / grad {} / state {} lengths differ",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::of(cfg.lr);
    let decay = T::one() - lr * T::of(cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    states: Vec<AdamWState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let states = store
            .iter()
            .map(|(_, t)| AdamWState::new(t.numel()))
            .collect();
        Self { config, states }
    }

    /// Applies one update using the accumulated gradients (missing gradients
    /// count as zero), then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let cfg = self.config;
        for ((_, t), state) in store.iter_mut().zip(&mut self.states) {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().unwrap_or_else(|| vec![T::zero(); t.numel()]);
            adamw_update(t.data_mut(), &grad, state, &cfg)?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::of(max_norm / total);
        for (_, t) in store.iter_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut p = vec![0.3f64, -1.2];
        let mut st = AdamWState::new(2);
        adamw_update(&mut p, &[0.0, 0.0], &mut st, &AdamWConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0f64];
        let mut st = AdamWState::new(1);
        adamw_update(&mut p, &[1.0], &mut st, &AdamWConfig::with_lr(0.1)).unwrap();
        // m̂ = v̂ = 1 after bias correction, so the step is lr/(1 + eps).
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut p = vec![2.0f64];
        let mut st = AdamWState::new(1);
        adamw_update(&mut p, &[0.0], &mut st, &cfg).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamWState::new(2);
        let err = adamw_update(&mut p, &[1.0], &mut st, &AdamWConfig::default());
        assert!(matches!(err, Err(TensorError::Contract(_))));
    }

    #[test]
    fn deterministic_over_store() {
        let run = || {
            let mut s = ParamStore::<f64>::new();
            let id = s.add("w", Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
            let mut opt = AdamW::new(AdamWConfig::default(), &s);
            for k in 0..5 {
                s.get_mut(id)
                    .accumulate_grad(&[k as f64, -1.0, 0.5])
                    .unwrap();
                opt.step(&mut s).unwrap();
            }
            s.get(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        s.get_mut(id).accumulate_grad(&[3.0, 4.0]).unwrap();
        let n = clip_grad_norm(&mut s, 1.0);
        assert_eq!(n, 5.0);
        let g = s.get(id).grad.clone().unwrap();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
