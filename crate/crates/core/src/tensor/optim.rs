use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Mini-batch SGD with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// g   <- grad + wd * value        (only for parameters with `decay`)
/// buf <- momentum * buf + g
/// value <- value - lr * buf
/// ```
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    config: SgdConfig,
    momentum_buf: Vec<Tensor<T>>,
    active: Vec<bool>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, config: SgdConfig) -> Self {
        Sgd {
            config,
            momentum_buf: store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            active: vec![true; store.params().len()],
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    /// Exclude a parameter from updates; it keeps its value and momentum.
    pub fn freeze(&mut self, id: ParamId) {
        self.active[id.index()] = false;
    }

    pub fn is_active(&self, id: ParamId) -> bool {
        self.active[id.index()]
    }

    pub fn momentum_buffer(&self, id: ParamId) -> &Tensor<T> {
        &self.momentum_buf[id.index()]
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let lr = T::from_f64(lr);
        let mom = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        let ids: Vec<ParamId> = store.param_ids().collect();
        for id in ids {
            if !self.active[id.index()] {
                continue;
            }
            let p = store.param_mut(id);
            let decay = if p.decay { wd } else { T::ZERO };
            let buf = self.momentum_buf[id.index()].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for ((v, b), &g) in value.iter_mut().zip(buf.iter_mut()).zip(grad) {
                let g = g + decay * *v;
                *b = mom * *b + g;
                *v -= lr * *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("p", Tensor::scalar(value), true).unwrap();
        s.param_mut(id).grad = Tensor::scalar(grad);
        (s, id)
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let (mut s, id) = single(3.0, 0.25);
        let mut opt = Sgd::new(
            &s,
            SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        opt.step(&mut s, 1.0);
        assert_eq!(s.param(id).value.item(), 2.75);
    }

    #[test]
    fn decay_only_scales_value() {
        let (mut s, id) = single(2.0, 0.0);
        let mut opt = Sgd::new(
            &s,
            SgdConfig {
                momentum: 0.0,
                weight_decay: 5e-4,
            },
        );
        opt.step(&mut s, 0.1);
        let want = 2.0 * (1.0 - 5e-5);
        assert!((s.param(id).value.item() - want).abs() < 1e-15);
    }

    #[test]
    fn decay_flag_is_respected() {
        let mut s = ParamStore::<f64>::new();
        let id = s
            .add_param("log_gamma", Tensor::scalar(2.0), false)
            .unwrap();
        let mut opt = Sgd::new(&s, SgdConfig::default());
        opt.step(&mut s, 0.1);
        assert_eq!(s.param(id).value.item(), 2.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, id) = single(1.0, 1.0);
        let mut opt = Sgd::new(&s, SgdConfig::default());
        opt.freeze(id);
        opt.step(&mut s, 0.1);
        assert_eq!(s.param(id).value.item(), 1.0);
    }

    #[test]
    fn empty_store_is_a_no_op() {
        let mut s = ParamStore::<f32>::new();
        let mut opt = Sgd::new(&s, SgdConfig::default());
        opt.step(&mut s, 0.1);
        assert_eq!(s.num_scalars(), 0);
    }
}
