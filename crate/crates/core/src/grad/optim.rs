use std::collections::BTreeMap;

use crate::grad::float::Float;
use crate::grad::params::{ParamId, ParamStore};
use crate::grad::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a shared step counter.
#[derive(Clone, Debug)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<ParamId, Tensor<T>>,
    second: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (id, g) in grads {
            let shape = g.shape().to_vec();
            let m = self.first.entry(*id).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second.entry(*id).or_insert_with(|| Tensor::zeros(shape));
            let param = store.get_mut(*id);
            assert_eq!(param.shape(), g.shape(), "gradient shape mismatch for {:?}", id);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), param.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + ob1 * gi;
                vd[i] = b2 * vd[i] + ob2 * gi * gi;
                pd[i] -= step_size * md[i] / (vd[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }

    /// `(id, first moment, second moment)` for every parameter seen so far.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>, &Tensor<T>)> + '_ {
        self.first.iter().map(move |(id, m)| (*id, m, &self.second[id]))
    }

    /// Restore state captured by [`Adam::moments`] and [`Adam::steps`].
    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (id, m, v) in moments {
            self.first.insert(id, m);
            self.second.insert(id, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::params::ParamKind;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64([2], &[1.0, -1.0]), ParamKind::Trainable);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        adam.step(&mut store, &[(id, Tensor::from_f64([2], &[3.0, -0.5]))]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6, "{w:?}");
        assert!((w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64([1], &[5.0]), ParamKind::Trainable);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let w = store.get(id).item();
            adam.step(&mut store, &[(id, Tensor::from_f64([1], &[2.0 * (w - 2.0)]))]);
        }
        assert!((store.get(id).item() - 2.0).abs() < 1e-2);
    }
}
