//! Adam with per-parameter learning-rate multipliers.

use crate::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            steps: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    /// Restores saved moments.
    pub fn from_state(config: AdamConfig, steps: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        assert_eq!(first.len(), second.len());
        Self {
            config,
            steps,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One update with base learning rate `lr`. Parameters without a
    /// gradient are left untouched but still see their moments decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        assert_eq!(self.first.len(), store.len(), "optimizer built for another store");
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        let inv_bc2 = T::lit(1.0 / bc2);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = &grads[id.0] else { continue };
            let step = T::lit(lr * store.lr_scale(id) / bc1);
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..2000 {
            let x = store.get(id).clone();
            let grad = x.map(|v| 2.0 * (v - 1.0));
            adam.step(&mut store, &[Some(grad)], 0.05);
        }
        for &v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn lr_scale_slows_a_parameter() {
        let mut store = ParamStore::<f64>::new();
        let fast = store.add("fast", Tensor::scalar(0.0));
        let slow = store.add("slow", Tensor::scalar(0.0));
        store.set_lr_scale(slow, 0.1);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Some(Tensor::scalar(1.0));
        adam.step(&mut store, &[g.clone(), g], 0.01);
        let (f, s) = (store.get(fast).item(), store.get(slow).item());
        assert!((f / s - 10.0).abs() < 1e-6);
    }
}
