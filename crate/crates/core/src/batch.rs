//! Gradient accumulation over a mini-batch. Samples are processed one graph
//! at a time, in order, so the summed gradient is bit-reproducible.

use panfuse_autograd::{ParamStore, Scalar, Tensor};

pub(crate) struct GradAccumulator<T> {
    sums: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            sums: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn add(&mut self, grads: Vec<Option<Tensor<T>>>) {
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }

    /// Mean over `n` samples.
    pub fn finish(self, n: usize) -> Vec<Option<Tensor<T>>> {
        let inv = T::one() / T::lit(n as f64);
        self.sums.into_iter().map(|g| g.map(|t| t.scale(inv))).collect()
    }
}
