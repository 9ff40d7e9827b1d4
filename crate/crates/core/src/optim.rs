use crate::autodiff::Grads;
use crate::tensor::{cast, Scalar};
use ndarray::{Array2, Zip};
use std::collections::BTreeMap;

/// Name-addressable set of trainable tensors.
pub trait ParamTable<T: Scalar> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Array2<T>>;
}

impl<T: Scalar> ParamTable<T> for BTreeMap<String, Array2<T>> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.get_mut(name)
    }
}

/// Adam with bias-corrected moments, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Array2<T>, Array2<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; gradients whose name is not in `params` are ignored.
    pub fn step(&mut self, grads: &Grads<T>, params: &mut impl ParamTable<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1: T = cast(self.beta1);
        let b2: T = cast(self.beta2);
        let one = T::one();
        let corr1: T = cast(1.0 - self.beta1.powi(t));
        let corr2: T = cast(1.0 - self.beta2.powi(t));
        let lr: T = cast(self.lr);
        let eps: T = cast(self.eps);
        for (name, g) in grads.iter() {
            let Some(param) = params.param_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
