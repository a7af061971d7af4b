use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the store's parameter order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2, lr, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(lr_t), T::of(c.epsilon));
        let one = T::one();
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * *g;
                *vi = b2 * *vi + (one - b2) * *g * *g;
                *w = *w - lr * *mi / (vi.sqrt() + eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let x = store.get(id).value.data().to_vec();
            store.get_mut(id).grad = Tensor::from_vec(&[2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]).unwrap();
            adam.step(&mut store);
        }
        let x = store.get(id).value.data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::from_vec(&[1], vec![123.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store);
        let x = store.get(id).value.data()[0];
        assert!((x + 1e-5).abs() < 1e-9, "{x}");
        assert_eq!(store.get(id).grad.data()[0], 0.0);
    }
}
