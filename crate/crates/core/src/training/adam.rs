//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::num::Scalar;

/// Adam state over named parameters. Moment buffers appear lazily on the
/// first step that carries a gradient for a name; frozen parameters never
/// get one.
pub struct Adam<T: Scalar> {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: theta -= lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(
        &mut self,
        params: &mut crate::nn::ParamStore<T>,
        grads: &IndexMap<String, ArrayD<T>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::of(lr);
        let eps = T::of(self.epsilon);

        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let theta = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|th, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *th -= lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }

    /// Serializable view of the optimizer state.
    #[allow(clippy::type_complexity)]
    pub fn state(
        &self,
    ) -> (
        &IndexMap<String, ArrayD<T>>,
        &IndexMap<String, ArrayD<T>>,
        u64,
    ) {
        (&self.m, &self.v, self.t)
    }

    pub fn from_state(
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        m: IndexMap<String, ArrayD<T>>,
        v: IndexMap<String, ArrayD<T>>,
        t: u64,
    ) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            m,
            v,
            t,
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut IndexMap<String, ArrayD<T>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ndarray::IxDyn;

    #[test]
    fn single_step_matches_hand_computed_update() {
        // f(theta) = theta^2 at theta = 1: gradient 2.
        let mut store = ParamStore::<f64>::new();
        store.insert("theta", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let (b1, b2, eps, lr) = (0.9, 0.98, 1e-9, 0.01);
        let mut adam = Adam::new(b1, b2, eps);
        let mut grads = IndexMap::new();
        grads.insert("theta".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0));
        adam.step(&mut store, &grads, lr);

        // Hand arithmetic, same formula written out long-hand.
        let g = 2.0f64;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);

        let got = store.get("theta").unwrap().iter().next().copied().unwrap();
        assert!(
            (got - expected).abs() <= 1e-10,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn two_steps_accumulate_moments() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let (b1, b2, eps, lr) = (0.9, 0.98, 1e-9, 0.1);
        let mut adam = Adam::new(b1, b2, eps);

        let mut theta = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * theta; // gradient of theta^2
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), g));
            adam.step(&mut store, &grads, lr);

            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let got = store.get("x").unwrap().iter().next().copied().unwrap();
        assert!((got - theta).abs() <= 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone_and_scales_large_ones() {
        let mut grads: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        grads.insert("a".into(), ArrayD::from_elem(IxDyn(&[2]), 0.3));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - (2.0f64 * 0.09).sqrt()).abs() < 1e-12);
        assert_eq!(grads["a"].iter().next().copied().unwrap(), 0.3);

        grads.insert("b".into(), ArrayD::from_elem(IxDyn(&[4]), 3.0));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!(norm > 1.0);
        let after: f64 = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-9);
    }
}
