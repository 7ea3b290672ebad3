use super::{NumericsError, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: shrinks parameters directly instead of entering the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. All gradients are validated before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), NumericsError> {
        let c = self.config;
        if !(c.lr > 0.0) {
            return Err(NumericsError::Optimizer(format!("learning rate must be positive, got {}", c.lr)));
        }
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NumericsError::Optimizer(format!(
                "expected {} gradients, got {}",
                params.len(),
                grads.len()
            )));
        }
        for ((id, name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NumericsError::Shape {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            debug_assert_eq!(self.first[id.index()].shape(), p.shape());
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient { name: name.to_string() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(c.lr * c.weight_decay);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv = *pv - decay * *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut store = scalar_store(1.25);
        let mut adam = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..5 {
            adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.tensors()[0].data(), &[1.25]);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut adam = AdamState::new(cfg, &store);
        adam.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        assert!((store.tensors()[0].data()[0] + 0.1).abs() < 1e-6);
    }

    /// Scalar Adam recurrence written out independently of the tensor path.
    fn scalar_adam_reference(steps: usize, lr: f64) -> f64 {
        let (mut x, mut m, mut v) = (0.0f64, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (x - 2.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        x
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let lr = 0.1;
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(AdamConfig { lr, weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..100 {
            let x = store.tensors()[0].data()[0];
            adam.step(&mut store, &[Tensor::scalar(2.0 * (x - 2.0))]).unwrap();
        }
        let x = store.tensors()[0].data()[0];
        let reference = scalar_adam_reference(100, lr);
        assert!((x - reference).abs() < 1e-12, "{x} vs {reference}");
        assert!((x - 2.0).abs() < 0.05, "x = {x}");
    }

    #[test]
    fn non_finite_gradient_rejected_before_mutation() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(2.0));
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let err = adam.step(&mut store, &[Tensor::scalar(1.0), Tensor::scalar(f32::NAN)]);
        assert!(matches!(err, Err(NumericsError::NonFiniteGradient { ref name }) if name == "b"));
        assert_eq!(store.tensors()[0].data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_without_gradient() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut adam = AdamState::new(cfg, &store);
        adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        assert!((store.tensors()[0].data()[0] - 0.95).abs() < 1e-12);
    }
}
