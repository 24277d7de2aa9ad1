use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Adam optimizer state for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
    lr_scale: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr: T::from_f64_lossy(lr),
            beta1: T::from_f64_lossy(beta1),
            beta2: T::from_f64_lossy(beta2),
            eps: T::from_f64_lossy(eps),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        if self.lr_scale.len() <= id.index() {
            self.lr_scale.resize(id.index() + 1, T::one());
        }
        self.lr_scale[id.index()] = T::from_f64_lossy(scale);
    }

    /// Applies one update from the gradients stored on `store`, then clears them.
    ///
    /// Gradients are validated before any parameter is touched, so a non-finite
    /// gradient leaves both the parameters and the optimizer state unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGradient {
                        name: p.name.clone(),
                    });
                }
            }
        }
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.lr_scale.resize(n, T::one());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = self.first[i].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            let lr = self.lr * self.lr_scale[i];
            for ((w, g), (mj, vj)) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = self.beta1 * *mj + (T::one() - self.beta1) * *g;
                *vj = self.beta2 * *vj + (T::one() - self.beta2) * *g * *g;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = AdamState::new(0.1);
        store.get_mut(id).accumulate_grad(&[0.0]);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_descends() {
        for g in [2.5, -0.3] {
            let (mut store, id) = scalar_store(0.0);
            let mut adam = AdamState::new(0.01);
            for _ in 0..50 {
                store.get_mut(id).accumulate_grad(&[g]);
                adam.step(&mut store).unwrap();
            }
            let w = store.get(id).data()[0];
            assert!(w * g < 0.0, "moved {w} for gradient {g}");
        }
    }

    #[test]
    fn quadratic_bowl_matches_scalar_recursion() {
        // independent scalar Adam recursion on f(w) = w^2
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=200 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!(w.abs() < 0.05);

        let (mut store, id) = scalar_store(1.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..200 {
            let cur = store.get(id).data()[0];
            store.get_mut(id).accumulate_grad(&[2.0 * cur]);
            adam.step(&mut store).unwrap();
        }
        let got = store.get(id).data()[0];
        assert!((got - w).abs() < 1e-12, "{got} vs oracle {w}");
        assert!(got.abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = AdamState::new(0.1);
        store.get_mut(id).accumulate_grad(&[f64::NAN]);
        match adam.step(&mut store) {
            Err(NnError::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.get(id).data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_buffer("running", Tensor::scalar(3.0));
        store.get_mut(id).accumulate_grad(&[1.0]);
        AdamState::new(0.5).step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], 3.0);
    }
}
