use rand::Rng;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored but never optimized.
    pub trainable: bool,
}

/// Named parameter tensors for one or more networks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Copies values of every same-named, same-shaped parameter from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(NnError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.tensor.shape(),
                    src.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: {
                        let mut t = p.tensor.clone();
                        t.clear_grad();
                        t
                    },
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Kaiming-uniform initialisation for a layer followed by a leaky ReLU with `slope`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    slope: f64,
    rng: &mut R,
) -> Tensor<T> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}
