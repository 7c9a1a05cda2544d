use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Position of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
///
/// Weights are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` by a
/// ChaCha stream seeded from `rng_seed`; biases start at zero. Registering the
/// same sequence of parameters under the same seed reproduces every value
/// bit for bit.
#[derive(Debug, Clone)]
pub struct ParameterStore<T> {
    params: IndexMap<String, Tensor<T>>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let (idx, _) = self.params.insert_full(name, tensor.with_requires_grad(true));
        Ok(ParamId(idx))
    }

    /// Registers a `fan_in × fan_out` weight with fan-in uniform init.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::InvalidArgument("weight extents must be positive".into()));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(self.rng.random_range(-bound..=bound)))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape as a differentiable leaf. The
    /// returned ids are indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<NodeId> {
        self.params.values().map(|t| graph.param(t.clone())).collect()
    }
}
