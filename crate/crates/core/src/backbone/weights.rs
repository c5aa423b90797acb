use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerKind, NetworkSpec};
use crate::blob;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub role: String,
}

impl ParamKey {
    pub fn new(layer: usize, role: &str) -> Self {
        Self {
            layer,
            role: role.to_string(),
        }
    }
}

/// Learnable backbone tensors keyed by layer index and parameter role.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<T> {
    tensors: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// He-normal kernels (`std = sqrt(2 / fan_in)`), `1/sqrt(fan_in)` for the
    /// classifier, zero biases.
    pub fn init<R: Rng>(net: &NetworkSpec, rng: &mut R) -> Self {
        let mut store = Self::new();
        for (index, layer) in net.layers().iter().enumerate() {
            for role in layer.kind.param_roles(&layer.input_shape) {
                let shape = layer.kind.param_shape(role, &layer.input_shape).unwrap();
                let tensor = if role.ends_with("bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = match (layer.kind, role) {
                        (LayerKind::Fc { .. }, _) => 1.0,
                        // keeps the residual branch small relative to the skip path
                        (LayerKind::ResidualBlock { .. }, "conv2.kernel") => 0.5,
                        _ => 2.0,
                    };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                    let data = (0..shape.iter().product())
                        .map(|_| T::narrow(normal.sample(rng)))
                        .collect();
                    Tensor::new(shape, data).unwrap()
                };
                store.insert(index, role, tensor);
            }
        }
        store
    }

    pub fn insert(&mut self, layer: usize, role: &str, tensor: Tensor<T>) {
        self.tensors.insert(ParamKey::new(layer, role), tensor);
    }

    pub fn get(&self, layer: usize, role: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(&ParamKey::new(layer, role))
            .ok_or_else(|| Error::Config(format!("layer {layer} has no '{role}' tensor")))
    }

    pub(crate) fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Checks that every learnable layer has exactly its required tensors
    /// with matching shapes.
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        let mut expected = 0;
        for (index, layer) in net.layers().iter().enumerate() {
            for role in layer.kind.param_roles(&layer.input_shape) {
                expected += 1;
                let want = layer.kind.param_shape(role, &layer.input_shape).unwrap();
                let have = self.get(index, role)?;
                if have.shape() != want.as_slice() {
                    return Err(Error::shape(
                        "weights",
                        format!("layer {index} '{role}'"),
                        format!("{want:?}"),
                        format!("{:?}", have.shape()),
                    ));
                }
            }
        }
        if expected != self.len() {
            return Err(Error::Config(format!(
                "weight store holds {} tensors, network needs {expected}",
                self.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over every tensor's blob encoding, in key order.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (key, t) in &self.tensors {
            bytes.extend_from_slice(format!("{}:{}", key.layer, key.role).as_bytes());
            for d in t.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.widen().to_le_bytes());
            }
        }
        blob::sha256_hex(&bytes)
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}
