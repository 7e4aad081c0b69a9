use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Ordered collection of parameters. Registration order is the iteration
/// order everywhere (binding, optimizer, checkpoint).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    scalar: String,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad, requires_grad: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        self.add(name, Tensor::from_fn(shape, |_| T::of(dist.sample(rng))))
    }

    /// Glorot-uniform matrix `[fan_in, fan_out]`.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        self.add(name, Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng))))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every parameter into `g` as a leaf, tracked iff it requires grad.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| if p.requires_grad { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds gradients from one graph into the stored accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.raw(v) {
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            tensors: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Overwrites values of this (already structured) store from a
    /// checkpoint. Names and shapes must match exactly.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported header {} v{}", file.format, file.version)));
        }
        if file.tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, model has {}",
                file.tensors.len(),
                self.params.len()
            )));
        }
        for nt in file.tensors {
            let idx = *self
                .by_name
                .get(&nt.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", nt.name)))?;
            let p = &mut self.params[idx];
            if p.value.shape() != nt.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{}: shape {:?} vs {:?}", nt.name, nt.shape, p.value.shape())));
            }
            p.value = Tensor::new(&nt.shape, nt.data.into_iter().map(T::of).collect())?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_json(&std::fs::read_to_string(path)?)
    }
}
