use std::collections::HashMap;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    /// Logical dimensions recorded in checkpoints, e.g. `[c_out]` for a bias.
    pub dims: Vec<usize>,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, value: Tensor<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != value.len() {
            return Err(Error::config(format!(
                "parameter dims {dims:?} do not match tensor shape {}",
                value.shape()
            )));
        }
        let shape = value.shape();
        Ok(Parameter {
            name: name.into(),
            dims,
            grad: Tensor::zeros(shape),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            value,
        })
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Registry of every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::config(format!("duplicate parameter name `{}`", param.name)));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn load_values<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for src in other.iter() {
            let id = self
                .id_of(&src.name)
                .ok_or_else(|| Error::config(format!("unexpected parameter `{}`", src.name)))?;
            let dst = &mut self.params[id.0];
            if dst.dims != src.dims {
                return Err(Error::config(format!(
                    "parameter `{}` has dims {:?}, checkpoint has {:?}",
                    src.name, dst.dims, src.dims
                )));
            }
            let data = src.value.data().iter().map(|v| T::from_f64_lossy(v.as_f64())).collect();
            dst.value = Tensor::from_vec(dst.shape(), data)?;
        }
        Ok(())
    }

    /// Converts every value into another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(Parameter::new(p.name.clone(), p.dims.clone(), p.value.cast()).expect("same dims"))
                .expect("names already unique");
        }
        out
    }
}
