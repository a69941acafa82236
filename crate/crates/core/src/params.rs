//! Named, ordered parameter storage. Declaration order is the checkpoint
//! serialization order.

use crate::autodiff::{truncated_normal_tensor, Graph, Real, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.iter()).finish()
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Truncated-normal weight, std [`INIT_STD`].
    pub fn weight(&mut self, rng: &mut Rng, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let t = truncated_normal_tensor(rng, shape, INIT_STD);
        self.add(name, t)
    }

    /// Convolution kernel (C_out, C_in/groups, kh, kw), truncated normal
    /// with the fan-in scaled std `sqrt(2 / (C_in/groups · kh · kw))`.
    pub fn conv_kernel(&mut self, rng: &mut Rng, name: impl Into<String>, shape: &[usize; 4]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let t = truncated_normal_tensor(rng, shape, (2.0 / fan_in).sqrt());
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of scalar learnables.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every parameter into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values in place, keeping names and shapes.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    t.shape(),
                    self.tensors[id.0].shape()
                ),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Converts to another precision, rounding through `f64`.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::new(t.shape(), t.data().iter().map(|v| U::c(v.to_f64().unwrap())).collect()).unwrap())
                .collect(),
        }
    }
}

/// Graph handles for one binding of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in declaration order, e.g. from a caller-built graph.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
