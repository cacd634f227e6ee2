use rand::Rng;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

/// Learnable parameters of one model, with gradient slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Graph leaves created for every parameter of a store during one step.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix with entries uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.random_range(-limit..=limit)))
            .collect();
        self.add(
            name,
            Tensor::matrix(fan_in, fan_out, data).expect("consistent shape"),
        )
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: Vec<usize>, v: T) -> ParamId {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![v; n]).expect("consistent shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Adds every parameter to `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.param(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Adds every parameter to `graph` as a constant (inference, frozen teacher).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.constant(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Stores the gradients of the graph's last backward pass. Parameters the
    /// root did not depend on receive zeros.
    pub fn collect_grads(&mut self, graph: &Graph<T>, bound: &BoundParams) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = match graph.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.value.len()],
            };
            p.grad = Some(g);
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
