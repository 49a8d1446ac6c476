//! Named parameter storage shared by the networks, the optimizer and the
//! checkpoint format.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is insertion order and is
/// what the checkpoint writer serializes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(arg_err!("duplicate parameter name {name}"));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Zero-filled gradient buffers matching every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect()
    }
}

/// Graph variables for the parameters of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds this graph's parameter gradients into `acc`.
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (v, a) in self.vars.iter().zip(acc.iter_mut()) {
            if let Some(g) = grads.get(*v) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
}

/// Gaussian init with standard deviation `std`.
pub(crate) fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Weight for an affine map `fan_in → fan_out`, scaled by `1/√fan_in`.
pub(crate) fn linear_init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    normal_init(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}

/// Affine map `x·W + b` on the graph.
pub(crate) fn affine(g: &mut Graph, b: &Binding, x: Var, w: ParamId, bias: ParamId) -> Result<Var> {
    let y = g.matmul(x, b.var(w))?;
    g.add_row(y, b.var(bias))
}
