//! Named parameter storage and per-graph parameter binding.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters, optionally restricted to a name prefix.
    pub fn numel(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor.with_requires_grad();
        Ok(())
    }
}

/// Binds parameters of a store into one graph, creating each leaf on first use.
pub struct Session<'a, T> {
    graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var<T>>>>,
    trainable: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self::with_graph(Graph::new(), store)
    }

    pub fn with_graph(graph: Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// Binds parameters as constants: nothing is differentiable.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        let mut bound = self.bound.borrow_mut();
        bound[id.0]
            .get_or_insert_with(|| {
                let t = self.store.get(id).clone();
                if self.trainable {
                    self.graph.leaf(t)
                } else {
                    self.graph.constant(t)
                }
            })
            .clone()
    }

    /// Uses `var` for parameter `id` instead of a fresh leaf. `var` must
    /// belong to this session's graph.
    pub fn bind(&self, id: ParamId, var: Var<T>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    pub fn opt(&self, id: Option<ParamId>) -> Option<Var<T>> {
        id.map(|id| self.p(id))
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        self.graph.constant(t)
    }

    /// Gradients of every parameter bound in this session after `backward`.
    /// Parameters never used by the forward pass are absent.
    pub fn gradients(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().and_then(|v| v.grad()).map(|g| (ParamId(i), g)))
            .collect()
    }
}

/// Writes session gradients into the store's `grad` slots.
pub fn store_gradients<T: Scalar>(store: &mut ParamStore<T>, grads: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
    for (id, g) in grads {
        store.get_mut(id).set_grad(g.into_data())?;
    }
    Ok(())
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), rng.trunc_normal_tensor(&[fan_in, fan_out], 0.02))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        linear(x, &s.p(self.weight), s.opt(self.bias).as_ref())
    }
}

pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Convolution weights `[kh, kw, Cin/groups, Cout]` plus bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub struct ConvSpec {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    /// Uniform init in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, spec: ConvSpec) -> Result<Self> {
        let cin_g = spec.cin / spec.groups;
        let fan_in = spec.kernel * spec.kernel * cin_g;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = [spec.kernel, spec.kernel, cin_g, spec.cout];
        let weight = store.add(format!("{name}.weight"), rng.uniform_tensor(&shape, -bound, bound))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[spec.cout]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        x.conv2d(&s.p(self.weight), s.opt(self.bias).as_ref(), self.stride, self.padding, self.groups)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(&s.p(self.gamma), &s.p(self.beta), LN_EPS)
    }
}
