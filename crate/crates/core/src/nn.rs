//! Parameters and the small dense building blocks shared by every layer.

use std::cell::RefCell;

use crate::cloud::NeighborIndex;
use crate::error::{dim_err, Result};
use crate::tensor::{Gradients, Rng, Tape, Tensor, Var};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites a parameter with a same-shaped value.
    pub fn set(&mut self, id: ParamId, value: &Tensor) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.shape() != value.shape() {
            return dim_err(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                t.shape(),
                value.shape()
            ));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(&mut self.tensors) {
            if n.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Binds store parameters to a tape for one forward/backward pass.
///
/// Each parameter becomes a single tape leaf the first time a layer asks for
/// it, so repeated uses accumulate into one gradient.
pub struct Session<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants; no gradients are tracked.
    pub fn inference(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let t = self.store.get(id).clone();
            if self.trainable {
                self.tape.leaf(t)
            } else {
                self.tape.constant(t)
            }
        })
    }

    /// Binds `id` to an existing tape variable instead of the stored value.
    pub fn bind(&self, id: ParamId, var: Var<'t>) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    /// Gradient of every bound parameter, indexed like the store.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).map(<[f64]>::to_vec)))
            .collect()
    }
}

/// Writes session gradients into the store's gradient slots.
pub fn accumulate_grads(store: &mut ParamStore, grads: Vec<Option<Vec<f64>>>) -> Result<()> {
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            store.get_mut(ParamId(i)).accumulate_grad(&g)?;
        }
    }
    Ok(())
}

/// Affine map over the last axis: `y = x W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// He-uniform weight in `[-sqrt(6/in), sqrt(6/in)]`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / in_dim.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.forward_no_bias(s, x)?;
        y.add_bias(s.param(self.bias))
    }

    /// `x W` without the bias term.
    pub fn forward_no_bias<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return dim_err(format!(
                "linear expects last axis {} but input has shape {:?}",
                self.in_dim, shape
            ));
        }
        let rows = x.value().len() / self.in_dim.max(1);
        let y = x.reshape(&[rows, self.in_dim])?.matmul(s.param(self.weight))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }

    /// Identity weight (requires `in == out`) and zero bias.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.in_dim != self.out_dim {
            return dim_err("identity linear needs equal in/out dims");
        }
        store.set(self.weight, &Tensor::eye(self.in_dim))?;
        store.get_mut(self.bias).data_mut().fill(0.0);
        Ok(())
    }
}

/// Stack of linear layers with a rectifier between consecutive layers and
/// none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_from(s, self.layers[0].forward(s, x)?, 1)
    }

    /// Continues the stack from the pre-activation output of layer `start - 1`.
    pub fn forward_from<'t>(&self, s: &Session<'t, '_>, mut h: Var<'t>, start: usize) -> Result<Var<'t>> {
        for layer in &self.layers[start..] {
            h = layer.forward(s, h.relu())?;
        }
        Ok(h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.layers.iter().for_each(|l| l.zero(store));
    }
}

/// Gathers rows of `x: [N, C]` by a neighbor index: `[M, K, C]`.
pub fn gather_neighbors<'t>(x: Var<'t>, nbr: &NeighborIndex) -> Result<Var<'t>> {
    let c = *x.shape().last().unwrap_or(&1);
    x.index_select(nbr.flat())?.reshape(&[nbr.queries(), nbr.k(), c])
}
