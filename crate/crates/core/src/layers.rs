//! Parameterized building blocks shared by the branches.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{he_normal, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x · W + b` with `W: in × out`, stored as `{name}.w` / `{name}.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.weight_name(),
            he_normal(&[self.in_dim, self.out_dim], self.in_dim, rng),
        );
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, &self.weight_name()));
        if self.bias {
            y.add_row(tape.param(store, &self.bias_name()))
        } else {
            y
        }
    }
}

/// Stack of linear layers, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, in_dim: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(format!("{name}.{i}"), d, w));
            d = w;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.layers.iter().for_each(|l| l.init(store, rng));
    }

    /// Output of every layer, in order.
    pub fn forward_all<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Vec<Var<'t>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, store, h).relu();
            outs.push(h);
        }
        outs
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        self.forward_all(tape, store, x).pop().unwrap_or(x)
    }
}
