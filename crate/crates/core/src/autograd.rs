//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse and accumulates gradients. Tapes are cheap and built
//! once per sample, so there is no graph reuse or in-place mutation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::ParamStore;
use crate::tensor::{gemm, gemm_into, Tensor};

type BackwardFn = Box<dyn Fn(&Ctx<'_>) -> Vec<Option<Tensor>>>;

/// Values handed to a backward closure.
pub struct Ctx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<Rc<Tensor>>,
    pub needs: Vec<bool>,
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

type TrainableFilter = Box<dyn Fn(&str) -> bool>;

/// Operation record for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    trainable: Option<TrainableFilter>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Tape on which every parameter is trainable.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            trainable: None,
            grad_enabled: true,
        }
    }

    /// Tape where only parameters accepted by `filter` receive gradients.
    pub fn with_trainable(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Tape {
            trainable: Some(Box::new(filter)),
            ..Tape::new()
        }
    }

    /// Tape that records no gradient information at all.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    /// Leaf that always receives a gradient, regardless of the filter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        let rg = self.grad_enabled;
        self.leaf(Rc::new(value), rg)
    }

    /// Leaf for the named parameter in `store`.
    ///
    /// Panics if the parameter does not exist; model code only asks for
    /// names it registered at initialization.
    pub fn param<'t>(&'t self, store: &ParamStore, name: &str) -> Var<'t> {
        let value = store
            .get_rc(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let trainable = self.grad_enabled && self.trainable.as_ref().is_none_or(|f| f(name));
        let v = self.leaf(value, trainable);
        if trainable {
            self.params.borrow_mut().push((name.to_string(), v.id));
        }
        v
    }

    fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, parents: &[usize], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a scalar (`1×1`) output.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = Ctx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| nodes[p].value.clone()).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, id)| (name.clone(), *id))
            .collect();
        Gradients { grads, params }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }

    /// Gradients of every trainable parameter touched by the forward pass,
    /// summed over repeated uses.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.params {
            let Some(g) = &self.grads[*id] else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "expected 2-D tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, backward: BackwardFn) -> Var<'t> {
        self.tape.push(value, &[self.id], backward)
    }

    fn binary(self, other: Var<'t>, value: Tensor, backward: BackwardFn) -> Var<'t> {
        self.tape.push(value, &[self.id, other.id], backward)
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = gemm(&self.value(), false, &other.value(), false);
        self.binary(
            other,
            out,
            Box::new(|c| {
                let ga = c.needs[0].then(|| gemm(c.grad, false, &c.inputs[1], true));
                let gb = c.needs[1].then(|| gemm(&c.inputs[0], true, c.grad, false));
                vec![ga, gb]
            }),
        )
    }

    /// Adds a bias vector (`[n]` or `[1, n]`) to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = bias.value();
        let (r, c) = dims2(&a);
        assert_eq!(b.len(), c, "bias length {} vs {} columns", b.len(), c);
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let _ = r;
        self.binary(
            bias,
            out,
            Box::new(|c| {
                let bshape = c.inputs[1].shape().to_vec();
                let gb = c.needs[1].then(|| {
                    let cols = c.grad.cols();
                    let mut acc = vec![0.0; cols];
                    for row in c.grad.data().chunks(cols) {
                        for (a, g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::new(&bshape, acc)
                });
                vec![c.needs[0].then(|| c.grad.clone()), gb]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(
            other,
            out,
            Box::new(|c| vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(
            other,
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.clone()),
                    c.needs[1].then(|| c.grad.map(|g| -g)),
                ]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(
            other,
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(&c.inputs[1], |g, b| g * b)),
                    c.needs[1].then(|| c.grad.zip_map(&c.inputs[0], |g, a| g * a)),
                ]
            }),
        )
    }

    /// `out[i][j] = self[i][j] * col[i]` for an `m × 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let a = self.value();
        let s = col.value();
        let (r, c) = dims2(&a);
        assert_eq!(s.len(), r, "column length {} vs {} rows", s.len(), r);
        let mut out = (*a).clone();
        for (row, sv) in out.data_mut().chunks_mut(c).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        self.binary(
            col,
            out,
            Box::new(move |ctx| {
                let a = &ctx.inputs[0];
                let s = &ctx.inputs[1];
                let ga = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.clone();
                    for (row, sv) in g.data_mut().chunks_mut(c).zip(s.data()) {
                        row.iter_mut().for_each(|v| *v *= sv);
                    }
                    g
                });
                let gs = ctx.needs[1].then(|| {
                    let d = ctx
                        .grad
                        .data()
                        .chunks(c)
                        .zip(a.data().chunks(c))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect();
                    Tensor::new(s.shape(), d)
                });
                vec![ga, gs]
            }),
        )
    }

    /// `out[i][j] = self[i][j] * row[j]` for a `1 × n` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let s = row.value();
        let (_, c) = dims2(&a);
        assert_eq!(s.len(), c, "row length {} vs {} columns", s.len(), c);
        let mut out = (*a).clone();
        for r in out.data_mut().chunks_mut(c) {
            for (v, sv) in r.iter_mut().zip(s.data()) {
                *v *= sv;
            }
        }
        self.binary(
            row,
            out,
            Box::new(move |ctx| {
                let a = &ctx.inputs[0];
                let s = &ctx.inputs[1];
                let ga = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.clone();
                    for r in g.data_mut().chunks_mut(c) {
                        for (v, sv) in r.iter_mut().zip(s.data()) {
                            *v *= sv;
                        }
                    }
                    g
                });
                let gs = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (g, x) in ctx.grad.data().chunks(c).zip(a.data().chunks(c)) {
                        for j in 0..c {
                            acc[j] += g[j] * x[j];
                        }
                    }
                    Tensor::new(s.shape(), acc)
                });
                vec![ga, gs]
            }),
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.unary(out, Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.unary(out, Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    /// Elementwise product with a constant tensor (dropout masks, loss weights).
    pub fn mul_const(self, mask: Tensor) -> Var<'t> {
        let out = self.value().zip_map(&mask, |a, m| a * m);
        self.unary(out, Box::new(move |c| vec![Some(c.grad.zip_map(&mask, |g, m| g * m))]))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(
            out,
            Box::new(|c| vec![Some(c.grad.zip_map(&c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let out = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(
            out,
            Box::new(move |c| {
                vec![Some(
                    c.grad.zip_map(&c.inputs[0], |g, x| if x > 0.0 { g } else { slope * g }),
                )]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.unary(
            out,
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y * (1.0 - y)))]),
        )
    }

    /// Softmax along each row, with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let (_, c) = dims2(&a);
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.unary(
            out,
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for (gr, yr) in g.data_mut().chunks_mut(c).zip(ctx.output.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (gv, y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean over rows: `m × n → 1 × n`.
    pub fn mean_rows(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = dims2(&a);
        let mut acc = vec![0.0; c];
        for row in a.data().chunks(c) {
            for (s, v) in acc.iter_mut().zip(row) {
                *s += v;
            }
        }
        acc.iter_mut().for_each(|s| *s /= r as f64);
        self.unary(
            Tensor::new(&[1, c], acc),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[r, c]);
                let inv = 1.0 / r as f64;
                for row in g.data_mut().chunks_mut(c) {
                    for (v, gv) in row.iter_mut().zip(ctx.grad.data()) {
                        *v = gv * inv;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Max over rows: `m × n → 1 × n`. Ties go to the lowest row.
    pub fn max_rows(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = dims2(&a);
        let arg = argmax_rows(&a);
        let out: Vec<f64> = (0..c).map(|j| a.data()[arg[j] * c + j]).collect();
        self.unary(
            Tensor::new(&[1, c], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    g.data_mut()[arg[j] * c + j] = ctx.grad.data()[j];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean over columns: `m × n → m × 1`.
    pub fn mean_cols(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = dims2(&a);
        let out: Vec<f64> = a
            .data()
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        self.unary(
            Tensor::new(&[r, 1], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[r, c]);
                for (row, gv) in g.data_mut().chunks_mut(c).zip(ctx.grad.data()) {
                    row.iter_mut().for_each(|v| *v = gv / c as f64);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Max over columns: `m × n → m × 1`. Ties go to the lowest column.
    pub fn max_cols(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = dims2(&a);
        let arg: Vec<usize> = a.data().chunks(c).map(argmax).collect();
        let out: Vec<f64> = arg.iter().enumerate().map(|(i, &j)| a.data()[i * c + j]).collect();
        self.unary(
            Tensor::new(&[r, 1], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[r, c]);
                for (i, &j) in arg.iter().enumerate() {
                    g.data_mut()[i * c + j] = ctx.grad.data()[i];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Max over consecutive groups of `k` rows: `(m·k) × c → m × c`.
    pub fn group_max(self, k: usize) -> Var<'t> {
        let a = self.value();
        let (rows, c) = dims2(&a);
        assert!(k > 0 && rows % k == 0, "{rows} rows not divisible into groups of {k}");
        let m = rows / k;
        let mut arg = vec![0usize; m * c];
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            for ch in 0..c {
                let mut best = i * k;
                for r in i * k + 1..(i + 1) * k {
                    if a.data()[r * c + ch] > a.data()[best * c + ch] {
                        best = r;
                    }
                }
                arg[i * c + ch] = best;
                out[i * c + ch] = a.data()[best * c + ch];
            }
        }
        self.unary(
            Tensor::new(&[m, c], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[rows, c]);
                for (idx, &r) in arg.iter().enumerate() {
                    let ch = idx % c;
                    g.data_mut()[r * c + ch] += ctx.grad.data()[idx];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Repeats a `1 × n` row `m` times.
    pub fn repeat_rows(self, m: usize) -> Var<'t> {
        let a = self.value();
        let (r, c) = dims2(&a);
        assert_eq!(r, 1, "repeat_rows expects a single row");
        let mut out = Vec::with_capacity(m * c);
        for _ in 0..m {
            out.extend_from_slice(a.data());
        }
        self.unary(
            Tensor::new(&[m, c], out),
            Box::new(move |ctx| {
                let mut acc = vec![0.0; c];
                for row in ctx.grad.data().chunks(c) {
                    for (s, g) in acc.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                vec![Some(Tensor::new(&[1, c], acc))]
            }),
        )
    }

    /// Repeats each row `k` times consecutively: `m × c → (m·k) × c`.
    pub fn repeat_each_row(self, k: usize) -> Var<'t> {
        let a = self.value();
        let (m, c) = dims2(&a);
        let mut out = Vec::with_capacity(m * k * c);
        for row in a.data().chunks(c) {
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        self.unary(
            Tensor::new(&[m * k, c], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[m, c]);
                for (r, grow) in ctx.grad.data().chunks(c).enumerate() {
                    let dst = &mut g.data_mut()[(r / k) * c..(r / k + 1) * c];
                    for (d, v) in dst.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Edge differences `out[i·k + j] = self[i] − self[neighbors[i·k + j]]`.
    pub fn edge_diff(self, neighbors: Rc<[usize]>, k: usize) -> Var<'t> {
        let x = self.value();
        let (n, f) = dims2(&x);
        assert_eq!(neighbors.len(), n * k, "neighbor table does not match {n} points × {k}");
        let mut out = vec![0.0; n * k * f];
        for i in 0..n {
            let xi = x.row(i);
            for j in 0..k {
                let xj = x.row(neighbors[i * k + j]);
                let dst = &mut out[(i * k + j) * f..(i * k + j + 1) * f];
                for c in 0..f {
                    dst[c] = xi[c] - xj[c];
                }
            }
        }
        self.unary(
            Tensor::new(&[n * k, f], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[n, f]);
                let gd = ctx.grad.data();
                let data = g.data_mut();
                for i in 0..n {
                    for j in 0..k {
                        let src = &gd[(i * k + j) * f..(i * k + j + 1) * f];
                        let nb = neighbors[i * k + j];
                        for c in 0..f {
                            data[i * f + c] += src[c];
                            data[nb * f + c] -= src[c];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// `out[i] = Σ_j self[i][j] · feat[i·k + j]` for weights `m × k`
    /// and features `(m·k) × c`.
    pub fn weighted_group_sum(self, feat: Var<'t>) -> Var<'t> {
        let w = self.value();
        let x = feat.value();
        let (m, k) = dims2(&w);
        let (rows, c) = dims2(&x);
        assert_eq!(rows, m * k, "feature rows {rows} vs weights {m}×{k}");
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let a = w.data()[i * k + j];
                for (d, v) in dst.iter_mut().zip(x.row(i * k + j)) {
                    *d += a * v;
                }
            }
        }
        self.binary(
            feat,
            Tensor::new(&[m, c], out),
            Box::new(move |ctx| {
                let (w, x, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let gw = ctx.needs[0].then(|| {
                    let mut gw = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            gw[i * k + j] = g.row(i).iter().zip(x.row(i * k + j)).map(|(a, b)| a * b).sum();
                        }
                    }
                    Tensor::new(&[m, k], gw)
                });
                let gx = ctx.needs[1].then(|| {
                    let mut gx = vec![0.0; m * k * c];
                    for i in 0..m {
                        for j in 0..k {
                            let a = w.data()[i * k + j];
                            let dst = &mut gx[(i * k + j) * c..(i * k + j + 1) * c];
                            for (d, gv) in dst.iter_mut().zip(g.row(i)) {
                                *d = a * gv;
                            }
                        }
                    }
                    Tensor::new(&[m * k, c], gx)
                });
                vec![gw, gx]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let from = a.shape().to_vec();
        let out = (*a).clone().reshape(shape);
        self.unary(out, Box::new(move |c| vec![Some(c.grad.clone().reshape(&from))]))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary(
            Tensor::scalar(a.sum()),
            Box::new(move |c| vec![Some(Tensor::full(&shape, c.grad.data()[0]))]),
        )
    }

    /// `Σ self ⊙ weights` as a `1 × 1` value.
    pub fn dot_const(self, weights: Tensor) -> Var<'t> {
        let a = self.value();
        let v: f64 = a.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.unary(
            Tensor::scalar(v),
            Box::new(move |c| vec![Some(weights.map(|w| w * c.grad.data()[0]))]),
        )
    }

    /// Mean cross-entropy of `b × classes` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let a = self.value();
        let (b, c) = dims2(&a);
        assert_eq!(labels.len(), b);
        let mut probs = (*a).clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let labels = labels.to_vec();
        self.unary(
            Tensor::scalar(loss / b as f64),
            Box::new(move |ctx| {
                let mut g = probs.clone();
                for (row, &y) in g.data_mut().chunks_mut(c).zip(&labels) {
                    row[y] -= 1.0;
                }
                g.scale_in_place(ctx.grad.data()[0] / b as f64);
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates 2-D values with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            Tensor::new(&[rows, total], out),
            &ids,
            Box::new(move |ctx| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&w, &need)| {
                        let g = need.then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                d.extend_from_slice(&ctx.grad.row(i)[offset..offset + w]);
                            }
                            Tensor::new(&[rows, w], d)
                        });
                        offset += w;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// 2-D convolution of a `b × c × h × w` batch with `o × c × kh × kw`
    /// kernels and per-output-channel bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad);
        assert_eq!(bias.value().len(), geo.out_ch, "conv bias length");
        let b = bias.value();
        let mut out = vec![0.0; geo.batch * geo.out_ch * geo.out_hw()];
        let mut cols = vec![0.0; geo.patch() * geo.out_hw()];
        let per_in = geo.in_ch * geo.h * geo.w;
        let per_out = geo.out_ch * geo.out_hw();
        for bi in 0..geo.batch {
            geo.im2col(&x.data()[bi * per_in..(bi + 1) * per_in], &mut cols);
            let dst = &mut out[bi * per_out..(bi + 1) * per_out];
            for (o, row) in dst.chunks_mut(geo.out_hw()).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            gemm_into(
                w.data(),
                geo.out_ch,
                geo.patch(),
                false,
                &cols,
                geo.patch(),
                geo.out_hw(),
                false,
                dst,
                1.0,
            );
        }
        let shape = [geo.batch, geo.out_ch, geo.out_h, geo.out_w];
        self.tape.push(
            Tensor::new(&shape, out),
            &[self.id, weight.id, bias.id],
            Box::new(move |ctx| {
                let (x, w, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let mut gx = ctx.needs[0].then(|| Tensor::zeros(x.shape()));
                let mut gw = ctx.needs[1].then(|| Tensor::zeros(w.shape()));
                let gb = ctx.needs[2].then(|| {
                    let mut acc = vec![0.0; geo.out_ch];
                    for (idx, row) in g.data().chunks(geo.out_hw()).enumerate() {
                        acc[idx % geo.out_ch] += row.iter().sum::<f64>();
                    }
                    Tensor::new(&[geo.out_ch], acc)
                });
                let mut cols = vec![0.0; geo.patch() * geo.out_hw()];
                let mut gcols = vec![0.0; geo.patch() * geo.out_hw()];
                for bi in 0..geo.batch {
                    let gout = &g.data()[bi * per_out..(bi + 1) * per_out];
                    if let Some(gw) = gw.as_mut() {
                        geo.im2col(&x.data()[bi * per_in..(bi + 1) * per_in], &mut cols);
                        gemm_into(
                            gout,
                            geo.out_ch,
                            geo.out_hw(),
                            false,
                            &cols,
                            geo.patch(),
                            geo.out_hw(),
                            true,
                            gw.data_mut(),
                            1.0,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm_into(
                            w.data(),
                            geo.out_ch,
                            geo.patch(),
                            true,
                            gout,
                            geo.out_ch,
                            geo.out_hw(),
                            false,
                            &mut gcols,
                            0.0,
                        );
                        geo.col2im(&gcols, &mut gx.data_mut()[bi * per_in..(bi + 1) * per_in]);
                    }
                }
                vec![gx, gw, gb]
            }),
        )
    }

    /// Max pooling over `size × size` windows of a `b × c × h × w` batch.
    pub fn max_pool2d(self, size: usize, stride: usize) -> Var<'t> {
        let x = self.value();
        let s = x.shape();
        assert_eq!(s.len(), 4, "max_pool2d expects 4-D input");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h >= size && w >= size, "pool window {size} larger than {h}×{w}");
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let mut out = vec![0.0; b * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..b * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * stride) * w + ox * stride;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = (oy * stride + dy) * w + ox * stride + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = src[best];
                    arg[o] = plane * h * w + best;
                }
            }
        }
        let in_shape = s.to_vec();
        self.unary(
            Tensor::new(&[b, c, oh, ow], out),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&in_shape);
                for (o, &i) in arg.iter().enumerate() {
                    g.data_mut()[i] += ctx.grad.data()[o];
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Shape bookkeeping for [`Var::conv2d`].
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d expects 4-D input, got {x:?}");
        assert_eq!(w.len(), 4, "conv2d expects 4-D kernel, got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?} kernel {w:?}");
        assert!(stride > 0);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "kernel larger than padded input"
        );
        ConvGeometry {
            batch: x[0],
            in_ch: x[1],
            h,
            w: wd,
            out_ch: w[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.out_hw();
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.out_w + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[(c * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let hw = self.out_hw();
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            x[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(a: &Tensor) -> Vec<usize> {
    let (r, c) = (a.rows(), a.cols());
    let mut arg = vec![0usize; c];
    for i in 1..r {
        for j in 0..c {
            if a.data()[i * c + j] > a.data()[arg[j] * c + j] {
                arg[j] = i;
            }
        }
    }
    arg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check_unary(shape: &[usize], op: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let probe = {
            let tape = Tape::inference();
            op(tape.constant(x.clone())).value().as_ref().clone()
        };
        let r = Tensor::randn(probe.shape(), 1.0, &mut rng);
        let f = |t: &Tensor| {
            let tape = Tape::inference();
            op(tape.constant(t.clone())).dot_const(r.clone()).value().data()[0]
        };
        let tape = Tape::new();
        let v = tape.variable(x.clone());
        let loss = op(v).dot_const(r.clone());
        let grads = tape.backward(loss);
        let analytic = grads.of(v).unwrap();
        let numeric = numeric_grad(&x, f);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        check_unary(&[4, 5], |v| v.sigmoid());
        check_unary(&[4, 5], |v| v.softmax_rows());
        check_unary(&[4, 5], |v| v.mean_rows());
        check_unary(&[4, 5], |v| v.max_rows());
        check_unary(&[4, 5], |v| v.mean_cols());
        check_unary(&[4, 5], |v| v.max_cols());
        check_unary(&[6, 3], |v| v.group_max(3));
        check_unary(&[1, 3], |v| v.repeat_rows(4));
        check_unary(&[2, 3], |v| v.repeat_each_row(3));
        check_unary(&[4, 3], |v| v.leaky_relu(0.2));
        check_unary(&[3, 4], |v| v.mul(v).add_scalar(1.0).scale(0.5));
        check_unary(&[3, 4], |v| v.cross_entropy(&[0, 3, 2]));
        check_unary(&[2, 2, 4, 4], |v| v.max_pool2d(2, 2));
    }

    #[test]
    fn structured_op_gradients() {
        let nbrs: Rc<[usize]> = Rc::from(vec![1, 2, 0, 2, 0, 1]);
        check_unary(&[3, 2], move |v| v.edge_diff(nbrs.clone(), 2));
        check_unary(&[3, 4], |v| {
            let cols = v.mean_cols();
            let rows = v.max_rows();
            v.mul_col(cols).mul_row(rows)
        });
        check_unary(&[2, 3], |v| {
            let t = v.tape();
            let f = t.constant(Tensor::new(&[6, 2], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()));
            v.weighted_group_sum(f.mul(f))
        });
        check_unary(&[6, 2], |v| {
            let t = v.tape();
            let w = t.constant(Tensor::new(&[2, 3], vec![0.5, -1.0, 0.2, 0.3, 0.7, -0.4]));
            w.weighted_group_sum(v)
        });
        check_unary(&[3, 2], |v| {
            let w = v.tape().constant(Tensor::new(&[2, 2], vec![1.0, 2.0, -0.5, 0.25]));
            let b = v.tape().constant(Tensor::new(&[2], vec![0.1, -0.2]));
            Var::concat_cols(&[v.matmul(w).add_row(b), v]).sub(Var::concat_cols(&[v, v]))
        });
    }

    #[test]
    fn conv2d_gradients_for_input_weight_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut rng);
        let (w2, b2) = (w.clone(), b.clone());
        check_unary(&[2, 2, 5, 6], move |v| {
            let t = v.tape();
            v.conv2d(t.constant(w2.clone()), t.constant(b2.clone()), 2, 1)
        });
        check_unary(&[3, 2, 3, 3], move |v| {
            let t = v.tape();
            let b = t.constant(b.clone());
            t.constant(x.clone()).conv2d(v, b, 1, 1)
        });
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::new(&[2], vec![0.5, -0.5]);
        let tape = Tape::inference();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), 2, 1)
            .value();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        for o in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(&[1, 1], vec![2.0]));
        store.insert("b.w", Tensor::new(&[1, 1], vec![3.0]));
        let tape = Tape::with_trainable(|n| n.starts_with("b."));
        let a = tape.param(&store, "a.w");
        let b = tape.param(&store, "b.w");
        let grads = tape.backward(a.mul(b).sum());
        let g = grads.params();
        assert!(!g.contains_key("a.w"));
        assert_eq!(g["b.w"].data(), &[2.0]);
    }

    #[test]
    fn singleton_softmax_is_exactly_one() {
        let tape = Tape::inference();
        let y = tape
            .constant(Tensor::new(&[3, 1], vec![-4.0, 0.0, 123.0]))
            .softmax_rows();
        assert_eq!(y.value().data(), &[1.0, 1.0, 1.0]);
    }
}
