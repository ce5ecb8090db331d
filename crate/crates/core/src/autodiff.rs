//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! append nodes whose operands always precede them, so the tape is in
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Rows(Var, usize),
    Cols(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Dropout(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter name, in parameter-store order.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Binds a trainable parameter from `store`. Binding the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(a))?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_bias(self.value(x), self.value(bias))?;
        let ng = self.grad_of(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.grad_of(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / T::of(x.len() as f64));
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::concat_rows(&values)?;
        let ng = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Tensor::concat_cols(&values)?;
        let ng = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).rows(start, end)?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Rows(a, start), ng))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).cols(start, end)?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Cols(a, start), ng))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = tensor::softmax(self.value(a), axis)?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let axis = self.value(a).shape().len() - 1;
        self.softmax(a, axis)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = tensor::log_softmax(self.value(a))?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, stats) =
            tensor::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = tensor::gelu(self.value(a));
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Log(a), ng)
    }

    /// Inverted dropout. Identity (and no tape node) when `training` is off
    /// or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mask = tensor::dropout_mask(self.value(a).shape(), rate, rng)?;
        let value = self.value(a).mul(&mask)?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), ng))
    }

    /// `x·W + b` for `x: [r, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    /// Gradient of scalar `loss` with respect to every parameter in `store`.
    /// Parameters that were never bound, or that the loss does not depend on,
    /// receive zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut by_name: HashMap<&str, Vec<T>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let g = Tensor::new(shape, g)?;
            self.propagate(node, &g, &mut grads, &mut by_name)?;
        }

        let mut out = IndexMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let grad = match by_name.remove(name.as_str()) {
                Some(data) => Tensor::new(value.shape().to_vec(), data)?,
                None => Tensor::zeros(value.shape().to_vec()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn propagate<'a>(
        &'a self,
        node: &'a Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Vec<T>>],
        by_name: &mut HashMap<&'a str, Vec<T>>,
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(name) => match by_name.get_mut(name.as_str()) {
                Some(acc) => {
                    for (a, &x) in acc.iter_mut().zip(gd) {
                        *a = *a + x;
                    }
                }
                None => {
                    by_name.insert(name.as_str(), gd.to_vec());
                }
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let da = tensor::matmul(g, &tensor::transpose(bv)?)?;
                    self.accumulate(grads, *a, da.data());
                }
                if self.nodes[b.0].needs_grad {
                    let db = tensor::matmul(&tensor::transpose(av)?, g)?;
                    self.accumulate(grads, *b, db.data());
                }
            }
            Op::Transpose(a) => {
                let da = tensor::transpose(g)?;
                self.accumulate(grads, *a, da.data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gd);
                let n = self.value(*b).len();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *b, &db);
            }
            Op::Mul(a, b) => {
                let da = g.mul(self.value(*b))?;
                let db = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, da.data());
                self.accumulate(grads, *b, db.data());
            }
            Op::Scale(a, c) => {
                let da: Vec<T> = gd.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, gd),
            Op::Sum(a) => {
                let da = vec![gd[0]; self.value(*a).len()];
                self.accumulate(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![gd[0] / T::of(n as f64); n];
                self.accumulate(grads, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, &gd[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let (_, w) = self.value(*p).dims2("concat_cols")?;
                    let dp = g.cols(start, start + w)?;
                    self.accumulate(grads, *p, dp.data());
                    start += w;
                }
            }
            Op::Rows(a, start) => {
                let av = self.value(*a);
                let (_, c) = av.dims2("rows")?;
                let mut da = vec![T::zero(); av.len()];
                da[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, &da);
            }
            Op::Cols(a, start) => {
                let av = self.value(*a);
                let (r, c) = av.dims2("cols")?;
                let w = gd.len() / r;
                let mut da = vec![T::zero(); av.len()];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = tensor::axis_split(node.value.shape(), *axis)?;
                let mut da = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            da[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("nonempty shape");
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let total: T = gr.iter().copied().sum();
                    da.extend(yr.iter().zip(gr).map(|(&l, &gv)| gv - l.exp() * total));
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                let nf = T::of(n as f64);
                let mut dx = Vec::with_capacity(gd.len());
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for (r, (gr, hr)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    let (mean_dh, mean_dh_h) = (sum_dh / nf, sum_dh_h / nf);
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        dx.push(inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Gelu(a) => {
                let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let da: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| {
                        let pdf = (-(x * x) * T::of(0.5)).exp() * inv_sqrt_2pi;
                        gv * (tensor::phi(x) + x * pdf)
                    })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Log(a) => {
                let da: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| gv / x)
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Dropout(a, mask) => {
                let da = g.mul(mask)?;
                self.accumulate(grads, *a, da.data());
            }
        }
        Ok(())
    }
}
