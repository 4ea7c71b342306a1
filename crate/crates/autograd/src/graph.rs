use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Relu,
    LeakyRelu(T),
    Gelu,
    Sqrt,
    Sin,
    Cos,
    Softplus,
    Square,
    Scale(T),
    AddConst(T),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Atan2,
}

enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    Unary(Var, Unary<T>),
    Binary(Var, Var, Binary),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, rstd: Vec<T> },
    GatherRows { x: Var, rows: Rc<Vec<usize>> },
    Gather { x: Var, index: Rc<Vec<usize>> },
    ScatterRows { vis: Var, token: Var, rows: Rc<Vec<usize>> },
    MaskedFill { x: Var, token: Var, mask: Rc<Vec<bool>> },
    MeanAbsDiff { a: Var, b: Var, mask: Option<Rc<Vec<bool>>>, count: usize },
    Sum(Var),
    Mean(Var),
    Dft2(Var),
    Idft2Real(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations. Build one per forward pass, call
/// [`Graph::backward`] once on a scalar loss.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, ParamId), Var>,
    frozen: HashSet<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split a shape around `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let t = u.tanh();
    let value = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (value, deriv)
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is recorded, for input-sensitivity checks.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Treat every parameter of `store` as a constant in this graph.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
    }

    /// Binds a parameter. Repeated calls return the same node so shared
    /// weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.push(
            store.get(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            trainable,
        );
        self.bound.insert(key, v);
        v
    }

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = match kind {
            Unary::Neg => xv.map(|v| -v),
            Unary::Relu => xv.map(|v| v.max(T::zero())),
            Unary::LeakyRelu(s) => xv.map(|v| if v > T::zero() { v } else { v * s }),
            Unary::Gelu => xv.map(|v| gelu_parts(v).0),
            Unary::Sqrt => xv.map(|v| v.sqrt()),
            Unary::Sin => xv.map(|v| v.sin()),
            Unary::Cos => xv.map(|v| v.cos()),
            Unary::Softplus => xv.map(softplus),
            Unary::Square => xv.map(|v| v * v),
            Unary::Scale(c) => xv.map(|v| v * c),
            Unary::AddConst(c) => xv.map(|v| v + c),
        };
        let ng = self.ng(x);
        self.push(out, Op::Unary(x, kind), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(T::lit(slope)))
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }
    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(T::lit(c)))
    }
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddConst(T::lit(c)))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "{kind:?}: shape mismatch");
        let out = match kind {
            Binary::Add => av.zip_map(bv, |x, y| x + y),
            Binary::Sub => av.zip_map(bv, |x, y| x - y),
            Binary::Mul => av.zip_map(bv, |x, y| x * y),
            Binary::Atan2 => av.zip_map(bv, |y, x| y.atan2(x)),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Binary(a, b, kind), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }
    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary(y, x, Binary::Atan2)
    }

    /// `x * s` with `s` a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let out = self.nodes[x.0].value.scale(sv);
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::MulScalar(x, s), ng)
    }

    /// Adds a `[d]` vector to every row of `[n, d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (n, d) = self.nodes[x.0].value.dims2();
        let bv = self.nodes[b.0].value.data().to_vec();
        assert_eq!(bv.len(), d, "row bias length");
        let xv = self.nodes[x.0].value.data();
        let out = Tensor::from_fn(&[n, d], |i| xv[i] + bv[i % d]);
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    /// Multiplies every row of `[n, d]` by a `[d]` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (n, d) = self.nodes[x.0].value.dims2();
        let gv = self.nodes[g.0].value.data().to_vec();
        assert_eq!(gv.len(), d, "row scale length");
        let xv = self.nodes[x.0].value.data();
        let out = Tensor::from_fn(&[n, d], |i| xv[i] * gv[i % d]);
        let ng = self.ng(x) || self.ng(g);
        self.push(out, Op::MulRow(x, g), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on axis {d}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let len = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(&shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        assert!(start + len <= n, "slice out of range");
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data), Op::Slice { x, axis, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.nodes[x.0].value.clone().reshape(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let out = kernels::conv_transpose2d(&self.nodes[x.0].value, &self.nodes[w.0].value, stride);
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::ConvT2d { x, w, stride }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims2();
        let d = xv.data();
        let out = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.dims2();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        debug_assert_eq!(out.len(), n * d);
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (_, d) = xv.dims2();
        let mut out = xv.clone();
        let mut rstd = Vec::new();
        let dn = T::lit(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::lit(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNormRows { x, rstd }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.dims2();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "row index out of range");
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[rows.len(), d], data),
            Op::GatherRows {
                x,
                rows: Rc::new(rows.to_vec()),
            },
            ng,
        )
    }

    /// `out[i] = x[index[i]]` over flattened elements, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        let out = Tensor::new(shape, index.iter().map(|&i| xv[i]).collect());
        let ng = self.ng(x);
        self.push(out, Op::Gather { x, index }, ng)
    }

    /// Builds an `[n, d]` matrix with `vis` placed at `rows` and `token` in
    /// every other row.
    pub fn scatter_rows(&mut self, vis: Var, token: Var, rows: &[usize], n: usize) -> Var {
        let vv = &self.nodes[vis.0].value;
        let (nv, d) = vv.dims2();
        assert_eq!(nv, rows.len(), "one visible row per index");
        let tv = self.nodes[token.0].value.data();
        assert_eq!(tv.len(), d, "token width");
        let mut data: Vec<T> = (0..n * d).map(|i| tv[i % d]).collect();
        for (i, &r) in rows.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&vv.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(vis) || self.ng(token);
        self.push(
            Tensor::new(&[n, d], data),
            Op::ScatterRows {
                vis,
                token,
                rows: Rc::new(rows.to_vec()),
            },
            ng,
        )
    }

    /// Replaces pixels where `mask` (length `h*w`) is true with the
    /// per-channel `token` value.
    pub fn masked_fill(&mut self, x: Var, token: Var, mask: Rc<Vec<bool>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = xv.dims3();
        assert_eq!(mask.len(), h * w, "mask size");
        let tv = self.nodes[token.0].value.data();
        assert_eq!(tv.len(), c, "one token value per channel");
        let mut out = xv.clone();
        for (ci, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for (v, &m) in plane.iter_mut().zip(mask.iter()) {
                if m {
                    *v = tv[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(token);
        self.push(out, Op::MaskedFill { x, token, mask }, ng)
    }

    /// Mean of `|a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a).zip_map(self.value(b), |x, y| (x - y).abs());
        let count = d.len();
        let out = Tensor::scalar(d.sum() / T::lit(count as f64));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MeanAbsDiff { a, b, mask: None, count }, ng)
    }

    /// Mean of `|a - b|` over elements where `mask` is true.
    pub fn masked_mean_abs_diff(&mut self, a: Var, b: Var, mask: Rc<Vec<bool>>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        assert_eq!(mask.len(), av.len(), "mask covers every element");
        let mut sum = T::zero();
        let mut count = 0;
        for ((&x, &y), &m) in av.data().iter().zip(bv.data()).zip(mask.iter()) {
            if m {
                sum += (x - y).abs();
                count += 1;
            }
        }
        assert!(count > 0, "mask selects no elements");
        let out = Tensor::scalar(sum / T::lit(count as f64));
        let ng = self.ng(a) || self.ng(b);
        self.push(
            out,
            Op::MeanAbsDiff {
                a,
                b,
                mask: Some(mask),
                count,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Per-channel 2-D DFT; `[c, h, w]` -> `[2c, h, w]` (real parts, then
    /// imaginary parts).
    pub fn dft2(&mut self, x: Var) -> Var {
        let out = kernels::dft2(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Dft2(x), ng)
    }

    /// Real part of the inverse of [`Graph::dft2`].
    pub fn idft2_real(&mut self, z: Var) -> Var {
        let out = kernels::idft2_real(self.value(z));
        let ng = self.ng(z);
        self.push(out, Op::Idft2Real(z), ng)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } if n.needs_grad => Some((store, id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let d = match *kind {
                    Unary::Neg => g.map(|v| -v),
                    Unary::Relu => g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { T::zero() }),
                    Unary::LeakyRelu(s) => {
                        g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { gv * s })
                    }
                    Unary::Gelu => g.zip_map(xv, |gv, v| gv * gelu_parts(v).1),
                    Unary::Sqrt => g.zip_map(y, |gv, s| gv / (T::lit(2.0) * s)),
                    Unary::Sin => g.zip_map(xv, |gv, v| gv * v.cos()),
                    Unary::Cos => g.zip_map(xv, |gv, v| -gv * v.sin()),
                    Unary::Softplus => g.zip_map(xv, |gv, v| gv * sigmoid(v)),
                    Unary::Square => g.zip_map(xv, |gv, v| T::lit(2.0) * gv * v),
                    Unary::Scale(c) => g.scale(c),
                    Unary::AddConst(_) => g.clone(),
                };
                acc(*x, d);
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match kind {
                    Binary::Add => {
                        acc(*a, g.clone());
                        acc(*b, g.clone());
                    }
                    Binary::Sub => {
                        acc(*a, g.clone());
                        acc(*b, g.map(|v| -v));
                    }
                    Binary::Mul => {
                        if self.ng(*a) {
                            acc(*a, g.zip_map(bv, |gv, v| gv * v));
                        }
                        if self.ng(*b) {
                            acc(*b, g.zip_map(av, |gv, v| gv * v));
                        }
                    }
                    Binary::Atan2 => {
                        // a = y, b = x
                        let r2 = av.zip_map(bv, |yv, xv| xv * xv + yv * yv);
                        if self.ng(*a) {
                            let t = bv.zip_map(&r2, |xv, r| xv / r);
                            acc(*a, g.zip_map(&t, |gv, v| gv * v));
                        }
                        if self.ng(*b) {
                            let t = av.zip_map(&r2, |yv, r| -yv / r);
                            acc(*b, g.zip_map(&t, |gv, v| gv * v));
                        }
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                if self.ng(*x) {
                    acc(*x, g.scale(sv));
                }
                if self.ng(*s) {
                    acc(*s, Tensor::new(self.shape(*s), vec![g.dot(self.value(*x))]));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    let d = self.value(*b).len();
                    let mut gb = vec![T::zero(); d];
                    for (k, &v) in g.data().iter().enumerate() {
                        gb[k % d] += v;
                    }
                    acc(*b, Tensor::new(&[d], gb));
                }
            }
            Op::MulRow(x, s) => {
                let sv = self.value(*s).data();
                let d = sv.len();
                if self.ng(*x) {
                    acc(*x, Tensor::from_fn(g.shape(), |k| g.data()[k] * sv[k % d]));
                }
                if self.ng(*s) {
                    let xv = self.value(*x).data();
                    let mut gs = vec![T::zero(); d];
                    for (k, &v) in g.data().iter().enumerate() {
                        gs[k % d] += v * xv[k];
                    }
                    acc(*s, Tensor::new(&[d], gs));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        acc(p, Tensor::new(&ps, data));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&xs, *axis);
                let len = g.shape()[*axis];
                let mut full = Tensor::zeros(&xs);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    full.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*x, full);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gw {
                    acc(*w, t);
                }
                if let (Some(b), Some(t)) = (b, gb) {
                    acc(*b, t);
                }
            }
            Op::ConvT2d { x, w, stride } => {
                let (gx, gw) = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(t) = gx {
                    acc(*x, t);
                }
                if let Some(t) = gw {
                    acc(*w, t);
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, kernels::matmul_nt(g, self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, kernels::matmul_tn(self.value(*a), g));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2();
                let d = g.data();
                acc(*x, Tensor::from_fn(&[c, r], |k| d[(k % r) * c + k / r]));
            }
            Op::SoftmaxRows(x) => {
                let (_, d) = y.dims2();
                let mut out = Tensor::zeros(y.shape());
                for ((o, yr), gr) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                acc(*x, out);
            }
            Op::LayerNormRows { x, rstd } => {
                let (_, d) = y.dims2();
                let dn = T::lit(d as f64);
                let mut out = Tensor::zeros(y.shape());
                for (((o, yr), gr), &r) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(rstd)
                {
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = r * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, out);
            }
            Op::GatherRows { x, rows } => {
                let xs = self.shape(*x).to_vec();
                let d = xs[1];
                let mut full = Tensor::zeros(&xs);
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..d {
                        full.data_mut()[r * d + k] += g.data()[i * d + k];
                    }
                }
                acc(*x, full);
            }
            Op::Gather { x, index } => {
                let mut full = Tensor::zeros(self.shape(*x));
                for (&i, &v) in index.iter().zip(g.data()) {
                    full.data_mut()[i] += v;
                }
                acc(*x, full);
            }
            Op::ScatterRows { vis, token, rows } => {
                let (n, d) = g.dims2();
                let mut is_vis = vec![false; n];
                let mut gv = Vec::with_capacity(rows.len() * d);
                for &r in rows.iter() {
                    is_vis[r] = true;
                    gv.extend_from_slice(&g.data()[r * d..(r + 1) * d]);
                }
                acc(*vis, Tensor::new(&[rows.len(), d], gv));
                if self.ng(*token) {
                    let mut gt = vec![T::zero(); d];
                    for (r, &v) in is_vis.iter().enumerate() {
                        if !v {
                            for k in 0..d {
                                gt[k] += g.data()[r * d + k];
                            }
                        }
                    }
                    acc(*token, Tensor::new(&[d], gt));
                }
            }
            Op::MaskedFill { x, token, mask } => {
                let (c, h, w) = g.dims3();
                if self.ng(*x) {
                    let mut gx = g.clone();
                    for plane in gx.data_mut().chunks_mut(h * w) {
                        for (v, &m) in plane.iter_mut().zip(mask.iter()) {
                            if m {
                                *v = T::zero();
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if self.ng(*token) {
                    let gt = (0..c)
                        .map(|ci| {
                            g.channel(ci)
                                .iter()
                                .zip(mask.iter())
                                .filter(|(_, &m)| m)
                                .map(|(&v, _)| v)
                                .sum()
                        })
                        .collect();
                    acc(*token, Tensor::new(&[c], gt));
                }
            }
            Op::MeanAbsDiff { a, b, mask, count } => {
                let scale = g.item() / T::lit(*count as f64);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = av.zip_map(bv, |x, z| {
                    let d = x - z;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                if let Some(m) = mask {
                    for (v, &keep) in ga.data_mut().iter_mut().zip(m.iter()) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                }
                if self.ng(*b) {
                    acc(*b, ga.map(|v| -v));
                }
                acc(*a, ga);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, Tensor::full(self.shape(*x), g.item() / T::lit(n as f64)));
            }
            Op::Dft2(x) => {
                // The adjoint of the real-input DFT is hw * idft_real.
                let (_, h, w) = g.dims3();
                acc(*x, kernels::idft2_real(g).scale(T::lit((h * w) as f64)));
            }
            Op::Idft2Real(z) => {
                let (_, h, w) = g.dims3();
                acc(*z, kernels::dft2(g).scale(T::one() / T::lit((h * w) as f64)));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(u64, ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of the trainable parameters of `store`, indexed by
    /// [`ParamId`]. Parameters that did not take part are `None`.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for &(uid, id, v) in &self.params {
            if uid == store.uid() {
                out[id.0] = self.grads[v.0].clone();
            }
        }
        out
    }
}
