//! Reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! A [`Tape`] records every primitive evaluated through it together with
//! the forward value. [`Tape::backward`] walks the records in reverse and
//! accumulates vector-Jacobian products. Composite operations (transpose,
//! row broadcast, average pooling, row normalization, log-sum-exp) are
//! built out of the primitives and carry no backward code of their own.

use super::ops::{align_corners_coord, matmul_into};
use super::Tensor;
use crate::scalar::Scalar;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    Shift(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Conv3x3 { input: Var, weight: Var, bias: Var },
    Softmax { input: Var, axis: usize },
    Bilinear(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    Gather { input: Var, index: Vec<usize> },
    Reshape(Var),
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    trainable: bool,
    needs_grad: bool,
}

/// Single-writer recording of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaves recorded so far, in creation order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| Var(i))
            .collect()
    }

    // ---- primitives -------------------------------------------------------

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.rank() == 2 && bv.rank() == 2 && av.shape()[1] == bv.shape()[0],
            "matmul shape mismatch {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).expect("matmul output");
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), value, &[a, b])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value, &[a])
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::Shift(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(Op::Relu(a), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), value, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        self.push(Op::Ln(a), value, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        self.push(Op::Sqrt(a), value, &[a])
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `input [Cin, H, W]`, `weight [Cout, Cin, 3, 3]`, `bias [Cout]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        assert_eq!(x.rank(), 3, "conv3x3 input must be [Cin,H,W]");
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(w.shape(), &[w.shape()[0], cin, 3, 3], "conv3x3 weight shape");
        let cout = w.shape()[0];
        assert_eq!(b.shape(), &[cout], "conv3x3 bias shape");
        let mut out = vec![S::zero(); cout * h * wd];
        conv_forward(x.data(), w.data(), b.data(), &mut out, cin, cout, h, wd);
        let value = Tensor::new(vec![cout, h, wd], out).expect("conv output");
        self.push(Op::Conv3x3 { input, weight, bias }, value, &[input, weight, bias])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let value = super::ops::softmax(self.value(a), axis).expect("softmax axis");
        self.push(Op::Softmax { input: a, axis }, value, &[a])
    }

    /// Align-corners bilinear resize of `[B, K, H, W]` to `[B, K, h, w]`.
    pub fn bilinear(&mut self, a: Var, h: usize, w: usize) -> Var {
        let value = super::ops::bilinear_resize(self.value(a), h, w).expect("bilinear extents");
        self.push(Op::Bilinear(a), value, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / S::lit(t.len() as f64));
        self.push(Op::Mean(a), value, &[a])
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        assert!(axis < t.rank(), "sum_axis axis out of range");
        let (outer, len, inner) = t.axis_split(axis);
        let mut out = vec![S::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out).expect("sum_axis output");
        self.push(Op::SumAxis { input: a, axis }, value, &[a])
    }

    /// `out[i] = a.data[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.value(a).data();
        let data: Vec<S> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("gather shape");
        self.push(Op::Gather { input: a, index }, value, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape extents");
        self.push(Op::Reshape(a), value, &[a])
    }

    /// Stacks values along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat needs at least one input");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat trailing extents differ");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data).expect("concat output");
        self.push(Op::Concat(parts.to_vec()), value, parts)
    }

    // ---- composites -------------------------------------------------------

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -S::one());
        self.add(a, nb)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        let index = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(a, index, &[n, m])
    }

    /// Repeats a length-`n` vector into `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Var {
        let n = self.value(v).len();
        let index = (0..rows).flat_map(|_| 0..n).collect();
        self.gather(v, index, &[rows, n])
    }

    /// Repeats a length-`m` vector into `[m, cols]` (each entry across a row).
    pub fn broadcast_cols(&mut self, v: Var, cols: usize) -> Var {
        let m = self.value(v).len();
        let index = (0..m).flat_map(|i| std::iter::repeat_n(i, cols)).collect();
        self.gather(v, index, &[m, cols])
    }

    /// `x [m, k] . w [k, n] + b [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let m = self.shape(x)[0];
        let xw = self.matmul(x, w);
        let bb = self.broadcast_rows(b, m);
        self.add(xw, bb)
    }

    /// 2x2 average pooling of `[C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = {
            let s = self.shape(x);
            (s[0], s[1], s[2])
        };
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let mut acc: Option<Var> = None;
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut index = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        index.push(ch * h * w + (2 * y + dy) * w + 2 * xx + dx);
                    }
                }
            }
            let g = self.gather(x, index, &[c, oh, ow]);
            acc = Some(match acc {
                None => g,
                Some(a) => self.add(a, g),
            });
        }
        self.scale(acc.expect("four taps"), S::lit(0.25))
    }

    /// Row-wise unit normalization of `[N, D]`: `x / sqrt(|x|^2 + eps^2)`.
    /// Zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: S) -> Var {
        let d = self.shape(x)[1];
        let sq = self.mul(x, x);
        let ss = self.sum_axis(sq, 1);
        let ss = self.shift(ss, eps * eps);
        let norm = self.sqrt(ss);
        let nb = self.broadcast_cols(norm, d);
        self.div(x, nb)
    }

    /// Row-wise log-sum-exp of `[N, D]`, shifted by the detached row max.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let maxes: Vec<S> = (0..n)
            .map(|i| {
                self.value(x).data()[i * d..(i + 1) * d]
                    .iter()
                    .fold(S::neg_infinity(), |m, &v| m.max(v))
            })
            .collect();
        let mv = self.constant(Tensor::new(vec![n], maxes).expect("row maxes"));
        let mb = self.broadcast_cols(mv, d);
        let shifted = self.sub(x, mb);
        let e = self.exp(shifted);
        let s = self.sum_axis(e, 1);
        let l = self.ln(s);
        self.add(l, mv)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `output` with respect to every recorded value
    /// that depends on a trainable leaf.
    pub fn backward(&self, output: Var) -> Gradients<S> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), S::one()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let v = self.value(p);
                    let len = v.len();
                    if needs(p) {
                        let part = g.data()[start..start + len].to_vec();
                        accumulate(grads, p, Tensor::new(v.shape().to_vec(), part).unwrap());
                    }
                    start += len;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    // dA = G . B^T
                    let mut da = vec![S::zero(); m * k];
                    let (gd, bd) = (g.data(), bv.data());
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = super::ops::dot(
                                &gd[i * nn..(i + 1) * nn],
                                &bd[p * nn..(p + 1) * nn],
                            );
                        }
                    }
                    accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if needs(*b) {
                    // dB = A^T . G
                    let mut db = vec![S::zero(); k * nn];
                    let (ad, gd) = (av.data(), g.data());
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == S::zero() {
                                continue;
                            }
                            let grow = &gd[i * nn..(i + 1) * nn];
                            for (d, &gv) in db[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![k, nn], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if needs(*a) {
                    accumulate(grads, *a, g.zip_map(bv, |gv, d| gv / d));
                }
                if needs(*b) {
                    let q = &node.value;
                    let t = g.zip_map(q, |gv, qv| gv * qv);
                    accumulate(grads, *b, t.zip_map(bv, |tv, d| -tv / d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Shift(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gv, xv| if xv > S::zero() { gv } else { S::zero() }),
                );
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |gv, y| gv * y)),
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Sqrt(a) => {
                let half = S::lit(0.5);
                accumulate(grads, *a, g.zip_map(&node.value, |gv, y| gv * half / y));
            }
            Op::Conv3x3 { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let cout = w.shape()[0];
                if needs(*bias) {
                    let mut db = vec![S::zero(); cout];
                    for (co, d) in db.iter_mut().enumerate() {
                        *d = crate::scalar::tree_sum(&g.data()[co * h * wd..(co + 1) * h * wd]);
                    }
                    accumulate(grads, *bias, Tensor::new(vec![cout], db).unwrap());
                }
                if needs(*weight) {
                    let mut dw = vec![S::zero(); cout * cin * 9];
                    conv_weight_grad(x.data(), g.data(), &mut dw, cin, cout, h, wd);
                    accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw).unwrap());
                }
                if needs(*input) {
                    let mut dx = vec![S::zero(); cin * h * wd];
                    conv_input_grad(w.data(), g.data(), &mut dx, cin, cout, h, wd);
                    accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, len, inner) = y.axis_split(*axis);
                let mut dx = vec![S::zero(); y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut dotv = S::zero();
                        for i in 0..len {
                            dotv += yd[base + i * inner] * gd[base + i * inner];
                        }
                        for i in 0..len {
                            let idx = base + i * inner;
                            dx[idx] = yd[idx] * (gd[idx] - dotv);
                        }
                    }
                }
                accumulate(grads, *input, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Bilinear(a) => {
                let x = self.value(*a);
                let s = x.shape();
                let (planes, sh, sw) = (s[0] * s[1], s[2], s[3]);
                let (h, w) = (node.value.shape()[2], node.value.shape()[3]);
                let mut dx = vec![S::zero(); x.len()];
                if h == sh && w == sw {
                    dx.copy_from_slice(g.data());
                } else {
                    let ys: Vec<_> = (0..h).map(|y| align_corners_coord(y, sh, h)).collect();
                    let xs: Vec<_> = (0..w).map(|x| align_corners_coord(x, sw, w)).collect();
                    let gd = g.data();
                    for p in 0..planes {
                        let src = p * sh * sw;
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            let fy = S::lit(fy);
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let fx = S::lit(fx);
                                let gv = gd[(p * h + oy) * w + ox];
                                let top = gv * (S::one() - fy);
                                let bot = gv * fy;
                                dx[src + y0 * sw + x0] += top * (S::one() - fx);
                                dx[src + y0 * sw + x1] += top * fx;
                                dx[src + y1 * sw + x0] += bot * (S::one() - fx);
                                dx[src + y1 * sw + x1] += bot * fx;
                            }
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let gv = g.data()[0] / S::lit(n as f64);
                accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::SumAxis { input, axis } => {
                let x = self.value(*input);
                let (outer, len, inner) = x.axis_split(*axis);
                let mut dx = vec![S::zero(); x.len()];
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..len {
                        dx[(o * len + i) * inner..(o * len + i + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::Gather { input, index } => {
                let x = self.value(*input);
                let mut dx = vec![S::zero(); x.len()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, g.clone().reshape(&shape).unwrap());
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    out: &mut [S],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    for co in 0..cout {
        let o = &mut out[co * h * wd..(co + 1) * h * wd];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    for_each_tap(h, wd, ky, kx, |oy, ox0, ix0, len| {
                        let orow = &mut o[oy * wd + ox0..oy * wd + ox0 + len];
                        let iy = oy + ky - 1;
                        let irow = &xin[iy * wd + ix0..iy * wd + ix0 + len];
                        for (ov, &iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    });
                }
            }
        }
    }
}

fn conv_weight_grad<S: Scalar>(
    x: &[S],
    g: &[S],
    dw: &mut [S],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    for co in 0..cout {
        let go = &g[co * h * wd..(co + 1) * h * wd];
        for ci in 0..cin {
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = S::zero();
                    for_each_tap(h, wd, ky, kx, |oy, ox0, ix0, len| {
                        let iy = oy + ky - 1;
                        acc += super::ops::dot(
                            &go[oy * wd + ox0..oy * wd + ox0 + len],
                            &xin[iy * wd + ix0..iy * wd + ix0 + len],
                        );
                    });
                    dw[((co * cin + ci) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
}

fn conv_input_grad<S: Scalar>(
    w: &[S],
    g: &[S],
    dx: &mut [S],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) {
    for co in 0..cout {
        let go = &g[co * h * wd..(co + 1) * h * wd];
        for ci in 0..cin {
            let dxi = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    for_each_tap(h, wd, ky, kx, |oy, ox0, ix0, len| {
                        let iy = oy + ky - 1;
                        let drow = &mut dxi[iy * wd + ix0..iy * wd + ix0 + len];
                        for (d, &gv) in drow.iter_mut().zip(&go[oy * wd + ox0..oy * wd + ox0 + len]) {
                            *d += wv * gv;
                        }
                    });
                }
            }
        }
    }
}

/// Visits each output row for kernel tap `(ky, kx)` with the in-bounds
/// column span: `f(out_y, out_x0, in_x0, len)`.
#[inline]
fn for_each_tap(h: usize, wd: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let y_lo = if ky == 0 { 1 } else { 0 };
    let y_hi = if ky == 2 { h.saturating_sub(1) } else { h };
    let (ox0, ix0, len) = match kx {
        0 => (1, 0, wd.saturating_sub(1)),
        1 => (0, 0, wd),
        _ => (0, 1, wd.saturating_sub(1)),
    };
    if len == 0 {
        return;
    }
    for oy in y_lo..y_hi {
        f(oy, ox0, ix0, len);
    }
}
