//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node, so the node list is
//! always in topological order. [`Graph::backward`] walks it once in reverse.
//!
//! Shape errors in operation arguments are programming errors and panic with a
//! description of the offending shapes; numerical problems are reported as
//! [`AutodiffError`] values from [`Graph::backward`].

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    ClampMin(NodeId, T),
    Exp(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Conv3d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    Upsample2(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    LogSoftmax { x: NodeId, axis: usize },
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    MeanLast(NodeId),
    L2NormLast(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Gather { x: NodeId, index: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::ClampMin(..) => "clamp_min",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample2(..) => "upsample2",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MeanLast(..) => "mean_last",
            Op::L2NormLast(..) => "l2_norm_last",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Build one per training step and drop it afterwards.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    first_nonfinite: Option<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar node with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for the leaf `id`; leaves off the path to the loss get exact zeros.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Whether any gradient reached `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Branch taken at every non-differentiable operation, in node order: one
    /// entry per ReLU or clamp element (above the kink or not) and one per
    /// max-pool window (winning offset). Two evaluations with equal patterns
    /// lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.data(*a).iter().map(|&x| (x > T::zero()) as u32)),
                Op::ClampMin(a, floor) => out.extend(self.data(*a).iter().map(|&x| (x > *floor) as u32)),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(id)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(T, T) -> T) -> Vec<T> {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{name}: operand shapes differ"
        );
        self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn elementwise(&mut self, data: Vec<T>, like: NodeId, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let shape = self.shape(like).to_vec();
        let rg = self.any_grad(inputs);
        self.push(Tensor::from_vec(&shape, data), op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.binary(a, b, "add", |x, y| x + y);
        self.elementwise(d, a, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.binary(a, b, "sub", |x, y| x - y);
        self.elementwise(d, a, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.binary(a, b, "mul", |x, y| x * y);
        self.elementwise(d, a, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.binary(a, b, "div", |x, y| x / y);
        self.elementwise(d, a, Op::Div(a, b), &[a, b])
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let d = self.data(a).iter().map(|&x| x * c).collect();
        self.elementwise(d, a, Op::Scale(a, c), &[a])
    }

    /// `max(a, floor)` elementwise; the gradient passes where `a >= floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: T) -> NodeId {
        let d = self.data(a).iter().map(|&x| x.max(floor)).collect();
        self.elementwise(d, a, Op::ClampMin(a, floor), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let d = self.data(a).iter().map(|&x| x.exp()).collect();
        self.elementwise(d, a, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let d = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        self.elementwise(d, a, Op::Relu(a), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let d = kernels::matmul(self.data(a), self.data(b), sa[0], sa[1], sb[1]);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(&[sa[0], sb[1]], d), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "transpose: expected a matrix, got {s:?}");
        let d = kernels::transpose(self.data(a), s[0], s[1]);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::from_vec(&[s[1], s[0]], d), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// 3-D convolution of `x: [Ci, D, H, W]` with `w: [Co, Ci, k, k, k]` and
    /// bias `b: [Co]`, zero padding `k / 2`, stride 1 or 2.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        assert!(
            sx.len() == 4 && sw.len() == 5 && sw[1] == sx[0] && sw[2] == sw[3] && sw[3] == sw[4] && sb == [sw[0]],
            "conv3d: incompatible shapes x={sx:?} w={sw:?} b={sb:?}"
        );
        let geom = ConvGeom::new(sx[0], sw[0], sw[2], stride, [sx[1], sx[2], sx[3]]);
        let d = kernels::conv3d_forward(self.data(x), self.data(w), self.data(b), &geom);
        let [od, oh, ow] = geom.output;
        let rg = self.any_grad(&[x, w, b]);
        self.push(
            Tensor::from_vec(&[sw[0], od, oh, ow], d),
            Op::Conv3d { x, w, b, geom },
            rg,
        )
    }

    /// Nearest-neighbour 2× upsampling of `[C, D, H, W]`.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2: expected [C, D, H, W], got {s:?}");
        let d = kernels::upsample2(self.data(x), s[0], [s[1], s[2], s[3]]);
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(&[s[0], 2 * s[1], 2 * s[2], 2 * s[3]], d),
            Op::Upsample2(x),
            rg,
        )
    }

    /// 2×2×2 max pooling of `[C, D, H, W]`; odd extents are floored.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 4 && s[1..].iter().all(|&e| e >= 2),
            "max_pool2: expected [C, D, H, W] with spatial extents >= 2, got {s:?}"
        );
        let (d, argmax, out) = kernels::max_pool2(self.data(x), s[0], [s[1], s[2], s[3]]);
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_vec(&[s[0], out[0], out[1], out[2]], d),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(axis < s.len(), "log_softmax: axis {axis} out of range for {s:?}");
        let (o, n, i) = kernels::split_axis(&s, axis);
        let d = kernels::log_softmax(self.data(x), o, n, i);
        self.elementwise(d, x, Op::LogSoftmax { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.data(x).iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::of(self.value(x).numel() as f64);
        let v = self.data(x).iter().fold(T::zero(), |a, &b| a + b) / n;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    fn reduce_last(&mut self, x: NodeId, op: Op<T>, f: impl Fn(&[T]) -> T) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(!s.is_empty(), "{}: rank-0 input", op.name());
        let n = *s.last().unwrap();
        let d: Vec<T> = self.data(x).chunks_exact(n).map(f).collect();
        let rg = self.any_grad(&[x]);
        let out = Tensor::new(s[..s.len() - 1].to_vec(), d).expect("reduced shape");
        self.push(out, op, rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        self.reduce_last(x, Op::SumLast(x), |r| r.iter().fold(T::zero(), |a, &b| a + b))
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: NodeId) -> NodeId {
        self.reduce_last(x, Op::MeanLast(x), |r| {
            r.iter().fold(T::zero(), |a, &b| a + b) / T::of(r.len() as f64)
        })
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm_last(&mut self, x: NodeId) -> NodeId {
        self.reduce_last(x, Op::L2NormLast(x), |r| {
            r.iter().fold(T::zero(), |a, &b| a + b * b).sqrt()
        })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
            );
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut d = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                d.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        self.push(
            Tensor::from_vec(&shape, d),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>) -> NodeId {
        let src = self.data(x);
        assert!(!index.is_empty(), "gather: empty index");
        let d: Vec<T> = index
            .iter()
            .map(|&i| {
                assert!(i < src.len(), "gather: index {i} out of range for {} elements", src.len());
                src[i]
            })
            .collect();
        let rg = self.any_grad(&[x]);
        let n = d.len();
        self.push(Tensor::from_vec(&[n], d), Op::Gather { x, index }, rg)
    }

    /// Reverse pass from the scalar node `loss`.
    ///
    /// Fails if `loss` is not a single value or if any node recorded so far
    /// produced a non-finite value (the error names the first such node).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                node: loss.0,
                shape: shapes[loss.0].clone(),
            });
        }
        if let Some(node) = self.first_nonfinite.filter(|&n| n <= loss.0) {
            return Err(AutodiffError::NonFinite {
                node,
                op: self.nodes[node].op.name(),
            });
        }

        let mut acc: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            acc[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(gy) = acc[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out[idx] = Some(Tensor::from_vec(&shapes[idx], gy));
            } else {
                self.propagate(node, &gy, &mut acc);
            }
        }
        Ok(Gradients { grads: out, shapes })
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], acc: &mut [Option<Vec<T>>]) {
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b].into_iter() {
                    if rg(p) {
                        add_into(&mut acc[p.0], gy.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(&mut acc[a.0], gy.to_vec());
                }
                if rg(*b) {
                    add_into(&mut acc[b.0], gy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    add_into(&mut acc[a.0], gy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if rg(*b) {
                    add_into(&mut acc[b.0], gy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let vb = self.data(*b);
                if rg(*a) {
                    add_into(&mut acc[a.0], gy.iter().zip(vb).map(|(&g, &y)| g / y).collect());
                }
                if rg(*b) {
                    let out = node.value.data();
                    add_into(
                        &mut acc[b.0],
                        gy.iter()
                            .zip(out.iter().zip(vb))
                            .map(|(&g, (&q, &y))| -g * q / y)
                            .collect(),
                    );
                }
            }
            Op::Scale(a, c) => add_into(&mut acc[a.0], gy.iter().map(|&g| g * *c).collect()),
            Op::ClampMin(a, floor) => add_into(
                &mut acc[a.0],
                gy.iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| if x >= *floor { g } else { T::zero() })
                    .collect(),
            ),
            Op::Exp(a) => add_into(
                &mut acc[a.0],
                gy.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect(),
            ),
            Op::Relu(a) => add_into(
                &mut acc[a.0],
                gy.iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            ),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let bt = kernels::transpose(self.data(*b), k, n);
                    add_into(&mut acc[a.0], kernels::matmul(gy, &bt, m, n, k));
                }
                if rg(*b) {
                    let at = kernels::transpose(self.data(*a), m, k);
                    add_into(&mut acc[b.0], kernels::matmul(&at, gy, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                add_into(&mut acc[a.0], kernels::transpose(gy, s[0], s[1]));
            }
            Op::Reshape(a) => add_into(&mut acc[a.0], gy.to_vec()),
            Op::Conv3d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv3d_backward(
                    self.data(*x),
                    self.data(*w),
                    gy,
                    geom,
                    rg(*x),
                    rg(*w) || rg(*b),
                );
                if let Some(gx) = gx {
                    add_into(&mut acc[x.0], gx);
                }
                if rg(*w) {
                    add_into(&mut acc[w.0], gw.expect("weight grad"));
                }
                if rg(*b) {
                    add_into(&mut acc[b.0], gb.expect("bias grad"));
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                add_into(
                    &mut acc[x.0],
                    kernels::upsample2_backward(gy, s[0], [s[1], s[2], s[3]]),
                );
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&g, &i) in gy.iter().zip(argmax) {
                    gx[i as usize] += g;
                }
                add_into(&mut acc[x.0], gx);
            }
            Op::LogSoftmax { x, axis } => {
                let (o, n, i) = kernels::split_axis(node.value.shape(), *axis);
                add_into(
                    &mut acc[x.0],
                    kernels::log_softmax_backward(node.value.data(), gy, o, n, i),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_into(&mut acc[x.0], vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                add_into(&mut acc[x.0], vec![gy[0] / T::of(n as f64); n]);
            }
            Op::SumLast(x) | Op::MeanLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                let scale = if matches!(node.op, Op::MeanLast(_)) {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                let g = gy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, n))
                    .collect();
                add_into(&mut acc[x.0], g);
            }
            Op::L2NormLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                let norms = node.value.data();
                let g = self
                    .data(*x)
                    .chunks_exact(n)
                    .zip(gy.iter().zip(norms))
                    .flat_map(|(row, (&g, &nrm))| {
                        row.iter().map(move |&v| {
                            if nrm > T::zero() {
                                g * v / nrm
                            } else {
                                T::zero()
                            }
                        })
                    })
                    .collect();
                add_into(&mut acc[x.0], g);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if rg(p) {
                        let mut g = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            g.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                        }
                        add_into(&mut acc[p.0], g);
                    }
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&g, &i) in gy.iter().zip(index) {
                    gx[i] += g;
                }
                add_into(&mut acc[x.0], gx);
            }
        }
    }
}

/// Runs the reverse pass and returns the loss value with its gradients.
pub fn eval_with_gradients<T: Scalar>(graph: &Graph<T>, loss: NodeId) -> Result<(T, Gradients<T>)> {
    let grads = graph.backward(loss)?;
    Ok((graph.value(loss).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
        let x = g.constant(Tensor::from_vec(&[3], vec![3.0, 4.0, -5.0]));
        let p = g.mul(w, x);
        let loss = g.sum(p);
        let (v, grads) = eval_with_gradients(&g, loss).unwrap();
        assert_eq!(v, 1.5 - 4.0 - 10.0);
        assert_eq!(grads.get(w).data(), &[3.0, 4.0, -5.0]);
        assert!(!grads.reached(x));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let sq = g.mul(w, w);
        let loss = g.sum(sq);
        let (_, grads) = eval_with_gradients(&g, loss).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_exact_zeros() {
        let mut g = Graph::<f64>::new();
        let used = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let unused = g.param(Tensor::from_vec(&[2, 2], vec![1.0; 4]));
        let loss = g.sum(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = g.relu(w);
        assert!(matches!(
            g.backward(y),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn nan_is_reported_with_producing_node() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_vec(&[1], vec![0.0]));
        let b = g.constant(Tensor::from_vec(&[1], vec![0.0]));
        let q = g.div(a, b);
        let loss = g.sum(q);
        match g.backward(loss) {
            Err(AutodiffError::NonFinite { node, op }) => {
                assert_eq!(node, q.index());
                assert_eq!(op, "div");
            }
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) -> 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[2], vec![3.0, -1.0]));
        let sq = g.mul(x, x);
        let s = g.add(sq, x);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[7.0, -1.0]);
    }

    #[test]
    #[should_panic(expected = "operand shapes differ")]
    fn mismatched_add_panics() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        g.add(a, b);
    }
}
