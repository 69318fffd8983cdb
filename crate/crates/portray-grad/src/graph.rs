//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns an append-only arena of nodes; construction order is the
//! topological order, so backward is a single reverse sweep. Graphs are
//! single-threaded and cheap to build — training code builds one graph per
//! sample per step and drops it afterwards.

use std::cell::RefCell;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Sqrt(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    SoftmaxAxis(usize, usize),
    LayerNorm(usize),
    InstanceNorm2d(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice { a: usize, axis: usize, start: usize },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    UpsampleNearest2x(usize),
    AvgPool2x(usize),
    GridSampleVolume { vol: usize, flow: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

const LN_EPS: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked through it.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` produces a gradient for it.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        let ng = self.needs(&[a.0]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x.add(y))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x.sub(y))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x.mul(y))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x.map(|v| v + c))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MulScalar(a.0, c), |x| x.map(|v| v * c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.map(|v| v.max(0.0)))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Op::Silu(a.0), |x| x.map(|v| v / (1.0 + (-v).exp())))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.map(f64::tanh))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| x.map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.map(f64::exp))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), |x| x.map(f64::sqrt))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), |x| x.map(f64::abs))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum(a.0), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, Op::Mean(a.0), |x| Tensor::scalar(x.mean()))
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        self.unary(a, Op::SumAxis(a.0, axis), |x| sum_axis_fwd(x, axis))
    }

    pub fn softmax_axis(&self, a: Var, axis: usize) -> Var {
        self.unary(a, Op::SoftmaxAxis(a.0, axis), |x| softmax_axis_fwd(x, axis))
    }

    /// Layer norm over the last dimension, no affine part.
    pub fn layer_norm(&self, a: Var) -> Var {
        self.unary(a, Op::LayerNorm(a.0), layer_norm_fwd)
    }

    /// Per-channel normalization of a `[C, H, W]` tensor over its spatial dims.
    pub fn instance_norm_2d(&self, a: Var) -> Var {
        self.unary(a, Op::InstanceNorm2d(a.0), instance_norm_fwd)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        self.unary(a, Op::Reshape(a.0), |x| x.clone().reshaped(shape))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        self.unary(a, Op::Permute(a.0, perm.to_vec()), |x| permute_fwd(x, perm))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            concat_fwd(&tensors, axis)
        };
        let ng = self.needs(&ids);
        self.push(value, Op::Concat(ids, axis), ng)
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        self.unary(a, Op::Slice { a: a.0, axis, start }, |x| slice_fwd(x, axis, start, len))
    }

    /// Matrix product over the last two dims; 2-D or batched 3-D with equal
    /// leading dimension. `ta`/`tb` transpose the last two dims of an operand.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.binary(a, b, Op::MatMul { a: a.0, b: b.0, ta, tb }, |x, y| {
            matmul_fwd(x, y, ta, tb)
        })
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv2d_fwd(
                &nodes[x.0].value,
                &nodes[w.0].value,
                b.map(|bv| nodes[bv.0].value.clone()).as_ref(),
                stride,
                pad,
            )
        };
        let mut ids = vec![x.0, w.0];
        if let Some(bv) = b {
            ids.push(bv.0);
        }
        let ng = self.needs(&ids);
        self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), stride, pad }, ng)
    }

    pub fn upsample_nearest_2x(&self, a: Var) -> Var {
        self.unary(a, Op::UpsampleNearest2x(a.0), upsample_fwd)
    }

    pub fn avg_pool_2x(&self, a: Var) -> Var {
        self.unary(a, Op::AvgPool2x(a.0), avg_pool_fwd)
    }

    /// Trilinear sampling of `vol` `[C, D, H, W]` at voxel centers displaced
    /// by `flow` `[D, H, W, 3]` (normalized coordinates). Coordinates are
    /// clamped at the volume border.
    pub fn grid_sample_volume(&self, vol: Var, flow: Var) -> Var {
        self.binary(vol, flow, Op::GridSampleVolume { vol: vol.0, flow: flow.0 }, |v, f| {
            grid_sample_fwd(v, f)
        })
    }

    /// Reverse sweep from a scalar node. Returns one gradient slot per node;
    /// only nodes on a differentiable path to `root` are populated.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                continue;
            }
            let grad = grads[id].take().unwrap();
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &nodes, *a, grad.reduce_to_shape(nodes[*a].value.shape()));
                    accumulate(&mut grads, &nodes, *b, grad.reduce_to_shape(nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &nodes, *a, grad.reduce_to_shape(nodes[*a].value.shape()));
                    accumulate(
                        &mut grads,
                        &nodes,
                        *b,
                        grad.scale(-1.0).reduce_to_shape(nodes[*b].value.shape()),
                    );
                }
                Op::Mul(a, b) => {
                    let ga = grad.mul(&nodes[*b].value).reduce_to_shape(nodes[*a].value.shape());
                    let gb = grad.mul(&nodes[*a].value).reduce_to_shape(nodes[*b].value.shape());
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::AddScalar(a) => accumulate(&mut grads, &nodes, *a, grad),
                Op::MulScalar(a, c) => accumulate(&mut grads, &nodes, *a, grad.scale(*c)),
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    let g = grad.broadcast_zip(x, |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Silu(a) => {
                    let x = &nodes[*a].value;
                    let g = grad.broadcast_zip(x, |g, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Tanh(a) => {
                    let g = grad.broadcast_zip(&node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = grad.broadcast_zip(&node.value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Exp(a) => {
                    let g = grad.mul(&node.value);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Sqrt(a) => {
                    let g = grad.broadcast_zip(&node.value, |g, y| g * 0.5 / y.max(1e-300));
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Abs(a) => {
                    let x = &nodes[*a].value;
                    let g = grad.broadcast_zip(x, |g, x| g * sign(x));
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Sum(a) => {
                    let g = Tensor::full(nodes[*a].value.shape(), grad.item());
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel() as f64;
                    let g = Tensor::full(nodes[*a].value.shape(), grad.item() / n);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::SumAxis(a, axis) => {
                    let g = sum_axis_bwd(&grad, nodes[*a].value.shape(), *axis);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::SoftmaxAxis(a, axis) => {
                    let g = softmax_axis_bwd(&node.value, &grad, *axis);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::LayerNorm(a) => {
                    let g = layer_norm_bwd(&nodes[*a].value, &node.value, &grad);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::InstanceNorm2d(a) => {
                    let g = instance_norm_bwd(&nodes[*a].value, &node.value, &grad);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Reshape(a) => {
                    let g = grad.clone().reshaped(nodes[*a].value.shape());
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Permute(a, perm) => {
                    let inv = inverse_perm(perm);
                    let g = permute_fwd(&grad, &inv);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::Concat(ids, axis) => {
                    let mut start = 0;
                    for &pid in ids {
                        let len = nodes[pid].value.shape()[*axis];
                        let g = slice_fwd(&grad, *axis, start, len);
                        start += len;
                        accumulate(&mut grads, &nodes, pid, g);
                    }
                }
                Op::Slice { a, axis, start } => {
                    let g = slice_bwd(&grad, nodes[*a].value.shape(), *axis, *start);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (ga, gb) =
                        matmul_bwd(&nodes[*a].value, &nodes[*b].value, &grad, *ta, *tb);
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        conv2d_bwd(&nodes[*x].value, &nodes[*w].value, &grad, *stride, *pad);
                    accumulate(&mut grads, &nodes, *x, gx);
                    accumulate(&mut grads, &nodes, *w, gw);
                    if let Some(bid) = b {
                        accumulate(&mut grads, &nodes, *bid, gb);
                    }
                }
                Op::UpsampleNearest2x(a) => {
                    let g = upsample_bwd(&grad);
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::AvgPool2x(a) => {
                    let g = avg_pool_bwd(&grad, nodes[*a].value.shape());
                    accumulate(&mut grads, &nodes, *a, g);
                }
                Op::GridSampleVolume { vol, flow } => {
                    let (gv, gf) = grid_sample_bwd(&nodes[*vol].value, &nodes[*flow].value, &grad);
                    accumulate(&mut grads, &nodes, *vol, gv);
                    accumulate(&mut grads, &nodes, *flow, gf);
                }
            }
        }
        grads
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape(), "gradient shape mismatch");
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Decompose `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn sum_axis_fwd(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let mut out = Tensor::zeros(&out_shape);
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            let obase = o * inner;
            for i in 0..inner {
                od[obase + i] += xd[base + i];
            }
        }
    }
    out
}

fn sum_axis_bwd(grad: &Tensor, in_shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let mut out = Tensor::zeros(in_shape);
    let gd = grad.data();
    let od = out.data_mut();
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            let gbase = o * inner;
            od[base..base + inner].copy_from_slice(&gd[gbase..gbase + inner]);
        }
    }
    out
}

fn softmax_axis_fwd(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(od[idx(k)]);
            }
            let mut denom = 0.0;
            for k in 0..len {
                let e = (od[idx(k)] - max).exp();
                od[idx(k)] = e;
                denom += e;
            }
            for k in 0..len {
                od[idx(k)] /= denom;
            }
        }
    }
    out
}

fn softmax_axis_bwd(y: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut out = Tensor::zeros(y.shape());
    let yd = y.data();
    let gd = grad.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut dot = 0.0;
            for k in 0..len {
                dot += gd[idx(k)] * yd[idx(k)];
            }
            for k in 0..len {
                od[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    out
}

fn layer_norm_fwd(x: &Tensor) -> Tensor {
    let last = *x.shape().last().expect("layer_norm on 0-d tensor");
    let rows = x.numel() / last;
    let mut out = x.clone();
    let od = out.data_mut();
    for r in 0..rows {
        let row = &mut od[r * last..(r + 1) * last];
        let mean = row.iter().sum::<f64>() / last as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn layer_norm_bwd(x: &Tensor, y: &Tensor, grad: &Tensor) -> Tensor {
    let last = *x.shape().last().unwrap();
    let rows = x.numel() / last;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data();
    let gd = grad.data();
    let od = out.data_mut();
    for r in 0..rows {
        let s = r * last;
        let row_x = &xd[s..s + last];
        let mean = row_x.iter().sum::<f64>() / last as f64;
        let var = row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let g_mean = gd[s..s + last].iter().sum::<f64>() / last as f64;
        let gy_dot =
            gd[s..s + last].iter().zip(&yd[s..s + last]).map(|(g, y)| g * y).sum::<f64>()
                / last as f64;
        for i in 0..last {
            od[s + i] = inv * (gd[s + i] - g_mean - yd[s + i] * gy_dot);
        }
    }
    out
}

fn instance_norm_fwd(x: &Tensor) -> Tensor {
    assert_eq!(x.shape().len(), 3, "instance_norm_2d expects [C,H,W]");
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut out = x.clone();
    let od = out.data_mut();
    for ch in 0..c {
        let row = &mut od[ch * hw..(ch + 1) * hw];
        let mean = row.iter().sum::<f64>() / hw as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn instance_norm_bwd(x: &Tensor, y: &Tensor, grad: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data();
    let gd = grad.data();
    let od = out.data_mut();
    for ch in 0..c {
        let s = ch * hw;
        let row_x = &xd[s..s + hw];
        let mean = row_x.iter().sum::<f64>() / hw as f64;
        let var = row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let g_mean = gd[s..s + hw].iter().sum::<f64>() / hw as f64;
        let gy_dot =
            gd[s..s + hw].iter().zip(&yd[s..s + hw]).map(|(g, y)| g * y).sum::<f64>() / hw as f64;
        for i in 0..hw {
            od[s + i] = inv * (gd[s + i] - g_mean - yd[s + i] * gy_dot);
        }
    }
    out
}

fn permute_fwd(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides_in = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides_in[d] = strides_in[d + 1] * shape[d + 1];
    }
    let perm_strides: Vec<usize> = perm.iter().map(|&p| strides_in[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(x.data()[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= perm_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}

fn concat_fwd(tensors: &[&Tensor], axis: usize) -> Tensor {
    let first = tensors[0].shape();
    let mut out_shape = first.to_vec();
    out_shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    for t in tensors {
        assert_eq!(t.shape().len(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in t.shape().iter().zip(&out_shape).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch on dim {}", d);
        }
    }
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let total_len = out_shape[axis];
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let mut start = 0usize;
    for t in tensors {
        let len = t.shape()[axis];
        let td = t.data();
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * total_len + start) * inner;
            od[dst..dst + len * inner].copy_from_slice(&td[src..src + len * inner]);
        }
        start += len;
    }
    out
}

fn slice_fwd(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full_len, inner) = axis_split(x.shape(), axis);
    assert!(start + len <= full_len, "slice out of range");
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        let src = (o * full_len + start) * inner;
        let dst = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
    }
    out
}

fn slice_bwd(grad: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full_len, inner) = axis_split(in_shape, axis);
    let len = grad.shape()[axis];
    let mut out = Tensor::zeros(in_shape);
    let gd = grad.data();
    let od = out.data_mut();
    for o in 0..outer {
        let dst = (o * full_len + start) * inner;
        let src = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    out
}

fn mat_dims(shape: &[usize], t: bool) -> (usize, usize, usize) {
    // (batch, rows, cols) of the effective (possibly transposed) matrix
    match shape.len() {
        2 => {
            if t {
                (1, shape[1], shape[0])
            } else {
                (1, shape[0], shape[1])
            }
        }
        3 => {
            if t {
                (shape[0], shape[2], shape[1])
            } else {
                (shape[0], shape[1], shape[2])
            }
        }
        _ => panic!("matmul operand must be 2-D or 3-D, got {:?}", shape),
    }
}

fn matmul_fwd(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ba, m, ka) = mat_dims(a.shape(), ta);
    let (bb, kb, n) = mat_dims(b.shape(), tb);
    assert_eq!(ka, kb, "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
    let batch = ba.max(bb);
    assert!(
        ba == bb || ba == 1 || bb == 1,
        "matmul batch dims: {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let out_shape: Vec<usize> = if a.shape().len() == 2 && b.shape().len() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        for bi in 0..batch {
            let a_off = if ba == 1 { 0 } else { bi * m * ka };
            let b_off = if bb == 1 { 0 } else { bi * ka * n };
            let a_mat = mat_view(a, a_off, m, ka, ta);
            let b_mat = mat_view(b, b_off, ka, n, tb);
            let c = a_mat.dot(&b_mat);
            let slice = &mut od[bi * m * n..(bi + 1) * m * n];
            slice.copy_from_slice(c.as_standard_layout().as_slice().unwrap());
        }
    }
    out
}

fn mat_view(t: &Tensor, off: usize, rows: usize, cols: usize, trans: bool) -> ndarray::ArrayView2<'_, f64> {
    // (rows, cols) are the EFFECTIVE dims after optional transpose.
    let (sr, sc) = if trans { (cols, rows) } else { (rows, cols) };
    let stored =
        ndarray::ArrayView2::from_shape((sr, sc), &t.data()[off..off + sr * sc]).unwrap();
    if trans {
        stored.reversed_axes()
    } else {
        stored
    }
}

fn matmul_bwd(a: &Tensor, b: &Tensor, grad: &Tensor, ta: bool, tb: bool) -> (Tensor, Tensor) {
    // Effective forward: Y = A_eff (m,k) . B_eff (k,n)
    // dA_eff = G . B_eff^T ; dB_eff = A_eff^T . G
    let (ba, m, k) = mat_dims(a.shape(), ta);
    let (bb, _, n) = mat_dims(b.shape(), tb);
    let batch = ba.max(bb);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for bi in 0..batch {
        let a_off = if ba == 1 { 0 } else { bi * m * k };
        let b_off = if bb == 1 { 0 } else { bi * k * n };
        let g_off = bi * m * n;
        let a_mat = mat_view(a, a_off, m, k, ta);
        let b_mat = mat_view(b, b_off, k, n, tb);
        let g_mat =
            ndarray::ArrayView2::from_shape((m, n), &grad.data()[g_off..g_off + m * n]).unwrap();
        let da_eff = g_mat.dot(&b_mat.t()); // (m,k)
        let db_eff = a_mat.t().dot(&g_mat); // (k,n)
        // map effective grads back through the transpose flags
        let da_stored = if ta { da_eff.reversed_axes() } else { da_eff };
        let db_stored = if tb { db_eff.reversed_axes() } else { db_eff };
        let da_sl = da_stored.as_standard_layout();
        let db_sl = db_stored.as_standard_layout();
        let ga_slice = &mut ga.data_mut()[a_off..a_off + m * k];
        for (dst, src) in ga_slice.iter_mut().zip(da_sl.iter()) {
            *dst += src;
        }
        let gb_slice = &mut gb.data_mut()[b_off..b_off + k * n];
        for (dst, src) in gb_slice.iter_mut().zip(db_sl.iter()) {
            *dst += src;
        }
    }
    (ga, gb)
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> (Tensor, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Tensor::zeros(&[c * kh * kw, ho * wo]);
    let xd = x.data();
    let cd = cols.data_mut();
    let row_len = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * row_len;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let x_base = (ci * h + ii as usize) * w;
                    let out_base = row + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            cd[out_base + oj] = xd[x_base + jj as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(
    cols: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut x = Tensor::zeros(&[c, h, w]);
    let cd = cols.data();
    let xd = x.data_mut();
    let row_len = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * row_len;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let x_base = (ci * h + ii as usize) * w;
                    let in_base = row + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            xd[x_base + jj as usize] += cd[in_base + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    assert_eq!(x.shape().len(), 3, "conv2d input must be [C,H,W]");
    assert_eq!(w.shape().len(), 4, "conv2d weight must be [O,C,kh,kw]");
    let (o, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, x.shape()[0], "conv2d channel mismatch");
    let (cols, ho, wo) = im2col(x, kh, kw, stride, pad);
    let w_mat = ndarray::ArrayView2::from_shape((o, c * kh * kw), w.data()).unwrap();
    let c_mat = ndarray::ArrayView2::from_shape((c * kh * kw, ho * wo), cols.data()).unwrap();
    let y = w_mat.dot(&c_mat);
    let mut out = Tensor::new(&[o, ho, wo], y.into_raw_vec_and_offset().0);
    if let Some(bias) = b {
        assert_eq!(bias.numel(), o);
        let od = out.data_mut();
        for oi in 0..o {
            let bv = bias.data()[oi];
            for v in &mut od[oi * ho * wo..(oi + 1) * ho * wo] {
                *v += bv;
            }
        }
    }
    out
}

fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (o, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (cols, ho, wo) = im2col(x, kh, kw, stride, pad);
    let g_mat = ndarray::ArrayView2::from_shape((o, ho * wo), grad.data()).unwrap();
    let c_mat = ndarray::ArrayView2::from_shape((c * kh * kw, ho * wo), cols.data()).unwrap();
    let w_mat = ndarray::ArrayView2::from_shape((o, c * kh * kw), w.data()).unwrap();
    let gw = g_mat.dot(&c_mat.t());
    let gcols = w_mat.t().dot(&g_mat);
    let gw_t = Tensor::new(&[o, c, kh, kw], gw.into_raw_vec_and_offset().0);
    let gcols_t =
        Tensor::new(&[c * kh * kw, ho * wo], gcols.into_raw_vec_and_offset().0);
    let gx = col2im(&gcols_t, c, h, wd, kh, kw, stride, pad);
    let mut gb = Tensor::zeros(&[o]);
    for oi in 0..o {
        gb.data_mut()[oi] = grad.data()[oi * ho * wo..(oi + 1) * ho * wo].iter().sum();
    }
    (gx, gw_t, gb)
}

fn upsample_fwd(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = xd[(ci * h + i) * w + j];
                let base = (ci * 2 * h + 2 * i) * 2 * w + 2 * j;
                od[base] = v;
                od[base + 1] = v;
                od[base + 2 * w] = v;
                od[base + 2 * w + 1] = v;
            }
        }
    }
    out
}

fn upsample_bwd(grad: &Tensor) -> Tensor {
    let (c, h2, w2) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    let gd = grad.data();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let base = (ci * h2 + 2 * i) * w2 + 2 * j;
                od[(ci * h + i) * w + j] = gd[base] + gd[base + 1] + gd[base + w2] + gd[base + w2 + 1];
            }
        }
    }
    out
}

fn avg_pool_fwd(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool_2x needs even dims, got {:?}", x.shape());
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = (ci * h + 2 * i) * w + 2 * j;
                od[(ci * ho + i) * wo + j] =
                    0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    out
}

fn avg_pool_bwd(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(in_shape);
    let gd = grad.data();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * gd[(ci * ho + i) * wo + j];
                let base = (ci * h + 2 * i) * w + 2 * j;
                od[base] += g;
                od[base + 1] += g;
                od[base + w] += g;
                od[base + w + 1] += g;
            }
        }
    }
    out
}

/// Normalized coordinate of index `i` along a dimension of length `n`.
fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Index-space position of a normalized coordinate, plus whether it was
/// clamped at the border (gradient through it is then zero).
fn denorm_clamp(x: f64, n: usize) -> (f64, bool) {
    if n <= 1 {
        return (0.0, true);
    }
    let p = (x + 1.0) * 0.5 * (n - 1) as f64;
    if p <= 0.0 {
        (0.0, true)
    } else if p >= (n - 1) as f64 {
        ((n - 1) as f64, true)
    } else {
        (p, false)
    }
}

fn grid_sample_fwd(vol: &Tensor, flow: &Tensor) -> Tensor {
    let (c, d, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2], vol.shape()[3]);
    assert_eq!(flow.shape(), &[d, h, w, 3], "flow must be [D,H,W,3]");
    let mut out = Tensor::zeros(&[c, d, h, w]);
    let vd = vol.data();
    let fd = flow.data();
    let od = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let f = &fd[((k * h + i) * w + j) * 3..((k * h + i) * w + j) * 3 + 3];
                let (px, _) = denorm_clamp(norm_coord(j, w) + f[0], w);
                let (py, _) = denorm_clamp(norm_coord(i, h) + f[1], h);
                let (pz, _) = denorm_clamp(norm_coord(k, d) + f[2], d);
                let x0 = px.floor() as usize;
                let y0 = py.floor() as usize;
                let z0 = pz.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let z1 = (z0 + 1).min(d - 1);
                let tx = px - x0 as f64;
                let ty = py - y0 as f64;
                let tz = pz - z0 as f64;
                for ci in 0..c {
                    let at = |zz: usize, yy: usize, xx: usize| vd[((ci * d + zz) * h + yy) * w + xx];
                    let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
                    let c01 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
                    let c10 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
                    let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    od[((ci * d + k) * h + i) * w + j] = c0 * (1.0 - tz) + c1 * tz;
                }
            }
        }
    }
    out
}

fn grid_sample_bwd(vol: &Tensor, flow: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (c, d, h, w) = (vol.shape()[0], vol.shape()[1], vol.shape()[2], vol.shape()[3]);
    let mut gvol = Tensor::zeros(vol.shape());
    let mut gflow = Tensor::zeros(flow.shape());
    let vd = vol.data();
    let fd = flow.data();
    let gd = grad.data();
    let gv = gvol.data_mut();
    let gf = gflow.data_mut();
    let half_w = if w > 1 { 0.5 * (w - 1) as f64 } else { 0.0 };
    let half_h = if h > 1 { 0.5 * (h - 1) as f64 } else { 0.0 };
    let half_d = if d > 1 { 0.5 * (d - 1) as f64 } else { 0.0 };
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let fidx = ((k * h + i) * w + j) * 3;
                let f = &fd[fidx..fidx + 3];
                let (px, cx) = denorm_clamp(norm_coord(j, w) + f[0], w);
                let (py, cy) = denorm_clamp(norm_coord(i, h) + f[1], h);
                let (mut gfx, mut gfy, mut gfz) = (0.0, 0.0, 0.0);
                let (pz, cz) = denorm_clamp(norm_coord(k, d) + f[2], d);
                let x0 = px.floor() as usize;
                let y0 = py.floor() as usize;
                let z0 = pz.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let z1 = (z0 + 1).min(d - 1);
                let tx = px - x0 as f64;
                let ty = py - y0 as f64;
                let tz = pz - z0 as f64;
                let wx = [1.0 - tx, tx];
                let wy = [1.0 - ty, ty];
                let wz = [1.0 - tz, tz];
                let xs = [x0, x1];
                let ys = [y0, y1];
                let zs = [z0, z1];
                for ci in 0..c {
                    let g = gd[((ci * d + k) * h + i) * w + j];
                    if g == 0.0 {
                        continue;
                    }
                    let at = |zz: usize, yy: usize, xx: usize| vd[((ci * d + zz) * h + yy) * w + xx];
                    for (az, &zz) in zs.iter().enumerate() {
                        for (ay, &yy) in ys.iter().enumerate() {
                            for (ax, &xx) in xs.iter().enumerate() {
                                let wgt = wz[az] * wy[ay] * wx[ax];
                                gv[((ci * d + zz) * h + yy) * w + xx] += g * wgt;
                                let v = at(zz, yy, xx);
                                let sx = if ax == 1 { 1.0 } else { -1.0 };
                                let sy = if ay == 1 { 1.0 } else { -1.0 };
                                let sz = if az == 1 { 1.0 } else { -1.0 };
                                if !cx {
                                    gfx += g * v * sx * wy[ay] * wz[az] * half_w;
                                }
                                if !cy {
                                    gfy += g * v * sy * wx[ax] * wz[az] * half_h;
                                }
                                if !cz {
                                    gfz += g * v * sz * wx[ax] * wy[ay] * half_d;
                                }
                            }
                        }
                    }
                }
                let fg = &mut gf[fidx..fidx + 3];
                fg[0] += gfx;
                fg[1] += gfy;
                fg[2] += gfz;
            }
        }
    }
    (gvol, gflow)
}
