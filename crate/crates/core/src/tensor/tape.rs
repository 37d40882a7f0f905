use std::cell::RefCell;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

use super::kernels::{self, MatmulPlan};
use super::{numel, Scalar, Tensor};

type NodeId = usize;

/// Adjoint bookkeeping for one recorded operation.
enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        plan: MatmulPlan,
    },
    Transpose(NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Patchify {
        x: NodeId,
        patch: usize,
    },
    PrependToken {
        x: NodeId,
        token: NodeId,
    },
    SelectToken {
        x: NodeId,
        index: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record: an append-only list of executed operations.
///
/// Operands always precede their results, so replaying adjoints from the
/// end visits every node after all of its consumers. A tape is confined to
/// one thread; values it produces are plain [`Tensor`]s and can be shared.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

/// Handle to a value on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records adjoints for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates; nothing is differentiable.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let needs = tensor.requires_grad();
        self.push(tensor.clone(), Op::Leaf, needs)
    }

    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.clone(), Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let needs_grad = self.recording && needs_grad;
        let op = if needs_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Replays adjoints from `loss` back to the leaves.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::shape("backward", "loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        if !root.needs_grad {
            return Ok(Gradients {
                grads,
                shapes: Vec::new(),
            });
        }
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            adjoint(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId, g: Vec<T>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn adjoint<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: NodeId| nodes[id].value.data();
    let needs = |id: NodeId| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, plan } => {
            let (da, db) = plan.backward(val(*a), val(*b), g, needs(*a), needs(*b));
            if let Some(da) = da {
                accumulate(grads, nodes, *a, da);
            }
            if let Some(db) = db {
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Transpose(x) => {
            let s = node.value.shape();
            let r = s.len();
            let gx = kernels::transpose_last_two(g, numel(&s[..r - 2]), s[r - 2], s[r - 1]);
            accumulate(grads, nodes, *x, gx);
        }
        Op::Permute { x, axes } => {
            let gx = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
            accumulate(grads, nodes, *x, gx);
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let ga = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*b) {
                let gb = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.iter().map(|&v| v * *c).collect()),
        Op::AddBias { x, bias } => {
            accumulate(grads, nodes, *x, g.to_vec());
            if needs(*bias) {
                let width = nodes[*bias].value.numel();
                let mut gb = vec![T::zero(); width];
                for row in g.chunks_exact(width) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *bias, gb);
            }
        }
        Op::Gelu(x) => {
            let gx = g
                .iter()
                .zip(val(*x))
                .map(|(&g, &x)| g * gelu_derivative(x))
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[*gamma].value.numel();
            let gam = val(*gamma);
            if needs(*x) {
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((gr, xr), out)) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut mean_dx = T::zero();
                    let mut mean_dx_x = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        mean_dx += dxh;
                        mean_dx_x += dxh * xr[j];
                    }
                    mean_dx *= inv_d;
                    mean_dx_x *= inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        out[j] = inv_std[r] * (dxh - mean_dx - xr[j] * mean_dx_x);
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
            if needs(*gamma) {
                let mut gg = vec![T::zero(); d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
                accumulate(grads, nodes, *gamma, gg);
            }
            if needs(*beta) {
                let mut gb = vec![T::zero(); d];
                for gr in g.chunks_exact(d) {
                    for j in 0..d {
                        gb[j] += gr[j];
                    }
                }
                accumulate(grads, nodes, *beta, gb);
            }
        }
        Op::Softmax(x) => {
            let n = *node.value.shape().last().unwrap_or(&1);
            let y = node.value.data();
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), out) in g
                .chunks_exact(n)
                .zip(y.chunks_exact(n))
                .zip(gx.chunks_exact_mut(n))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let c = probs.len() / b;
            let scale = g[0] / T::of(b as f64);
            let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                gx[i * c + l] -= scale;
            }
            accumulate(grads, nodes, *logits, gx);
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::Patchify { x, patch } => {
            let shape = nodes[*x].value.shape();
            let mut gx = vec![T::zero(); numel(shape)];
            patch_scatter(shape, *patch, g, &mut gx);
            accumulate(grads, nodes, *x, gx);
        }
        Op::PrependToken { x, token } => {
            let s = node.value.shape();
            let (b, n1, d) = (s[0], s[1], s[2]);
            if needs(*x) {
                let mut gx = Vec::with_capacity(b * (n1 - 1) * d);
                for bi in 0..b {
                    gx.extend_from_slice(&g[(bi * n1 + 1) * d..(bi + 1) * n1 * d]);
                }
                accumulate(grads, nodes, *x, gx);
            }
            if needs(*token) {
                let mut gt = vec![T::zero(); d];
                for bi in 0..b {
                    for (acc, &v) in gt.iter_mut().zip(&g[bi * n1 * d..(bi * n1 + 1) * d]) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, *token, gt);
            }
        }
        Op::SelectToken { x, index } => {
            let s = nodes[*x].value.shape();
            let (b, n, d) = (s[0], s[1], s[2]);
            let mut gx = vec![T::zero(); b * n * d];
            for bi in 0..b {
                let dst = (bi * n + index) * d;
                gx[dst..dst + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Dropout { x, mask } => {
            let gx = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            accumulate(grads, nodes, *x, gx);
        }
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    let norm = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    norm * (-(x * x) * T::of(0.5)).exp()
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * std_normal_cdf(x)
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Maps `(b, c, y, x)` image coordinates to `(b, patch, feature)` with
/// row-major patch order and `(c, dy, dx)` feature order.
fn patch_index(shape: &[usize], patch: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    (0..b).flat_map(move |bi| {
        (0..gh * gw).flat_map(move |p| {
            let (py, px) = (p / gw, p % gw);
            (0..feat).map(move |f| {
                let ch = f / (patch * patch);
                let dy = (f / patch) % patch;
                let dx = f % patch;
                let src = ((bi * c + ch) * h + py * patch + dy) * w + px * patch + dx;
                let dst = (bi * gh * gw + p) * feat + f;
                (src, dst)
            })
        })
    })
}

fn patch_scatter<T: Scalar>(shape: &[usize], patch: usize, g: &[T], gx: &mut [T]) {
    for (src, dst) in patch_index(shape, patch) {
        gx[src] += g[dst];
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands live on different tapes"))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.requires_grad();
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(rhs, "matmul")?;
        let (a, b) = (self.value(), rhs.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let out = Tensor::from_parts(plan.out_shape.clone(), plan.forward(a.data(), b.data()));
        let needs = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                plan,
            },
            needs,
        ))
    }

    pub fn transpose_last_two(&self) -> Result<Var<'t, T>> {
        let out = self.value().transpose_last_two()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if axes.len() != x.rank()
            || axes
                .iter()
                .any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", x.rank()),
            ));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let out = Tensor::from_parts(shape, kernels::permute(x.data(), x.shape(), axes));
        Ok(self.unary(
            out,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    fn zip_same(
        &self,
        rhs: &Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_tape(rhs, op)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    fn binary(&self, rhs: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.requires_grad() || rhs.requires_grad();
        self.tape.push(value, op, needs)
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_same(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(rhs, out, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_same(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, out, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_same(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, out, Op::Mul(self.id, rhs.id)))
    }

    pub fn mul_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    /// Adds `bias` to every trailing block of `self`; `bias.shape` must be a
    /// suffix of `self.shape` (a `[D]` bias or a `[N, D]` positional table).
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias, "add_bias")?;
        let (x, b) = (self.value(), bias.value());
        if b.rank() > x.rank() || !x.shape().ends_with(b.shape()) {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let width = b.numel();
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.binary(
            bias,
            out,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t, T> {
        let out = self.value().map(gelu_scalar);
        self.unary(out, Op::Gelu(self.id))
    }

    /// Normalizes over the last axis with population variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gamma, "layer_norm")?;
        self.same_tape(beta, "layer_norm")?;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().ok_or_else(|| Error::Rank {
            op: "layer_norm",
            min: 1,
            shape: Vec::new(),
        })?;
        if gm.shape() != [d] || bt.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gm.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); x.numel()];
        for ((xr, hr), or) in x
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..d {
                hr[j] = (xr[j] - mean) * is;
                or[j] = hr[j] * gm.data()[j] + bt.data()[j];
            }
            inv_std.push(is);
        }
        let needs = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t, T> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id),
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                op: "cross_entropy_logits",
                index: bad,
                size: c,
            });
        }
        let mut probs = x.data().to_vec();
        let mut total = T::zero();
        for (row, (&l, xr)) in probs
            .chunks_exact_mut(c)
            .zip(labels.iter().zip(x.data().chunks_exact(c)))
        {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = xr.iter().map(|&v| (v - max).exp()).sum();
            total += sum.ln() + max - xr[l];
            row.copy_from_slice(xr);
            softmax_in_place(row);
        }
        let loss = total / T::of(labels.len() as f64);
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let x = self.value();
        let s = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// `[B, C, H, W]` → `[B, (H/P)·(W/P), C·P·P]`, patches in row-major grid order.
    pub fn patchify(&self, patch: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch)
        {
            return Err(Error::shape(
                "patchify",
                format!("cannot split {s:?} into {patch}x{patch} patches"),
            ));
        }
        let out_shape = vec![s[0], (s[2] / patch) * (s[3] / patch), s[1] * patch * patch];
        let mut out = vec![T::zero(); x.numel()];
        for (src, dst) in patch_index(s, patch) {
            out[dst] = x.data()[src];
        }
        Ok(self.unary(
            Tensor::from_parts(out_shape, out),
            Op::Patchify { x: self.id, patch },
        ))
    }

    /// Prepends one learned `[D]` token to every sequence of `[B, M, D]`.
    pub fn prepend_token(&self, token: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(token, "prepend_token")?;
        let (x, t) = (self.value(), token.value());
        let s = x.shape();
        if s.len() != 3 || t.shape() != [s[2]] {
            return Err(Error::Dimension {
                op: "prepend_token",
                lhs: s.to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * (m + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(t.data());
            out.extend_from_slice(&x.data()[bi * m * d..(bi + 1) * m * d]);
        }
        Ok(self.binary(
            token,
            Tensor::from_parts(vec![b, m + 1, d], out),
            Op::PrependToken {
                x: self.id,
                token: token.id,
            },
        ))
    }

    /// Row `index` of the token axis: `[B, N, D]` → `[B, D]`.
    pub fn select_token(&self, index: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Rank {
                op: "select_token",
                min: 3,
                shape: s.to_vec(),
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if index >= n {
            return Err(Error::Index {
                op: "select_token",
                index,
                size: n,
            });
        }
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let src = (bi * n + index) * d;
            out.extend_from_slice(&x.data()[src..src + d]);
        }
        Ok(self.unary(
            Tensor::from_parts(vec![b, d], out),
            Op::SelectToken { x: self.id, index },
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Var<'t, T> {
        if p <= 0.0 {
            return *self;
        }
        let x = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.unary(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Dropout { x: self.id, mask },
        )
    }

    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward(*self)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Gradients of one backward pass, indexed by the [`Var`]s of its tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` does not influence the loss or is not differentiable.
    pub fn get(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_expansion() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(&t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[2, 2], &[0.3, -1.2, 7.5, 2.0]));
        let i = tape.constant(&Tensor::eye(2));
        assert_eq!(a.matmul(&i).unwrap().value(), a.value());
        let z = tape.constant(&Tensor::zeros(&[3, 4]));
        let any = tape.constant(&Tensor::full(&[4, 5], 3.5));
        let out = z.matmul(&any).unwrap().value();
        assert_eq!(out.shape(), &[3, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 5]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn add_identity_and_bias_broadcast() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>()));
        let z = tape.constant(&Tensor::zeros(&[2, 3, 4]));
        assert_eq!(x.add(&z).unwrap().value(), x.value());
        let bias = tape.constant(&t(&[4], &[10., 20., 30., 40.]));
        let y = x.add_bias(&bias).unwrap().value();
        for (i, (&o, &v)) in y.data().iter().zip(x.value().data()).enumerate() {
            assert_eq!(o, v + 10.0 * ((i % 4) as f64 + 1.0));
        }
        let bad = tape.constant(&Tensor::zeros(&[3]));
        assert!(matches!(x.add_bias(&bad), Err(Error::Dimension { .. })));
        assert!(matches!(x.add(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[3], &[0.0, 1.0, 10.0]));
        let y = x.gelu().value();
        assert_eq!(y.data()[0], 0.0);
        // 1·Φ(1), evaluated with 30-digit arithmetic
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y.data()[2] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(&Tensor::ones(&[3]));
        let zeros = tape.constant(&Tensor::zeros(&[3]));
        let c = tape.constant(&Tensor::full(&[2, 3], 4.2));
        let y = c.layer_norm(&ones, &zeros, 1e-6).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let row = tape.constant(&t(&[1, 3], &[1., 2., 3.]));
        let y = row.layer_norm(&ones, &zeros, 0.0).unwrap().value();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        let beta = tape.constant(&t(&[3], &[0.5, -1.0, 2.0]));
        let y = row.layer_norm(&zeros, &beta, 1e-6).unwrap().value();
        assert_eq!(y.data(), beta.value().data());
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::<f64>::new();
        let u = tape
            .constant(&Tensor::full(&[1, 4], 0.7))
            .softmax_last()
            .value();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let two = tape
            .constant(&t(&[2], &[0.0, 3f64.ln()]))
            .softmax_last()
            .value();
        assert!((two.data()[0] - 0.25).abs() < 1e-15 && (two.data()[1] - 0.75).abs() < 1e-15);
        let x = t(&[3], &[0.1, -2.0, 5.0]);
        let a = tape.constant(&x).softmax_last().value();
        let b = tape.constant(&x.map(|v| v + 100.0)).softmax_last().value();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(&Tensor::zeros(&[1, 1000]));
        let l = uniform.cross_entropy_logits(&[17]).unwrap().value().item();
        assert!((l - 1000f64.ln()).abs() < 1e-12);

        let mut v = vec![0.0; 10];
        v[3] = 30.0;
        let sat = tape.constant(&t(&[1, 10], &v));
        assert!(sat.cross_entropy_logits(&[3]).unwrap().value().item() < 1e-9);

        assert!(matches!(
            sat.cross_entropy_logits(&[10]),
            Err(Error::Index { index: 10, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_per_sample_average() {
        let logits = [0.3, -1.1, 2.4, 0.0, 0.9, -0.4, 1.7, 0.2];
        let labels = [2usize, 1];
        // independent per-sample evaluation: -ln(exp(x_l) / Σ exp(x))
        let per = |row: &[f64], l: usize| -> f64 {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[l].exp() / z).ln()
        };
        let expect = (per(&logits[..4], 2) + per(&logits[4..], 1)) / 2.0;
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 4], &logits));
        let got = x.cross_entropy_logits(&labels).unwrap().value().item();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_simple_losses() {
        let tape = Tape::<f64>::new();
        let xv = t(&[3], &[1.5, -2.0, 0.25]).with_requires_grad(true);
        let x = tape.leaf(&xv);
        let g = x.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = x.mul(&x).unwrap().sum();
        let g = sq.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(x.backward(), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_of_add_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]).with_requires_grad(true));
        let y = tape.constant(&t(&[2, 2], &[9., 8., 7., 6.]));
        let g = x.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 4]);
        assert!(g.get(&y).is_none());
    }

    #[test]
    fn no_grad_tape_records_nothing_differentiable() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(&Tensor::ones(&[2]).with_requires_grad(true));
        let s = x.sum();
        assert!(!s.requires_grad());
        assert!(s.backward().unwrap().get(&x).is_none());
    }

    #[test]
    fn patchify_order() {
        // 1 image, 1 channel, 4x4, patch 2: patch 1 is the top-right 2x2 block
        let tape = Tape::<f64>::new();
        let img = tape.constant(&t(
            &[1, 1, 4, 4],
            &(0..16).map(f64::from).collect::<Vec<_>>(),
        ));
        let p = img.patchify(2).unwrap().value();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        assert!(img.patchify(3).is_err());
    }
}
