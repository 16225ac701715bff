//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! A [`GradGraph`] is a single-use tape: ops are evaluated eagerly as they
//! are recorded, and [`GradGraph::backward`] walks the tape once in reverse
//! insertion order. Every op validates shapes and panics on misuse (callers
//! validate user-facing inputs first) and asserts that no NaN/Inf ever
//! propagates silently.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{axpy, mm_nn_acc, mm_nt_acc, mm_tn_acc};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// Broadcast add: rhs shape must be a suffix of lhs shape.
    AddBroadcast(NodeId, NodeId),
    /// a[.., k] x w[k, n]; leading axes of `a` are flattened into rows.
    MatMul(NodeId, NodeId),
    /// c[b,i,j] = sum_k a[b,i,k] * b[b,j,k]
    BmmNt(NodeId, NodeId),
    /// c[b,i,j] = sum_k a[b,i,k] * b[b,k,j]
    BmmNn(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// ln(max(x, floor)); subgradient 0 where the clamp is active.
    LogClamped(NodeId, f64),
    SoftmaxLast(NodeId),
    ConcatLast(NodeId, NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    /// [b, t, h*dh] -> [b*h, t, dh]
    SplitHeads(NodeId, usize),
    /// [b*h, t, dh] -> [b, t, h*dh]
    MergeHeads(NodeId, usize),
    /// Per-item element gather; index -1 reads as 0 (zero padding).
    GatherItem(NodeId, Arc<Vec<i64>>),
    /// Per-item mean over fixed-size row groups: x[b, r, l] -> out[b, g, l].
    AvgGroupItem {
        x: NodeId,
        groups: Arc<Vec<u32>>,
        group_size: usize,
    },
    /// Mean elementwise Huber loss; scalar output.
    SmoothL1 {
        pred: NodeId,
        target: NodeId,
        beta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

#[derive(Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a node; untouched leaves report zeros.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, trainable: bool) -> NodeId {
        assert!(
            value.is_all_finite(),
            "non-finite value out of {:?} (node {})",
            op_name(&op),
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-trainable leaf (inputs, targets, frozen features).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false, false)
    }

    /// Trainable leaf; `backward` will report its gradient.
    pub fn trainable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true, true)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs, false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs, false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs, false)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs, false)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::AddScalar(a), needs, false)
    }

    /// `b`'s shape must be a suffix of `a`'s shape (bias patterns).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_broadcast: {sb:?} is not a suffix of {sa:?}"
        );
        let blen = vb.numel();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(blen) {
            for (x, y) in chunk.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(sa.to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::AddBroadcast(a, b), needs, false)
    }

    // ── matrix products ─────────────────────────────────────────────

    /// `a` has shape [..., k]; `w` is [k, n]; output [..., n].
    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let (va, vw) = (self.value(a), self.value(w));
        let sa = va.shape();
        let sw = vw.shape();
        assert_eq!(sw.len(), 2, "matmul rhs must be 2-d");
        let k = *sa.last().unwrap();
        assert_eq!(k, sw[0], "matmul inner dims: {sa:?} x {sw:?}");
        let rows = va.numel() / k;
        let n = sw[1];
        let mut data = vec![0.0; rows * n];
        mm_nn_acc(va.data(), vw.data(), &mut data, rows, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data).unwrap();
        let needs = self.needs(a) || self.needs(w);
        self.push(out, Op::MatMul(a, w), needs, false)
    }

    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "bmm_nt shapes {sa:?} x {sb:?}");
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![0.0; bt * m * n];
        for i in 0..bt {
            mm_nt_acc(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * n * k..(i + 1) * n * k],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(vec![bt, m, n], data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::BmmNt(a, b), needs, false)
    }

    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm_nn shapes {sa:?} x {sb:?}");
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bt * m * n];
        for i in 0..bt {
            mm_nn_acc(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(vec![bt, m, n], data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::BmmNn(a, b), needs, false)
    }

    // ── nonlinearities ──────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs, false)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs, false)
    }

    /// ln(max(x, floor)); keeps BCE finite on saturated probabilities.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        assert!(floor > 0.0);
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(floor).ln()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::LogClamped(a, floor), needs, false)
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let width = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::SoftmaxLast(a), needs, false)
    }

    // ── shape and indexing ──────────────────────────────────────────

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1],
            "concat_last shapes {sa:?} / {sb:?}"
        );
        let (la, lb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = va.numel() / la;
        let mut data = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * la..(r + 1) * la]);
            data.extend_from_slice(&vb.data()[r * lb..(r + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let out = Tensor::new(shape, data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatLast(a, b), needs, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mean = va.data().iter().sum::<f64>() / va.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(mean), Op::MeanAll(a), needs, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let sum = va.data().iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(sum), Op::SumAll(a), needs, false)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let va = self.value(a);
        assert_eq!(
            va.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            va.shape()
        );
        let out = Tensor::new(shape.to_vec(), va.data().to_vec()).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Reshape(a), needs, false)
    }

    pub fn split_heads(&mut self, a: NodeId, heads: usize) -> NodeId {
        let va = self.value(a);
        let s = va.shape();
        assert!(s.len() == 3 && s[2] % heads == 0, "split_heads on {s:?}");
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut data = vec![0.0; va.numel()];
        let src = va.data();
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let dst = (((bi * heads + h) * t) + ti) * dh;
                    let from = (bi * t + ti) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, t, dh], data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::SplitHeads(a, heads), needs, false)
    }

    pub fn merge_heads(&mut self, a: NodeId, heads: usize) -> NodeId {
        let va = self.value(a);
        let s = va.shape();
        assert!(s.len() == 3 && s[0] % heads == 0, "merge_heads on {s:?}");
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let mut data = vec![0.0; va.numel()];
        let src = va.data();
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let from = (((bi * heads + h) * t) + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, d], data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::MergeHeads(a, heads), needs, false)
    }

    /// Gathers elements within each item of the batch: `x` is [b, ...item],
    /// `idx` indexes the flattened item, -1 produces 0. Output shape is
    /// `[b] + out_item_shape`. Implements im2col, patchify and permutations.
    pub fn gather_item(
        &mut self,
        a: NodeId,
        idx: Arc<Vec<i64>>,
        out_item_shape: &[usize],
    ) -> NodeId {
        let va = self.value(a);
        let s = va.shape();
        assert!(s.len() >= 2, "gather_item input must be batched");
        let b = s[0];
        let item_len = va.numel() / b;
        let out_item: usize = out_item_shape.iter().product();
        assert_eq!(out_item, idx.len(), "gather_item index length");
        debug_assert!(idx.iter().all(|&i| i < item_len as i64));
        let mut data = vec![0.0; b * out_item];
        let src = va.data();
        for bi in 0..b {
            let item = &src[bi * item_len..(bi + 1) * item_len];
            let dst = &mut data[bi * out_item..(bi + 1) * out_item];
            for (d, &i) in dst.iter_mut().zip(idx.iter()) {
                if i >= 0 {
                    *d = item[i as usize];
                }
            }
        }
        let mut shape = vec![b];
        shape.extend_from_slice(out_item_shape);
        let out = Tensor::new(shape, data).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::GatherItem(a, idx), needs, false)
    }

    /// Per-item mean over row groups: `x` is [b, r, l], `groups` lists
    /// `group_size` row indices per output row. Output [b, len/gs, l].
    /// Implements average pooling and global average pooling.
    pub fn avg_group_item(
        &mut self,
        a: NodeId,
        groups: Arc<Vec<u32>>,
        group_size: usize,
    ) -> NodeId {
        let va = self.value(a);
        let s = va.shape();
        assert!(s.len() == 3, "avg_group_item input must be [b, r, l]");
        assert!(group_size > 0 && groups.len() % group_size == 0);
        let (b, r, l) = (s[0], s[1], s[2]);
        debug_assert!(groups.iter().all(|&g| (g as usize) < r));
        let g_out = groups.len() / group_size;
        let inv = 1.0 / group_size as f64;
        let mut data = vec![0.0; b * g_out * l];
        let src = va.data();
        for bi in 0..b {
            let item = &src[bi * r * l..(bi + 1) * r * l];
            for go in 0..g_out {
                let dst = &mut data[(bi * g_out + go) * l..(bi * g_out + go + 1) * l];
                for &row in &groups[go * group_size..(go + 1) * group_size] {
                    axpy(inv, &item[row as usize * l..(row as usize + 1) * l], dst);
                }
            }
        }
        let out = Tensor::new(vec![b, g_out, l], data).unwrap();
        let needs = self.needs(a);
        self.push(
            out,
            Op::AvgGroupItem {
                x: a,
                groups,
                group_size,
            },
            needs,
            false,
        )
    }

    /// Mean Huber loss: 0.5 d^2/beta for |d| < beta, |d| - beta/2 otherwise.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId, beta: f64) -> NodeId {
        let (vp, vt) = (self.value(pred), self.value(target));
        assert_eq!(vp.shape(), vt.shape(), "smooth_l1 shape mismatch");
        assert!(beta > 0.0, "smooth_l1 beta must be positive");
        let mut acc = 0.0;
        for (&p, &t) in vp.data().iter().zip(vt.data()) {
            let d = (p - t).abs();
            acc += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
        }
        let mean = acc / vp.numel() as f64;
        let needs = self.needs(pred) || self.needs(target);
        self.push(
            Tensor::scalar(mean),
            Op::SmoothL1 { pred, target, beta },
            needs,
            false,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Visits each recorded op exactly
    /// once; gradients reach every trainable leaf that influenced `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, got shape {:?}", out_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_backward(id, &g, &mut grads);
            if self.nodes[id].trainable {
                grads[id] = Some(g); // keep leaf gradients for the caller
            }
        }

        let mut out = Gradients {
            grads: Vec::with_capacity(self.nodes.len()),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        };
        for (i, g) in grads.into_iter().enumerate() {
            match g {
                Some(data) => {
                    let t = Tensor::new(self.nodes[i].value.shape().to_vec(), data).unwrap();
                    assert!(t.is_all_finite(), "non-finite gradient at node {i}");
                    out.grads.push(Some(t));
                }
                None => out.grads.push(None),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => axpy(1.0, delta, g),
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => axpy(1.0, &delta, g),
            slot => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate_owned(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b).data();
                    let da: Vec<f64> = g.iter().zip(vb).map(|(gv, y)| gv * y).collect();
                    self.accumulate_owned(grads, *a, da);
                }
                if self.needs(*b) {
                    let va = self.value(*a).data();
                    let db: Vec<f64> = g.iter().zip(va).map(|(gv, x)| gv * x).collect();
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate_owned(grads, *a, da);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g);
                if self.needs(*b) {
                    let blen = self.value(*b).numel();
                    let mut db = vec![0.0; blen];
                    for chunk in g.chunks_exact(blen) {
                        axpy(1.0, chunk, &mut db);
                    }
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::MatMul(a, w) => {
                let va = self.value(*a);
                let vw = self.value(*w);
                let k = *va.shape().last().unwrap();
                let rows = va.numel() / k;
                let n = vw.shape()[1];
                if self.needs(*a) {
                    // dA = dC * W^T
                    let mut da = vec![0.0; rows * k];
                    mm_nt_acc(g, vw.data(), &mut da, rows, n, k);
                    self.accumulate_owned(grads, *a, da);
                }
                if self.needs(*w) {
                    // dW = A^T * dC
                    let mut dw = vec![0.0; k * n];
                    mm_tn_acc(va.data(), g, &mut dw, rows, k, n);
                    self.accumulate_owned(grads, *w, dw);
                }
            }
            Op::BmmNt(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (bt, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; va.numel()];
                    for i in 0..bt {
                        mm_nn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate_owned(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; vb.numel()];
                    for i in 0..bt {
                        mm_tn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &mut db[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::BmmNn(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (bt, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; va.numel()];
                    for i in 0..bt {
                        mm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate_owned(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; vb.numel()];
                    for i in 0..bt {
                        mm_tn_acc(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::Sigmoid(a) => {
                let y = self.value(NodeId(id)).data();
                let da: Vec<f64> = g.iter().zip(y).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate_owned(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = self.value(NodeId(id)).data();
                let da: Vec<f64> = g.iter().zip(y).map(|(gv, &t)| gv * (1.0 - t * t)).collect();
                self.accumulate_owned(grads, *a, da);
            }
            Op::LogClamped(a, floor) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                    .collect();
                self.accumulate_owned(grads, *a, da);
            }
            Op::SoftmaxLast(a) => {
                let y = self.value(NodeId(id));
                let width = *y.shape().last().unwrap();
                let mut da = vec![0.0; y.numel()];
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks_exact(width)
                    .zip(g.chunks_exact(width))
                    .zip(da.chunks_exact_mut(width))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate_owned(grads, *a, da);
            }
            Op::ConcatLast(a, b) => {
                let (la, lb) = (
                    *self.value(*a).shape().last().unwrap(),
                    *self.value(*b).shape().last().unwrap(),
                );
                let rows = self.value(*a).numel() / la;
                if self.needs(*a) {
                    let mut da = vec![0.0; rows * la];
                    for r in 0..rows {
                        da[r * la..(r + 1) * la]
                            .copy_from_slice(&g[r * (la + lb)..r * (la + lb) + la]);
                    }
                    self.accumulate_owned(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; rows * lb];
                    for r in 0..rows {
                        db[r * lb..(r + 1) * lb]
                            .copy_from_slice(&g[r * (la + lb) + la..(r + 1) * (la + lb)]);
                    }
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let da = vec![g[0] / n as f64; n];
                self.accumulate_owned(grads, *a, da);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                let da = vec![g[0]; n];
                self.accumulate_owned(grads, *a, da);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::SplitHeads(a, heads) => {
                let s = self.value(*a).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut da = vec![0.0; b * t * d];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let from = (((bi * heads + h) * t) + ti) * dh;
                            let dst = (bi * t + ti) * d + h * dh;
                            da[dst..dst + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                self.accumulate_owned(grads, *a, da);
            }
            Op::MergeHeads(a, heads) => {
                let s = self.value(*a).shape();
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = dh * heads;
                let mut da = vec![0.0; bh * t * dh];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let dst = (((bi * heads + h) * t) + ti) * dh;
                            let from = (bi * t + ti) * d + h * dh;
                            da[dst..dst + dh].copy_from_slice(&g[from..from + dh]);
                        }
                    }
                }
                self.accumulate_owned(grads, *a, da);
            }
            Op::GatherItem(a, idx) => {
                let va = self.value(*a);
                let b = va.shape()[0];
                let item_len = va.numel() / b;
                let out_item = idx.len();
                let mut da = vec![0.0; va.numel()];
                for bi in 0..b {
                    let item = &mut da[bi * item_len..(bi + 1) * item_len];
                    let grow = &g[bi * out_item..(bi + 1) * out_item];
                    for (&i, &gv) in idx.iter().zip(grow) {
                        if i >= 0 {
                            item[i as usize] += gv;
                        }
                    }
                }
                self.accumulate_owned(grads, *a, da);
            }
            Op::AvgGroupItem {
                x,
                groups,
                group_size,
            } => {
                let va = self.value(*x);
                let (b, r, l) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let g_out = groups.len() / group_size;
                let inv = 1.0 / *group_size as f64;
                let mut da = vec![0.0; va.numel()];
                for bi in 0..b {
                    let item = &mut da[bi * r * l..(bi + 1) * r * l];
                    for go in 0..g_out {
                        let grow = &g[(bi * g_out + go) * l..(bi * g_out + go + 1) * l];
                        for &row in &groups[go * group_size..(go + 1) * group_size] {
                            axpy(inv, grow, &mut item[row as usize * l..(row as usize + 1) * l]);
                        }
                    }
                }
                self.accumulate_owned(grads, *x, da);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let vp = self.value(*pred);
                let vt = self.value(*target);
                let scale = g[0] / vp.numel() as f64;
                let dd: Vec<f64> = vp
                    .data()
                    .iter()
                    .zip(vt.data())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let w = if d.abs() < *beta { d / beta } else { d.signum() };
                        scale * w
                    })
                    .collect();
                if self.needs(*target) {
                    let dt: Vec<f64> = dd.iter().map(|v| -v).collect();
                    self.accumulate_owned(grads, *target, dt);
                }
                self.accumulate_owned(grads, *pred, dd);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddBroadcast(..) => "add_broadcast",
        Op::MatMul(..) => "matmul",
        Op::BmmNt(..) => "bmm_nt",
        Op::BmmNn(..) => "bmm_nn",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::LogClamped(..) => "log_clamped",
        Op::SoftmaxLast(..) => "softmax_last",
        Op::ConcatLast(..) => "concat_last",
        Op::MeanAll(..) => "mean_all",
        Op::SumAll(..) => "sum_all",
        Op::Reshape(..) => "reshape",
        Op::SplitHeads(..) => "split_heads",
        Op::MergeHeads(..) => "merge_heads",
        Op::GatherItem(..) => "gather_item",
        Op::AvgGroupItem { .. } => "avg_group_item",
        Op::SmoothL1 { .. } => "smooth_l1",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_exact() {
        // f(x) = x*x at x = 3 -> df/dx = 6
        let mut g = GradGraph::new();
        let x = g.trainable(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = GradGraph::new();
        let x = g.trainable(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
        assert!((grads.get(x).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = GradGraph::new();
        let x = g.trainable(Tensor::zeros(&[2, 2]));
        let y = g.tanh(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = GradGraph::new();
        let x = g.trainable(Tensor::scalar(2.0));
        let unused = g.trainable(Tensor::zeros(&[3]));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = GradGraph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let y = g.softmax_last(x);
        for row in g.value(y).data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted =
            g.constant(Tensor::new(vec![2, 3], vec![101.0, 102.0, 103.0, 99.0, 100.5, 100.0]).unwrap());
        let y2 = g.softmax_last(shifted);
        assert!(g.value(y).max_abs_diff(g.value(y2)) < 1e-9);
    }

    #[test]
    fn smooth_l1_known_values() {
        let mut g = GradGraph::new();
        let p = g.constant(Tensor::scalar(0.5));
        let t = g.constant(Tensor::scalar(0.0));
        let y = g.smooth_l1(p, t, 1.0);
        assert!((g.value(y).item() - 0.125).abs() < 1e-15);

        let p = g.constant(Tensor::scalar(2.0));
        let y = g.smooth_l1(p, t, 1.0);
        assert!((g.value(y).item() - 1.5).abs() < 1e-15);

        let p = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let t2 = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let y = g.smooth_l1(p, t2, 1.0);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn gather_item_pads_with_zero_and_scatters_back() {
        let mut g = GradGraph::new();
        let x = g.trainable(Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap());
        let idx = Arc::new(vec![2i64, -1, 0, 0]);
        let y = g.gather_item(x, idx, &[4]);
        assert_eq!(g.value(y).data(), &[30.0, 0.0, 10.0, 10.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_split_heads_roundtrip() {
        let mut g = GradGraph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap());
        let c = g.concat_last(a, b);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let x = g.constant(Tensor::new(vec![1, 2, 4], (0..8).map(|v| v as f64).collect()).unwrap());
        let split = g.split_heads(x, 2);
        assert_eq!(g.value(split).shape(), &[2, 2, 2]);
        assert_eq!(g.value(split).data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        let merged = g.merge_heads(split, 2);
        assert_eq!(g.value(merged).data(), g.value(x).data());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn nan_is_caught_at_op_boundary() {
        let mut g = GradGraph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let big = g.scale(x, f64::INFINITY);
        let _ = g.value(big);
    }
}
