use std::cell::RefCell;
use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{broadcast_suffix, shape_mismatch, Tensor, TensorId};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum RedKind {
    Sum,
    Mean,
    Max,
}

enum Op {
    Bin {
        kind: BinKind,
        a: Tensor,
        b: Tensor,
    },
    BinScalar {
        kind: BinKind,
        a: Tensor,
        s: f32,
        /// true when the scalar is the left operand (s OP a)
        swapped: bool,
    },
    Silu(Tensor),
    Sqrt(Tensor),
    Square(Tensor),
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    Reduce {
        a: Tensor,
        kind: RedKind,
        axes: Vec<usize>,
        /// input flat index of the winning element, per output element (max only)
        arg: Option<Arc<Vec<u32>>>,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        probs: Tensor,
        scale: f32,
    },
    RmsNorm {
        a: Tensor,
        inv_rms: Arc<Vec<f32>>,
    },
    Reshape(Tensor),
    Transpose {
        a: Tensor,
        ax1: usize,
        ax2: usize,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Narrow {
        a: Tensor,
        axis: usize,
        start: usize,
    },
    Repeat {
        a: Tensor,
        axis: usize,
        count: usize,
    },
    IndexRows {
        table: Tensor,
        ids: Arc<Vec<usize>>,
    },
}

struct Node {
    out: Tensor,
    op: Op,
}

/// Ordered record of executed operations. Backward replays it in exact
/// reverse execution order, accumulating gradients additively on fan-out.
///
/// A `Tape` is single-threaded; independent tapes may live on independent
/// threads. [`Tape::eval`] executes the same ops without recording (and
/// without marking outputs differentiable), for inference paths.
pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    tracked: RefCell<HashMap<TensorId, Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            tracked: RefCell::new(HashMap::new()),
        }
    }

    /// Non-recording tape: same numerics, no graph, outputs never require grad.
    pub fn eval() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    fn push(&self, out: &Tensor, op: Op, inputs: &[&Tensor]) {
        if !out.requires_grad() {
            return;
        }
        let mut tracked = self.tracked.borrow_mut();
        for t in inputs {
            if t.requires_grad() {
                tracked.entry(t.id()).or_insert_with(|| (*t).clone());
            }
        }
        drop(tracked);
        self.nodes.borrow_mut().push(Node {
            out: out.clone(),
            op,
        });
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.bin(BinKind::Div, a, b)
    }

    /// Binary elementwise op. `b` must either match `a`'s shape or be a
    /// suffix of it (broadcast across the leading batch dims).
    fn bin(&self, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() && !broadcast_suffix(a.shape(), b.shape()) {
            return Err(shape_mismatch(kind.name(), a, b));
        }
        let bn = b.numel();
        let bd = b.data();
        let data: Vec<f32> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &av)| kind.apply(av, bd[i % bn]))
            .collect();
        let out = Tensor::result_of(a.shape().to_vec(), data, self.wants_grad(&[a, b]));
        self.push(
            &out,
            Op::Bin {
                kind,
                a: a.clone(),
                b: b.clone(),
            },
            &[a, b],
        );
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor, s: f32) -> Result<Tensor> {
        self.bin_scalar(BinKind::Add, a, s, false)
    }

    pub fn sub_scalar(&self, a: &Tensor, s: f32) -> Result<Tensor> {
        self.bin_scalar(BinKind::Sub, a, s, false)
    }

    /// s - a
    pub fn scalar_sub(&self, s: f32, a: &Tensor) -> Result<Tensor> {
        self.bin_scalar(BinKind::Sub, a, s, true)
    }

    pub fn mul_scalar(&self, a: &Tensor, s: f32) -> Result<Tensor> {
        self.bin_scalar(BinKind::Mul, a, s, false)
    }

    pub fn div_scalar(&self, a: &Tensor, s: f32) -> Result<Tensor> {
        self.bin_scalar(BinKind::Div, a, s, false)
    }

    fn bin_scalar(&self, kind: BinKind, a: &Tensor, s: f32, swapped: bool) -> Result<Tensor> {
        let data: Vec<f32> = a
            .data()
            .iter()
            .map(|&av| {
                if swapped {
                    kind.apply(s, av)
                } else {
                    kind.apply(av, s)
                }
            })
            .collect();
        let out = Tensor::result_of(a.shape().to_vec(), data, self.wants_grad(&[a]));
        self.push(
            &out,
            Op::BinScalar {
                kind,
                a: a.clone(),
                s,
                swapped,
            },
            &[a],
        );
        Ok(out)
    }

    pub fn silu(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f32> = a.data().iter().map(|&x| kernels::silu(x)).collect();
        let out = Tensor::result_of(a.shape().to_vec(), data, self.wants_grad(&[a]));
        self.push(&out, Op::Silu(a.clone()), &[a]);
        Ok(out)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f32> = a.data().iter().map(|&x| x.sqrt()).collect();
        let out = Tensor::result_of(a.shape().to_vec(), data, self.wants_grad(&[a]));
        self.push(&out, Op::Sqrt(a.clone()), &[a]);
        Ok(out)
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f32> = a.data().iter().map(|&x| x * x).collect();
        let out = Tensor::result_of(a.shape().to_vec(), data, self.wants_grad(&[a]));
        self.push(&out, Op::Square(a.clone()), &[a]);
        Ok(out)
    }

    // ---- matmul ------------------------------------------------------------

    /// Batched `a[.., M, K] x b[.., K, N]`. Batch dims must match exactly or
    /// `b` may be a single matrix shared across the batch.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ar, br) = (a.rank(), b.rank());
        if ar < 2 || br < 2 {
            return Err(Error::InnerDimMismatch {
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, ka) = (a.shape()[ar - 2], a.shape()[ar - 1]);
        let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
        let a_batch = &a.shape()[..ar - 2];
        let b_batch = &b.shape()[..br - 2];
        if ka != kb || !(b_batch.is_empty() || a_batch == b_batch) {
            return Err(Error::InnerDimMismatch {
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let batch: usize = a_batch.iter().product();
        let b_shared = b_batch.is_empty();
        let mut data = vec![0.0f32; batch * m * n];
        for i in 0..batch {
            let a_i = &a.data()[i * m * ka..(i + 1) * m * ka];
            let b_i = if b_shared {
                b.data()
            } else {
                &b.data()[i * ka * n..(i + 1) * ka * n]
            };
            kernels::mm_nn(a_i, b_i, m, ka, n, &mut data[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = a_batch.to_vec();
        shape.push(m);
        shape.push(n);
        let out = Tensor::result_of(shape, data, self.wants_grad(&[a, b]));
        self.push(
            &out,
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            &[a, b],
        );
        Ok(out)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(RedKind::Sum, a, axes)
    }

    pub fn mean(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(RedKind::Mean, a, axes)
    }

    pub fn max(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.reduce(RedKind::Max, a, axes)
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..a.rank()).collect();
        self.reduce(RedKind::Mean, a, &axes)
    }

    pub(crate) fn reduce(&self, kind: RedKind, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = a.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
        }
        // Empty axis list: reduction over nothing is the identity.
        if axes.is_empty() {
            let out = Tensor::result_of(
                a.shape().to_vec(),
                a.data().to_vec(),
                self.wants_grad(&[a]),
            );
            self.push(
                &out,
                Op::Reduce {
                    a: a.clone(),
                    kind,
                    axes,
                    arg: None,
                },
                &[a],
            );
            return Ok(out);
        }

        let out_shape: Vec<usize> = (0..rank)
            .filter(|d| !axes.contains(d))
            .map(|d| a.shape()[d])
            .collect();
        let out_numel: usize = out_shape.iter().product();
        let map = input_to_output_map(a.shape(), &axes);

        let data;
        let mut arg = None;
        match kind {
            RedKind::Sum | RedKind::Mean => {
                let mut acc = vec![0.0f32; out_numel];
                for (i, &v) in a.data().iter().enumerate() {
                    acc[map.output_index(i)] += v;
                }
                if kind == RedKind::Mean {
                    let count = (a.numel() / out_numel) as f32;
                    for v in &mut acc {
                        *v /= count;
                    }
                }
                data = acc;
            }
            RedKind::Max => {
                let mut acc = vec![f32::NEG_INFINITY; out_numel];
                let mut idx = vec![0u32; out_numel];
                for (i, &v) in a.data().iter().enumerate() {
                    let o = map.output_index(i);
                    if v > acc[o] {
                        acc[o] = v;
                        idx[o] = i as u32;
                    }
                }
                arg = Some(Arc::new(idx));
                data = acc;
            }
        }

        let out = Tensor::result_of(out_shape, data, self.wants_grad(&[a]));
        self.push(
            &out,
            Op::Reduce {
                a: a.clone(),
                kind,
                axes,
                arg,
            },
            &[a],
        );
        Ok(out)
    }

    // ---- attention ---------------------------------------------------------

    /// Scaled dot-product attention: softmax(q k^T / sqrt(D)) v.
    /// Shapes: q [B,Tq,D], k [B,Tk,D], v [B,Tk,D] -> [B,Tq,D].
    pub fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(shape_mismatch("attention", q, k));
        }
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        if ks[0] != b || ks[2] != d {
            return Err(shape_mismatch("attention", q, k));
        }
        if vs != [b, tk, d] {
            return Err(shape_mismatch("attention", k, v));
        }
        let scale = 1.0 / (d as f32).sqrt();

        let mut probs = vec![0.0f32; b * tq * tk];
        let mut data = vec![0.0f32; b * tq * d];
        for i in 0..b {
            let q_i = &q.data()[i * tq * d..(i + 1) * tq * d];
            let k_i = &k.data()[i * tk * d..(i + 1) * tk * d];
            let v_i = &v.data()[i * tk * d..(i + 1) * tk * d];
            let p_i = &mut probs[i * tq * tk..(i + 1) * tq * tk];
            kernels::mm_nt(q_i, k_i, tq, d, tk, p_i);
            for x in p_i.iter_mut() {
                *x *= scale;
            }
            kernels::softmax_rows(p_i, tq, tk);
            kernels::mm_nn(p_i, v_i, tq, tk, d, &mut data[i * tq * d..(i + 1) * tq * d]);
        }

        let probs = Tensor::result_of(vec![b, tq, tk], probs, false);
        let out = Tensor::result_of(vec![b, tq, d], data, self.wants_grad(&[q, k, v]));
        self.push(
            &out,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                probs,
                scale,
            },
            &[q, k, v],
        );
        Ok(out)
    }

    // ---- rms norm ----------------------------------------------------------

    /// Normalizes the last axis by its root-mean-square: y = x / sqrt(mean(x^2) + eps).
    pub fn rms_norm(&self, a: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *a.shape().last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let rows = a.numel() / d;
        let mut inv_rms = vec![0.0f32; rows];
        let mut data = vec![0.0f32; a.numel()];
        for r in 0..rows {
            let row = &a.data()[r * d..(r + 1) * d];
            let mut ms = 0.0f32;
            for &x in row {
                ms += x * x;
            }
            ms = ms / d as f32 + eps;
            let ir = 1.0 / ms.sqrt();
            inv_rms[r] = ir;
            for (o, &x) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = x * ir;
            }
        }
        let out = Tensor::result_of(a.shape().to_vec(), data, self.wants_grad(&[a]));
        self.push(
            &out,
            Op::RmsNorm {
                a: a.clone(),
                inv_rms: Arc::new(inv_rms),
            },
            &[a],
        );
        Ok(out)
    }

    // ---- shape plumbing ----------------------------------------------------

    pub fn reshape(&self, a: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(Error::InvalidArgument(format!(
                "reshape: {:?} -> {:?} changes element count",
                a.shape(),
                shape
            )));
        }
        let out = a.reshaped_view(shape, self.wants_grad(&[a]));
        self.push(&out, Op::Reshape(a.clone()), &[a]);
        Ok(out)
    }

    pub fn transpose(&self, a: &Tensor, ax1: usize, ax2: usize) -> Result<Tensor> {
        let rank = a.rank();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::InvalidAxis {
                axis: ax1.max(ax2),
                rank,
            });
        }
        if ax1 == ax2 {
            return self.reshape(a, a.shape().to_vec());
        }
        let (lo, hi) = (ax1.min(ax2), ax1.max(ax2));
        let (shape, data) = transpose_copy(a.data(), a.shape(), lo, hi);
        let out = Tensor::result_of(shape, data, self.wants_grad(&[a]));
        self.push(
            &out,
            Op::Transpose {
                a: a.clone(),
                ax1: lo,
                ax2: hi,
            },
            &[a],
        );
        Ok(out)
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat: no inputs".into())
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(shape_mismatch("concat", first, p));
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();

        let mut data = vec![0.0f32; outer * axis_total * inner];
        for o in 0..outer {
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[axis];
                let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + pa * inner].copy_from_slice(src);
                offset += pa;
            }
        }
        let inputs: Vec<&Tensor> = parts.to_vec();
        let out = Tensor::result_of(shape, data, self.wants_grad(&inputs));
        self.push(
            &out,
            Op::Concat {
                parts: parts.iter().map(|p| (*p).clone()).collect(),
                axis,
            },
            &inputs,
        );
        Ok(out)
    }

    pub fn narrow(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = a.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let dim = a.shape()[axis];
        if start + len > dim || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow: [{start}, {}) out of axis {axis} with dim {dim}",
                start + len
            )));
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0f32; outer * len * inner];
        for o in 0..outer {
            let src = &a.data()[(o * dim + start) * inner..(o * dim + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::result_of(shape, data, self.wants_grad(&[a]));
        self.push(
            &out,
            Op::Narrow {
                a: a.clone(),
                axis,
                start,
            },
            &[a],
        );
        Ok(out)
    }

    /// Inserts a new axis of size `count` at `axis`, tiling the input.
    pub fn repeat(&self, a: &Tensor, axis: usize, count: usize) -> Result<Tensor> {
        let rank = a.rank();
        if axis > rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if count == 0 {
            return Err(Error::InvalidArgument("repeat: count must be positive".into()));
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let inner: usize = a.shape()[axis..].iter().product();
        let mut data = vec![0.0f32; outer * count * inner];
        for o in 0..outer {
            let src = &a.data()[o * inner..(o + 1) * inner];
            for c in 0..count {
                let dst = (o * count + c) * inner;
                data[dst..dst + inner].copy_from_slice(src);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.insert(axis, count);
        let out = Tensor::result_of(shape, data, self.wants_grad(&[a]));
        self.push(
            &out,
            Op::Repeat {
                a: a.clone(),
                axis,
                count,
            },
            &[a],
        );
        Ok(out)
    }

    /// Row lookup into a rank-2 table: out[i] = table[ids[i]].
    pub fn index_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "index_rows: table must be rank 2, got {:?}",
                table.shape()
            )));
        }
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        let mut data = vec![0.0f32; ids.len() * d];
        for (i, &r) in ids.iter().enumerate() {
            if r >= rows {
                return Err(Error::InvalidArgument(format!(
                    "index_rows: id {r} out of {rows} rows"
                )));
            }
            data[i * d..(i + 1) * d].copy_from_slice(&table.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::result_of(vec![ids.len(), d], data, self.wants_grad(&[table]));
        self.push(
            &out,
            Op::IndexRows {
                table: table.clone(),
                ids: Arc::new(ids.to_vec()),
            },
            &[table],
        );
        Ok(out)
    }

    // ---- backward ----------------------------------------------------------

    /// Populates `grad` on every requires-grad tensor reachable from `loss`,
    /// visiting recorded operations in exact reverse execution order. Calling
    /// it again without resetting gradients accumulates.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        if loss.requires_grad() {
            self.tracked
                .borrow_mut()
                .entry(loss.id())
                .or_insert_with(|| loss.clone());
        }
        let mut grads: HashMap<TensorId, Vec<f32>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);

        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let Some(g) = grads.remove(&node.out.id()) else {
                continue;
            };
            if node.out.requires_grad() {
                node.out.accumulate_grad(&g);
            }
            backprop(&node.op, &node.out, &g, &mut grads);
        }

        // Whatever remains belongs to leaves.
        let tracked = self.tracked.borrow();
        for (id, g) in grads {
            if let Some(t) = tracked.get(&id) {
                if t.requires_grad() {
                    t.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut HashMap<TensorId, Vec<f32>>, t: &Tensor, delta: Vec<f32>) {
    if !t.requires_grad() {
        return;
    }
    match grads.entry(t.id()) {
        Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        Entry::Vacant(e) => {
            e.insert(delta);
        }
    }
}

/// Sums `g` over the leading block structure so it matches a suffix-broadcast
/// operand of `bn` elements.
fn reduce_to_suffix(g: &[f32], bn: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; bn];
    for (i, &v) in g.iter().enumerate() {
        out[i % bn] += v;
    }
    out
}

fn backprop(op: &Op, out: &Tensor, g: &[f32], grads: &mut HashMap<TensorId, Vec<f32>>) {
    match op {
        Op::Bin { kind, a, b } => {
            let bn = b.numel();
            let bd = b.data();
            match kind {
                BinKind::Add => {
                    add_into(grads, a, g.to_vec());
                    if b.requires_grad() {
                        add_into(grads, b, reduce_to_suffix(g, bn));
                    }
                }
                BinKind::Sub => {
                    add_into(grads, a, g.to_vec());
                    if b.requires_grad() {
                        let mut d = reduce_to_suffix(g, bn);
                        for v in &mut d {
                            *v = -*v;
                        }
                        add_into(grads, b, d);
                    }
                }
                BinKind::Mul => {
                    if a.requires_grad() {
                        let da: Vec<f32> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * bd[i % bn])
                            .collect();
                        add_into(grads, a, da);
                    }
                    if b.requires_grad() {
                        let prod: Vec<f32> = g
                            .iter()
                            .zip(a.data())
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        add_into(grads, b, reduce_to_suffix(&prod, bn));
                    }
                }
                BinKind::Div => {
                    if a.requires_grad() {
                        let da: Vec<f32> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv / bd[i % bn])
                            .collect();
                        add_into(grads, a, da);
                    }
                    if b.requires_grad() {
                        let prod: Vec<f32> = g
                            .iter()
                            .zip(a.data())
                            .enumerate()
                            .map(|(i, (&gv, &av))| {
                                let bv = bd[i % bn];
                                -gv * av / (bv * bv)
                            })
                            .collect();
                        add_into(grads, b, reduce_to_suffix(&prod, bn));
                    }
                }
            }
        }
        Op::BinScalar { kind, a, s, swapped } => {
            let da: Vec<f32> = match (kind, swapped) {
                (BinKind::Add, _) => g.to_vec(),
                (BinKind::Sub, false) => g.to_vec(),
                (BinKind::Sub, true) => g.iter().map(|&v| -v).collect(),
                (BinKind::Mul, _) => g.iter().map(|&v| v * s).collect(),
                (BinKind::Div, false) => g.iter().map(|&v| v / s).collect(),
                // out = s / a  =>  d/da = -s / a^2
                (BinKind::Div, true) => g
                    .iter()
                    .zip(a.data())
                    .map(|(&gv, &av)| -gv * s / (av * av))
                    .collect(),
            };
            add_into(grads, a, da);
        }
        Op::Silu(a) => {
            let da: Vec<f32> = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| gv * kernels::silu_grad(x))
                .collect();
            add_into(grads, a, da);
        }
        Op::Sqrt(a) => {
            let da: Vec<f32> = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * 0.5 / y)
                .collect();
            add_into(grads, a, da);
        }
        Op::Square(a) => {
            let da: Vec<f32> = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| gv * 2.0 * x)
                .collect();
            add_into(grads, a, da);
        }
        Op::Matmul { a, b } => {
            let ar = a.rank();
            let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
            let n = b.shape()[b.rank() - 1];
            let batch: usize = a.shape()[..ar - 2].iter().product();
            let b_has_batch = b.rank() > 2;
            if a.requires_grad() {
                let mut da = vec![0.0f32; a.numel()];
                for i in 0..batch {
                    let g_i = &g[i * m * n..(i + 1) * m * n];
                    let b_i = if b_has_batch {
                        &b.data()[i * k * n..(i + 1) * k * n]
                    } else {
                        b.data()
                    };
                    kernels::mm_nt(g_i, b_i, m, n, k, &mut da[i * m * k..(i + 1) * m * k]);
                }
                add_into(grads, a, da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0f32; b.numel()];
                for i in 0..batch {
                    let g_i = &g[i * m * n..(i + 1) * m * n];
                    let a_i = &a.data()[i * m * k..(i + 1) * m * k];
                    let dst = if b_has_batch {
                        &mut db[i * k * n..(i + 1) * k * n]
                    } else {
                        &mut db[..]
                    };
                    kernels::mm_tn(a_i, g_i, k, m, n, dst);
                }
                add_into(grads, b, db);
            }
        }
        Op::Reduce { a, kind, axes, arg } => {
            if !a.requires_grad() {
                return;
            }
            if axes.is_empty() {
                add_into(grads, a, g.to_vec());
                return;
            }
            let map = input_to_output_map(a.shape(), axes);
            let mut da = vec![0.0f32; a.numel()];
            match kind {
                RedKind::Sum => {
                    for (i, v) in da.iter_mut().enumerate() {
                        *v = g[map.output_index(i)];
                    }
                }
                RedKind::Mean => {
                    let count = (a.numel() / g.len()) as f32;
                    for (i, v) in da.iter_mut().enumerate() {
                        *v = g[map.output_index(i)] / count;
                    }
                }
                RedKind::Max => {
                    let arg = arg.as_ref().expect("max reduce records arg indices");
                    for (o, &src) in arg.iter().enumerate() {
                        da[src as usize] += g[o];
                    }
                }
            }
            add_into(grads, a, da);
        }
        Op::Attention {
            q,
            k,
            v,
            probs,
            scale,
        } => {
            let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
            let tk = k.shape()[1];
            let mut dq = vec![0.0f32; q.numel()];
            let mut dk = vec![0.0f32; k.numel()];
            let mut dv = vec![0.0f32; v.numel()];
            let mut dp = vec![0.0f32; tq * tk];
            let mut ds = vec![0.0f32; tq * tk];
            for i in 0..b {
                let g_i = &g[i * tq * d..(i + 1) * tq * d];
                let p_i = &probs.data()[i * tq * tk..(i + 1) * tq * tk];
                let q_i = &q.data()[i * tq * d..(i + 1) * tq * d];
                let k_i = &k.data()[i * tk * d..(i + 1) * tk * d];
                let v_i = &v.data()[i * tk * d..(i + 1) * tk * d];

                kernels::mm_tn(p_i, g_i, tk, tq, d, &mut dv[i * tk * d..(i + 1) * tk * d]);

                dp.iter_mut().for_each(|x| *x = 0.0);
                kernels::mm_nt(g_i, v_i, tq, d, tk, &mut dp);

                // softmax backward per row, scaled by 1/sqrt(D)
                for r in 0..tq {
                    let p_row = &p_i[r * tk..(r + 1) * tk];
                    let dp_row = &dp[r * tk..(r + 1) * tk];
                    let dot: f32 = p_row.iter().zip(dp_row).map(|(&p, &dpv)| p * dpv).sum();
                    for ((s_out, &p), &dpv) in
                        ds[r * tk..(r + 1) * tk].iter_mut().zip(p_row).zip(dp_row)
                    {
                        *s_out = p * (dpv - dot) * scale;
                    }
                }

                kernels::mm_nn(&ds, k_i, tq, tk, d, &mut dq[i * tq * d..(i + 1) * tq * d]);
                kernels::mm_tn(&ds, q_i, tk, tq, d, &mut dk[i * tk * d..(i + 1) * tk * d]);
            }
            add_into(grads, q, dq);
            add_into(grads, k, dk);
            add_into(grads, v, dv);
        }
        Op::RmsNorm { a, inv_rms } => {
            let d = *a.shape().last().unwrap();
            let rows = a.numel() / d;
            let mut da = vec![0.0f32; a.numel()];
            for r in 0..rows {
                let x = &a.data()[r * d..(r + 1) * d];
                let g_row = &g[r * d..(r + 1) * d];
                let ir = inv_rms[r];
                let dot: f32 = g_row.iter().zip(x).map(|(&gv, &xv)| gv * xv).sum();
                let c = dot * ir * ir * ir / d as f32;
                for ((o, &gv), &xv) in da[r * d..(r + 1) * d].iter_mut().zip(g_row).zip(x) {
                    *o = gv * ir - xv * c;
                }
            }
            add_into(grads, a, da);
        }
        Op::Reshape(a) => {
            add_into(grads, a, g.to_vec());
        }
        Op::Transpose { a, ax1, ax2 } => {
            let (_, da) = transpose_copy(g, out.shape(), *ax1, *ax2);
            add_into(grads, a, da);
        }
        Op::Concat { parts, axis } => {
            let axis_total = out.shape()[*axis];
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[*axis];
                if p.requires_grad() {
                    let mut dp = vec![0.0f32; p.numel()];
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        dp[o * pa * inner..(o + 1) * pa * inner]
                            .copy_from_slice(&g[src..src + pa * inner]);
                    }
                    add_into(grads, p, dp);
                }
                offset += pa;
            }
        }
        Op::Narrow { a, axis, start } => {
            let dim = a.shape()[*axis];
            let len = out.shape()[*axis];
            let outer: usize = a.shape()[..*axis].iter().product();
            let inner: usize = a.shape()[*axis + 1..].iter().product();
            let mut da = vec![0.0f32; a.numel()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                da[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            add_into(grads, a, da);
        }
        Op::Repeat { a, axis, count } => {
            let inner: usize = a.shape()[*axis..].iter().product();
            let outer: usize = a.shape()[..*axis].iter().product();
            let mut da = vec![0.0f32; a.numel()];
            for o in 0..outer {
                for c in 0..*count {
                    let src = (o * count + c) * inner;
                    for (dv, &gv) in da[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(&g[src..src + inner])
                    {
                        *dv += gv;
                    }
                }
            }
            add_into(grads, a, da);
        }
        Op::IndexRows { table, ids } => {
            let d = table.shape()[1];
            let mut dt = vec![0.0f32; table.numel()];
            for (i, &r) in ids.iter().enumerate() {
                for (dv, &gv) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                    *dv += gv;
                }
            }
            add_into(grads, table, dt);
        }
    }
}

/// Maps input flat indices to output flat indices for a reduction that
/// removes `axes` (sorted, deduped) from `shape`.
struct ReduceMap {
    // per input axis: (input stride, output stride or 0 when reduced away)
    strides: Vec<(usize, usize)>,
}

impl ReduceMap {
    fn output_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for &(in_stride, out_stride) in &self.strides {
            let coord = flat / in_stride;
            flat %= in_stride;
            out += coord * out_stride;
        }
        out
    }
}

fn input_to_output_map(shape: &[usize], axes: &[usize]) -> ReduceMap {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }
    ReduceMap {
        strides: in_strides.into_iter().zip(out_strides).collect(),
    }
}

/// Swaps two axes (lo < hi) with a copy.
fn transpose_copy(data: &[f32], shape: &[usize], lo: usize, hi: usize) -> (Vec<usize>, Vec<f32>) {
    let pre: usize = shape[..lo].iter().product();
    let d1 = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let d2 = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();

    let mut out = vec![0.0f32; data.len()];
    for p in 0..pre {
        for i1 in 0..d1 {
            for m in 0..mid {
                for i2 in 0..d2 {
                    let src = ((((p * d1 + i1) * mid + m) * d2) + i2) * post;
                    let dst = ((((p * d2 + i2) * mid + m) * d1) + i1) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(lo, hi);
    (new_shape, out)
}
