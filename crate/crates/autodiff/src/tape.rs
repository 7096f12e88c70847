//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and a description of
//! how to route gradients back to its parents. Nodes only ever refer to
//! earlier nodes, so the node list is already in topological order and
//! the backward pass is a single reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// rhs shape is a suffix of lhs shape
    Trailing,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Elu(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    /// Gradient passes only where the input lies inside `[lo, hi]`.
    Clamp(Var, f64, f64),
    SoftmaxLastDim(Var),
    /// Normalizes each row over the last dimension; `inv_std` per row.
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    /// Normalizes each column of a 2-D input over rows; `inv_std` per column.
    ColumnNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    StopGrad,
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        a: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Conv2dValid {
        x: Var,
        kernel: Var,
        batch: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Records operations on dense tensors and differentiates through them.
///
/// A tape and its nodes are confined to one thread; build a fresh tape per
/// forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the most recent backward passes, if this node
    /// requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Backpropagates from a one-element `loss`, adding into every reached
    /// node's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, |_, _| {})
    }

    /// Like [`Tape::backward`], additionally reporting each reached leaf's
    /// gradient contribution from this pass alone.
    pub fn backward_with(&mut self, loss: Var, mut on_leaf: impl FnMut(Var, &[f64])) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !loss_node.requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                on_leaf(Var(idx), &g);
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            &Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| gemm_nt(g, bv, ga, rows, cols, inner));
                self.accumulate(grads, b, |gb| gemm_tn(av, g, gb, rows, inner, cols));
            }
            &Op::BatchedMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if transpose_b {
                            gemm_nn(gs, bs, gas, m, n, k);
                        } else {
                            gemm_nt(gs, bs, gas, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if transpose_b {
                            gemm_tn(gs, as_, gbs, m, n, k);
                        } else {
                            gemm_tn(as_, gs, gbs, m, k, n);
                        }
                    }
                });
            }
            &Op::Add { a, b, bcast } => {
                self.accumulate(grads, a, |ga| axpy(1.0, g, ga));
                self.accumulate(grads, b, |gb| reduce_broadcast(g, gb, bcast));
            }
            &Op::Mul { a, b, bcast } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| match bcast {
                    Broadcast::Same => ga
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(o, (gi, bi))| *o += gi * bi),
                    Broadcast::Scalar => axpy(bv[0], g, ga),
                    Broadcast::Trailing => {
                        let m = bv.len();
                        for (chunk_g, chunk_o) in g.chunks(m).zip(ga.chunks_mut(m)) {
                            chunk_o
                                .iter_mut()
                                .zip(chunk_g.iter().zip(bv))
                                .for_each(|(o, (gi, bi))| *o += gi * bi);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| match bcast {
                    Broadcast::Same => gb
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(o, (gi, ai))| *o += gi * ai),
                    Broadcast::Scalar => gb[0] += dot(g, av),
                    Broadcast::Trailing => {
                        let m = gb.len();
                        for (chunk_g, chunk_a) in g.chunks(m).zip(av.chunks(m)) {
                            gb.iter_mut()
                                .zip(chunk_g.iter().zip(chunk_a))
                                .for_each(|(o, (gi, ai))| *o += gi * ai);
                        }
                    }
                });
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, |ga| axpy(c, g, ga)),
            &Op::AddScalar(a) => self.accumulate(grads, a, |ga| axpy(1.0, g, ga)),
            &Op::Sigmoid(a) => self.accumulate(grads, a, |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (1.0 - y);
                }
            }),
            &Op::Elu(a) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, gi), (x, y)) in ga.iter_mut().zip(g).zip(av.iter().zip(out)) {
                        *o += if *x > 0.0 { *gi } else { gi * (y + 1.0) };
                    }
                })
            }
            &Op::Log(a) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gi / x;
                    }
                })
            }
            &Op::Square(a) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * gi * x;
                    }
                })
            }
            &Op::Abs(a) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gi * sign(*x);
                    }
                })
            }
            &Op::Clamp(a, lo, hi) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        if (lo..=hi).contains(x) {
                            *o += gi;
                        }
                    }
                })
            }
            &Op::SoftmaxLastDim(a) => {
                let d = node.value.last_dim();
                self.accumulate(grads, a, |ga| {
                    for ((y, gr), o) in out.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s = dot(y, gr);
                        for j in 0..d {
                            o[j] += y[j] * (gr[j] - s);
                        }
                    }
                })
            }
            Op::LayerNorm { a, inv_std } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for (r, ((xhat, gr), o)) in out.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)).enumerate() {
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gx = dot(gr, xhat) / d as f64;
                        for j in 0..d {
                            o[j] += inv_std[r] * (gr[j] - mean_g - xhat[j] * mean_gx);
                        }
                    }
                })
            }
            Op::ColumnNorm { a, inv_std } => {
                let d = inv_std.len();
                let rows = out.len() / d;
                self.accumulate(grads, *a, |ga| {
                    let mut mean_g = vec![0.0; d];
                    let mut mean_gx = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            mean_g[j] += g[r * d + j];
                            mean_gx[j] += g[r * d + j] * out[r * d + j];
                        }
                    }
                    for j in 0..d {
                        mean_g[j] /= rows as f64;
                        mean_gx[j] /= rows as f64;
                    }
                    for r in 0..rows {
                        for j in 0..d {
                            let i = r * d + j;
                            ga[i] += inv_std[j] * (g[i] - mean_g[j] - out[i] * mean_gx[j]);
                        }
                    }
                })
            }
            &Op::Sum(a) => self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n))
            }
            &Op::Reshape(a) => self.accumulate(grads, a, |ga| axpy(1.0, g, ga)),
            Op::Concat {
                parts,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&part, &size) in parts.iter().zip(sizes) {
                    self.accumulate(grads, part, |gp| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + size) * inner];
                            axpy(1.0, src, &mut gp[o * size * inner..(o + 1) * size * inner]);
                        }
                    });
                    offset += size;
                }
            }
            &Op::Narrow {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => self.accumulate(grads, a, |ga| {
                for o in 0..outer {
                    let dst = &mut ga[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner];
                    axpy(1.0, &g[o * len * inner..(o + 1) * len * inner], dst);
                }
            }),
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                })
            }
            &Op::ScaleRows { x, s } => {
                let xv = self.value(x).data();
                let sv = self.value(s).data();
                let per_row = xv.len() / sv.len();
                self.accumulate(grads, x, |gx| {
                    for (r, &sr) in sv.iter().enumerate() {
                        axpy(
                            sr,
                            &g[r * per_row..(r + 1) * per_row],
                            &mut gx[r * per_row..(r + 1) * per_row],
                        );
                    }
                });
                self.accumulate(grads, s, |gs| {
                    for (r, o) in gs.iter_mut().enumerate() {
                        *o += dot(&g[r * per_row..(r + 1) * per_row], &xv[r * per_row..(r + 1) * per_row]);
                    }
                });
            }
            &Op::Conv2dValid {
                x,
                kernel,
                batch,
                h,
                w,
                kh,
                kw,
            } => {
                let xv = self.value(x).data();
                let kv = self.value(kernel).data();
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                self.accumulate(grads, kernel, |gk| {
                    for b in 0..batch {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[(b * oh + i) * ow + j];
                                for u in 0..kh {
                                    for v in 0..kw {
                                        gk[u * kw + v] += go * xv[(b * h + i + u) * w + j + v];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, x, |gx| {
                    for b in 0..batch {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[(b * oh + i) * ow + j];
                                for u in 0..kh {
                                    for v in 0..kw {
                                        gx[(b * h + i + u) * w + j + v] += go * kv[u * kw + v];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
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

fn reduce_broadcast(g: &[f64], gb: &mut [f64], bcast: Broadcast) {
    match bcast {
        Broadcast::Same => axpy(1.0, g, gb),
        Broadcast::Scalar => gb[0] += g.iter().sum::<f64>(),
        Broadcast::Trailing => {
            let m = gb.len();
            for chunk in g.chunks(m) {
                axpy(1.0, chunk, gb);
            }
        }
    }
}
