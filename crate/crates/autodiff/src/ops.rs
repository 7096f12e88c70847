//! Forward definitions of every recorded operation.

use crate::error::{AutodiffError, Result};
use crate::kernels::{dot, gemm_nn, gemm_nt};
use crate::tape::{Broadcast, Op, Tape, Var};
use crate::tensor::Tensor;

/// Train/eval switch for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature running mean and variance kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const LAYERNORM_EPS: f64 = 1e-5;

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    let rhs_numel: usize = rhs.iter().product();
    if lhs == rhs {
        Ok(Broadcast::Same)
    } else if rhs_numel == 1 {
        Ok(Broadcast::Scalar)
    } else if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        Ok(Broadcast::Trailing)
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

impl Tape {
    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    /// Orders a commutative pair so the operand with more elements comes first.
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Broadcast)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        match broadcast_kind(op, sa, sb) {
            Ok(kind) => Ok((a, b, kind)),
            Err(err) => broadcast_kind(op, sb, sa).map(|kind| (b, a, kind)).map_err(|_| err),
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, bcast: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let yd = y.data();
        let data = match bcast {
            Broadcast::Same => x.data().iter().zip(yd).map(|(&p, &q)| f(p, q)).collect(),
            Broadcast::Scalar => x.data().iter().map(|&p| f(p, yd[0])).collect(),
            Broadcast::Trailing => x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &p)| f(p, yd[i % yd.len()]))
                .collect(),
        };
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// Elementwise sum. One operand may be a scalar or match the other's
    /// trailing dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bcast) = self.broadcast_pair("add", a, b)?;
        let value = self.zip_broadcast(a, b, bcast, |p, q| p + q);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bcast) = self.broadcast_pair("mul", a, b)?;
        let value = self.zip_broadcast(a, b, bcast, |p, q| p * q);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, bcast }, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), elu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Value passes through unchanged; no gradient flows back along this edge.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, Op::SoftmaxLastDim(a), rg)
    }

    /// Zero-mean, unit-variance normalization of every row over the last
    /// dimension (no affine part).
    pub fn layernorm_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut data = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(a);
        self.push(value, Op::LayerNorm { a, inv_std }, rg)
    }

    /// Batch normalization over the rows of a `[batch × features]` input.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` (momentum [`BATCHNORM_MOMENTUM`], unbiased variance). Eval mode
    /// normalizes with `stats` and leaves them untouched.
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != stats.mean.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "batchnorm1d",
                lhs: shape,
                rhs: vec![stats.mean.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let normalized = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(AutodiffError::BatchTooSmall { rows });
                }
                let xv = self.value(x).data();
                let mut mean = vec![0.0; d];
                for row in xv.chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for row in xv.chunks(d) {
                    for j in 0..d {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
                let mut data = xv.to_vec();
                for row in data.chunks_mut(d) {
                    for j in 0..d {
                        row[j] = (row[j] - mean[j]) * inv_std[j];
                    }
                }
                let unbias = rows as f64 / (rows as f64 - 1.0);
                for j in 0..d {
                    stats.mean[j] = (1.0 - BATCHNORM_MOMENTUM) * stats.mean[j] + BATCHNORM_MOMENTUM * mean[j];
                    stats.var[j] = (1.0 - BATCHNORM_MOMENTUM) * stats.var[j] + BATCHNORM_MOMENTUM * var[j] * unbias;
                }
                let value = Tensor::new(shape, data).expect("same shape");
                let rg = self.requires_grad(x);
                self.push(value, Op::ColumnNorm { a: x, inv_std }, rg)
            }
            Mode::Eval => {
                let shift = self.constant(Tensor::vector(stats.mean.iter().map(|m| -m).collect()));
                let inv = self.constant(Tensor::vector(
                    stats.var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect(),
                ));
                let centered = self.add(x, shift)?;
                self.mul(centered, inv)?
            }
        };
        let scaled = self.mul(normalized, gamma)?;
        self.add(scaled, beta)
    }

    /// Matrix product of `a[..., k]` (rows flattened) with `b[k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner = sb[0];
        let cols = sb[1];
        let rows = self.value(a).numel() / inner.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(cols);
        let mut data = vec![0.0; rows * cols];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut data, rows, inner, cols);
        let value = Tensor::new(out_shape, data).expect("matmul shape");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            },
            rg,
        ))
    }

    /// Batched product of `a[B × m × k]` with `b[B × k × n]`, or with
    /// `b[B × n × k]` transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let kb = if transpose_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(mismatch());
        }
        let mut data = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let as_ = &av[bi * m * k..(bi + 1) * m * k];
            let bs = &bv[bi * k * n..(bi + 1) * k * n];
            let os = &mut data[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt(as_, bs, os, m, k, n);
            } else {
                gemm_nn(as_, bs, os, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], data).expect("bmm shape");
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::BatchedMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mean = x.data().iter().sum::<f64>() / x.numel().max(1) as f64;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(mean), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::Domain {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::OutOfRange {
                op: "concat",
                index: axis,
                size: base.len(),
            });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &size) in parts.iter().zip(&sizes) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * size * inner..(o + 1) * size * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data).expect("concat shape");
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                sizes,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::OutOfRange {
                op: "narrow",
                index: axis,
                size: shape.len(),
            });
        }
        let axis_len = shape[axis];
        if start + len > axis_len {
            return Err(AutodiffError::OutOfRange {
                op: "narrow",
                index: start + len,
                size: axis_len,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data).expect("narrow shape");
        let rg = self.requires_grad(a);
        Ok(self.push(
            value,
            Op::Narrow {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.value(table).shape().to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embedding",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (shape[0], shape[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::OutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data).expect("embedding shape");
        let rg = self.requires_grad(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies each leading-axis slice `x[b, ...]` by the scalar `s[b]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x).shape().to_vec(), self.value(s).shape().to_vec());
        let rows = self.value(s).numel();
        if xs.is_empty() || xs[0] != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: xs,
                rhs: ss,
            });
        }
        let per_row = self.value(x).numel() / rows.max(1);
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / per_row])
            .collect();
        let value = Tensor::new(xs, data).expect("scale_rows shape");
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScaleRows { x, s }, rg))
    }

    /// Valid-mode 2-D cross-correlation of each image in `x[B × H × W]` with
    /// a single `kernel[kh × kw]`.
    pub fn conv2d_valid(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(kernel).shape().to_vec());
        if xs.len() != 3 || ks.len() != 2 || xs[1] < ks[0] || xs[2] < ks[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_valid",
                lhs: xs,
                rhs: ks,
            });
        }
        let (batch, h, w) = (xs[0], xs[1], xs[2]);
        let (kh, kw) = (ks[0], ks[1]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut data = vec![0.0; batch * oh * ow];
        for b in 0..batch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..kh {
                        let row = &xv[(b * h + i + u) * w + j..(b * h + i + u) * w + j + kw];
                        acc += dot(row, &kv[u * kw..(u + 1) * kw]);
                    }
                    data[(b * oh + i) * ow + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![batch, oh, ow], data).expect("conv shape");
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            value,
            Op::Conv2dValid {
                x,
                kernel,
                batch,
                h,
                w,
                kh,
                kw,
            },
            rg,
        ))
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

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
