use serde::{Deserialize, Serialize};

use super::{Bcast, BinKind, NodeId, Op, Tape, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, normal_cdf, MatRef, Tensor};

/// Contiguous run of rows forming one attention sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub(crate) const LAYERNORM_EPS: f64 = 1e-6;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "operands recorded on different tapes"
    );
}

/// Row-wise numerically stable softmax, written into `out`.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = 1.0 / total;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn record(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'t> {
        let needs = self.tape.needs_grad(inputs);
        self.tape.push(value, op, needs)
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(rhs, false, false)
    }

    /// Matrix product `self · rhsᵀ`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(rhs, false, true)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_ex(self, rhs: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        same_tape(&self, &rhs);
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            if a.ndim() != 2 || b.ndim() != 2 {
                return Err(dim_err("matmul", a.shape(), b.shape()));
            }
            let (ar, ac) = (a.shape()[0], a.shape()[1]);
            let (br, bc) = (b.shape()[0], b.shape()[1]);
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(dim_err("matmul", a.shape(), b.shape()));
            }
            let av = if ta {
                MatRef::transposed(a.data(), 0, ac)
            } else {
                MatRef::row_major(a.data(), 0, ac)
            };
            let bv = if tb {
                MatRef::transposed(b.data(), 0, bc)
            } else {
                MatRef::row_major(b.data(), 0, bc)
            };
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, av, bv, 0.0, &mut out);
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.record(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                ta,
                tb,
            },
            &[self.id, rhs.id],
        ))
    }

    fn binary(self, rhs: Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        same_tape(&self, &rhs);
        let (value, bcast) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let bcast = if a.shape() == b.shape() {
                Bcast::Same
            } else if b.numel() == 1 {
                Bcast::Scalar
            } else if b.ndim() == 1 && a.ndim() >= 1 && b.numel() == a.last_dim() {
                Bcast::Row
            } else {
                return Err(dim_err(name, a.shape(), b.shape()));
            };
            let f = match kind {
                BinKind::Add => |x: f64, y: f64| x + y,
                BinKind::Sub => |x: f64, y: f64| x - y,
                BinKind::Mul => |x: f64, y: f64| x * y,
                BinKind::Div => |x: f64, y: f64| x / y,
            };
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = match bcast {
                Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Bcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
                Bcast::Row => {
                    let c = bd.len();
                    ad.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, bd[i % c]))
                        .collect()
                }
            };
            (Tensor::from_parts(a.shape().to_vec(), data), bcast)
        };
        Ok(self.record(
            value,
            Op::Binary {
                a: self.id,
                b: rhs.id,
                kind,
                bcast,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Elementwise sum; `rhs` may be a scalar or a row vector over the last axis.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinKind::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinKind::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinKind::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, BinKind::Div, "div")
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|x| x * c));
        self.record(value, Op::Scale { a: self.id, c }, &[self.id])
    }

    /// Adds a constant to every element.
    pub fn shift(self, c: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|x| x + c));
        self.record(value, Op::Shift { a: self.id }, &[self.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.with_value(Tensor::transpose)?;
        Ok(self.record(value, Op::Transpose { a: self.id }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.record(value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Selects rows by index; repeated indices are allowed and their
    /// gradients accumulate. This is also the embedding lookup.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.ndim() != 2 {
                return Err(dim_err("gather_rows", a.shape(), &[]));
            }
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                if i >= rows {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: i,
                        bound: rows,
                    });
                }
                out.extend_from_slice(a.row(i));
            }
            Tensor::from_parts(vec![idx.len(), cols], out)
        };
        Ok(self.record(
            value,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Places row `r` of `self` at row `idx[r]` of an `n`-row zero matrix,
    /// summing rows that share a destination.
    pub fn scatter_rows(self, idx: &[usize], n: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.ndim() != 2 || a.shape()[0] != idx.len() {
                return Err(dim_err("scatter_rows", a.shape(), &[idx.len()]));
            }
            let cols = a.shape()[1];
            let mut out = Tensor::zeros(&[n, cols]);
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= n {
                    return Err(Error::Index {
                        op: "scatter_rows",
                        index: dst,
                        bound: n,
                    });
                }
                for (o, &v) in out.row_mut(dst).iter_mut().zip(a.row(r)) {
                    *o += v;
                }
            }
            out
        };
        Ok(self.record(
            value,
            Op::ScatterRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let rows = self.with_value(|t| t.shape().first().copied().unwrap_or(0));
        if start + len > rows {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                bound: rows,
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    /// Entries `self[r, c]` for each coordinate, as a vector.
    pub fn pick(self, coords: &[(usize, usize)]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.ndim() != 2 {
                return Err(dim_err("pick", a.shape(), &[]));
            }
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            let mut out = Vec::with_capacity(coords.len());
            for &(r, c) in coords {
                if r >= rows || c >= cols {
                    return Err(Error::Index {
                        op: "pick",
                        index: r * cols + c,
                        bound: rows * cols,
                    });
                }
                out.push(a.at(r, c));
            }
            Tensor::vector(out)
        };
        Ok(self.record(
            value,
            Op::Pick {
                a: self.id,
                coords: coords.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Multiplies row `i` of a matrix by `w[i]`.
    pub fn scale_rows(self, w: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &w);
        let value = {
            let nodes = self.tape.nodes();
            let (x, wv) = (&nodes[self.id].value, &nodes[w.id].value);
            if x.ndim() != 2 || wv.ndim() != 1 || wv.numel() != x.shape()[0] {
                return Err(dim_err("scale_rows", x.shape(), wv.shape()));
            }
            let cols = x.shape()[1];
            let mut out = x.data().to_vec();
            for (row, &s) in out.chunks_exact_mut(cols.max(1)).zip(wv.data()) {
                for v in row {
                    *v *= s;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        Ok(self.record(
            value,
            Op::ScaleRows {
                x: self.id,
                w: w.id,
            },
            &[self.id, w.id],
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(Tensor::sum));
        self.record(value, Op::Sum { a: self.id }, &[self.id])
    }

    /// Mean of all elements, as a scalar. The mean of an empty tensor is 0.
    pub fn mean(self) -> Var<'t> {
        let value = self.with_value(|t| {
            if t.numel() == 0 {
                Tensor::scalar(0.0)
            } else {
                Tensor::scalar(t.sum() / t.numel() as f64)
            }
        });
        self.record(value, Op::Mean { a: self.id }, &[self.id])
    }

    /// Column sums of a matrix (reduction over the leading axis).
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.ndim() != 2 {
                return Err(dim_err("sum_rows", a.shape(), &[]));
            }
            let cols = a.shape()[1];
            let mut out = vec![0.0; cols];
            for r in 0..a.shape()[0] {
                for (o, v) in out.iter_mut().zip(a.row(r)) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        };
        Ok(self.record(value, Op::SumRows { a: self.id }, &[self.id]))
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let (value, saved) = self.with_value(|t| match kind {
            UnaryKind::Sqrt => (t.map(f64::sqrt), Vec::new()),
            UnaryKind::Sigmoid => (t.map(|x| 1.0 / (1.0 + (-x).exp())), Vec::new()),
            UnaryKind::Gelu => {
                let cdf: Vec<f64> = t.data().iter().map(|&x| normal_cdf(x)).collect();
                let out = t.data().iter().zip(&cdf).map(|(x, c)| x * c).collect();
                (Tensor::from_parts(t.shape().to_vec(), out), cdf)
            }
            UnaryKind::NormalCdf => (t.map(normal_cdf), Vec::new()),
            UnaryKind::Square => (t.map(|x| x * x), Vec::new()),
            UnaryKind::Exp => (t.map(f64::exp), Vec::new()),
            UnaryKind::Log => (t.map(f64::ln), Vec::new()),
        });
        self.record(
            value,
            Op::Unary {
                a: self.id,
                kind,
                saved,
            },
            &[self.id],
        )
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// Exact GeLU `x Φ(x)`.
    pub fn gelu(self) -> Var<'t> {
        self.unary(UnaryKind::Gelu)
    }

    /// Standard normal CDF applied elementwise.
    pub fn normal_cdf(self) -> Var<'t> {
        self.unary(UnaryKind::NormalCdf)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Log)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(self) -> Var<'t> {
        let value = self.with_value(|t| {
            let mut out = vec![0.0; t.numel()];
            softmax_rows(t.data(), t.last_dim().max(1), &mut out);
            Tensor::from_parts(t.shape().to_vec(), out)
        });
        self.record(value, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Log-sum-exp over the last axis of a matrix, one value per row.
    pub fn logsumexp_rows(self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id].value;
            if a.ndim() != 2 {
                return Err(dim_err("logsumexp_rows", a.shape(), &[]));
            }
            Tensor::vector((0..a.shape()[0]).map(|r| logsumexp(a.row(r))).collect())
        };
        Ok(self.record(value, Op::LogSumExp { a: self.id }, &[self.id]))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &gain);
        same_tape(&self, &bias);
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
            );
            let d = x.last_dim();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(dim_err("layernorm", x.shape(), g.shape()));
            }
            let rows = x.rows();
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
                rstd[r] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd)
        };
        Ok(self.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self`, over positions where `ignore` is false. Zero when every
    /// position is ignored.
    pub fn cross_entropy(self, targets: &[usize], ignore: &[bool]) -> Result<Var<'t>> {
        let (value, probs, active, count) = {
            let nodes = self.tape.nodes();
            let logits = &nodes[self.id].value;
            if logits.ndim() != 2
                || logits.shape()[0] != targets.len()
                || ignore.len() != targets.len()
            {
                return Err(dim_err(
                    "cross_entropy",
                    logits.shape(),
                    &[targets.len(), ignore.len()],
                ));
            }
            let v = logits.shape()[1];
            let active: Vec<bool> = ignore.iter().map(|&i| !i).collect();
            for (&t, &on) in targets.iter().zip(&active) {
                if on && t >= v {
                    return Err(Error::Index {
                        op: "cross_entropy",
                        index: t,
                        bound: v,
                    });
                }
            }
            let mut probs = vec![0.0; logits.numel()];
            softmax_rows(logits.data(), v.max(1), &mut probs);
            let count = active.iter().filter(|&&a| a).count();
            let mut total = 0.0;
            for (r, (&t, &on)) in targets.iter().zip(&active).enumerate() {
                if on {
                    let row = logits.row(r);
                    total += logsumexp(row) - row[t];
                }
            }
            let loss = if count == 0 {
                0.0
            } else {
                total / count as f64
            };
            (Tensor::scalar(loss), probs, active, count)
        };
        Ok(self.record(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                active,
                probs,
                count,
            },
            &[self.id],
        ))
    }
}

impl Tape {
    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes();
            let first = parts
                .first()
                .ok_or_else(|| crate::error::contract("concat of zero tensors"))?;
            let cols = nodes[first.id].value.last_dim();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                assert!(std::ptr::eq(p.tape, self), "operand from another tape");
                let t = &nodes[p.id].value;
                if t.ndim() != 2 || t.shape()[1] != cols {
                    return Err(dim_err("concat", nodes[first.id].value.shape(), t.shape()));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, cols], data)
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs_grad(&ids);
        Ok(self.push(value, Op::Concat { parts: ids }, needs))
    }

    /// Splits a matrix into consecutive row blocks of the given sizes.
    pub fn split<'t>(&'t self, x: Var<'t>, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let rows = x.with_value(|t| t.shape().first().copied().unwrap_or(0));
        if sizes.iter().sum::<usize>() != rows {
            return Err(dim_err("split", &x.shape(), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(x.slice_rows(start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Multi-head scaled dot-product self-attention evaluated independently
    /// inside each segment. `q`, `k`, `v` are `[n × D]` with `D` divisible
    /// by `heads`.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var<'t>> {
        let (value, probs) = {
            let nodes = self.nodes();
            let (qt, kt, vt) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
            if qt.ndim() != 2 || qt.shape() != kt.shape() || qt.shape() != vt.shape() {
                return Err(dim_err("attention", qt.shape(), kt.shape()));
            }
            let (n, d) = (qt.shape()[0], qt.shape()[1]);
            if heads == 0 || d % heads != 0 {
                return Err(dim_err("attention", qt.shape(), &[heads]));
            }
            let mut covered = 0;
            for s in segments {
                if s.start != covered {
                    return Err(crate::error::contract(
                        "attention segments must tile the rows in order",
                    ));
                }
                covered += s.len;
            }
            if covered != n {
                return Err(dim_err("attention", qt.shape(), &[covered]));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
            let mut probs = vec![0.0; total];
            let mut out = vec![0.0; n * d];
            let mut scores = Vec::new();
            let mut off = 0;
            for s in segments {
                let l = s.len;
                scores.resize(l * l, 0.0);
                for h in 0..heads {
                    let base = s.start * d + h * dh;
                    gemm(
                        l,
                        dh,
                        l,
                        scale,
                        MatRef::with_stride(qt.data(), base, d, 1),
                        MatRef::with_stride(kt.data(), base, 1, d),
                        0.0,
                        &mut scores,
                    );
                    let p = &mut probs[off..off + l * l];
                    softmax_rows(&scores, l.max(1), p);
                    gemm_strided(
                        l,
                        l,
                        dh,
                        1.0,
                        MatRef::row_major(p, 0, l),
                        MatRef::with_stride(vt.data(), base, d, 1),
                        0.0,
                        &mut out,
                        base,
                        d,
                        1,
                    );
                    off += l * l;
                }
            }
            (Tensor::from_parts(vec![n, d], out), probs)
        };
        let needs = self.needs_grad(&[q.id, k.id, v.id]);
        Ok(self.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            needs,
        ))
    }
}
