use rand::Rng;

use super::rules::{Op, GELU_C, SQRT_2_OVER_PI};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{leading, Scalar, Tensor};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    fn unary_map(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let (value, rg) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let data = n.value.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::new(n.value.shape().to_vec(), data).expect("same shape"),
                n.requires_grad,
            )
        };
        self.push(value, op, rg)
    }

    /// Batched matrix product over the last two axes. `b` is either rank 2
    /// (shared across the batch) or has the same leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let nodes = self.nodes();
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if shared_b {
                kernels::gemm(av, bv, &mut out, batch * m, k, n);
            } else {
                for t in 0..batch {
                    kernels::gemm(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut out[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            batch,
            m,
            k,
            n,
            shared_b,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, self.any_grad(&[a, b])))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape(name, &sa, &sb));
        }
        let data = {
            let nodes = self.nodes();
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let nb = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % nb]))
                .collect()
        };
        Ok(self.push(Tensor::new(sa, data)?, op, self.any_grad(&[a, b])))
    }

    /// `a + b`, where `b`'s shape equals `a`'s or a trailing suffix of it.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::c(scale), T::c(shift));
        self.unary_map(x, Op::Affine { x: x.0, scale: s }, |v| s * v + c)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary_map(x, Op::Relu { x: x.0 }, |v| v.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let (c, s, half) = (T::c(GELU_C), T::c(SQRT_2_OVER_PI), T::c(0.5));
        self.unary_map(x, Op::Gelu { x: x.0 }, |v| {
            half * v * (T::one() + (s * (v + c * v * v * v)).tanh())
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary_map(x, Op::Tanh { x: x.0 }, |v| v.tanh())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary_map(x, Op::Sigmoid { x: x.0 }, |v| {
            T::one() / (T::one() + (-v).exp())
        })
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary_map(x, Op::Abs { x: x.0 }, |v| v.abs())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary_map(x, Op::Square { x: x.0 }, |v| v * v)
    }

    fn row_map(&self, x: Var, log: bool) -> Var {
        let (value, rg, cols) = {
            let nodes = self.nodes();
            let n = &nodes[x.0];
            let cols = *n.value.shape().last().expect("rank >= 1");
            let mut out = n.value.data().to_vec();
            for row in out.chunks_mut(cols) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                if log {
                    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                } else {
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / sum;
                    }
                }
            }
            (
                Tensor::new(n.value.shape().to_vec(), out).expect("same shape"),
                n.requires_grad,
                cols,
            )
        };
        let op = if log {
            Op::LogSoftmax { x: x.0, cols }
        } else {
            Op::Softmax { x: x.0, cols }
        };
        self.push(value, op, rg)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&self, x: Var) -> Var {
        self.row_map(x, false)
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        self.row_map(x, true)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[R]`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let r = *sx.last().expect("rank >= 1");
        if self.shape(gain) != [r] || self.shape(bias) != [r] {
            return Err(Error::shape("layer_norm", &sx, &self.shape(gain)));
        }
        let rows = leading(&sx);
        let (out, xhat, rstd) = {
            let nodes = self.nodes();
            let xv = nodes[x.0].value.data();
            let (gv, bv) = (nodes[gain.0].value.data(), nodes[bias.0].value.data());
            let rf = T::c(r as f64);
            let mut out = vec![T::zero(); xv.len()];
            let mut xhat = vec![T::zero(); xv.len()];
            let mut rstd = Vec::with_capacity(rows);
            for (i, row) in xv.chunks(r).enumerate() {
                let mean = row.iter().copied().sum::<T>() / rf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / rf;
                let rs = T::one() / (var + T::c(eps)).sqrt();
                rstd.push(rs);
                for j in 0..r {
                    let h = (row[j] - mean) * rs;
                    xhat[i * r + j] = h;
                    out[i * r + j] = h * gv[j] + bv[j];
                }
            }
            (out, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        Ok(self.push(
            Tensor::new(sx, out)?,
            op,
            self.any_grad(&[x, gain, bias]),
        ))
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::shape("sum_axis", &sx, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&sx, axis);
        if dim == 0 {
            return Err(Error::EmptySequence);
        }
        let scale = if mean {
            T::one() / T::c(dim as f64)
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); outer * inner];
        {
            let nodes = self.nodes();
            let xv = nodes[x.0].value.data();
            for o in 0..outer {
                let acc = &mut out[o * inner..(o + 1) * inner];
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    for (a, &v) in acc.iter_mut().zip(&xv[base..base + inner]) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a *= scale;
                }
            }
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let op = Op::SumAxis {
            x: x.0,
            outer,
            dim,
            inner,
            scale,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, self.requires_grad(x)))
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_all(&self, x: Var, mean: bool) -> Var {
        let (v, n, rg) = {
            let nodes = self.nodes();
            let node = &nodes[x.0];
            (
                node.value.data().iter().copied().sum::<T>(),
                node.value.numel(),
                node.requires_grad,
            )
        };
        let scale = if mean {
            T::one() / T::c(n as f64)
        } else {
            T::one()
        };
        self.push(Tensor::scalar(v * scale), Op::SumAll { x: x.0, scale }, rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        self.reduce_all(x, false)
    }

    pub fn mean(&self, x: Var) -> Var {
        self.reduce_all(x, true)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, self.requires_grad(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &sx, perm));
        }
        let rank = sx.len();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * sx[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = sx.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        self.gather(x, out_shape, map)
    }

    fn gather(&self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let data = {
            let nodes = self.nodes();
            let xv = nodes[x.0].value.data();
            map.iter().map(|&i| xv[i]).collect()
        };
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Gather { x: x.0, map },
            self.requires_grad(x),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape("slice", &sx, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&sx, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let nodes = self.nodes();
            let xv = nodes[x.0].value.data();
            for o in 0..outer {
                let src = (o * dim + start) * inner;
                out.extend_from_slice(&xv[src..src + len * inner]);
            }
        }
        let mut shape = sx;
        shape[axis] = len;
        let op = Op::Slice {
            x: x.0,
            outer,
            dim,
            inner,
            start,
            len,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, self.requires_grad(x)))
    }

    /// Index `index` of `axis`, dropping that axis.
    pub fn select(&self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let v = self.slice(x, axis, index, 1)?;
        let mut shape = self.shape(x);
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(v, &shape)
    }

    /// Stacks equally shaped tensors along a new axis at position `axis`.
    pub fn stack(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        if axis > first.len() {
            return Err(Error::shape("stack", &first, &[axis]));
        }
        for &v in xs {
            let s = self.shape(v);
            if s != first {
                return Err(Error::shape("stack", &first, &s));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * xs.len());
        {
            let nodes = self.nodes();
            for o in 0..outer {
                for &v in xs {
                    out.extend_from_slice(&nodes[v.0].value.data()[o * inner..(o + 1) * inner]);
                }
            }
        }
        let mut shape = first;
        shape.insert(axis, xs.len());
        let op = Op::Stack {
            xs: xs.iter().map(|v| v.0).collect(),
            outer,
            inner,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, self.any_grad(xs)))
    }

    /// Sliding windows over the time axis of `[B, L, C]`, giving
    /// `[B, L_out, kernel * C]` with `L_out = (L - kernel) / stride + 1`.
    pub fn unfold(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || kernel == 0 || stride == 0 {
            return Err(Error::shape("unfold", &sx, &[kernel, stride]));
        }
        let (batch, len, channels) = (sx[0], sx[1], sx[2]);
        if len < kernel {
            return Err(Error::InputTooShort {
                got: len,
                min: kernel,
            });
        }
        let out_len = (len - kernel) / stride + 1;
        let w = kernel * channels;
        let mut out = Vec::with_capacity(batch * out_len * w);
        {
            let nodes = self.nodes();
            let xv = nodes[x.0].value.data();
            for b in 0..batch {
                for t in 0..out_len {
                    let src = (b * len + t * stride) * channels;
                    out.extend_from_slice(&xv[src..src + w]);
                }
            }
        }
        let op = Op::Unfold {
            x: x.0,
            batch,
            len,
            channels,
            kernel,
            stride,
            out_len,
        };
        Ok(self.push(
            Tensor::new(vec![batch, out_len, w], out)?,
            op,
            self.requires_grad(x),
        ))
    }

    /// `out[r] = x[r, idx[r]]` for `x: [rows, classes]`.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != idx.len() {
            return Err(Error::shape("pick", &sx, &[idx.len()]));
        }
        let classes = sx[1];
        if let Some(&bad) = idx.iter().find(|&&c| c >= classes) {
            return Err(Error::Label {
                label: bad,
                classes,
            });
        }
        let out = {
            let nodes = self.nodes();
            let xv = nodes[x.0].value.data();
            idx.iter()
                .enumerate()
                .map(|(r, &c)| xv[r * classes + c])
                .collect()
        };
        let op = Op::Pick {
            x: x.0,
            classes,
            idx: idx.to_vec(),
        };
        Ok(self.push(
            Tensor::new(vec![idx.len()], out)?,
            op,
            self.requires_grad(x),
        ))
    }

    /// Row-wise cosine similarity of `[rows, D]` tensors. A row where either
    /// vector has zero norm yields 0 and passes no gradient.
    pub fn cosine_rows(&self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su != sv || su.len() != 2 {
            return Err(Error::shape("cosine", &su, &sv));
        }
        let dim = su[1];
        let (out, norms, degenerate) = {
            let nodes = self.nodes();
            let (uv, vv) = (nodes[u.0].value.data(), nodes[v.0].value.data());
            let mut out = Vec::with_capacity(su[0]);
            let mut norms = Vec::with_capacity(su[0]);
            let mut degenerate = 0usize;
            for (ur, vr) in uv.chunks(dim).zip(vv.chunks(dim)) {
                let dot: T = ur.iter().zip(vr).map(|(&a, &b)| a * b).sum();
                let nu = ur.iter().map(|&a| a * a).sum::<T>().sqrt();
                let nv = vr.iter().map(|&a| a * a).sum::<T>().sqrt();
                norms.push((nu, nv));
                if nu == T::zero() || nv == T::zero() {
                    degenerate += 1;
                    out.push(T::zero());
                } else {
                    out.push(dot / (nu * nv));
                }
            }
            (out, norms, degenerate)
        };
        if degenerate > 0 {
            log::warn!("cosine similarity: {degenerate} zero-norm row(s) contribute 0");
        }
        let op = Op::CosineRows {
            u: u.0,
            v: v.0,
            dim,
            norms,
        };
        Ok(self.push(
            Tensor::new(vec![su[0]], out)?,
            op,
            self.any_grad(&[u, v]),
        ))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x);
        let keep = 1.0 - p;
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    T::c(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }
}
