use super::Node;
use crate::kernels;
use crate::tensor::Scalar;

pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Recorded operation. Indices refer to earlier nodes on the same tape.
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: T,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Square {
        x: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    LogSoftmax {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAxis {
        x: usize,
        outer: usize,
        dim: usize,
        inner: usize,
        scale: T,
    },
    SumAll {
        x: usize,
        scale: T,
    },
    Reshape {
        x: usize,
    },
    Gather {
        x: usize,
        map: Vec<usize>,
    },
    Slice {
        x: usize,
        outer: usize,
        dim: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Stack {
        xs: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Unfold {
        x: usize,
        batch: usize,
        len: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        out_len: usize,
    },
    Pick {
        x: usize,
        classes: usize,
        idx: Vec<usize>,
    },
    CosineRows {
        u: usize,
        v: usize,
        dim: usize,
        norms: Vec<(T, T)>,
    },
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn unary<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: usize,
    g: &[T],
    f: impl Fn(usize) -> T,
) {
    if let Some(dx) = slot(grads, nodes, x) {
        for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
            *d += gi * f(i);
        }
    }
}

impl<T: Scalar> Op<T> {
    pub(crate) fn backward(
        &self,
        out: &crate::tensor::Tensor<T>,
        g: &[T],
        nodes: &[Node<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let val = |id: usize| nodes[id].value.data();
        match self {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (val(a), val(b));
                if let Some(da) = slot(grads, nodes, a) {
                    if shared_b {
                        kernels::gemm_nt(g, bv, da, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    if shared_b {
                        kernels::gemm_tn(av, g, db, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(self, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(da) = slot(grads, nodes, a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    let nb = db.len();
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % nb] += sign * gi;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let nb = bv.len();
                if let Some(da) = slot(grads, nodes, a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i % nb];
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % nb] += gi * av[i];
                    }
                }
            }
            &Op::Affine { x, scale } => unary(grads, nodes, x, g, |_| scale),
            &Op::Relu { x } => {
                let xv = val(x);
                unary(grads, nodes, x, g, |i| {
                    if xv[i] > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                let (c, s) = (T::c(GELU_C), T::c(SQRT_2_OVER_PI));
                let half = T::c(0.5);
                unary(grads, nodes, x, g, |i| {
                    let v = xv[i];
                    let t = (s * (v + c * v * v * v)).tanh();
                    half * (T::one() + t)
                        + half * v * (T::one() - t * t) * s * (T::one() + T::c(3.0) * c * v * v)
                })
            }
            &Op::Tanh { x } => {
                let y = out.data();
                unary(grads, nodes, x, g, |i| T::one() - y[i] * y[i])
            }
            &Op::Sigmoid { x } => {
                let y = out.data();
                unary(grads, nodes, x, g, |i| y[i] * (T::one() - y[i]))
            }
            &Op::Abs { x } => {
                let xv = val(x);
                unary(grads, nodes, x, g, |i| {
                    if xv[i] > T::zero() {
                        T::one()
                    } else if xv[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            &Op::Square { x } => {
                let xv = val(x);
                unary(grads, nodes, x, g, |i| T::c(2.0) * xv[i])
            }
            &Op::Softmax { x, cols } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    let y = out.data();
                    for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, cols } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    let y = out.data();
                    for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let r = gv.len();
                if let Some(dx) = slot(grads, nodes, *x) {
                    let rf = T::c(r as f64);
                    for (row, (dr, (gr, hr))) in dx
                        .chunks_mut(r)
                        .zip(g.chunks(r).zip(xhat.chunks(r)))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..r {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / rf;
                        m2 = m2 / rf;
                        for j in 0..r {
                            dr[j] += rstd[row] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(dg) = slot(grads, nodes, *gain) {
                    for (gr, hr) in g.chunks(r).zip(xhat.chunks(r)) {
                        for j in 0..r {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, *bias) {
                    for gr in g.chunks(r) {
                        for j in 0..r {
                            db[j] += gr[j];
                        }
                    }
                }
            }
            &Op::SumAxis {
                x,
                outer,
                dim,
                inner,
                scale,
            } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..inner {
                                dx[base + i] += gr[i] * scale;
                            }
                        }
                    }
                }
            }
            &Op::SumAll { x, scale } => {
                let s = g[0] * scale;
                if let Some(dx) = slot(grads, nodes, x) {
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Gather { x, map } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (&src, &gi) in map.iter().zip(g) {
                        dx[src] += gi;
                    }
                }
            }
            &Op::Slice {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    for o in 0..outer {
                        let src = (o * dim + start) * inner;
                        let dst = o * len * inner;
                        for (d, &gi) in dx[src..src + len * inner]
                            .iter_mut()
                            .zip(&g[dst..dst + len * inner])
                        {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Stack { xs, outer, inner } => {
                let count = xs.len();
                for (s, &x) in xs.iter().enumerate() {
                    if let Some(dx) = slot(grads, nodes, x) {
                        for o in 0..*outer {
                            let src = (o * count + s) * inner;
                            for (d, &gi) in dx[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(&g[src..src + inner])
                            {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            &Op::Unfold {
                x,
                batch,
                len,
                channels,
                kernel,
                stride,
                out_len,
            } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    let w = kernel * channels;
                    for b in 0..batch {
                        for t in 0..out_len {
                            let src = (b * len + t * stride) * channels;
                            let row = &g[(b * out_len + t) * w..(b * out_len + t + 1) * w];
                            for (d, &gi) in dx[src..src + w].iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::Pick { x, classes, idx } => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        dx[r * classes + c] += g[r];
                    }
                }
            }
            Op::CosineRows { u, v, dim, norms } => {
                let (uv, vv) = (val(*u), val(*v));
                let d = *dim;
                let cos = out.data();
                for (target, other, first) in [(*u, vv, true), (*v, uv, false)] {
                    let own = if first { uv } else { vv };
                    if let Some(dt) = slot(grads, nodes, target) {
                        for (r, &(nu, nv)) in norms.iter().enumerate() {
                            if nu == T::zero() || nv == T::zero() {
                                continue;
                            }
                            let (n_own, prod) = if first { (nu, nu * nv) } else { (nv, nu * nv) };
                            for j in 0..d {
                                let o = other[r * d + j];
                                let s = own[r * d + j];
                                dt[r * d + j] += g[r] * (o / prod - cos[r] * s / (n_own * n_own));
                            }
                        }
                    }
                }
            }
        }
    }
}
