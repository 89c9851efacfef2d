use super::params::{Bound, Init, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x · W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let t = p.tape();
        let y = t.matmul(x, p.var(self.weight))?;
        t.add(y, p.var(self.bias))
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> u64 {
        (in_dim * out_dim + out_dim) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        p.tape()
            .layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

/// Mean over the time axis of `[B, F, R]`.
pub fn mean_pool<T: Scalar>(tape: &crate::autodiff::Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(Error::shape("mean_pool", &s, &[3]));
    }
    if s[1] == 0 {
        return Err(Error::EmptySequence);
    }
    tape.mean_axis(x, 1)
}

/// 1-D convolution over the time axis of channel-last `[B, L, C_in]` input.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = kernel * in_channels;
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.xavier(fan_in, out_channels))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let t = p.tape();
        let cols = t.unfold(x, self.kernel, self.stride)?;
        let y = t.matmul(cols, p.var(self.weight))?;
        t.add(y, p.var(self.bias))
    }

    pub fn num_params(in_channels: usize, out_channels: usize, kernel: usize) -> u64 {
        Linear::num_params(kernel * in_channels, out_channels)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(store, init, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(store, init, &format!("{name}.value"), dim, dim)?,
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let t = p.tape();
        let s = t.shape(x);
        let (b, f, r) = (s[0], s[1], s[2]);
        let h = self.heads;
        let d = r / h;
        let split = |v: Var, perm: &[usize]| -> Result<Var> {
            let v = t.reshape(v, &[b, f, h, d])?;
            t.permute(v, perm)
        };
        let q = split(self.query.forward(p, x)?, &[0, 2, 1, 3])?;
        let k = split(self.key.forward(p, x)?, &[0, 2, 3, 1])?;
        let v = split(self.value.forward(p, x)?, &[0, 2, 1, 3])?;
        let scores = t.matmul(q, k)?;
        let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = t.softmax(scores);
        let ctx = t.matmul(attn, v)?;
        let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, &[b, f, r])?;
        self.out.forward(p, ctx)
    }
}

/// Post-norm encoder layer: attention, add, norm, GELU feed-forward, add, norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ff_in: Linear::new(store, init, &format!("{name}.ff_in"), dim, ff_dim)?,
            ff_out: Linear::new(store, init, &format!("{name}.ff_out"), ff_dim, dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<'_, T>,
        x: Var,
        dropout: &mut dyn FnMut(Var) -> Result<Var>,
    ) -> Result<Var> {
        let t = p.tape();
        let a = dropout(self.attn.forward(p, x)?)?;
        let x = self.norm1.forward(p, t.add(x, a)?)?;
        let hidden = t.gelu(self.ff_in.forward(p, x)?);
        let ff = dropout(self.ff_out.forward(p, hidden)?)?;
        self.norm2.forward(p, t.add(x, ff)?)
    }

    pub fn num_params(dim: usize, ff_dim: usize) -> u64 {
        4 * Linear::num_params(dim, dim)
            + Linear::num_params(dim, ff_dim)
            + Linear::num_params(ff_dim, dim)
            + 4 * dim as u64
    }

    /// Multiply-accumulates for `frames` frames.
    pub fn macs(dim: usize, ff_dim: usize, frames: usize) -> u64 {
        let (r, f, ff) = (dim as u64, frames as u64, ff_dim as u64);
        f * (4 * r * r + 2 * r * ff) + 2 * f * f * r
    }
}

/// Sinusoidal position table `[F, R]`.
pub fn sinusoidal_positions<T: Scalar>(frames: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(frames * dim);
    for pos in 0..frames {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data.push(T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![frames, dim], data).expect("positive extents")
}
