//! Single-layer unidirectional LSTM and GRU over the time axis of `[B, F, In]`.
//! Both start from a zero state and emit every step's hidden state.

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

fn zero_state<T: Scalar>(tape: &Tape<T>, batch: usize, hidden: usize) -> Var {
    tape.constant(Tensor::zeros(&[batch, hidden]))
}

fn gate<T: Scalar>(tape: &Tape<T>, x: Var, i: usize, hidden: usize) -> Result<Var> {
    tape.slice(x, 1, i * hidden, hidden)
}

/// Gates `i, f, g, o`; `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let k = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), init.uniform(&[input, 4 * hidden], k))?,
            w_hh: store.add(format!("{name}.w_hh"), init.uniform(&[hidden, 4 * hidden], k))?,
            bias: store.add(format!("{name}.bias"), init.uniform(&[4 * hidden], k))?,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let t = p.tape();
        let s = t.shape(x);
        let (b, f, hsz) = (s[0], s[1], self.hidden);
        let xw = t.matmul(x, p.var(self.w_ih))?;
        let xw = t.add(xw, p.var(self.bias))?;
        let w_hh = p.var(self.w_hh);
        let mut h = zero_state(t, b, hsz);
        let mut c = zero_state(t, b, hsz);
        let mut outputs = Vec::with_capacity(f);
        for step in 0..f {
            let xt = t.select(xw, 1, step)?;
            let gates = t.add(xt, t.matmul(h, w_hh)?)?;
            let i = t.sigmoid(gate(t, gates, 0, hsz)?);
            let fg = t.sigmoid(gate(t, gates, 1, hsz)?);
            let g = t.tanh(gate(t, gates, 2, hsz)?);
            let o = t.sigmoid(gate(t, gates, 3, hsz)?);
            c = t.add(t.mul(fg, c)?, t.mul(i, g)?)?;
            h = t.mul(o, t.tanh(c))?;
            outputs.push(h);
        }
        t.stack(&outputs, 1)
    }

    pub fn num_params(input: usize, hidden: usize) -> u64 {
        (4 * hidden * (input + hidden) + 4 * hidden) as u64
    }

    pub fn macs_per_step(input: usize, hidden: usize) -> u64 {
        (4 * hidden * (input + hidden)) as u64
    }
}

/// Reset/update/candidate gates with the reset applied to the recurrent
/// candidate term: `n = tanh(x_n + r⊙(h·W_n + b_hn))`, `h' = (1-z)⊙n + z⊙h`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let k = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), init.uniform(&[input, 3 * hidden], k))?,
            w_hh: store.add(format!("{name}.w_hh"), init.uniform(&[hidden, 3 * hidden], k))?,
            b_ih: store.add(format!("{name}.b_ih"), init.uniform(&[3 * hidden], k))?,
            b_hh: store.add(format!("{name}.b_hh"), init.uniform(&[3 * hidden], k))?,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        let t = p.tape();
        let s = t.shape(x);
        let (b, f, hsz) = (s[0], s[1], self.hidden);
        let xw = t.matmul(x, p.var(self.w_ih))?;
        let xw = t.add(xw, p.var(self.b_ih))?;
        let (w_hh, b_hh) = (p.var(self.w_hh), p.var(self.b_hh));
        let mut h = zero_state(t, b, hsz);
        let mut outputs = Vec::with_capacity(f);
        for step in 0..f {
            let xt = t.select(xw, 1, step)?;
            let hw = t.add(t.matmul(h, w_hh)?, b_hh)?;
            let r = t.sigmoid(t.add(gate(t, xt, 0, hsz)?, gate(t, hw, 0, hsz)?)?);
            let z = t.sigmoid(t.add(gate(t, xt, 1, hsz)?, gate(t, hw, 1, hsz)?)?);
            let n = t.tanh(t.add(gate(t, xt, 2, hsz)?, t.mul(r, gate(t, hw, 2, hsz)?)?)?);
            h = t.add(n, t.mul(z, t.sub(h, n)?)?)?;
            outputs.push(h);
        }
        t.stack(&outputs, 1)
    }

    pub fn num_params(input: usize, hidden: usize) -> u64 {
        (3 * hidden * (input + hidden) + 6 * hidden) as u64
    }

    pub fn macs_per_step(input: usize, hidden: usize) -> u64 {
        (3 * hidden * (input + hidden)) as u64
    }
}
