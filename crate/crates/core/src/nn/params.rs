use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in insertion order. The order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    /// Marks every parameter whose name satisfies `pred` as (non-)trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.trainable = trainable;
        }
    }

    /// Lazily binds parameters onto `tape`. With `grad` false every
    /// parameter becomes a constant.
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>, grad: bool) -> Bound<'a, T> {
        Bound {
            store: self,
            tape,
            grad,
            vars: RefCell::new(vec![None; self.params.len()]),
        }
    }
}

pub struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    tape: &'a Tape<T>,
    grad: bool,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.grad && p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter that was used and is trainable.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::c(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` matrix.
    pub fn xavier<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn gen_f64(&mut self) -> f64 {
        self.rng.gen()
    }
}
