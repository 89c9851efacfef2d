//! Student exit branches attached after intermediate transformer layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{ClassifierHead, HeadOutputs};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::params::{Bound, Init, ParamStore};
use crate::nn::recurrent::{Gru, Lstm};
use crate::tensor::Scalar;

/// Block applied to an intermediate layer's unpooled activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Pointwise channel map preserving the width `R`.
    Conv,
    /// Pointwise map collapsing to a single channel. Its pooled output has
    /// width 1, so it cannot be used with embedding-level similarity.
    Conv1ch,
    Lstm,
    Gru,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Conv, BlockKind::Lstm, BlockKind::Gru];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Conv => "conv",
            BlockKind::Conv1ch => "conv1ch",
            BlockKind::Lstm => "lstm",
            BlockKind::Gru => "gru",
        }
    }

    /// Width of the block output for backbone width `hidden`.
    pub fn out_width(self, hidden: usize) -> usize {
        match self {
            BlockKind::Conv1ch => 1,
            _ => hidden,
        }
    }

    pub fn num_params(self, hidden: usize) -> u64 {
        match self {
            BlockKind::Conv => Linear::num_params(hidden, hidden),
            BlockKind::Conv1ch => Linear::num_params(hidden, 1),
            BlockKind::Lstm => Lstm::num_params(hidden, hidden),
            BlockKind::Gru => Gru::num_params(hidden, hidden),
        }
    }

    pub fn macs(self, hidden: usize, frames: usize) -> u64 {
        let f = frames as u64;
        match self {
            BlockKind::Conv => f * (hidden * hidden) as u64,
            BlockKind::Conv1ch => f * hidden as u64,
            BlockKind::Lstm => f * Lstm::macs_per_step(hidden, hidden),
            BlockKind::Gru => f * Gru::macs_per_step(hidden, hidden),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv" | "cnn" | "conv1x1" => Ok(BlockKind::Conv),
            "conv1ch" => Ok(BlockKind::Conv1ch),
            "lstm" => Ok(BlockKind::Lstm),
            "gru" => Ok(BlockKind::Gru),
            other => Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSpec {
    /// Transformer layer the branch reads from, `1 <= layer < N`.
    pub layer: usize,
    pub block: BlockKind,
}

#[derive(Clone, Debug)]
pub enum Block {
    Pointwise(Linear),
    Lstm(Lstm),
    Gru(Gru),
}

impl Block {
    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Pointwise(l) => l.forward(p, x),
            Block::Lstm(l) => l.forward(p, x),
            Block::Gru(g) => g.forward(p, x),
        }
    }
}

/// Block `M`, mean pooling, and two linear layers.
#[derive(Clone, Debug)]
pub struct Exit {
    pub spec: ExitSpec,
    pub block: Block,
    pub head: ClassifierHead,
}

impl Exit {
    /// Parameters are namespaced `exit.<layer>.<kind>.*`.
    pub fn new<T: Scalar>(
        spec: ExitSpec,
        hidden: usize,
        head_dims: [usize; 2],
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Result<Self> {
        let prefix = Self::prefix(&spec);
        let name = format!("{prefix}.block");
        let block = match spec.block {
            BlockKind::Conv => Block::Pointwise(Linear::new(store, init, &name, hidden, hidden)?),
            BlockKind::Conv1ch => Block::Pointwise(Linear::new(store, init, &name, hidden, 1)?),
            BlockKind::Lstm => Block::Lstm(Lstm::new(store, init, &name, hidden, hidden)?),
            BlockKind::Gru => Block::Gru(Gru::new(store, init, &name, hidden, hidden)?),
        };
        let head = ClassifierHead::new(
            store,
            init,
            &prefix,
            spec.block.out_width(hidden),
            head_dims,
        )?;
        Ok(Self { spec, block, head })
    }

    pub fn prefix(spec: &ExitSpec) -> String {
        format!("exit.{}.{}", spec.layer, spec.block)
    }

    /// Block output before pooling, `[B, F, W]`.
    pub fn block_forward<T: Scalar>(&self, p: &Bound<'_, T>, t_ai: Var) -> Result<Var> {
        let s = p.tape().shape(t_ai);
        if s.len() != 3 {
            return Err(Error::shape("exit", &s, &[3]));
        }
        self.block.forward(p, t_ai)
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, t_ai: Var) -> Result<HeadOutputs> {
        let m = self.block_forward(p, t_ai)?;
        self.head.forward(p, m)
    }

    pub fn num_params(spec: &ExitSpec, hidden: usize, head_dims: [usize; 2]) -> u64 {
        spec.block.num_params(hidden) + ClassifierHead::num_params(spec.block.out_width(hidden), head_dims)
    }
}
