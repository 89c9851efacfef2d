use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, ClassifierHead, Dropout, HeadOutputs};
use crate::error::{Error, Result};
use crate::exits::{Exit, ExitSpec};
use crate::nn::params::{Bound, Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Identifies one classifier of a multi-exit model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExitId {
    Layer(usize),
    Teacher,
}

impl fmt::Display for ExitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitId::Layer(l) => write!(f, "layer{l}"),
            ExitId::Teacher => f.write_str("teacher"),
        }
    }
}

impl FromStr for ExitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "teacher" || s == "deepest" {
            return Ok(ExitId::Teacher);
        }
        s.strip_prefix("layer")
            .unwrap_or(&s)
            .parse()
            .map(ExitId::Layer)
            .map_err(|_| Error::UnknownExit(s.clone()))
    }
}

impl Serialize for ExitId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExitId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Full architecture: backbone, exit branches, and the depth of the teacher
/// head (equal to `N` except for truncated baselines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub exits: Vec<ExitSpec>,
    pub teacher_layer: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, exits: Vec<ExitSpec>) -> Result<Self> {
        let cfg = Self {
            teacher_layer: backbone.num_layers,
            backbone,
            exits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let n = self.backbone.num_layers;
        if self.teacher_layer == 0 || self.teacher_layer > n {
            return Err(Error::IndexOutOfRange {
                index: self.teacher_layer,
                max: n,
            });
        }
        let mut prev = 0;
        for spec in &self.exits {
            if spec.layer == 0 || spec.layer >= self.teacher_layer {
                return Err(Error::Contract(format!(
                    "exit layer {} must lie in 1..{}",
                    spec.layer, self.teacher_layer
                )));
            }
            if spec.layer == prev {
                return Err(Error::Config(format!("duplicate exit at layer {}", spec.layer)));
            }
            if spec.layer < prev {
                return Err(Error::Config("exit layers must be strictly increasing".into()));
            }
            prev = spec.layer;
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        let b = &self.backbone;
        let convs: Vec<String> = b
            .encoder_convs
            .iter()
            .map(|c| format!("{}x{}s{}", c.out_channels, c.kernel, c.stride))
            .collect();
        let exits: Vec<String> = self
            .exits
            .iter()
            .map(|e| format!("{}:{}", e.layer, e.block))
            .collect();
        format!(
            "enc[{}];N{};R{};H{};FF{};D{}x{};T{};exits[{}]",
            convs.join(","),
            b.num_layers,
            b.hidden,
            b.heads,
            b.ff_dim,
            b.head_dims[0],
            b.head_dims[1],
            self.teacher_layer,
            exits.join(",")
        )
    }

    /// FNV-1a over [`ModelConfig::canonical`].
    pub fn arch_hash(&self) -> u32 {
        self.canonical().bytes().fold(0x811c_9dc5u32, |h, b| {
            (h ^ b as u32).wrapping_mul(0x0100_0193)
        })
    }

    /// Exit ids in increasing depth; the teacher is last.
    pub fn exit_ids(&self) -> Vec<ExitId> {
        self.exits
            .iter()
            .map(|e| ExitId::Layer(e.layer))
            .chain(std::iter::once(ExitId::Teacher))
            .collect()
    }

    /// Transformer layer an exit reads from.
    pub fn depth_of(&self, id: ExitId) -> Result<usize> {
        match id {
            ExitId::Teacher => Ok(self.teacher_layer),
            ExitId::Layer(l) if self.exits.iter().any(|e| e.layer == l) => Ok(l),
            other => Err(Error::UnknownExit(other.to_string())),
        }
    }
}

/// Teacher and per-exit outputs of one shared forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub teacher: HeadOutputs,
    pub exits: Vec<(ExitSpec, HeadOutputs)>,
}

#[derive(Clone, Debug)]
pub struct MultiExitModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub exits: Vec<Exit>,
}

impl<T: Scalar> MultiExitModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let mut params = ParamStore::new();
        let b = &config.backbone;
        let backbone = Backbone::new(b, &mut params, &mut init)?;
        let head = ClassifierHead::new(&mut params, &mut init, "head", b.hidden, b.head_dims)?;
        let exits = config
            .exits
            .iter()
            .map(|spec| Exit::new(*spec, b.hidden, b.head_dims, &mut params, &mut init))
            .collect::<Result<_>>()?;
        let mut model = Self {
            config,
            params,
            backbone,
            head,
            exits,
        };
        model.freeze_beyond_teacher();
        Ok(model)
    }

    fn freeze_beyond_teacher(&mut self) {
        let k = self.config.teacher_layer;
        self.params.set_trainable(
            |name| {
                name.strip_prefix("layer.")
                    .and_then(|r| r.split('.').next())
                    .and_then(|l| l.parse::<usize>().ok())
                    .is_some_and(|l| l > k)
            },
            false,
        );
    }

    /// Adds freshly initialized exit branches, keeping all existing parameters.
    pub fn attach_exits(mut self, specs: &[ExitSpec], seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.exits.extend_from_slice(specs);
        config.exits.sort_by_key(|e| e.layer);
        if let Some(w) = config.exits.windows(2).find(|w| w[0].layer == w[1].layer) {
            return Err(Error::Config(format!("duplicate exit at layer {}", w[0].layer)));
        }
        config.validate()?;
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let b = &config.backbone;
        for spec in specs {
            let exit = Exit::new(*spec, b.hidden, b.head_dims, &mut self.params, &mut init)?;
            self.exits.push(exit);
        }
        self.exits.sort_by_key(|e| e.spec.layer);
        self.config = config;
        Ok(self)
    }

    pub fn exit_ids(&self) -> Vec<ExitId> {
        self.config.exit_ids()
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape<T>, grad: bool) -> Bound<'a, T> {
        self.params.bind(tape, grad)
    }

    /// One pass computing every exit and the teacher. Each transformer layer
    /// runs once regardless of the number of exits.
    pub fn forward(
        &self,
        p: &Bound<'_, T>,
        wave: Var,
        dropout: &Dropout<'_>,
    ) -> Result<ForwardOutputs> {
        let depth = self.config.teacher_layer;
        let mut retain: Vec<usize> = self.exits.iter().map(|e| e.spec.layer).collect();
        retain.push(depth);
        let hidden = self
            .backbone
            .forward_to_layer(p, wave, depth, &retain, dropout)?;
        let teacher = self.head.forward(p, hidden.get(depth).expect("retained"))?;
        let exits = self
            .exits
            .iter()
            .map(|e| {
                let h = hidden.get(e.spec.layer).expect("retained");
                Ok((e.spec, e.forward(p, h)?))
            })
            .collect::<Result<_>>()?;
        Ok(ForwardOutputs { teacher, exits })
    }

    /// Runs only as deep as `id` needs.
    pub fn forward_exit(&self, p: &Bound<'_, T>, wave: Var, id: ExitId) -> Result<HeadOutputs> {
        let depth = self.config.depth_of(id)?;
        let hidden = self
            .backbone
            .forward_to_layer(p, wave, depth, &[depth], &Dropout::OFF)?;
        let h = hidden.get(depth).expect("retained");
        match id {
            ExitId::Teacher => self.head.forward(p, h),
            ExitId::Layer(l) => self
                .exits
                .iter()
                .find(|e| e.spec.layer == l)
                .expect("validated by depth_of")
                .forward(p, h),
        }
    }

    /// Class probabilities `[B, D2]` at one exit, without gradients.
    pub fn predict_proba(&self, wave: &Tensor<T>, id: ExitId) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let x = tape.constant(wave.clone());
        let out = self.forward_exit(&p, x, id)?;
        let probs = tape.softmax(out.logits);
        let v = tape.value(probs).clone();
        Ok(v)
    }

    pub fn layers_executed(&self) -> usize {
        self.backbone.layers_executed()
    }

    pub fn reset_layer_counter(&self) {
        self.backbone.reset_layer_counter()
    }
}
