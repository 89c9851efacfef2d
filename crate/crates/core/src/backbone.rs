//! Teacher network: strided convolutional feature encoder, a stack of
//! transformer encoder layers, and a two-linear-layer classification head.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{mean_pool, sinusoidal_positions, Conv1d, LayerNorm, Linear, TransformerLayer};
use crate::nn::params::{Bound, Init, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub encoder_convs: Vec<ConvSpec>,
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// `[D1, D2]`; `D2` is the number of classes.
    pub head_dims: [usize; 2],
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let conv = ConvSpec {
            out_channels: 64,
            kernel: 5,
            stride: 2,
        };
        Self {
            encoder_convs: vec![conv, conv],
            num_layers: 6,
            hidden: 64,
            heads: 4,
            ff_dim: 128,
            head_dims: [32, 7],
            dropout: 0.0,
        }
    }
}

impl BackboneConfig {
    /// Encoder parameter count: each convolution plus its normalization.
    pub fn encoder_params(&self) -> u64 {
        let mut in_ch = 1;
        let mut n = 0;
        for c in &self.encoder_convs {
            n += Conv1d::num_params(in_ch, c.out_channels, c.kernel) + 2 * c.out_channels as u64;
            in_ch = c.out_channels;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers < 2 {
            return bad(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ff_dim == 0 || self.head_dims.contains(&0) {
            return bad("ff_dim and head_dims must be positive".into());
        }
        if self.head_dims[1] < 2 {
            return bad("at least two classes are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let Some(last) = self.encoder_convs.last() else {
            return bad("encoder needs at least one convolution".into());
        };
        if last.out_channels != self.hidden {
            return bad(format!(
                "last encoder conv has {} channels, hidden width is {}",
                last.out_channels, self.hidden
            ));
        }
        if self
            .encoder_convs
            .iter()
            .any(|c| c.kernel == 0 || c.stride == 0 || c.out_channels == 0)
        {
            return bad("encoder conv extents must be positive".into());
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.head_dims[1]
    }

    /// Frames produced by the encoder for `samples` input samples.
    pub fn frames(&self, samples: usize) -> Result<usize> {
        let mut len = samples;
        for c in &self.encoder_convs {
            if len < c.kernel {
                return Err(Error::InputTooShort {
                    got: samples,
                    min: self.min_samples(),
                });
            }
            len = (len - c.kernel) / c.stride + 1;
        }
        Ok(len)
    }

    /// Shortest input yielding at least one frame.
    pub fn min_samples(&self) -> usize {
        self.encoder_convs
            .iter()
            .rev()
            .fold(1, |len, c| c.kernel + (len - 1) * c.stride)
    }
}

/// Activations retained by [`Backbone::forward_to_layer`].
#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// Number of transformer layers actually executed.
    pub computed: usize,
    pub states: Vec<(usize, Var)>,
}

impl HiddenStates {
    pub fn get(&self, layer: usize) -> Option<Var> {
        self.states.iter().find(|(l, _)| *l == layer).map(|&(_, v)| v)
    }
}

/// Inverted dropout driven by a seeded generator; a no-op at inference.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a RefCell<ChaCha8Rng>>,
}

impl Dropout<'_> {
    pub const OFF: Dropout<'static> = Dropout { p: 0.0, rng: None };

    pub fn apply<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        match self.rng {
            Some(rng) if self.p > 0.0 => tape.dropout(x, self.p, &mut *rng.borrow_mut()),
            _ => Ok(x),
        }
    }
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub convs: Vec<(Conv1d, LayerNorm)>,
    pub layers: Vec<TransformerLayer>,
    executed: AtomicUsize,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self.convs.clone(),
            layers: self.layers.clone(),
            executed: AtomicUsize::new(0),
        }
    }
}

impl Backbone {
    pub fn new<T: Scalar>(
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        init: &mut Init,
    ) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (i, c) in config.encoder_convs.iter().enumerate() {
            let name = format!("encoder.conv{i}");
            let conv = Conv1d::new(store, init, &name, in_ch, c.out_channels, c.kernel, c.stride)?;
            let norm = LayerNorm::new(store, &format!("{name}.norm"), c.out_channels)?;
            convs.push((conv, norm));
            in_ch = c.out_channels;
        }
        let layers = (1..=config.num_layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    init,
                    &format!("layer.{l}"),
                    config.hidden,
                    config.heads,
                    config.ff_dim,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            convs,
            layers,
            executed: AtomicUsize::new(0),
        })
    }

    /// Waveform `[B, S]` to frame features `[B, F, R]` with positions added.
    /// Each convolution is followed by layer normalization and GELU.
    pub fn feature_encode<T: Scalar>(&self, p: &Bound<'_, T>, wave: Var) -> Result<Var> {
        let t = p.tape();
        let s = t.shape(wave);
        if s.len() != 2 {
            return Err(Error::shape("feature_encode", &s, &[2]));
        }
        let (b, samples) = (s[0], s[1]);
        let frames = self.config.frames(samples)?;
        let mut x = t.reshape(wave, &[b, samples, 1])?;
        for (conv, norm) in &self.convs {
            x = t.gelu(norm.forward(p, conv.forward(p, x)?)?);
        }
        let pos = t.constant(sinusoidal_positions(frames, self.config.hidden));
        t.add(x, pos)
    }

    /// Runs the encoder and transformer layers `1..=k` only, returning the
    /// activations of the layers listed in `retain`.
    pub fn forward_to_layer<T: Scalar>(
        &self,
        p: &Bound<'_, T>,
        wave: Var,
        k: usize,
        retain: &[usize],
        dropout: &Dropout<'_>,
    ) -> Result<HiddenStates> {
        let n = self.config.num_layers;
        if k == 0 || k > n {
            return Err(Error::IndexOutOfRange { index: k, max: n });
        }
        if let Some(&bad) = retain.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::IndexOutOfRange { index: bad, max: k });
        }
        let t = p.tape();
        let mut x = self.feature_encode(p, wave)?;
        let mut states = Vec::with_capacity(retain.len());
        for (i, layer) in self.layers[..k].iter().enumerate() {
            x = layer.forward(p, x, &mut |v| dropout.apply(t, v))?;
            self.executed.fetch_add(1, Ordering::Relaxed);
            if retain.contains(&(i + 1)) {
                states.push((i + 1, x));
            }
        }
        Ok(HiddenStates { computed: k, states })
    }

    /// Transformer layers executed since construction or the last reset.
    pub fn layers_executed(&self) -> usize {
        self.executed.load(Ordering::Relaxed)
    }

    pub fn reset_layer_counter(&self) {
        self.executed.store(0, Ordering::Relaxed);
    }
}

/// Outputs of a classification head: logits `O`, the pooled input `H`, and
/// the first linear layer's activation.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub pooled: Var,
    pub hidden: Var,
}

/// Mean pool, `L1`, ReLU, `L2`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        dims: [usize; 2],
    ) -> Result<Self> {
        let l1 = Linear::new(store, init, &format!("{name}.l1"), input, dims[0])?;
        let l2 = Linear::new(store, init, &format!("{name}.l2"), dims[0], dims[1])?;
        // Small output weights (std 0.02) so untrained logits start near uniform.
        store.get_mut(l2.weight).value = init.uniform(&[dims[0], dims[1]], 0.02 * 3f64.sqrt());
        Ok(Self { l1, l2 })
    }

    /// `seq: [B, F, W]` to head outputs.
    pub fn forward<T: Scalar>(&self, p: &Bound<'_, T>, seq: Var) -> Result<HeadOutputs> {
        let t = p.tape();
        let pooled = mean_pool(t, seq)?;
        let hidden = t.relu(self.l1.forward(p, pooled)?);
        let logits = self.l2.forward(p, hidden)?;
        Ok(HeadOutputs {
            logits,
            pooled,
            hidden,
        })
    }

    pub fn num_params(input: usize, dims: [usize; 2]) -> u64 {
        Linear::num_params(input, dims[0]) + Linear::num_params(dims[0], dims[1])
    }
}
