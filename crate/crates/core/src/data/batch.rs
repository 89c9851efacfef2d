use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledClip;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Crops or zero-pads `samples` to exactly `len`.
pub fn fit_length(samples: &[f32], len: usize) -> Vec<f32> {
    let mut out: Vec<f32> = samples.iter().take(len).copied().collect();
    out.resize(len, 0.0);
    out
}

/// Stacks equal-length clips into `[B, S]`.
pub fn stack_clips<T: Scalar>(clips: &[&LabeledClip]) -> Result<Tensor<T>> {
    let Some(first) = clips.first() else {
        return Err(Error::EmptyDataset);
    };
    let s = first.samples.len();
    let mut data = Vec::with_capacity(clips.len() * s);
    for c in clips {
        if c.samples.len() != s {
            return Err(Error::shape("batch", &[s], &[c.samples.len()]));
        }
        data.extend(c.samples.iter().map(|&v| T::c(v as f64)));
    }
    Tensor::new(vec![clips.len(), s], data)
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub wave: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_clips(clips: &[&LabeledClip]) -> Result<Self> {
        Ok(Self {
            wave: stack_clips(clips)?,
            labels: clips.iter().map(|c| c.label).collect(),
        })
    }
}

/// Epoch-wise batching with a seeded shuffle.
pub struct Batcher<'a> {
    clips: &'a [LabeledClip],
    batch_size: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(clips: &'a [LabeledClip], batch_size: usize) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self { clips, batch_size })
    }

    pub fn num_batches(&self) -> usize {
        self.clips.len().div_ceil(self.batch_size)
    }

    /// Clip order for `epoch`, a pure function of `(seed, epoch)`.
    pub fn order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.clips.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch<T: Scalar>(&self, seed: u64, epoch: usize) -> Result<Vec<Batch<T>>> {
        self.order(seed, epoch)
            .chunks(self.batch_size)
            .map(|chunk| {
                let refs: Vec<&LabeledClip> = chunk.iter().map(|&i| &self.clips[i]).collect();
                Batch::from_clips(&refs)
            })
            .collect()
    }

    /// Batches in dataset order.
    pub fn sequential<T: Scalar>(&self) -> Result<Vec<Batch<T>>> {
        self.clips
            .chunks(self.batch_size)
            .map(|chunk| Batch::from_clips(&chunk.iter().collect::<Vec<_>>()))
            .collect()
    }
}
