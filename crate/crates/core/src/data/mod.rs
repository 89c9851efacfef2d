//! Labeled waveform clips: a synthetic corpus, WAV ingestion, speaker-disjoint
//! splits, batching, and a binary corpus cache.

mod batch;
mod cache;
mod manifest;
mod split;
mod synth;
mod wav;

pub use batch::{fit_length, stack_clips, Batch, Batcher};
pub use cache::{load_corpus, save_corpus, CORPUS_TAG};
pub use manifest::{ingest_manifest, ingest_wav, read_manifest, ManifestRow};
pub use split::split_speaker_disjoint;
pub use synth::{synth_corpus, SynthConfig};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledClip {
    /// Samples in `[-1, 1]`.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: usize,
    pub speaker: String,
}

/// Per-class clip counts.
pub fn class_counts(clips: &[LabeledClip], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for c in clips {
        if c.label < classes {
            counts[c.label] += 1;
        }
    }
    counts
}
