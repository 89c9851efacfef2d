use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledClip;
use crate::error::{Error, Result};

/// Partitions clips into train/dev/test so that no speaker appears in two
/// partitions. Speakers are shuffled by `seed` and allotted by `ratios`,
/// each partition receiving at least one speaker.
pub fn split_speaker_disjoint(
    corpus: &[LabeledClip],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<LabeledClip>, Vec<LabeledClip>, Vec<LabeledClip>)> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let speakers: BTreeSet<&str> = corpus.iter().map(|c| c.speaker.as_str()).collect();
    let n = speakers.len();
    if n < 3 {
        return Err(Error::Config(format!("speaker-disjoint split needs >= 3 speakers, found {n}")));
    }
    let mut order: Vec<&str> = speakers.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((ratios[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_dev = ((ratios[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let part = |spk: &str| {
        let pos = order.iter().position(|s| *s == spk).expect("known speaker");
        if pos < n_train {
            0
        } else if pos < n_train + n_dev {
            1
        } else {
            2
        }
    };
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for clip in corpus {
        match part(&clip.speaker) {
            0 => out.0.push(clip.clone()),
            1 => out.1.push(clip.clone()),
            _ => out.2.push(clip.clone()),
        }
    }
    Ok(out)
}
