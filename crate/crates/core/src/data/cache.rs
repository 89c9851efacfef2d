use std::path::Path;

use super::LabeledClip;
use crate::checkpoint::{Container, TensorRecord};
use crate::error::{Error, Result};

/// Architecture-hash slot value marking a corpus cache.
pub const CORPUS_TAG: u32 = 0x434f_5250;

/// Stores one tensor per clip, named `clip/<label>/<rate>/<speaker>`.
pub fn save_corpus(path: &Path, clips: &[LabeledClip]) -> Result<()> {
    let tensors = clips
        .iter()
        .map(|c| TensorRecord {
            name: format!("clip/{}/{}/{}", c.label, c.sample_rate, c.speaker),
            shape: vec![c.samples.len()],
            data: c.samples.clone(),
        })
        .collect();
    Container {
        arch_hash: CORPUS_TAG,
        tensors,
    }
    .write(path)
}

pub fn load_corpus(path: &Path) -> Result<Vec<LabeledClip>> {
    let c = Container::read(path)?;
    if c.arch_hash != CORPUS_TAG {
        return Err(Error::ArchitectureMismatch {
            expected: CORPUS_TAG,
            found: c.arch_hash,
        });
    }
    c.tensors
        .into_iter()
        .map(|t| {
            let bad = |detail: &str| Error::TensorTable {
                name: t.name.clone(),
                detail: detail.into(),
            };
            let mut parts = t.name.splitn(4, '/');
            if parts.next() != Some("clip") {
                return Err(bad("not a clip record"));
            }
            let label = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad label"))?;
            let rate = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad rate"))?;
            let speaker = parts.next().ok_or_else(|| bad("missing speaker"))?.to_string();
            Ok(LabeledClip {
                samples: t.data,
                sample_rate: rate,
                label,
                speaker,
            })
        })
        .collect()
}
