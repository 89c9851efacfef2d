use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledClip;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    /// Samples per clip.
    pub length: usize,
    pub sample_rate: u32,
    pub speakers: usize,
    /// Pitch jitter as a fraction of the spacing between class bands. At 1.0
    /// neighbouring bands overlap completely.
    pub overlap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_class: 140,
            classes: 7,
            length: 48,
            sample_rate: 8000,
            speakers: 14,
            overlap: 0.6,
        }
    }
}

/// Ratio between neighbouring class pitch bands.
const BAND_RATIO: f64 = 1.3;
const BASE_F0: f64 = 220.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.classes < 2 || self.length == 0 || self.speakers == 0 {
            return Err(Error::Config(
                "synthetic corpus needs n_per_class >= 1, classes >= 2, length >= 1, speakers >= 1".into(),
            ));
        }
        if self.sample_rate == 0 || !(0.0..=2.0).contains(&self.overlap) {
            return Err(Error::Config("sample_rate must be positive and overlap in [0, 2]".into()));
        }
        Ok(())
    }

    pub fn f0_center(&self, class: usize) -> f64 {
        BASE_F0 * BAND_RATIO.powi(class as i32)
    }

    /// Amplitude-modulation cycles per clip for `class`.
    pub fn am_cycles(&self, class: usize) -> f64 {
        0.5 + (class * 3 % self.classes.max(1)) as f64 * 0.5
    }

    pub fn noise_level(&self, class: usize) -> f64 {
        0.04 + 0.04 * (class % 3) as f64
    }
}

/// Deterministic corpus of `classes · n_per_class` clips. Each class has its
/// own pitch band, modulation rate, and noise level; speakers shift pitch.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<LabeledClip>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speaker_shift: Vec<f64> = (0..cfg.speakers).map(|_| rng.gen_range(-0.35..0.35)).collect();
    let sr = cfg.sample_rate as f64;
    let mut clips = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for i in 0..cfg.n_per_class {
        for class in 0..cfg.classes {
            let spk = (i + class) % cfg.speakers;
            let jitter = cfg.overlap * rng.gen_range(-1.0..1.0);
            let f0 = cfg.f0_center(class) * BAND_RATIO.powf(jitter + speaker_shift[spk]);
            let am = cfg.am_cycles(class) * sr / cfg.length as f64;
            let phase = rng.gen_range(0.0..TAU);
            let am_phase = rng.gen_range(0.0..TAU);
            let amp = rng.gen_range(0.4..0.8);
            let harmonic = rng.gen_range(0.1..0.4);
            let noise = Normal::new(0.0, cfg.noise_level(class)).expect("positive sigma");
            let samples = (0..cfg.length)
                .map(|n| {
                    let t = n as f64 / sr;
                    let carrier = (TAU * f0 * t + phase).sin()
                        + harmonic * (2.0 * (TAU * f0 * t + phase)).sin();
                    let env = 0.6 + 0.4 * (TAU * am * t + am_phase).sin();
                    let v = amp * env * carrier / (1.0 + harmonic) + noise.sample(&mut rng);
                    v.clamp(-1.0, 1.0) as f32
                })
                .collect();
            clips.push(LabeledClip {
                samples,
                sample_rate: cfg.sample_rate,
                label: class,
                speaker: format!("spk{spk:02}"),
            });
        }
    }
    Ok(clips)
}
