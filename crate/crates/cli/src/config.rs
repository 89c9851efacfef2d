//! Run configuration: a TOML document with `model`, `exits`, `loss`,
//! `train`, `layerwise`, `data` and `output` sections.

use std::fs;
use std::path::{Path, PathBuf};

use exitwise::backbone::BackboneConfig;
use exitwise::data::{
    fit_length, ingest_manifest, load_corpus, save_corpus, split_speaker_disjoint, synth_corpus,
    LabeledClip, SynthConfig,
};
use exitwise::exits::{BlockKind, ExitSpec};
use exitwise::losses::LossWeights;
use exitwise::model::ModelConfig;
use exitwise::trainer::{LayerwiseConfig, TrainConfig};
use exitwise::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub exits: Vec<ExitSpec>,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub layerwise: LayerwiseConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: BackboneConfig::default(),
            exits: vec![
                ExitSpec {
                    layer: 2,
                    block: BlockKind::Conv,
                },
                ExitSpec {
                    layer: 4,
                    block: BlockKind::Conv,
                },
            ],
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            layerwise: LayerwiseConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Synth,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub synth: SynthConfig,
    pub manifest: Option<PathBuf>,
    /// Ordered class names for manifest labels.
    pub classes: Vec<String>,
    /// Manifest clips are cropped or zero-padded to this many samples.
    pub clip_len: usize,
    /// Train/dev/test fractions of speakers.
    pub split: [f64; 3],
    pub split_seed: u64,
    /// Binary corpus cache; written on first use, read afterwards.
    pub cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Synth,
            synth: SynthConfig::default(),
            manifest: None,
            classes: Vec::new(),
            clip_len: 48,
            split: [10.0 / 14.0, 2.0 / 14.0, 2.0 / 14.0],
            split_seed: 0,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets `section.key=value` inside a parsed document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path `{path}` needs a section and a key")));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}`: `{k}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), literal(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or defaults), applies overrides in order, validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.weights = cfg.loss.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.data.source == Source::Manifest {
            if self.data.manifest.is_none() {
                return Err(Error::Config("data.manifest is required when data.source = \"manifest\"".into()));
            }
            if self.data.classes.len() != self.model.num_classes() {
                return Err(Error::Config(format!(
                    "data.classes lists {} names, model.head_dims has {} classes",
                    self.data.classes.len(),
                    self.model.num_classes()
                )));
            }
        } else if self.data.synth.classes != self.model.num_classes() {
            return Err(Error::Config(format!(
                "data.synth.classes = {} but model.head_dims has {} classes",
                self.data.synth.classes,
                self.model.num_classes()
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.model.clone(), self.exits.clone())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn clip_len(&self) -> usize {
        match self.data.source {
            Source::Synth => self.data.synth.length,
            Source::Manifest => self.data.clip_len,
        }
    }

    pub fn sample_rate(&self, clips: &[LabeledClip]) -> u32 {
        clips.first().map_or(self.data.synth.sample_rate, |c| c.sample_rate)
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.data.source == Source::Manifest {
            self.data.classes.clone()
        } else {
            (0..self.model.num_classes()).map(|c| format!("class{c}")).collect()
        }
    }

    /// Every clip of the configured corpus, cached when `data.cache` is set.
    pub fn corpus(&self) -> Result<Vec<LabeledClip>> {
        if let Some(cache) = &self.data.cache {
            if cache.exists() {
                log::info!("reading corpus cache {}", cache.display());
                return load_corpus(cache);
            }
        }
        let clips = match self.data.source {
            Source::Synth => synth_corpus(&self.data.synth)?,
            Source::Manifest => {
                let manifest = self.data.manifest.as_ref().expect("validated");
                let mut clips = ingest_manifest(manifest, &self.data.classes)?;
                if let Some(bad) = clips.windows(2).find(|w| w[0].sample_rate != w[1].sample_rate) {
                    return Err(Error::Config(format!(
                        "manifest mixes sample rates {} and {}; resample the corpus first",
                        bad[0].sample_rate, bad[1].sample_rate
                    )));
                }
                for c in &mut clips {
                    c.samples = fit_length(&c.samples, self.data.clip_len);
                }
                clips
            }
        };
        if let Some(cache) = &self.data.cache {
            save_corpus(cache, &clips)?;
        }
        Ok(clips)
    }

    pub fn splits(&self) -> Result<Splits> {
        let corpus = self.corpus()?;
        let (train, dev, test) = split_speaker_disjoint(&corpus, self.data.split, self.data.split_seed)?;
        Ok(Splits { train, dev, test })
    }
}

pub struct Splits {
    pub train: Vec<LabeledClip>,
    pub dev: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[LabeledClip] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

/// Architecture and input contract stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchFile {
    pub model: ModelConfig,
    pub sample_rate: u32,
    pub clip_len: usize,
    pub classes: Vec<String>,
}

impl ArchFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let arch: ArchFile = serde_json::from_str(&text)?;
        arch.model.validate()?;
        Ok(arch)
    }

    /// `model.json` beside `checkpoint`.
    pub fn beside(checkpoint: &Path) -> PathBuf {
        checkpoint.with_file_name("model.json")
    }
}
