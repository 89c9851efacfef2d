use std::fs;
use std::path::{Path, PathBuf};

use exitwise::data::{fit_length, read_wav, split_speaker_disjoint, write_wav, Batch, LabeledClip};
use exitwise::exits::{BlockKind, ExitSpec};
use exitwise::losses::SimKind;
use exitwise::model::{ExitId, MultiExitModel};
use exitwise::runtime::{bench, predict_at_exit, select_exit, Budget, ExitCatalog};
use exitwise::trainer::{
    evaluate, fine_tune_truncated, fit_self_distill, layerwise_distill, LayerwiseConfig, Metrics,
    TrainData, TrainLog,
};
use exitwise::{Error, Result};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{ArchFile, RunConfig, SplitName};
use crate::report::{self, Format};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    #[default]
    #[value(name = "selfdistill")]
    SelfDistill,
    Truncated,
    Layerwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Exits,
    Blocks,
    Simloss,
}

/// A checkpoint together with its architecture file.
pub struct Loaded {
    pub model: MultiExitModel<f32>,
    pub arch: ArchFile,
}

/// Loads `checkpoint` against `arch`, defaulting to the `model.json` written
/// beside it by `train`.
pub fn load_checkpoint(checkpoint: &Path, arch: Option<&Path>) -> Result<Loaded> {
    let arch_path = arch.map_or_else(|| ArchFile::beside(checkpoint), Path::to_path_buf);
    let arch = ArchFile::load(&arch_path).map_err(at(&arch_path))?;
    let model = MultiExitModel::load(arch.model.clone(), checkpoint).map_err(at(checkpoint))?;
    Ok(Loaded { model, arch })
}

/// Adds the offending path to I/O and JSON errors.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    }
}

fn catalog_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("catalog.json")
}

pub struct TrainArgs<'a> {
    pub mode: Mode,
    pub depth: Option<usize>,
    pub init: Option<&'a Path>,
}

/// Trains one model and writes `model.ckpt`, `model.json`, `catalog.json`,
/// `train_log.jsonl` and the resolved `config.toml` into `output.dir`.
pub fn train(cfg: &RunConfig, args: TrainArgs<'_>, format: Format) -> Result<()> {
    let splits = cfg.splits()?;
    let data = TrainData {
        train: &splits.train,
        dev: Some(&splits.dev),
    };
    let init = args.init.map(|p| load_checkpoint(p, None)).transpose()?;
    let seed = cfg.train.seed;
    let (model, log) = match args.mode {
        Mode::SelfDistill => {
            if args.depth.is_some() {
                return Err(Error::Config("--depth applies to truncated and layerwise modes".into()));
            }
            let mut model = MultiExitModel::new(cfg.model_config()?, seed)?;
            if let Some(init) = &init {
                let n = model.copy_params_from(&init.model, |_| true);
                log::info!("initialized {n} tensors from checkpoint");
            }
            fit_self_distill(model, data, &cfg.train)?
        }
        Mode::Truncated => {
            let k = args
                .depth
                .ok_or_else(|| Error::Config("--mode truncated needs --depth".into()))?;
            let base = base_model(cfg, init)?;
            fine_tune_truncated(&base, k, data, &cfg.train)?
        }
        Mode::Layerwise => {
            let lw = LayerwiseConfig {
                student_depth: args.depth.unwrap_or(cfg.layerwise.student_depth),
                ..cfg.layerwise.clone()
            };
            if init.is_none() {
                log::warn!("layer-wise distillation from an untrained teacher; pass --init");
            }
            let teacher = base_model(cfg, init)?;
            layerwise_distill(&teacher, &lw, data, &cfg.train)?
        }
    };
    save_run(cfg, &model, &log, &splits.train)?;
    let rows: Vec<_> = log.epochs.iter().map(epoch_row).collect();
    report::print(format, &rows);
    Ok(())
}

/// Backbone without exits, taken from `init` when given.
fn base_model(cfg: &RunConfig, init: Option<Loaded>) -> Result<MultiExitModel<f32>> {
    let plain = exitwise::model::ModelConfig::new(cfg.model.clone(), Vec::new())?;
    let mut model = MultiExitModel::new(plain, cfg.train.seed)?;
    if let Some(init) = init {
        model.copy_params_from(&init.model, |n| !n.starts_with("exit."));
    }
    Ok(model)
}

fn epoch_row(e: &exitwise::trainer::EpochRecord) -> Map<String, Value> {
    let mut r = Map::new();
    r.insert("epoch".into(), json!(e.epoch));
    r.insert("phase".into(), json!(e.phase));
    r.insert("loss".into(), json!(e.loss.total));
    r.insert("ce_teacher".into(), json!(e.loss.ce_teacher));
    r.insert("ce_students".into(), json!(e.loss.ce_students));
    r.insert("kl".into(), json!(e.loss.kl));
    r.insert("sim".into(), json!(e.loss.sim));
    for (k, v) in &e.dev_uar {
        r.insert(format!("dev_{k}"), json!(v));
    }
    r
}

fn save_run(cfg: &RunConfig, model: &MultiExitModel<f32>, log: &TrainLog, train: &[LabeledClip]) -> Result<()> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt)?;
    ArchFile {
        model: model.config.clone(),
        sample_rate: cfg.sample_rate(train),
        clip_len: cfg.clip_len(),
        classes: cfg.class_names(),
    }
    .save(&ArchFile::beside(&ckpt))?;
    ExitCatalog::build(&model.config, cfg.clip_len())?.save(&catalog_path(&ckpt))?;
    let mut f = fs::File::create(dir.join("train_log.jsonl"))?;
    log.write_jsonl(&mut f)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    log::info!("wrote {}", ckpt.display());
    Ok(())
}

fn metric_row(m: &exitwise::trainer::ExitMetrics, with_confusion: bool) -> Map<String, Value> {
    let mut r = Map::new();
    r.insert("exit".into(), json!(m.exit));
    r.insert("uar".into(), json!(m.uar));
    r.insert("accuracy".into(), json!(m.confusion.accuracy().unwrap_or(0.0)));
    r.insert("n".into(), json!(m.confusion.total()));
    if with_confusion {
        r.insert("confusion".into(), json!(m.confusion.counts));
    }
    r
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub arch: Option<&'a Path>,
    pub split: SplitName,
    pub per_exit: bool,
    pub fusion: bool,
    pub batch_size: usize,
}

pub fn eval(cfg: &RunConfig, args: EvalArgs<'_>, format: Format) -> Result<()> {
    let loaded = load_checkpoint(args.checkpoint, args.arch)?;
    let splits = cfg.splits()?;
    let clips = splits.get(args.split);
    let metrics: Metrics = evaluate(&loaded.model, clips, args.batch_size)?;
    let confusion = format == Format::Jsonl;
    let mut rows: Vec<_> = metrics
        .exits
        .iter()
        .filter(|m| args.per_exit || m.exit == "teacher")
        .map(|m| metric_row(m, confusion))
        .collect();
    if args.fusion {
        match &metrics.fusion {
            Some(f) => rows.push(metric_row(f, confusion)),
            None => log::warn!("model has no student exits; no fusion row"),
        }
    }
    report::print(format, &rows);
    Ok(())
}

pub struct InferArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub arch: Option<&'a Path>,
    pub catalog: Option<&'a Path>,
    pub input: Option<&'a Path>,
    pub budget: Option<Budget>,
    pub exit: Option<ExitId>,
    pub dry_run: bool,
}

pub fn infer(args: InferArgs<'_>, format: Format) -> Result<()> {
    let catalog_file = match (args.catalog, args.checkpoint) {
        (Some(c), _) => Some(c.to_path_buf()),
        (None, Some(ckpt)) => Some(catalog_path(ckpt)),
        (None, None) => None,
    };
    let catalog = catalog_file
        .as_deref()
        .map(|p| ExitCatalog::load(p).map_err(at(p)))
        .transpose()?;
    let id = match (args.budget, args.exit) {
        (Some(b), _) => {
            let catalog = catalog
                .as_ref()
                .ok_or_else(|| Error::Config("--budget needs an exit catalog".into()))?;
            select_exit(catalog, b)?
        }
        (None, Some(id)) => id,
        (None, None) => ExitId::Teacher,
    };
    let mut r = Map::new();
    r.insert("exit".into(), json!(id));
    if let Some(e) = catalog.as_ref().and_then(|c| c.exits.get(&id)) {
        r.insert("layer".into(), json!(e.layer));
        r.insert("params".into(), json!(e.params));
        r.insert("flops".into(), json!(e.flops));
        if let Some(l) = e.latency_us {
            r.insert("latency_us".into(), json!(l));
        }
    }
    if !args.dry_run {
        let ckpt = args
            .checkpoint
            .ok_or_else(|| Error::Config("--checkpoint is required unless --dry-run".into()))?;
        let input = args
            .input
            .ok_or_else(|| Error::Config("--input is required unless --dry-run".into()))?;
        let loaded = load_checkpoint(ckpt, args.arch)?;
        let (samples, rate) = read_wav(input).map_err(at(input))?;
        if rate != loaded.arch.sample_rate {
            return Err(Error::Config(format!(
                "{} is sampled at {rate} Hz, the model expects {} Hz; resample it first",
                input.display(),
                loaded.arch.sample_rate
            )));
        }
        let clip = LabeledClip {
            samples: fit_length(&samples, loaded.arch.clip_len),
            sample_rate: rate,
            label: 0,
            speaker: String::new(),
        };
        let batch = Batch::<f32>::from_clips(&[&clip])?;
        let probs = predict_at_exit(&loaded.model, &batch.wave, id)?;
        let label = probs.argmax_rows()[0];
        r.insert("layer".into(), json!(loaded.model.config.depth_of(id)?));
        r.insert("label".into(), json!(label));
        if let Some(name) = loaded.arch.classes.get(label) {
            r.insert("class".into(), json!(name));
        }
        r.insert("probs".into(), json!(probs.data()));
    }
    report::print(format, &[r]);
    Ok(())
}

pub struct BenchArgs<'a> {
    pub checkpoint: &'a Path,
    pub arch: Option<&'a Path>,
    pub batch: usize,
    pub repeats: usize,
}

/// Measures per-exit latency and stores it in the catalog beside the
/// checkpoint.
pub fn bench_cmd(args: BenchArgs<'_>, format: Format) -> Result<()> {
    let loaded = load_checkpoint(args.checkpoint, args.arch)?;
    let path = catalog_path(args.checkpoint);
    let mut catalog = if path.exists() {
        ExitCatalog::load(&path)?
    } else {
        ExitCatalog::build(&loaded.model.config, loaded.arch.clip_len)?
    };
    let rows = bench(
        &loaded.model,
        [args.batch, catalog.reference_samples],
        args.repeats,
        &mut catalog,
    )?;
    catalog.save(&path)?;
    let rows: Vec<_> = rows.iter().map(report::row).collect();
    report::print(format, &rows);
    Ok(())
}

fn grid(cfg: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let block = cfg.exits.first().map_or(BlockKind::Conv, |e| e.block);
    match axis {
        Axis::Exits => (1..cfg.model.num_layers)
            .map(|l| {
                let mut c = cfg.clone();
                c.exits = vec![ExitSpec { layer: l, block }];
                (format!("layer{l}"), c)
            })
            .collect(),
        Axis::Blocks => BlockKind::ALL
            .iter()
            .map(|&b| {
                let mut c = cfg.clone();
                for e in &mut c.exits {
                    e.block = b;
                }
                (b.to_string(), c)
            })
            .collect(),
        Axis::Simloss => SimKind::ALL
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.loss.sim_kind = k;
                c.train.weights.sim_kind = k;
                (k.to_string(), c)
            })
            .collect(),
    }
}

/// Trains one self-distillation run per grid point and reports dev and
/// test UAR for every exit.
pub fn sweep(cfg: &RunConfig, axis: Axis, init: Option<&Path>, format: Format) -> Result<()> {
    let corpus = cfg.corpus()?;
    let (train, dev, test) = split_speaker_disjoint(&corpus, cfg.data.split, cfg.data.split_seed)?;
    let init = init.map(|p| load_checkpoint(p, None)).transpose()?;
    let points = grid(cfg, axis);
    log::info!("sweep over {} points on {} threads", points.len(), rayon::current_num_threads());
    let results: Vec<Result<Map<String, Value>>> = points
        .par_iter()
        .map(|(value, c)| {
            let mut model = MultiExitModel::new(c.model_config()?, c.train.seed)?;
            if let Some(init) = &init {
                model.copy_params_from(&init.model, |n| !n.starts_with("exit."));
            }
            let data = TrainData {
                train: &train,
                dev: Some(&dev),
            };
            let (model, _) = fit_self_distill(model, data, &c.train)?;
            let d = evaluate(&model, &dev, 64)?;
            let t = evaluate(&model, &test, 64)?;
            let mut r = Map::new();
            r.insert("axis".into(), json!(format!("{axis:?}").to_lowercase()));
            r.insert("value".into(), json!(value));
            for (name, m) in [("dev", &d), ("test", &t)] {
                for e in m.exits.iter().chain(&m.fusion) {
                    r.insert(format!("{name}_{}", e.exit), json!(e.uar));
                }
            }
            Ok(r)
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.output.dir)?;
    let name = format!("sweep_{}.jsonl", format!("{axis:?}").to_lowercase());
    fs::write(cfg.output.dir.join(name), report::render(Format::Jsonl, &rows))?;
    report::print(format, &rows);
    Ok(())
}

/// Writes the configured corpus as a binary cache and optionally as WAV
/// files with a manifest.
pub fn synth_data(cfg: &RunConfig, out: &Path, wav_dir: Option<&Path>, format: Format) -> Result<()> {
    let clips = exitwise::data::synth_corpus(&cfg.data.synth)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    exitwise::data::save_corpus(out, &clips)?;
    let mut r = Map::new();
    r.insert("corpus".into(), json!(out.display().to_string()));
    r.insert("clips".into(), json!(clips.len()));
    r.insert("classes".into(), json!(cfg.data.synth.classes));
    let speakers: std::collections::BTreeSet<&str> = clips.iter().map(|c| c.speaker.as_str()).collect();
    r.insert("speakers".into(), json!(speakers.len()));
    if let Some(dir) = wav_dir {
        fs::create_dir_all(dir)?;
        let names = cfg.class_names();
        let mut manifest = String::from("# path\tlabel\tspeaker\n");
        for (i, c) in clips.iter().enumerate() {
            let file = format!("clip{i:05}.wav");
            write_wav(&dir.join(&file), &c.samples, c.sample_rate)?;
            manifest += &format!("{file}\t{}\t{}\n", names[c.label], c.speaker);
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, manifest)?;
        r.insert("manifest".into(), json!(path.display().to_string()));
    }
    report::print(format, &[r]);
    Ok(())
}
