//! Joint self-distillation training, the truncated and layer-wise baselines,
//! and evaluation.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::Dropout;
use crate::data::{Batch, Batcher, LabeledClip};
use crate::error::{Error, Result};
use crate::exits::{Block, BlockKind, Exit, ExitSpec};
use crate::losses::{cross_entropy, sim_pair, total_loss, ExitLoss, LossReport, LossWeights, SimKind};
use crate::metrics::ConfusionMatrix;
use crate::model::{ExitId, ModelConfig, MultiExitModel};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::runtime::fuse_mean;
use crate::tensor::Tensor;

/// Decomposition tolerance checked on every step.
pub const DECOMPOSITION_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub freeze_encoder: bool,
    #[serde(skip)]
    pub weights: LossWeights,
    pub grad_clip: Option<f64>,
    /// Keep the parameters of the epoch with the best teacher dev UAR.
    pub dev_best: bool,
    /// Train on train and dev combined.
    pub refit_on_train_plus_dev: bool,
    /// Evaluate every exit on the training set after each epoch.
    pub log_train_uar: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            freeze_encoder: false,
            weights: LossWeights::default(),
            grad_clip: None,
            dev_best: false,
            refit_on_train_plus_dev: false,
            log_train_uar: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("train.grad_clip must be > 0, got {c}")));
            }
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SelfDistill,
    FineTune,
    Predict,
    Classify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossReport,
    pub train_uar: BTreeMap<String, f64>,
    pub dev_uar: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Largest relative decomposition error seen on any step.
    pub max_decomposition_error: f64,
    pub steps: usize,
}

impl TrainLog {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn phase_epochs(&self, phase: Phase) -> usize {
        self.epochs.iter().filter(|e| e.phase == phase).count()
    }

    fn next_epoch(&self) -> usize {
        self.epochs.last().map_or(1, |e| e.epoch + 1)
    }
}

/// Training and optional development partitions.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [LabeledClip],
    pub dev: Option<&'a [LabeledClip]>,
}

/// Per-exit evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitMetrics {
    pub exit: String,
    pub uar: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Exits in increasing depth, teacher last.
    pub exits: Vec<ExitMetrics>,
    /// Mean of the student exits' probabilities; absent without students.
    pub fusion: Option<ExitMetrics>,
}

impl Metrics {
    pub fn uar(&self, id: ExitId) -> Option<f64> {
        let name = id.to_string();
        self.exits.iter().find(|e| e.exit == name).map(|e| e.uar)
    }

    fn uar_map(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self.exits.iter().map(|e| (e.exit.clone(), e.uar)).collect();
        if let Some(f) = &self.fusion {
            m.insert(f.exit.clone(), f.uar);
        }
        m
    }
}

/// Evaluates every exit in one shared forward pass per batch. Parameters
/// are not modified.
pub fn evaluate(model: &MultiExitModel<f32>, clips: &[LabeledClip], batch_size: usize) -> Result<Metrics> {
    let batcher = Batcher::new(clips, batch_size)?;
    let classes = model.config.backbone.num_classes();
    let ids = model.exit_ids();
    let mut preds: Vec<Vec<usize>> = vec![Vec::with_capacity(clips.len()); ids.len()];
    let mut fused: Vec<usize> = Vec::with_capacity(clips.len());
    let mut truth = Vec::with_capacity(clips.len());
    for batch in batcher.sequential::<f32>()? {
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let x = tape.constant(batch.wave);
        let out = model.forward(&p, x, &Dropout::OFF)?;
        let mut student_probs = Vec::new();
        for (i, (_, h)) in out.exits.iter().enumerate() {
            let probs = tape.value(tape.softmax(h.logits)).clone();
            preds[i].extend(probs.argmax_rows());
            student_probs.push(probs);
        }
        let teacher = tape.value(tape.softmax(out.teacher.logits)).clone();
        preds[ids.len() - 1].extend(teacher.argmax_rows());
        if !student_probs.is_empty() {
            fused.extend(fuse_mean(&student_probs)?.argmax_rows());
        }
        truth.extend(batch.labels);
    }
    let metric = |name: String, pred: &[usize]| -> Result<ExitMetrics> {
        let confusion = ConfusionMatrix::from_predictions(classes, &truth, pred)?;
        Ok(ExitMetrics {
            exit: name,
            uar: confusion.uar()?,
            confusion,
        })
    };
    let exits = ids
        .iter()
        .zip(&preds)
        .map(|(id, p)| metric(id.to_string(), p))
        .collect::<Result<_>>()?;
    let fusion = if fused.is_empty() {
        None
    } else {
        Some(metric("fusion".into(), &fused)?)
    };
    Ok(Metrics { exits, fusion })
}

fn check_report(report: &LossReport, weights: &LossWeights, log: &mut TrainLog) -> Result<()> {
    if let Some(term) = report.first_non_finite() {
        return Err(Error::NonFinite { term: term.into() });
    }
    let err = report.decomposition_error(weights);
    log.max_decomposition_error = log.max_decomposition_error.max(err);
    if err > DECOMPOSITION_TOL {
        return Err(Error::Contract(format!(
            "loss decomposition off by {err:e} (total {}, parts {})",
            report.total,
            report.reconstruct(weights)
        )));
    }
    Ok(())
}

#[derive(Default)]
struct ReportMean {
    sum: LossReport,
    n: usize,
}

impl ReportMean {
    fn add(&mut self, r: &LossReport) {
        let s = &mut self.sum;
        s.total += r.total;
        s.ce_teacher += r.ce_teacher;
        s.ce_students += r.ce_students;
        s.kl += r.kl;
        s.sim += r.sim;
        if s.per_exit.is_empty() {
            s.per_exit = r.per_exit.iter().map(|e| ExitLoss { layer: e.layer, ..Default::default() }).collect();
        }
        for (a, b) in s.per_exit.iter_mut().zip(&r.per_exit) {
            a.ce += b.ce;
            a.kl += b.kl;
            a.sim += b.sim;
        }
        self.n += 1;
    }

    fn mean(mut self) -> LossReport {
        let k = 1.0 / self.n.max(1) as f64;
        let s = &mut self.sum;
        for v in [&mut s.total, &mut s.ce_teacher, &mut s.ce_students, &mut s.kl, &mut s.sim] {
            *v *= k;
        }
        for e in &mut s.per_exit {
            e.ce *= k;
            e.kl *= k;
            e.sim *= k;
        }
        self.sum
    }
}

/// Optional extra parameter set trained alongside a model.
struct Aux<'a> {
    store: &'a mut ParamStore<f32>,
    state: AdamState,
}

type Grads = Vec<(ParamId, Vec<f32>)>;

/// Result of one forward/backward pass.
struct Step {
    report: LossReport,
    /// Whether the report carries the full composite decomposition.
    composite: bool,
    main: Grads,
    aux: Grads,
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    phase: Phase,
}

impl Loop<'_> {
    /// Runs `cfg.epochs` epochs of `step`, appending to `log`.
    fn run<F>(
        &self,
        model: &mut MultiExitModel<f32>,
        mut aux: Option<Aux<'_>>,
        log: &mut TrainLog,
        mut step: F,
    ) -> Result<()>
    where
        F: FnMut(&MultiExitModel<f32>, Option<&ParamStore<f32>>, &Batch<f32>, &Dropout<'_>) -> Result<Step>,
    {
        let cfg = self.cfg;
        let combined: Vec<LabeledClip>;
        let train: &[LabeledClip] = match (cfg.refit_on_train_plus_dev, self.data.dev) {
            (true, Some(dev)) => {
                combined = self.data.train.iter().chain(dev).cloned().collect();
                &combined
            }
            _ => self.data.train,
        };
        let batcher = Batcher::new(train, cfg.batch_size)?;
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)));
        let dropout = Dropout {
            p: model.config.backbone.dropout,
            rng: Some(&dropout_rng),
        };
        let mut state = AdamState::new();
        let mut best: Option<(f64, ParamStore<f32>)> = None;
        let first = log.next_epoch();
        for epoch in first..first + cfg.epochs {
            let start = Instant::now();
            let mut mean = ReportMean::default();
            for batch in batcher.epoch::<f32>(cfg.seed, epoch)? {
                let mut s = step(model, aux.as_ref().map(|a| &*a.store), &batch, &dropout)?;
                if s.composite {
                    check_report(&s.report, &cfg.weights, log)?;
                } else if let Some(term) = s.report.first_non_finite() {
                    return Err(Error::NonFinite { term: term.into() });
                }
                mean.add(&s.report);
                if let Some(max) = cfg.grad_clip {
                    clip_grad_norm(&mut [&mut s.main, &mut s.aux], max);
                }
                adam_step(&mut model.params, &s.main, &mut state, cfg.lr, &cfg.adam)?;
                if let Some(a) = aux.as_mut() {
                    adam_step(a.store, &s.aux, &mut a.state, cfg.lr, &cfg.adam)?;
                }
                log.steps += 1;
            }
            let train_uar = if cfg.log_train_uar {
                evaluate(model, self.data.train, cfg.batch_size)?.uar_map()
            } else {
                BTreeMap::new()
            };
            let dev_uar = match self.data.dev {
                Some(dev) if !dev.is_empty() => evaluate(model, dev, cfg.batch_size)?.uar_map(),
                _ => BTreeMap::new(),
            };
            if cfg.dev_best {
                if let Some(&u) = dev_uar.get("teacher") {
                    if best.as_ref().is_none_or(|(b, _)| u > *b) {
                        best = Some((u, model.params.clone()));
                    }
                }
            }
            let loss = mean.mean();
            log::info!("epoch {epoch} {:?}: loss {:.4} dev {:?}", self.phase, loss.total, dev_uar);
            log.epochs.push(EpochRecord {
                epoch,
                phase: self.phase,
                loss,
                train_uar,
                dev_uar,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        if let Some((_, params)) = best {
            model.params = params;
        }
        Ok(())
    }
}

fn freeze_encoder(model: &mut MultiExitModel<f32>, cfg: &TrainConfig) {
    if cfg.freeze_encoder {
        model.params.set_trainable(|n| n.starts_with("encoder."), false);
    }
}

/// Trains teacher and exits jointly under the composite loss. With no
/// exits this is plain fine-tuning of the teacher.
pub fn fit_self_distill(
    mut model: MultiExitModel<f32>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(MultiExitModel<f32>, TrainLog)> {
    cfg.validate()?;
    freeze_encoder(&mut model, cfg);
    let phase = if model.exits.is_empty() { Phase::FineTune } else { Phase::SelfDistill };
    let mut log = TrainLog::default();
    Loop { cfg, data, phase }.run(&mut model, None, &mut log, |m, _, batch, dropout| {
        step_self_distill(m, batch, dropout, &cfg.weights)
    })?;
    Ok((model, log))
}

fn step_self_distill(
    model: &MultiExitModel<f32>,
    batch: &Batch<f32>,
    dropout: &Dropout<'_>,
    w: &LossWeights,
) -> Result<Step> {
    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let x = tape.constant(batch.wave.clone());
    let out = model.forward(&p, x, dropout)?;
    let (loss, report) = total_loss(&tape, &out, &batch.labels, w)?;
    let mut grads = tape.backward(loss)?;
    Ok(Step {
        report,
        composite: true,
        main: p.collect(&mut grads),
        aux: Vec::new(),
    })
}

/// Fresh teacher-style head on layers `1..=k` of `backbone`. Layers above
/// `k` are frozen and never run.
pub fn fine_tune_truncated(
    backbone: &MultiExitModel<f32>,
    k: usize,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(MultiExitModel<f32>, TrainLog)> {
    let n = backbone.config.backbone.num_layers;
    if k == 0 || k > n {
        return Err(Error::IndexOutOfRange { index: k, max: n });
    }
    let config = ModelConfig {
        backbone: backbone.config.backbone.clone(),
        exits: Vec::new(),
        teacher_layer: k,
    };
    let mut model = MultiExitModel::new(config, cfg.seed)?;
    model.copy_params_from(backbone, |name| !name.starts_with("head."));
    fit_self_distill(model, data, cfg)
}

/// Regression heads used in the first layer-wise distillation stage, one
/// per predicted teacher layer.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub params: ParamStore<f32>,
    pub heads: Vec<(usize, Block)>,
}

impl PredictionHeads {
    pub fn new(layers: &[usize], kind: BlockKind, hidden: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let head_dims = [1, 2];
        let heads = layers
            .iter()
            .map(|&l| {
                let kind = if kind == BlockKind::Conv1ch { BlockKind::Conv } else { kind };
                let spec = ExitSpec { layer: l, block: kind };
                let exit = Exit::new(spec, hidden, head_dims, &mut params, &mut init)?;
                Ok((l, exit.block))
            })
            .collect::<Result<_>>()?;
        Ok(Self { params, heads })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerwiseConfig {
    pub student_depth: usize,
    /// Teacher layers to regress; empty means `{N/3, 2N/3, N}`.
    pub predict_layers: Vec<usize>,
    pub block: BlockKind,
    pub sim_kind: SimKind,
}

impl Default for LayerwiseConfig {
    fn default() -> Self {
        Self {
            student_depth: 2,
            predict_layers: Vec::new(),
            block: BlockKind::Conv,
            sim_kind: SimKind::L1Cosine,
        }
    }
}

impl LayerwiseConfig {
    pub fn resolved_layers(&self, n: usize) -> Vec<usize> {
        if self.predict_layers.is_empty() {
            let mut v = vec![(n / 3).max(1), (2 * n / 3).max(1), n];
            v.dedup();
            v
        } else {
            self.predict_layers.clone()
        }
    }
}

/// Two-stage baseline: a shallow copy of the teacher first regresses the
/// frozen teacher's hidden states, then is fine-tuned with cross-entropy.
pub fn layerwise_distill(
    teacher: &MultiExitModel<f32>,
    lw: &LayerwiseConfig,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(MultiExitModel<f32>, TrainLog)> {
    cfg.validate()?;
    let n = teacher.config.backbone.num_layers;
    let targets = lw.resolved_layers(n);
    if targets.is_empty() {
        return Err(Error::Config("layerwise.predict_layers must not be empty".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::IndexOutOfRange { index: bad, max: n });
    }
    if lw.student_depth == 0 || lw.student_depth > n {
        return Err(Error::IndexOutOfRange {
            index: lw.student_depth,
            max: n,
        });
    }
    let config = ModelConfig {
        backbone: teacher.config.backbone.clone(),
        exits: Vec::new(),
        teacher_layer: lw.student_depth,
    };
    let mut student = MultiExitModel::new(config, cfg.seed)?;
    student.copy_params_from(teacher, |name| !name.starts_with("head."));
    freeze_encoder(&mut student, cfg);
    let mut heads = PredictionHeads::new(&targets, lw.block, teacher.config.backbone.hidden, cfg.seed ^ 0x1a7e)?;
    let mut log = TrainLog::default();

    let stage1 = Loop { cfg, data, phase: Phase::Predict };
    let head_blocks = heads.heads.clone();
    let aux = Aux {
        store: &mut heads.params,
        state: AdamState::new(),
    };
    let deepest = *targets.iter().max().expect("nonempty");
    stage1.run(&mut student, Some(aux), &mut log, |m, aux_store, batch, dropout| {
        let aux_store = aux_store.expect("stage one has prediction heads");
        let tape = Tape::new();
        let tp = teacher.bind(&tape, false);
        let x = tape.constant(batch.wave.clone());
        let hidden = teacher.backbone.forward_to_layer(&tp, x, deepest, &targets, &Dropout::OFF)?;
        let sp = m.bind(&tape, true);
        let hs = m.backbone.forward_to_layer(&sp, x, lw.student_depth, &[lw.student_depth], dropout)?;
        let h = hs.get(lw.student_depth).expect("retained");
        let ap = aux_store.bind(&tape, true);
        let mut loss = None;
        for (layer, block) in &head_blocks {
            let target = tape.detach(hidden.get(*layer).expect("retained"));
            let pred = block.forward(&ap, h)?;
            let term = sim_pair(&tape, lw.sim_kind, target, pred)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let loss = tape.scale(loss.expect("nonempty targets"), 1.0 / head_blocks.len() as f64);
        let v = tape.item(loss) as f64;
        let mut grads = tape.backward(loss)?;
        Ok(Step {
            report: LossReport {
                total: v,
                sim: v,
                ..Default::default()
            },
            composite: false,
            main: sp.collect(&mut grads),
            aux: ap.collect(&mut grads),
        })
    })?;

    let stage2 = Loop { cfg, data, phase: Phase::Classify };
    stage2.run(&mut student, None, &mut log, |m, _, batch, dropout| {
        let tape = Tape::new();
        let p = m.bind(&tape, true);
        let x = tape.constant(batch.wave.clone());
        let depth = m.config.teacher_layer;
        let hs = m.backbone.forward_to_layer(&p, x, depth, &[depth], dropout)?;
        let out = m.head.forward(&p, hs.get(depth).expect("retained"))?;
        let loss = cross_entropy(&tape, out.logits, &batch.labels)?;
        let v = tape.item(loss) as f64;
        let mut grads = tape.backward(loss)?;
        Ok(Step {
            report: LossReport {
                total: v,
                ce_teacher: v,
                ..Default::default()
            },
            composite: false,
            main: p.collect(&mut grads),
            aux: Vec::new(),
        })
    })?;
    Ok((student, log))
}

/// Class probabilities of one exit for a batch of clips.
pub fn predict_clips(model: &MultiExitModel<f32>, clips: &[&LabeledClip], id: ExitId) -> Result<Tensor<f32>> {
    let batch = Batch::<f32>::from_clips(clips)?;
    model.predict_proba(&batch.wave, id)
}
