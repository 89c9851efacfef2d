//! Anytime inference: per-exit cost accounting, budgeted exit selection,
//! fusion, and latency measurement.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::ClassifierHead;
use crate::error::{Error, Result};
use crate::exits::Exit;
use crate::model::{ExitId, ModelConfig, MultiExitModel};
use crate::nn::layers::TransformerLayer;
use crate::tensor::{Scalar, Tensor};

/// Scalars needed to evaluate `id`: encoder, transformer layers up to the
/// exit, and the exit's own branch (or the teacher head).
pub fn count_params(config: &ModelConfig, id: ExitId) -> Result<u64> {
    let b = &config.backbone;
    let depth = config.depth_of(id)? as u64;
    let trunk = b.encoder_params() + depth * TransformerLayer::num_params(b.hidden, b.ff_dim);
    let branch = match id {
        ExitId::Teacher => ClassifierHead::num_params(b.hidden, b.head_dims),
        ExitId::Layer(l) => {
            let spec = config.exits.iter().find(|e| e.layer == l).expect("checked by depth_of");
            Exit::num_params(spec, b.hidden, b.head_dims)
        }
    };
    Ok(trunk + branch)
}

/// Multiply-accumulates of matmuls, convolutions, and recurrent cells for
/// one clip of `samples` samples.
pub fn count_macs(config: &ModelConfig, id: ExitId, samples: usize) -> Result<u64> {
    let b = &config.backbone;
    let depth = config.depth_of(id)? as u64;
    let mut len = samples;
    let mut in_ch = 1;
    let mut macs = 0u64;
    for c in &b.encoder_convs {
        if len < c.kernel {
            return Err(Error::InputTooShort {
                got: samples,
                min: b.min_samples(),
            });
        }
        len = (len - c.kernel) / c.stride + 1;
        macs += (len * c.kernel * in_ch * c.out_channels) as u64;
        in_ch = c.out_channels;
    }
    let frames = len;
    macs += depth * TransformerLayer::macs(b.hidden, b.ff_dim, frames);
    let head = |input: usize| (input * b.head_dims[0] + b.head_dims[0] * b.head_dims[1]) as u64;
    macs += match id {
        ExitId::Teacher => head(b.hidden),
        ExitId::Layer(l) => {
            let spec = config.exits.iter().find(|e| e.layer == l).expect("checked by depth_of");
            spec.block.macs(b.hidden, frames) + head(spec.block.out_width(b.hidden))
        }
    };
    Ok(macs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub layer: usize,
    pub params: u64,
    /// Multiply-accumulates per clip of the catalog's reference length.
    pub flops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_p95_us: Option<f64>,
}

/// Per-exit cost table, ordered by depth with the teacher last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitCatalog {
    pub reference_samples: usize,
    pub exits: BTreeMap<ExitId, CatalogEntry>,
}

impl ExitCatalog {
    pub fn build(config: &ModelConfig, reference_samples: usize) -> Result<Self> {
        let exits = config
            .exit_ids()
            .into_iter()
            .map(|id| {
                Ok((
                    id,
                    CatalogEntry {
                        layer: config.depth_of(id)?,
                        params: count_params(config, id)?,
                        flops: count_macs(config, id, reference_samples)?,
                        latency_us: None,
                        latency_p95_us: None,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            reference_samples,
            exits,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetKind {
    Params,
    Flops,
    #[serde(rename = "latency")]
    LatencyMicros,
    Depth,
}

impl BudgetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BudgetKind::Params => "params",
            BudgetKind::Flops => "flops",
            BudgetKind::LatencyMicros => "latency",
            BudgetKind::Depth => "depth",
        }
    }

    fn cost(self, e: &CatalogEntry) -> Result<u64> {
        Ok(match self {
            BudgetKind::Params => e.params,
            BudgetKind::Flops => e.flops,
            BudgetKind::Depth => e.layer as u64,
            BudgetKind::LatencyMicros => e
                .latency_us
                .ok_or_else(|| Error::Config("catalog has no latency measurements; run bench first".into()))?
                .ceil() as u64,
        })
    }
}

impl fmt::Display for BudgetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub kind: BudgetKind,
    pub limit: u64,
}

impl Budget {
    pub fn new(kind: BudgetKind, limit: u64) -> Result<Self> {
        if limit == 0 {
            return Err(Error::Config("budget limit must be > 0".into()));
        }
        Ok(Self { kind, limit })
    }
}

fn parse_limit(s: &str) -> Option<u64> {
    let s = s.trim().replace('_', "");
    if let Some((base, exp)) = s.split_once('^') {
        return base.parse::<u64>().ok()?.checked_pow(exp.parse().ok()?);
    }
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v >= 0.0 && v <= u64::MAX as f64).then_some(v as u64)
}

impl FromStr for Budget {
    type Err = Error;

    /// `kind=limit`, e.g. `params=80000000`, `params=10^12`, `latency=500`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, limit) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("budget `{s}` is not of the form kind=limit")))?;
        let kind = match kind.trim().to_ascii_lowercase().as_str() {
            "params" => BudgetKind::Params,
            "flops" | "macs" => BudgetKind::Flops,
            "latency" | "latency_us" => BudgetKind::LatencyMicros,
            "depth" | "layers" => BudgetKind::Depth,
            other => return Err(Error::Config(format!("unknown budget kind `{other}`"))),
        };
        let limit = parse_limit(limit).ok_or_else(|| Error::Config(format!("bad budget limit `{limit}`")))?;
        Budget::new(kind, limit)
    }
}

/// Deepest exit whose cost is at most the limit.
pub fn select_exit(catalog: &ExitCatalog, budget: Budget) -> Result<ExitId> {
    if catalog.exits.is_empty() {
        return Err(Error::Config("empty exit catalog".into()));
    }
    let mut best: Option<(usize, ExitId)> = None;
    let mut cheapest: Option<(u64, ExitId)> = None;
    for (&id, e) in &catalog.exits {
        let cost = budget.kind.cost(e)?;
        if cheapest.is_none_or(|(c, _)| cost < c) {
            cheapest = Some((cost, id));
        }
        if cost <= budget.limit && best.is_none_or(|(l, _)| e.layer >= l) {
            best = Some((e.layer, id));
        }
    }
    best.map(|(_, id)| id).ok_or_else(|| {
        let (cost, id) = cheapest.expect("nonempty");
        Error::BudgetInfeasible {
            kind: budget.kind.to_string(),
            limit: budget.limit,
            cheapest: id.to_string(),
            cost,
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    #[default]
    Mean,
    MajorityVote,
}

fn check_probs<T: Scalar>(probs: &[Tensor<T>]) -> Result<(usize, usize)> {
    let Some(first) = probs.first() else {
        return Err(Error::Contract("fusion needs at least one distribution".into()));
    };
    let shape = first.shape();
    if shape.len() != 2 {
        return Err(Error::shape("fuse", shape, &[2]));
    }
    if let Some(bad) = probs.iter().find(|p| p.shape() != shape) {
        return Err(Error::shape("fuse", shape, bad.shape()));
    }
    Ok((shape[0], shape[1]))
}

/// Arithmetic mean of probability tensors `[B, C]`.
pub fn fuse_mean<T: Scalar>(probs: &[Tensor<T>]) -> Result<Tensor<T>> {
    check_probs(probs)?;
    let mut out = probs[0].clone();
    for p in &probs[1..] {
        for (o, &v) in out.data_mut().iter_mut().zip(p.data()) {
            *o += v;
        }
    }
    let k = T::c(1.0 / probs.len() as f64);
    for o in out.data_mut() {
        *o *= k;
    }
    Ok(out)
}

/// Fraction of votes per class, each input voting for its argmax.
pub fn fuse_vote<T: Scalar>(probs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (rows, cols) = check_probs(probs)?;
    let mut out = Tensor::zeros(&[rows, cols]);
    let k = T::c(1.0 / probs.len() as f64);
    for p in probs {
        for (r, c) in p.argmax_rows().into_iter().enumerate() {
            out.data_mut()[r * cols + c] += k;
        }
    }
    Ok(out)
}

pub fn fuse<T: Scalar>(probs: &[Tensor<T>], rule: FusionRule) -> Result<Tensor<T>> {
    match rule {
        FusionRule::Mean => fuse_mean(probs),
        FusionRule::MajorityVote => fuse_vote(probs),
    }
}

/// Class probabilities at `id`, running only the layers it needs.
pub fn predict_at_exit<T: Scalar>(model: &MultiExitModel<T>, wave: &Tensor<T>, id: ExitId) -> Result<Tensor<T>> {
    model.predict_proba(wave, id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub exit: ExitId,
    pub layer: usize,
    pub median_us: f64,
    pub p95_us: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `predict_at_exit` on a zero input of `shape` (`[B, S]`) for every
/// exit and records the median and p95 into `catalog`. Repetitions cycle
/// through the exits so background load spreads over all of them.
pub fn bench<T: Scalar>(
    model: &MultiExitModel<T>,
    shape: [usize; 2],
    repeats: usize,
    catalog: &mut ExitCatalog,
) -> Result<Vec<LatencyRow>> {
    if repeats < 3 {
        return Err(Error::Config(format!("bench needs repeats >= 3, got {repeats}")));
    }
    let wave = Tensor::zeros(&shape);
    let ids = model.exit_ids();
    for &id in &ids {
        model.predict_proba(&wave, id)?;
    }
    let mut times = vec![Vec::with_capacity(repeats); ids.len()];
    for _ in 0..repeats {
        for (i, &id) in ids.iter().enumerate() {
            let t = Instant::now();
            model.predict_proba(&wave, id)?;
            times[i].push(t.elapsed().as_secs_f64() * 1e6);
        }
    }
    let mut rows = Vec::new();
    for (id, mut times) in ids.into_iter().zip(times) {
        times.sort_by(f64::total_cmp);
        let row = LatencyRow {
            exit: id,
            layer: model.config.depth_of(id)?,
            median_us: percentile(&times, 0.5),
            p95_us: percentile(&times, 0.95),
        };
        if let Some(e) = catalog.exits.get_mut(&id) {
            e.latency_us = Some(row.median_us);
            e.latency_p95_us = Some(row.p95_us);
        }
        rows.push(row);
    }
    Ok(rows)
}
