//! Composite self-distillation objective `L = L_c + α·L_k + β·L_s`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::HeadOutputs;
use crate::error::{Error, Result};
use crate::model::ForwardOutputs;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimKind {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "l1+cosine")]
    L1Cosine,
    #[serde(rename = "l2+cosine")]
    L2Cosine,
}

impl SimKind {
    pub const ALL: [SimKind; 5] = [
        SimKind::L1,
        SimKind::L2,
        SimKind::Cosine,
        SimKind::L1Cosine,
        SimKind::L2Cosine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::L1 => "l1",
            SimKind::L2 => "l2",
            SimKind::Cosine => "cosine",
            SimKind::L1Cosine => "l1+cosine",
            SimKind::L2Cosine => "l2+cosine",
        }
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase();
        SimKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown similarity loss `{s}`")))
    }
}

/// Which pair of embeddings the similarity term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimLevel {
    /// Pooled final transformer output vs pooled block output.
    #[default]
    Embedding,
    /// First linear layer activations of the teacher and student heads.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sim_kind: SimKind,
    pub sim_level: SimLevel,
    /// Softmax temperature inside the KL term.
    pub temperature: f64,
    /// Stop gradients through the teacher side of the KL and similarity terms.
    pub detach_teacher: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            sim_kind: SimKind::L2,
            sim_level: SimLevel::Embedding,
            temperature: 1.0,
            detach_teacher: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitLoss {
    pub layer: usize,
    pub ce: f64,
    pub kl: f64,
    pub sim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_teacher: f64,
    /// Mean student cross-entropy, before `γ`.
    pub ce_students: f64,
    pub kl: f64,
    pub sim: f64,
    pub per_exit: Vec<ExitLoss>,
}

impl LossReport {
    pub fn reconstruct(&self, w: &LossWeights) -> f64 {
        self.ce_teacher + w.gamma * self.ce_students + w.alpha * self.kl + w.beta * self.sim
    }

    /// Relative gap between `total` and the weighted sum of its parts.
    pub fn decomposition_error(&self, w: &LossWeights) -> f64 {
        (self.total - self.reconstruct(w)).abs() / self.total.abs().max(1e-12)
    }

    /// Name of the first term that is not finite, in evaluation order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("ce_teacher", self.ce_teacher),
            ("ce_students", self.ce_students),
            ("kl", self.kl),
            ("sim", self.sim),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn zero<T: Scalar>(tape: &Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn mean_of<T: Scalar>(tape: &Tape<T>, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(zero(tape));
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, y: &[usize]) -> Result<Var> {
    let picked = tape.pick(tape.log_softmax(logits), y)?;
    Ok(tape.scale(tape.mean(picked), -1.0))
}

/// Teacher CE plus `gamma` times the mean student CE. Returns the total and
/// the individual CE nodes (teacher first).
pub fn composite_ce<T: Scalar>(
    tape: &Tape<T>,
    teacher: Var,
    students: &[Var],
    y: &[usize],
    gamma: f64,
) -> Result<(Var, Var, Vec<Var>)> {
    let st = tape.shape(teacher);
    let ce_t = cross_entropy(tape, teacher, y)?;
    let ce_s = students
        .iter()
        .map(|&s| {
            let ss = tape.shape(s);
            if ss != st {
                return Err(Error::shape("composite_ce", &st, &ss));
            }
            cross_entropy(tape, s, y)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_s = mean_of(tape, &ce_s)?;
    let total = tape.add(ce_t, tape.scale(mean_s, gamma))?;
    Ok((total, ce_t, ce_s))
}

/// Per-exit `KL(P_teacher ‖ P_student)` averaged over the batch.
pub fn kl_terms<T: Scalar>(
    tape: &Tape<T>,
    teacher: Var,
    students: &[Var],
    temperature: f64,
    detach_teacher: bool,
) -> Result<Vec<Var>> {
    let inv_t = 1.0 / temperature;
    let o = if detach_teacher { tape.detach(teacher) } else { teacher };
    let o = tape.scale(o, inv_t);
    let log_p = tape.log_softmax(o);
    let p = tape.softmax(o);
    let st = tape.shape(teacher);
    students
        .iter()
        .map(|&s| {
            let ss = tape.shape(s);
            if ss != st {
                return Err(Error::shape("kl_loss", &st, &ss));
            }
            let log_q = tape.log_softmax(tape.scale(s, inv_t));
            let diff = tape.sub(log_p, log_q)?;
            let rows = tape.sum_axis(tape.mul(p, diff)?, 1)?;
            Ok(tape.mean(rows))
        })
        .collect()
}

/// Mean over exits of the per-exit KL; zero without students.
pub fn kl_loss<T: Scalar>(
    tape: &Tape<T>,
    teacher: Var,
    students: &[Var],
    temperature: f64,
    detach_teacher: bool,
) -> Result<Var> {
    mean_of(tape, &kl_terms(tape, teacher, students, temperature, detach_teacher)?)
}

/// Similarity term for one `(teacher, student)` pair of `[B, D]` tensors.
pub fn sim_pair<T: Scalar>(tape: &Tape<T>, kind: SimKind, u: Var, v: Var) -> Result<Var> {
    let (su, sv) = (tape.shape(u), tape.shape(v));
    if su != sv {
        return Err(Error::shape("sim_loss", &su, &sv));
    }
    let l1 = |tape: &Tape<T>| -> Result<Var> { Ok(tape.mean(tape.abs(tape.sub(u, v)?))) };
    let l2 = |tape: &Tape<T>| -> Result<Var> { Ok(tape.mean(tape.square(tape.sub(u, v)?))) };
    let cos = |tape: &Tape<T>| -> Result<Var> {
        let c = if su.len() == 2 {
            tape.cosine_rows(u, v)?
        } else {
            let rows = su[..su.len() - 1].iter().product();
            let d = su[su.len() - 1];
            tape.cosine_rows(tape.reshape(u, &[rows, d])?, tape.reshape(v, &[rows, d])?)?
        };
        Ok(tape.scale(tape.mean(c), -1.0))
    };
    match kind {
        SimKind::L1 => l1(tape),
        SimKind::L2 => l2(tape),
        SimKind::Cosine => cos(tape),
        SimKind::L1Cosine => tape.add(l1(tape)?, cos(tape)?),
        SimKind::L2Cosine => tape.add(l2(tape)?, cos(tape)?),
    }
}

/// Per-exit similarity terms with the teacher side optionally detached.
pub fn sim_terms<T: Scalar>(
    tape: &Tape<T>,
    kind: SimKind,
    pairs: &[(Var, Var)],
    detach_teacher: bool,
) -> Result<Vec<Var>> {
    pairs
        .iter()
        .map(|&(t, s)| {
            let t = if detach_teacher { tape.detach(t) } else { t };
            sim_pair(tape, kind, t, s)
        })
        .collect()
}

/// `(teacher, student)` embeddings compared at `level`.
pub fn sim_pairs(level: SimLevel, teacher: &HeadOutputs, students: &[HeadOutputs]) -> Vec<(Var, Var)> {
    students
        .iter()
        .map(|s| match level {
            SimLevel::Embedding => (teacher.pooled, s.pooled),
            SimLevel::Linear => (teacher.hidden, s.hidden),
        })
        .collect()
}

pub fn sim_loss<T: Scalar>(
    tape: &Tape<T>,
    kind: SimKind,
    pairs: &[(Var, Var)],
    detach_teacher: bool,
) -> Result<Var> {
    mean_of(tape, &sim_terms(tape, kind, pairs, detach_teacher)?)
}

/// Builds the full objective on `tape` and reports each term.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    out: &ForwardOutputs,
    y: &[usize],
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let students: Vec<HeadOutputs> = out.exits.iter().map(|(_, h)| *h).collect();
    let logits: Vec<Var> = students.iter().map(|h| h.logits).collect();
    let (lc, ce_t, ce_s) = composite_ce(tape, out.teacher.logits, &logits, y, w.gamma)?;
    let kls = kl_terms(tape, out.teacher.logits, &logits, w.temperature, w.detach_teacher)?;
    let pairs = sim_pairs(w.sim_level, &out.teacher, &students);
    let sims = sim_terms(tape, w.sim_kind, &pairs, w.detach_teacher)?;
    let kl = mean_of(tape, &kls)?;
    let sim = mean_of(tape, &sims)?;
    let total = tape.add(lc, tape.scale(kl, w.alpha))?;
    let total = tape.add(total, tape.scale(sim, w.beta))?;

    let item = |v: Var| tape.item(v).f64();
    let mean_ce_s = if ce_s.is_empty() {
        0.0
    } else {
        ce_s.iter().map(|&v| item(v)).sum::<f64>() / ce_s.len() as f64
    };
    let per_exit = out
        .exits
        .iter()
        .enumerate()
        .map(|(i, (spec, _))| ExitLoss {
            layer: spec.layer,
            ce: item(ce_s[i]),
            kl: item(kls[i]),
            sim: item(sims[i]),
        })
        .collect();
    let report = LossReport {
        total: item(total),
        ce_teacher: item(ce_t),
        ce_students: mean_ce_s,
        kl: item(kl),
        sim: item(sim),
        per_exit,
    };
    Ok((total, report))
}
