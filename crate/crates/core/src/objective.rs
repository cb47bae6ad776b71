//! Contrastive future-prediction loss with uniformly drawn distractors and
//! assembly of the total training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::convnet::StepHeads;
use crate::error::{Error, Result};
use crate::params::Bindings;
use crate::quantizer::{Backend, KmeansAux};

/// Which sequence supplies positives and distractors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// The quantized frames `Ẑ`.
    #[default]
    Quantized,
    /// The dense encoder output `Z`.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub steps: usize,
    pub negatives: usize,
    pub lambda: f64,
    #[serde(default)]
    pub targets: TargetSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { steps: 8, negatives: 10, lambda: 1.0, targets: TargetSource::Quantized }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.negatives == 0 {
            return Err(Error::InvalidArgument(format!(
                "need at least one step and one negative, got K={} n={}",
                self.steps, self.negatives
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Distractor frame indices for every `(i, k)` with `i + k < T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeDraw {
    frames: usize,
    negatives: usize,
    /// `per_step[k - 1]` holds `(T - k) × n` indices, row-major by `i`.
    per_step: Vec<Vec<usize>>,
}

impl NegativeDraw {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    /// Distractors for prediction `i` at step `k` (1-based).
    pub fn get(&self, i: usize, k: usize) -> &[usize] {
        &self.per_step[k - 1][i * self.negatives..(i + 1) * self.negatives]
    }

    pub fn step(&self, k: usize) -> &[usize] {
        &self.per_step[k - 1]
    }

    /// Replaces the distractors for step `k`; lengths must match.
    pub fn set_step(&mut self, k: usize, indices: Vec<usize>) -> Result<()> {
        if indices.len() != self.per_step[k - 1].len() || indices.iter().any(|&n| n >= self.frames) {
            return Err(Error::InvalidArgument(format!("bad distractor set for step {k}")));
        }
        self.per_step[k - 1] = indices;
        Ok(())
    }
}

/// Uniform draws over the clip's frames; the true target may be drawn.
pub fn sample_negatives<R: Rng + ?Sized>(frames: usize, cfg: &LossConfig, rng: &mut R) -> Result<NegativeDraw> {
    if frames <= 1 {
        return Err(Error::InvalidArgument(format!("need more than one frame to draw negatives, got {frames}")));
    }
    cfg.validate()?;
    let per_step = (1..=cfg.steps)
        .map(|k| (0..frames.saturating_sub(k) * cfg.negatives).map(|_| rng.random_range(0..frames)).collect())
        .collect();
    Ok(NegativeDraw { frames, negatives: cfg.negatives, per_step })
}

/// Sum over steps `k` and positions `i` of
/// `-[log σ(t_{i+k}·h_k(c_i)) + λ/n · Σ log σ(-t_n·h_k(c_i))]`.
///
/// `c: [dc, T]`, `targets: [d, T]`. Steps with no valid positions
/// contribute zero and log a warning.
pub fn contrastive_loss(
    tape: &mut Tape,
    b: &Bindings,
    c: Var,
    targets: Var,
    heads: &StepHeads,
    neg: &NegativeDraw,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (dc, frames) = tape.value(c).dims2()?;
    let (d, tf) = tape.value(targets).dims2()?;
    if frames != tf {
        return Err(Error::shape("contrastive_loss", format!("context has {frames} frames, targets {tf}")));
    }
    if dc != heads.in_dim() || d != heads.out_dim() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("heads map {} -> {}, inputs are {dc} -> {d}", heads.in_dim(), heads.out_dim()),
        ));
    }
    if cfg.steps > heads.steps()
        || neg.frames() != frames
        || neg.negatives() != cfg.negatives
        || neg.steps() < cfg.steps
    {
        return Err(Error::InvalidArgument("negative draw or heads do not match the loss config".into()));
    }
    let ct = tape.transpose(c)?;
    let tt = tape.transpose(targets)?;
    let mut total: Option<Var> = None;
    for k in 1..=cfg.steps {
        if frames <= k {
            log::warn!("step {k} skipped: clip has only {frames} frames");
            continue;
        }
        let n = frames - k;
        let rows = tape.slice_rows(ct, 0, n)?;
        let pred = heads.apply(tape, b, k, rows)?;
        let pos_pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i + k)).collect();
        let pos = tape.pair_dot(pred, tt, &pos_pairs)?;
        let pos = tape.log_sigmoid(pos);
        let pos = tape.sum(pos);
        let neg_pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| neg.get(i, k).iter().map(move |&j| (i, j))).collect();
        let ns = tape.pair_dot(pred, tt, &neg_pairs)?;
        let ns = tape.scale(ns, -1.0);
        let ns = tape.log_sigmoid(ns);
        let ns = tape.sum(ns);
        let ns = tape.scale(ns, cfg.lambda / cfg.negatives as f64);
        let both = tape.add(pos, ns)?;
        let lk = tape.scale(both, -1.0);
        total = Some(match total {
            None => lk,
            Some(t) => tape.add(t, lk)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Gumbel: the contrastive loss alone. k-means: plus the codebook term and
/// `γ ×` the commitment term.
pub fn total_loss(tape: &mut Tape, contrastive: Var, backend: Backend, aux: Option<&KmeansAux>) -> Result<Var> {
    match (backend, aux) {
        (Backend::Gumbel, None) => Ok(contrastive),
        (Backend::Kmeans, Some(aux)) => {
            let extra = aux.combined(tape)?;
            tape.add(contrastive, extra)
        }
        (Backend::Gumbel, Some(_)) => Err(Error::InvalidArgument("gumbel backend takes no auxiliary terms".into())),
        (Backend::Kmeans, None) => Err(Error::InvalidArgument("k-means backend needs its auxiliary terms".into())),
    }
}
