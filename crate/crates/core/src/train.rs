//! Schedules, the Adam optimizer, checkpoints and the training loops for
//! both stages.
//!
//! Every step derives its randomness from `(seed, stream, step, example)`,
//! so a checkpoint only needs parameters, optimizer moments, the seed and the
//! step counter to resume bit-for-bit.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mlm::{sample_span_mask, MaskedEncoderConfig, MaskedLm, SpanMaskConfig, Vocabulary};
use crate::model::{DrawKey, VqConfig, VqModel};
use crate::params::ParamStore;
use crate::quantizer::{possible_codewords, Backend};
use crate::rng::{substream, Stream};
use crate::tokens::TokenStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrShape {
    WarmupThenCosine,
    WarmupThenLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub total_steps: u64,
    pub shape: LrShape,
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a * (1.0 - f) + b * f
}

impl LrSchedule {
    /// 500 warmup steps from 1e-7 to 5e-3, cosine to 1e-6 at 400k.
    pub fn vq() -> Self {
        LrSchedule {
            warmup_steps: 500,
            lr_start: 1e-7,
            lr_peak: 5e-3,
            lr_end: 1e-6,
            total_steps: 400_000,
            shape: LrShape::WarmupThenCosine,
        }
    }

    /// 10k warmup steps to 1e-5, linear decay to zero at 250k.
    pub fn mlm() -> Self {
        LrSchedule {
            warmup_steps: 10_000,
            lr_start: 0.0,
            lr_peak: 1e-5,
            lr_end: 0.0,
            total_steps: 250_000,
            shape: LrShape::WarmupThenLinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_start > self.lr_peak || self.lr_end > self.lr_peak || self.lr_start < 0.0 || self.lr_end < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= start, end <= peak; got {} / {} / {}",
                self.lr_start, self.lr_peak, self.lr_end
            )));
        }
        if self.warmup_steps > self.total_steps || self.total_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "warmup {} must not exceed total {} (> 0)",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!("step {step} beyond schedule end {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(lerp(self.lr_start, self.lr_peak, step as f64 / self.warmup_steps as f64));
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.lr_peak);
        }
        let frac = (step - self.warmup_steps) as f64 / span as f64;
        Ok(match self.shape {
            LrShape::WarmupThenCosine => {
                let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                lerp(self.lr_end, self.lr_peak, w)
            }
            LrShape::WarmupThenLinear => lerp(self.lr_peak, self.lr_end, frac),
        })
    }

    /// Shrinks the schedule to `total` steps, keeping the warmup share.
    pub fn rescaled(&self, total: u64) -> Self {
        let warmup = (self.warmup_steps as f64 * total as f64 / self.total_steps as f64).round() as u64;
        LrSchedule { warmup_steps: warmup.min(total), total_steps: total.max(1), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TempSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_fraction: f64,
    pub total_steps: u64,
}

impl TempSchedule {
    /// 2 → 0.5 over the first 70% of `total_steps`, then flat.
    pub fn new(total_steps: u64) -> Self {
        TempSchedule { start: 2.0, end: 0.5, anneal_fraction: 0.7, total_steps }
    }

    pub fn temperature_at(&self, step: u64) -> f64 {
        let anneal = self.anneal_fraction * self.total_steps as f64;
        let s = step as f64;
        if s >= anneal {
            self.end
        } else {
            lerp(self.start, self.end, s / anneal)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            steps: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One Adam update. `names` label parameters in the non-finite error.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
    names: &[String],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::shape("adam_step", format!("parameter {i}: {} values, {} grads", p.numel(), g.len())));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))));
        }
    }
    let scale = match cfg.clip_norm {
        Some(limit) => {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi * scale;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub batch_size: usize,
    /// Crop length: samples for stage one, tokens for stage two.
    pub crop: usize,
    pub steps: u64,
    pub seed: u64,
    pub lr: LrSchedule,
    pub temperature: TempSchedule,
    pub adam: AdamConfig,
    pub checkpoint_every: Option<u64>,
}

impl TrainPlan {
    /// Batch 10, 150k-sample crops, 400k steps.
    pub fn vq() -> Self {
        TrainPlan {
            batch_size: 10,
            crop: 150_000,
            steps: 400_000,
            seed: 0,
            lr: LrSchedule::vq(),
            temperature: TempSchedule::new(400_000),
            adam: AdamConfig::default(),
            checkpoint_every: None,
        }
    }

    /// Batch 2, 512-token crops, 250k steps.
    pub fn mlm() -> Self {
        TrainPlan {
            batch_size: 2,
            crop: 512,
            steps: 250_000,
            seed: 0,
            lr: LrSchedule::mlm(),
            temperature: TempSchedule::new(250_000),
            adam: AdamConfig::default(),
            checkpoint_every: None,
        }
    }

    /// Same plan compressed to `steps`, schedules rescaled.
    pub fn shortened(&self, steps: u64) -> Self {
        TrainPlan {
            steps,
            lr: self.lr.rescaled(steps),
            temperature: TempSchedule { total_steps: steps, ..self.temperature.clone() },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::InvalidArgument("batch size and crop must be positive".into()));
        }
        if self.steps > self.lr.total_steps {
            return Err(Error::InvalidArgument(format!(
                "{} steps exceed the learning-rate schedule ({})",
                self.steps, self.lr.total_steps
            )));
        }
        Ok(())
    }
}

/// One telemetry line.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: Option<f64>,
    pub usage: Option<f64>,
    pub acc: Option<f64>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{x}"));
        write!(
            f,
            "step={} loss={} lr={} tau={} usage={}",
            self.step,
            self.loss,
            self.lr,
            opt(self.tau),
            opt(self.usage)
        )?;
        if let Some(acc) = self.acc {
            write!(f, " acc={acc}")?;
        }
        Ok(())
    }
}

impl StepRecord {
    /// Parses a line written by `Display`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut rec = StepRecord { step: 0, loss: f64::NAN, lr: f64::NAN, tau: None, usage: None, acc: None };
        let bad = || Error::Format(format!("bad telemetry line {line:?}"));
        let mut seen = 0;
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let num = |v: &str| -> Result<Option<f64>> {
                if v == "na" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| bad())
                }
            };
            match k {
                "step" => rec.step = v.parse().map_err(|_| bad())?,
                "loss" => rec.loss = num(v)?.ok_or_else(bad)?,
                "lr" => rec.lr = num(v)?.ok_or_else(bad)?,
                "tau" => rec.tau = num(v)?,
                "usage" => rec.usage = num(v)?,
                "acc" => rec.acc = num(v)?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen < 5 {
            return Err(bad());
        }
        Ok(rec)
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Steps over which the dead-gradient detector watches.
pub const DEAD_WINDOW: u64 = 50;

/// Tracks parameters that never receive a non-zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTracker {
    alive: Vec<Vec<bool>>,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeadReport {
    pub steps_observed: u64,
    /// Parameters none of whose scalars ever received a gradient.
    pub dead: Vec<String>,
    /// `(parameter, count)` of individual idle scalars, such as weights into
    /// ReLU units that never fired. Informational.
    pub idle_scalars: Vec<(String, usize)>,
}

impl GradientTracker {
    pub fn new(params: &[Tensor]) -> Self {
        GradientTracker { alive: params.iter().map(|p| vec![false; p.numel()]).collect(), steps: 0 }
    }

    pub fn observe(&mut self, grads: &[Vec<f64>]) {
        if self.steps >= DEAD_WINDOW {
            return;
        }
        self.steps += 1;
        for (a, g) in self.alive.iter_mut().zip(grads) {
            for (ai, gi) in a.iter_mut().zip(g) {
                *ai |= *gi != 0.0;
            }
        }
    }

    /// Idle parameters so far. `skip(name, index)` excludes scalars that are
    /// expected to be idle.
    pub fn report(&self, store: &ParamStore, skip: impl Fn(&str, usize) -> bool) -> DeadReport {
        let mut dead = Vec::new();
        let mut idle_scalars = Vec::new();
        for ((name, _), alive) in store.iter().zip(&self.alive) {
            let watched: Vec<bool> =
                alive.iter().enumerate().filter(|&(i, _)| !skip(name, i)).map(|(_, &a)| a).collect();
            let idle = watched.iter().filter(|&&a| !a).count();
            if idle > 0 {
                idle_scalars.push((name.to_string(), idle));
                if idle == watched.len() {
                    dead.push(name.to_string());
                }
            }
        }
        DeadReport { steps_observed: self.steps, dead, idle_scalars }
    }
}

fn reduce_grads(per_example: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let n = per_example.len() as f64;
    let mut it = per_example.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    acc
}

fn names(store: &ParamStore) -> Vec<String> {
    store.iter().map(|(n, _)| n.to_string()).collect()
}

/// Stage-one training state.
#[derive(Clone, Debug)]
pub struct VqTrainer {
    pub model: VqModel,
    pub plan: TrainPlan,
    pub adam: AdamState,
    pub step: u64,
    tracker: GradientTracker,
    selected: Vec<HashSet<u32>>,
}

impl VqTrainer {
    pub fn new(cfg: &VqConfig, plan: &TrainPlan) -> Result<Self> {
        plan.validate()?;
        if plan.crop < cfg.encoder.receptive_field() {
            return Err(Error::InvalidArgument(format!(
                "crop of {} samples is shorter than the receptive field {}",
                plan.crop,
                cfg.encoder.receptive_field()
            )));
        }
        let model = VqModel::new(cfg, plan.seed)?;
        let adam = AdamState::new(model.store.tensors());
        let tracker = GradientTracker::new(model.store.tensors());
        let selected = vec![HashSet::new(); cfg.quantizer.groups];
        Ok(VqTrainer { model, plan: plan.clone(), adam, step: 0, tracker, selected })
    }

    fn pick_crops(&self, data: &[Waveform]) -> Result<Vec<(usize, usize, usize)>> {
        let rf = self.model.config().encoder.receptive_field();
        let eligible: Vec<usize> = (0..data.len()).filter(|&i| data[i].len() >= rf).collect();
        if eligible.is_empty() {
            return Err(Error::AudioTooShort { len: data.iter().map(Waveform::len).max().unwrap_or(0), needed: rf });
        }
        let mut rng = substream(self.plan.seed, Stream::Data, self.step, 0);
        Ok((0..self.plan.batch_size)
            .map(|_| {
                let clip = eligible[rng.random_range(0..eligible.len())];
                let len = data[clip].len().min(self.plan.crop);
                let start = rng.random_range(0..=data[clip].len() - len);
                (clip, start, len)
            })
            .collect())
    }

    /// Runs one optimizer step and returns its telemetry.
    pub fn train_step(&mut self, data: &[Waveform]) -> Result<StepRecord> {
        let crops = self.pick_crops(data)?;
        let tau = self.plan.temperature.temperature_at(self.step);
        let lr = self.plan.lr.lr_at(self.step)?;
        let model = &self.model;
        let (seed, step) = (self.plan.seed, self.step);
        let results: Vec<(f64, Vec<Vec<f64>>, Vec<u32>)> = crops
            .par_iter()
            .enumerate()
            .map(|(i, &(clip, start, len))| {
                let wave = &data[clip].samples[start..start + len];
                let mut tape = Tape::new();
                let b = model.store.bind(&mut tape);
                let out = model.clip_loss(&mut tape, &b, wave, tau, DrawKey { seed, step, index: i as u64 })?;
                let value = tape.value(out.loss).item();
                tape.backward(out.loss)?;
                Ok((value, model.store.collect_grads(&tape, &b), out.indices))
            })
            .collect::<Result<_>>()?;

        let groups = model.config().quantizer.groups;
        let vars = model.config().quantizer.vars;
        let mut tuples = HashSet::new();
        let mut tokens = 0usize;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(results.len());
        for (value, g, indices) in results {
            loss += value;
            for frame in indices.chunks(groups) {
                tuples.insert(frame.to_vec());
                for (gi, &v) in frame.iter().enumerate() {
                    self.selected[gi].insert(v);
                }
            }
            tokens += indices.len() / groups;
            grads.push(g);
        }
        loss /= self.plan.batch_size as f64;
        let grads = reduce_grads(grads);
        self.tracker.observe(&grads);
        let names = names(&self.model.store);
        adam_step(self.model.store.tensors_mut(), &grads, &mut self.adam, lr, &self.plan.adam, &names)?;
        self.step += 1;
        if self.step == DEAD_WINDOW {
            let report = self.dead_report();
            if !report.dead.is_empty() {
                log::warn!("parameters without gradient over the first {DEAD_WINDOW} steps: {:?}", report.dead);
            }
        }
        let possible = possible_codewords(groups, vars).min(tokens.max(1) as u128);
        let backend = self.model.config().quantizer.backend;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr,
            tau: (backend == Backend::Gumbel).then_some(tau),
            usage: Some(tuples.len() as f64 / possible as f64),
            acc: None,
        })
    }

    /// Trains until `plan.steps`, passing each record to `sink` and each
    /// periodic checkpoint to `on_checkpoint`.
    pub fn run(
        &mut self,
        data: &[Waveform],
        mut sink: impl FnMut(&StepRecord),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        while self.step < self.plan.steps {
            let rec = self.train_step(data)?;
            sink(&rec);
            if let Some(every) = self.plan.checkpoint_every {
                if every > 0 && self.step.is_multiple_of(every) {
                    on_checkpoint(&self.checkpoint()?)?;
                }
            }
        }
        Ok(())
    }

    /// Parameters idle over the first steps, excluding codewords that were
    /// never selected.
    pub fn dead_report(&self) -> DeadReport {
        let q = self.model.quantizer();
        let cfg = q.config();
        let dg = q.group_dim();
        self.tracker.report(&self.model.store, |name, i| {
            if name != "quantizer.codebook" {
                return false;
            }
            let row = i / dg;
            let (v, g) = if cfg.shared_codebook { (row, None) } else { (row / cfg.groups, Some(row % cfg.groups)) };
            match g {
                Some(g) => !self.selected[g].contains(&(v as u32)),
                None => !self.selected.iter().any(|s| s.contains(&(v as u32))),
            }
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "config": self.model.config(),
            "plan": self.plan,
            "codebook_hash": format!("{:016x}", self.model.codebook_hash()),
            "adam_steps": self.adam.steps,
        });
        Ok(Checkpoint::assemble(CheckpointKind::Vq, meta, self.step, self.plan.seed, &self.model.store, &self.adam))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Vq)?;
        let cfg: VqConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let plan: TrainPlan = serde_json::from_value(ckpt.meta["plan"].clone())?;
        let mut t = VqTrainer::new(&cfg, &plan)?;
        ckpt.restore(&mut t.model.store, &mut t.adam)?;
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Loads only the model from a stage-one checkpoint.
pub fn load_vq_model(ckpt: &Checkpoint) -> Result<VqModel> {
    ckpt.expect_kind(CheckpointKind::Vq)?;
    let cfg: VqConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
    let mut model = VqModel::new(&cfg, ckpt.seed)?;
    let mut adam = AdamState::new(model.store.tensors());
    ckpt.restore(&mut model.store, &mut adam)?;
    Ok(model)
}

/// Trains a fresh stage-one model and returns its final checkpoint.
pub fn train_vq(
    data: &[Waveform],
    cfg: &VqConfig,
    plan: &TrainPlan,
    sink: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut t = VqTrainer::new(cfg, plan)?;
    t.run(data, sink, |_| Ok(()))?;
    t.checkpoint()
}

/// Loss, per-tensor gradients, correct and masked counts of one example.
type ExampleGrads = (f64, Vec<Vec<f64>>, usize, usize);

/// Stage-two training state.
#[derive(Clone, Debug)]
pub struct MlmTrainer {
    pub model: MaskedLm,
    pub vocab: Vocabulary,
    pub mask: SpanMaskConfig,
    pub plan: TrainPlan,
    pub adam: AdamState,
    pub step: u64,
}

impl MlmTrainer {
    pub fn new(cfg: &MaskedEncoderConfig, vocab: &Vocabulary, mask: &SpanMaskConfig, plan: &TrainPlan) -> Result<Self> {
        plan.validate()?;
        mask.validate()?;
        let model = MaskedLm::new(cfg, vocab.len(), plan.seed)?;
        let adam = AdamState::new(model.store.tensors());
        Ok(MlmTrainer { model, vocab: vocab.clone(), mask: mask.clone(), plan: plan.clone(), adam, step: 0 })
    }

    /// Encodes streams with the trainer's vocabulary.
    pub fn encode(&self, streams: &[TokenStream]) -> Result<Vec<Vec<u32>>> {
        streams.iter().map(|s| self.vocab.encode(s)).collect()
    }

    pub fn train_step(&mut self, data: &[Vec<u32>]) -> Result<StepRecord> {
        let eligible: Vec<usize> = (0..data.len()).filter(|&i| !data[i].is_empty()).collect();
        if eligible.is_empty() {
            return Err(Error::Empty("no token sequences".into()));
        }
        let lr = self.plan.lr.lr_at(self.step)?;
        let mut rng = substream(self.plan.seed, Stream::Data, self.step, 0);
        let crops: Vec<&[u32]> = (0..self.plan.batch_size)
            .map(|_| {
                let seq = &data[eligible[rng.random_range(0..eligible.len())]];
                let len = seq.len().min(self.plan.crop);
                let start = rng.random_range(0..=seq.len() - len);
                &seq[start..start + len]
            })
            .collect();
        let (seed, step, model, mask) = (self.plan.seed, self.step, &self.model, &self.mask);
        let results: Vec<Option<ExampleGrads>> = crops
            .par_iter()
            .enumerate()
            .map(|(i, ids)| {
                let mut mrng = substream(seed, Stream::Mask, step, i as u64);
                let mut drng = substream(seed, Stream::Dropout, step, i as u64);
                let m = sample_span_mask(ids.len(), mask, &mut mrng)?;
                let mut tape = Tape::new();
                let b = model.store.bind(&mut tape);
                let Some(out) = model.masked_loss(&mut tape, &b, ids, &m, true, &mut drng)? else {
                    return Ok(None);
                };
                let value = tape.value(out.loss).item();
                tape.backward(out.loss)?;
                Ok(Some((value, model.store.collect_grads(&tape, &b), out.correct, out.masked)))
            })
            .collect::<Result<_>>()?;
        let used: Vec<_> = results.into_iter().flatten().collect();
        self.step += 1;
        if used.is_empty() {
            log::warn!("step {}: no masked positions in batch; skipped", self.step);
            return Ok(StepRecord { step: self.step, loss: f64::NAN, lr, tau: None, usage: None, acc: None });
        }
        let n = used.len() as f64;
        let loss = used.iter().map(|u| u.0).sum::<f64>() / n;
        let correct: usize = used.iter().map(|u| u.2).sum();
        let masked: usize = used.iter().map(|u| u.3).sum();
        let grads = reduce_grads(used.into_iter().map(|u| u.1).collect());
        let names = names(&self.model.store);
        adam_step(self.model.store.tensors_mut(), &grads, &mut self.adam, lr, &self.plan.adam, &names)?;
        Ok(StepRecord { step: self.step, loss, lr, tau: None, usage: None, acc: Some(correct as f64 / masked as f64) })
    }

    pub fn run(
        &mut self,
        data: &[Vec<u32>],
        mut sink: impl FnMut(&StepRecord),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.plan.steps {
            let rec = self.train_step(data)?;
            sink(&rec);
            if let Some(every) = self.plan.checkpoint_every {
                if every > 0 && self.step.is_multiple_of(every) {
                    on_checkpoint(&self.checkpoint()?)?;
                }
            }
        }
        Ok(())
    }

    /// Masked accuracy over fresh masks of `data`, cut into crop-length
    /// windows, inference mode.
    pub fn evaluate(&self, data: &[Vec<u32>], seed: u64) -> Result<f64> {
        let (mut correct, mut total) = (0, 0);
        let windows = data.iter().flat_map(|seq| seq.chunks(self.plan.crop));
        for (i, ids) in windows.enumerate() {
            let mut mrng = substream(seed, Stream::Mask, u64::MAX, i as u64);
            let m = sample_span_mask(ids.len(), &self.mask, &mut mrng)?;
            let mut tape = Tape::new();
            let b = self.model.store.bind(&mut tape);
            if let Some(out) = self.model.masked_loss(&mut tape, &b, ids, &m, false, &mut mrng)? {
                correct += out.correct;
                total += out.masked;
            }
        }
        if total == 0 {
            return Err(Error::Empty("no masked positions to evaluate".into()));
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "config": self.model.config(),
            "plan": self.plan,
            "mask": self.mask,
            "vocab": self.vocab.to_text(),
            "adam_steps": self.adam.steps,
        });
        Ok(Checkpoint::assemble(CheckpointKind::Mlm, meta, self.step, self.plan.seed, &self.model.store, &self.adam))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Mlm)?;
        let cfg: MaskedEncoderConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let plan: TrainPlan = serde_json::from_value(ckpt.meta["plan"].clone())?;
        let mask: SpanMaskConfig = serde_json::from_value(ckpt.meta["mask"].clone())?;
        let vocab = Vocabulary::from_text(
            ckpt.meta["vocab"].as_str().ok_or_else(|| Error::Format("checkpoint lacks vocabulary".into()))?,
        )?;
        let mut t = MlmTrainer::new(&cfg, &vocab, &mask, &plan)?;
        ckpt.restore(&mut t.model.store, &mut t.adam)?;
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Trains a fresh masked model and returns its final checkpoint.
pub fn train_mlm(
    streams: &[TokenStream],
    vocab: &Vocabulary,
    cfg: &MaskedEncoderConfig,
    mask: &SpanMaskConfig,
    plan: &TrainPlan,
    sink: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut t = MlmTrainer::new(cfg, vocab, mask, plan)?;
    let data = t.encode(streams)?;
    t.run(&data, sink, |_| Ok(()))?;
    t.checkpoint()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Vq,
    Mlm,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Vq => 1,
            CheckpointKind::Mlm => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(CheckpointKind::Vq),
            2 => Ok(CheckpointKind::Mlm),
            other => Err(Error::Format(format!("unknown checkpoint kind {other}"))),
        }
    }
}

/// Versioned training snapshot.
///
/// Layout (little-endian): `"VQCK" version:u32 kind:u8 step:u64 seed:u64
/// meta_len:u32 meta:json arrays:u32`, then per array `name_len:u32 name
/// ndim:u32 dims:u64… values:f64…`, then `crc32:u32` over all preceding
/// bytes. Arrays are named `param/…`, `adam_m/…` and `adam_v/…`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    fn assemble(
        kind: CheckpointKind,
        meta: serde_json::Value,
        step: u64,
        seed: u64,
        store: &ParamStore,
        adam: &AdamState,
    ) -> Self {
        let mut arrays = Vec::with_capacity(store.len() * 3);
        for ((name, t), (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
            arrays.push((format!("param/{name}"), t.clone()));
            let shape = t.shape().to_vec();
            arrays.push((format!("adam_m/{name}"), Tensor::new(shape.clone(), m.clone()).expect("moment shape")));
            arrays.push((format!("adam_v/{name}"), Tensor::new(shape, v.clone()).expect("moment shape")));
        }
        Checkpoint { version: CHECKPOINT_VERSION, kind, step, seed, meta, arrays }
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Incompatible(format!("expected a {kind:?} checkpoint, got {:?}", self.kind)));
        }
        Ok(())
    }

    fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array {name}")))
    }

    fn restore(&self, store: &mut ParamStore, adam: &mut AdamState) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut params = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            params.push((name.clone(), self.array(&format!("param/{name}"))?.clone()));
            adam.m[i] = self.array(&format!("adam_m/{name}"))?.data().to_vec();
            adam.v[i] = self.array(&format!("adam_v/{name}"))?.data().to_vec();
        }
        store.load_values(&params)?;
        adam.steps = self.meta["adam_steps"].as_u64().unwrap_or(self.step);
        Ok(())
    }

    pub fn codebook_hash(&self) -> Option<u64> {
        self.meta["codebook_hash"].as_str().and_then(|h| u64::from_str_radix(h, 16).ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > payload.len() {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            let s = &payload[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_of(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let kind = CheckpointKind::from_tag(take(1)?[0])?;
        let step = u64_of(take(8)?);
        let seed = u64_of(take(8)?);
        let meta_len = u32_of(take(4)?) as usize;
        let meta = serde_json::from_slice(take(meta_len)?)?;
        let count = u32_of(take(4)?) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32_of(take(4)?) as usize;
            let name =
                String::from_utf8(take(nlen)?.to_vec()).map_err(|_| Error::Format("array name not UTF-8".into()))?;
            let ndim = u32_of(take(4)?) as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| take(8).map(|b| u64_of(b) as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let data =
                take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if pos != payload.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { version, kind, step, seed, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
