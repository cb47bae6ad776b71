//! Grouped vector quantization with Gumbel-Softmax or online k-means
//! selection, plus codebook health statistics.
//!
//! A `d`-dimensional frame is split into `G` contiguous groups of `d / G`
//! values. Each group is replaced by one of `V` codewords, so a frame is
//! represented by a `G`-tuple of indices. Codebooks are either shared
//! across groups (`[V, d/G]`) or separate per group (`[V, G, d/G]`).
//!
//! Gradient routing on the tape:
//!
//! * k-means: `ẑ = straight_through(e_i, z)`. The encoder sees the
//!   downstream gradient unchanged; the codebook only learns through the
//!   auxiliary codebook term.
//! * Gumbel: `ẑ = onehot·e + (z - sg(z))` where the one-hot is a
//!   straight-through stand-in for the relaxed probabilities. The encoder
//!   again sees the downstream gradient unchanged; the logits network and the
//!   codebook learn through the softmax path. The logits network reads
//!   `sg(z)`.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, uniform, Bindings, ParamId, ParamStore};
use crate::tokens::TokenStream;

/// Gumbel noise draws are clamped to this distance from 0 and 1.
pub const NOISE_CLAMP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Gumbel,
    Kmeans,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(Backend::Gumbel),
            "kmeans" | "k-means" => Ok(Backend::Kmeans),
            other => Err(Error::InvalidArgument(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    AfterEncoder,
    AfterAggregator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub backend: Backend,
    pub groups: usize,
    pub vars: usize,
    pub shared_codebook: bool,
    /// Commitment weight (k-means only).
    pub gamma: f64,
    pub placement: Placement,
}

impl QuantizerConfig {
    pub fn gumbel(groups: usize, vars: usize) -> Self {
        QuantizerConfig {
            backend: Backend::Gumbel,
            groups,
            vars,
            shared_codebook: true,
            gamma: 0.25,
            placement: Placement::AfterEncoder,
        }
    }

    pub fn kmeans(groups: usize, vars: usize) -> Self {
        QuantizerConfig { backend: Backend::Kmeans, ..Self::gumbel(groups, vars) }
    }

    /// `V^G`, saturating at `u128::MAX`.
    pub fn possible_codewords(&self) -> u128 {
        possible_codewords(self.groups, self.vars)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidArgument("need at least one group".into()));
        }
        if self.vars < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 variables, got {}", self.vars)));
        }
        if !dim.is_multiple_of(self.groups) {
            return Err(Error::InvalidArgument(format!("dimension {dim} not divisible by {} groups", self.groups)));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

pub fn possible_codewords(groups: usize, vars: usize) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..groups {
        acc = acc.saturating_mul(vars as u128);
    }
    acc
}

/// Splits a frame into `groups` contiguous rows.
pub fn partition(z: &[f64], groups: usize) -> Result<Vec<&[f64]>> {
    if groups == 0 || !z.len().is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!("length {} not divisible into {groups} groups", z.len())));
    }
    Ok(z.chunks(z.len() / groups).collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansChoice {
    pub index: usize,
    pub distance: f64,
    pub codeword: Vec<f64>,
}

/// Nearest codeword by squared Euclidean distance; lowest index wins ties.
pub fn kmeans_quantize(z_group: &[f64], codebook: &[&[f64]]) -> Result<KmeansChoice> {
    if codebook.is_empty() {
        return Err(Error::Empty("codebook".into()));
    }
    let mut best = (0, squared_distance(z_group, codebook[0]));
    for (j, e) in codebook.iter().enumerate().skip(1) {
        let d = squared_distance(z_group, e);
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(KmeansChoice { index: best.0, distance: best.1, codeword: codebook[best.0].to_vec() })
}

/// `-log(-log u)` for `u ~ U(0, 1)` clamped away from the endpoints.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_probs(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().zip(noise).map(|(l, v)| (l + v) / tau).collect();
    softmax_in_place(&mut p);
    p
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { tau: f64 },
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelChoice {
    pub index: usize,
    /// Relaxed probabilities; `None` in inference mode.
    pub probs: Option<Vec<f64>>,
    pub codeword: Vec<f64>,
}

/// Selects a codeword from one group's logits. Training samples Gumbel
/// noise and takes the argmax of the relaxed distribution; inference takes
/// the argmax of the logits.
pub fn gumbel_quantize<R: Rng + ?Sized>(
    logits: &[f64],
    codebook: &[&[f64]],
    mode: Mode,
    rng: &mut R,
) -> Result<GumbelChoice> {
    if logits.len() != codebook.len() {
        return Err(Error::shape(
            "gumbel_quantize",
            format!("{} logits vs {} codewords", logits.len(), codebook.len()),
        ));
    }
    match mode {
        Mode::Infer => {
            let index = argmax(logits);
            Ok(GumbelChoice { index, probs: None, codeword: codebook[index].to_vec() })
        }
        Mode::Train { tau } => {
            if tau <= 0.0 {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
            }
            let noise = gumbel_noise(rng, logits.len());
            let p = gumbel_probs(logits, &noise, tau);
            let index = argmax(&p);
            Ok(GumbelChoice { index, probs: Some(p), codeword: codebook[index].to_vec() })
        }
    }
}

/// Auxiliary k-means terms, each summed over the vector and averaged over frames.
#[derive(Clone, Copy, Debug)]
pub struct KmeansAux {
    /// `||sg(z) - ẑ||²`: moves codewords.
    pub codebook: Var,
    /// `||z - sg(ẑ)||²`: pulls the encoder towards its codeword.
    pub commitment: Var,
    pub gamma: f64,
}

impl KmeansAux {
    /// `codebook + gamma * commitment`.
    pub fn combined(&self, tape: &mut Tape) -> Result<Var> {
        let c = tape.scale(self.commitment, self.gamma);
        tape.add(self.codebook, c)
    }
}

/// Builds the two auxiliary terms for dense `z` and selected codewords `q`
/// (both `[T, d]`, or a single frame `[d]`).
pub fn kmeans_aux_loss(tape: &mut Tape, z: Var, q: Var, gamma: f64) -> Result<KmeansAux> {
    if tape.shape(z) != tape.shape(q) {
        return Err(Error::shape("kmeans_aux_loss", format!("{:?} vs {:?}", tape.shape(z), tape.shape(q))));
    }
    let frames = if tape.shape(z).len() >= 2 { tape.shape(z)[0] } else { 1 } as f64;
    let sz = tape.stop_gradient(z);
    let d1 = tape.sub(sz, q)?;
    let sq1 = tape.mul(d1, d1)?;
    let s1 = tape.sum(sq1);
    let codebook = tape.scale(s1, 1.0 / frames);
    let sq = tape.stop_gradient(q);
    let d2 = tape.sub(z, sq)?;
    let sq2 = tape.mul(d2, d2)?;
    let s2 = tape.sum(sq2);
    let commitment = tape.scale(s2, 1.0 / frames);
    Ok(KmeansAux { codebook, commitment, gamma })
}

/// Tape handles and selections produced by [`Quantizer::quantize`].
#[derive(Debug)]
pub struct QuantizeVars {
    /// Quantized frames `[d, T]`.
    pub z_hat: Var,
    /// Selected codewords without straight-through routing, `[T, d]`.
    pub codewords: Var,
    /// Row-major `T × G` codeword indices.
    pub indices: Vec<u32>,
    /// `T × G × V` relaxed probabilities (Gumbel training only).
    pub probs: Option<Tensor>,
    pub aux: Option<KmeansAux>,
}

/// Plain-value result of quantizing a sequence.
#[derive(Clone, Debug)]
pub struct QuantizeOutcome {
    pub z_hat: Tensor,
    pub indices: Vec<u32>,
    pub groups: usize,
    pub probs: Option<Tensor>,
    /// `(codebook term, commitment term)` values for k-means.
    pub aux: Option<(f64, f64)>,
}

impl QuantizeOutcome {
    pub fn frames(&self) -> usize {
        self.indices.len() / self.groups
    }

    pub fn frame_indices(&self, t: usize) -> &[u32] {
        &self.indices[t * self.groups..(t + 1) * self.groups]
    }
}

#[derive(Clone, Debug)]
struct LogitsNet {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// The quantization module `q: Z -> Ẑ` for frames of a fixed dimension.
#[derive(Clone, Debug)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    dim: usize,
    codebook: ParamId,
    logits_net: Option<LogitsNet>,
}

impl Quantizer {
    pub fn new<R: Rng + ?Sized>(
        cfg: &QuantizerConfig,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(dim)?;
        let dg = dim / cfg.groups;
        let shape = if cfg.shared_codebook { vec![cfg.vars, dg] } else { vec![cfg.vars, cfg.groups, dg] };
        let codebook = store.add("quantizer.codebook", uniform(rng, &shape, 1.0 / (dg as f64).sqrt()));
        let logits_net = (cfg.backend == Backend::Gumbel).then(|| {
            let out = cfg.groups * cfg.vars;
            LogitsNet {
                w1: store.add("quantizer.logits.0.weight", kaiming_uniform(rng, &[dim, dim], dim)),
                b1: store.add("quantizer.logits.0.bias", Tensor::zeros(&[dim])),
                w2: store.add("quantizer.logits.1.weight", kaiming_uniform(rng, &[out, dim], dim)),
                b2: store.add("quantizer.logits.1.bias", Tensor::zeros(&[out])),
            }
        });
        Ok(Quantizer { cfg: cfg.clone(), dim, codebook, logits_net })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn group_dim(&self) -> usize {
        self.dim / self.cfg.groups
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Codewords available to group `g`, indexed by variable.
    pub fn codebook_rows<'a>(&self, store: &'a ParamStore, g: usize) -> Vec<&'a [f64]> {
        let data = store.get(self.codebook).data();
        let dg = self.group_dim();
        (0..self.cfg.vars)
            .map(|v| {
                let row = if self.cfg.shared_codebook { v } else { v * self.cfg.groups + g };
                &data[row * dg..(row + 1) * dg]
            })
            .collect()
    }

    fn table_row(&self, v: usize, g: usize) -> usize {
        if self.cfg.shared_codebook {
            v
        } else {
            v * self.cfg.groups + g
        }
    }

    /// First 8 bytes of SHA-256 over the codebook shape and values.
    pub fn codebook_hash(&self, store: &ParamStore) -> u64 {
        let cb = store.get(self.codebook);
        let mut h = Sha256::new();
        for &d in cb.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in cb.data() {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Gumbel logits for one frame, `G·V` values.
    pub fn logits(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        let net = self
            .logits_net
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("k-means quantizer has no logits network".into()))?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![z.len()], z.to_vec())?);
        let y = self.apply_logits(&mut tape, store, net, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    fn apply_logits(&self, tape: &mut Tape, store: &ParamStore, net: &LogitsNet, x: Var) -> Result<Var> {
        let w1 = tape.constant(store.get(net.w1).clone());
        let b1 = tape.constant(store.get(net.b1).clone());
        let w2 = tape.constant(store.get(net.w2).clone());
        let b2 = tape.constant(store.get(net.b2).clone());
        let h = tape.linear(x, w1, b1)?;
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }

    /// Quantizes `z: [d, T]` on the tape.
    pub fn quantize<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<QuantizeVars> {
        let (d, t) = tape.value(z).dims2()?;
        if d != self.dim {
            return Err(Error::shape("quantize", format!("frames of dim {d}, quantizer expects {}", self.dim)));
        }
        let (groups, vars, dg) = (self.cfg.groups, self.cfg.vars, self.group_dim());
        let zt = tape.transpose(z)?;
        let table = tape.reshape(b.var(self.codebook), vec![store_rows(&self.cfg), dg])?;
        let z_groups: Vec<Var> = if groups == 1 {
            vec![zt]
        } else {
            (0..groups).map(|g| tape.slice_cols(zt, g * dg, (g + 1) * dg)).collect::<Result<_>>()?
        };
        let mut indices = vec![0u32; t * groups];
        let mut codewords = Vec::with_capacity(groups);
        let mut outputs = Vec::with_capacity(groups);
        let mut probs_all = None;

        match (self.cfg.backend, mode) {
            (Backend::Kmeans, _) => {
                for (g, &zg) in z_groups.iter().enumerate() {
                    let rows = self.table_rows_for_group(g);
                    let table_vals = tape.value(table).data().to_vec();
                    let zv = tape.value(zg).data().to_vec();
                    let mut sel = Vec::with_capacity(t);
                    for ti in 0..t {
                        let cands: Vec<&[f64]> = rows.iter().map(|&r| &table_vals[r * dg..(r + 1) * dg]).collect();
                        let choice = kmeans_quantize(&zv[ti * dg..(ti + 1) * dg], &cands)?;
                        indices[ti * groups + g] = choice.index as u32;
                        sel.push(rows[choice.index]);
                    }
                    let q = tape.gather_rows(table, &sel)?;
                    outputs.push(tape.straight_through(q, zg)?);
                    codewords.push(q);
                }
            }
            (Backend::Gumbel, Mode::Infer) => {
                let logits = self.logits_on_tape(tape, b, zt)?;
                let lv = tape.value(logits).data().to_vec();
                for g in 0..groups {
                    let rows = self.table_rows_for_group(g);
                    let sel: Vec<usize> = (0..t)
                        .map(|ti| {
                            let i = argmax(&lv[ti * groups * vars + g * vars..ti * groups * vars + (g + 1) * vars]);
                            indices[ti * groups + g] = i as u32;
                            rows[i]
                        })
                        .collect();
                    let q = tape.gather_rows(table, &sel)?;
                    codewords.push(q);
                    outputs.push(q);
                }
            }
            (Backend::Gumbel, Mode::Train { tau }) => {
                if tau <= 0.0 {
                    return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
                }
                let logits = self.logits_on_tape(tape, b, zt)?;
                let mut probs = vec![0.0; t * groups * vars];
                for (g, &zg) in z_groups.iter().enumerate() {
                    let lg = if groups == 1 { logits } else { tape.slice_cols(logits, g * vars, (g + 1) * vars)? };
                    let noise = tape.constant(Tensor::new(vec![t, vars], gumbel_noise(rng, t * vars))?);
                    let noisy = tape.add(lg, noise)?;
                    let scaled = tape.scale(noisy, 1.0 / tau);
                    let p = tape.softmax(scaled);
                    let pv = tape.value(p).data().to_vec();
                    let mut onehot = vec![0.0; t * vars];
                    for ti in 0..t {
                        let row = &pv[ti * vars..(ti + 1) * vars];
                        let i = argmax(row);
                        indices[ti * groups + g] = i as u32;
                        onehot[ti * vars + i] = 1.0;
                        probs[(ti * groups + g) * vars..(ti * groups + g + 1) * vars].copy_from_slice(row);
                    }
                    let hard = tape.constant(Tensor::new(vec![t, vars], onehot)?);
                    let y = tape.straight_through(hard, p)?;
                    let table_g = if self.cfg.shared_codebook {
                        table
                    } else {
                        tape.gather_rows(table, &self.table_rows_for_group(g))?
                    };
                    let q = tape.matmul(y, table_g)?;
                    let frozen = tape.stop_gradient(zg);
                    let identity = tape.sub(zg, frozen)?;
                    outputs.push(tape.add(q, identity)?);
                    codewords.push(q);
                }
                probs_all = Some(Tensor::new(vec![t, groups, vars], probs)?);
            }
        }

        let (zhat_t, q_all) = if groups == 1 {
            (outputs[0], codewords[0])
        } else {
            (tape.concat_cols(&outputs)?, tape.concat_cols(&codewords)?)
        };
        let z_hat = tape.transpose(zhat_t)?;
        let aux = match self.cfg.backend {
            Backend::Kmeans => Some(kmeans_aux_loss(tape, zt, q_all, self.cfg.gamma)?),
            Backend::Gumbel => None,
        };
        Ok(QuantizeVars { z_hat, codewords: q_all, indices, probs: probs_all, aux })
    }

    fn table_rows_for_group(&self, g: usize) -> Vec<usize> {
        (0..self.cfg.vars).map(|v| self.table_row(v, g)).collect()
    }

    fn logits_on_tape(&self, tape: &mut Tape, b: &Bindings, zt: Var) -> Result<Var> {
        let net = self.logits_net.as_ref().expect("gumbel quantizer has a logits network");
        let input = tape.stop_gradient(zt);
        let h = tape.linear(input, b.var(net.w1), b.var(net.b1))?;
        let h = tape.relu(h);
        tape.linear(h, b.var(net.w2), b.var(net.b2))
    }

    /// Value-level quantization of `z: [d, T]`.
    pub fn quantize_sequence<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        z: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<QuantizeOutcome> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.quantize(&mut tape, &b, zv, mode, rng)?;
        let aux = out.aux.map(|a| (tape.value(a.codebook).item(), tape.value(a.commitment).item()));
        Ok(QuantizeOutcome {
            z_hat: tape.value(out.z_hat).clone(),
            indices: out.indices,
            groups: self.cfg.groups,
            probs: out.probs,
            aux,
        })
    }
}

fn store_rows(cfg: &QuantizerConfig) -> usize {
    if cfg.shared_codebook {
        cfg.vars
    } else {
        cfg.vars * cfg.groups
    }
}

/// Distinct codeword tuples observed across token streams.
#[derive(Clone, Debug, PartialEq)]
pub struct CodewordUsage {
    pub unique: usize,
    pub tokens: usize,
    pub possible: u128,
    /// `unique / min(V^G, tokens)`.
    pub fraction: f64,
    /// `unique / V^G`.
    pub fraction_of_possible: f64,
}

pub fn codeword_usage(streams: &[TokenStream]) -> Result<CodewordUsage> {
    let first = streams.first().ok_or_else(|| Error::Empty("no token streams".into()))?;
    let (groups, vars) = (first.header.groups, first.header.vars);
    let mut seen: HashSet<&[u32]> = HashSet::new();
    let mut tokens = 0;
    for s in streams {
        if s.header.groups != groups || s.header.vars != vars {
            return Err(Error::Incompatible(format!(
                "stream {:?} has G={} V={}, expected G={groups} V={vars}",
                s.header.source, s.header.groups, s.header.vars
            )));
        }
        for t in 0..s.len() {
            seen.insert(s.frame(t));
        }
        tokens += s.len();
    }
    let possible = possible_codewords(groups as usize, vars as usize);
    let denom = possible.min(tokens as u128).max(1);
    Ok(CodewordUsage {
        unique: seen.len(),
        tokens,
        possible,
        fraction: seen.len() as f64 / denom as f64,
        fraction_of_possible: seen.len() as f64 / possible as f64,
    })
}
