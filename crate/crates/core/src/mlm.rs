//! Masked token prediction over discretized audio: the joint vocabulary of
//! codeword tuples, the span mask sampler and a small bidirectional
//! transformer encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, uniform, Bindings, ParamId, ParamStore};
use crate::quantizer::argmax;
use crate::rng::{substream, NoRng, Stream};
use crate::tokens::TokenStream;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
const FIRST_TUPLE: u32 = 3;
const VOCAB_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-5;

/// Bijection between observed codeword tuples and dense token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub groups: u32,
    pub vars: u32,
    pub codebook_hash: u64,
    tuples: Vec<Vec<u32>>,
    ids: HashMap<Vec<u32>, u32>,
}

impl Vocabulary {
    fn empty(groups: u32, vars: u32, codebook_hash: u64) -> Self {
        Vocabulary { groups, vars, codebook_hash, tuples: Vec::new(), ids: HashMap::new() }
    }

    fn insert(&mut self, tuple: &[u32]) -> u32 {
        if let Some(&id) = self.ids.get(tuple) {
            return id;
        }
        let id = FIRST_TUPLE + self.tuples.len() as u32;
        self.tuples.push(tuple.to_vec());
        self.ids.insert(tuple.to_vec(), id);
        id
    }

    /// Total ids including PAD, MASK and UNK.
    pub fn len(&self) -> usize {
        FIRST_TUPLE as usize + self.tuples.len()
    }

    /// Number of distinct observed tuples.
    pub fn tuple_count(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Id of `tuple`, or UNK if it was never observed.
    pub fn id(&self, tuple: &[u32]) -> u32 {
        self.ids.get(tuple).copied().unwrap_or(UNK)
    }

    pub fn tuple(&self, id: u32) -> Option<&[u32]> {
        id.checked_sub(FIRST_TUPLE).and_then(|i| self.tuples.get(i as usize)).map(Vec::as_slice)
    }

    pub fn check_stream(&self, stream: &TokenStream) -> Result<()> {
        let h = &stream.header;
        if h.groups != self.groups || h.vars != self.vars || h.codebook_hash != self.codebook_hash {
            return Err(Error::Incompatible(format!(
                "stream {:?} (G={} V={} hash {:016x}) does not match vocabulary (G={} V={} hash {:016x})",
                h.source, h.groups, h.vars, h.codebook_hash, self.groups, self.vars, self.codebook_hash
            )));
        }
        Ok(())
    }

    pub fn encode(&self, stream: &TokenStream) -> Result<Vec<u32>> {
        self.check_stream(stream)?;
        Ok(stream.frames().map(|f| self.id(f)).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# vqw2v-vocab version={VOCAB_VERSION}\n# groups={}\n# vars={}\n# codebook_hash={:016x}\n# specials=pad:{PAD},mask:{MASK},unk:{UNK}\n",
            self.groups, self.vars, self.codebook_hash
        );
        for (i, t) in self.tuples.iter().enumerate() {
            let cols: Vec<String> = t.iter().map(u32::to_string).collect();
            out.push_str(&format!("{}\t{}\n", cols.join(","), FIRST_TUPLE as usize + i));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = HashMap::new();
        let mut body = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                for part in rest.split_whitespace() {
                    if let Some((k, v)) = part.split_once('=') {
                        fields.insert(k.to_string(), v.to_string());
                    }
                }
            } else if !line.is_empty() {
                body.push(line);
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Format(format!("vocabulary missing {k}")));
        let version: u32 = get("version")?.parse().map_err(|_| Error::Format("bad vocabulary version".into()))?;
        if version != VOCAB_VERSION {
            return Err(Error::Version { found: version, expected: VOCAB_VERSION });
        }
        let num = |k: &str| -> Result<u32> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
        let hash =
            u64::from_str_radix(get("codebook_hash")?, 16).map_err(|_| Error::Format("bad codebook_hash".into()))?;
        let mut vocab = Vocabulary::empty(num("groups")?, num("vars")?, hash);
        for line in body {
            let (tuple, id) =
                line.split_once('\t').ok_or_else(|| Error::Format(format!("bad vocabulary line {line:?}")))?;
            let tuple: Vec<u32> = tuple
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad index in {line:?}"))))
                .collect::<Result<_>>()?;
            if tuple.len() != vocab.groups as usize || tuple.iter().any(|&i| i >= vocab.vars) {
                return Err(Error::Format(format!("tuple {tuple:?} does not fit G={} V={}", vocab.groups, vocab.vars)));
            }
            let id: u32 = id.trim().parse().map_err(|_| Error::Format(format!("bad id in {line:?}")))?;
            if vocab.insert(&tuple) != id {
                return Err(Error::Format(format!("ids must be dense and ordered; {id} out of place")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// One id per distinct tuple, in first-seen order across `streams`.
pub fn build_vocab(streams: &[TokenStream]) -> Result<Vocabulary> {
    let first = streams.first().ok_or_else(|| Error::Empty("no token streams".into()))?;
    let h = &first.header;
    let mut vocab = Vocabulary::empty(h.groups, h.vars, h.codebook_hash);
    for s in streams {
        vocab.check_stream(s)?;
        for f in s.frames() {
            vocab.insert(f);
        }
    }
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanMaskConfig {
    /// Fraction of positions sampled as span starts.
    pub p: f64,
    /// Span length.
    pub span: usize,
}

impl Default for SpanMaskConfig {
    fn default() -> Self {
        SpanMaskConfig { p: 0.05, span: 10 }
    }
}

impl SpanMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) || self.span == 0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 < p < 1 and span >= 1, got p={} M={}",
                self.p, self.span
            )));
        }
        Ok(())
    }

    pub fn starts_for(&self, len: usize) -> usize {
        (self.p * len as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMask {
    /// Sorted span starts.
    pub starts: Vec<usize>,
    pub masked: Vec<bool>,
}

impl SpanMask {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.masked.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
    }
}

/// `round(p·T)` distinct starts, each masking `[s, min(s + M, T))`.
pub fn sample_span_mask<R: Rng + ?Sized>(len: usize, cfg: &SpanMaskConfig, rng: &mut R) -> Result<SpanMask> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty sequence".into()));
    }
    cfg.validate()?;
    let mut starts = sample(rng, len, cfg.starts_for(len)).into_vec();
    starts.sort_unstable();
    let mut masked = vec![false; len];
    for &s in &starts {
        masked[s..(s + cfg.span).min(len)].iter_mut().for_each(|m| *m = true);
    }
    Ok(SpanMask { starts, masked })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedEncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub ffn: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl MaskedEncoderConfig {
    /// Width 512, FFN 2048, 8 heads, dropout 0.05, 12 layers.
    pub fn small() -> Self {
        MaskedEncoderConfig { layers: 12, dim: 512, ffn: 2048, heads: 8, dropout: 0.05 }
    }

    /// Two layers of width 64.
    pub fn tiny() -> Self {
        MaskedEncoderConfig { layers: 2, dim: 64, ffn: 256, heads: 4, dropout: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.ffn == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument("masked encoder sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("matching size")
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear {
            w: store.add(format!("{name}.weight"), kaiming_uniform(rng, &[dout, din], din)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn apply(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, b.var(self.w), b.var(self.b))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn apply(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gain), b.var(self.bias), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Masked-prediction outcome for one sequence.
#[derive(Debug)]
pub struct MlmLoss {
    pub loss: Var,
    pub correct: usize,
    pub masked: usize,
}

/// Pre-norm transformer encoder over token ids with an output projection
/// onto the vocabulary.
#[derive(Clone, Debug)]
pub struct MaskedLm {
    cfg: MaskedEncoderConfig,
    vocab_size: usize,
    pub store: ParamStore,
    embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    output: Linear,
}

impl MaskedLm {
    pub fn new(cfg: &MaskedEncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= FIRST_TUPLE as usize {
            return Err(Error::InvalidArgument(format!("vocabulary of {vocab_size} has no tuples")));
        }
        let mut rng = substream(seed, Stream::Init, 1, 0);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let embedding = store.add("mlm.embedding", uniform(&mut rng, &[vocab_size, d], 1.0));
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("mlm.{i}");
                Block {
                    attn_norm: Norm::new(&mut store, &format!("{p}.attn_norm"), d),
                    q: Linear::new(&mut store, &format!("{p}.q"), d, d, &mut rng),
                    k: Linear::new(&mut store, &format!("{p}.k"), d, d, &mut rng),
                    v: Linear::new(&mut store, &format!("{p}.v"), d, d, &mut rng),
                    out: Linear::new(&mut store, &format!("{p}.out"), d, d, &mut rng),
                    ffn_norm: Norm::new(&mut store, &format!("{p}.ffn_norm"), d),
                    ffn_in: Linear::new(&mut store, &format!("{p}.ffn_in"), d, cfg.ffn, &mut rng),
                    ffn_out: Linear::new(&mut store, &format!("{p}.ffn_out"), cfg.ffn, d, &mut rng),
                }
            })
            .collect();
        let final_norm = Norm::new(&mut store, "mlm.final_norm", d);
        let output = Linear::new(&mut store, "mlm.output", d, vocab_size, &mut rng);
        Ok(MaskedLm { cfg: cfg.clone(), vocab_size, store, embedding, blocks, final_norm, output })
    }

    pub fn config(&self) -> &MaskedEncoderConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Final hidden states `[T, dim]`.
    pub fn hidden<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        ids: &[u32],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = tape.gather_rows(b.var(self.embedding), &rows)?;
        let pos = tape.constant(sinusoidal_positions(ids.len(), self.cfg.dim));
        let mut x = tape.add(emb, pos)?;
        x = tape.dropout(x, self.cfg.dropout, rng, train)?;
        for blk in &self.blocks {
            let h = blk.attn_norm.apply(tape, b, x)?;
            let q = blk.q.apply(tape, b, h)?;
            let k = blk.k.apply(tape, b, h)?;
            let v = blk.v.apply(tape, b, h)?;
            let a = tape.attention(q, k, v, self.cfg.heads)?;
            let a = blk.out.apply(tape, b, a)?;
            let a = tape.dropout(a, self.cfg.dropout, rng, train)?;
            x = tape.add(x, a)?;
            let h = blk.ffn_norm.apply(tape, b, x)?;
            let f = blk.ffn_in.apply(tape, b, h)?;
            let f = tape.relu(f);
            let f = blk.ffn_out.apply(tape, b, f)?;
            let f = tape.dropout(f, self.cfg.dropout, rng, train)?;
            x = tape.add(x, f)?;
        }
        self.final_norm.apply(tape, b, x)
    }

    /// Cross-entropy at masked positions against the original ids, whose
    /// inputs are replaced by MASK. Returns `None` for an empty mask.
    pub fn masked_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        ids: &[u32],
        mask: &SpanMask,
        train: bool,
        rng: &mut R,
    ) -> Result<Option<MlmLoss>> {
        if mask.masked.len() != ids.len() {
            return Err(Error::shape("masked_loss", format!("{} ids vs mask of {}", ids.len(), mask.masked.len())));
        }
        let positions = mask.positions();
        if positions.is_empty() {
            log::warn!("sequence of {} tokens has no masked positions; skipped", ids.len());
            return Ok(None);
        }
        let input: Vec<u32> = ids.iter().zip(&mask.masked).map(|(&id, &m)| if m { MASK } else { id }).collect();
        let h = self.hidden(tape, b, &input, train, rng)?;
        let picked = tape.gather_rows(h, &positions)?;
        let logits = self.output.apply(tape, b, picked)?;
        let targets: Vec<usize> = positions.iter().map(|&p| ids[p] as usize).collect();
        let lv = tape.value(logits);
        let v = self.vocab_size;
        let correct = targets.iter().enumerate().filter(|&(r, &t)| argmax(&lv.data()[r * v..(r + 1) * v]) == t).count();
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(Some(MlmLoss { loss, correct, masked: positions.len() }))
    }

    /// Per-position vocabulary logits `[T, |vocab|]` in inference mode.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let h = self.hidden(&mut tape, &b, ids, false, &mut NoRng)?;
        let y = self.output.apply(&mut tape, &b, h)?;
        Ok(tape.value(y).clone())
    }

    /// Final-layer states `[dim, T]`, no masking, inference mode.
    pub fn extract_features(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let h = self.hidden(&mut tape, &b, ids, false, &mut NoRng)?;
        tape.value(h).transpose2()
    }
}

/// Token streams over `symbols` codewords (G = 1) where each symbol is
/// followed by a fixed successor; every sequence starts at a random symbol.
pub fn bigram_streams(symbols: u32, sequences: usize, len: usize, seed: u64) -> Result<Vec<TokenStream>> {
    use crate::tokens::TokenHeader;
    let mut rng = substream(seed, Stream::Synth, 1, 0);
    let mut successor: Vec<u32> = (0..symbols).collect();
    // successor map is one cycle through all symbols
    let order: Vec<u32> = sample(&mut rng, symbols as usize, symbols as usize).into_iter().map(|i| i as u32).collect();
    for w in 0..order.len() {
        successor[order[w] as usize] = order[(w + 1) % order.len()];
    }
    (0..sequences)
        .map(|s| {
            let mut stream = TokenStream::new(TokenHeader::new(1, symbols, 0, format!("bigram-{s}")));
            let mut cur = rng.random_range(0..symbols);
            for _ in 0..len {
                stream.push(&[cur])?;
                cur = successor[cur as usize];
            }
            Ok(stream)
        })
        .collect()
}
