//! The stage-one model: encoder, quantizer, aggregator and step heads wired
//! into one trainable unit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::convnet::{Aggregator, AggregatorConfig, Encoder, EncoderConfig, FrameSequence, StepHeads};
use crate::error::Result;
use crate::objective::{contrastive_loss, sample_negatives, total_loss, LossConfig, TargetSource};
use crate::params::{Bindings, ParamStore};
use crate::quantizer::{Backend, Mode, Placement, QuantizeOutcome, Quantizer, QuantizerConfig};
use crate::rng::{substream, NoRng, Stream};
use crate::tokens::{TokenHeader, TokenStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossConfig,
}

impl VqConfig {
    /// Full-size convnets, G=2, V=320.
    pub fn full(backend: Backend) -> Self {
        VqConfig {
            encoder: EncoderConfig::full(),
            aggregator: AggregatorConfig::full(),
            quantizer: QuantizerConfig { backend, ..QuantizerConfig::gumbel(2, 320) },
            loss: LossConfig::default(),
        }
    }

    /// Shallower convnets, G=2, V=320.
    pub fn small(backend: Backend) -> Self {
        VqConfig { encoder: EncoderConfig::small(), aggregator: AggregatorConfig::small(), ..Self::full(backend) }
    }

    /// Sets every convnet layer to `channels` wide.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.encoder = self.encoder.with_channels(channels);
        self.aggregator = self.aggregator.with_channels(channels);
        self
    }

    pub fn with_codebook(mut self, groups: usize, vars: usize) -> Self {
        self.quantizer.groups = groups;
        self.quantizer.vars = vars;
        self
    }
}

/// Where the per-example randomness comes from: one substream per purpose,
/// addressed by `(seed, step, index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawKey {
    pub seed: u64,
    pub step: u64,
    pub index: u64,
}

/// Per-example forward results for one training step.
#[derive(Debug)]
pub struct ClipLoss {
    pub loss: Var,
    pub contrastive: Var,
    pub frames: usize,
    /// Row-major `T × G` selected indices.
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct VqModel {
    cfg: VqConfig,
    pub store: ParamStore,
    encoder: Encoder,
    aggregator: Aggregator,
    quantizer: Quantizer,
    heads: StepHeads,
}

impl VqModel {
    pub fn new(cfg: &VqConfig, seed: u64) -> Result<Self> {
        cfg.loss.validate()?;
        let mut rng = substream(seed, Stream::Init, 0, 0);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&cfg.encoder, &mut store, &mut rng)?;
        let enc_dim = cfg.encoder.dim();
        let agg_dim = cfg.aggregator.dim(enc_dim);
        let q_dim = match cfg.quantizer.placement {
            Placement::AfterEncoder => enc_dim,
            Placement::AfterAggregator => agg_dim,
        };
        let quantizer = Quantizer::new(&cfg.quantizer, q_dim, &mut store, &mut rng)?;
        let aggregator = Aggregator::new(&cfg.aggregator, enc_dim, &mut store, &mut rng)?;
        let heads = StepHeads::new(cfg.loss.steps, agg_dim, enc_dim, &mut store, &mut rng)?;
        Ok(VqModel { cfg: cfg.clone(), store, encoder, aggregator, quantizer, heads })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn heads(&self) -> &StepHeads {
        &self.heads
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn codebook_hash(&self) -> u64 {
        self.quantizer.codebook_hash(&self.store)
    }

    /// Builds the training loss for one clip on `tape`.
    pub fn clip_loss(&self, tape: &mut Tape, b: &Bindings, wave: &[f64], tau: f64, key: DrawKey) -> Result<ClipLoss> {
        let mut dropout = substream(key.seed, Stream::Dropout, key.step, key.index);
        let mut gumbel = substream(key.seed, Stream::Gumbel, key.step, key.index);
        let mut negatives = substream(key.seed, Stream::Negatives, key.step, key.index);
        let mode = Mode::Train { tau };
        let z = self.encoder.forward(tape, b, wave, true, &mut dropout)?;
        let (c, targets, q) = match self.cfg.quantizer.placement {
            Placement::AfterEncoder => {
                let q = self.quantizer.quantize(tape, b, z, mode, &mut gumbel)?;
                let c = self.aggregator.forward(tape, b, q.z_hat, true, &mut dropout)?;
                let targets = match self.cfg.loss.targets {
                    TargetSource::Quantized => q.z_hat,
                    TargetSource::Dense => z,
                };
                (c, targets, q)
            }
            Placement::AfterAggregator => {
                let c = self.aggregator.forward(tape, b, z, true, &mut dropout)?;
                let q = self.quantizer.quantize(tape, b, c, mode, &mut gumbel)?;
                (q.z_hat, z, q)
            }
        };
        let frames = tape.value(z).shape()[1];
        let neg = sample_negatives(frames, &self.cfg.loss, &mut negatives)?;
        let contrastive = contrastive_loss(tape, b, c, targets, &self.heads, &neg, &self.cfg.loss)?;
        let loss = total_loss(tape, contrastive, self.cfg.quantizer.backend, q.aux.as_ref())?;
        Ok(ClipLoss { loss, contrastive, frames, indices: q.indices })
    }

    /// Inference-mode dense, quantized and context sequences.
    pub fn frames(&self, wave: &[f64]) -> Result<(FrameSequence, QuantizeOutcome)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let mut unused = NoRng;
        let z = self.encoder.forward(&mut tape, &b, wave, false, &mut unused)?;
        let (zq, c, q) = match self.cfg.quantizer.placement {
            Placement::AfterEncoder => {
                let q = self.quantizer.quantize(&mut tape, &b, z, Mode::Infer, &mut unused)?;
                let c = self.aggregator.forward(&mut tape, &b, q.z_hat, false, &mut unused)?;
                (q.z_hat, c, q)
            }
            Placement::AfterAggregator => {
                let c = self.aggregator.forward(&mut tape, &b, z, false, &mut unused)?;
                let q = self.quantizer.quantize(&mut tape, &b, c, Mode::Infer, &mut unused)?;
                (q.z_hat, q.z_hat, q)
            }
        };
        let seq = FrameSequence {
            z: tape.value(z).clone(),
            z_hat: tape.value(zq).clone(),
            c: tape.value(c).clone(),
            frame_rate: self.cfg.encoder.frame_rate(),
        };
        let outcome = QuantizeOutcome {
            z_hat: seq.z_hat.clone(),
            indices: q.indices,
            groups: self.cfg.quantizer.groups,
            probs: None,
            aux: q.aux.map(|a| (tape.value(a.codebook).item(), tape.value(a.commitment).item())),
        };
        Ok((seq, outcome))
    }

    /// Row-major `T × G` inference-mode codeword indices.
    pub fn tokenize(&self, wave: &[f64]) -> Result<Vec<u32>> {
        Ok(self.frames(wave)?.1.indices)
    }

    /// Tokenizes `wave` into a stream whose header describes this quantizer.
    pub fn token_stream(&self, wave: &[f64], source: impl Into<String>) -> Result<TokenStream> {
        let q = &self.cfg.quantizer;
        let mut header = TokenHeader::new(q.groups as u32, q.vars as u32, self.codebook_hash(), source);
        header.frame_rate = self.cfg.encoder.frame_rate();
        TokenStream::from_indices(header, self.tokenize(wave)?)
    }
}
