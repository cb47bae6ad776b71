//! Convolutional feature encoder, causal aggregator and step-specific
//! prediction heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormScope, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, Bindings, ParamId, ParamStore};

pub const SAMPLE_RATE: u32 = 16_000;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: Vec<ConvLayer>,
    /// Unstated for the convnets; 0.1 is a guess.
    pub dropout: f64,
}

fn layers(kernels: &[usize], strides: &[usize], channels: usize) -> Vec<ConvLayer> {
    kernels.iter().zip(strides).map(|(&kernel, &stride)| ConvLayer { kernel, stride, channels }).collect()
}

impl EncoderConfig {
    /// Eight layers, 512 channels, total stride 160.
    pub fn full() -> Self {
        EncoderConfig { layers: layers(&[10, 8, 4, 4, 4, 1, 1, 1], &[5, 4, 2, 2, 2, 1, 1, 1], 512), dropout: 0.1 }
    }

    /// Five layers, 512 channels, total stride 160.
    pub fn small() -> Self {
        EncoderConfig { layers: layers(&[10, 8, 4, 4, 4], &[5, 4, 2, 2, 2], 512), dropout: 0.1 }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.layers.iter_mut().for_each(|l| l.channels = channels);
        self
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Input samples that influence one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    pub fn dim(&self) -> usize {
        self.layers.last().map_or(1, |l| l.channels)
    }

    /// Output frames for `samples` input samples under causal padding.
    pub fn output_len(&self, samples: usize) -> usize {
        self.layers.iter().fold(samples, |n, l| {
            let pad = l.kernel.saturating_sub(l.stride);
            if n + pad < l.kernel {
                0
            } else {
                (n + pad - l.kernel) / l.stride + 1
            }
        })
    }

    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.total_stride() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.channels == 0) {
            return Err(Error::InvalidArgument("encoder layers need positive kernel, stride and channels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub layers: Vec<ConvLayer>,
    pub skip_connections: bool,
    pub dropout: f64,
}

impl AggregatorConfig {
    /// Twelve layers, 512 channels, kernels 2..=13, skip connections.
    pub fn full() -> Self {
        let kernels: Vec<usize> = (2..=13).collect();
        AggregatorConfig { layers: layers(&kernels, &[1; 12], 512), skip_connections: true, dropout: 0.1 }
    }

    /// Seven layers of kernel 3.
    pub fn small() -> Self {
        AggregatorConfig { layers: layers(&[3; 7], &[1; 7], 512), skip_connections: true, dropout: 0.1 }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.layers.iter_mut().for_each(|l| l.channels = channels);
        self
    }

    pub fn dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, |l| l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.iter().any(|l| l.stride != 1 || l.kernel == 0 || l.channels == 0) {
            return Err(Error::InvalidArgument("aggregator layers need stride 1 and positive kernel/channels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// conv → dropout → single-group norm → relu.
#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm_gain: ParamId,
    norm_bias: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        layer: &ConvLayer,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let k = layer.kernel;
        let c = layer.channels;
        ConvBlock {
            weight: store.add(format!("{prefix}.conv.weight"), kaiming_uniform(rng, &[c, cin, k], cin * k)),
            bias: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[c])),
            norm_gain: store.add(format!("{prefix}.norm.gain"), Tensor::full(&[c], 1.0)),
            norm_bias: store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[c])),
            stride: layer.stride,
            pad,
        }
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        dropout: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        let y = tape.conv1d(x, b.var(self.weight), b.var(self.bias), self.stride, self.pad)?;
        let y = tape.dropout(y, dropout, rng, train)?;
        let y = tape.group_norm(y, 1, b.var(self.norm_gain), b.var(self.norm_bias), NORM_EPS, NormScope::Frame)?;
        Ok(tape.relu(y))
    }
}

/// Maps raw 16 kHz audio to dense frames `[d, T]`.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 1;
        let mut blocks = Vec::with_capacity(cfg.layers.len());
        for (i, l) in cfg.layers.iter().enumerate() {
            let pad = l.kernel.saturating_sub(l.stride);
            blocks.push(ConvBlock::new(store, &format!("encoder.{i}"), cin, l, pad, rng));
            cin = l.channels;
        }
        Ok(Encoder { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        wave: &[f64],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let needed = self.cfg.receptive_field();
        if wave.len() < needed {
            return Err(Error::AudioTooShort { len: wave.len(), needed });
        }
        let mut x = tape.constant(Tensor::new(vec![1, wave.len()], wave.to_vec())?);
        for block in &self.blocks {
            x = block.forward(tape, b, x, self.cfg.dropout, rng, train)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Skip {
    projection: Option<(ParamId, ParamId)>,
}

/// Causal context network `[d_in, T] -> [d_out, T]`.
#[derive(Clone, Debug)]
pub struct Aggregator {
    cfg: AggregatorConfig,
    blocks: Vec<(ConvBlock, Option<Skip>)>,
}

impl Aggregator {
    pub fn new<R: Rng + ?Sized>(
        cfg: &AggregatorConfig,
        input_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = input_dim;
        let mut blocks = Vec::with_capacity(cfg.layers.len());
        for (i, l) in cfg.layers.iter().enumerate() {
            let prefix = format!("aggregator.{i}");
            let block = ConvBlock::new(store, &prefix, cin, l, l.kernel - 1, rng);
            let skip = cfg.skip_connections.then(|| Skip {
                projection: (cin != l.channels).then(|| {
                    (
                        store.add(format!("{prefix}.skip.weight"), kaiming_uniform(rng, &[l.channels, cin, 1], cin)),
                        store.add(format!("{prefix}.skip.bias"), Tensor::zeros(&[l.channels])),
                    )
                }),
            });
            blocks.push((block, skip));
            cin = l.channels;
        }
        Ok(Aggregator { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.cfg
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut x = x;
        for (block, skip) in &self.blocks {
            let y = block.forward(tape, b, x, self.cfg.dropout, rng, train)?;
            x = match skip {
                None => y,
                Some(Skip { projection: None }) => tape.add(y, x)?,
                Some(Skip { projection: Some((w, bias)) }) => {
                    let p = tape.conv1d(x, b.var(*w), b.var(*bias), 1, 0)?;
                    tape.add(y, p)?
                }
            };
        }
        Ok(x)
    }
}

/// Step-specific affine maps `h_k(c) = W_k c + b_k`, `k = 1..=K`.
#[derive(Clone, Debug)]
pub struct StepHeads {
    heads: Vec<(ParamId, ParamId)>,
    in_dim: usize,
    out_dim: usize,
}

impl StepHeads {
    pub fn new<R: Rng + ?Sized>(
        steps: usize,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("need at least one prediction step".into()));
        }
        let heads = (1..=steps)
            .map(|k| {
                (
                    store.add(format!("heads.{k}.weight"), kaiming_uniform(rng, &[out_dim, in_dim], in_dim)),
                    store.add(format!("heads.{k}.bias"), Tensor::zeros(&[out_dim])),
                )
            })
            .collect();
        Ok(StepHeads { heads, in_dim, out_dim })
    }

    pub fn steps(&self) -> usize {
        self.heads.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_ids(&self, k: usize) -> Result<(ParamId, ParamId)> {
        self.check_step(k)?;
        Ok(self.heads[k - 1])
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.heads.len() {
            return Err(Error::InvalidArgument(format!("step {k} outside 1..={}", self.heads.len())));
        }
        Ok(())
    }

    /// Applies head `k` to each row of `ct: [N, in_dim]`.
    pub fn apply(&self, tape: &mut Tape, b: &Bindings, k: usize, ct: Var) -> Result<Var> {
        let (w, bias) = self.param_ids(k)?;
        tape.linear(ct, b.var(w), b.var(bias))
    }

    /// `W_k c + b_k` for a single context vector.
    pub fn predict_step(&self, store: &ParamStore, c: &Tensor, k: usize) -> Result<Tensor> {
        let (w, bias) = self.param_ids(k)?;
        let mut tape = Tape::new();
        let cv = tape.constant(c.clone());
        let wv = tape.constant(store.get(w).clone());
        let bv = tape.constant(store.get(bias).clone());
        let y = tape.linear(cv, wv, bv)?;
        Ok(tape.value(y).clone())
    }
}

/// Dense, quantized and context sequences for one clip, all `[d, T]`.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub z: Tensor,
    pub z_hat: Tensor,
    pub c: Tensor,
    pub frame_rate: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn presets_have_total_stride_160_and_30ms_receptive_field() {
        for cfg in [EncoderConfig::full(), EncoderConfig::small()] {
            assert_eq!(cfg.total_stride(), 160);
            assert_eq!(cfg.receptive_field(), 465);
            assert!(cfg.receptive_field() <= 480);
            assert_eq!(cfg.frame_rate(), 100.0);
        }
        assert_eq!(
            AggregatorConfig::full().layers.iter().map(|l| l.kernel).collect::<Vec<_>>(),
            (2..=13).collect::<Vec<_>>()
        );
        assert_eq!(AggregatorConfig::small().layers.len(), 7);
    }

    #[test]
    fn one_second_of_audio_gives_100_frames() {
        assert_eq!(EncoderConfig::full().output_len(16_000), 100);
        assert_eq!(EncoderConfig::small().output_len(16_000), 100);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::small().with_channels(8);
        let enc = Encoder::new(&cfg, &mut store, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let wave: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        let z = enc.forward(&mut tape, &b, &wave, false, &mut rng()).unwrap();
        assert_eq!(tape.shape(z), &[8, 100]);
    }

    #[test]
    fn zero_waveform_gives_finite_output() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&EncoderConfig::small().with_channels(4), &mut store, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let z = enc.forward(&mut tape, &b, &[0.0; 1600], false, &mut rng()).unwrap();
        assert!(tape.value(z).is_finite());
    }

    #[test]
    fn short_audio_is_rejected() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&EncoderConfig::small().with_channels(4), &mut store, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let err = enc.forward(&mut tape, &b, &[0.0; 464], false, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::AudioTooShort { len: 464, needed: 465 }));
    }

    #[test]
    fn encoder_output_is_prefix_stable() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&EncoderConfig::small().with_channels(6), &mut store, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let wave: Vec<f64> = (0..3200).map(|_| r.random_range(-0.5..0.5)).collect();
        let mut doubled = wave.clone();
        doubled.extend((0..3200).map(|_| r.random_range(-0.5..0.5)));
        let run = |w: &[f64]| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let z = enc.forward(&mut tape, &b, w, false, &mut rng()).unwrap();
            tape.value(z).clone()
        };
        let (a, b) = (run(&wave), run(&doubled));
        let (ta, tb) = (a.shape()[1], b.shape()[1]);
        assert_eq!((ta, tb), (20, 40));
        for ch in 0..6 {
            for t in 0..ta {
                assert_eq!(a.data()[ch * ta + t].to_bits(), b.data()[ch * tb + t].to_bits());
            }
        }
    }

    #[test]
    fn aggregator_is_causal_and_length_preserving() {
        for cfg in [AggregatorConfig::small().with_channels(5), AggregatorConfig::full().with_channels(5)] {
            let mut store = ParamStore::new();
            let agg = Aggregator::new(&cfg, 4, &mut store, &mut rng()).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let base: Vec<f64> = (0..4 * 16).map(|_| r.random_range(-1.0..1.0)).collect();
            let run = |data: &[f64]| {
                let mut tape = Tape::new();
                let b = store.bind(&mut tape);
                let x = tape.constant(Tensor::new(vec![4, 16], data.to_vec()).unwrap());
                let c = agg.forward(&mut tape, &b, x, false, &mut rng()).unwrap();
                tape.value(c).clone()
            };
            let c0 = run(&base);
            assert_eq!(c0.shape(), &[5, 16]);
            for t0 in [0, 5, 15] {
                let mut pert = base.clone();
                for ch in 0..4 {
                    pert[ch * 16 + t0] += 0.7;
                }
                let c1 = run(&pert);
                for ch in 0..5 {
                    for t in 0..16 {
                        let (a, b) = (c0.data()[ch * 16 + t], c1.data()[ch * 16 + t]);
                        if t < t0 {
                            assert_eq!(a.to_bits(), b.to_bits(), "leak at t={t} from t0={t0}");
                        }
                    }
                }
                let changed = (0..5).any(|ch| c0.data()[ch * 16 + t0] != c1.data()[ch * 16 + t0]);
                assert!(changed, "perturbation at {t0} had no effect");
            }
        }
    }

    #[test]
    fn zeroed_aggregator_with_skips_is_identity() {
        let cfg = AggregatorConfig::small().with_channels(3);
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&cfg, 3, &mut store, &mut rng()).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("conv.weight") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let input = Tensor::new(vec![3, 6], (0..18).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(input.clone());
        let c = agg.forward(&mut tape, &b, x, false, &mut rng()).unwrap();
        assert_eq!(tape.value(c), &input);
    }

    #[test]
    fn heads_are_affine_and_independent() {
        let mut store = ParamStore::new();
        let heads = StepHeads::new(3, 2, 2, &mut store, &mut rng()).unwrap();
        let (w1, b1) = heads.param_ids(1).unwrap();
        *store.get_mut(w1) = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        *store.get_mut(b1) = Tensor::zeros(&[2]);
        let c = Tensor::vector(vec![0.25, -2.0]);
        assert_eq!(heads.predict_step(&store, &c, 1).unwrap(), c);

        let before = heads.predict_step(&store, &c, 2).unwrap();
        store.get_mut(w1).data_mut()[0] = 9.0;
        assert_eq!(heads.predict_step(&store, &c, 2).unwrap(), before);
        assert!(heads.predict_step(&store, &c, 0).is_err());
        assert!(heads.predict_step(&store, &c, 4).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let inputs = [
                crate::params::uniform(&mut r, &[4], 1.0),
                crate::params::uniform(&mut r, &[3, 4], 1.0),
                crate::params::uniform(&mut r, &[3], 1.0),
            ];
            let report = crate::autodiff::gradcheck::check(&inputs, |tp, v| {
                let y = tp.linear(v[0], v[1], v[2])?;
                let s = tp.mul(y, y)?;
                Ok(tp.sum(s))
            })
            .unwrap();
            assert!(report.max() < 1e-5);
        }
    }
}
