//! 16 kHz mono audio: WAV input/output and deterministic synthetic clips.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Peak amplitude of every synthetic clip.
pub const SYNTH_PEAK: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::InvalidArgument(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Waveform { sample_rate: SAMPLE_RATE, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes 16-bit PCM mono 16 kHz WAV, scaling by `1 / 32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!("expected mono, got {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Wav(format!("expected {SAMPLE_RATE} Hz, got {} Hz", spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "expected 16-bit integer PCM, got {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?;
    Ok(Waveform { sample_rate: SAMPLE_RATE, samples })
}

/// Encodes as 16-bit PCM mono; samples are scaled by 32768 and clamped.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| Error::Wav(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Wav(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Sum of random-frequency sines with random phases.
    SineMixture,
    /// Piecewise-stationary resonant noise with random segment boundaries.
    FilteredNoiseSegments,
}

impl std::str::FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine-mixture" => Ok(Generator::SineMixture),
            "filtered-noise-segments" | "filtered-noise" => Ok(Generator::FilteredNoiseSegments),
            other => Err(Error::InvalidArgument(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clips: usize,
    pub seconds: f64,
    pub seed: u64,
    pub generator: Generator,
    /// Sines per clip for the sine mixture.
    pub components: usize,
}

impl SynthSpec {
    pub fn new(clips: usize, seconds: f64, seed: u64, generator: Generator) -> Self {
        SynthSpec { clips, seconds, seed, generator, components: 3 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.seconds > 0.0) || self.components == 0 {
            return Err(Error::InvalidArgument("synth clips need positive length and at least one component".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub wave: Waveform,
    /// Sine frequencies in Hz (sine mixture only).
    pub frequencies: Vec<f64>,
    /// Sample offsets where a new noise segment starts (filtered noise only).
    pub boundaries: Vec<usize>,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let n = (spec.seconds * SAMPLE_RATE as f64).round() as usize;
    (0..spec.clips)
        .map(|i| {
            let mut rng = substream(spec.seed, Stream::Synth, 0, i as u64);
            match spec.generator {
                Generator::SineMixture => sine_mixture(&mut rng, n, spec.components),
                Generator::FilteredNoiseSegments => filtered_noise(&mut rng, n),
            }
        })
        .collect()
}

fn normalize(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SYNTH_PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

fn sine_mixture<R: Rng + ?Sized>(rng: &mut R, n: usize, components: usize) -> Result<SynthClip> {
    let freqs: Vec<f64> = (0..components).map(|_| rng.random_range(80.0..4000.0)).collect();
    let phases: Vec<f64> = (0..components).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let sr = SAMPLE_RATE as f64;
    let x = (0..n)
        .map(|t| freqs.iter().zip(&phases).map(|(f, p)| (2.0 * PI * f * t as f64 / sr + p).sin()).sum())
        .collect();
    Ok(SynthClip { wave: Waveform::new(normalize(x))?, frequencies: freqs, boundaries: Vec::new() })
}

fn filtered_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<SynthClip> {
    let wanted = rng.random_range(5..=20).min(n.saturating_sub(1));
    let mut boundaries: Vec<usize> = sample(rng, n.saturating_sub(1), wanted).into_iter().map(|b| b + 1).collect();
    boundaries.sort_unstable();
    let sr = SAMPLE_RATE as f64;
    let mut x = Vec::with_capacity(n);
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut next = 0;
    let (mut a1, mut a2, mut gain) = (0.0, 0.0, 0.0);
    for t in 0..n {
        if t == 0 || boundaries.get(next) == Some(&t) {
            if t != 0 {
                next += 1;
            }
            let centre = rng.random_range(100.0..4000.0);
            let radius: f64 = rng.random_range(0.85..0.99);
            a1 = 2.0 * radius * (2.0 * PI * centre / sr).cos();
            a2 = -radius * radius;
            gain = rng.random_range(0.3..1.0) * (1.0 - radius);
        }
        let e: f64 = rng.random_range(-1.0..1.0);
        let y = gain * e + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        x.push(y);
    }
    Ok(SynthClip { wave: Waveform::new(normalize(x))?, frequencies: Vec::new(), boundaries })
}
