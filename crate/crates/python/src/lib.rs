//! Python bindings over the `vqw2v` library: bitrate math, synthetic audio,
//! tokenization with a trained checkpoint, token files and span masks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqw2v::audio::{synth_dataset, Generator, SynthSpec};
use vqw2v::mlm::{sample_span_mask, SpanMaskConfig};
use vqw2v::quantizer::codeword_usage;
use vqw2v::tokens::{read_tokens, write_tokens, TokenForm, TokenHeader, TokenStream};
use vqw2v::train::{load_vq_model, Checkpoint, MlmTrainer};
use vqw2v::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.one_line();
    match e {
        Error::Io(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

#[pyfunction]
#[pyo3(signature = (groups, vars, rate = 100.0))]
fn eval_bitrate(groups: usize, vars: usize, rate: f64) -> PyResult<f64> {
    vqw2v::bitrate::eval_bitrate(groups, vars, rate).map_err(py_err)
}

#[pyfunction]
fn possible_codewords(groups: usize, vars: usize) -> u128 {
    vqw2v::quantizer::possible_codewords(groups, vars)
}

/// Synthetic 16 kHz clips as lists of floats.
#[pyfunction]
#[pyo3(signature = (clips, seconds, seed, generator = "filtered-noise-segments"))]
fn synth(clips: usize, seconds: f64, seed: u64, generator: &str) -> PyResult<Vec<Vec<f64>>> {
    let generator: Generator = generator.parse().map_err(py_err)?;
    let data = synth_dataset(&SynthSpec::new(clips, seconds, seed, generator)).map_err(py_err)?;
    Ok(data.into_iter().map(|c| c.wave.samples).collect())
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<Vec<f64>> {
    Ok(vqw2v::audio::read_wav(&path).map_err(py_err)?.samples)
}

/// Inference-mode codeword indices, one G-tuple per frame.
#[pyfunction]
fn tokenize(checkpoint: PathBuf, samples: Vec<f64>) -> PyResult<Vec<Vec<u32>>> {
    let model = load_vq_model(&Checkpoint::load(&checkpoint).map_err(py_err)?).map_err(py_err)?;
    let stream = model.token_stream(&samples, "python").map_err(py_err)?;
    Ok(stream.frames().map(<[u32]>::to_vec).collect())
}

/// Header fields plus `frames` as a list of tuples.
#[pyfunction]
fn load_tokens<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let s = read_tokens(&path).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("groups", s.header.groups)?;
    d.set_item("vars", s.header.vars)?;
    d.set_item("frame_rate", s.header.frame_rate)?;
    d.set_item("codebook_hash", s.header.codebook_hash)?;
    d.set_item("source", &s.header.source)?;
    d.set_item("frames", s.frames().map(<[u32]>::to_vec).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (path, frames, vars, codebook_hash = 0, source = "python", binary = true))]
fn save_tokens(
    path: PathBuf,
    frames: Vec<Vec<u32>>,
    vars: u32,
    codebook_hash: u64,
    source: &str,
    binary: bool,
) -> PyResult<()> {
    let groups = frames.first().map_or(1, Vec::len) as u32;
    let mut s = TokenStream::new(TokenHeader::new(groups, vars, codebook_hash, source));
    for f in &frames {
        s.push(f).map_err(py_err)?;
    }
    let form = if binary { TokenForm::Binary } else { TokenForm::Text };
    write_tokens(&s, &path, form).map_err(py_err)
}

#[pyfunction]
fn codebook_stats<'py>(py: Python<'py>, paths: Vec<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let streams = paths.iter().map(|p| read_tokens(p)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
    let u = codeword_usage(&streams).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("unique", u.unique)?;
    d.set_item("tokens", u.tokens)?;
    d.set_item("possible", u.possible)?;
    d.set_item("fraction", u.fraction)?;
    d.set_item("fraction_of_possible", u.fraction_of_possible)?;
    Ok(d)
}

/// Boolean mask over `length` positions.
#[pyfunction]
#[pyo3(signature = (length, seed, p = 0.05, span = 10))]
fn span_mask(length: usize, seed: u64, p: f64, span: usize) -> PyResult<Vec<bool>> {
    let m =
        sample_span_mask(length, &SpanMaskConfig { p, span }, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
    Ok(m.masked)
}

/// Final-layer features of a token file, `T` rows of `dim` floats.
#[pyfunction]
fn extract_features(checkpoint: PathBuf, tokens: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let t = MlmTrainer::from_checkpoint(&Checkpoint::load(&checkpoint).map_err(py_err)?).map_err(py_err)?;
    let ids = t.vocab.encode(&read_tokens(&tokens).map_err(py_err)?).map_err(py_err)?;
    let f = t.model.extract_features(&ids).map_err(py_err)?;
    let (dim, len) = f.dims2().map_err(py_err)?;
    Ok((0..len).map(|ti| (0..dim).map(|r| f.data()[r * len + ti]).collect()).collect())
}

#[pymodule]
fn vqw2v_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(eval_bitrate, m)?)?;
    m.add_function(wrap_pyfunction!(possible_codewords, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(load_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(save_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(codebook_stats, m)?)?;
    m.add_function(wrap_pyfunction!(span_mask, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    Ok(())
}
