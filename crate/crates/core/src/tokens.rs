//! On-disk token streams: per-frame tuples of codeword indices with a
//! provenance header.
//!
//! Text form is TSV with `#`-prefixed `key=value` header lines. Binary form:
//!
//! ```text
//! "VQTK"  version:u32  groups:u32  vars:u32  frame_rate:f64  sample_rate:u32
//! codebook_hash:u64  source_len:u32  source:utf8  frames:u64
//! body: frames × ceil(G·w / 8) bytes, w = ceil(log2 V), indices packed LSB-first
//! crc32 of every preceding byte:u32
//! ```
//!
//! All integers are little-endian. Each frame starts on a byte boundary.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"VQTK";
const TEXT_TAG: &str = "vqw2v-tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenForm {
    Text,
    Binary,
}

impl std::str::FromStr for TokenForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "tsv" => Ok(TokenForm::Text),
            "binary" | "bin" => Ok(TokenForm::Binary),
            other => Err(Error::InvalidArgument(format!("unknown token format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenHeader {
    pub version: u32,
    pub groups: u32,
    pub vars: u32,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub codebook_hash: u64,
    pub source: String,
}

impl TokenHeader {
    pub fn new(groups: u32, vars: u32, codebook_hash: u64, source: impl Into<String>) -> Self {
        TokenHeader {
            version: FORMAT_VERSION,
            groups,
            vars,
            frame_rate: 100.0,
            sample_rate: 16_000,
            codebook_hash,
            source: source.into(),
        }
    }

    /// Same quantizer: groups, variables and codebook hash agree.
    pub fn compatible(&self, other: &TokenHeader) -> bool {
        self.groups == other.groups && self.vars == other.vars && self.codebook_hash == other.codebook_hash
    }

    fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Version { found: self.version, expected: FORMAT_VERSION });
        }
        if self.groups == 0 || self.vars < 2 {
            return Err(Error::Format(format!("invalid header G={} V={}", self.groups, self.vars)));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Format(format!("invalid frame rate {}", self.frame_rate)));
        }
        if self.source.contains('\n') {
            return Err(Error::Format("source id must be a single line".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub header: TokenHeader,
    /// Row-major `T × G` indices.
    indices: Vec<u32>,
}

impl TokenStream {
    pub fn new(header: TokenHeader) -> Self {
        TokenStream { header, indices: Vec::new() }
    }

    pub fn from_indices(header: TokenHeader, indices: Vec<u32>) -> Result<Self> {
        header.validate()?;
        let g = header.groups as usize;
        if !indices.len().is_multiple_of(g) {
            return Err(Error::Format(format!("{} indices do not fill frames of {g}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= header.vars) {
            return Err(Error::Format(format!("index {bad} out of range for V={}", header.vars)));
        }
        Ok(TokenStream { header, indices })
    }

    pub fn push(&mut self, frame: &[u32]) -> Result<()> {
        if frame.len() != self.header.groups as usize {
            return Err(Error::Format(format!("frame of {} indices, expected {}", frame.len(), self.header.groups)));
        }
        if let Some(&bad) = frame.iter().find(|&&i| i >= self.header.vars) {
            return Err(Error::Format(format!("index {bad} out of range for V={}", self.header.vars)));
        }
        self.indices.extend_from_slice(frame);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.header.groups as usize
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        let g = self.header.groups as usize;
        &self.indices[t * g..(t + 1) * g]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[u32]> {
        self.indices.chunks(self.header.groups as usize)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "# {TEXT_TAG} version={}\n# groups={}\n# vars={}\n# frame_rate={}\n# sample_rate={}\n# codebook_hash={:016x}\n# source={}\n",
            h.version, h.groups, h.vars, h.frame_rate, h.sample_rate, h.codebook_hash, h.source
        );
        for frame in self.frames() {
            let cols: Vec<String> = frame.iter().map(u32::to_string).collect();
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let first = lines.next().ok_or_else(|| Error::Format("empty token file".into()))?;
        let version = first
            .strip_prefix("# ")
            .and_then(|l| l.strip_prefix(TEXT_TAG))
            .and_then(|l| l.trim().strip_prefix("version="))
            .ok_or_else(|| Error::Format("missing token file tag".into()))?;
        let version: u32 = parse_field("version", version)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let mut fields = std::collections::HashMap::new();
        while let Some(line) = lines.peek() {
            let Some(rest) = line.strip_prefix('#') else { break };
            let rest = rest.strip_prefix(' ').unwrap_or(rest);
            if let Some((k, v)) = rest.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
            lines.next();
        }
        let get = |k: &str| {
            fields.get(k).map(String::as_str).ok_or_else(|| Error::Format(format!("missing header field {k}")))
        };
        let hash = u64::from_str_radix(get("codebook_hash")?, 16)
            .map_err(|e| Error::Format(format!("bad codebook_hash: {e}")))?;
        let header = TokenHeader {
            version,
            groups: parse_field("groups", get("groups")?)?,
            vars: parse_field("vars", get("vars")?)?,
            frame_rate: parse_field("frame_rate", get("frame_rate")?)?,
            sample_rate: parse_field("sample_rate", get("sample_rate")?)?,
            codebook_hash: hash,
            source: get("source")?.to_string(),
        };
        header.validate()?;
        let mut stream = TokenStream::new(header);
        let mut frame = Vec::with_capacity(stream.header.groups as usize);
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            frame.clear();
            for col in line.split('\t') {
                frame.push(parse_field("index", col)?);
            }
            stream.push(&frame).map_err(|e| Error::Format(format!("body line {}: {e}", n + 1)))?;
        }
        Ok(stream)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + self.len() * frame_bytes(h.groups, h.vars));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.groups.to_le_bytes());
        out.extend_from_slice(&h.vars.to_le_bytes());
        out.extend_from_slice(&h.frame_rate.to_le_bytes());
        out.extend_from_slice(&h.sample_rate.to_le_bytes());
        out.extend_from_slice(&h.codebook_hash.to_le_bytes());
        out.extend_from_slice(&(h.source.len() as u32).to_le_bytes());
        out.extend_from_slice(h.source.as_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let width = bits_per_index(h.vars);
        let nbytes = frame_bytes(h.groups, h.vars);
        for frame in self.frames() {
            let mut buf = vec![0u8; nbytes];
            for (g, &idx) in frame.iter().enumerate() {
                for bit in 0..width {
                    if idx >> bit & 1 == 1 {
                        let pos = g as u32 * width + bit;
                        buf[(pos / 8) as usize] |= 1 << (pos % 8);
                    }
                }
            }
            out.extend_from_slice(&buf);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a binary token stream".into()));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader { buf: payload, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let groups = r.u32()?;
        let vars = r.u32()?;
        let frame_rate = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let sample_rate = r.u32()?;
        let codebook_hash = r.u64()?;
        let source_len = r.u32()? as usize;
        let source = String::from_utf8(r.take(source_len)?.to_vec())
            .map_err(|_| Error::Format("source id is not UTF-8".into()))?;
        let header = TokenHeader { version, groups, vars, frame_rate, sample_rate, codebook_hash, source };
        header.validate()?;
        let frames = r.u64()? as usize;
        let nbytes = frame_bytes(groups, vars);
        if r.remaining() != frames * nbytes {
            return Err(Error::Format(format!("body holds {} bytes, expected {}", r.remaining(), frames * nbytes)));
        }
        let width = bits_per_index(vars);
        let mut stream = TokenStream::new(header);
        stream.indices.reserve(frames * groups as usize);
        let mut frame = vec![0u32; groups as usize];
        for _ in 0..frames {
            let buf = r.take(nbytes)?;
            for (g, slot) in frame.iter_mut().enumerate() {
                let mut idx = 0u32;
                for bit in 0..width {
                    let pos = g as u32 * width + bit;
                    if buf[(pos / 8) as usize] >> (pos % 8) & 1 == 1 {
                        idx |= 1 << bit;
                    }
                }
                *slot = idx;
            }
            stream.push(&frame)?;
        }
        Ok(stream)
    }
}

fn parse_field<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| Error::Format(format!("bad {name} {value:?}: {e}")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated token stream".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// `ceil(log2 V)`, at least one bit.
pub fn bits_per_index(vars: u32) -> u32 {
    (32 - (vars.max(2) - 1).leading_zeros()).max(1)
}

/// Bytes per frame in the binary body.
pub fn frame_bytes(groups: u32, vars: u32) -> usize {
    (groups * bits_per_index(vars)).div_ceil(8) as usize
}

pub fn write_tokens(stream: &TokenStream, path: &Path, form: TokenForm) -> Result<()> {
    match form {
        TokenForm::Text => fs::write(path, stream.to_text())?,
        TokenForm::Binary => fs::write(path, stream.to_binary())?,
    }
    Ok(())
}

/// Reads either form, detected by the binary magic.
pub fn read_tokens(path: &Path) -> Result<TokenStream> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        TokenStream::from_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("token file is neither binary nor UTF-8 text".into()))?;
        TokenStream::from_text(&text)
    }
}
