//! Feature, F0 and token file formats.
//!
//! Feature file: `"EBMF"`, u32 version, u32 frames, u32 dim, then
//! `frames * dim` f64 values row-major. F0 file: `"EBF0"`, u32 frames, then
//! one f64 per frame. All integers and floats little-endian. Token files are
//! UTF-8 with whitespace-separated ids.

use std::fs;
use std::path::Path;

use super::{F0Track, FeatureSequence, TokenSequence};
use crate::error::{Error, FormatError, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"EBMF";
pub const F0_MAGIC: [u8; 4] = *b"EBF0";
pub const FEATURE_FORMAT_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, FormatError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| FormatError::DimensionOverflow(format!("{n} values")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::DimensionOverflow(format!("{what} = {v}")))
}

pub fn encode_features(y: &FeatureSequence) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(16 + 8 * y.values().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_FORMAT_VERSION);
    put_u32(&mut out, dim_u32(y.frames(), "frames")?);
    put_u32(&mut out, dim_u32(y.dim(), "dim")?);
    put_f64s(&mut out, y.values());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FEATURE_FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: FEATURE_FORMAT_VERSION,
        }
        .into());
    }
    let frames = r.u32("frame count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    if frames == 0 || dim == 0 {
        return Err(FormatError::Invalid(format!("empty feature matrix {frames}x{dim}")).into());
    }
    let n = frames
        .checked_mul(dim)
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{frames}x{dim}")))?;
    let values = r.f64s(n, "feature values")?;
    if r.remaining() != 0 {
        return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())).into());
    }
    FeatureSequence::new(frames, dim, values)
}

pub fn write_features(path: &Path, y: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(y)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    decode_features(&fs::read(path)?)
}

pub fn write_f0(path: &Path, f0: &F0Track) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 8 * f0.len());
    out.extend_from_slice(&F0_MAGIC);
    put_u32(&mut out, dim_u32(f0.len(), "frames")?);
    put_f64s(&mut out, &f0.0);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_f0(path: &Path) -> Result<F0Track> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(F0_MAGIC)?;
    let n = r.u32("frame count")? as usize;
    let values = r.f64s(n, "f0 values")?;
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FormatError::Invalid("f0 values must be finite and non-negative".into()).into());
    }
    Ok(F0Track(values))
}

pub fn write_tokens(path: &Path, x: &TokenSequence) -> Result<()> {
    let text: Vec<String> = x.ids().iter().map(u32::to_string).collect();
    fs::write(path, text.join(" ") + "\n")?;
    Ok(())
}

pub fn read_tokens(path: &Path, vocab: usize) -> Result<TokenSequence> {
    let text = fs::read_to_string(path)?;
    let ids = text
        .split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::Format(FormatError::Invalid(format!("bad token `{t}` in {}", path.display()))))
        })
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new(ids, vocab)
}
