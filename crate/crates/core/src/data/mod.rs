//! Token and feature sequences, the synthetic text-to-feature task, and the
//! on-disk formats used to move datasets between commands.

pub(crate) mod io;
mod manifest;
mod synthetic;

pub use io::{
    decode_features, encode_features, read_f0, read_features, read_tokens, write_f0, write_features, write_tokens,
    F0_MAGIC, FEATURE_FORMAT_VERSION, FEATURE_MAGIC,
};
pub use manifest::{
    load_split, split_dataset, write_split, DatasetManifest, ManifestEntry, SplitFractions, SplitIndices,
    MANIFEST_VERSION,
};
pub use synthetic::{
    degrade_hypothesis, pitch_code, pitch_track, FeatureStats, SyntheticTask, SyntheticTaskSpec, PITCH_BAND,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Conditioning text as token ids in `[0, vocab)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid("token sequence must not be empty"));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A `frames x dim` matrix of real-valued feature frames, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f64>,
}

impl std::fmt::Debug for FeatureSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FeatureSequence({}x{})", self.frames, self.dim)
    }
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(invalid(format!(
                "feature sequence must be non-empty, got {frames}x{dim}"
            )));
        }
        if values.len() != frames * dim {
            return Err(invalid(format!(
                "{frames}x{dim} features need {} values, got {}",
                frames * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("feature values must be finite".into()));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn filled(frames: usize, dim: usize, value: f64) -> Self {
        assert!(frames > 0 && dim > 0);
        Self {
            frames,
            dim,
            values: vec![value; frames * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("rows have different lengths"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t
            .dims2()
            .ok_or_else(|| invalid(format!("expected a matrix, got {:?}", t.shape())))?;
        Self::new(r, c, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames, self.dim, self.values.clone()).expect("valid dims")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.dim + f]
    }

    pub fn set(&mut self, t: usize, f: usize, v: f64) {
        self.values[t * self.dim + f] = v;
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Frobenius distance to another sequence of the same shape.
    pub fn distance(&self, other: &FeatureSequence) -> f64 {
        assert_eq!((self.frames, self.dim), (other.frames, other.dim));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-frame fundamental frequency in Hz; 0 marks an unvoiced frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Track(pub Vec<f64>);

impl F0Track {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_voiced(&self, t: usize) -> bool {
        self.0[t] > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: TokenSequence,
    pub features: FeatureSequence,
    pub f0: Option<F0Track>,
}

/// Smallest feature value over a corpus, the default mask fill.
pub fn corpus_min<'a>(features: impl IntoIterator<Item = &'a FeatureSequence>) -> f64 {
    features
        .into_iter()
        .map(FeatureSequence::min_value)
        .fold(f64::INFINITY, f64::min)
}
