//! Synthetic text-to-feature task with known ground truth.
//!
//! Each token owns a spectral prototype; an utterance renders every token as
//! `frames_per_token` noisy copies of its prototype. The last feature
//! channel carries a pitch code, `2 ln(f0 / 100)`, so F0 can be read back
//! from any feature sequence, including refined hypotheses. Token `k` has a
//! base frequency of `100 + 20k` Hz modulated by a slow sinusoidal contour.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{F0Track, FeatureSequence, TokenSequence, Utterance};
use crate::error::{invalid, Result};
use crate::rng::{seeded, Rng};

/// Plausible F0 range in Hz; decoded pitch is clamped into it.
pub const PITCH_BAND: (f64, f64) = (50.0, 500.0);
const VOICING_THRESHOLD: f64 = -0.5;
const CONTOUR_DEPTH: f64 = 0.05;
const CONTOUR_PERIOD: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-cell observation noise.
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Seeds the prototypes; utterance sampling uses the caller's RNG.
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            frames_per_token: 5,
            feature_dim: 16,
            noise: 0.05,
            min_tokens: 4,
            max_tokens: 10,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if self.frames_per_token < 1 {
            return Err(invalid("frames_per_token must be at least 1"));
        }
        if self.feature_dim < 2 {
            return Err(invalid(
                "feature_dim must be at least 2 (spectral bins plus the pitch channel)",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise must be finite and non-negative"));
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return Err(invalid("need 1 <= min_tokens <= max_tokens"));
        }
        Ok(())
    }
}

pub fn pitch_code(f0: f64) -> f64 {
    2.0 * (f0 / 100.0).ln()
}

/// Reads the F0 track back out of the pitch channel (the last column).
pub fn pitch_track(y: &FeatureSequence) -> F0Track {
    let c = y.dim() - 1;
    F0Track(
        (0..y.frames())
            .map(|t| {
                let code = y.get(t, c);
                if code < VOICING_THRESHOLD {
                    0.0
                } else {
                    (100.0 * (code / 2.0).exp()).clamp(PITCH_BAND.0, PITCH_BAND.1)
                }
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    /// `vocab x feature_dim`; the last column holds each token's base pitch code.
    prototypes: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(spec.seed);
        let f = spec.feature_dim;
        let mut prototypes = vec![0.0; spec.vocab_size * f];
        for k in 0..spec.vocab_size {
            for j in 0..f - 1 {
                prototypes[k * f + j] = rng.sample(StandardNormal);
            }
            prototypes[k * f + f - 1] = pitch_code(Self::base_f0(k));
        }
        Ok(Self { spec, prototypes })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn base_f0(token: usize) -> f64 {
        100.0 + 20.0 * token as f64
    }

    pub fn prototype(&self, token: usize) -> &[f64] {
        let f = self.spec.feature_dim;
        &self.prototypes[token * f..(token + 1) * f]
    }

    fn f0_at(token: usize, frame: usize) -> f64 {
        Self::base_f0(token) * (1.0 + CONTOUR_DEPTH * (2.0 * PI * frame as f64 / CONTOUR_PERIOD).sin())
    }

    /// Noise-free rendering of a token sequence: the mean of the generative rule.
    pub fn expected_features(&self, text: &TokenSequence) -> FeatureSequence {
        let (d, f) = (self.spec.frames_per_token, self.spec.feature_dim);
        let mut y = FeatureSequence::filled(text.len() * d, f, 0.0);
        for (i, &tok) in text.ids().iter().enumerate() {
            for j in 0..d {
                let t = i * d + j;
                let row = y.row_mut(t);
                row.copy_from_slice(self.prototype(tok as usize));
                row[f - 1] = pitch_code(Self::f0_at(tok as usize, t));
            }
        }
        y
    }

    pub fn f0_track(&self, text: &TokenSequence) -> F0Track {
        let d = self.spec.frames_per_token;
        F0Track(
            (0..text.len() * d)
                .map(|t| Self::f0_at(text.ids()[t / d] as usize, t))
                .collect(),
        )
    }

    pub fn render(&self, text: &TokenSequence, rng: &mut Rng) -> FeatureSequence {
        let mut y = self.expected_features(text);
        if self.spec.noise > 0.0 {
            for v in y.values_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.spec.noise * z;
            }
        }
        y
    }

    pub fn random_text(&self, rng: &mut Rng) -> TokenSequence {
        let len = rng.random_range(self.spec.min_tokens..=self.spec.max_tokens);
        let ids = (0..len)
            .map(|_| rng.random_range(0..self.spec.vocab_size as u32))
            .collect();
        TokenSequence::new(ids, self.spec.vocab_size).expect("ids drawn in range")
    }

    pub fn generate(&self, count: usize, rng: &mut Rng) -> Result<Vec<Utterance>> {
        if count == 0 {
            return Err(invalid("count must be at least 1"));
        }
        Ok((0..count)
            .map(|i| {
                let text = self.random_text(rng);
                let features = self.render(&text, rng);
                let f0 = Some(self.f0_track(&text));
                Utterance {
                    id: format!("utt{i:05}"),
                    text,
                    features,
                    f0,
                }
            })
            .collect())
    }

    /// Negative log-likelihood of `y` under the generative rule for `text`,
    /// up to a constant; infinite when the lengths cannot match.
    pub fn oracle_energy(&self, text: &TokenSequence, y: &FeatureSequence) -> f64 {
        let mean = self.expected_features(text);
        if mean.frames() != y.frames() || mean.dim() != y.dim() {
            return f64::INFINITY;
        }
        let var = self.spec.noise.max(1e-12).powi(2);
        mean.values()
            .iter()
            .zip(y.values())
            .map(|(m, v)| (v - m) * (v - m))
            .sum::<f64>()
            / (2.0 * var)
    }
}

/// Edge-clamped moving average along time (odd `width`) followed by additive
/// Gaussian noise: an over-smoothed stand-in for a TTS model's hypothesis.
pub fn degrade_hypothesis(y: &FeatureSequence, width: usize, noise: f64, rng: &mut Rng) -> Result<FeatureSequence> {
    if width == 0 || width.is_multiple_of(2) {
        return Err(invalid(format!("smoothing width must be odd and >= 1, got {width}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid("noise scale must be finite and non-negative"));
    }
    let (frames, dim) = (y.frames(), y.dim());
    let half = (width / 2) as isize;
    let mut out = FeatureSequence::filled(frames, dim, 0.0);
    for t in 0..frames {
        let acc = out.row_mut(t);
        for off in -half..=half {
            let src = (t as isize + off).clamp(0, frames as isize - 1) as usize;
            for (a, v) in acc.iter_mut().zip(y.row(src)) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= width as f64;
        }
    }
    if width == 1 {
        out = y.clone();
    }
    if noise > 0.0 {
        for v in out.values_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise * z;
        }
    }
    Ok(out)
}

/// Per-channel mean and variance plus the global minimum of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub min: f64,
}

impl FeatureStats {
    pub fn from_corpus<'a>(features: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        let mut min = f64::INFINITY;
        for y in features {
            if sum.is_empty() {
                sum = vec![0.0; y.dim()];
                sq = vec![0.0; y.dim()];
            } else if y.dim() != sum.len() {
                return Err(invalid("feature dimensions differ across the corpus"));
            }
            for row in y.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                    min = min.min(*v);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(invalid("empty corpus"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let variance = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0))
            .collect();
        Ok(Self { mean, variance, min })
    }
}
