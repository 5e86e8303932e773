//! Negative samples for NCE: a hypothesis source followed by masking and
//! warping perturbations.
//!
//! Counts for time and frequency masks use round-half-up, `floor(p * n + 0.5)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{degrade_hypothesis, FeatureSequence};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn check_fraction(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("mask fraction must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Replaces one contiguous block of `round(p * T)` frames with `fill`.
pub fn time_mask(y: &FeatureSequence, p: f64, fill: f64, rng: &mut Rng) -> Result<FeatureSequence> {
    check_fraction(p)?;
    let count = round_half_up(p * y.frames() as f64).min(y.frames());
    let mut out = y.clone();
    if count == 0 {
        return Ok(out);
    }
    let start = rng.random_range(0..=y.frames() - count);
    for t in start..start + count {
        out.row_mut(t).fill(fill);
    }
    Ok(out)
}

/// Replaces `round(p * F)` contiguous bins with `fill` in every frame.
pub fn freq_mask(y: &FeatureSequence, p: f64, fill: f64, rng: &mut Rng) -> Result<FeatureSequence> {
    check_fraction(p)?;
    let count = round_half_up(p * y.dim() as f64).min(y.dim());
    let mut out = y.clone();
    if count == 0 {
        return Ok(out);
    }
    let start = rng.random_range(0..=y.dim() - count);
    for t in 0..y.frames() {
        out.row_mut(t)[start..start + count].fill(fill);
    }
    Ok(out)
}

/// Replaces each cell independently with probability `p`.
pub fn random_mask(y: &FeatureSequence, p: f64, fill: f64, rng: &mut Rng) -> Result<FeatureSequence> {
    check_fraction(p)?;
    let mut out = y.clone();
    for v in out.values_mut() {
        if rng.random_bool(p) {
            *v = fill;
        }
    }
    Ok(out)
}

/// Longest sequence a warp may produce; attention is quadratic in length, so
/// an extreme stretch factor must fail rather than exhaust memory.
pub const MAX_WARPED_FRAMES: usize = 4096;

/// Length of a sequence of `frames` frames after warping by `factor`.
pub fn warped_length(frames: usize, factor: f64) -> Result<usize> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(invalid(format!("warp factor must be positive, got {factor}")));
    }
    let len = round_half_up(frames as f64 / factor);
    if len < 1 {
        return Err(invalid(format!("warping {frames} frames by {factor} leaves no frames")));
    }
    if len > MAX_WARPED_FRAMES {
        return Err(invalid(format!(
            "warping {frames} frames by {factor} gives {len} frames, more than {MAX_WARPED_FRAMES}"
        )));
    }
    Ok(len)
}

/// Uniform linear resampling along time to `round(T / factor)` frames;
/// `factor > 1` compresses, `factor < 1` stretches.
pub fn time_warp(y: &FeatureSequence, factor: f64) -> Result<FeatureSequence> {
    let len = warped_length(y.frames(), factor)?;
    let mut out = FeatureSequence::filled(len, y.dim(), 0.0);
    let last = y.frames() - 1;
    for t in 0..len {
        let pos = if len > 1 {
            t as f64 * last as f64 / (len - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(last);
        let frac = pos - lo as f64;
        let row = out.row_mut(t);
        if frac == 0.0 || lo == last {
            row.copy_from_slice(y.row(lo));
        } else {
            for ((o, a), b) in row.iter_mut().zip(y.row(lo)).zip(y.row(lo + 1)) {
                *o = a + frac * (b - a);
            }
        }
    }
    Ok(out)
}

/// One perturbation of a negative's base sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NegativeMethod {
    RandomMask(f64),
    TimeMask(f64),
    FreqMask(f64),
    TimeWarp(f64),
}

impl NegativeMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::RandomMask(p) | Self::TimeMask(p) | Self::FreqMask(p) => check_fraction(p),
            Self::TimeWarp(f) if f > 0.0 && f.is_finite() => Ok(()),
            Self::TimeWarp(f) => Err(invalid(format!("warp factor must be positive, got {f}"))),
        }
    }

    pub fn apply(&self, y: &FeatureSequence, fill: f64, rng: &mut Rng) -> Result<FeatureSequence> {
        match *self {
            Self::RandomMask(p) => random_mask(y, p, fill, rng),
            Self::TimeMask(p) => time_mask(y, p, fill, rng),
            Self::FreqMask(p) => freq_mask(y, p, fill, rng),
            Self::TimeWarp(f) => time_warp(y, f),
        }
    }

    /// Short label such as `RM25` or `TW1.2`.
    pub fn label(&self) -> String {
        let pct = |p: f64| format!("{}", (p * 1000.0).round() / 10.0);
        match *self {
            Self::RandomMask(p) => format!("RM{}", pct(p)),
            Self::TimeMask(p) => format!("TM{}", pct(p)),
            Self::FreqMask(p) => format!("FM{}", pct(p)),
            Self::TimeWarp(f) => format!("TW{f}"),
        }
    }
}

impl fmt::Display for NegativeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::RandomMask(p) => write!(f, "rm:{p}"),
            Self::TimeMask(p) => write!(f, "tm:{p}"),
            Self::FreqMask(p) => write!(f, "fm:{p}"),
            Self::TimeWarp(x) => write!(f, "tw:{x}"),
        }
    }
}

impl FromStr for NegativeMethod {
    type Err = Error;

    /// Parses `rm:0.25`, `tm:0.05`, `fm:0.1` or `tw:1.2`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("negative method `{s}` should look like `rm:0.25`")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| invalid(format!("bad number in negative method `{s}`")))?;
        let m = match kind.trim().to_ascii_lowercase().as_str() {
            "rm" => Self::RandomMask(v),
            "tm" => Self::TimeMask(v),
            "fm" => Self::FreqMask(v),
            "tw" => Self::TimeWarp(v),
            other => return Err(invalid(format!("unknown negative method `{other}`"))),
        };
        m.validate()?;
        Ok(m)
    }
}

impl TryFrom<String> for NegativeMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NegativeMethod> for String {
    fn from(m: NegativeMethod) -> Self {
        m.to_string()
    }
}

/// How several enabled methods are used for one negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combination {
    /// One method per negative, picked uniformly from the enabled set.
    #[default]
    SinglePerSample,
    /// Alias of `SinglePerSample`, kept as the name used for mixed runs.
    UniformMix,
    /// Every enabled method applied in listed order.
    Compose,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Reference,
    #[default]
    DegradedHypothesis,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeSpec {
    pub source: SourceKind,
    pub methods: Vec<NegativeMethod>,
    pub combination: Combination,
    /// Mask fill value; absent means the training corpus minimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<f64>,
    /// Moving-average width of the degraded-hypothesis source.
    pub smoothing_width: usize,
    /// Noise scale of the degraded-hypothesis source.
    pub hypothesis_noise: f64,
    /// Hypothesis manifest for the file source.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hypothesis_manifest: Option<std::path::PathBuf>,
    pub seed: u64,
}

impl Default for NegativeSpec {
    fn default() -> Self {
        Self {
            source: SourceKind::DegradedHypothesis,
            methods: vec![NegativeMethod::RandomMask(0.25)],
            combination: Combination::SinglePerSample,
            fill: None,
            smoothing_width: 5,
            hypothesis_noise: 0.1,
            hypothesis_manifest: None,
            seed: 0,
        }
    }
}

impl NegativeSpec {
    pub fn validate(&self) -> Result<()> {
        for m in &self.methods {
            m.validate()?;
        }
        if self.source == SourceKind::Reference && self.methods.is_empty() {
            return Err(invalid("reference-source negatives need at least one method"));
        }
        if let Some(fill) = self.fill {
            if !fill.is_finite() {
                return Err(invalid("mask fill must be finite"));
            }
        }
        if self.source == SourceKind::DegradedHypothesis {
            if self.smoothing_width == 0 || self.smoothing_width.is_multiple_of(2) {
                return Err(invalid("smoothing_width must be odd and at least 1"));
            }
            if !(self.hypothesis_noise >= 0.0 && self.hypothesis_noise.is_finite()) {
                return Err(invalid("hypothesis_noise must be finite and non-negative"));
            }
        }
        if self.source == SourceKind::File && self.hypothesis_manifest.is_none() {
            return Err(invalid("file-source negatives need hypothesis_manifest"));
        }
        Ok(())
    }

    /// Short label of the method set, e.g. `RM30+TM5`.
    pub fn label(&self) -> String {
        if self.methods.is_empty() {
            return "none".into();
        }
        self.methods
            .iter()
            .map(NegativeMethod::label)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Where the base sequence of a negative comes from.
#[derive(Clone, Debug)]
pub enum HypothesisSource {
    Reference,
    Degraded {
        width: usize,
        noise: f64,
    },
    /// Precomputed hypotheses keyed by utterance id.
    File(Arc<HashMap<String, FeatureSequence>>),
}

impl HypothesisSource {
    pub fn base(&self, id: &str, reference: &FeatureSequence, rng: &mut Rng) -> Result<FeatureSequence> {
        match self {
            Self::Reference => Ok(reference.clone()),
            Self::Degraded { width, noise } => degrade_hypothesis(reference, *width, *noise, rng),
            Self::File(map) => {
                let y = map
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no hypothesis for utterance `{id}`")))?;
                if y.dim() != reference.dim() {
                    return Err(Error::Data(format!(
                        "hypothesis for `{id}` has {} channels, reference has {}",
                        y.dim(),
                        reference.dim()
                    )));
                }
                Ok(y.clone())
            }
        }
    }
}

/// Which methods were applied to a drawn negative.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawnNegative {
    pub features: FeatureSequence,
    pub applied: Vec<NegativeMethod>,
}

/// Base sequence from `source`, then the spec's methods under its combination policy.
pub fn draw_negative(
    spec: &NegativeSpec,
    id: &str,
    reference: &FeatureSequence,
    source: &HypothesisSource,
    fill: f64,
    rng: &mut Rng,
) -> Result<DrawnNegative> {
    if spec.methods.is_empty() && matches!(source, HypothesisSource::Reference) {
        return Err(invalid("reference-source negatives need at least one method"));
    }
    let mut y = source.base(id, reference, rng)?;
    let applied: Vec<NegativeMethod> = match spec.combination {
        _ if spec.methods.is_empty() => Vec::new(),
        Combination::SinglePerSample | Combination::UniformMix => {
            vec![spec.methods[rng.random_range(0..spec.methods.len())]]
        }
        Combination::Compose => spec.methods.clone(),
    };
    for m in &applied {
        y = m.apply(&y, fill, rng)?;
    }
    Ok(DrawnNegative { features: y, applied })
}
