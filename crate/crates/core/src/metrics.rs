//! Objective metrics: DTW alignment, mel-cepstral distortion, F0 frame
//! error and log-F0 RMSE, plus per-corpus reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{pitch_track, F0Track, FeatureSequence};
use crate::error::{invalid, Result};

/// `10 / ln 10`, the dB factor of mel-cepstral distortion.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;
/// Relative pitch deviation counted as a gross error by FFE.
pub const FFE_THRESHOLD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Monotone path from `(0, 0)` to `(n - 1, m - 1)`.
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Classic DTW with steps (1,0), (0,1), (1,1) and Euclidean frame cost.
/// Ties prefer the diagonal, then advancing in `a`.
pub fn dtw_align(a: &FeatureSequence, b: &FeatureSequence) -> Result<Alignment> {
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "cannot align {}-dim frames with {}-dim frames",
            a.dim(),
            b.dim()
        )));
    }
    let (n, m) = (a.frames(), b.frames());
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = euclidean(a.row(i), b.row(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[(i - 1) * m + j - 1]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let cand = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        let mut best: Option<(usize, usize)> = None;
        for (pi, pj) in cand.into_iter().flatten() {
            if best.is_none_or(|(bi, bj)| acc[pi * m + pj] < acc[bi * m + bj]) {
                best = Some((pi, pj));
            }
        }
        (i, j) = best.expect("a predecessor exists away from the origin");
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[n * m - 1],
    })
}

/// Orthonormal DCT-II of one frame.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, v)| {
                    let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                    s * v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
                })
                .sum()
        })
        .collect()
}

/// `T x D` mel-cepstra: coefficients `1..=D` of each frame's DCT.
#[derive(Clone, Debug, PartialEq)]
pub struct CepstraSequence(pub FeatureSequence);

pub fn default_cepstral_order(feature_dim: usize) -> usize {
    13.min(feature_dim.saturating_sub(1)).max(1)
}

/// `c_0` is always dropped, so `D` may be at most `F - 1`.
pub fn mel_to_cepstra(y: &FeatureSequence, order: usize) -> Result<CepstraSequence> {
    if order < 1 || order >= y.dim() {
        return Err(invalid(format!(
            "cepstral order must lie in [1, {}] for {} channels, got {order}",
            y.dim().saturating_sub(1),
            y.dim()
        )));
    }
    let mut values = Vec::with_capacity(y.frames() * order);
    for row in y.rows() {
        values.extend_from_slice(&dct2(row)[1..=order]);
    }
    Ok(CepstraSequence(FeatureSequence::new(y.frames(), order, values)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct McdResult {
    pub mcd: f64,
    pub alignment: Alignment,
}

/// Mean over the DTW path of `(10 / ln 10) sqrt(2 Σ_d (c_d - c'_d)²)`.
pub fn mcd(reference: &FeatureSequence, hypothesis: &FeatureSequence, order: usize) -> Result<McdResult> {
    if reference.dim() != hypothesis.dim() {
        return Err(invalid(format!(
            "reference has {} channels, hypothesis {}",
            reference.dim(),
            hypothesis.dim()
        )));
    }
    let a = mel_to_cepstra(reference, order)?.0;
    let b = mel_to_cepstra(hypothesis, order)?.0;
    let alignment = dtw_align(&a, &b)?;
    let total: f64 = alignment
        .path
        .iter()
        .map(|&(i, j)| MCD_SCALE * (2.0 * euclidean(a.row(i), b.row(j)).powi(2)).sqrt())
        .sum();
    Ok(McdResult {
        mcd: total / alignment.path.len() as f64,
        alignment,
    })
}

fn check_lengths(reference: &F0Track, hypothesis: &F0Track) -> Result<()> {
    if reference.len() != hypothesis.len() {
        return Err(invalid(format!(
            "F0 tracks differ in length ({} vs {}); align them first",
            reference.len(),
            hypothesis.len()
        )));
    }
    if reference.is_empty() {
        return Err(invalid("F0 tracks are empty"));
    }
    Ok(())
}

/// Voicing mismatches plus both-voiced frames off by more than 20%.
pub fn ffe_errors(reference: &F0Track, hypothesis: &F0Track) -> Result<usize> {
    check_lengths(reference, hypothesis)?;
    Ok((0..reference.len())
        .filter(|&t| {
            let (r, h) = (reference.0[t], hypothesis.0[t]);
            match (r > 0.0, h > 0.0) {
                (true, true) => (h - r).abs() > FFE_THRESHOLD * r,
                (false, false) => false,
                _ => true,
            }
        })
        .count())
}

pub fn ffe(reference: &F0Track, hypothesis: &F0Track) -> Result<f64> {
    Ok(ffe_errors(reference, hypothesis)? as f64 / reference.len() as f64)
}

/// RMSE of `ln F0` over frames voiced in both tracks.
pub fn log_f0_rmse(reference: &F0Track, hypothesis: &F0Track) -> Result<f64> {
    check_lengths(reference, hypothesis)?;
    let diffs: Vec<f64> = reference
        .0
        .iter()
        .zip(&hypothesis.0)
        .filter(|(r, h)| **r > 0.0 && **h > 0.0)
        .map(|(r, h)| r.ln() - h.ln())
        .collect();
    if diffs.is_empty() {
        return Err(invalid("no frame is voiced in both F0 tracks"));
    }
    Ok((diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt())
}

/// Both tracks resampled along an alignment path.
pub fn align_tracks(reference: &F0Track, hypothesis: &F0Track, path: &[(usize, usize)]) -> Result<(F0Track, F0Track)> {
    if path.iter().any(|&(i, j)| i >= reference.len() || j >= hypothesis.len()) {
        return Err(invalid("alignment path exceeds the F0 tracks"));
    }
    Ok((
        F0Track(path.iter().map(|&(i, _)| reference.0[i]).collect()),
        F0Track(path.iter().map(|&(_, j)| hypothesis.0[j]).collect()),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub mcd: f64,
    pub ffe: f64,
    /// Absent when no aligned frame is voiced on both sides.
    pub log_f0_rmse: Option<f64>,
    pub path_length: usize,
}

/// All metrics for one pair. F0 is read from the pitch channel on both
/// sides and aligned with the cepstral DTW path.
pub fn evaluate_pair(
    id: &str,
    reference: &FeatureSequence,
    hypothesis: &FeatureSequence,
    order: usize,
) -> Result<UtteranceMetrics> {
    let m = mcd(reference, hypothesis, order)?;
    let (r, h) = align_tracks(&pitch_track(reference), &pitch_track(hypothesis), &m.alignment.path)?;
    Ok(UtteranceMetrics {
        id: id.to_string(),
        mcd: m.mcd,
        ffe: ffe(&r, &h)?,
        log_f0_rmse: log_f0_rmse(&r, &h).ok(),
        path_length: m.alignment.path.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval, `1.96 s / sqrt(n)`.
    pub ci95: f64,
    pub median: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            ci95,
            median: median(values),
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mcd: Aggregate,
    pub ffe: Aggregate,
    pub log_f0_rmse: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub summary: MetricsSummary,
}

pub const REPORT_HEADER: &str = "utt_id,mcd,ffe,log_f0_rmse";

impl MetricsReport {
    pub fn new(utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        let col = |f: fn(&UtteranceMetrics) -> Option<f64>| -> Vec<f64> { utterances.iter().filter_map(f).collect() };
        let mcd = Aggregate::of(&col(|u| Some(u.mcd))).ok_or_else(|| invalid("no utterances to report"))?;
        let ffe = Aggregate::of(&col(|u| Some(u.ffe))).expect("same length as mcd");
        let log_f0_rmse = Aggregate::of(&col(|u| u.log_f0_rmse));
        Ok(Self {
            utterances,
            summary: MetricsSummary { mcd, ffe, log_f0_rmse },
        })
    }

    /// Per-utterance rows followed by `mean` and `ci95` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for u in &self.utterances {
            let _ = writeln!(out, "{},{},{},{}", u.id, u.mcd, u.ffe, opt(u.log_f0_rmse));
        }
        let s = &self.summary;
        let _ = writeln!(
            out,
            "mean,{},{},{}",
            s.mcd.mean,
            s.ffe.mean,
            opt(s.log_f0_rmse.map(|a| a.mean))
        );
        let _ = writeln!(
            out,
            "ci95,{},{},{}",
            s.mcd.ci95,
            s.ffe.ci95,
            opt(s.log_f0_rmse.map(|a| a.ci95))
        );
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(v: &[f64]) -> FeatureSequence {
        FeatureSequence::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn dtw_identity_is_diagonal() {
        let a = FeatureSequence::new(4, 2, (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        let al = dtw_align(&a, &a).unwrap();
        assert_eq!(al.cost, 0.0);
        assert_eq!(al.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn dtw_repeated_frame() {
        let al = dtw_align(&scalars(&[0.0, 1.0]), &scalars(&[0.0, 1.0, 1.0])).unwrap();
        assert_eq!(al.cost, 0.0);
        assert_eq!(al.path, vec![(0, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn dtw_dimension_mismatch() {
        let a = FeatureSequence::filled(2, 2, 0.0);
        assert!(dtw_align(&a, &scalars(&[0.0])).is_err());
    }

    #[test]
    fn dct_constant_and_round_trip() {
        let c = dct2(&[2.5; 8]);
        assert!((c[0] - 2.5 * 8f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let back = idct2(&dct2(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cepstra_order_bounds() {
        let y = FeatureSequence::filled(3, 16, 1.0);
        let c = mel_to_cepstra(&y, 13).unwrap();
        assert_eq!((c.0.frames(), c.0.dim()), (3, 13));
        assert!(c.0.values().iter().all(|v| v.abs() < 1e-12));
        assert!(mel_to_cepstra(&y, 0).is_err());
        assert!(mel_to_cepstra(&y, 16).is_err());
        assert!(mel_to_cepstra(&y, 15).is_ok());
        assert_eq!(default_cepstral_order(16), 13);
        assert_eq!(default_cepstral_order(4), 3);
    }

    #[test]
    fn mcd_closed_form_offset() {
        let y = FeatureSequence::new(5, 8, (0..40).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        assert_eq!(mcd(&y, &y, 7).unwrap().mcd, 0.0);
        // Shift cepstral dimension 3 by δ in every frame.
        let delta = 0.4;
        let mut hyp = y.clone();
        for t in 0..5 {
            let mut c = dct2(y.row(t));
            c[3] += delta;
            hyp.row_mut(t).copy_from_slice(&idct2(&c));
        }
        let got = mcd(&y, &hyp, 7).unwrap().mcd;
        assert!((got - MCD_SCALE * 2f64.sqrt() * delta).abs() < 1e-9, "{got}");
    }

    #[test]
    fn ffe_examples() {
        let r = F0Track(vec![100.0; 10]);
        assert_eq!(ffe(&r, &r).unwrap(), 0.0);
        let mut h = r.clone();
        h.0[4] = 130.0;
        assert!((ffe(&r, &h).unwrap() - 0.1).abs() < 1e-15);
        let mut edge = r.clone();
        edge.0[2] = 120.0;
        assert_eq!(ffe(&r, &edge).unwrap(), 0.0);
        assert_eq!(ffe(&F0Track(vec![0.0; 4]), &F0Track(vec![150.0; 4])).unwrap(), 1.0);
        assert!(ffe(&r, &F0Track(vec![1.0; 3])).is_err());
    }

    #[test]
    fn log_f0_examples() {
        let r = F0Track(vec![100.0, 0.0, 220.0]);
        assert_eq!(log_f0_rmse(&r, &r).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let scaled = F0Track(r.0.iter().map(|v| v * e).collect());
        assert!((log_f0_rmse(&r, &scaled).unwrap() - 1.0).abs() < 1e-15);
        let single = log_f0_rmse(&F0Track(vec![100.0]), &F0Track(vec![200.0])).unwrap();
        assert!((single - 2f64.ln()).abs() < 1e-15);
        assert!(log_f0_rmse(&F0Track(vec![0.0, 100.0]), &F0Track(vec![100.0, 0.0])).is_err());
    }

    #[test]
    fn report_aggregates() {
        let rows: Vec<UtteranceMetrics> = [1.0, 2.0, 3.0, 6.0]
            .iter()
            .enumerate()
            .map(|(i, &m)| UtteranceMetrics {
                id: format!("u{i}"),
                mcd: m,
                ffe: 0.0,
                log_f0_rmse: if i == 0 { None } else { Some(0.5) },
                path_length: 3,
            })
            .collect();
        let rep = MetricsReport::new(rows).unwrap();
        assert_eq!(rep.summary.mcd.mean, 3.0);
        assert_eq!(rep.summary.mcd.median, 2.5);
        let sd = (14.0f64 / 3.0).sqrt();
        assert!((rep.summary.mcd.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
        assert_eq!(rep.summary.log_f0_rmse.unwrap().n, 3);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "u0,1,0,");
        assert!(lines[5].starts_with("mean,3,0,0.5"));
        assert!(lines[6].starts_with("ci95,"));
        assert!(MetricsReport::new(vec![]).is_err());
    }
}
