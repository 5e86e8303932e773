//! Inference-time refinement of feature sequences under an energy.
//!
//! * Langevin: `Y <- Y - λ ∇E + sqrt(2λ) z`, `z ~ N(0, μI)`.
//! * Simplified Adam: `μ = 0` and an Adam update with step `λ` in place of
//!   plain gradient descent. The Adam state is over `Y` and starts fresh per run.
//! * Annealed score: `Y <- (Y + λ_n S) / sqrt(1 - λ_n) + sqrt(λ_n) z`,
//!   `S = -∇E`, `z ~ N(0, I)`, with a per-step rate `λ_n`.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, FeatureStats, TokenSequence};
use crate::error::{invalid, Error, FormatError, Result};
use crate::model::{energy, energy_and_feature_grad, ModelParams};
use crate::rng::{derive_seed, seeded, Rng};
use crate::training::adam_update;

/// A differentiable energy over feature sequences.
pub trait EnergyFunction {
    fn energy_and_grad(&self, y: &FeatureSequence) -> Result<(f64, FeatureSequence)>;

    fn energy(&self, y: &FeatureSequence) -> Result<f64> {
        self.energy_and_grad(y).map(|(e, _)| e)
    }
}

/// The trained network conditioned on one text.
pub struct ModelEnergy<'a> {
    pub params: &'a ModelParams,
    pub text: &'a TokenSequence,
}

impl EnergyFunction for ModelEnergy<'_> {
    fn energy_and_grad(&self, y: &FeatureSequence) -> Result<(f64, FeatureSequence)> {
        energy_and_feature_grad(self.params, self.text, y)
    }

    fn energy(&self, y: &FeatureSequence) -> Result<f64> {
        Ok(energy(self.params, self.text, y)?.energy)
    }
}

/// `E(Y) = ½‖Y‖²`, whose Langevin stationary law is the standard normal.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticEnergy;

impl EnergyFunction for QuadraticEnergy {
    fn energy_and_grad(&self, y: &FeatureSequence) -> Result<(f64, FeatureSequence)> {
        let e = 0.5 * y.values().iter().map(|v| v * v).sum::<f64>();
        Ok((e, y.clone()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerVariant {
    Langevin,
    #[default]
    SimplifiedAdam,
    AnnealedScore,
}

impl SamplerVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Langevin => "langevin",
            Self::SimplifiedAdam => "simplified-adam",
            Self::AnnealedScore => "annealed-score",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub variant: SamplerVariant,
    /// λ; absent means 1e-2 for simplified Adam and 1e-3 for Langevin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// μ, the variance of the Langevin noise.
    pub noise_variance: f64,
    pub steps: usize,
    /// First and last rate of the geometric annealed-score schedule.
    pub anneal_start: f64,
    pub anneal_end: f64,
    /// Explicit annealed-score rates, one per step; overrides the geometric schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            variant: SamplerVariant::SimplifiedAdam,
            step_size: None,
            noise_variance: 1.0,
            steps: 100,
            anneal_start: 0.1,
            anneal_end: 1e-3,
            schedule: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(match self.variant {
            SamplerVariant::Langevin => 1e-3,
            _ => 1e-2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.step_size();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("step size must be positive, got {lr}")));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid("noise variance must be finite and non-negative"));
        }
        if self.variant == SamplerVariant::AnnealedScore {
            self.annealing_schedule()?;
        }
        Ok(())
    }

    /// Per-step rates `λ_0 .. λ_{N-1}` of the annealed-score sampler.
    pub fn annealing_schedule(&self) -> Result<Vec<f64>> {
        let rates = match &self.schedule {
            Some(s) => {
                if s.len() != self.steps {
                    return Err(invalid(format!(
                        "schedule has {} rates for {} steps",
                        s.len(),
                        self.steps
                    )));
                }
                s.clone()
            }
            None => geometric_schedule(self.anneal_start, self.anneal_end, self.steps)?,
        };
        if let Some(bad) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(invalid(format!("annealing rate {bad} outside [0, 1)")));
        }
        Ok(rates)
    }
}

/// `n` rates from `start` to `end` with a constant ratio.
pub fn geometric_schedule(start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if !(start > 0.0 && start < 1.0 && end > 0.0 && end < 1.0) {
        return Err(invalid(format!(
            "schedule ends must lie in (0, 1), got {start} and {end}"
        )));
    }
    Ok(match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start * (end / start).powf(i as f64 / (n - 1) as f64))
            .collect(),
    })
}

/// Energies and update norms of every visited state, starting with `Y_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerTrace {
    pub energies: Vec<f64>,
    /// `‖Y_n - Y_{n-1}‖`; the entry for `Y_0` is 0.
    pub update_norms: Vec<f64>,
    pub final_state: FeatureSequence,
}

impl SamplerTrace {
    pub fn steps(&self) -> usize {
        self.energies.len() - 1
    }
}

pub const SAMPLER_TRACE_HEADER: &str = "step,energy,update_norm";

pub fn write_sampler_trace(path: &Path, trace: &SamplerTrace) -> Result<()> {
    let mut out = String::from(SAMPLER_TRACE_HEADER);
    out.push('\n');
    for (i, (e, u)) in trace.energies.iter().zip(&trace.update_norms).enumerate() {
        out.push_str(&format!("{i},{e},{u}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sampler_trace(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLER_TRACE_HEADER) {
        return Err(FormatError::Invalid(format!("{} is not a sampler trace", path.display())).into());
    }
    lines
        .map(|l| {
            let bad = || Error::from(FormatError::Invalid(format!("bad trace row `{l}`")));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn checked_grad<E: EnergyFunction + ?Sized>(
    energy: &E,
    y: &FeatureSequence,
    step: usize,
) -> Result<(f64, FeatureSequence)> {
    let (e, g) = energy.energy_and_grad(y)?;
    if !e.is_finite() || !g.all_finite() {
        return Err(Error::NonFinite(format!(
            "energy or gradient at step {step} (E = {e}, |Y|max = {})",
            y.values().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        )));
    }
    Ok((e, g))
}

fn finite_state(y: Vec<f64>, like: &FeatureSequence, step: usize) -> Result<FeatureSequence> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("state after step {step}")));
    }
    FeatureSequence::new(like.frames(), like.dim(), y)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One Langevin update.
pub fn langevin_step<E: EnergyFunction + ?Sized>(
    energy: &E,
    y: &FeatureSequence,
    step_size: f64,
    noise_variance: f64,
    rng: &mut Rng,
) -> Result<FeatureSequence> {
    let (_, g) = checked_grad(energy, y, 0)?;
    langevin_update(y, &g, step_size, noise_variance, rng, 0)
}

fn langevin_update(
    y: &FeatureSequence,
    grad: &FeatureSequence,
    lr: f64,
    mu: f64,
    rng: &mut Rng,
    step: usize,
) -> Result<FeatureSequence> {
    let scale = (2.0 * lr).sqrt() * mu.sqrt();
    let next: Vec<f64> = y
        .values()
        .iter()
        .zip(grad.values())
        .map(|(v, g)| {
            let mut out = v - lr * g;
            if mu > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                out += scale * z;
            }
            out
        })
        .collect();
    finite_state(next, y, step)
}

fn chain_rng(config: &SamplerConfig, chain: u64) -> Rng {
    seeded(derive_seed(config.seed, "chain", chain))
}

/// `N` Langevin steps from `y0`, with the chain's RNG derived from
/// `(config.seed, chain)`.
pub fn langevin_run<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    chain: u64,
) -> Result<SamplerTrace> {
    langevin_observed(energy, y0, config, chain, &mut |_, _| Ok(()))
}

fn langevin_observed<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    chain: u64,
    observe: Observer<'_>,
) -> Result<SamplerTrace> {
    config.validate()?;
    let mut rng = chain_rng(config, chain);
    let (lr, mu) = (config.step_size(), config.noise_variance);
    iterate(energy, y0, config.steps, observe, |y, g, step| {
        langevin_update(y, g, lr, mu, &mut rng, step)
    })
}

pub fn simplified_adam_run<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
) -> Result<SamplerTrace> {
    simplified_adam_observed(energy, y0, config, &mut |_, _| Ok(()))
}

fn simplified_adam_observed<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    observe: Observer<'_>,
) -> Result<SamplerTrace> {
    config.validate()?;
    let lr = config.step_size();
    let n = y0.values().len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    iterate(energy, y0, config.steps, observe, |y, g, step| {
        let mut next = y.values().to_vec();
        adam_update(&mut next, g.values(), &mut m, &mut v, step as u64 + 1, lr);
        finite_state(next, y, step)
    })
}

pub fn annealed_score_run<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    chain: u64,
) -> Result<SamplerTrace> {
    annealed_score_observed(energy, y0, config, chain, &mut |_, _| Ok(()))
}

fn annealed_score_observed<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    chain: u64,
    observe: Observer<'_>,
) -> Result<SamplerTrace> {
    let rates = config.annealing_schedule()?;
    let mut rng = chain_rng(config, chain);
    iterate(energy, y0, config.steps, observe, |y, g, step| {
        annealed_update(y, g, rates[step], &mut rng, step)
    })
}

fn annealed_update(
    y: &FeatureSequence,
    grad: &FeatureSequence,
    rate: f64,
    rng: &mut Rng,
    step: usize,
) -> Result<FeatureSequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("annealing rate {rate} outside [0, 1)")));
    }
    let inv = 1.0 / (1.0 - rate).sqrt();
    let noise = rate.sqrt();
    let next = y
        .values()
        .iter()
        .zip(grad.values())
        .map(|(v, g)| {
            let mut out = inv * (v - rate * g);
            if noise > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                out += noise * z;
            }
            out
        })
        .collect();
    finite_state(next, y, step)
}

/// Called with `(n, Y_n)` for every state of a run, `Y_0` included.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &FeatureSequence) -> Result<()>;

fn iterate<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    steps: usize,
    observe: Observer<'_>,
    mut update: impl FnMut(&FeatureSequence, &FeatureSequence, usize) -> Result<FeatureSequence>,
) -> Result<SamplerTrace> {
    let mut y = y0.clone();
    observe(0, &y)?;
    let mut energies = Vec::with_capacity(steps + 1);
    let mut update_norms = Vec::with_capacity(steps + 1);
    update_norms.push(0.0);
    for step in 0..steps {
        let (e, g) = checked_grad(energy, &y, step)?;
        energies.push(e);
        let next = update(&y, &g, step)?;
        update_norms.push(norm_diff(next.values(), y.values()));
        y = next;
        observe(step + 1, &y)?;
    }
    let last = energy.energy(&y)?;
    if !last.is_finite() {
        return Err(Error::NonFinite(format!("energy after step {steps}")));
    }
    energies.push(last);
    Ok(SamplerTrace {
        energies,
        update_norms,
        final_state: y,
    })
}

/// Runs the configured variant.
pub fn run_sampler<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    chain: u64,
) -> Result<SamplerTrace> {
    run_sampler_observed(energy, y0, config, chain, &mut |_, _| Ok(()))
}

/// [`run_sampler`] that also hands every intermediate state to `observe`.
pub fn run_sampler_observed<E: EnergyFunction + ?Sized>(
    energy: &E,
    y0: &FeatureSequence,
    config: &SamplerConfig,
    chain: u64,
    observe: Observer<'_>,
) -> Result<SamplerTrace> {
    match config.variant {
        SamplerVariant::Langevin => langevin_observed(energy, y0, config, chain, observe),
        SamplerVariant::SimplifiedAdam => simplified_adam_observed(energy, y0, config, observe),
        SamplerVariant::AnnealedScore => annealed_score_observed(energy, y0, config, chain, observe),
    }
}

/// Draws `Y_0` cell by cell from `N(mean_f, variance_f)`.
pub fn gaussian_prior_init(stats: &FeatureStats, frames: usize, rng: &mut Rng) -> Result<FeatureSequence> {
    if frames == 0 {
        return Err(invalid("prior initialisation needs at least one frame"));
    }
    let dim = stats.mean.len();
    let mut values = Vec::with_capacity(frames * dim);
    for _ in 0..frames {
        for f in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            values.push(stats.mean[f] + stats.variance[f].sqrt() * z);
        }
    }
    FeatureSequence::new(frames, dim, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cells(values: Vec<f64>) -> FeatureSequence {
        let n = values.len();
        FeatureSequence::new(1, n, values).unwrap()
    }

    struct ZeroEnergy;

    impl EnergyFunction for ZeroEnergy {
        fn energy_and_grad(&self, y: &FeatureSequence) -> Result<(f64, FeatureSequence)> {
            Ok((0.0, FeatureSequence::filled(y.frames(), y.dim(), 0.0)))
        }
    }

    #[test]
    fn quadratic_gradient_flow() {
        let y = cells(vec![1.0, -2.0, 0.5]);
        let next = langevin_step(&QuadraticEnergy, &y, 0.1, 0.0, &mut seeded(0)).unwrap();
        for (a, b) in next.values().iter().zip(y.values()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_head_model_leaves_state_unchanged() {
        let mut p = ModelParams::init(&ModelConfig::tiny(4, 3), &mut seeded(0)).unwrap();
        p.zero_head();
        let x = TokenSequence::new(vec![1, 2], 4).unwrap();
        let e = ModelEnergy { params: &p, text: &x };
        let y = FeatureSequence::new(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let next = langevin_step(&e, &y, 0.05, 0.0, &mut seeded(0)).unwrap();
        assert_eq!(next, y);
        let cfg = SamplerConfig {
            steps: 7,
            ..Default::default()
        };
        assert_eq!(simplified_adam_run(&e, &y, &cfg).unwrap().final_state, y);
    }

    #[test]
    fn zero_steps_return_initial_state() {
        let y = cells(vec![3.0, -1.0]);
        for variant in [
            SamplerVariant::Langevin,
            SamplerVariant::SimplifiedAdam,
            SamplerVariant::AnnealedScore,
        ] {
            let cfg = SamplerConfig {
                variant,
                steps: 0,
                ..Default::default()
            };
            let t = run_sampler(&QuadraticEnergy, &y, &cfg, 0).unwrap();
            assert_eq!(t.final_state, y);
            assert_eq!(t.energies.len(), 1);
            assert_eq!(t.update_norms, vec![0.0]);
        }
    }

    #[test]
    fn tiny_step_is_identity() {
        let y = cells(vec![2.0, -3.0, 4.0]);
        let next = langevin_step(&QuadraticEnergy, &y, 1e-15, 0.0, &mut seeded(0)).unwrap();
        let norm = y.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm_diff(next.values(), y.values()) <= 1e-12 * norm);
    }

    #[test]
    fn simplified_adam_descends_quadratic() {
        let y = cells(vec![1.5, -0.7, 0.3, 2.0]);
        let cfg = SamplerConfig {
            steps: 60,
            step_size: Some(0.02),
            ..Default::default()
        };
        let t = simplified_adam_run(&QuadraticEnergy, &y, &cfg).unwrap();
        assert_eq!(t.energies.len(), 61);
        for w in t.energies.windows(2) {
            assert!(w[1] < w[0], "{w:?}");
        }
    }

    #[test]
    fn annealed_degenerate_and_exact_step() {
        let y = cells(vec![0.9, -1.8]);
        let cfg = SamplerConfig {
            variant: SamplerVariant::AnnealedScore,
            steps: 4,
            schedule: Some(vec![0.0; 4]),
            ..Default::default()
        };
        assert_eq!(
            annealed_score_run(&QuadraticEnergy, &y, &cfg, 0).unwrap().final_state,
            y
        );

        let zero = FeatureSequence::filled(1, 2, 0.0);
        // With z = 0 the rate-0.19 step divides by exactly 0.9.
        let mut rng = seeded(0);
        let next = annealed_update(&y, &zero, 0.19, &mut rng, 0).unwrap();
        let noise_free = [y.values()[0] / 0.9, y.values()[1] / 0.9];
        let mut replay = seeded(0);
        for (i, v) in next.values().iter().enumerate() {
            let z: f64 = replay.sample(StandardNormal);
            assert!((v - (noise_free[i] + 0.19f64.sqrt() * z)).abs() < 1e-15);
        }
        assert!(((1.0 - 0.19f64).sqrt() - 0.9).abs() < 1e-15);

        let bad = SamplerConfig {
            schedule: Some(vec![0.5, 1.0, 0.1, 0.1]),
            ..cfg
        };
        assert!(annealed_score_run(&QuadraticEnergy, &y, &bad, 0).is_err());
    }

    #[test]
    fn geometric_schedule_ends() {
        let s = geometric_schedule(0.1, 1e-3, 5).unwrap();
        assert_eq!(s.len(), 5);
        assert!((s[0] - 0.1).abs() < 1e-15 && (s[4] - 1e-3).abs() < 1e-15);
        assert!((s[2] - 1e-2).abs() < 1e-15);
        assert!(geometric_schedule(0.1, 1.0, 3).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let y = cells(vec![0.3; 8]);
        for variant in [SamplerVariant::Langevin, SamplerVariant::AnnealedScore] {
            let cfg = SamplerConfig {
                variant,
                steps: 30,
                seed: 5,
                ..Default::default()
            };
            let a = run_sampler(&QuadraticEnergy, &y, &cfg, 2).unwrap();
            assert_eq!(a, run_sampler(&QuadraticEnergy, &y, &cfg, 2).unwrap());
            assert_ne!(
                a.final_state,
                run_sampler(&QuadraticEnergy, &y, &cfg, 3).unwrap().final_state
            );
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        struct Blowup;
        impl EnergyFunction for Blowup {
            fn energy_and_grad(&self, y: &FeatureSequence) -> Result<(f64, FeatureSequence)> {
                Ok((f64::NAN, y.clone()))
            }
        }
        let cfg = SamplerConfig {
            steps: 3,
            ..Default::default()
        };
        let err = simplified_adam_run(&Blowup, &cells(vec![1.0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("step 0")), "{err}");
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SamplerConfig {
            steps: 3,
            ..Default::default()
        };
        let t = simplified_adam_run(&QuadraticEnergy, &cells(vec![1.0, 2.0]), &cfg).unwrap();
        let p = dir.path().join("t.csv");
        write_sampler_trace(&p, &t).unwrap();
        let rows = read_sampler_trace(&p).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].1, t.energies[3]);
    }

    #[test]
    fn prior_init_shape() {
        let stats = FeatureStats {
            mean: vec![1.0, -1.0],
            variance: vec![0.0, 4.0],
            min: -3.0,
        };
        let y = gaussian_prior_init(&stats, 5, &mut seeded(0)).unwrap();
        assert_eq!((y.frames(), y.dim()), (5, 2));
        assert!((0..5).all(|t| y.get(t, 0) == 1.0));
        let _ = ZeroEnergy.energy(&y).unwrap();
    }

    #[test]
    fn observer_sees_every_state() {
        for variant in [
            SamplerVariant::Langevin,
            SamplerVariant::SimplifiedAdam,
            SamplerVariant::AnnealedScore,
        ] {
            let cfg = SamplerConfig {
                variant,
                steps: 4,
                ..Default::default()
            };
            let mut seen = Vec::new();
            let t = run_sampler_observed(&QuadraticEnergy, &cells(vec![1.0, -2.0]), &cfg, 3, &mut |n, y| {
                seen.push((n, y.clone()));
                Ok(())
            })
            .unwrap();
            assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
            assert_eq!(seen[4].1, t.final_state);
            assert_eq!(
                run_sampler(&QuadraticEnergy, &cells(vec![1.0, -2.0]), &cfg, 3).unwrap(),
                t
            );
        }
    }
}
