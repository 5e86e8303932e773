use std::fmt::Write as _;

use ebm_core::metrics::{default_cepstral_order, mcd, median};
use ebm_core::samplers::{run_sampler_observed, ModelEnergy, SamplerConfig, SamplerVariant};
use serde::Serialize;

use super::{in_utterance, load_params, load_utterances, pair_by_id, write_text, Progress};
use crate::config::{worker_count, RunConfig};
use crate::error::CliResult;
use crate::parallel;
use crate::svg::{line_chart, Series};

pub const COMPARISON_HEADER: &str = "sampler,step,energy_median,mcd_median";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub sampler: SamplerVariant,
    pub step: usize,
    pub energy_median: f64,
    pub mcd_median: f64,
}

/// Per-step medians of energy and MCD over the compared utterances.
fn curves(
    cfg: &RunConfig,
    variant: SamplerVariant,
    params: &ebm_core::model::ModelParams,
    pairs: &[(&ebm_core::data::Utterance, &ebm_core::data::Utterance)],
    workers: usize,
) -> CliResult<Vec<CompareRow>> {
    let sampler = SamplerConfig {
        variant,
        ..cfg.sampler.clone()
    };
    let per_utt = parallel::map(pairs, workers, |i, (r, h)| {
        let order = cfg
            .eval
            .cepstral_order
            .unwrap_or_else(|| default_cepstral_order(r.features.dim()));
        let energy = ModelEnergy { params, text: &h.text };
        let mut dist = Vec::with_capacity(sampler.steps + 1);
        let trace = run_sampler_observed(&energy, &h.features, &sampler, i as u64, &mut |_, y| {
            dist.push(mcd(&r.features, y, order)?.mcd);
            Ok(())
        })
        .map_err(|e| in_utterance(&h.id, e))?;
        Ok::<_, ebm_core::Error>((trace.energies, dist))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok((0..=sampler.steps)
        .map(|n| CompareRow {
            sampler: variant,
            step: n,
            energy_median: median(&per_utt.iter().map(|(e, _)| e[n]).collect::<Vec<_>>()),
            mcd_median: median(&per_utt.iter().map(|(_, d)| d[n]).collect::<Vec<_>>()),
        })
        .collect())
}

/// Runs every configured sampler variant from the same hypotheses and
/// writes `comparison.csv`, `energy.svg` and `mcd.svg`.
pub fn compare_samplers(cfg: &RunConfig, progress: Progress) -> CliResult<Vec<CompareRow>> {
    let out = &cfg.output;
    cfg.write_resolved(out)?;
    let params = load_params(&cfg.inputs.checkpoint, &cfg.model)?;
    let refs = load_utterances(&cfg.inputs.reference, &cfg.model)?;
    let mut hyps = load_utterances(&cfg.inputs.hypotheses, &cfg.model)?;
    if let Some(n) = cfg.compare.limit {
        hyps.truncate(n);
    }
    let refs: Vec<_> = {
        let wanted: std::collections::HashSet<&str> = hyps.iter().map(|u| u.id.as_str()).collect();
        refs.into_iter().filter(|u| wanted.contains(u.id.as_str())).collect()
    };
    let pairs = pair_by_id(&refs, &hyps)?;
    let workers = worker_count(None)?;

    let mut rows = Vec::new();
    for &variant in &cfg.compare.variants {
        progress.note(format!(
            "{}: {} utterances, {} steps",
            variant.name(),
            pairs.len(),
            cfg.sampler.steps
        ));
        rows.extend(curves(cfg, variant, &params, &pairs, workers)?);
    }

    let mut csv = format!("{COMPARISON_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.sampler.name(),
            r.step,
            r.energy_median,
            r.mcd_median
        );
    }
    write_text(&out.join("comparison.csv"), &csv)?;
    let series = |f: fn(&CompareRow) -> f64| -> Vec<Series<'_>> {
        cfg.compare
            .variants
            .iter()
            .map(|v| Series {
                name: v.name(),
                points: rows
                    .iter()
                    .filter(|r| r.sampler == *v)
                    .map(|r| (r.step as f64, f(r)))
                    .collect(),
            })
            .collect()
    };
    write_text(
        &out.join("energy.svg"),
        &line_chart("Median energy per step", "step", "energy", &series(|r| r.energy_median)),
    )?;
    write_text(
        &out.join("mcd.svg"),
        &line_chart("Median MCD per step", "step", "MCD (dB)", &series(|r| r.mcd_median)),
    )?;
    Ok(rows)
}
