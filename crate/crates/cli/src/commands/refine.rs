use std::path::PathBuf;

use ebm_core::data::{write_split, Utterance};
use ebm_core::metrics::median;
use ebm_core::model::ModelParams;
use ebm_core::samplers::{run_sampler, write_sampler_trace, ModelEnergy, SamplerConfig, SamplerTrace};
use serde::Serialize;

use super::{in_utterance, load_params, load_utterances, write_json, Progress};
use crate::config::{worker_count, RunConfig};
use crate::error::CliResult;
use crate::parallel;

#[derive(Clone, Debug, Serialize)]
pub struct RefineSummary {
    pub utterances: usize,
    pub steps: usize,
    pub median_initial_energy: f64,
    pub median_final_energy: f64,
    pub manifest: PathBuf,
}

/// Runs the sampler from every hypothesis. The chain index of an utterance
/// is its position in `hypotheses`.
pub fn refine_all(
    params: &ModelParams,
    hypotheses: &[Utterance],
    sampler: &SamplerConfig,
    workers: usize,
) -> CliResult<Vec<SamplerTrace>> {
    parallel::map(hypotheses, workers, |i, u| {
        let energy = ModelEnergy { params, text: &u.text };
        run_sampler(&energy, &u.features, sampler, i as u64).map_err(|e| in_utterance(&u.id, e))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(Into::into)
}

pub fn refine(cfg: &RunConfig, progress: Progress) -> CliResult<RefineSummary> {
    let out = &cfg.output;
    cfg.write_resolved(out)?;
    let params = load_params(&cfg.inputs.checkpoint, &cfg.model)?;
    let hyps = load_utterances(&cfg.inputs.hypotheses, &cfg.model)?;
    let workers = worker_count(None)?;
    progress.note(format!(
        "refining {} utterances with {} for {} steps on {workers} workers",
        hyps.len(),
        cfg.sampler.variant.name(),
        cfg.sampler.steps
    ));
    let traces = refine_all(&params, &hyps, &cfg.sampler, workers)?;

    let refined: Vec<Utterance> = hyps
        .iter()
        .zip(&traces)
        .map(|(u, t)| Utterance {
            id: u.id.clone(),
            text: u.text.clone(),
            features: t.final_state.clone(),
            f0: u.f0.clone(),
        })
        .collect();
    let manifest = write_split(out, "refined", &refined)?;
    let trace_dir = out.join("traces");
    std::fs::create_dir_all(&trace_dir).map_err(|e| crate::error::CliError::io(&trace_dir, e))?;
    for (u, t) in hyps.iter().zip(&traces) {
        write_sampler_trace(&trace_dir.join(format!("{}.csv", u.id)), t)?;
    }
    let first: Vec<f64> = traces.iter().map(|t| t.energies[0]).collect();
    let last: Vec<f64> = traces
        .iter()
        .map(|t| *t.energies.last().expect("at least Y_0"))
        .collect();
    let summary = RefineSummary {
        utterances: refined.len(),
        steps: cfg.sampler.steps,
        median_initial_energy: median(&first),
        median_final_energy: median(&last),
        manifest,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
