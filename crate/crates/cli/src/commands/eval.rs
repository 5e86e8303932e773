use ebm_core::data::Utterance;
use ebm_core::metrics::{default_cepstral_order, evaluate_pair, MetricsReport};

use super::{in_utterance, load_utterances, pair_by_id, write_json, Progress};
use crate::config::{worker_count, RunConfig};
use crate::error::CliResult;
use crate::parallel;

/// Metrics for every hypothesis against the reference with the same id.
pub fn evaluate_all(
    references: &[Utterance],
    hypotheses: &[Utterance],
    order: Option<usize>,
    workers: usize,
) -> CliResult<MetricsReport> {
    let pairs = pair_by_id(references, hypotheses)?;
    let rows = parallel::map(&pairs, workers, |_, (r, h)| {
        let order = order.unwrap_or_else(|| default_cepstral_order(r.features.dim()));
        evaluate_pair(&h.id, &r.features, &h.features, order).map_err(|e| in_utterance(&h.id, e))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::new(rows)?)
}

pub fn eval(cfg: &RunConfig, progress: Progress) -> CliResult<MetricsReport> {
    let out = &cfg.output;
    cfg.write_resolved(out)?;
    let refs = load_utterances(&cfg.inputs.reference, &cfg.model)?;
    let hyps = load_utterances(&cfg.inputs.hypotheses, &cfg.model)?;
    let report = evaluate_all(&refs, &hyps, cfg.eval.cepstral_order, worker_count(None)?)?;
    report.write_csv(&out.join("metrics.csv"))?;
    write_json(&out.join("summary.json"), &report.summary)?;
    progress.note(format!("evaluated {} utterances", report.utterances.len()));
    Ok(report)
}
