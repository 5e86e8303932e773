use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ebm_core::data::Utterance;
use ebm_core::model::ModelConfig;
use ebm_core::negatives::{HypothesisSource, NegativeSpec, SourceKind};
use ebm_core::rng::derive_seed;
use ebm_core::training::{
    load_checkpoint, margin_accuracy, read_loss_trace, save_checkpoint, write_loss_trace, TraceRow, TrainConfig,
    TrainState, TrainingSet,
};
use ebm_core::Error;
use serde::Serialize;

use super::{load_utterances, write_json, Progress};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.ebmc";
pub const LOSS_TRACE_FILE: &str = "loss.csv";

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_loss: Option<f64>,
    /// Held-out `E(x, Y+) < E(x, Y-)` rate with fresh negatives.
    pub margin_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

pub(crate) fn training_set<'a>(
    utts: &'a [Utterance],
    spec: &NegativeSpec,
    model: &ModelConfig,
) -> CliResult<TrainingSet<'a>> {
    if spec.source != SourceKind::File {
        return Ok(TrainingSet::new(utts, spec)?);
    }
    let path = spec.hypothesis_manifest.as_ref().expect("validated");
    let hyps = load_utterances(path, model)?;
    let map: HashMap<String, _> = hyps.into_iter().map(|u| (u.id, u.features)).collect();
    Ok(TrainingSet::with_source(
        utts,
        spec,
        HypothesisSource::File(Arc::new(map)),
    ))
}

/// Trains from `state` up to `config.iterations`. `on_row` sees every trace
/// row together with the state right after that update.
pub fn train_model(
    config: &TrainConfig,
    set: &TrainingSet<'_>,
    state: &mut TrainState,
    progress: Progress,
    mut on_row: impl FnMut(&TraceRow, &TrainState) -> CliResult<()>,
) -> CliResult<Vec<TraceRow>> {
    let mut deferred: Option<CliError> = None;
    let result = ebm_core::training::train(config, set, state, |row, st| {
        if row.iteration % 100 == 0 {
            progress.note(format!(
                "iter {:>6}  loss {:.4}  E+ {:.3}  E- {:.3}",
                row.iteration, row.loss, row.e_pos_mean, row.e_neg_mean
            ));
        }
        on_row(row, st).map_err(|e| {
            let msg = e.to_string();
            deferred = Some(e);
            Error::Data(msg)
        })
    });
    match (result, deferred) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}

fn prior_trace(resume: &Path, iteration: u64) -> CliResult<Vec<TraceRow>> {
    let dir = resume.parent().unwrap_or(Path::new("."));
    let candidates = [dir.join(LOSS_TRACE_FILE), dir.join("..").join(LOSS_TRACE_FILE)];
    let path = candidates.iter().find(|p| p.exists()).ok_or_else(|| {
        Error::Data(format!(
            "no {LOSS_TRACE_FILE} next to {} to continue from",
            resume.display()
        ))
    })?;
    let rows: Vec<TraceRow> = read_loss_trace(path)?
        .into_iter()
        .filter(|r| r.iteration <= iteration)
        .collect();
    if rows.len() as u64 != iteration {
        return Err(Error::Data(format!(
            "{} holds {} rows up to iteration {iteration}",
            path.display(),
            rows.len()
        ))
        .into());
    }
    Ok(rows)
}

pub fn train(cfg: &RunConfig, progress: Progress) -> CliResult<TrainSummary> {
    let out = &cfg.output;
    cfg.write_resolved(out)?;
    let utts = load_utterances(&cfg.inputs.train, &cfg.model)?;
    let set = training_set(&utts, &cfg.train.negatives, &cfg.model)?;

    let (mut state, mut rows) = match &cfg.inputs.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if ckpt.params.config() != &cfg.model {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            let state = TrainState::from_checkpoint(ckpt)?;
            let rows = prior_trace(path, state.iteration)?;
            progress.note(format!("resuming at iteration {}", state.iteration));
            (state, rows)
        }
        None => (TrainState::new(&cfg.model, &cfg.train)?, Vec::new()),
    };

    let interval = cfg.train.checkpoint_interval;
    let ckpt_dir = out.join("checkpoints");
    let mut so_far = rows.clone();
    let new_rows = train_model(&cfg.train, &set, &mut state, progress, |row, st| {
        so_far.push(*row);
        if interval > 0 && row.iteration % interval == 0 && row.iteration < cfg.train.iterations {
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
            save_checkpoint(
                &ckpt_dir.join(format!("iter-{:06}.ebmc", row.iteration)),
                &st.to_checkpoint(),
            )?;
            write_loss_trace(&out.join(LOSS_TRACE_FILE), &so_far)?;
        }
        Ok(())
    })?;
    rows.extend(new_rows);

    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &state.to_checkpoint())?;
    write_loss_trace(&out.join(LOSS_TRACE_FILE), &rows)?;

    let margin = match &cfg.inputs.validation {
        Some(path) => {
            let held_out = load_utterances(path, &cfg.model)?;
            let set = training_set(&held_out, &cfg.train.negatives, &cfg.model)?;
            let set = TrainingSet {
                fill: training_fill(&utts, &cfg.train.negatives),
                ..set
            };
            Some(margin_accuracy(
                &state.params,
                &cfg.train.negatives,
                &set,
                derive_seed(cfg.train.seed, "validation", 0),
            )?)
        }
        None => None,
    };
    let summary = TrainSummary {
        iterations: state.iteration,
        final_loss: rows.last().map(|r| r.loss),
        margin_accuracy: margin,
        checkpoint,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Held-out negatives use the training corpus fill so they match what the
/// model was trained against.
pub(crate) fn training_fill(train: &[Utterance], spec: &NegativeSpec) -> f64 {
    spec.fill
        .unwrap_or_else(|| ebm_core::data::corpus_min(train.iter().map(|u| &u.features)))
}
