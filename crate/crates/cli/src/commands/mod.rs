//! One function per subcommand. Each takes a resolved [`RunConfig`], writes
//! its artifacts plus the resolved config under `config.output`, and returns
//! a summary that `main` prints.

mod ablate;
mod compare;
mod eval;
mod gen_data;
mod refine;
mod train;

pub use ablate::{ablate, ablation_label, AblationRow, ABLATION_HEADER};
pub use compare::{compare_samplers, CompareRow, COMPARISON_HEADER};
pub use eval::{eval, evaluate_all};
pub use gen_data::{gen_data, GenDataSummary};
pub use refine::{refine, refine_all, RefineSummary};
pub use train::{train, train_model, TrainSummary, CHECKPOINT_FILE, LOSS_TRACE_FILE};

use std::collections::HashMap;
use std::path::Path;

use ebm_core::data::{load_split, Utterance};
use ebm_core::model::{ModelConfig, ModelParams};
use ebm_core::training::load_checkpoint;
use ebm_core::Error;

use crate::error::{CliError, CliResult};

/// Progress lines on stderr, silenced in tests.
#[derive(Clone, Copy, Debug)]
pub struct Progress(pub bool);

impl Progress {
    pub fn note(&self, msg: impl AsRef<str>) {
        if self.0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub(crate) fn load_utterances(path: &Path, model: &ModelConfig) -> CliResult<Vec<Utterance>> {
    let (_, utts) = load_split(path, model.vocab_size).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if let Some(u) = utts.iter().find(|u| u.features.dim() != model.feature_dim) {
        return Err(Error::Data(format!(
            "utterance `{}` in {} has {} feature bins, the model expects {}",
            u.id,
            path.display(),
            u.features.dim(),
            model.feature_dim
        ))
        .into());
    }
    Ok(utts)
}

pub(crate) fn load_params(path: &Path, model: &ModelConfig) -> CliResult<ModelParams> {
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} does not exist", path.display())).into());
    }
    let params = load_checkpoint(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .params;
    if params.config() != model {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(params)
}

/// Pairs hypotheses with references by id; every id must appear on both sides.
pub(crate) fn pair_by_id<'a>(
    references: &'a [Utterance],
    hypotheses: &'a [Utterance],
) -> CliResult<Vec<(&'a Utterance, &'a Utterance)>> {
    let refs: HashMap<&str, &Utterance> = references.iter().map(|u| (u.id.as_str(), u)).collect();
    let hyp_ids: HashMap<&str, ()> = hypotheses.iter().map(|u| (u.id.as_str(), ())).collect();
    let no_ref: Vec<&str> = hypotheses
        .iter()
        .map(|u| u.id.as_str())
        .filter(|id| !refs.contains_key(id))
        .collect();
    let no_hyp: Vec<&str> = references
        .iter()
        .map(|u| u.id.as_str())
        .filter(|id| !hyp_ids.contains_key(id))
        .collect();
    if !no_ref.is_empty() || !no_hyp.is_empty() {
        let mut msg = String::from("reference and hypothesis sets differ");
        if !no_hyp.is_empty() {
            msg += &format!("; missing hypotheses: {}", no_hyp.join(", "));
        }
        if !no_ref.is_empty() {
            msg += &format!("; missing references: {}", no_ref.join(", "));
        }
        return Err(Error::Data(msg).into());
    }
    Ok(hypotheses.iter().map(|h| (refs[h.id.as_str()], h)).collect())
}

/// Names the utterance in an error without changing its exit category.
pub(crate) fn in_utterance(id: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("utterance `{id}`: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("utterance `{id}`: {m}")),
        other => Error::Data(format!("utterance `{id}`: {other}")),
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value).expect("summary serialises");
    write_text(path, &(json + "\n"))
}
