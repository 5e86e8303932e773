use std::path::PathBuf;

use ebm_core::data::{degrade_hypothesis, split_dataset, write_split, SyntheticTask, Utterance};
use ebm_core::rng::{derive_seed, seeded};
use serde::Serialize;

use super::Progress;
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Clone, Debug, Serialize)]
pub struct GenDataSummary {
    pub utterances: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub manifests: Vec<PathBuf>,
}

/// Writes `train`, `val` and `test` splits plus a `hyp-<split>` manifest of
/// degraded hypotheses for each.
pub fn gen_data(cfg: &RunConfig, progress: Progress) -> CliResult<GenDataSummary> {
    let out = &cfg.output;
    cfg.write_resolved(out)?;
    let task = SyntheticTask::new(cfg.task.clone())?;
    let utts = task.generate(cfg.data.count, &mut seeded(derive_seed(cfg.data.seed, "utterances", 0)))?;
    let split = split_dataset(utts.len(), cfg.data.fractions, derive_seed(cfg.data.seed, "split", 0))?;
    let mut manifests = Vec::new();
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let mut idx = idx.clone();
        idx.sort_unstable();
        let refs: Vec<&Utterance> = idx.iter().map(|&i| &utts[i]).collect();
        manifests.push(write_split(out, name, refs.iter().copied())?);
        let hyps = idx
            .iter()
            .map(|&i| {
                let u = &utts[i];
                let mut rng = seeded(derive_seed(cfg.data.seed, "hypothesis", i as u64));
                Ok(Utterance {
                    id: u.id.clone(),
                    text: u.text.clone(),
                    features: degrade_hypothesis(
                        &u.features,
                        cfg.data.hypothesis_width,
                        cfg.data.hypothesis_noise,
                        &mut rng,
                    )?,
                    f0: None,
                })
            })
            .collect::<ebm_core::Result<Vec<_>>>()?;
        manifests.push(write_split(out, &format!("hyp-{name}"), &hyps)?);
        progress.note(format!("{name}: {} utterances", idx.len()));
    }
    Ok(GenDataSummary {
        utterances: utts.len(),
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        manifests,
    })
}
