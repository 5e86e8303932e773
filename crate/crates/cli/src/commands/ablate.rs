use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ebm_core::data::Utterance;
use ebm_core::metrics::MetricsSummary;
use ebm_core::negatives::{NegativeMethod, NegativeSpec};
use ebm_core::rng::derive_seed;
use ebm_core::training::{margin_accuracy, save_checkpoint, write_loss_trace, TrainState, TrainingSet};
use serde::Serialize;

use super::train::{training_fill, training_set, CHECKPOINT_FILE, LOSS_TRACE_FILE};
use super::{evaluate_all, load_utterances, pair_by_id, refine_all, train_model, write_json, write_text, Progress};
use crate::config::{worker_count, RunConfig};
use crate::error::{CliError, CliResult};
use crate::parallel;

pub const ABLATION_HEADER: &str = "group,label,status,n,mcd_mean,mcd_ci95,mcd_median,ffe_mean,ffe_ci95,log_f0_rmse_mean,log_f0_rmse_ci95,margin_accuracy,error";

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    /// `baseline`, `single` or `combination`.
    pub group: String,
    pub label: String,
    pub ok: bool,
    pub metrics: Option<MetricsSummary>,
    pub margin_accuracy: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    fn csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let m = self.metrics.as_ref();
        let rmse = m.and_then(|s| s.log_f0_rmse);
        let err = self.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.group,
            self.label,
            if self.ok { "ok" } else { "failed" },
            m.map(|s| s.mcd.n.to_string()).unwrap_or_default(),
            f(m.map(|s| s.mcd.mean)),
            f(m.map(|s| s.mcd.ci95)),
            f(m.map(|s| s.mcd.median)),
            f(m.map(|s| s.ffe.mean)),
            f(m.map(|s| s.ffe.ci95)),
            f(rmse.map(|a| a.mean)),
            f(rmse.map(|a| a.ci95)),
            f(self.margin_accuracy),
            err
        )
    }
}

/// Row label of a method set, e.g. `RM30+TM5`.
pub fn ablation_label(methods: &[NegativeMethod]) -> String {
    NegativeSpec {
        methods: methods.to_vec(),
        ..NegativeSpec::default()
    }
    .label()
}

struct Shared<'a> {
    cfg: &'a RunConfig,
    train: &'a [Utterance],
    references: &'a [Utterance],
    hypotheses: &'a [Utterance],
}

/// Train, score held-out margins, refine the test hypotheses, evaluate.
fn member_run(s: &Shared<'_>, methods: &[NegativeMethod], dir: &Path) -> CliResult<(MetricsSummary, f64)> {
    let cfg = s.cfg;
    let mut tc = cfg.train.clone();
    tc.negatives.methods = methods.to_vec();
    tc.iterations = cfg.ablate.iterations.unwrap_or(tc.iterations);
    let set = training_set(s.train, &tc.negatives, &cfg.model)?;
    let mut state = TrainState::new(&cfg.model, &tc)?;
    let rows = train_model(&tc, &set, &mut state, Progress(false), |_, _| Ok(()))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &state.to_checkpoint())?;
    write_loss_trace(&dir.join(LOSS_TRACE_FILE), &rows)?;

    let held_out = training_set(s.references, &tc.negatives, &cfg.model)?;
    let held_out = TrainingSet {
        fill: training_fill(s.train, &tc.negatives),
        ..held_out
    };
    let margin = margin_accuracy(
        &state.params,
        &tc.negatives,
        &held_out,
        derive_seed(tc.seed, "validation", 0),
    )?;

    let traces = refine_all(&state.params, s.hypotheses, &cfg.sampler, 1)?;
    let refined: Vec<Utterance> = s
        .hypotheses
        .iter()
        .zip(traces)
        .map(|(u, t)| Utterance {
            features: t.final_state,
            ..u.clone()
        })
        .collect();
    let report = evaluate_all(s.references, &refined, cfg.eval.cepstral_order, 1)?;
    report.write_csv(&dir.join("metrics.csv"))?;
    Ok((report.summary, margin))
}

/// The single-method grid and the combination rows, each trained and
/// evaluated independently; a failed member is reported and the grid goes on.
/// Method sets that appear twice are trained once.
pub fn ablate(cfg: &RunConfig, progress: Progress) -> CliResult<Vec<AblationRow>> {
    let out = &cfg.output;
    cfg.write_resolved(out)?;
    let train = load_utterances(&cfg.inputs.train, &cfg.model)?;
    let mut hypotheses = load_utterances(&cfg.inputs.hypotheses, &cfg.model)?;
    if let Some(n) = cfg.ablate.test_limit {
        hypotheses.truncate(n);
    }
    let wanted: HashSet<&str> = hypotheses.iter().map(|u| u.id.as_str()).collect();
    let references: Vec<Utterance> = load_utterances(&cfg.inputs.reference, &cfg.model)?
        .into_iter()
        .filter(|u| wanted.contains(u.id.as_str()))
        .collect();
    pair_by_id(&references, &hypotheses)?;
    let workers = worker_count(cfg.ablate.workers)?;

    let mut plan: Vec<(&str, &[NegativeMethod])> = Vec::new();
    plan.extend(cfg.ablate.singles.iter().map(|m| ("single", std::slice::from_ref(m))));
    plan.extend(cfg.ablate.combinations.iter().map(|c| ("combination", c.as_slice())));
    let mut distinct: BTreeMap<String, &[NegativeMethod]> = BTreeMap::new();
    for (_, methods) in &plan {
        distinct.entry(ablation_label(methods)).or_insert(methods);
    }
    let jobs: Vec<(String, &[NegativeMethod])> = distinct.into_iter().collect();
    progress.note(format!(
        "{} grid rows, {} distinct training runs on {workers} workers",
        plan.len(),
        jobs.len()
    ));

    let shared = Shared {
        cfg,
        train: &train,
        references: &references,
        hypotheses: &hypotheses,
    };
    let results = parallel::map(&jobs, workers, |_, (label, methods)| {
        let r = member_run(&shared, methods, &out.join("runs").join(label));
        match &r {
            Ok((m, _)) => progress.note(format!("{label}: median MCD {:.4}", m.mcd.median)),
            Err(e) => progress.note(format!("{label}: failed: {e}")),
        }
        r.map_err(|e| e.to_string())
    });
    let by_label: BTreeMap<&str, &Result<(MetricsSummary, f64), String>> =
        jobs.iter().map(|(l, _)| l.as_str()).zip(&results).collect();

    let baseline = evaluate_all(&references, &hypotheses, cfg.eval.cepstral_order, workers)?;
    let mut rows = vec![AblationRow {
        group: "baseline".into(),
        label: "unrefined".into(),
        ok: true,
        metrics: Some(baseline.summary.clone()),
        margin_accuracy: None,
        error: None,
    }];
    for (group, methods) in &plan {
        let label = ablation_label(methods);
        let row = match by_label[label.as_str()] {
            Ok((m, margin)) => AblationRow {
                group: group.to_string(),
                label,
                ok: true,
                metrics: Some(m.clone()),
                margin_accuracy: Some(*margin),
                error: None,
            },
            Err(e) => AblationRow {
                group: group.to_string(),
                label,
                ok: false,
                metrics: None,
                margin_accuracy: None,
                error: Some(e.clone()),
            },
        };
        rows.push(row);
    }

    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv());
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}
