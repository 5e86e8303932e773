//! One TOML document configures every subcommand. Each command reads the
//! sections it needs; `--set section.key=value` patches the document before
//! it is deserialised, so overrides go through the same validation as the
//! file itself.

use std::path::{Path, PathBuf};

use ebm_core::data::SplitFractions;
use ebm_core::data::SyntheticTaskSpec;
use ebm_core::model::ModelConfig;
use ebm_core::negatives::NegativeMethod;
use ebm_core::samplers::{SamplerConfig, SamplerVariant};
use ebm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When present, replaces every per-section seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub task: SyntheticTaskSpec,
    pub data: DataConfig,
    pub inputs: Inputs,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output: PathBuf::from("out"),
            task: SyntheticTaskSpec::default(),
            data: DataConfig::default(),
            inputs: Inputs::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Settings of `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub fractions: SplitFractions,
    /// Smoothing width and noise of the degraded hypotheses written next to
    /// every split.
    pub hypothesis_width: usize,
    pub hypothesis_noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 2400,
            fractions: SplitFractions::default(),
            hypothesis_width: 5,
            hypothesis_noise: 0.1,
            seed: 0,
        }
    }
}

/// Files consumed by the commands. Relative paths resolve against the
/// working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub train: PathBuf,
    /// Held-out references for the margin check after training; optional.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    pub reference: PathBuf,
    pub hypotheses: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for Inputs {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.json"),
            validation: None,
            reference: PathBuf::from("data/test.json"),
            hypotheses: PathBuf::from("data/hyp-test.json"),
            checkpoint: PathBuf::from("out/checkpoint.ebmc"),
            resume: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cepstral coefficients used by MCD; absent means min(13, F - 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cepstral_order: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub variants: Vec<SamplerVariant>,
    /// Only the first `limit` hypotheses are refined.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            variants: vec![SamplerVariant::Langevin, SamplerVariant::AnnealedScore],
            limit: Some(50),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Single-method grid, one training run per entry.
    pub singles: Vec<NegativeMethod>,
    /// Method sets trained together, one run per row.
    pub combinations: Vec<Vec<NegativeMethod>>,
    /// Training iterations per run; absent means `train.iterations`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    /// Only the first `test_limit` test hypotheses are refined per run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Parallel member runs; absent means `EBM_WORKERS` or the core count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        use NegativeMethod::*;
        Self {
            singles: vec![
                TimeMask(0.05),
                TimeMask(0.10),
                TimeMask(0.15),
                FreqMask(0.05),
                FreqMask(0.10),
                FreqMask(0.15),
                TimeWarp(1.2),
                TimeWarp(1.1),
                TimeWarp(0.9),
                TimeWarp(0.8),
                RandomMask(0.25),
                RandomMask(0.30),
            ],
            combinations: vec![
                vec![RandomMask(0.30)],
                vec![RandomMask(0.30), TimeMask(0.05)],
                vec![RandomMask(0.30), FreqMask(0.05)],
                vec![RandomMask(0.30), TimeWarp(1.2)],
                vec![RandomMask(0.30), TimeMask(0.05), FreqMask(0.05), TimeWarp(1.2)],
            ],
            iterations: None,
            test_limit: None,
            workers: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        Self::load_with(path, overrides, &[])
    }

    /// Like [`RunConfig::load`], then applies already-typed values (from
    /// dedicated command-line flags) last.
    pub fn load_with(path: Option<&Path>, overrides: &[String], typed: &[(String, toml::Value)]) -> CliResult<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        for (key, value) in typed {
            set_key(&mut doc, key, value.clone())?;
        }
        let mut cfg: RunConfig =
            RunConfig::deserialize(toml::Value::Table(doc)).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.apply_global_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_global_seed(&mut self) {
        if let Some(s) = self.seed {
            self.task.seed = s;
            self.data.seed = s;
            self.train.seed = s;
            self.train.negatives.seed = s;
            self.sampler.seed = s;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.model.vocab_size != self.task.vocab_size || self.model.feature_dim != self.task.feature_dim {
            return Err(CliError::Config(format!(
                "model (vocab {}, features {}) does not match task (vocab {}, features {})",
                self.model.vocab_size, self.model.feature_dim, self.task.vocab_size, self.task.feature_dim
            )));
        }
        if self.compare.variants.is_empty() {
            return Err(CliError::Config("compare.variants must not be empty".into()));
        }
        if self.ablate.workers == Some(0) {
            return Err(CliError::Config("ablate.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Writes the effective configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}

/// `a.b.c=value`; the value is read as a TOML literal when it parses as one
/// and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, raw: &str) -> CliResult<()> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not key=value")))?;
    set_key(doc, key.trim(), parse_value(value.trim()))
}

fn set_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Worker count: explicit setting, else `EBM_WORKERS`, else the core count.
pub fn worker_count(explicit: Option<usize>) -> CliResult<usize> {
    if let Some(n) = explicit {
        return Ok(n);
    }
    match std::env::var("EBM_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "EBM_WORKERS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
