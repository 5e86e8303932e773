use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ebm_cli::commands::{self, Progress};
use ebm_cli::{CliResult, RunConfig};

/// Energy-based refinement of synthetic acoustic features.
#[derive(Parser)]
#[command(name = "ebm", version)]
struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Global seed; replaces every per-section seed.
    #[arg(long)]
    seed: Option<u64>,
    /// No progress output on stderr.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, its splits and degraded hypotheses.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the energy model with NCE.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out manifest for the final margin check.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Refine hypotheses by sampling from the trained energy.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Hypothesis manifest.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Number of sampler steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score hypotheses against references (MCD, FFE, log-F0 RMSE).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        hypotheses: Option<PathBuf>,
    },
    /// Run several samplers from the same hypotheses and plot energy and MCD per step.
    CompareSamplers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        hypotheses: Option<PathBuf>,
    },
    /// Train and evaluate the negative-sampling grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        hypotheses: Option<PathBuf>,
    },
}

fn path_value(p: PathBuf) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn resolve(common: &Common, mut typed: Vec<(String, toml::Value)>) -> CliResult<RunConfig> {
    if let Some(o) = &common.output {
        typed.push(("output".into(), path_value(o.clone())));
    }
    if let Some(s) = common.seed {
        typed.push(("seed".into(), toml::Value::Integer(s as i64)));
    }
    RunConfig::load_with(common.config.as_deref(), &common.overrides, &typed)
}

fn paths(pairs: Vec<(&str, Option<PathBuf>)>) -> Vec<(String, toml::Value)> {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_string(), path_value(p))))
        .collect()
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("summary serialises")
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::GenData { common } => {
            let cfg = resolve(&common, vec![])?;
            Ok(json(&commands::gen_data(&cfg, Progress(!common.quiet))?))
        }
        Command::Train {
            common,
            data,
            validation,
            resume,
        } => {
            let typed = paths(vec![
                ("inputs.train", data),
                ("inputs.validation", validation),
                ("inputs.resume", resume),
            ]);
            let cfg = resolve(&common, typed)?;
            Ok(json(&commands::train(&cfg, Progress(!common.quiet))?))
        }
        Command::Refine {
            common,
            checkpoint,
            input,
            steps,
        } => {
            let mut typed = paths(vec![("inputs.checkpoint", checkpoint), ("inputs.hypotheses", input)]);
            if let Some(n) = steps {
                typed.push(("sampler.steps".into(), toml::Value::Integer(n as i64)));
            }
            let cfg = resolve(&common, typed)?;
            Ok(json(&commands::refine(&cfg, Progress(!common.quiet))?))
        }
        Command::Eval {
            common,
            reference,
            hypotheses,
        } => {
            let typed = paths(vec![("inputs.reference", reference), ("inputs.hypotheses", hypotheses)]);
            let cfg = resolve(&common, typed)?;
            Ok(json(&commands::eval(&cfg, Progress(!common.quiet))?.summary))
        }
        Command::CompareSamplers {
            common,
            checkpoint,
            reference,
            hypotheses,
        } => {
            let typed = paths(vec![
                ("inputs.checkpoint", checkpoint),
                ("inputs.reference", reference),
                ("inputs.hypotheses", hypotheses),
            ]);
            let cfg = resolve(&common, typed)?;
            let rows = commands::compare_samplers(&cfg, Progress(!common.quiet))?;
            let last: Vec<_> = cfg
                .compare
                .variants
                .iter()
                .filter_map(|v| rows.iter().rev().find(|r| r.sampler == *v))
                .collect();
            Ok(json(&last))
        }
        Command::Ablate {
            common,
            data,
            reference,
            hypotheses,
        } => {
            let typed = paths(vec![
                ("inputs.train", data),
                ("inputs.reference", reference),
                ("inputs.hypotheses", hypotheses),
            ]);
            let cfg = resolve(&common, typed)?;
            Ok(json(&commands::ablate(&cfg, Progress(!common.quiet))?))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.dump_defaults {
        // A closed pipe (`| head`) is not an error worth reporting.
        let _ = write!(std::io::stdout(), "{}", RunConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
