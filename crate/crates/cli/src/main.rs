//! `bdlab` — experiment driver for the language-conditioned backdoor
//! laboratory. Subcommands cover the full pipeline: data preparation, the
//! joint attack, standalone evaluation, the defense battery, data-poisoning
//! transfer, and report emission.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, bad config
//! document, invalid settings), 2 runtime failure (I/O, numerical divergence,
//! corrupt artifacts).
//!
//! Configuration precedence: every flag mirrors a config key, and a key
//! present in the `--config` file **overrides** the flag. Flags fill in only
//! the keys the file leaves unset.

mod artifact;
mod commands;
mod overrides;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use bdlab_core::error::Error;

/// Flags shared by every run-producing subcommand. Each one mirrors a config
/// key (named in its help text); the config file wins when both are given.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config document (TOML). Keys present in it override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Master seed (config key: seed). Mandatory here or in the file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Evaluation-draw seed (config key: eval_seed; defaults to seed).
    #[arg(long)]
    pub eval_seed: Option<u64>,

    /// Artifact root directory (config key: output_dir).
    #[arg(long)]
    pub output_dir: Option<PathBuf>,

    /// Ablation preset (config key: ablation): one_hot_baseline,
    /// llm_feature_baseline, victim_semantics_only, lexical_variations_only,
    /// or full.
    #[arg(long)]
    pub ablation: Option<String>,

    /// Trigger budget in L-infinity (config key: attack.epsilon).
    #[arg(long)]
    pub epsilon: Option<f64>,

    /// Backdoor minibatch fraction (config key: attack.p).
    #[arg(long)]
    pub p: Option<f64>,

    /// Training epochs (config key: schedule.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Minibatch size (config key: schedule.batch_size).
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Initial learning rate (config key: schedule.learning_rate).
    #[arg(long)]
    pub learning_rate: Option<f64>,

    /// Victim architecture, mlp or cnn (config key: victim.architecture).
    #[arg(long)]
    pub arch: Option<String>,

    /// Instruction-set fixture path (config key: instructions.fixture).
    #[arg(long)]
    pub fixture: Option<PathBuf>,

    /// Name for the artifact directory (default: "<command>-seed<seed>").
    #[arg(long)]
    pub name: Option<String>,

    /// Overwrite an existing artifact directory of the same name.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Parser)]
#[command(
    name = "bdlab",
    version,
    about = "Language-conditioned backdoor laboratory",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialize deterministic train/test/reserved splits on disk.
    PrepareData(ConfigArgs),
    /// Jointly train a victim and trigger generator, then evaluate the attack.
    Attack(AttackArgs),
    /// Re-evaluate a finished attack run from its checkpoints.
    Evaluate(RunRefArgs),
    /// Sweep the configured defenses against a finished attack run.
    Defend(DefendArgs),
    /// Poison a training set with a finished run's generator and retrain.
    Poison(PoisonArgs),
    /// Render tables, CSVs, and plots from finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct RunRefArgs {
    /// Artifact directory of the attack run to work from.
    #[arg(long)]
    run: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct DefendArgs {
    /// Artifact directory of the attack run to defend against.
    #[arg(long)]
    run: PathBuf,

    /// Clean-accuracy budget (points) for the strength selection rule.
    #[arg(long, default_value_t = 5.0)]
    budget: f64,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct PoisonArgs {
    /// Artifact directory of the attack run providing the trigger generator.
    #[arg(long)]
    run: PathBuf,

    /// Fraction of training samples to poison (config key: poison.ratio).
    #[arg(long)]
    ratio: Option<f64>,

    /// Architecture to retrain, mlp or cnn (config key:
    /// poison.retrain_architecture; defaults to the victim's).
    #[arg(long)]
    retrain_arch: Option<String>,

    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Artifact directories of the runs to include.
    #[arg(required = true)]
    runs: Vec<PathBuf>,

    /// Directory the report files are written into.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

/// Config-class failures exit 1; everything else is a runtime failure (2).
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Template(_)
        | Error::InvalidInstructionSet(_)
        | Error::TomlParse(_)
        | Error::FileFormat { .. } => 1,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    let outcome = match cli.command {
        Command::PrepareData(args) => commands::prepare_data(&args),
        Command::Attack(args) => commands::attack(&args.config),
        Command::Evaluate(args) => commands::evaluate(&args.run, &args.config),
        Command::Defend(args) => commands::defend(&args.run, args.budget, &args.config),
        Command::Poison(args) =>

            commands::poison(&args.run, args.ratio, args.retrain_arch.as_deref(), &args.config),
        Command::Report(args) => commands::report(&args.runs, &args.out),
    };
    match outcome {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
