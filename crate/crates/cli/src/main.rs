use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rlhf_lab_cli::commands;
use rlhf_lab_cli::pipeline::{Algo, Head, ModeArg};
use rlhf_lab_cli::{CliError, ExitKind};

/// Desk-scale RLHF laboratory: synthetic preference data, reward-model
/// training with optional length disentanglement, PPO/ReMax tuning, and
/// score-versus-length evaluation.
#[derive(Parser)]
#[command(name = "rlhf-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the preference corpus and its statistics sidecar.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Config overrides as --section.field=value.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train a reward model on a generated corpus.
    TrainRm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value = "out/corpus.jsonl")]
        corpus: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run PPO or ReMax against a reward-model checkpoint.
    TrainRl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long, value_enum, default_value = "full")]
        head: Head,
        #[arg(long)]
        rm_checkpoint: PathBuf,
        /// SFT policy checkpoint; behavior-cloned from config when omitted.
        #[arg(long)]
        sft: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Judge a policy checkpoint against the SFT baseline.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        sft: Option<PathBuf>,
        #[arg(long, default_value = "out/eval.json")]
        out: PathBuf,
        /// Aggregate CSV to append a (length, win score) row to.
        #[arg(long)]
        append_to: Option<PathBuf>,
        #[arg(long, default_value = "adhoc")]
        run_id: String,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        #[arg(long, default_value = "adhoc")]
        arm: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Execute a sweep spec: train every cell, evaluate checkpoints, emit
    /// aggregate CSV, Pareto fronts, and an overlay plot.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
    /// Extract per-arm Pareto fronts from an aggregate CSV.
    Pareto {
        #[arg(long)]
        aggregate: PathBuf,
        #[arg(long, default_value = "out/pareto.csv")]
        out: PathBuf,
    },
    /// Render an aggregate CSV as an SVG scatter with fronts.
    Plot {
        #[arg(long)]
        aggregate: PathBuf,
        #[arg(long, default_value = "out/plot.svg")]
        out: PathBuf,
    },
    /// Write the default configuration to a file.
    InitConfig {
        #[arg(long, default_value = "config.json")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            config,
            out,
            overrides,
        } => commands::cmd_gen_data(&config, &out, &overrides),
        Command::TrainRm {
            config,
            mode,
            corpus,
            out,
            overrides,
        } => commands::cmd_train_rm(&config, mode, &corpus, &out, &overrides),
        Command::TrainRl {
            config,
            algo,
            head,
            rm_checkpoint,
            sft,
            out,
            run_seed,
            overrides,
        } => commands::cmd_train_rl(
            &config,
            algo,
            head,
            &rm_checkpoint,
            sft.as_deref(),
            &out,
            run_seed,
            &overrides,
        ),
        Command::Eval {
            config,
            policy,
            sft,
            out,
            append_to,
            run_id,
            checkpoint,
            arm,
            overrides,
        } => commands::cmd_eval(
            &config,
            &policy,
            sft.as_deref(),
            &out,
            append_to.as_deref(),
            &run_id,
            &checkpoint,
            &arm,
            &overrides,
        ),
        Command::Sweep { spec, out } => commands::cmd_sweep(&spec, &out),
        Command::Pareto { aggregate, out } => commands::cmd_pareto(&aggregate, &out),
        Command::Plot { aggregate, out } => commands::cmd_plot(&aggregate, &out),
        Command::InitConfig { out } => commands::cmd_init_config(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.kind {
                ExitKind::Usage => ExitCode::from(2),
                ExitKind::Runtime => ExitCode::from(1),
            }
        }
    }
}
