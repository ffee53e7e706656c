use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdmprune_cli::commands;
use sdmprune_cli::config::RunConfig;
use sdmprune_core::error::Error;

/// Self-distillation structural pruning of transformer MLP neurons.
#[derive(Parser)]
#[command(name = "sdmprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides `prune.target_ratio`.
    #[arg(long)]
    ratio: Option<f64>,
    /// Overrides `prune.alpha`.
    #[arg(long)]
    alpha: Option<f64>,
    /// Overrides `prune.temperature`.
    #[arg(long)]
    temperature: Option<f64>,
    /// Overrides `prune.criterion`.
    #[arg(long)]
    criterion: Option<String>,
    /// Overrides `prune.scope`.
    #[arg(long)]
    scope: Option<String>,
    /// Any other override, as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{key}={v}"));
            }
        };
        push("run.seed", self.seed.map(|v| v.to_string()));
        push("prune.target_ratio", self.ratio.map(|v| format!("{v:?}")));
        push("prune.alpha", self.alpha.map(|v| format!("{v:?}")));
        push("prune.temperature", self.temperature.map(|v| format!("{v:?}")));
        push("prune.criterion", self.criterion.as_ref().map(|v| format!("{v:?}")));
        push("prune.scope", self.scope.as_ref().map(|v| format!("{v:?}")));
        out
    }

    fn load(&self) -> Result<RunConfig, Error> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on the configured corpus.
    Pretrain(Common),
    /// Prune a checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Recovery finetuning of a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Perplexity, parameters and MACs of one or more checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
    },
    /// Rank agreement of Taylor scores with exact zero-out deltas.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Resumable prune, finetune and evaluate grid.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the effective configuration with every default spelled out.
    Dump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SDMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("SDMP_THREADS `{v}` is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain(c) => commands::cmd_pretrain(&c.load()?, &c.out).map(drop),
        Command::Prune { common, base } => commands::cmd_prune(&common.load()?, &base, &common.out).map(drop),
        Command::Finetune { common, model } => {
            commands::cmd_finetune(&common.load()?, &model, &common.out).map(drop)
        }
        Command::Eval { common, model } => commands::cmd_eval(&common.load()?, &model, &common.out).map(drop),
        Command::Oracle { common, base } => commands::cmd_oracle(&common.load()?, &base, &common.out).map(drop),
        Command::Grid { common, base } => commands::cmd_grid(&common.load()?, &base, &common.out).map(drop),
        Command::Config {
            action: ConfigAction::Dump { config, set },
        } => {
            print!("{}", RunConfig::load(config.as_deref(), &set)?.to_toml());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 3,
        Error::Input(_) | Error::Config(_) | Error::Io { .. } | Error::Checkpoint { .. } | Error::Csv(_) => 2,
        Error::Dimension { .. } | Error::Domain { .. } | Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
