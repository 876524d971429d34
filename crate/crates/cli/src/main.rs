use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

use clap::{Args, Parser, Subcommand};
use ttct_cli::commands::{self, sidecar_path, write_sidecar, Ctx};
use ttct_cli::config::{self, RunConfig, OUTPUT_ROOT_ENV};
use ttct_cli::error::CliResult;
use ttct_core::constraint::Family;
use ttct_core::saferl::Mode;

#[derive(Parser)]
#[command(
    name = "ttct",
    version,
    about = "Textual trajectory constraints: corpus, alignment, calibration, safe RL, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Root directory for relative artifact paths.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set rl.iterations=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out episodes, label them against sampled constraints and write the corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        /// Comma-separated constraint families.
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
    },
    /// Train the trajectory/text alignment model.
    TrainTtct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit the violation threshold on held-out pairs.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        per_family: bool,
    },
    /// Train policies for each requested mode and seed.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes: cp, gc, ppo_only.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Held-out AUC, Pareto frontier, zero-shot transfer and a per-step cost breakdown.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run records to place on the Pareto plot.
        #[arg(long)]
        runs: Vec<PathBuf>,
        /// Held-out pair broken down per step.
        #[arg(long)]
        pair: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::TrainTtct { .. } => "train-ttct",
            Command::Calibrate { .. } => "calibrate",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Eval { .. } => "eval",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus { common, .. }
            | Command::TrainTtct { common, .. }
            | Command::Calibrate { common, .. }
            | Command::TrainPolicy { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

fn load(cmd: &Command) -> CliResult<Ctx> {
    let common = cmd.common();
    let mut cfg: RunConfig = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    match cmd {
        Command::GenCorpus { episodes, families, .. } => {
            if let Some(n) = episodes {
                cfg.corpus.n_episodes = *n;
            }
            if !families.is_empty() {
                cfg.corpus.constraints.families = families.clone();
            }
        }
        Command::TrainTtct { epochs, .. } => {
            if let Some(e) = epochs {
                cfg.ttct.train.epochs = *e;
            }
        }
        Command::Calibrate { per_family, .. } => cfg.calibrate.per_family |= per_family,
        Command::TrainPolicy { modes, seeds, iterations, .. } => {
            if !modes.is_empty() {
                cfg.policy.modes = modes.clone();
            }
            if !seeds.is_empty() {
                cfg.policy.seeds = seeds.clone();
            }
            if let Some(i) = iterations {
                cfg.rl.iterations = *i;
            }
        }
        Command::Eval { runs, pair, .. } => {
            if !runs.is_empty() {
                cfg.eval.runs = runs.clone();
            }
            if let Some(p) = pair {
                cfg.eval.heatmap_pair = *p;
            }
        }
    }
    Ok(Ctx { cfg, root: config::output_root(common.out.as_deref()) })
}

fn run(cmd: &Command) -> CliResult<()> {
    let ctx = load(cmd)?;
    let (started, clock) = (SystemTime::now(), Instant::now());
    let artifact = match cmd {
        Command::GenCorpus { .. } => commands::gen_corpus(&ctx)?,
        Command::TrainTtct { resume, .. } => commands::train_ttct(&ctx, resume.as_deref())?,
        Command::Calibrate { .. } => {
            commands::calibrate(&ctx)?;
            ctx.path(&ctx.cfg.paths.calibration)
        }
        Command::TrainPolicy { .. } => {
            commands::train_policies(&ctx)?;
            ctx.path(&ctx.cfg.paths.policy_dir).join(commands::POLICY_SUMMARY_FILE)
        }
        Command::Eval { .. } => {
            commands::eval(&ctx)?;
            ctx.path(&ctx.cfg.paths.eval_dir).join("summary.json")
        }
    };
    write_sidecar(&sidecar_path(&artifact), cmd.name(), started, clock)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ttct {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
