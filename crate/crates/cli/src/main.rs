mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gym_core::metrics::EstimatorMode;
use gym_core::store::{Store, STORE_ENV};
use gym_core::task::Split;

use commands::{CliError, Ctx, PolicyFlags};
use config::Config;

#[derive(Parser)]
#[command(name = "gym", version, about = "Build, run and score software-engineering agent tasks")]
struct Cli {
    /// Path to a gym.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store root; overrides the config file.
    #[arg(long, global = true, env = STORE_ENV)]
    store: Option<PathBuf>,
    /// More logging (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Raw,
    Full,
    Lite,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Raw => Split::Raw,
            SplitArg::Full => Split::Full,
            SplitArg::Lite => Split::Lite,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Exhaustive,
    Sampled,
}

impl From<ModeArg> for EstimatorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => EstimatorMode::Auto,
            ModeArg::Exhaustive => EstimatorMode::Exhaustive,
            ModeArg::Sampled => EstimatorMode::Sampled,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execution-validate a dataset and keep the instances that pass.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        split: SplitArg,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        /// Output name under the store's datasets directory.
        #[arg(long)]
        name: Option<String>,
    },
    /// Roll out an agent over a dataset; resumes an existing run.
    Rollout {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        split: SplitArg,
        /// gold-patch, noop, loop[:<cmd>], scripted:<file>, exec:<argv> or http:<url>
        #[arg(long)]
        agent: String,
        #[arg(long)]
        run_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        /// Stop after this many new rollouts.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Grade the final patches of a run.
    Evaluate {
        #[arg(long)]
        run_id: String,
        /// Defaults to the dataset recorded in the run manifest.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        split: SplitArg,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        /// Grade entries that already have a verdict too.
        #[arg(long)]
        regrade: bool,
    },
    /// Run a curation plan and write the export with a provenance sidecar.
    Curate {
        #[arg(long)]
        plan: PathBuf,
        /// name=run_id; plan inputs without one are read as run ids.
        #[arg(long = "input")]
        inputs: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pick the highest-scoring trajectory per instance.
    Rerank {
        #[arg(long = "run-id", required = true)]
        run_ids: Vec<String>,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pass@k / Best@k tables, rates and log-linear fits.
    Report {
        #[arg(long = "run-id", required = true)]
        run_ids: Vec<String>,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Require Best@k; fails without --scores.
        #[arg(long)]
        best: bool,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_subsamples: usize,
        #[arg(long, value_enum, default_value = "auto")]
        mode: ModeArg,
        /// Output name under the store's reports directory.
        #[arg(long)]
        name: Option<String>,
    },
    #[command(hide = true)]
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    context_budget: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    attempts: Option<usize>,
    #[arg(long)]
    first_attempt_greedy: bool,
    #[arg(long)]
    stop_on_loop: bool,
    #[arg(long)]
    observation_cap: Option<usize>,
}

impl From<PolicyArgs> for PolicyFlags {
    fn from(p: PolicyArgs) -> Self {
        Self {
            max_turns: p.max_turns,
            context_budget: p.context_budget,
            temperature: p.temperature,
            attempts: p.attempts,
            first_attempt_greedy: p.first_attempt_greedy,
            stop_on_loop: p.stop_on_loop,
            observation_cap: p.observation_cap,
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::ToyCorpus { out } = &cli.command {
        return commands::toy_corpus(out);
    }
    let config = Config::load(cli.config.as_deref())?;
    let store = Store::open(config.store_root(cli.store))?;
    tracing::debug!(root = %store.root().display(), "store");
    let ctx = Ctx { config, store };
    match cli.command {
        Command::Validate {
            dataset,
            split,
            parallelism,
            name,
        } => commands::validate(
            &ctx,
            commands::ValidateArgs {
                dataset,
                split: split.into(),
                parallelism,
                name,
            },
        ),
        Command::Rollout {
            dataset,
            split,
            agent,
            run_id,
            seed,
            parallelism,
            limit,
            policy,
        } => commands::rollout(
            &ctx,
            commands::RolloutArgs {
                dataset,
                split: split.into(),
                agent,
                run_id,
                seed,
                parallelism,
                limit,
                policy: policy.into(),
            },
        ),
        Command::Evaluate {
            run_id,
            dataset,
            split,
            parallelism,
            regrade,
        } => commands::evaluate(
            &ctx,
            commands::EvaluateArgs {
                run_id,
                dataset,
                split: split.into(),
                parallelism,
                regrade,
            },
        ),
        Command::Curate { plan, inputs, output } => {
            commands::curate_cmd(&ctx, commands::CurateArgs { plan, inputs, output })
        }
        Command::Rerank {
            run_ids,
            scores,
            output,
        } => commands::rerank(&ctx, commands::RerankArgs { run_ids, scores, output }),
        Command::Report {
            run_ids,
            scores,
            best,
            ks,
            seed,
            n_subsamples,
            mode,
            name,
        } => commands::report(
            &ctx,
            commands::ReportArgs {
                run_ids,
                scores,
                best,
                ks,
                seed,
                n_subsamples,
                mode: mode.into(),
                name,
            },
        ),
        Command::ToyCorpus { .. } => unreachable!(),
    }
}

/// The error chain joined with `: `, skipping causes already spelled out by
/// the message before them.
fn message(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.ends_with(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e.error));
            ExitCode::from(e.code)
        }
    }
}
