use std::path::PathBuf;
use std::process::ExitCode;

use casnet::config::{Algo, EnvSelection, PolicyKind, TrainConfig};
use casnet::eval::{self, EVAL_EPISODES, SCORES_HEADER};
use casnet::{Checkpoint, HarnessError, Result};
use casnet_core::envs;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "casnet", version, about = "Train and evaluate CASNET reacher policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Ppo,
    Sac,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
    Expert,
}

#[derive(Subcommand)]
enum Command {
    /// Train a general CASNET policy or a single-environment expert.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        algo: Option<AlgoArg>,
        /// Comma-separated environment names.
        #[arg(long, conflicts_with = "train_set")]
        envs: Option<String>,
        #[arg(long)]
        train_set: bool,
        /// Train a fully connected expert (needs exactly one env).
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = EVAL_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, required_if_eq("baseline", "expert"))]
        expert_checkpoint: Option<PathBuf>,
        /// Randomly initialized policies in the random baseline.
        #[arg(long, default_value_t = eval::RANDOM_POLICIES)]
        baseline_policies: usize,
    },
    /// Environment registry.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
    /// Render learning curves, and optionally a score chart, as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scores CSV as printed by `eval --baseline expert`.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RegistryAction {
    /// Print every environment as CSV.
    List,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, algo, envs, train_set, expert, seed, out, overrides } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv.split_once('=').ok_or_else(|| HarnessError::Config(format!("expected key=value, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.apply_env_seed()?;
            if let Some(a) = algo {
                cfg.algo = match a {
                    AlgoArg::Ppo => Algo::Ppo,
                    AlgoArg::Sac => Algo::Sac,
                };
            }
            if let Some(names) = envs {
                cfg.envs = names.parse()?;
            } else if train_set {
                cfg.envs = EnvSelection::TrainSet;
            }
            if expert {
                cfg.policy = PolicyKind::Expert;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let outcome = casnet::train(&cfg)?;
            println!(
                "{} updates, {} env steps; metrics {}; checkpoint {}",
                outcome.updates,
                outcome.env_steps,
                outcome.metrics.display(),
                outcome.final_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, env, episodes, seed, baseline, expert_checkpoint, baseline_policies } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let general = eval::eval_policy(&ckpt, &env, episodes, seed)?;
            match baseline {
                None => {
                    println!("env_name,mean_return,mean_final_distance");
                    println!("{env},{},{}", general.mean_return, general.mean_final_distance);
                }
                Some(Baseline::Random) => {
                    let random = eval::random_baseline(&env, baseline_policies, seed)?;
                    println!("env_name,mean_return,mean_final_distance,random_mean_return,random_mean_final_distance");
                    println!(
                        "{env},{},{},{},{}",
                        general.mean_return, general.mean_final_distance, random.mean_return, random.mean_final_distance
                    );
                }
                Some(Baseline::Expert) => {
                    let path = expert_checkpoint.expect("required by clap");
                    let expert = eval::eval_policy(&Checkpoint::load(&path)?, &env, episodes, seed)?;
                    let random = eval::random_baseline(&env, baseline_policies, seed)?;
                    let percent = eval::normalized_score(general.mean_return, random.mean_return, expert.mean_return)?;
                    println!("{}", SCORES_HEADER.join(","));
                    println!("{env},{},{},{},{percent}", general.mean_return, random.mean_return, expert.mean_return);
                }
            }
        }
        Command::Registry { action: RegistryAction::List } => {
            println!("{}", envs::REGISTRY_CSV_HEADER);
            for spec in envs::registry_load() {
                println!("{}", spec.csv_row());
            }
        }
        Command::Plot { metrics, out, scores } => {
            for path in casnet::plot::emit_plots(&metrics, &out, scores.as_deref())? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
