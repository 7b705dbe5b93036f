//! PPO and SAC training loops over one or more reacher environments.
//!
//! A run writes into its output directory:
//!
//! - `config.txt`, the canonical config snapshot;
//! - `metrics.csv`, one row per (update, environment);
//! - `checkpoint_NNNNNN.bin` every `checkpoint_every` updates and
//!   `checkpoint_final.bin` at the end.
//!
//! Every random draw comes from a ChaCha8 stream derived from the seed, so
//! a (config, seed) pair determines all outputs byte for byte.

use std::path::{Path, PathBuf};

use casnet_core::algos::{ppo_update, Adam, PpoStats, RolloutBuffer, RolloutStep, ReplayBuffer, SacAgent, SacStats, Transition};
use casnet_core::casnet::{evaluate, Actor, CasnetCritic, CasnetPolicy, Critic, ExpertPolicy, MlpCritic, ObsBatch, Observation};
use casnet_core::envs::{self, ReacherEnv, ReacherSpec};
use casnet_core::nn::{gaussian_logprob_value, standard_normal};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Algo, EnvSelection, PolicyKind, TrainConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::seeded_stream;

const STREAM_INIT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_UPDATE: u64 = 2;
const STREAM_FIXED_GOALS: u64 = 3;
const STREAM_ENV_BASE: u64 = 100;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub updates: u64,
    pub env_steps: u64,
}

/// Train whatever `cfg.policy` names on the environments `cfg.envs` selects.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let specs = cfg.validate()?;
    let out = prepare_out_dir(cfg)?;
    let mut init = seeded_stream(cfg.seed, STREAM_INIT);
    match (cfg.algo, cfg.policy) {
        (Algo::Ppo, PolicyKind::Casnet) => run_ppo(CasnetPolicy::new(&mut init)?, &specs, cfg, &out),
        (Algo::Ppo, PolicyKind::Expert) => run_ppo(ExpertPolicy::new(specs[0].n_links(), &mut init)?, &specs, cfg, &out),
        (Algo::Sac, PolicyKind::Casnet) => {
            let policy = CasnetPolicy::new(&mut init)?;
            let q1 = CasnetCritic::q(&mut init)?;
            let q2 = CasnetCritic::q(&mut init)?;
            let v = CasnetCritic::v(&mut init)?;
            run_sac(SacAgent::new(policy, q1, q2, v, cfg.sac.clone())?, &specs, cfg, &out)
        }
        (Algo::Sac, PolicyKind::Expert) => {
            let n = specs[0].n_links();
            let policy = ExpertPolicy::new(n, &mut init)?;
            let q1 = MlpCritic::q(n, &mut init)?;
            let q2 = MlpCritic::q(n, &mut init)?;
            let v = MlpCritic::v(n, &mut init)?;
            run_sac(SacAgent::new(policy, q1, q2, v, cfg.sac.clone())?, &specs, cfg, &out)
        }
    }
}

/// One shared CASNET policy over the selected environments.
pub fn train_general(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.policy = PolicyKind::Casnet;
    train(&cfg)
}

/// A fully connected expert on `env_name` with otherwise identical settings.
pub fn train_expert(env_name: &str, cfg: &TrainConfig) -> Result<TrainOutcome> {
    envs::find_spec(env_name)?;
    let mut cfg = cfg.clone();
    cfg.policy = PolicyKind::Expert;
    cfg.envs = EnvSelection::Names(vec![env_name.to_string()]);
    train(&cfg)
}

fn prepare_out_dir(cfg: &TrainConfig) -> Result<PathBuf> {
    let out = cfg.out_dir.clone().ok_or_else(|| HarnessError::Config("no output directory".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
    let snapshot = out.join(CONFIG_FILE);
    std::fs::write(&snapshot, cfg.to_text()).map_err(|e| HarnessError::io(&snapshot, e))?;
    Ok(out)
}

fn checkpoint_path(out: &Path, update: u64) -> PathBuf {
    out.join(format!("checkpoint_{update:06}.bin"))
}

fn mean_or_nan(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-environment episode bookkeeping.
struct Worker {
    env: ReacherEnv<ChaCha8Rng>,
    episode_return: f64,
    finished_returns: Vec<f64>,
    finished_distances: Vec<f64>,
}

impl Worker {
    fn observation(&self) -> Observation {
        Observation { pairs: self.env.observation(), goal: self.env.goal() }
    }

    fn finish_episode(&mut self) {
        self.finished_returns.push(self.episode_return);
        self.finished_distances.push(self.env.distance());
        self.episode_return = 0.0;
        self.env.reset();
    }

    fn drain_stats(&mut self) -> (f64, f64) {
        let s = (mean_or_nan(&self.finished_returns), mean_or_nan(&self.finished_distances));
        self.finished_returns.clear();
        self.finished_distances.clear();
        s
    }
}

/// The goal each environment keeps for a whole `sac_fixed_goal` run.
pub fn fixed_goals(specs: &[ReacherSpec], seed: u64) -> Vec<[f64; 2]> {
    let mut rng = seeded_stream(seed, STREAM_FIXED_GOALS);
    specs.iter().map(|s| envs::sample_goal(&s.link_lengths, &mut rng)).collect()
}

fn make_workers(specs: &[ReacherSpec], cfg: &TrainConfig, fixed: bool) -> Vec<Worker> {
    let goals = fixed.then(|| fixed_goals(specs, cfg.seed));
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let rng = seeded_stream(cfg.seed, STREAM_ENV_BASE + i as u64);
            let env = match &goals {
                Some(goals) => ReacherEnv::with_fixed_goal(spec.clone(), rng, goals[i]),
                None => ReacherEnv::new(spec.clone(), rng),
            };
            Worker { env, episode_return: 0.0, finished_returns: Vec::new(), finished_distances: Vec::new() }
        })
        .collect()
}

/// Split `total` into `parts` shares differing by at most one, larger first.
fn equal_shares(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

fn run_ppo<A: Actor>(mut actor: A, specs: &[ReacherSpec], cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    let ppo = &cfg.ppo;
    let mut workers = make_workers(specs, cfg, false);
    let mut noise_rng = seeded_stream(cfg.seed, STREAM_NOISE);
    let mut update_rng = seeded_stream(cfg.seed, STREAM_UPDATE);
    let mut opt = Adam::for_module(ppo.lr, &actor);
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let shares = equal_shares(ppo.rollout_len, specs.len());
    let snapshot = |actor: &A| {
        let mut c = Checkpoint::new(Algo::Ppo.as_str(), cfg.seed, &cfg.to_text());
        c.add_module("", actor);
        c
    };

    let mut env_steps = 0u64;
    let mut update = 0u64;
    let mut buffer = RolloutBuffer::new();
    while env_steps < cfg.total_env_steps {
        buffer.clear();
        // (worker index, cumulative steps after its block)
        let mut blocks = Vec::new();
        for (i, w) in workers.iter_mut().enumerate() {
            let block = (shares[i] as u64).min(cfg.total_env_steps - env_steps);
            if block == 0 {
                continue;
            }
            let mut last_done = false;
            for _ in 0..block {
                let obs = w.observation();
                let out = evaluate(&actor, &ObsBatch::from_observations([&obs])?)?;
                let mean = out.means.data();
                let log_std = out.log_std.data();
                let noise = standard_normal(mean.len(), &mut noise_rng);
                let action: Vec<f64> = (0..mean.len()).map(|k| mean[k] + log_std[k].exp() * noise[k]).collect();
                let log_prob = gaussian_logprob_value(mean, log_std, &action);
                let res = w.env.step(&action)?;
                w.episode_return += res.reward;
                let mut reward = res.reward;
                if res.done {
                    // The time limit is not a terminal state: fold the
                    // discounted value of the cut-off state into the reward.
                    let tail = evaluate(&actor, &ObsBatch::single(&res.observation, w.env.goal())?)?;
                    reward += ppo.gamma * tail.value.item();
                    w.finish_episode();
                }
                last_done = res.done;
                buffer.push(RolloutStep {
                    observation: obs,
                    action,
                    log_prob,
                    reward,
                    value: out.value.item(),
                    done: res.done,
                })?;
            }
            let bootstrap =
                if last_done { 0.0 } else { evaluate(&actor, &ObsBatch::from_observations([&w.observation()])?)?.value.item() };
            buffer.end_segment(bootstrap)?;
            env_steps += block;
            blocks.push((i, env_steps));
        }
        buffer.finalize(ppo.gamma, ppo.lambda)?;
        let stats: PpoStats = ppo_update(&mut actor, &mut opt, &buffer, ppo, &mut update_rng)?;
        for (i, steps) in blocks {
            let (mean_return, mean_final_distance) = workers[i].drain_stats();
            metrics.append(&MetricsRow {
                update_index: update,
                env_name: specs[i].name.clone(),
                cumulative_env_steps: steps,
                mean_return,
                mean_final_distance,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
                approx_kl: stats.approx_kl,
            })?;
        }
        update += 1;
        if cfg.checkpoint_every > 0 && update.is_multiple_of(cfg.checkpoint_every) {
            metrics.flush()?;
            snapshot(&actor).save(&checkpoint_path(out, update))?;
        }
    }
    metrics.flush()?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    snapshot(&actor).save(&final_checkpoint)?;
    Ok(TrainOutcome { metrics: metrics_path, final_checkpoint, updates: update, env_steps })
}

/// Checkpoint of a SAC agent: the policy under unprefixed names so it loads
/// like a PPO policy, then `q1.`, `q2.`, `value.` and `value_target.`.
pub fn sac_checkpoint<A: Actor, C: Critic + Clone>(agent: &SacAgent<A, C>, cfg: &TrainConfig) -> Checkpoint {
    let mut c = Checkpoint::new(Algo::Sac.as_str(), cfg.seed, &cfg.to_text());
    c.add_module("", &agent.policy);
    c.add_module("q1", &agent.q1);
    c.add_module("q2", &agent.q2);
    c.add_module("value", &agent.value);
    c.add_module("value_target", &agent.value_target);
    c
}

fn run_sac<A: Actor, C: Critic + Clone>(
    mut agent: SacAgent<A, C>,
    specs: &[ReacherSpec],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<TrainOutcome> {
    let sac = cfg.sac.clone();
    let mut workers = make_workers(specs, cfg, cfg.sac_fixed_goal);
    let mut noise_rng = seeded_stream(cfg.seed, STREAM_NOISE);
    let mut update_rng = seeded_stream(cfg.seed, STREAM_UPDATE);
    let mut replay = ReplayBuffer::new(sac.replay_capacity)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;

    let mut env_steps = 0u64;
    let mut next_log = cfg.sac_log_interval;
    let mut log_index = 0u64;
    let mut window: Vec<SacStats> = Vec::new();
    while env_steps < cfg.total_env_steps {
        // One transition per environment per cycle.
        let mut stepped = Vec::new();
        for (i, w) in workers.iter_mut().enumerate() {
            if env_steps >= cfg.total_env_steps {
                break;
            }
            let obs = w.observation();
            let n = obs.n_pairs();
            let action = if env_steps < sac.start_steps as u64 {
                (0..n).map(|_| noise_rng.random_range(-1.0..=1.0)).collect()
            } else {
                agent.act(&obs, Some(&standard_normal(n, &mut noise_rng)))?
            };
            let res = w.env.step(&action)?;
            w.episode_return += res.reward;
            // Episodes end only at the time limit, so no transition is terminal.
            replay.insert(Transition {
                observation: obs,
                action,
                reward: res.reward,
                next_observation: Observation { pairs: res.observation, goal: w.env.goal() },
                done: false,
            });
            if res.done {
                w.finish_episode();
            }
            env_steps += 1;
            stepped.push((i, env_steps));
            if env_steps > sac.start_steps as u64 && replay.len() >= sac.batch_size {
                let batch = replay.sample(sac.batch_size, &mut update_rng)?;
                window.push(agent.update(&batch, &mut update_rng)?);
            }
        }
        if env_steps >= next_log || env_steps >= cfg.total_env_steps {
            let avg = |f: fn(&SacStats) -> f64| mean_or_nan(&window.iter().map(f).collect::<Vec<_>>());
            for (i, steps) in stepped {
                let (mean_return, mean_final_distance) = workers[i].drain_stats();
                metrics.append(&MetricsRow {
                    update_index: log_index,
                    env_name: specs[i].name.clone(),
                    cumulative_env_steps: steps,
                    mean_return,
                    mean_final_distance,
                    policy_loss: avg(|s| s.policy_loss),
                    value_loss: avg(|s| s.q_loss),
                    entropy: avg(|s| s.entropy),
                    approx_kl: f64::NAN,
                })?;
            }
            window.clear();
            log_index += 1;
            while next_log <= env_steps {
                next_log += cfg.sac_log_interval;
            }
            if cfg.checkpoint_every > 0 && log_index.is_multiple_of(cfg.checkpoint_every) {
                metrics.flush()?;
                sac_checkpoint(&agent, cfg).save(&checkpoint_path(out, log_index))?;
            }
        }
    }
    metrics.flush()?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    sac_checkpoint(&agent, cfg).save(&final_checkpoint)?;
    Ok(TrainOutcome { metrics: metrics_path, final_checkpoint, updates: log_index, env_steps })
}
