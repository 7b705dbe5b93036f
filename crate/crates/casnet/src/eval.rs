//! Deterministic evaluation, random baselines and normalized scores.

use std::fs::File;
use std::path::Path;

use casnet_core::autodiff::{Graph, Var};
use casnet_core::casnet::{evaluate, Actor, CasnetPolicy, ExpertPolicy, ObsBatch, Observation, PolicyOutput};
use casnet_core::envs::{self, ReacherEnv, ReacherSpec};
use casnet_core::nn::Module;
use casnet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{HarnessError, Result};
use crate::seeded_stream;

/// Episodes per evaluation in the scoring protocol.
pub const EVAL_EPISODES: usize = 20;
/// Randomly initialized policies averaged for the 0% reference.
pub const RANDOM_POLICIES: usize = 5;
/// Evaluation seeds averaged per score.
pub const EVAL_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub mean_final_distance: f64,
}

/// A policy restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedPolicy {
    Casnet(CasnetPolicy),
    Expert(ExpertPolicy),
}

impl LoadedPolicy {
    /// Rebuild the policy stored under unprefixed names in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        // Initial values are overwritten, so any RNG will do.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        if ckpt.get("pair_encoder.W_ih").is_some() {
            let mut p = CasnetPolicy::new(&mut rng)?;
            ckpt.load_into("", &mut p)?;
            Ok(Self::Casnet(p))
        } else if let Some(log_std) = ckpt.get("log_std") {
            let mut p = ExpertPolicy::new(log_std.numel(), &mut rng)?;
            ckpt.load_into("", &mut p)?;
            Ok(Self::Expert(p))
        } else {
            Err(casnet_core::Error::Shape("checkpoint holds no recognizable policy".into()).into())
        }
    }
}

impl Module for LoadedPolicy {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Self::Casnet(p) => p.params(),
            Self::Expert(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Casnet(p) => p.params_mut(),
            Self::Expert(p) => p.params_mut(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self {
            Self::Casnet(p) => p.param_names(),
            Self::Expert(p) => p.param_names(),
        }
    }
}

impl Actor for LoadedPolicy {
    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch) -> casnet_core::Result<PolicyOutput> {
        match self {
            Self::Casnet(p) => p.forward(g, vars, obs),
            Self::Expert(p) => p.forward(g, vars, obs),
        }
    }
}

/// Run `episodes` full episodes with the Gaussian mean as action, passed
/// through `tanh` when `squash` is set. Goals come from a generator seeded
/// with `seed`; nothing else is random.
pub fn eval_actor<A: Actor + ?Sized>(
    actor: &A,
    squash: bool,
    spec: &ReacherSpec,
    episodes: usize,
    seed: u64,
    fixed_goal: Option<[f64; 2]>,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(casnet_core::Error::Domain("evaluation needs at least one episode".into()).into());
    }
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = match fixed_goal {
        Some(goal) => ReacherEnv::with_fixed_goal(spec.clone(), rng, goal),
        None => ReacherEnv::new(spec.clone(), rng),
    };
    let (mut total_return, mut total_distance) = (0.0, 0.0);
    for ep in 0..episodes {
        if ep > 0 {
            env.reset();
        }
        loop {
            let obs = Observation { pairs: env.observation(), goal: env.goal() };
            let out = evaluate(actor, &ObsBatch::from_observations([&obs])?)?;
            let action: Vec<f64> =
                out.means.data().iter().map(|&m| if squash { m.tanh() } else { m }).collect();
            let res = env.step(&action)?;
            total_return += res.reward;
            if res.done {
                break;
            }
        }
        total_distance += env.distance();
    }
    let n = episodes as f64;
    Ok(EvalResult { mean_return: total_return / n, mean_final_distance: total_distance / n })
}

/// Evaluate the policy in `ckpt` on a registry environment.
pub fn eval_policy(ckpt: &Checkpoint, env_name: &str, episodes: usize, seed: u64) -> Result<EvalResult> {
    let spec = envs::find_spec(env_name)?;
    let policy = LoadedPolicy::from_checkpoint(ckpt)?;
    eval_actor(&policy, ckpt.algo == "sac", &spec, episodes, seed, None)
}

/// Mean evaluation of `k` freshly initialized CASNET policies, 20 episodes each.
pub fn random_baseline(env_name: &str, k: usize, seed: u64) -> Result<EvalResult> {
    if k == 0 {
        return Err(casnet_core::Error::Domain("random baseline needs at least one policy".into()).into());
    }
    let spec = envs::find_spec(env_name)?;
    let (mut ret, mut dist) = (0.0, 0.0);
    for j in 0..k {
        let policy = CasnetPolicy::new(&mut seeded_stream(seed, 1000 + j as u64))?;
        let r = eval_actor(&policy, false, &spec, EVAL_EPISODES, seed, None)?;
        ret += r.mean_return;
        dist += r.mean_final_distance;
    }
    Ok(EvalResult { mean_return: ret / k as f64, mean_final_distance: dist / k as f64 })
}

/// `100·(g − r)/(e − r)`; values above 100 mean the general policy beat the expert.
pub fn normalized_score(r_general: f64, r_random: f64, r_expert: f64) -> Result<f64> {
    let denom = r_expert - r_random;
    if !(denom.abs() > 1e-9) {
        return Err(casnet_core::Error::Numeric(format!(
            "expert and random returns coincide ({r_expert} vs {r_random})"
        ))
        .into());
    }
    Ok(100.0 * (r_general - r_random) / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub env_name: String,
    pub r_general: f64,
    pub r_random: f64,
    pub r_expert: f64,
    pub percent: f64,
}

/// Score a general policy against an expert on one environment: each return
/// is the mean over `seeds` of a `EVAL_EPISODES`-episode evaluation.
pub fn score_env(general: &Checkpoint, expert: &Checkpoint, env_name: &str, seeds: &[u64]) -> Result<Score> {
    if seeds.is_empty() {
        return Err(casnet_core::Error::Domain("no evaluation seeds".into()).into());
    }
    let n = seeds.len() as f64;
    let (mut g, mut r, mut e) = (0.0, 0.0, 0.0);
    for &seed in seeds {
        g += eval_policy(general, env_name, EVAL_EPISODES, seed)?.mean_return / n;
        e += eval_policy(expert, env_name, EVAL_EPISODES, seed)?.mean_return / n;
        r += random_baseline(env_name, RANDOM_POLICIES, seed)?.mean_return / n;
    }
    Ok(Score { env_name: env_name.to_string(), r_general: g, r_random: r, r_expert: e, percent: normalized_score(g, r, e)? })
}

pub const SCORES_HEADER: [&str; 5] = ["env_name", "R_general", "R_random", "R_expert", "percent"];

pub fn write_scores(path: &Path, scores: &[Score]) -> Result<()> {
    let io = |e: csv::Error| HarnessError::io(path, std::io::Error::other(e));
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(SCORES_HEADER).map_err(io)?;
    for s in scores {
        w.write_record([
            s.env_name.clone(),
            s.r_general.to_string(),
            s.r_random.to_string(),
            s.r_expert.to_string(),
            s.percent.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<Score>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let parse_err = |line: u64, message: String| HarnessError::Parse { path: path.to_path_buf(), line, message };
    let mut scores = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(i as u64 + 1, e.to_string()))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 {
            if !rec.iter().eq(SCORES_HEADER) {
                return Err(parse_err(line, "unexpected header".into()));
            }
            continue;
        }
        if rec.len() != SCORES_HEADER.len() {
            return Err(parse_err(line, format!("{} fields, expected {}", rec.len(), SCORES_HEADER.len())));
        }
        let float = |k: usize| rec[k].parse::<f64>().map_err(|_| parse_err(line, format!("{}: bad number {:?}", SCORES_HEADER[k], &rec[k])));
        scores.push(Score {
            env_name: rec[0].to_string(),
            r_general: float(1)?,
            r_random: float(2)?,
            r_expert: float(3)?,
            percent: float(4)?,
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_score_reference_points() {
        assert_eq!(normalized_score(-5.0, -20.0, -5.0).unwrap(), 100.0);
        assert_eq!(normalized_score(-20.0, -20.0, -5.0).unwrap(), 0.0);
        assert_eq!(normalized_score(-12.5, -20.0, -5.0).unwrap(), 50.0);
        assert!(normalized_score(-1.0, -20.0, -5.0).unwrap() > 100.0);
        let e = normalized_score(-1.0, -5.0, -5.0 + 1e-12).unwrap_err();
        assert!(matches!(e, HarnessError::Core(casnet_core::Error::Numeric(_))));
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let policy = CasnetPolicy::new(&mut seeded_stream(0, 0)).unwrap();
        let spec = envs::find_spec("Reacher_10").unwrap();
        assert!(eval_actor(&policy, false, &spec, 0, 0, None).is_err());
        assert!(random_baseline("Reacher_10", 0, 0).is_err());
    }

    #[test]
    fn evaluation_is_reproducible() {
        let policy = CasnetPolicy::new(&mut seeded_stream(3, 0)).unwrap();
        let spec = envs::find_spec("Reacher_30").unwrap();
        let a = eval_actor(&policy, false, &spec, 3, 11, None).unwrap();
        let b = eval_actor(&policy, false, &spec, 3, 11, None).unwrap();
        assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
        assert_eq!(a.mean_final_distance.to_bits(), b.mean_final_distance.to_bits());
        assert!(a.mean_return <= 0.0 && a.mean_final_distance > 0.0);
    }

    #[test]
    fn random_baseline_with_one_policy_is_one_eval() {
        let spec = envs::find_spec("Reacher_11").unwrap();
        let policy = CasnetPolicy::new(&mut seeded_stream(5, 1000)).unwrap();
        let single = eval_actor(&policy, false, &spec, EVAL_EPISODES, 5, None).unwrap();
        assert_eq!(random_baseline("Reacher_11", 1, 5).unwrap(), single);
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let s = vec![Score { env_name: "Reacher_11".into(), r_general: -3.5, r_random: -9.0, r_expert: -2.0, percent: 78.57 }];
        write_scores(&path, &s).unwrap();
        assert_eq!(read_scores(&path).unwrap(), s);
    }
}
