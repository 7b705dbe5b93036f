//! Line-oriented `key = value` training configuration.
//!
//! Hyperparameters use dotted keys (`ppo.gamma = 0.99`). Blank lines and `#`
//! comments are ignored; unknown keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use casnet_core::algos::{PpoConfig, SacConfig};
use casnet_core::envs::{self, ReacherSpec};

use crate::error::{HarnessError, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CASNET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Ppo,
    Sac,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Ppo => "ppo",
            Algo::Sac => "sac",
        }
    }
}

impl FromStr for Algo {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Algo::Ppo),
            "sac" => Ok(Algo::Sac),
            _ => Err(HarnessError::Config(format!("unknown algo {s:?}, expected ppo or sac"))),
        }
    }
}

/// Which network the run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// One shared CASNET policy across all selected environments.
    Casnet,
    /// A fully connected expert for a single environment.
    Expert,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Casnet => "casnet",
            PolicyKind::Expert => "expert",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casnet" => Ok(PolicyKind::Casnet),
            "expert" => Ok(PolicyKind::Expert),
            _ => Err(HarnessError::Config(format!("unknown policy {s:?}, expected casnet or expert"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvSelection {
    TrainSet,
    Names(Vec<String>),
}

impl EnvSelection {
    pub fn resolve(&self) -> Result<Vec<ReacherSpec>> {
        let specs = match self {
            EnvSelection::TrainSet => envs::train_set(),
            EnvSelection::Names(names) => names.iter().map(|n| envs::find_spec(n)).collect::<casnet_core::Result<_>>()?,
        };
        if specs.is_empty() {
            return Err(HarnessError::Config("no environments selected".into()));
        }
        Ok(specs)
    }

    fn to_value(&self) -> String {
        match self {
            EnvSelection::TrainSet => "train-set".into(),
            EnvSelection::Names(names) => names.join(","),
        }
    }
}

impl FromStr for EnvSelection {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "train-set" {
            return Ok(EnvSelection::TrainSet);
        }
        let names: Vec<String> = s.split(',').map(|n| n.trim().to_string()).filter(|n| !n.is_empty()).collect();
        if names.is_empty() {
            return Err(HarnessError::Config("empty environment list".into()));
        }
        Ok(EnvSelection::Names(names))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algo: Algo,
    pub policy: PolicyKind,
    pub envs: EnvSelection,
    pub seed: u64,
    pub total_env_steps: u64,
    /// Write an intermediate checkpoint every this many updates (0 disables).
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    /// SAC only: one goal per environment, drawn once from the seed.
    pub sac_fixed_goal: bool,
    /// SAC only: env steps between metrics rows.
    pub sac_log_interval: u64,
    pub ppo: PpoConfig,
    pub sac: SacConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Ppo,
            policy: PolicyKind::Casnet,
            envs: EnvSelection::TrainSet,
            seed: 0,
            total_env_steps: 2_000_000,
            checkpoint_every: 50,
            out_dir: None,
            sac_fixed_goal: false,
            sac_log_interval: 1000,
            ppo: PpoConfig::default(),
            sac: SacConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Parse config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "algo" => self.algo = value.parse()?,
            "policy" => self.policy = value.parse()?,
            "envs" => self.envs = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            "total_env_steps" => self.total_env_steps = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "sac_fixed_goal" => self.sac_fixed_goal = parse_bool(key, value)?,
            "sac.log_interval" => self.sac_log_interval = parse_num(key, value)?,
            "ppo.gamma" => self.ppo.gamma = parse_num(key, value)?,
            "ppo.lambda" => self.ppo.lambda = parse_num(key, value)?,
            "ppo.clip" => self.ppo.clip = parse_num(key, value)?,
            "ppo.lr" => self.ppo.lr = parse_num(key, value)?,
            "ppo.epochs" => self.ppo.epochs = parse_num(key, value)?,
            "ppo.minibatch" => self.ppo.minibatch = parse_num(key, value)?,
            "ppo.rollout_len" => self.ppo.rollout_len = parse_num(key, value)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse_num(key, value)?,
            "ppo.value_coef" => self.ppo.value_coef = parse_num(key, value)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = parse_num(key, value)?,
            "sac.gamma" => self.sac.gamma = parse_num(key, value)?,
            "sac.alpha" => self.sac.alpha = parse_num(key, value)?,
            "sac.tau" => self.sac.tau = parse_num(key, value)?,
            "sac.lr" => self.sac.lr = parse_num(key, value)?,
            "sac.replay_capacity" => self.sac.replay_capacity = parse_num(key, value)?,
            "sac.batch_size" => self.sac.batch_size = parse_num(key, value)?,
            "sac.start_steps" => self.sac.start_steps = parse_num(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Replace the seed with `CASNET_SEED` when that variable is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<Vec<ReacherSpec>> {
        if self.total_env_steps == 0 {
            return Err(HarnessError::Config("total_env_steps must be positive".into()));
        }
        if self.algo == Algo::Sac && self.sac_log_interval == 0 {
            return Err(HarnessError::Config("sac.log_interval must be positive".into()));
        }
        let specs = self.envs.resolve()?;
        if self.policy == PolicyKind::Expert && specs.len() != 1 {
            return Err(HarnessError::Config("an expert trains on exactly one environment".into()));
        }
        match self.algo {
            Algo::Ppo => self.ppo.validate()?,
            Algo::Sac => self.sac.validate()?,
        }
        Ok(specs)
    }

    /// Canonical text: every key in a fixed order, parseable by [`parse`](Self::parse).
    /// The output directory is omitted so snapshots do not depend on where a run writes.
    pub fn to_text(&self) -> String {
        let p = &self.ppo;
        let s = &self.sac;
        let lines = [
            format!("algo = {}", self.algo.as_str()),
            format!("policy = {}", self.policy.as_str()),
            format!("envs = {}", self.envs.to_value()),
            format!("seed = {}", self.seed),
            format!("total_env_steps = {}", self.total_env_steps),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("sac_fixed_goal = {}", self.sac_fixed_goal),
            format!("ppo.gamma = {}", p.gamma),
            format!("ppo.lambda = {}", p.lambda),
            format!("ppo.clip = {}", p.clip),
            format!("ppo.lr = {}", p.lr),
            format!("ppo.epochs = {}", p.epochs),
            format!("ppo.minibatch = {}", p.minibatch),
            format!("ppo.rollout_len = {}", p.rollout_len),
            format!("ppo.entropy_coef = {}", p.entropy_coef),
            format!("ppo.value_coef = {}", p.value_coef),
            format!("ppo.max_grad_norm = {}", p.max_grad_norm),
            format!("sac.gamma = {}", s.gamma),
            format!("sac.alpha = {}", s.alpha),
            format!("sac.tau = {}", s.tau),
            format!("sac.lr = {}", s.lr),
            format!("sac.replay_capacity = {}", s.replay_capacity),
            format!("sac.batch_size = {}", s.batch_size),
            format!("sac.start_steps = {}", s.start_steps),
            format!("sac.log_interval = {}", self.sac_log_interval),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
