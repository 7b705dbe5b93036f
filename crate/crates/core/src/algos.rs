//! PPO with GAE, SAC with twin critics and a target value network, and the
//! Adam optimizer both use.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{bind_params, Graph, Var};
use crate::casnet::{evaluate, Actor, Critic, ObsBatch, Observation};
use crate::error::shape_err;
use crate::math;
use crate::nn::{gaussian_entropy, gaussian_logprob, gaussian_sample, standard_normal, tanh_log_jacobian, Module};
use crate::{Error, Result, Tensor};

// ------------------------------------------------------------ configuration

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_len: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 10,
            minibatch: 64,
            rollout_len: 2048,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        check_discount(self.gamma, self.lambda)?;
        check_positive_counts(&[("epochs", self.epochs), ("minibatch", self.minibatch), ("rollout_len", self.rollout_len)])?;
        check_range("clip", self.clip, 0.0, f64::INFINITY, false)?;
        check_range("lr", self.lr, 0.0, f64::INFINITY, true)?;
        check_range("entropy_coef", self.entropy_coef, 0.0, f64::INFINITY, true)?;
        check_range("value_coef", self.value_coef, 0.0, f64::INFINITY, true)?;
        check_range("max_grad_norm", self.max_grad_norm, 0.0, f64::INFINITY, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Uniformly random actions before learning starts.
    pub start_steps: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.2,
            tau: 0.005,
            lr: 3e-4,
            replay_capacity: 100_000,
            batch_size: 256,
            start_steps: 1_000,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        check_discount(self.gamma, 0.0)?;
        check_positive_counts(&[("replay_capacity", self.replay_capacity), ("batch_size", self.batch_size)])?;
        check_range("alpha", self.alpha, 0.0, f64::INFINITY, true)?;
        check_range("tau", self.tau, 0.0, 1.0, true)?;
        check_range("lr", self.lr, 0.0, f64::INFINITY, true)
    }
}

fn check_discount(gamma: f64, lambda: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Parameter(format!("gamma {gamma} outside (0, 1]")));
    }
    check_range("lambda", lambda, 0.0, 1.0, true)
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64, lo_inclusive: bool) -> Result<()> {
    let above = if lo_inclusive { v >= lo } else { v > lo };
    if above && v <= hi {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} = {v} out of range")))
    }
}

fn check_positive_counts(counts: &[(&str, usize)]) -> Result<()> {
    match counts.iter().find(|(_, c)| *c == 0) {
        Some((name, _)) => Err(Error::Parameter(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

// ------------------------------------------------------------ GAE

/// Generalized advantage estimates and value targets for one trajectory
/// segment. `bootstrap_value` stands in for `V(s_T)` after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if t == 0 || values.len() != t || dones.len() != t {
        return Err(shape_err!("gae lengths: {} rewards, {} values, {} dones", t, values.len(), dones.len()));
    }
    let mut adv = vec![0.0; t];
    let mut next_adv = 0.0;
    for i in (0..t).rev() {
        let next_value = if i + 1 < t { values[i + 1] } else { bootstrap_value };
        let live = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * next_value * live - values[i];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[i] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

// ------------------------------------------------------------ rollouts

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub observation: Observation,
    pub action: Vec<f64>,
    /// Log-probability of `action` under the behavior policy.
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// On-policy storage made of contiguous trajectory segments.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    steps: Vec<RolloutStep>,
    /// `(end, bootstrap value)` of every closed segment.
    segments: Vec<(usize, f64)>,
    targets: Option<(Vec<f64>, Vec<f64>)>,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: RolloutStep) -> Result<()> {
        if self.targets.is_some() {
            return Err(Error::Protocol("rollout buffer already finalized".into()));
        }
        if step.action.len() != step.observation.n_pairs() {
            return Err(shape_err!("{} actions for {} pairs", step.action.len(), step.observation.n_pairs()));
        }
        self.steps.push(step);
        Ok(())
    }

    /// Close the open segment; `bootstrap_value` is `V` of the state after
    /// its last step (ignored by GAE when that step is done).
    pub fn end_segment(&mut self, bootstrap_value: f64) -> Result<()> {
        let start = self.segments.last().map_or(0, |s| s.0);
        if start == self.steps.len() {
            return Err(Error::Protocol("cannot close an empty segment".into()));
        }
        self.segments.push((self.steps.len(), bootstrap_value));
        Ok(())
    }

    /// Compute advantages and returns segment by segment.
    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.segments.last().map_or(0, |s| s.0) != self.steps.len() {
            return Err(Error::Protocol("rollout buffer has an open segment".into()));
        }
        let (mut adv, mut ret) = (Vec::with_capacity(self.len()), Vec::with_capacity(self.len()));
        let mut start = 0;
        for &(end, bootstrap) in &self.segments {
            let seg = &self.steps[start..end];
            let rewards: Vec<f64> = seg.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = seg.iter().map(|s| s.value).collect();
            let dones: Vec<bool> = seg.iter().map(|s| s.done).collect();
            let (a, r) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda)?;
            adv.extend(a);
            ret.extend(r);
            start = end;
        }
        self.targets = Some((adv, ret));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[RolloutStep] {
        &self.steps
    }

    pub fn is_finalized(&self) -> bool {
        self.targets.is_some()
    }

    pub fn advantages(&self) -> Option<&[f64]> {
        self.targets.as_ref().map(|t| t.0.as_slice())
    }

    pub fn returns(&self) -> Option<&[f64]> {
        self.targets.as_ref().map(|t| t.1.as_slice())
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.segments.clear();
        self.targets = None;
    }
}

/// Indices grouped by link count, in ascending link count.
fn group_by_links<'a>(obs: impl Iterator<Item = &'a Observation>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, o) in obs.enumerate() {
        groups.entry(o.n_pairs()).or_default().push(i);
    }
    groups
}

fn column(values: impl Iterator<Item = f64>) -> Result<Tensor> {
    let data: Vec<f64> = values.collect();
    Tensor::new(&[data.len(), 1], data)
}

fn rows_tensor<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    Tensor::new(&[data.len() / width.max(1), width], data)
}

// ------------------------------------------------------------ PPO losses

/// `exp(logp_new − logp_old)`.
pub fn ppo_ratio(g: &mut Graph<'_>, logp_new: Var, logp_old: Var) -> Result<Var> {
    let d = g.sub(logp_new, logp_old)?;
    Ok(g.exp(d))
}

/// Negated clipped surrogate `−mean(min(r·Â, clip(r, 1−ε, 1+ε)·Â))`.
pub fn ppo_clip_loss(g: &mut Graph<'_>, ratio: Var, adv: Var, eps: f64) -> Result<Var> {
    let unclipped = g.mul(ratio, adv)?;
    let r = g.clip(ratio, 1.0 - eps, 1.0 + eps)?;
    let clipped = g.mul(r, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let m = g.mean(surrogate);
    Ok(g.neg(m))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `logp_old − logp_new` over the minibatches.
    pub approx_kl: f64,
}

/// Log-probabilities of the stored actions under `actor`, in buffer order.
pub fn buffer_log_probs<A: Actor + ?Sized>(actor: &A, buffer: &RolloutBuffer) -> Result<Vec<f64>> {
    let mut out = vec![0.0; buffer.len()];
    for (_, idx) in group_by_links(buffer.steps.iter().map(|s| &s.observation)) {
        let obs = ObsBatch::from_observations(idx.iter().map(|&i| &buffer.steps[i].observation))?;
        let mut g = Graph::new();
        let vars = bind_params(&mut g, actor.params(), false);
        let o = actor.forward(&mut g, &vars, &obs)?;
        let n = obs.n_pairs();
        let a = g.input(rows_tensor(idx.iter().map(|&i| buffer.steps[i].action.as_slice()), n)?);
        let lp = gaussian_logprob(&mut g, o.means, o.log_std, a)?;
        for (k, &i) in idx.iter().enumerate() {
            out[i] = g.value(lp).data()[k];
        }
    }
    Ok(out)
}

/// Clipped-surrogate update over a finalized buffer. The optimizer's
/// learning rate is set from `cfg`.
pub fn ppo_update<A: Actor + ?Sized, R: Rng + ?Sized>(
    actor: &mut A,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(Error::Domain("empty rollout buffer".into()));
    }
    let (adv, ret) = match &buffer.targets {
        Some((a, r)) => (normalize(a), r.as_slice()),
        None => return Err(Error::Protocol("rollout buffer not finalized".into())),
    };

    opt.lr = cfg.lr;
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut total = PpoStats::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let (stats, mut grads) = ppo_minibatch(actor, buffer, chunk, &adv, ret, cfg)?;
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            opt.step(actor.params_mut(), &grads)?;
            total.policy_loss += stats.policy_loss;
            total.value_loss += stats.value_loss;
            total.entropy += stats.entropy;
            total.approx_kl += stats.approx_kl;
            batches += 1;
        }
    }
    let k = batches as f64;
    Ok(PpoStats {
        policy_loss: total.policy_loss / k,
        value_loss: total.value_loss / k,
        entropy: total.entropy / k,
        approx_kl: total.approx_kl / k,
    })
}

fn ppo_minibatch<A: Actor + ?Sized>(
    actor: &A,
    buffer: &RolloutBuffer,
    chunk: &[usize],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
) -> Result<(PpoStats, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, actor.params(), true);
    let total = chunk.len() as f64;
    let mut stats = PpoStats::default();
    let mut loss: Option<Var> = None;
    for (_, local) in group_by_links(chunk.iter().map(|&i| &buffer.steps[i].observation)) {
        let idx: Vec<usize> = local.iter().map(|&k| chunk[k]).collect();
        let steps = || idx.iter().map(|&i| &buffer.steps[i]);
        let obs = ObsBatch::from_observations(steps().map(|s| &s.observation))?;
        let out = actor.forward(&mut g, &vars, &obs)?;

        let actions = g.input(rows_tensor(steps().map(|s| s.action.as_slice()), obs.n_pairs())?);
        let logp = gaussian_logprob(&mut g, out.means, out.log_std, actions)?;
        let old = g.input(column(steps().map(|s| s.log_prob))?);
        let ratio = ppo_ratio(&mut g, logp, old)?;
        let a = g.input(column(idx.iter().map(|&i| adv[i]))?);
        let policy_loss = ppo_clip_loss(&mut g, ratio, a, cfg.clip)?;

        let r = g.input(column(idx.iter().map(|&i| ret[i]))?);
        let err = g.sub(out.value, r)?;
        let sq = g.square(err);
        let value_loss = g.mean(sq);
        let ent = gaussian_entropy(&mut g, out.log_std)?;
        let entropy = g.mean(ent);

        let w = idx.len() as f64 / total;
        let vl = g.scale(value_loss, cfg.value_coef);
        let el = g.scale(entropy, -cfg.entropy_coef);
        let part = g.add(policy_loss, vl)?;
        let part = g.add(part, el)?;
        let part = g.scale(part, w);
        loss = Some(match loss {
            Some(l) => g.add(l, part)?,
            None => part,
        });

        stats.policy_loss += w * g.value(policy_loss).item();
        stats.value_loss += w * g.value(value_loss).item();
        stats.entropy += w * g.value(entropy).item();
        let kl: f64 = g.value(old).data().iter().zip(g.value(logp).data()).map(|(o, n)| o - n).sum();
        stats.approx_kl += kl / total;
    }
    let loss = loss.ok_or_else(|| Error::Domain("empty minibatch".into()))?;
    g.backward(loss)?;
    Ok((stats, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    x.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().map(Tensor::sq_norm).sum());
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= coef);
        }
    }
    norm
}

// ------------------------------------------------------------ Adam

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn for_module<M: Module + ?Sized>(lr: f64, module: &M) -> Self {
        Self::new(lr, &module.params())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err!("adam state for {} tensors, got {} params and {} grads", self.m.len(), params.len(), grads.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(shape_err!("adam shape mismatch {:?} / {:?} / {:?}", p.shape(), g.shape(), m.shape()));
            }
        }
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let (c1, c2) = (1.0 - self.beta1_pow, 1.0 - self.beta2_pow);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pv, &gv), mv), vv) in it {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------ replay

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_observation: Observation,
    pub done: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), next: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append, overwriting the oldest transition when full.
    pub fn insert(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform indices, with replacement, into the current contents.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch == 0 || self.items.len() < batch {
            return Err(Error::Protocol(format!("cannot sample {batch} from {} transitions", self.items.len())));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }
}

// ------------------------------------------------------------ SAC losses

/// `r + γ·(1 − d)·V_t(s′)` per transition.
pub fn bellman_targets(rewards: &[f64], dones: &[bool], next_values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != dones.len() || rewards.len() != next_values.len() {
        return Err(shape_err!("bellman target lengths differ"));
    }
    Ok(rewards
        .iter()
        .zip(dones)
        .zip(next_values)
        .map(|((r, &d), v)| r + gamma * if d { 0.0 } else { *v })
        .collect())
}

/// `mean((Q(s,a) − target)²)` for `rows×1` predictions.
pub fn sac_q_loss(g: &mut Graph<'_>, q: Var, targets: &[f64]) -> Result<Var> {
    mse_to(g, q, targets)
}

/// `min(Q₁, Q₂)(s, ã) − α·log π(ã|s)` per state.
pub fn sac_v_targets(q1: &[f64], q2: &[f64], log_probs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if q1.len() != q2.len() || q1.len() != log_probs.len() {
        return Err(shape_err!("value target lengths differ"));
    }
    Ok(q1.iter().zip(q2).zip(log_probs).map(|((a, b), lp)| a.min(*b) - alpha * lp).collect())
}

/// `mean((V(s) − target)²)`.
pub fn sac_v_loss(g: &mut Graph<'_>, v: Var, targets: &[f64]) -> Result<Var> {
    mse_to(g, v, targets)
}

/// `mean(α·log π(ã|s) − min(Q₁, Q₂)(s, ã))`.
pub fn sac_policy_loss(g: &mut Graph<'_>, log_prob: Var, q_min: Var, alpha: f64) -> Result<Var> {
    let weighted = g.scale(log_prob, alpha);
    let d = g.sub(weighted, q_min)?;
    Ok(g.mean(d))
}

fn mse_to(g: &mut Graph<'_>, pred: Var, targets: &[f64]) -> Result<Var> {
    if g.value(pred).numel() != targets.len() {
        return Err(shape_err!("{} predictions for {} targets", g.value(pred).numel(), targets.len()));
    }
    let t = g.input(Tensor::new(g.shape(pred), targets.to_vec())?);
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Tanh-squashed reparameterized action and its corrected log density.
pub fn squashed_sample(g: &mut Graph<'_>, mean: Var, log_std: Var, noise: Var) -> Result<(Var, Var)> {
    let u = gaussian_sample(g, mean, log_std, noise)?;
    let a = g.tanh(u);
    let lp = gaussian_logprob(g, mean, log_std, u)?;
    let jac = tanh_log_jacobian(g, u)?;
    Ok((a, g.sub(lp, jac)?))
}

/// `target ← τ·source + (1 − τ)·target`, elementwise.
pub fn polyak_update(target: Vec<&mut Tensor>, source: Vec<&Tensor>, tau: f64) -> Result<()> {
    if target.len() != source.len() {
        return Err(shape_err!("polyak: {} target vs {} source tensors", target.len(), source.len()));
    }
    if target.iter().zip(&source).any(|(t, s)| t.shape() != s.shape()) {
        return Err(shape_err!("polyak: tensor shapes differ"));
    }
    for (t, s) in target.into_iter().zip(source) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = tau * sv + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

// ------------------------------------------------------------ SAC agent

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SacStats {
    pub q_loss: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    /// `−mean log π(ã|s)` of the fresh policy samples.
    pub entropy: f64,
}

/// Policy, twin critics, value network and its polyak-averaged target.
#[derive(Debug, Clone)]
pub struct SacAgent<A, C> {
    pub policy: A,
    pub q1: C,
    pub q2: C,
    pub value: C,
    pub value_target: C,
    pub config: SacConfig,
    opt_policy: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_value: Adam,
}

struct Group {
    obs: ObsBatch,
    idx: Vec<usize>,
}

impl<A: Actor, C: Critic + Clone> SacAgent<A, C> {
    pub fn new(policy: A, q1: C, q2: C, value: C, config: SacConfig) -> Result<Self> {
        config.validate()?;
        if !q1.takes_action() || !q2.takes_action() || value.takes_action() {
            return Err(Error::Parameter("SAC needs two Q critics and one V critic".into()));
        }
        let lr = config.lr;
        Ok(Self {
            opt_policy: Adam::for_module(lr, &policy),
            opt_q1: Adam::for_module(lr, &q1),
            opt_q2: Adam::for_module(lr, &q2),
            opt_value: Adam::for_module(lr, &value),
            value_target: value.clone(),
            policy,
            q1,
            q2,
            value,
            config,
        })
    }

    /// `tanh(μ + σ·noise)`, or `tanh(μ)` without noise.
    pub fn act(&self, obs: &Observation, noise: Option<&[f64]>) -> Result<Vec<f64>> {
        let v = evaluate(&self.policy, &ObsBatch::from_observations([obs])?)?;
        let n = obs.n_pairs();
        if noise.is_some_and(|e| e.len() != n) {
            return Err(shape_err!("noise width differs from {n} actions"));
        }
        Ok((0..n)
            .map(|i| {
                let e = noise.map_or(0.0, |e| e[i]);
                math::tanh(v.means.data()[i] + math::exp(v.log_std.data()[i]) * e)
            })
            .collect())
    }

    /// One gradient step on each network, then the target update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> Result<SacStats> {
        if batch.is_empty() {
            return Err(Error::Domain("empty SAC batch".into()));
        }
        let cfg = self.config.clone();
        let total = batch.len() as f64;
        let groups: Vec<Group> = group_by_links(batch.iter().map(|t| &t.observation))
            .into_values()
            .map(|idx| Ok(Group { obs: ObsBatch::from_observations(idx.iter().map(|&i| &batch[i].observation))?, idx }))
            .collect::<Result<_>>()?;
        let mut stats = SacStats::default();

        // Bellman targets from the target value network.
        let mut targets = Vec::with_capacity(groups.len());
        for grp in &groups {
            let next = ObsBatch::from_observations(grp.idx.iter().map(|&i| &batch[i].next_observation))?;
            let v_next = critic_values(&self.value_target, &next, None)?;
            let rewards: Vec<f64> = grp.idx.iter().map(|&i| batch[i].reward).collect();
            let dones: Vec<bool> = grp.idx.iter().map(|&i| batch[i].done).collect();
            targets.push(bellman_targets(&rewards, &dones, &v_next, cfg.gamma)?);
        }
        let stored_actions: Vec<Tensor> = groups
            .iter()
            .map(|grp| rows_tensor(grp.idx.iter().map(|&i| batch[i].action.as_slice()), grp.obs.n_pairs()))
            .collect::<Result<_>>()?;

        for which in 0..2 {
            let q = if which == 0 { &self.q1 } else { &self.q2 };
            let (loss, grads) = critic_step(q, &groups, total, |g, vars, k, grp| {
                let a = g.input(stored_actions[k].clone());
                let pred = q.forward(g, vars, &grp.obs, Some(a))?;
                sac_q_loss(g, pred, &targets[k])
            })?;
            stats.q_loss += 0.5 * loss;
            if which == 0 {
                self.opt_q1.step(self.q1.params_mut(), &grads)?;
            } else {
                self.opt_q2.step(self.q2.params_mut(), &grads)?;
            }
        }

        // Fresh reparameterization noise, shared by the value and policy steps.
        let noise: Vec<Tensor> = groups
            .iter()
            .map(|grp| {
                let n = grp.obs.n_pairs();
                Tensor::new(&[grp.idx.len(), n], standard_normal(grp.idx.len() * n, rng))
            })
            .collect::<Result<_>>()?;

        let mut v_targets = Vec::with_capacity(groups.len());
        for (k, grp) in groups.iter().enumerate() {
            let (actions, log_probs) = self.sample_values(&grp.obs, &noise[k])?;
            let q1 = critic_values(&self.q1, &grp.obs, Some(&actions))?;
            let q2 = critic_values(&self.q2, &grp.obs, Some(&actions))?;
            stats.entropy -= log_probs.iter().sum::<f64>() / total;
            v_targets.push(sac_v_targets(&q1, &q2, &log_probs, cfg.alpha)?);
        }
        let value = &self.value;
        let (loss, grads) = critic_step(value, &groups, total, |g, vars, k, grp| {
            let pred = value.forward(g, vars, &grp.obs, None)?;
            sac_v_loss(g, pred, &v_targets[k])
        })?;
        stats.value_loss = loss;
        self.opt_value.step(self.value.params_mut(), &grads)?;

        let (loss, grads) = {
            let mut g = Graph::new();
            let pv = bind_params(&mut g, self.policy.params(), true);
            let q1v = bind_params(&mut g, self.q1.params(), false);
            let q2v = bind_params(&mut g, self.q2.params(), false);
            let mut acc: Option<Var> = None;
            for (k, grp) in groups.iter().enumerate() {
                let out = self.policy.forward(&mut g, &pv, &grp.obs)?;
                let e = g.input(noise[k].clone());
                let (a, lp) = squashed_sample(&mut g, out.means, out.log_std, e)?;
                let q1 = self.q1.forward(&mut g, &q1v, &grp.obs, Some(a))?;
                let q2 = self.q2.forward(&mut g, &q2v, &grp.obs, Some(a))?;
                let q_min = g.minimum(q1, q2)?;
                let l = sac_policy_loss(&mut g, lp, q_min, cfg.alpha)?;
                let l = g.scale(l, grp.idx.len() as f64 / total);
                acc = Some(match acc {
                    Some(s) => g.add(s, l)?,
                    None => l,
                });
            }
            let loss = acc.expect("non-empty batch");
            g.backward(loss)?;
            (g.value(loss).item(), pv.iter().map(|&v| g.grad_or_zeros(v)).collect::<Vec<_>>())
        };
        stats.policy_loss = loss;
        self.opt_policy.step(self.policy.params_mut(), &grads)?;

        polyak_update(self.value_target.params_mut(), self.value.params(), cfg.tau)?;
        Ok(stats)
    }

    fn sample_values(&self, obs: &ObsBatch, noise: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, self.policy.params(), false);
        let out = self.policy.forward(&mut g, &vars, obs)?;
        let e = g.input(noise.clone());
        let (a, lp) = squashed_sample(&mut g, out.means, out.log_std, e)?;
        Ok((g.value(a).clone(), g.value(lp).data().to_vec()))
    }

    pub fn optimizers(&self) -> [&Adam; 4] {
        [&self.opt_policy, &self.opt_q1, &self.opt_q2, &self.opt_value]
    }
}

/// Critic outputs without gradient.
pub fn critic_values<C: Critic + ?Sized>(critic: &C, obs: &ObsBatch, action: Option<&Tensor>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, critic.params(), false);
    let a = action.map(|a| g.input(a.clone()));
    let out = critic.forward(&mut g, &vars, obs, a)?;
    Ok(g.value(out).data().to_vec())
}

/// Size-weighted sum of per-group losses and its gradient.
fn critic_step<C, F>(critic: &C, groups: &[Group], total: f64, loss_of: F) -> Result<(f64, Vec<Tensor>)>
where
    C: Critic + ?Sized,
    F: for<'g> Fn(&mut Graph<'g>, &[Var], usize, &Group) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = bind_params(&mut g, critic.params(), true);
    let mut acc: Option<Var> = None;
    for (k, grp) in groups.iter().enumerate() {
        let l = loss_of(&mut g, &vars, k, grp)?;
        let l = g.scale(l, grp.idx.len() as f64 / total);
        acc = Some(match acc {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    let loss = acc.ok_or_else(|| Error::Domain("no groups".into()))?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::casnet::{CasnetCritic, CasnetPolicy, ExpertPolicy};
    use crate::envs::PairObservation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn obs(n: usize, x: f64) -> Observation {
        Observation {
            pairs: (0..n).map(|i| PairObservation { joint_pos: x + i as f64, joint_vel: -x, link_length: 0.1 }).collect(),
            goal: [0.05, x],
        }
    }

    #[test]
    fn gae_special_cases() {
        let r = [1.0, -0.5, 2.0, 0.25];
        let v = [0.3, 0.1, -0.2, 0.5];
        let d = [false, true, false, false];
        let (adv, ret) = compute_gae(&r, &v, &d, 0.7, 0.9, 0.0).unwrap();
        let nexts = [v[1], v[2], v[3], 0.7];
        for t in 0..4 {
            let live = if d[t] { 0.0 } else { 1.0 };
            assert_eq!(adv[t], r[t] + 0.9 * nexts[t] * live - v[t]);
            assert_eq!(ret[t], adv[t] + v[t]);
        }
        let (adv, _) = compute_gae(&r, &[0.0; 4], &[false; 4], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![2.75, 1.75, 2.25, 0.25]);
        assert!(matches!(compute_gae(&r, &v[..3], &d, 0.0, 0.9, 0.9), Err(Error::Shape(_))));
    }

    fn graph_loss(r: &[f64], a: &[f64], eps: f64) -> f64 {
        let mut g = Graph::new();
        let rv = g.input(Tensor::vector(r));
        let av = g.input(Tensor::vector(a));
        let l = ppo_clip_loss(&mut g, rv, av, eps).unwrap();
        g.value(l).item()
    }

    #[test]
    fn clip_loss_examples() {
        assert_eq!(graph_loss(&[1.0, 1.0, 1.0], &[0.5, -1.0, 2.0], 0.2), -0.5);
        assert_eq!(graph_loss(&[2.0], &[1.0], 0.2), -1.2);
        assert_eq!(graph_loss(&[0.5], &[-1.0], 0.2), 0.8);
    }

    #[test]
    fn ratio_values_and_gradient() {
        let mut g = Graph::new();
        let new = Tensor::vector(&[0.3, -1.2]);
        let vn = g.param(&new);
        let vo = g.input(Tensor::vector(&[0.3, -1.2 - core::f64::consts::LN_2]));
        let r = ppo_ratio(&mut g, vn, vo).unwrap();
        assert_eq!(g.value(r).data()[0], 1.0);
        assert!((g.value(r).data()[1] - 2.0).abs() < 1e-15);
        let params = [Tensor::vector(&[0.4, -0.1, 1.3])];
        let old = Tensor::vector(&[0.1, 0.2, 0.3]);
        let err = grad_check(&params, |g, v| {
            let o = g.input(old.clone());
            let r = ppo_ratio(g, v[0], o)?;
            Ok(g.sum(r))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    fn tiny_buffer(actor: &dyn Actor, n_steps: usize) -> RolloutBuffer {
        let mut buf = RolloutBuffer::new();
        let mut r = rng(8);
        for t in 0..n_steps {
            let o = obs(1 + t % 3, t as f64 * 0.1);
            let v = evaluate(actor, &ObsBatch::from_observations([&o]).unwrap()).unwrap();
            let noise = standard_normal(o.n_pairs(), &mut r);
            let action: Vec<f64> = v
                .means
                .data()
                .iter()
                .zip(v.log_std.data())
                .zip(&noise)
                .map(|((m, ls), e)| m + math::exp(*ls) * e)
                .collect();
            let log_prob = crate::nn::gaussian_logprob_value(v.means.data(), v.log_std.data(), &action);
            buf.push(RolloutStep { observation: o, action, log_prob, reward: -(t as f64) * 0.01, value: v.value.item(), done: false })
                .unwrap();
            if t % 5 == 4 {
                buf.end_segment(0.0).unwrap();
            }
        }
        buf.end_segment(0.0).ok();
        buf.finalize(0.99, 0.95).unwrap();
        buf
    }

    #[test]
    fn ratios_are_one_at_behavior_parameters() {
        let policy = CasnetPolicy::new(&mut rng(1)).unwrap();
        let buf = tiny_buffer(&policy, 23);
        let now = buffer_log_probs(&policy, &buf).unwrap();
        for (s, lp) in buf.steps().iter().zip(now) {
            assert_eq!(math::exp(lp - s.log_prob), 1.0);
        }
    }

    #[test]
    fn zero_lr_update_is_a_no_op() {
        let mut policy = CasnetPolicy::new(&mut rng(2)).unwrap();
        let before = policy.clone();
        let buf = tiny_buffer(&policy, 20);
        let cfg = PpoConfig { lr: 0.0, epochs: 2, minibatch: 8, ..PpoConfig::default() };
        let mut opt = Adam::for_module(cfg.lr, &policy);
        let stats = ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut rng(3)).unwrap();
        assert_eq!(policy, before);
        assert!(stats.approx_kl.abs() < 1e-12 && stats.entropy.is_finite());

        let cfg = PpoConfig { epochs: 2, minibatch: 8, ..PpoConfig::default() };
        let stats = ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut rng(3)).unwrap();
        assert_ne!(policy, before);
        assert!(stats.approx_kl.is_finite() && stats.policy_loss.is_finite() && stats.value_loss >= 0.0);
        assert!(matches!(
            ppo_update(&mut policy, &mut opt, &RolloutBuffer::new(), &cfg, &mut rng(3)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn buffer_protocol() {
        let mut buf = RolloutBuffer::new();
        let step = RolloutStep { observation: obs(2, 0.0), action: vec![0.0, 0.0], log_prob: 0.0, reward: 0.0, value: 0.0, done: false };
        assert!(buf.end_segment(0.0).is_err());
        buf.push(step.clone()).unwrap();
        assert!(matches!(buf.finalize(0.9, 0.9), Err(Error::Protocol(_))));
        buf.end_segment(0.0).unwrap();
        buf.finalize(0.9, 0.9).unwrap();
        assert!(matches!(buf.push(step.clone()), Err(Error::Protocol(_))));
        let mut bad = step;
        bad.action.pop();
        assert!(RolloutBuffer::new().push(bad).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = Tensor::vector(&[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(0.01, &[&p]);
        opt.step(vec![&mut p], &[Tensor::vector(&[0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        let mut opt = Adam::new(0.01, &[&p]);
        opt.step(vec![&mut p], &[Tensor::vector(&[100.0, -50.0, 1e-3])]).unwrap();
        // Step one: m̂ = g, v̂ = g², so the move is lr·g/(|g| + ε).
        let expect = [1.0 - 0.01 * 100.0 / (100.0 + 1e-8), -2.0 + 0.01 * 50.0 / (50.0 + 1e-8), 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(opt.step(vec![&mut p], &[Tensor::vector(&[1.0])]).is_err());
    }

    #[test]
    fn grad_norm_clipping() {
        let mut g = [Tensor::vector(&[3.0, 0.0]), Tensor::vector(&[4.0])];
        let n = clip_grad_norm(&mut g, 0.5);
        assert_eq!(n, 5.0);
        let after = math::sqrt(g.iter().map(Tensor::sq_norm).sum());
        assert!((after - 0.5).abs() < 1e-6);
        let mut small = [Tensor::vector(&[0.1])];
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn replay_ring_and_sampling() {
        let mut rb = ReplayBuffer::new(3).unwrap();
        for k in 0..4 {
            rb.insert(Transition { observation: obs(1, k as f64), action: vec![0.0], reward: k as f64, next_observation: obs(1, 0.0), done: false });
        }
        assert_eq!(rb.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| rb.get(i).unwrap().reward).collect();
        assert!(!rewards.contains(&0.0));
        assert!(rb.sample_indices(4, &mut rng(0)).is_err());
        assert!(rb.sample_indices(3, &mut rng(0)).unwrap().iter().all(|&i| i < 3));
    }

    #[test]
    fn sac_loss_hand_values() {
        let t = bellman_targets(&[1.0, -0.5], &[false, true], &[2.0, 7.0], 0.9).unwrap();
        assert_eq!(t, vec![2.8, -0.5]);
        let mut g = Graph::new();
        let q = g.input(Tensor::new(&[2, 1], vec![3.0, 0.5]).unwrap());
        let l = sac_q_loss(&mut g, q, &t).unwrap();
        let expect = ((3.0f64 - 2.8).powi(2) + 1.0) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        let q_fixed = g.input(Tensor::new(&[2, 1], t.clone()).unwrap());
        let l = sac_q_loss(&mut g, q_fixed, &t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let vt = sac_v_targets(&[1.0, -2.0], &[0.5, -1.0], &[-0.3, 0.8], 0.2).unwrap();
        assert_eq!(vt, vec![0.5 + 0.06, -2.0 - 0.16]);
        assert_eq!(sac_v_targets(&[1.0], &[2.0], &[5.0], 0.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn polyak_cases() {
        let src = Tensor::vector(&[1.0, 1.0]);
        let mut tgt = Tensor::vector(&[0.0, 0.0]);
        polyak_update(vec![&mut tgt], vec![&src], 0.5).unwrap();
        polyak_update(vec![&mut tgt], vec![&src], 0.5).unwrap();
        assert_eq!(tgt.data(), &[0.75, 0.75]);
        polyak_update(vec![&mut tgt], vec![&src], 0.0).unwrap();
        assert_eq!(tgt.data(), &[0.75, 0.75]);
        polyak_update(vec![&mut tgt], vec![&src], 1.0).unwrap();
        assert_eq!(tgt, src);
        assert!(polyak_update(vec![&mut tgt], vec![&Tensor::vector(&[1.0])], 0.5).is_err());
    }

    #[test]
    fn policy_loss_gradient_flows_through_q() {
        // Tiny Q: q(a) = Σ w·a over a rows×2 action; the policy is a
        // free mean and log-std.
        let noise = Tensor::new(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let params = [
            Tensor::new(&[2, 2], vec![0.1, -0.4, 0.25, 0.6]).unwrap(),
            Tensor::new(&[2, 2], vec![-0.5, -0.3, -0.8, -0.1]).unwrap(),
            Tensor::new(&[1, 2], vec![0.9, -1.3]).unwrap(),
        ];
        let err = grad_check(&params, |g, v| {
            let e = g.input(noise.clone());
            let (a, lp) = squashed_sample(g, v[0], v[1], e)?;
            let q = g.linear(a, v[2], None)?;
            sac_policy_loss(g, lp, q, 0.2)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let mut g = Graph::new();
        let lp = g.input(Tensor::new(&[2, 1], vec![0.3, -0.1]).unwrap());
        let q0 = g.input(Tensor::zeros(&[2, 1]));
        let l = sac_policy_loss(&mut g, lp, q0, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l1 = sac_policy_loss(&mut g, lp, q0, 1.0).unwrap();
        let l3 = sac_policy_loss(&mut g, lp, q0, 3.0).unwrap();
        assert!((g.value(l3).item() - 3.0 * g.value(l1).item()).abs() < 1e-15);
    }

    #[test]
    fn sac_update_runs_on_mixed_links() {
        let mut r = rng(4);
        let policy = CasnetPolicy::new(&mut r).unwrap();
        let (q1, q2, v) = (CasnetCritic::q(&mut r).unwrap(), CasnetCritic::q(&mut r).unwrap(), CasnetCritic::v(&mut r).unwrap());
        let cfg = SacConfig { batch_size: 6, ..SacConfig::default() };
        let mut agent = SacAgent::new(policy, q1, q2, v, cfg).unwrap();
        let mut rb = ReplayBuffer::new(10).unwrap();
        for k in 0..8 {
            let n = 1 + k % 2;
            rb.insert(Transition { observation: obs(n, 0.1 * k as f64), action: vec![0.2; n], reward: -0.1, next_observation: obs(n, 0.2), done: false });
        }
        let before = agent.value_target.clone();
        let batch = rb.sample(6, &mut r).unwrap();
        let stats = agent.update(&batch, &mut r).unwrap();
        assert!(stats.q_loss.is_finite() && stats.value_loss.is_finite() && stats.policy_loss.is_finite());
        assert_ne!(agent.value_target, before);
        let a = agent.act(&obs(2, 0.0), None).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn expert_update_works_too() {
        let mut policy = ExpertPolicy::new(1, &mut rng(5)).unwrap();
        let mut buf = RolloutBuffer::new();
        for t in 0..10 {
            buf.push(RolloutStep { observation: obs(1, t as f64 * 0.1), action: vec![0.1], log_prob: -0.5, reward: -1.0, value: 0.0, done: t == 9 }).unwrap();
        }
        buf.end_segment(0.0).unwrap();
        buf.finalize(0.99, 0.95).unwrap();
        let cfg = PpoConfig { epochs: 1, minibatch: 4, ..PpoConfig::default() };
        let mut opt = Adam::for_module(cfg.lr, &policy);
        ppo_update(&mut policy, &mut opt, &buf, &cfg, &mut rng(0)).unwrap();
        assert_eq!(opt.steps_taken(), 3);
    }
}
