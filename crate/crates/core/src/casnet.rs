//! CASNET policies, the fully connected expert baseline and the critics.
//!
//! Flat CASNET widths: pair encoder 3→32, trunk (32+2)→64→64 with tanh,
//! context projection 64→32 (affine, no activation) seeding the decoder,
//! decoder 32→32 whose step `i` consumes encoder hidden `i`, action head
//! 32→1 per step, value head 64→1 and one shared log-std scalar.
//!
//! Hierarchical widths: leg encoder 8→32 over joints, robot encoder
//! (32+3)→32 over legs, trunk (32+2)→64→64, context 64→32 as the leg-decoder
//! initial state, leg decoder 32→32 fed robot-encoder hidden `l`, action
//! decoder (32+32)→32 fed leg decoding `l` ⊕ leg-encoder hidden `j` and
//! restarted from zero on every leg, action head 32→1.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{bind_params, Graph, Var, VarCursor};
use crate::envs::PairObservation;
use crate::error::shape_err;
use crate::morphology::{LeggedMorphology, JOINT_FEATURES};
use crate::nn::{
    bounded_log_std, mlp_forward, prefixed, AffineLayer, BoundAffine, BoundRnn, Mlp, Module, RnnCell, LOG_STD_INIT,
};
use crate::{Error, Result, Tensor};

pub const EMBED: usize = 32;
pub const TRUNK: usize = 64;
pub const GOAL_DIM: usize = 2;
pub const PAIR_FEATURES: usize = 3;
pub const ATTACH_DIM: usize = 3;
pub const EXPERT_HIDDEN: usize = 64;

/// One reacher observation: pairs base to tip plus the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub pairs: Vec<PairObservation>,
    pub goal: [f64; 2],
}

impl Observation {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// A batch of reacher observations sharing one link count.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch {
    /// One `rows×3` tensor per pair, base to tip.
    pairs: Vec<Tensor>,
    /// `rows×2`.
    goal: Tensor,
}

impl ObsBatch {
    pub fn new(observations: &[&[PairObservation]], goals: &[[f64; 2]]) -> Result<Self> {
        let rows = observations.len();
        if rows == 0 || rows != goals.len() {
            return Err(shape_err!("{} observations with {} goals", rows, goals.len()));
        }
        let n = observations[0].len();
        if n == 0 {
            return Err(Error::Domain("empty observation sequence".into()));
        }
        if observations.iter().any(|o| o.len() != n) {
            return Err(shape_err!("observations in one batch must share a link count"));
        }
        let pairs = (0..n)
            .map(|i| {
                let data = observations.iter().flat_map(|o| o[i].features()).collect();
                Tensor::new(&[rows, PAIR_FEATURES], data)
            })
            .collect::<Result<_>>()?;
        let goal = Tensor::new(&[rows, GOAL_DIM], goals.iter().flatten().copied().collect())?;
        Ok(Self { pairs, goal })
    }

    pub fn from_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Result<Self> {
        let (pairs, goals): (Vec<&[PairObservation]>, Vec<[f64; 2]>) =
            obs.into_iter().map(|o| (o.pairs.as_slice(), o.goal)).unzip();
        Self::new(&pairs, &goals)
    }

    pub fn single(observation: &[PairObservation], goal: [f64; 2]) -> Result<Self> {
        Self::new(&[observation], &[goal])
    }

    /// Split flat `3N+2` rows (pair features, then goal) back into a batch.
    pub fn from_flat(flat: &Tensor) -> Result<Self> {
        let (rows, width) = flat.as_matrix_dims()?;
        if width < PAIR_FEATURES + GOAL_DIM || !(width - GOAL_DIM).is_multiple_of(PAIR_FEATURES) {
            return Err(shape_err!("flat observation width {width} is not 3N+2"));
        }
        let n = (width - GOAL_DIM) / PAIR_FEATURES;
        let d = flat.data();
        let pick = |start: usize, len: usize| {
            let data = (0..rows).flat_map(|r| d[r * width + start..r * width + start + len].iter().copied()).collect();
            Tensor::new(&[rows, len], data)
        };
        let pairs = (0..n).map(|i| pick(i * PAIR_FEATURES, PAIR_FEATURES)).collect::<Result<_>>()?;
        Ok(Self { pairs, goal: pick(n * PAIR_FEATURES, GOAL_DIM)? })
    }

    pub fn rows(&self) -> usize {
        self.goal.shape()[0]
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[Tensor] {
        &self.pairs
    }

    pub fn goal(&self) -> &Tensor {
        &self.goal
    }

    /// `rows×(3N+2)`: pair features base to tip, then the goal.
    pub fn flat(&self) -> Tensor {
        let rows = self.rows();
        let width = self.n_pairs() * PAIR_FEATURES + GOAL_DIM;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in &self.pairs {
                data.extend_from_slice(&p.data()[r * PAIR_FEATURES..(r + 1) * PAIR_FEATURES]);
            }
            data.extend_from_slice(&self.goal.data()[r * GOAL_DIM..(r + 1) * GOAL_DIM]);
        }
        Tensor::new(&[rows, width], data).expect("consistent widths")
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let take = |t: &Tensor| {
            let w = t.shape()[1];
            let data = idx.iter().flat_map(|&r| t.data()[r * w..(r + 1) * w].iter().copied()).collect();
            Tensor::new(&[idx.len(), w], data).expect("non-empty selection")
        };
        Self { pairs: self.pairs.iter().map(take).collect(), goal: take(&self.goal) }
    }

    /// Stack batches with the same link count.
    pub fn concat(batches: &[ObsBatch]) -> Result<Self> {
        let first = batches.first().ok_or_else(|| shape_err!("no batches to concatenate"))?;
        if batches.iter().any(|b| b.n_pairs() != first.n_pairs()) {
            return Err(shape_err!("cannot stack batches with different link counts"));
        }
        let stack = |get: &dyn Fn(&ObsBatch) -> &Tensor| {
            let w = get(first).shape()[1];
            let data: Vec<f64> = batches.iter().flat_map(|b| get(b).data().iter().copied()).collect();
            Tensor::new(&[data.len() / w, w], data)
        };
        let pairs = (0..first.n_pairs()).map(|i| stack(&|b| &b.pairs[i])).collect::<Result<_>>()?;
        Ok(Self { pairs, goal: stack(&|b| &b.goal)? })
    }
}

/// Graph handles produced by an actor forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PolicyOutput {
    /// `rows×N` action means.
    pub means: Var,
    /// `rows×N` clamped log standard deviations.
    pub log_std: Var,
    /// `rows×1` state values.
    pub value: Var,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorValues {
    pub means: Tensor,
    pub log_std: Tensor,
    pub value: Tensor,
}

/// A Gaussian actor with a value head sharing its trunk.
pub trait Actor: Module {
    /// Forward pass with parameters bound as `vars`, in `params()` order.
    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch) -> Result<PolicyOutput>;
}

/// Gradient-free forward pass.
pub fn evaluate<A: Actor + ?Sized>(actor: &A, obs: &ObsBatch) -> Result<ActorValues> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, actor.params(), false);
    let out = actor.forward(&mut g, &vars, obs)?;
    Ok(ActorValues {
        means: g.value(out.means).clone(),
        log_std: g.value(out.log_std).clone(),
        value: g.value(out.value).clone(),
    })
}

fn affine_pair(g: &mut Graph<'_>, trunk: &[BoundAffine; 2], x: Var) -> Result<Var> {
    mlp_forward(g, trunk, x, true)
}

fn take_trunk(c: &mut VarCursor<'_>) -> Result<[BoundAffine; 2]> {
    Ok([BoundAffine::take(c)?, BoundAffine::take(c)?])
}

fn new_trunk<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Result<[AffineLayer; 2]> {
    Ok([AffineLayer::new(d_in, TRUNK, rng)?, AffineLayer::new(TRUNK, TRUNK, rng)?])
}

fn log_std_init(n: usize) -> Tensor {
    Tensor::full(&[n], LOG_STD_INIT)
}

// ------------------------------------------------------------ flat CASNET

#[derive(Debug, Clone, PartialEq)]
pub struct CasnetPolicy {
    pub pair_encoder: RnnCell,
    pub trunk: [AffineLayer; 2],
    pub context_proj: AffineLayer,
    pub decoder: RnnCell,
    pub action_head: AffineLayer,
    pub value_head: AffineLayer,
    pub log_std: Tensor,
}

impl CasnetPolicy {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(Self {
            pair_encoder: RnnCell::new(PAIR_FEATURES, EMBED, rng)?,
            trunk: new_trunk(EMBED + GOAL_DIM, rng)?,
            context_proj: AffineLayer::new(TRUNK, EMBED, rng)?,
            decoder: RnnCell::new(EMBED, EMBED, rng)?,
            action_head: AffineLayer::new(EMBED, 1, rng)?,
            value_head: AffineLayer::new(TRUNK, 1, rng)?,
            log_std: log_std_init(1),
        })
    }
}

impl Module for CasnetPolicy {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.pair_encoder.params();
        p.extend(self.trunk.iter().flat_map(|l| l.params()));
        p.extend(self.context_proj.params());
        p.extend(self.decoder.params());
        p.extend(self.action_head.params());
        p.extend(self.value_head.params());
        p.push(&self.log_std);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.pair_encoder.params_mut();
        p.extend(self.trunk.iter_mut().flat_map(|l| l.params_mut()));
        p.extend(self.context_proj.params_mut());
        p.extend(self.decoder.params_mut());
        p.extend(self.action_head.params_mut());
        p.extend(self.value_head.params_mut());
        p.push(&mut self.log_std);
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = prefixed("pair_encoder", self.pair_encoder.param_names()).collect();
        for (i, l) in self.trunk.iter().enumerate() {
            n.extend(prefixed(&format!("trunk.{i}"), l.param_names()));
        }
        n.extend(prefixed("context_proj", self.context_proj.param_names()));
        n.extend(prefixed("decoder", self.decoder.param_names()));
        n.extend(prefixed("action_head", self.action_head.param_names()));
        n.extend(prefixed("value_head", self.value_head.param_names()));
        n.push("log_std".into());
        n
    }
}

impl Actor for CasnetPolicy {
    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch) -> Result<PolicyOutput> {
        let mut c = VarCursor::new(vars);
        let encoder = BoundRnn::take(&mut c)?;
        let trunk = take_trunk(&mut c)?;
        let context_proj = BoundAffine::take(&mut c)?;
        let decoder = BoundRnn::take(&mut c)?;
        let action_head = BoundAffine::take(&mut c)?;
        let value_head = BoundAffine::take(&mut c)?;
        let raw_log_std = c.next_var()?;
        c.finish()?;

        let xs: Vec<Var> = obs.pairs.iter().map(|p| g.input(p.clone())).collect();
        let (embedding, hiddens) = encoder.encode(g, &xs, None)?;
        let goal = g.input(obs.goal.clone());
        let z = g.concat_cols(&[embedding, goal])?;
        let t = affine_pair(g, &trunk, z)?;
        let value = value_head.forward(g, t)?;

        let mut h = context_proj.forward(g, t)?;
        let mut columns = Vec::with_capacity(hiddens.len());
        for &e in &hiddens {
            h = decoder.step(g, e, Some(h))?;
            columns.push(action_head.forward(g, h)?);
        }
        let means = g.concat_cols(&columns)?;
        let log_std = bounded_log_std(g, raw_log_std, &[obs.rows(), obs.n_pairs()])?;
        Ok(PolicyOutput { means, log_std, value })
    }
}

/// Action means and state value for one observation sequence.
pub fn casnet_forward(policy: &CasnetPolicy, obs: &[PairObservation], goal: [f64; 2]) -> Result<(Tensor, f64)> {
    let v = evaluate(policy, &ObsBatch::single(obs, goal)?)?;
    Ok((Tensor::vector(v.means.data()), v.value.item()))
}

// ------------------------------------------------------------ expert MLP

/// Fixed-width fully connected policy for a single environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPolicy {
    pub body: Mlp,
    pub action_head: AffineLayer,
    pub value_head: AffineLayer,
    pub log_std: Tensor,
}

impl ExpertPolicy {
    pub fn new<R: Rng + ?Sized>(n_actions: usize, rng: &mut R) -> Result<Self> {
        let d_in = PAIR_FEATURES * n_actions + GOAL_DIM;
        Ok(Self {
            body: Mlp::new(&[d_in, EXPERT_HIDDEN, EXPERT_HIDDEN], rng)?,
            action_head: AffineLayer::new(EXPERT_HIDDEN, n_actions, rng)?,
            value_head: AffineLayer::new(EXPERT_HIDDEN, 1, rng)?,
            log_std: log_std_init(n_actions),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.action_head.d_out()
    }
}

impl Module for ExpertPolicy {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.body.params();
        p.extend(self.action_head.params());
        p.extend(self.value_head.params());
        p.push(&self.log_std);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.body.params_mut();
        p.extend(self.action_head.params_mut());
        p.extend(self.value_head.params_mut());
        p.push(&mut self.log_std);
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = prefixed("body", self.body.param_names()).collect();
        n.extend(prefixed("action_head", self.action_head.param_names()));
        n.extend(prefixed("value_head", self.value_head.param_names()));
        n.push("log_std".into());
        n
    }
}

impl Actor for ExpertPolicy {
    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch) -> Result<PolicyOutput> {
        if obs.n_pairs() != self.n_actions() {
            return Err(shape_err!("expert for {} links given {} pairs", self.n_actions(), obs.n_pairs()));
        }
        let mut c = VarCursor::new(vars);
        let body = self.body.take(&mut c)?;
        let action_head = BoundAffine::take(&mut c)?;
        let value_head = BoundAffine::take(&mut c)?;
        let raw_log_std = c.next_var()?;
        c.finish()?;

        let x = g.input(obs.flat());
        let h = mlp_forward(g, &body, x, true)?;
        let means = action_head.forward(g, h)?;
        let value = value_head.forward(g, h)?;
        let log_std = bounded_log_std(g, raw_log_std, &[obs.rows(), obs.n_pairs()])?;
        Ok(PolicyOutput { means, log_std, value })
    }
}

/// Forward pass on one flat `3N+2` observation.
pub fn expert_forward(policy: &ExpertPolicy, flat: &[f64]) -> Result<(Tensor, f64)> {
    if flat.len() != PAIR_FEATURES * policy.n_actions() + GOAL_DIM {
        return Err(shape_err!("expert for {} links given width {}", policy.n_actions(), flat.len()));
    }
    let v = evaluate(policy, &ObsBatch::from_flat(&Tensor::vector(flat))?)?;
    Ok((Tensor::vector(v.means.data()), v.value.item()))
}

// ------------------------------------------------------------ critics

/// State or state-action value function.
pub trait Critic: Module {
    fn takes_action(&self) -> bool;

    /// `rows×1` values. `action` (`rows×N`) must be given exactly when
    /// [`Critic::takes_action`] is true.
    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch, action: Option<Var>) -> Result<Var>;
}

fn check_action(g: &Graph<'_>, takes: bool, obs: &ObsBatch, action: Option<Var>) -> Result<()> {
    match (takes, action) {
        (true, Some(a)) if g.shape(a) == [obs.rows(), obs.n_pairs()] => Ok(()),
        (true, Some(a)) => Err(shape_err!("action {:?} for {} rows of {} pairs", g.shape(a), obs.rows(), obs.n_pairs())),
        (true, None) => Err(shape_err!("Q critic needs an action")),
        (false, Some(_)) => Err(shape_err!("V critic takes no action")),
        (false, None) => Ok(()),
    }
}

/// Critic with the CASNET encoder and trunk. As a Q function each pair's
/// features are extended with that joint's action.
#[derive(Debug, Clone, PartialEq)]
pub struct CasnetCritic {
    pub encoder: RnnCell,
    pub trunk: [AffineLayer; 2],
    pub head: AffineLayer,
}

impl CasnetCritic {
    pub fn q<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Self::with_input(PAIR_FEATURES + 1, rng)
    }

    pub fn v<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Self::with_input(PAIR_FEATURES, rng)
    }

    fn with_input<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: RnnCell::new(d_in, EMBED, rng)?,
            trunk: new_trunk(EMBED + GOAL_DIM, rng)?,
            head: AffineLayer::new(TRUNK, 1, rng)?,
        })
    }
}

impl Module for CasnetCritic {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.trunk.iter().flat_map(|l| l.params()));
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.trunk.iter_mut().flat_map(|l| l.params_mut()));
        p.extend(self.head.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = prefixed("encoder", self.encoder.param_names()).collect();
        for (i, l) in self.trunk.iter().enumerate() {
            n.extend(prefixed(&format!("trunk.{i}"), l.param_names()));
        }
        n.extend(prefixed("head", self.head.param_names()));
        n
    }
}

impl Critic for CasnetCritic {
    fn takes_action(&self) -> bool {
        self.encoder.d_in() == PAIR_FEATURES + 1
    }

    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch, action: Option<Var>) -> Result<Var> {
        check_action(g, self.takes_action(), obs, action)?;
        let mut c = VarCursor::new(vars);
        let encoder = BoundRnn::take(&mut c)?;
        let trunk = take_trunk(&mut c)?;
        let head = BoundAffine::take(&mut c)?;
        c.finish()?;

        let mut xs = Vec::with_capacity(obs.n_pairs());
        for (i, p) in obs.pairs.iter().enumerate() {
            let x = g.input(p.clone());
            xs.push(match action {
                Some(a) => {
                    let ai = g.slice_cols(a, i, 1)?;
                    g.concat_cols(&[x, ai])?
                }
                None => x,
            });
        }
        let (embedding, _) = encoder.encode(g, &xs, None)?;
        let goal = g.input(obs.goal.clone());
        let z = g.concat_cols(&[embedding, goal])?;
        let t = affine_pair(g, &trunk, z)?;
        head.forward(g, t)
    }
}

/// Fully connected critic over the flat observation (and action).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCritic {
    pub body: Mlp,
    pub head: AffineLayer,
    n_actions: usize,
    takes_action: bool,
}

impl MlpCritic {
    pub fn q<R: Rng + ?Sized>(n_actions: usize, rng: &mut R) -> Result<Self> {
        Self::with_input(n_actions, true, rng)
    }

    pub fn v<R: Rng + ?Sized>(n_actions: usize, rng: &mut R) -> Result<Self> {
        Self::with_input(n_actions, false, rng)
    }

    fn with_input<R: Rng + ?Sized>(n_actions: usize, takes_action: bool, rng: &mut R) -> Result<Self> {
        let d_in = PAIR_FEATURES * n_actions + GOAL_DIM + if takes_action { n_actions } else { 0 };
        Ok(Self {
            body: Mlp::new(&[d_in, EXPERT_HIDDEN, EXPERT_HIDDEN], rng)?,
            head: AffineLayer::new(EXPERT_HIDDEN, 1, rng)?,
            n_actions,
            takes_action,
        })
    }
}

impl Module for MlpCritic {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.body.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.body.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = prefixed("body", self.body.param_names()).collect();
        n.extend(prefixed("head", self.head.param_names()));
        n
    }
}

impl Critic for MlpCritic {
    fn takes_action(&self) -> bool {
        self.takes_action
    }

    fn forward(&self, g: &mut Graph<'_>, vars: &[Var], obs: &ObsBatch, action: Option<Var>) -> Result<Var> {
        if obs.n_pairs() != self.n_actions {
            return Err(shape_err!("critic for {} links given {} pairs", self.n_actions, obs.n_pairs()));
        }
        check_action(g, self.takes_action, obs, action)?;
        let mut c = VarCursor::new(vars);
        let body = self.body.take(&mut c)?;
        let head = BoundAffine::take(&mut c)?;
        c.finish()?;

        let mut x = g.input(obs.flat());
        if let Some(a) = action {
            x = g.concat_cols(&[x, a])?;
        }
        let h = mlp_forward(g, &body, x, true)?;
        head.forward(g, h)
    }
}

// ------------------------------------------------------------ hierarchical

/// Joint states of a legged robot: rows of per-joint `(pos, vel)` in
/// leg-then-joint order, with a unit heading goal per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LeggedObs {
    pub joint_states: Vec<Vec<[f64; 2]>>,
    pub goals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierCasnetPolicy {
    pub leg_encoder: RnnCell,
    pub robot_encoder: RnnCell,
    pub trunk: [AffineLayer; 2],
    pub context_proj: AffineLayer,
    pub value_head: AffineLayer,
    pub leg_decoder: RnnCell,
    pub action_decoder: RnnCell,
    pub action_head: AffineLayer,
    pub log_std: Tensor,
}

impl HierCasnetPolicy {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(Self {
            leg_encoder: RnnCell::new(JOINT_FEATURES, EMBED, rng)?,
            robot_encoder: RnnCell::new(EMBED + ATTACH_DIM, EMBED, rng)?,
            trunk: new_trunk(EMBED + GOAL_DIM, rng)?,
            context_proj: AffineLayer::new(TRUNK, EMBED, rng)?,
            value_head: AffineLayer::new(TRUNK, 1, rng)?,
            leg_decoder: RnnCell::new(EMBED, EMBED, rng)?,
            action_decoder: RnnCell::new(2 * EMBED, EMBED, rng)?,
            action_head: AffineLayer::new(EMBED, 1, rng)?,
            log_std: log_std_init(1),
        })
    }

    /// Means in leg-then-joint order, plus the state value.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        morph: &LeggedMorphology,
        obs: &LeggedObs,
    ) -> Result<PolicyOutput> {
        morph.validate()?;
        let rows = obs.joint_states.len();
        let total = morph.total_joints();
        if rows == 0 || obs.goals.len() != rows {
            return Err(shape_err!("{rows} joint-state rows with {} goals", obs.goals.len()));
        }
        if let Some(bad) = obs.joint_states.iter().find(|s| s.len() != total) {
            return Err(shape_err!("{} joint states for a morphology with {total} joints", bad.len()));
        }

        let mut c = VarCursor::new(vars);
        let leg_encoder = BoundRnn::take(&mut c)?;
        let robot_encoder = BoundRnn::take(&mut c)?;
        let trunk = take_trunk(&mut c)?;
        let context_proj = BoundAffine::take(&mut c)?;
        let value_head = BoundAffine::take(&mut c)?;
        let leg_decoder = BoundRnn::take(&mut c)?;
        let action_decoder = BoundRnn::take(&mut c)?;
        let action_head = BoundAffine::take(&mut c)?;
        let raw_log_std = c.next_var()?;
        c.finish()?;

        let mut joint_hiddens = Vec::with_capacity(morph.legs.len());
        let mut robot_inputs = Vec::with_capacity(morph.legs.len());
        let mut offset = 0;
        for leg in &morph.legs {
            let mut xs = Vec::with_capacity(leg.joints.len());
            for (j, joint) in leg.joints.iter().enumerate() {
                let mut data = Vec::with_capacity(rows * JOINT_FEATURES);
                for state in &obs.joint_states {
                    let [pos, vel] = state[offset + j];
                    let [ax, ay, az] = joint.axis;
                    data.extend_from_slice(&[pos, vel, joint.link_length, joint.range.0, joint.range.1, ax, ay, az]);
                }
                xs.push(g.input(Tensor::new(&[rows, JOINT_FEATURES], data)?));
            }
            offset += leg.joints.len();
            let (leg_embedding, hs) = leg_encoder.encode(g, &xs, None)?;
            joint_hiddens.push(hs);
            let attach = g.input(Tensor::new(&[rows, ATTACH_DIM], leg.attach.repeat(rows))?);
            robot_inputs.push(g.concat_cols(&[leg_embedding, attach])?);
        }
        let (robot_embedding, leg_hiddens) = robot_encoder.encode(g, &robot_inputs, None)?;

        let goal = g.input(Tensor::new(&[rows, GOAL_DIM], obs.goals.iter().flatten().copied().collect())?);
        let z = g.concat_cols(&[robot_embedding, goal])?;
        let t = affine_pair(g, &trunk, z)?;
        let value = value_head.forward(g, t)?;

        let mut d = context_proj.forward(g, t)?;
        let mut columns = Vec::with_capacity(total);
        for (r, hs) in leg_hiddens.iter().zip(&joint_hiddens) {
            d = leg_decoder.step(g, *r, Some(d))?;
            let mut a = None;
            for &e in hs {
                let x = g.concat_cols(&[d, e])?;
                let h = action_decoder.step(g, x, a)?;
                a = Some(h);
                columns.push(action_head.forward(g, h)?);
            }
        }
        let means = g.concat_cols(&columns)?;
        let log_std = bounded_log_std(g, raw_log_std, &[rows, total])?;
        Ok(PolicyOutput { means, log_std, value })
    }
}

impl Module for HierCasnetPolicy {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.leg_encoder.params();
        p.extend(self.robot_encoder.params());
        p.extend(self.trunk.iter().flat_map(|l| l.params()));
        p.extend(self.context_proj.params());
        p.extend(self.value_head.params());
        p.extend(self.leg_decoder.params());
        p.extend(self.action_decoder.params());
        p.extend(self.action_head.params());
        p.push(&self.log_std);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.leg_encoder.params_mut();
        p.extend(self.robot_encoder.params_mut());
        p.extend(self.trunk.iter_mut().flat_map(|l| l.params_mut()));
        p.extend(self.context_proj.params_mut());
        p.extend(self.value_head.params_mut());
        p.extend(self.leg_decoder.params_mut());
        p.extend(self.action_decoder.params_mut());
        p.extend(self.action_head.params_mut());
        p.push(&mut self.log_std);
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = prefixed("leg_encoder", self.leg_encoder.param_names()).collect();
        n.extend(prefixed("robot_encoder", self.robot_encoder.param_names()));
        for (i, l) in self.trunk.iter().enumerate() {
            n.extend(prefixed(&format!("trunk.{i}"), l.param_names()));
        }
        n.extend(prefixed("context_proj", self.context_proj.param_names()));
        n.extend(prefixed("value_head", self.value_head.param_names()));
        n.extend(prefixed("leg_decoder", self.leg_decoder.param_names()));
        n.extend(prefixed("action_decoder", self.action_decoder.param_names()));
        n.extend(prefixed("action_head", self.action_head.param_names()));
        n.push("log_std".into());
        n
    }
}

/// Means (leg-then-joint order) and value for one joint state.
pub fn hier_forward(
    policy: &HierCasnetPolicy,
    morph: &LeggedMorphology,
    joint_state: &[[f64; 2]],
    goal: [f64; 2],
) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, policy.params(), false);
    let obs = LeggedObs { joint_states: vec![joint_state.to_vec()], goals: vec![goal] };
    let out = policy.forward(&mut g, &vars, morph, &obs)?;
    Ok((Tensor::vector(g.value(out.means).data()), g.value(out.value).item()))
}

/// Total scalar parameter count of any module.
pub fn param_count<M: Module + ?Sized>(m: &M) -> usize {
    m.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_report, GradCheckReport};
    use crate::envs::{find_spec, observe, registry_load, reset};
    use crate::morphology::structural_variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_pairs(n: usize, r: &mut ChaCha8Rng) -> Vec<PairObservation> {
        let u = Uniform::new(-1.0, 1.0).unwrap();
        (0..n)
            .map(|_| PairObservation {
                joint_pos: 3.0 * u.sample(r),
                joint_vel: 2.0 * u.sample(r),
                link_length: 0.1 + 0.1 * u.sample(r).abs(),
            })
            .collect()
    }

    #[test]
    fn output_width_follows_link_count() {
        let policy = CasnetPolicy::new(&mut rng(0)).unwrap();
        let shapes: Vec<Vec<usize>> = policy.params().iter().map(|t| t.shape().to_vec()).collect();
        for n in 1..=6 {
            let (means, value) = casnet_forward(&policy, &random_pairs(n, &mut rng(n as u64)), [0.1, 0.0]).unwrap();
            assert_eq!(means.numel(), n);
            assert!(value.is_finite());
        }
        let after: Vec<Vec<usize>> = policy.params().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, after);
        assert!(matches!(casnet_forward(&policy, &[], [0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn param_count_is_the_sum_over_named_tensors() {
        let policy = CasnetPolicy::new(&mut rng(0)).unwrap();
        assert_eq!(policy.params().len(), policy.param_names().len());
        let summed: usize = policy.params().iter().map(|t| t.shape().iter().product::<usize>()).sum();
        assert_eq!(param_count(&policy), summed);
        assert_eq!(param_count(&policy), 11_811);
        for spec in registry_load() {
            let state = reset(&spec, &mut rng(1));
            casnet_forward(&policy, &observe(&state, &spec), state.goal).unwrap();
            assert_eq!(param_count(&policy), 11_811);
        }
    }

    #[test]
    fn batched_forward_matches_rows() {
        let policy = CasnetPolicy::new(&mut rng(4)).unwrap();
        let mut r = rng(5);
        let a = random_pairs(3, &mut r);
        let b = random_pairs(3, &mut r);
        let batch = ObsBatch::new(&[&a, &b], &[[0.1, 0.2], [-0.1, 0.0]]).unwrap();
        let v = evaluate(&policy, &batch).unwrap();
        let (ma, va) = casnet_forward(&policy, &a, [0.1, 0.2]).unwrap();
        let (mb, vb) = casnet_forward(&policy, &b, [-0.1, 0.0]).unwrap();
        let tol = 1e-12;
        for (x, y) in v.means.data().iter().zip(ma.data().iter().chain(mb.data())) {
            assert!((x - y).abs() < tol);
        }
        assert!((v.value.data()[0] - va).abs() < tol && (v.value.data()[1] - vb).abs() < tol);
        assert_eq!(v.log_std.data(), &[LOG_STD_INIT; 6]);
        assert_eq!(ObsBatch::from_flat(&batch.flat()).unwrap(), batch);
    }

    #[test]
    fn same_seed_same_outputs() {
        let obs = random_pairs(4, &mut rng(9));
        let a = casnet_forward(&CasnetPolicy::new(&mut rng(2)).unwrap(), &obs, [0.1, 0.1]).unwrap();
        let b = casnet_forward(&CasnetPolicy::new(&mut rng(2)).unwrap(), &obs, [0.1, 0.1]).unwrap();
        assert_eq!(a, b);
    }

    /// Components below ~1e-5 sit within a few ulps of f divided by 2h, so
    /// only larger ones are held to the relative bound.
    fn assert_gradients_match(report: &GradCheckReport) {
        assert!(report.max_abs_error() < 1e-9, "{}", report.max_abs_error());
        assert!(report.max_rel_error_above(1e-5) < 1e-5, "{}", report.max_rel_error_above(1e-5));
    }

    fn mean_of_means_check<A: Actor>(actor: &A, obs: &ObsBatch) {
        let params: Vec<Tensor> = actor.params().into_iter().cloned().collect();
        let report = grad_check_report(&params, |g, v| {
            let out = actor.forward(g, v, obs)?;
            Ok(g.mean(out.means))
        })
        .unwrap();
        assert_gradients_match(&report);
    }

    #[test]
    fn casnet_gradient_check() {
        let policy = CasnetPolicy::new(&mut rng(11)).unwrap();
        let obs = ObsBatch::single(&random_pairs(3, &mut rng(12)), [0.05, -0.1]).unwrap();
        mean_of_means_check(&policy, &obs);
    }

    #[test]
    fn expert_width_zero_weights_and_gradient() {
        let mut expert = ExpertPolicy::new(2, &mut rng(3)).unwrap();
        let flat = [0.1, 0.2, 0.12, -0.3, 0.0, 0.12, 0.1, 0.1];
        let (means, _) = expert_forward(&expert, &flat).unwrap();
        assert_eq!(means.numel(), 2);
        assert!(matches!(expert_forward(&expert, &flat[..5]), Err(Error::Shape(_))));
        let other = ObsBatch::single(&random_pairs(3, &mut rng(1)), [0.0, 0.0]).unwrap();
        assert!(matches!(evaluate(&expert, &other), Err(Error::Shape(_))));

        let obs = ObsBatch::single(&random_pairs(2, &mut rng(7)), [0.1, -0.05]).unwrap();
        mean_of_means_check(&expert, &obs);

        for t in expert.params_mut() {
            t.fill(0.0);
        }
        let (means, value) = expert_forward(&expert, &flat).unwrap();
        assert_eq!(means.data(), &[0.0, 0.0]);
        assert_eq!(value, 0.0);
        assert_eq!(ExpertPolicy::new(1, &mut rng(0)).unwrap().n_actions(), 1);
    }

    #[test]
    fn critics_check_action_presence() {
        let obs = ObsBatch::single(&random_pairs(2, &mut rng(1)), [0.0, 0.1]).unwrap();
        let q = CasnetCritic::q(&mut rng(2)).unwrap();
        let v = CasnetCritic::v(&mut rng(3)).unwrap();
        assert!(q.takes_action() && !v.takes_action());
        let mut g = Graph::new();
        let qv = bind_params(&mut g, q.params(), true);
        let vv = bind_params(&mut g, v.params(), true);
        let a = g.input(Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap());
        let out = q.forward(&mut g, &qv, &obs, Some(a)).unwrap();
        assert_eq!(g.shape(out), [1, 1]);
        assert!(q.forward(&mut g, &qv, &obs, None).is_err());
        assert!(v.forward(&mut g, &vv, &obs, Some(a)).is_err());
        let out = v.forward(&mut g, &vv, &obs, None).unwrap();
        assert_eq!(g.shape(out), [1, 1]);

        let mq = MlpCritic::q(2, &mut rng(4)).unwrap();
        let mv = bind_params(&mut g, mq.params(), true);
        let out = mq.forward(&mut g, &mv, &obs, Some(a)).unwrap();
        assert_eq!(g.shape(out), [1, 1]);
    }

    #[test]
    fn q_critic_gradient_reaches_the_action() {
        let q = CasnetCritic::q(&mut rng(5)).unwrap();
        let obs = ObsBatch::single(&random_pairs(3, &mut rng(6)), [0.1, 0.0]).unwrap();
        let mut params: Vec<Tensor> = q.params().into_iter().cloned().collect();
        params.push(Tensor::new(&[1, 3], vec![0.2, -0.4, 0.7]).unwrap());
        let report = grad_check_report(&params, |g, v| {
            let (net, a) = v.split_at(v.len() - 1);
            q.forward(g, net, &obs, Some(a[0]))
        })
        .unwrap();
        assert_gradients_match(&report);
    }

    fn random_joint_state(total: usize, r: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
        let u = Uniform::new(-1.0, 1.0).unwrap();
        (0..total).map(|_| [u.sample(r), 2.0 * u.sample(r)]).collect()
    }

    #[test]
    fn hierarchical_output_counts() {
        let policy = HierCasnetPolicy::new(&mut rng(0)).unwrap();
        let quad = structural_variant("Quadrupled_10").unwrap();
        let (means, _) = hier_forward(&policy, &quad, &random_joint_state(8, &mut rng(1)), [1.0, 0.0]).unwrap();
        assert_eq!(means.numel(), 8);
        let hex = structural_variant("Hexapod_11").unwrap();
        let (means, _) = hier_forward(&policy, &hex, &random_joint_state(13, &mut rng(2)), [0.0, 1.0]).unwrap();
        assert_eq!(means.numel(), 13);
        let err = hier_forward(&policy, &hex, &random_joint_state(12, &mut rng(2)), [0.0, 1.0]);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert_eq!(policy.params().len(), policy.param_names().len());
    }

    #[test]
    fn hierarchical_gradient_check() {
        let policy = HierCasnetPolicy::new(&mut rng(21)).unwrap();
        let morph = structural_variant("Quadrupled_11").unwrap();
        let obs = LeggedObs { joint_states: vec![random_joint_state(9, &mut rng(22))], goals: vec![[0.6, 0.8]] };
        let params: Vec<Tensor> = policy.params().into_iter().cloned().collect();
        let report = grad_check_report(&params, |g, v| {
            let out = policy.forward(g, v, &morph, &obs)?;
            Ok(g.mean(out.means))
        })
        .unwrap();
        assert_gradients_match(&report);
    }

    #[test]
    fn reacher_observation_round_trip() {
        let spec = find_spec("Reacher_30").unwrap();
        let state = reset(&spec, &mut rng(3));
        let batch = ObsBatch::single(&observe(&state, &spec), state.goal).unwrap();
        assert_eq!(batch.n_pairs(), 3);
        assert_eq!(batch.flat().shape(), [1, 11]);
        let two = ObsBatch::concat(&[batch.clone(), batch.clone()]).unwrap();
        assert_eq!(two.rows(), 2);
        assert_eq!(two.select(&[1]), batch);
    }
}
