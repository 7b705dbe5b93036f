//! Planar N-link torque-controlled reachers.
//!
//! Each joint is an independent damped double integrator (no coupling, no
//! gravity) driven by a clamped control in `[-1, 1]`. Damping is integrated
//! implicitly and the angle uses the updated velocity:
//!
//! ```text
//! v' = (v + dt·u·τ_max / I) / (1 + dt·c / I),   I = m·l² / 3
//! θ' = θ + dt·v'
//! ```
//!
//! Reward is `−(‖fingertip − goal‖ + w_τ · mean|u|)`; episodes last exactly
//! [`EPISODE_LEN`] steps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::shape_err;
use crate::math;
use crate::{Error, Result};

pub const DT: f64 = 0.02;
pub const TAU_MAX: f64 = 1.0;
pub const DAMPING: f64 = 0.5;
/// Link mass per link (kg), entering `I = m·l²/3`.
pub const LINK_MASS: f64 = 1.0;
pub const V_MAX: f64 = 8.0;
pub const TORQUE_WEIGHT: f64 = 0.1;
pub const EPISODE_LEN: usize = 100;

/// A reacher model: ordered link lengths from the base outward.
#[derive(Debug, Clone, PartialEq)]
pub struct ReacherSpec {
    pub name: String,
    pub link_lengths: Vec<f64>,
    pub train_member: bool,
}

impl ReacherSpec {
    pub fn new(name: &str, link_lengths: &[f64], train_member: bool) -> Result<Self> {
        if link_lengths.is_empty() || link_lengths.len() > 6 {
            return Err(Error::Parameter(format!("{name}: 1 to 6 links required")));
        }
        if link_lengths.iter().any(|&l| !(l > 0.0 && l <= 0.2)) {
            return Err(Error::Parameter(format!("{name}: link lengths must lie in (0, 0.2]")));
        }
        Ok(Self { name: name.to_string(), link_lengths: link_lengths.to_vec(), train_member })
    }

    pub fn n_links(&self) -> usize {
        self.link_lengths.len()
    }

    /// `name,n_links,lengths,train_member` with lengths joined by `;`.
    pub fn csv_row(&self) -> String {
        let lengths: Vec<String> = self.link_lengths.iter().map(|l| format!("{l}")).collect();
        format!("{},{},{},{}", self.name, self.n_links(), lengths.join(";"), self.train_member)
    }
}

pub const REGISTRY_CSV_HEADER: &str = "name,n_links,lengths,train_member";

// Reacher_42 and Reacher_61 list a first link of "0.8" / "0.0.8"; both are
// read as 0.08, in line with every other length in the table.
const TABLE: [(&str, &[f64], bool); 18] = [
    ("Reacher_10", &[0.1], true),
    ("Reacher_11", &[0.15], false),
    ("Reacher_12", &[0.09], false),
    ("Reacher_20", &[0.12, 0.12], true),
    ("Reacher_21", &[0.09, 0.14], false),
    ("Reacher_22", &[0.13, 0.15], false),
    ("Reacher_30", &[0.15, 0.17, 0.09], true),
    ("Reacher_31", &[0.08, 0.11, 0.12], false),
    ("Reacher_32", &[0.1, 0.1, 0.15], false),
    ("Reacher_40", &[0.1, 0.16, 0.13, 0.09], true),
    ("Reacher_41", &[0.13, 0.14, 0.07, 0.07], false),
    ("Reacher_42", &[0.08, 0.15, 0.09, 0.11], false),
    ("Reacher_50", &[0.1, 0.1, 0.1, 0.1, 0.1], true),
    ("Reacher_51", &[0.15, 0.08, 0.09, 0.11, 0.13], false),
    ("Reacher_52", &[0.1, 0.09, 0.12, 0.1, 0.14], false),
    ("Reacher_60", &[0.1, 0.08, 0.15, 0.15, 0.1, 0.09], false),
    ("Reacher_61", &[0.08, 0.09, 0.07, 0.13, 0.14, 0.07], false),
    ("Reacher_62", &[0.1, 0.12, 0.08, 0.13, 0.07, 0.14], false),
];

/// All 18 reacher models in table order.
pub fn registry_load() -> Vec<ReacherSpec> {
    TABLE
        .iter()
        .map(|(n, l, t)| ReacherSpec::new(n, l, *t).expect("registry entries are valid"))
        .collect()
}

pub fn find_spec(name: &str) -> Result<ReacherSpec> {
    registry_load()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Lookup(format!("unknown environment {name:?}")))
}

/// The models used to train the general policy.
pub fn train_set() -> Vec<ReacherSpec> {
    registry_load().into_iter().filter(|s| s.train_member).collect()
}

pub fn test_set() -> Vec<ReacherSpec> {
    registry_load().into_iter().filter(|s| !s.train_member).collect()
}

/// Fingertip position of a planar revolute chain with relative joint angles.
pub fn forward_kinematics(angles: &[f64], lengths: &[f64]) -> Result<[f64; 2]> {
    if angles.len() != lengths.len() {
        return Err(shape_err!("{} angles for {} links", angles.len(), lengths.len()));
    }
    let (mut x, mut y, mut phi) = (0.0, 0.0, 0.0);
    for (&a, &l) in angles.iter().zip(lengths) {
        phi += a;
        x += l * math::cos(phi);
        y += l * math::sin(phi);
    }
    Ok([x, y])
}

/// Radii the fingertip can reach with unlimited revolute joints.
pub fn reachable_annulus(lengths: &[f64]) -> (f64, f64) {
    let total: f64 = lengths.iter().sum();
    let longest = lengths.iter().copied().fold(0.0, f64::max);
    ((longest - (total - longest)).max(0.0), total)
}

/// Goal drawn uniformly by area over the reachable annulus.
pub fn sample_goal<R: Rng + ?Sized>(lengths: &[f64], rng: &mut R) -> [f64; 2] {
    let (r_min, r_max) = reachable_annulus(lengths);
    let u: f64 = rng.random();
    let r = math::sqrt(u * (r_max * r_max - r_min * r_min) + r_min * r_min).clamp(r_min, r_max);
    let theta = rng.random::<f64>() * core::f64::consts::TAU;
    [r * math::cos(theta), r * math::sin(theta)]
}

/// One actuator-link pair as seen by the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservation {
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub link_length: f64,
}

impl PairObservation {
    pub fn features(&self) -> [f64; 3] {
        [self.joint_pos, self.joint_vel, self.link_length]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub angles: Vec<f64>,
    pub velocities: Vec<f64>,
    pub goal: [f64; 2],
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<PairObservation>,
    pub reward: f64,
    pub done: bool,
}

/// Arm straight along +x at rest, goal sampled over the annulus.
pub fn reset<R: Rng + ?Sized>(spec: &ReacherSpec, rng: &mut R) -> EnvState {
    let goal = sample_goal(&spec.link_lengths, rng);
    reset_with_goal(spec, goal)
}

pub fn reset_with_goal(spec: &ReacherSpec, goal: [f64; 2]) -> EnvState {
    let n = spec.n_links();
    EnvState { angles: vec![0.0; n], velocities: vec![0.0; n], goal, t: 0 }
}

/// Pairs ordered from the base outward.
pub fn observe(state: &EnvState, spec: &ReacherSpec) -> Vec<PairObservation> {
    state
        .angles
        .iter()
        .zip(&state.velocities)
        .zip(&spec.link_lengths)
        .map(|((&p, &v), &l)| PairObservation { joint_pos: p, joint_vel: v, link_length: l })
        .collect()
}

pub fn fingertip(state: &EnvState, spec: &ReacherSpec) -> [f64; 2] {
    forward_kinematics(&state.angles, &spec.link_lengths).expect("state matches spec")
}

pub fn goal_distance(state: &EnvState, spec: &ReacherSpec) -> f64 {
    let [x, y] = fingertip(state, spec);
    libm::hypot(x - state.goal[0], y - state.goal[1])
}

pub fn step(state: &EnvState, action: &[f64], spec: &ReacherSpec) -> Result<(EnvState, StepResult)> {
    let n = spec.n_links();
    if action.len() != n {
        return Err(shape_err!("{} actions for {} actuators", action.len(), n));
    }
    if state.t >= EPISODE_LEN {
        return Err(Error::Protocol("step called after the episode ended".into()));
    }
    let mut next = state.clone();
    let mut effort = 0.0;
    for i in 0..n {
        let u = if action[i].is_nan() { 0.0 } else { action[i].clamp(-1.0, 1.0) };
        effort += libm::fabs(u);
        let l = spec.link_lengths[i];
        let inertia = LINK_MASS * l * l / 3.0;
        let v = (state.velocities[i] + DT * u * TAU_MAX / inertia) / (1.0 + DT * DAMPING / inertia);
        let v = v.clamp(-V_MAX, V_MAX);
        next.velocities[i] = v;
        next.angles[i] = state.angles[i] + DT * v;
    }
    next.t += 1;
    let reward = -(goal_distance(&next, spec) + TORQUE_WEIGHT * effort / n as f64);
    let result = StepResult { observation: observe(&next, spec), reward, done: next.t == EPISODE_LEN };
    Ok((next, result))
}

/// Stateful wrapper owning a spec, the current state and a goal RNG.
#[derive(Debug, Clone)]
pub struct ReacherEnv<R> {
    spec: ReacherSpec,
    state: EnvState,
    rng: R,
    fixed_goal: Option<[f64; 2]>,
}

impl<R: Rng> ReacherEnv<R> {
    pub fn new(spec: ReacherSpec, mut rng: R) -> Self {
        let state = reset(&spec, &mut rng);
        Self { spec, state, rng, fixed_goal: None }
    }

    /// Every episode uses `goal` instead of a sampled one.
    pub fn with_fixed_goal(spec: ReacherSpec, rng: R, goal: [f64; 2]) -> Self {
        let state = reset_with_goal(&spec, goal);
        Self { spec, state, rng, fixed_goal: Some(goal) }
    }

    pub fn spec(&self) -> &ReacherSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> Vec<PairObservation> {
        observe(&self.state, &self.spec)
    }

    pub fn goal(&self) -> [f64; 2] {
        self.state.goal
    }

    pub fn reset(&mut self) -> Vec<PairObservation> {
        self.state = match self.fixed_goal {
            Some(g) => reset_with_goal(&self.spec, g),
            None => reset(&self.spec, &mut self.rng),
        };
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let (next, res) = step(&self.state, action, &self.spec)?;
        self.state = next;
        Ok(res)
    }

    pub fn distance(&self) -> f64 {
        goal_distance(&self.state, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_matches_table() {
        let reg = registry_load();
        assert_eq!(reg.len(), 18);
        let r20 = find_spec("Reacher_20").unwrap();
        assert_eq!(r20.link_lengths, vec![0.12, 0.12]);
        assert!(r20.train_member);
        let r51 = find_spec("Reacher_51").unwrap();
        assert_eq!(r51.link_lengths, vec![0.15, 0.08, 0.09, 0.11, 0.13]);
        assert!(!r51.train_member);
        let train: Vec<String> = train_set().into_iter().map(|s| s.name).collect();
        assert_eq!(train, ["Reacher_10", "Reacher_20", "Reacher_30", "Reacher_40", "Reacher_50"]);
        assert_eq!(find_spec("Reacher_42").unwrap().link_lengths[0], 0.08);
        assert_eq!(find_spec("Reacher_61").unwrap().link_lengths[0], 0.08);
        assert!(matches!(find_spec("Reacher_99"), Err(Error::Lookup(_))));
        let mut names: Vec<&str> = reg.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 18);
    }

    #[test]
    fn csv_rows() {
        assert_eq!(find_spec("Reacher_20").unwrap().csv_row(), "Reacher_20,2,0.12;0.12,true");
        assert_eq!(find_spec("Reacher_11").unwrap().csv_row(), "Reacher_11,1,0.15,false");
    }

    #[test]
    fn fk_trivial_cases() {
        assert_eq!(forward_kinematics(&[0.0, 0.0], &[0.12, 0.12]).unwrap(), [0.24, 0.0]);
        let [x, y] = forward_kinematics(&[FRAC_PI_2, 0.0], &[0.12, 0.12]).unwrap();
        assert!(x.abs() < 1e-15 && (y - 0.24).abs() < 1e-15);
        assert!(matches!(forward_kinematics(&[0.0], &[0.1, 0.1]), Err(Error::Shape(_))));
    }

    #[test]
    fn fk_never_exceeds_total_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=6);
            let lengths: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.2)).collect();
            let angles: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let [x, y] = forward_kinematics(&angles, &lengths).unwrap();
            assert!(libm::hypot(x, y) <= lengths.iter().sum::<f64>() + 1e-12);
        }
    }

    /// Attainable radii by brute force over an angle grid.
    fn grid_radii(lengths: &[f64]) -> (f64, f64) {
        let steps: usize = if lengths.len() > 3 { 24 } else { 360 };
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        let n = lengths.len();
        let total = steps.pow(n as u32 - 1);
        for code in 0..total.max(1) {
            let mut angles = vec![0.0; n];
            let mut c = code;
            for a in angles.iter_mut().skip(1) {
                *a = (c % steps) as f64 / steps as f64 * core::f64::consts::TAU;
                c /= steps;
            }
            let [x, y] = forward_kinematics(&angles, lengths).unwrap();
            let r = libm::hypot(x, y);
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    #[test]
    fn annulus_examples() {
        assert_eq!(reachable_annulus(&[0.1]), (0.1, 0.1));
        assert_eq!(reachable_annulus(&[0.12, 0.12]), (0.0, 0.24));
        let (lo, hi) = reachable_annulus(&[0.15, 0.08]);
        assert!((lo - 0.07).abs() < 1e-12 && (hi - 0.23).abs() < 1e-12);
        let (glo, ghi) = grid_radii(&[0.15, 0.08]);
        assert!((glo - lo).abs() < 1e-3 && (ghi - hi).abs() < 1e-3);
        let (glo, ghi) = grid_radii(&[0.08, 0.11, 0.12]);
        let (lo, hi) = reachable_annulus(&[0.08, 0.11, 0.12]);
        assert!((glo - lo).abs() < 1e-3 && (ghi - hi).abs() < 1e-3);
    }

    #[test]
    fn reset_state_and_goals() {
        let spec = find_spec("Reacher_51").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = reset(&spec, &mut rng);
        assert_eq!(fingertip(&s, &spec), [spec.link_lengths.iter().sum::<f64>(), 0.0]);
        assert_eq!(s.t, 0);
        assert!(s.velocities.iter().all(|&v| v == 0.0));

        for spec in registry_load() {
            let (lo, hi) = reachable_annulus(&spec.link_lengths);
            for _ in 0..10_000 / 18 + 1 {
                let g = sample_goal(&spec.link_lengths, &mut rng);
                let r = libm::hypot(g[0], g[1]);
                assert!(r >= lo - 1e-9 && r <= hi + 1e-9);
            }
        }
        let a = reset(&spec, &mut ChaCha8Rng::seed_from_u64(42));
        let b = reset(&spec, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_action_at_goal_gives_zero_reward() {
        let spec = find_spec("Reacher_20").unwrap();
        let s = reset_with_goal(&spec, [0.24, 0.0]);
        let (next, res) = step(&s, &[0.0, 0.0], &spec).unwrap();
        assert_eq!(res.reward, 0.0);
        assert_eq!(next.angles, s.angles);
        assert_eq!(next.velocities, s.velocities);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn one_euler_step_from_rest() {
        // Reacher_10: I = 0.1²/3, full torque from rest.
        let spec = find_spec("Reacher_10").unwrap();
        let s = reset_with_goal(&spec, [0.0, 0.1]);
        let (next, _) = step(&s, &[1.0], &spec).unwrap();
        let inertia = 0.01 / 3.0;
        let accel_term = 0.02 * 1.0 / inertia; // 6.0
        let damp_term = 1.0 + 0.02 * 0.5 / inertia; // 4.0
        assert!((next.velocities[0] - accel_term / damp_term).abs() < 1e-12);
        assert!((next.velocities[0] - 1.5).abs() < 1e-12);
        assert!((next.angles[0] - 0.02 * 1.5).abs() < 1e-15);
    }

    #[test]
    fn step_errors() {
        let spec = find_spec("Reacher_20").unwrap();
        let mut s = reset_with_goal(&spec, [0.1, 0.1]);
        assert!(matches!(step(&s, &[0.0], &spec), Err(Error::Shape(_))));
        s.t = EPISODE_LEN;
        assert!(matches!(step(&s, &[0.0, 0.0], &spec), Err(Error::Protocol(_))));
    }

    #[test]
    fn observation_ordering() {
        let spec = find_spec("Reacher_20").unwrap();
        let s = reset_with_goal(&spec, [0.1, 0.0]);
        let obs = observe(&s, &spec);
        assert_eq!(
            obs,
            vec![
                PairObservation { joint_pos: 0.0, joint_vel: 0.0, link_length: 0.12 },
                PairObservation { joint_pos: 0.0, joint_vel: 0.0, link_length: 0.12 }
            ]
        );
        for spec in registry_load() {
            let s = reset_with_goal(&spec, [0.0, 0.0]);
            let ls: Vec<f64> = observe(&s, &spec).iter().map(|p| p.link_length).collect();
            assert_eq!(ls, spec.link_lengths);
        }
    }

    #[test]
    fn episode_is_exactly_100_steps() {
        let spec = find_spec("Reacher_30").unwrap();
        let mut env = ReacherEnv::new(spec, ChaCha8Rng::seed_from_u64(1));
        let mut steps = 0;
        loop {
            let r = env.step(&[0.3, -1.0, 0.7]).unwrap();
            steps += 1;
            assert!(r.reward <= 0.0);
            if r.done {
                break;
            }
        }
        assert_eq!(steps, EPISODE_LEN);
        assert!(env.step(&[0.0; 3]).is_err());
        env.reset();
        assert_eq!(env.state().t, 0);
    }

    #[test]
    fn fixed_goal_persists_across_resets() {
        let spec = find_spec("Reacher_10").unwrap();
        let mut env = ReacherEnv::with_fixed_goal(spec, ChaCha8Rng::seed_from_u64(1), [0.0, 0.1]);
        env.step(&[1.0]).unwrap();
        env.reset();
        assert_eq!(env.goal(), [0.0, 0.1]);
    }
}
