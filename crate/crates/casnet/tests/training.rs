use std::path::Path;

use casnet::checkpoint::Checkpoint;
use casnet::config::{Algo, EnvSelection, TrainConfig};
use casnet::eval::{self, normalized_score, random_baseline};
use casnet::metrics::read_metrics;
use casnet::{seeded_stream, train, train_expert, HarnessError};
use casnet_core::casnet::{CasnetPolicy, ExpertPolicy};
use casnet_core::nn::Module;
use proptest::prelude::*;

fn tiny(dir: &Path, algo: Algo, envs: &[&str]) -> TrainConfig {
    let mut cfg = TrainConfig {
        algo,
        envs: EnvSelection::Names(envs.iter().map(|s| s.to_string()).collect()),
        seed: 3,
        total_env_steps: 600,
        checkpoint_every: 1,
        out_dir: Some(dir.to_path_buf()),
        sac_log_interval: 100,
        ..TrainConfig::default()
    };
    cfg.ppo.rollout_len = 200;
    cfg.ppo.minibatch = 64;
    cfg.ppo.epochs = 2;
    cfg.sac.start_steps = 100;
    cfg.sac.batch_size = 16;
    cfg
}

fn same_params<M: Module>(a: &M, ckpt: &Checkpoint) -> bool {
    a.param_names().iter().zip(a.params()).all(|(n, t)| ckpt.get(n) == Some(t))
}

#[test]
fn zero_learning_rate_keeps_the_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Algo::Ppo, &["Reacher_10", "Reacher_30"]);
    cfg.ppo.lr = 0.0;
    let out = train(&cfg).unwrap();
    let init = CasnetPolicy::new(&mut seeded_stream(cfg.seed, 0)).unwrap();
    assert!(same_params(&init, &Checkpoint::load(&out.final_checkpoint).unwrap()));

    let sac_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(sac_dir.path(), Algo::Sac, &["Reacher_20"]);
    cfg.sac.lr = 0.0;
    let out = train(&cfg).unwrap();
    let init = CasnetPolicy::new(&mut seeded_stream(cfg.seed, 0)).unwrap();
    assert!(same_params(&init, &Checkpoint::load(&out.final_checkpoint).unwrap()));
}

#[test]
fn training_changes_the_policy_and_logs_every_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Algo::Ppo, &["Reacher_10", "Reacher_30", "Reacher_20"]);
    let out = train(&cfg).unwrap();
    assert_eq!(out.env_steps, 600);
    assert_eq!(out.updates, 3);
    let init = CasnetPolicy::new(&mut seeded_stream(cfg.seed, 0)).unwrap();
    assert!(!same_params(&init, &Checkpoint::load(&out.final_checkpoint).unwrap()));
    for u in 1..=3 {
        assert!(dir.path().join(format!("checkpoint_{u:06}.bin")).exists());
    }

    let rows = read_metrics(&out.metrics).unwrap();
    assert_eq!(rows.len(), 9);
    for u in 0..3u64 {
        let mine: Vec<_> = rows.iter().filter(|r| r.update_index == u).collect();
        assert_eq!(mine.iter().map(|r| r.env_name.as_str()).collect::<Vec<_>>(), ["Reacher_10", "Reacher_30", "Reacher_20"]);
        assert!(mine.iter().all(|r| r.policy_loss.is_finite() && r.approx_kl.is_finite()));
    }
    assert!(rows.windows(2).all(|w| w[0].cumulative_env_steps <= w[1].cumulative_env_steps));
    assert_eq!(rows.last().unwrap().cumulative_env_steps, 600);
}

#[test]
fn sac_rows_carry_no_kl() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Algo::Sac, &["Reacher_10"]);
    cfg.sac_fixed_goal = true;
    let out = train(&cfg).unwrap();
    let rows = read_metrics(&out.metrics).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.approx_kl.is_nan()));
    // No update happens before start_steps.
    assert!(rows[0].policy_loss.is_nan());
    assert!(rows.last().unwrap().value_loss.is_finite());
}

#[test]
fn expert_checkpoints_only_fit_their_width() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Algo::Ppo, &[]);
    let out = train_expert("Reacher_20", &cfg).unwrap();
    let ckpt = Checkpoint::load(&out.final_checkpoint).unwrap();
    let policy = eval::LoadedPolicy::from_checkpoint(&ckpt).unwrap();
    assert_eq!(policy.param_count(), ExpertPolicy::new(2, &mut seeded_stream(0, 0)).unwrap().param_count());
    assert!(eval::eval_policy(&ckpt, "Reacher_21", 1, 0).is_ok());
    let err = eval::eval_policy(&ckpt, "Reacher_30", 1, 0).unwrap_err();
    assert!(matches!(err, HarnessError::Core(casnet_core::Error::Shape(_))), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn random_policies_do_not_reach_the_goal() {
    for env in ["Reacher_10", "Reacher_21", "Reacher_62"] {
        let r = random_baseline(env, 2, 0).unwrap();
        assert!(r.mean_final_distance > 0.0 && r.mean_return < 0.0, "{env}: {r:?}");
    }
    assert!(random_baseline("Reacher_10", 0, 0).is_err());
}

proptest! {
    #[test]
    fn normalized_score_is_affine_invariant(
        g in -100.0..100.0f64,
        r in -100.0..100.0f64,
        gap in 0.5..100.0f64,
        scale in 0.01..50.0f64,
        shift in -1e3..1e3f64,
    ) {
        let e = r + gap;
        let base = normalized_score(g, r, e).unwrap();
        let moved = normalized_score(scale * g + shift, scale * r + shift, scale * e + shift).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base.abs()));
        prop_assert!((normalized_score(e, r, e).unwrap() - 100.0).abs() < 1e-9);
        prop_assert!(normalized_score(r, r, e).unwrap().abs() < 1e-9);
        prop_assert!(normalized_score(g, r, r).is_err());
    }
}
