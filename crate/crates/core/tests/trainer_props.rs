use iatrpo::cliio::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use iatrpo::envs::{EnvConfig, EnvId, GOAL_DIM, OTHER_OBS_DIM, OWN_OBS_DIM};
use iatrpo::evalr::success_rate;
use iatrpo::trainer::{
    convergence_iteration, evaluate_episodes, train_iatrpo, train_matrpo, train_single, CurriculumConfig, MetricsRow,
    PolicyHandle, PolicyKind, RolloutMode, RolloutSettings,
};
use iatrpo::trpo::TrpoConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(env_id: EnvId) -> (EnvConfig, TrpoConfig, CurriculumConfig) {
    let env = EnvConfig {
        horizon: 80,
        ..EnvConfig::default()
    };
    let trpo = TrpoConfig {
        batch_timesteps: 400,
        ..TrpoConfig::default()
    };
    let cur = CurriculumConfig {
        env_id,
        seed: 5,
        hidden: vec![16, 16],
        stage1_iterations: 3,
        stage2_iterations: 3,
        matrpo_iterations: 3,
        probe_episodes: 4,
        ..CurriculumConfig::default()
    };
    (env, trpo, cur)
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..8.0)).collect()
}

#[test]
fn zero_modifier_reproduces_the_single_policy_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for env_id in [EnvId::C2, EnvId::R3] {
        let n = env_id.n_agents();
        let single = PolicyHandle::new_single(env_id, 0, &[32, 32], 0.01, &mut rng).unwrap();
        let exact = PolicyHandle::new_composed(&single, n, false, 0.0, &mut rng).unwrap();
        let small = PolicyHandle::new_composed(&single, n, true, 0.01, &mut rng).unwrap();
        for _ in 0..50 {
            let own = random_obs(&mut rng, OWN_OBS_DIM);
            let goal = random_obs(&mut rng, GOAL_DIM);
            let others = random_obs(&mut rng, OTHER_OBS_DIM * (n - 1));
            let base = single.act(&own, &goal, None).unwrap();
            assert_eq!(exact.act(&own, &goal, Some(&others)).unwrap(), base);
            assert_eq!(
                exact.value(&own, &goal, Some(&others), None).unwrap(),
                single.value(&own, &goal, None, None).unwrap()
            );
            let composed = small.act(&own, &goal, Some(&others)).unwrap();
            let mut input = own.clone();
            input.extend(&others);
            input.extend(&goal);
            let modifier = small.actor.forward(&input).unwrap();
            for k in 0..2 {
                let diff = (composed.mean[k] - base.mean[k]).abs();
                assert!((diff - modifier[k].abs()).abs() < 1e-12);
            }
            assert_eq!(composed.log_std, single.actor.log_std.clone().unwrap());
        }
    }
}

#[test]
fn matrpo_critic_sees_other_actions_but_actor_does_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = PolicyHandle::new_matrpo(EnvId::R3, 1, 3, &[8], 0.01, &mut rng).unwrap();
    let obs = OWN_OBS_DIM + GOAL_DIM + 2 * OTHER_OBS_DIM;
    assert_eq!(p.actor.spec.input_dim, obs);
    assert_eq!(p.critic.spec.input_dim, obs + 2 * 2);
    let own = random_obs(&mut rng, OWN_OBS_DIM);
    let goal = random_obs(&mut rng, GOAL_DIM);
    let others = random_obs(&mut rng, 2 * OTHER_OBS_DIM);
    let v1 = p.value(&own, &goal, Some(&others), Some(&[0.0; 4])).unwrap();
    let v2 = p.value(&own, &goal, Some(&others), Some(&[1.0, -1.0, 0.5, 0.2])).unwrap();
    assert_ne!(v1, v2);
    assert!(p.value(&own, &goal, Some(&others), None).is_err());
}

#[test]
fn stage_two_keeps_the_frozen_networks_bit_identical() {
    let (env, trpo, cur) = tiny(EnvId::C2Fixed);
    let singles: Vec<PolicyHandle> = train_single(&env, &trpo, &cur, &mut |_| {})
        .unwrap()
        .into_iter()
        .map(|o| o.handles.into_iter().next().unwrap())
        .collect();
    let out = train_iatrpo(&env, &trpo, &cur, &singles, &mut |_| {}).unwrap();
    for (h, s) in out.handles.iter().zip(&singles) {
        let f = h.frozen_single.as_ref().unwrap();
        assert_eq!(f.actor, s.actor);
        assert_eq!(f.critic, s.critic);
        assert_eq!(h.kind, PolicyKind::Composed);
    }
    assert_eq!(out.iterations, 3);
    assert_eq!(out.metrics.len(), 3 * 2);
}

#[test]
fn stage_two_refuses_mismatched_stage_one_policies() {
    let (env, trpo, cur) = tiny(EnvId::C2Fixed);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wrong_env: Vec<PolicyHandle> = (0..2)
        .map(|r| PolicyHandle::new_single(EnvId::C2, r, &[16, 16], 0.01, &mut rng).unwrap())
        .collect();
    assert!(train_iatrpo(&env, &trpo, &cur, &wrong_env, &mut |_| {}).is_err());
    let swapped: Vec<PolicyHandle> = (0..2)
        .map(|r| PolicyHandle::new_single(EnvId::C2Fixed, 1 - r, &[16, 16], 0.01, &mut rng).unwrap())
        .collect();
    assert!(train_iatrpo(&env, &trpo, &cur, &swapped, &mut |_| {}).is_err());
    assert!(train_iatrpo(&env, &trpo, &cur, &swapped[..1], &mut |_| {}).is_err());
}

#[test]
fn training_is_reproducible_for_a_fixed_seed() {
    let (env, trpo, cur) = tiny(EnvId::C2);
    let run = || {
        let mut rows = Vec::new();
        let out = train_matrpo(&env, &trpo, &cur, &mut |r: &MetricsRow| rows.push(r.clone())).unwrap();
        (out.handles, rows)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let other = CurriculumConfig { seed: 6, ..cur.clone() };
    let c = train_matrpo(&env, &trpo, &other, &mut |_| {}).unwrap();
    assert_ne!(a, c.handles);
}

#[test]
fn reloaded_checkpoint_evaluates_like_the_in_memory_policy() {
    let (env, trpo, cur) = tiny(EnvId::C2Fixed);
    let out = train_matrpo(&env, &trpo, &cur, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for h in &out.handles {
        let path = dir.path().join(format!("p{}.ckpt", h.role));
        let c = Checkpoint {
            policy: h.clone(),
            meta: CheckpointMeta {
                seed: cur.seed,
                iterations: out.iterations,
                config_hash: "x".into(),
            },
        };
        save_checkpoint(&c, &path).unwrap();
        loaded.push(load_checkpoint(&path).unwrap().policy);
    }
    let settings = RolloutSettings {
        env_id: EnvId::C2Fixed,
        env: &env,
        mode: RolloutMode::Multi,
        deterministic: true,
        record_steps: true,
    };
    let a = evaluate_episodes(&settings, &out.handles, 5, 77).unwrap();
    let b = evaluate_episodes(&settings, &loaded, 5, 77).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        success_rate(&env, EnvId::C2Fixed, RolloutMode::Multi, &out.handles, 20, 1).unwrap(),
        success_rate(&env, EnvId::C2Fixed, RolloutMode::Multi, &loaded, 20, 1).unwrap()
    );
}

fn row(agent: usize, iteration: usize, s: f64) -> MetricsRow {
    MetricsRow {
        agent,
        iteration,
        agent_success_probe: s,
        ..MetricsRow::default()
    }
}

proptest! {
    #[test]
    fn convergence_is_the_start_of_the_final_run_above_threshold(
        series in prop::collection::vec(0.0f64..1.0, 1..60),
    ) {
        let rows: Vec<MetricsRow> = series.iter().enumerate().map(|(i, &s)| row(0, i, s)).collect();
        let want = (0..series.len()).find(|&k| series[k..].iter().all(|&s| s > 0.9));
        prop_assert_eq!(convergence_iteration(&rows, 0, 0.9), want);
        prop_assert_eq!(convergence_iteration(&rows, 1, 0.9), None);
    }
}
