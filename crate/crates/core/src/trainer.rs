//! Policy handles, rollout collection and the training schedules: stage-1
//! single-agent training, stage-2 composed (frozen single + modifier) training
//! and the centralized-critic baseline.
//!
//! Every iteration collects one joint batch, then updates each agent from its
//! own transitions only. Agents are updated simultaneously; nobody waits for a
//! turn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{
    env_step, observe, sample_initial, EnvConfig, EnvId, Observation, RewardMode, WorldState, ACTION_DIM, GOAL_DIM,
    OTHER_OBS_DIM, OWN_OBS_DIM,
};
use crate::error::{Error, Result};
use crate::evalr::{EpisodeTrace, Outcome, StepRecord};
use crate::nnet::{forward_batch, gaussian_log_prob, GaussianAction, MlpSpec, ParameterVector};
use crate::trpo::{fit_value, trpo_step, ActorData, Batch, CriticData, StepReport, TrpoConfig, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    SingleAgent,
    Composed,
    Matrpo,
}

impl PolicyKind {
    pub fn tag(self) -> &'static str {
        match self {
            PolicyKind::SingleAgent => "single",
            PolicyKind::Composed => "composed",
            PolicyKind::Matrpo => "matrpo",
        }
    }
}

/// Frozen stage-1 actor and critic inside a composed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenPair {
    pub actor: ParameterVector,
    pub critic: ParameterVector,
}

/// A trainable policy for one agent role.
///
/// `actor` is the trainable network (the whole policy for `SingleAgent` and
/// `Matrpo`, the modifier for `Composed`) and carries the log-std. `critic`
/// is the matching trainable value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHandle {
    pub kind: PolicyKind,
    pub env_id: EnvId,
    pub role: usize,
    pub n_agents: usize,
    pub actor: ParameterVector,
    pub critic: ParameterVector,
    pub frozen_single: Option<FrozenPair>,
    /// Composed only: the modifier also sees the goal.
    pub modifier_goal: bool,
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

impl PolicyHandle {
    pub fn new_single<R: Rng + ?Sized>(
        env_id: EnvId,
        role: usize,
        hidden: &[usize],
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let input = OWN_OBS_DIM + GOAL_DIM;
        let actor = ParameterVector::init(MlpSpec::new(input, hidden.to_vec(), ACTION_DIM)?, true, final_scale, rng);
        let critic = ParameterVector::init(MlpSpec::new(input, hidden.to_vec(), 1)?, false, 1.0, rng);
        Ok(PolicyHandle {
            kind: PolicyKind::SingleAgent,
            env_id,
            role,
            n_agents: 1,
            actor,
            critic,
            frozen_single: None,
            modifier_goal: false,
        })
    }

    /// Freezes `single` and attaches a fresh modifier. The modifier's log-std
    /// starts from the single-agent value. With `final_scale == 0` the composed
    /// policy initially equals the single-agent policy exactly.
    pub fn new_composed<R: Rng + ?Sized>(
        single: &PolicyHandle,
        n_agents: usize,
        modifier_goal: bool,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if single.kind != PolicyKind::SingleAgent {
            return Err(Error::Contract("a composed policy must wrap a single-agent policy".into()));
        }
        if n_agents < 2 {
            return Err(Error::Contract("a composed policy needs at least one other agent".into()));
        }
        let hidden = single.actor.spec.hidden_dims.clone();
        let input = OWN_OBS_DIM + OTHER_OBS_DIM * (n_agents - 1) + if modifier_goal { GOAL_DIM } else { 0 };
        let mut actor = ParameterVector::init(MlpSpec::new(input, hidden.clone(), ACTION_DIM)?, true, final_scale, rng);
        actor.log_std = single.actor.log_std.clone();
        let critic = ParameterVector::init(MlpSpec::new(input, hidden, 1)?, false, final_scale, rng);
        Ok(PolicyHandle {
            kind: PolicyKind::Composed,
            env_id: single.env_id,
            role: single.role,
            n_agents,
            actor,
            critic,
            frozen_single: Some(FrozenPair {
                actor: single.actor.clone(),
                critic: single.critic.clone(),
            }),
            modifier_goal,
        })
    }

    pub fn new_matrpo<R: Rng + ?Sized>(
        env_id: EnvId,
        role: usize,
        n_agents: usize,
        hidden: &[usize],
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_agents < 2 {
            return Err(Error::Contract("the centralized-critic baseline needs other agents".into()));
        }
        let actor_in = OWN_OBS_DIM + GOAL_DIM + OTHER_OBS_DIM * (n_agents - 1);
        let critic_in = actor_in + ACTION_DIM * (n_agents - 1);
        let actor = ParameterVector::init(MlpSpec::new(actor_in, hidden.to_vec(), ACTION_DIM)?, true, final_scale, rng);
        let critic = ParameterVector::init(MlpSpec::new(critic_in, hidden.to_vec(), 1)?, false, 1.0, rng);
        Ok(PolicyHandle {
            kind: PolicyKind::Matrpo,
            env_id,
            role,
            n_agents,
            actor,
            critic,
            frozen_single: None,
            modifier_goal: false,
        })
    }

    pub fn log_std(&self) -> &[f64] {
        self.actor.log_std.as_deref().unwrap_or(&[])
    }

    fn frozen(&self) -> Result<&FrozenPair> {
        self.frozen_single
            .as_ref()
            .ok_or_else(|| Error::Contract("composed policy without frozen single-agent networks".into()))
    }

    fn others_or_err<'a>(&self, others: Option<&'a [f64]>) -> Result<&'a [f64]> {
        let want = OTHER_OBS_DIM * (self.n_agents - 1);
        let o = others.ok_or_else(|| Error::Contract(format!("{} policy needs other-agent observations", self.kind.tag())))?;
        if o.len() != want {
            return Err(Error::dim("other-agent observations", want, o.len()));
        }
        Ok(o)
    }

    /// Input of the trainable actor network.
    pub fn actor_input(&self, own: &[f64], goal: &[f64], others: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(match self.kind {
            PolicyKind::SingleAgent => concat(&[own, goal]),
            PolicyKind::Composed => {
                let o = self.others_or_err(others)?;
                if self.modifier_goal {
                    concat(&[own, o, goal])
                } else {
                    concat(&[own, o])
                }
            }
            PolicyKind::Matrpo => concat(&[own, goal, self.others_or_err(others)?]),
        })
    }

    /// Input of the trainable critic network.
    pub fn critic_input(
        &self,
        own: &[f64],
        goal: &[f64],
        others: Option<&[f64]>,
        other_actions: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        match self.kind {
            PolicyKind::Matrpo => {
                let want = ACTION_DIM * (self.n_agents - 1);
                let a = other_actions
                    .ok_or_else(|| Error::Contract("centralized critic needs the other agents' actions".into()))?;
                if a.len() != want {
                    return Err(Error::dim("other-agent actions", want, a.len()));
                }
                Ok(concat(&[own, goal, self.others_or_err(others)?, a]))
            }
            _ => self.actor_input(own, goal, others),
        }
    }

    /// Single-agent policy: mean is the actor on `(own, goal)`.
    pub fn act_single(&self, own: &[f64], goal: &[f64]) -> Result<GaussianAction> {
        if self.kind != PolicyKind::SingleAgent {
            return Err(Error::Contract(format!("act_single on a {} policy", self.kind.tag())));
        }
        GaussianAction::new(self.actor.forward(&concat(&[own, goal]))?, self.log_std().to_vec())
    }

    /// Composed policy: frozen single-agent mean plus modifier mean.
    pub fn act_composed(&self, own: &[f64], goal: &[f64], others: Option<&[f64]>) -> Result<GaussianAction> {
        if self.kind != PolicyKind::Composed {
            return Err(Error::Contract(format!("act_composed on a {} policy", self.kind.tag())));
        }
        let frozen = self.frozen()?;
        let base = frozen.actor.forward(&concat(&[own, goal]))?;
        let modifier = self.actor.forward(&self.actor_input(own, goal, others)?)?;
        let mean = base.iter().zip(&modifier).map(|(a, b)| a + b).collect();
        GaussianAction::new(mean, self.log_std().to_vec())
    }

    pub fn act_matrpo(&self, own: &[f64], goal: &[f64], others: Option<&[f64]>) -> Result<GaussianAction> {
        if self.kind != PolicyKind::Matrpo {
            return Err(Error::Contract(format!("act_matrpo on a {} policy", self.kind.tag())));
        }
        GaussianAction::new(self.actor.forward(&self.actor_input(own, goal, others)?)?, self.log_std().to_vec())
    }

    pub fn value_matrpo(&self, own: &[f64], goal: &[f64], others: Option<&[f64]>, other_actions: Option<&[f64]>) -> Result<f64> {
        if self.kind != PolicyKind::Matrpo {
            return Err(Error::Contract(format!("value_matrpo on a {} policy", self.kind.tag())));
        }
        Ok(self.critic.forward(&self.critic_input(own, goal, others, other_actions)?)?[0])
    }

    /// Action distribution for whatever kind this handle is. Single-agent
    /// policies ignore the other agents.
    pub fn act(&self, own: &[f64], goal: &[f64], others: Option<&[f64]>) -> Result<GaussianAction> {
        match self.kind {
            PolicyKind::SingleAgent => self.act_single(own, goal),
            PolicyKind::Composed => self.act_composed(own, goal, others),
            PolicyKind::Matrpo => self.act_matrpo(own, goal, others),
        }
    }

    pub fn value(&self, own: &[f64], goal: &[f64], others: Option<&[f64]>, other_actions: Option<&[f64]>) -> Result<f64> {
        match self.kind {
            PolicyKind::SingleAgent => Ok(self.critic.forward(&concat(&[own, goal]))?[0]),
            PolicyKind::Composed => {
                let frozen = self.frozen()?;
                let base = frozen.critic.forward(&concat(&[own, goal]))?[0];
                Ok(base + self.critic.forward(&self.actor_input(own, goal, others)?)?[0])
            }
            PolicyKind::Matrpo => self.value_matrpo(own, goal, others, other_actions),
        }
    }

    /// Dense optimizer view of the actor side of `batch`.
    pub fn actor_data(&self, batch: &Batch) -> Result<ActorData> {
        let n = batch.len();
        let mut inputs = Vec::with_capacity(n * self.actor.spec.input_dim);
        let mut actions = Vec::with_capacity(n * ACTION_DIM);
        for t in &batch.transitions {
            inputs.extend(self.actor_input(&t.observation, &t.goal, t.other_obs.as_deref())?);
            actions.extend_from_slice(&t.action);
        }
        let mean_offset = match self.kind {
            PolicyKind::Composed => {
                let frozen = self.frozen()?;
                let base: Vec<f64> = batch.transitions.iter().flat_map(|t| concat(&[&t.observation, &t.goal])).collect();
                Some(forward_batch(&frozen.actor.spec, &frozen.actor.values, &base, n).output().to_vec())
            }
            _ => None,
        };
        Ok(ActorData {
            n,
            inputs,
            mean_offset,
            actions,
            old_log_probs: batch.transitions.iter().map(|t| t.log_prob).collect(),
            advantages: batch.advantages.clone(),
        })
    }

    /// Dense optimizer view of the critic side of `batch`.
    pub fn critic_data(&self, batch: &Batch) -> Result<CriticData> {
        let n = batch.len();
        let mut inputs = Vec::with_capacity(n * self.critic.spec.input_dim);
        for t in &batch.transitions {
            inputs.extend(self.critic_input(&t.observation, &t.goal, t.other_obs.as_deref(), t.other_actions.as_deref())?);
        }
        let value_offset = match self.kind {
            PolicyKind::Composed => {
                let frozen = self.frozen()?;
                let base: Vec<f64> = batch.transitions.iter().flat_map(|t| concat(&[&t.observation, &t.goal])).collect();
                Some(forward_batch(&frozen.critic.spec, &frozen.critic.values, &base, n).output().to_vec())
            }
            _ => None,
        };
        Ok(CriticData {
            n,
            inputs,
            value_offset,
            targets: batch.returns.clone(),
        })
    }

    /// SHA-256 over the frozen networks' bit patterns, if any.
    pub fn frozen_fingerprint(&self) -> Option<String> {
        self.frozen_single.as_ref().map(|f| {
            let mut h = Sha256::new();
            for p in [&f.actor, &f.critic] {
                for v in p.flatten() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            hex(&h.finalize())
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// Only the policy's own agent is instantiated; single-agent reward.
    Single,
    /// All agents present; conflict-penalized reward.
    Multi,
}

#[derive(Debug, Clone)]
pub struct RolloutSettings<'a> {
    pub env_id: EnvId,
    pub env: &'a EnvConfig,
    pub mode: RolloutMode,
    /// Execute the policy mean instead of sampling.
    pub deterministic: bool,
    /// Keep per-step records in the traces (for episode logs).
    pub record_steps: bool,
}

/// Result of one episode: per-agent transitions and the trace.
#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Vec<Transition>>,
    pub trace: EpisodeTrace,
}

/// Draws the initial world of an episode for the given mode and policies.
pub fn initial_world<R: Rng + ?Sized>(settings: &RolloutSettings<'_>, policies: &[PolicyHandle], rng: &mut R) -> Result<WorldState> {
    let world = sample_initial(settings.env_id, settings.env, rng);
    match settings.mode {
        RolloutMode::Single => {
            if policies.len() != 1 {
                return Err(Error::Contract(format!("single mode needs exactly one policy, got {}", policies.len())));
            }
            world.single(policies[0].role)
        }
        RolloutMode::Multi => {
            if policies.len() != world.n_agents() {
                return Err(Error::dim("policies per agent", world.n_agents(), policies.len()));
            }
            Ok(world)
        }
    }
}

/// Runs one episode from `world` until every agent is done.
pub fn run_episode<R: Rng + ?Sized>(
    settings: &RolloutSettings<'_>,
    policies: &[PolicyHandle],
    mut world: WorldState,
    seed: u64,
    rng: &mut R,
) -> Result<Episode> {
    let n = world.n_agents();
    if policies.len() != n {
        return Err(Error::dim("policies per agent", n, policies.len()));
    }
    for (i, p) in policies.iter().enumerate() {
        if p.role != world.roles[i] {
            return Err(Error::Contract(format!("policy for role {} placed on agent with role {}", p.role, world.roles[i])));
        }
        if p.kind != PolicyKind::SingleAgent && p.n_agents != n {
            return Err(Error::dim("policy agent count", n, p.n_agents));
        }
    }
    let horizon = settings.env.horizon;
    let reward_mode = match settings.mode {
        RolloutMode::Single => RewardMode::Single,
        RolloutMode::Multi => RewardMode::Multi,
    };
    let mut transitions: Vec<Vec<Transition>> = vec![Vec::new(); n];
    let mut trace = EpisodeTrace::new(seed, &world);
    let mut obs: Vec<Option<Observation>> = vec![None; n];
    let mut actions = vec![[0.0; 2]; n];
    let mut dists: Vec<Option<(GaussianAction, Vec<f64>)>> = vec![None; n];
    while !world.all_done(horizon) {
        for i in 0..n {
            obs[i] = None;
            dists[i] = None;
            actions[i] = [0.0; 2];
            if world.agent_done(i, horizon) {
                continue;
            }
            let o = observe(&world, i, settings.env, rng)?;
            let others = (n > 1).then(|| o.others_flat());
            let g = policies[i].act(&o.own, &o.goal, others.as_deref())?;
            let a = if settings.deterministic { g.mean.clone() } else { g.sample(rng) };
            actions[i] = [a[0], a[1]];
            dists[i] = Some((g, a));
            obs[i] = Some(o);
        }
        let out = env_step(&mut world, &actions, reward_mode, settings.env, rng)?;
        for i in 0..n {
            let (Some(o), Some((g, a))) = (obs[i].take(), dists[i].take()) else {
                continue;
            };
            let others = (n > 1).then(|| o.others_flat());
            let other_actions: Option<Vec<f64>> =
                (n > 1).then(|| (0..n).filter(|&j| j != i).flat_map(|j| actions[j]).collect());
            let value = policies[i].value(&o.own, &o.goal, others.as_deref(), other_actions.as_deref())?;
            let log_prob = gaussian_log_prob(&g, &a)?;
            transitions[i].push(Transition {
                observation: o.own.to_vec(),
                goal: o.goal.to_vec(),
                other_obs: others,
                other_actions: if policies[i].kind == PolicyKind::Matrpo { other_actions } else { None },
                action: a,
                log_prob,
                reward: out.rewards[i],
                value_estimate: value,
                done: out.dones[i],
            });
        }
        trace.record(&world, &out, &actions, settings.record_steps);
    }
    trace.finish(&world);
    Ok(Episode { transitions, trace })
}

/// Per-episode seeds are drawn from `rng`, so a given master stream always
/// produces the same episodes regardless of how they are scheduled.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    /// agent -> episode -> transitions
    pub transitions: Vec<Vec<Vec<Transition>>>,
    pub traces: Vec<EpisodeTrace>,
    pub steps: usize,
}

/// Collects whole episodes until at least `n_timesteps` world steps were taken.
pub fn rollout<R: Rng + ?Sized>(
    settings: &RolloutSettings<'_>,
    policies: &[PolicyHandle],
    n_timesteps: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let mut out = Rollout {
        transitions: vec![Vec::new(); policies.len()],
        ..Rollout::default()
    };
    while out.steps < n_timesteps.max(1) {
        let seed: u64 = rng.gen();
        let ep = episode_from_seed(settings, policies, seed)?;
        out.steps += ep.trace.length;
        for (i, t) in ep.transitions.into_iter().enumerate() {
            out.transitions[i].push(t);
        }
        out.traces.push(ep.trace);
    }
    Ok(out)
}

/// Runs the episode fully determined by `seed`.
pub fn episode_from_seed(settings: &RolloutSettings<'_>, policies: &[PolicyHandle], seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = initial_world(settings, policies, &mut rng)?;
    run_episode(settings, policies, world, seed, &mut rng)
}

/// Runs `n_episodes` deterministic-action episodes with seeds drawn from `seed`.
pub fn evaluate_episodes(settings: &RolloutSettings<'_>, policies: &[PolicyHandle], n_episodes: usize, seed: u64) -> Result<Vec<EpisodeTrace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_episodes)
        .map(|_| {
            let s: u64 = rng.gen();
            episode_from_seed(settings, policies, s).map(|e| e.trace)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub env_id: EnvId,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    /// Baseline iterations; defaults to the stage-2 schedule.
    pub matrpo_iterations: usize,
    pub probe_episodes: usize,
    pub early_stop_success: f64,
    pub early_stop_window: usize,
    /// Probe success an agent must exceed (and keep) to count as converged.
    pub converge_threshold: f64,
    pub policy_final_scale: f64,
    pub modifier_final_scale: f64,
    pub modifier_goal: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            env_id: EnvId::C2Fixed,
            seed: 0,
            hidden: MlpSpec::DEFAULT_HIDDEN.to_vec(),
            stage1_iterations: 500,
            stage2_iterations: 1000,
            matrpo_iterations: 1000,
            probe_episodes: 100,
            early_stop_success: 0.98,
            early_stop_window: 20,
            converge_threshold: 0.9,
            policy_final_scale: 0.01,
            modifier_final_scale: 0.01,
            modifier_goal: false,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("curriculum.{key}"),
                msg: msg.to_string(),
            })
        };
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "need at least one hidden layer, all widths >= 1");
        }
        if self.probe_episodes == 0 {
            return bad("probe_episodes", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.early_stop_success) {
            return bad("early_stop_success", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.converge_threshold) {
            return bad("converge_threshold", "must lie in [0, 1]");
        }
        if !(self.policy_final_scale >= 0.0) {
            return bad("policy_final_scale", "must be >= 0");
        }
        if !(self.modifier_final_scale >= 0.0) {
            return bad("modifier_final_scale", "must be >= 0");
        }
        Ok(())
    }
}

/// One row of the per-iteration training metrics (one per agent).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: String,
    pub iteration: usize,
    pub agent: usize,
    pub mean_episode_length: f64,
    /// Joint probe success (all agents reached).
    pub success_probe: f64,
    /// Probe share of episodes in which this agent reached its goal.
    pub agent_success_probe: f64,
    pub kl: f64,
    pub improvement: f64,
    pub value_mse: f64,
    pub accepted: bool,
    pub backtracks: usize,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub handles: Vec<PolicyHandle>,
    pub metrics: Vec<MetricsRow>,
    /// Per agent: first iteration after which its probe success stayed above
    /// the convergence threshold until the end of the run.
    pub convergence: Vec<Option<usize>>,
    pub iterations: usize,
}

/// Stage-specific seed stream derived from the master seed.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn convergence_iteration(rows: &[MetricsRow], agent: usize, threshold: f64) -> Option<usize> {
    let series: Vec<&MetricsRow> = rows.iter().filter(|r| r.agent == agent).collect();
    let mut first = None;
    for r in &series {
        if r.agent_success_probe > threshold {
            first.get_or_insert(r.iteration);
        } else {
            first = None;
        }
    }
    first
}

struct Schedule<'a> {
    stage: &'a str,
    settings: RolloutSettings<'a>,
    trpo: &'a TrpoConfig,
    curriculum: &'a CurriculumConfig,
    iterations: usize,
    seed: u64,
}

/// Decentralized simultaneous TRPO on `handles`.
fn run_schedule(
    sched: &Schedule<'_>,
    mut handles: Vec<PolicyHandle>,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0x5eed_0f_9e0be);
    let fingerprints: Vec<Option<String>> = handles.iter().map(PolicyHandle::frozen_fingerprint).collect();
    let n = handles.len();
    let mut metrics = Vec::new();
    let mut streak = 0;
    let mut done_iters = 0;
    let probe_settings = RolloutSettings {
        deterministic: true,
        record_steps: false,
        ..sched.settings.clone()
    };
    for it in 0..sched.iterations {
        let roll = rollout(&sched.settings, &handles, sched.trpo.batch_timesteps, &mut rng)?;
        let mut reports: Vec<(StepReport, f64, f64)> = Vec::with_capacity(n);
        for (i, episodes) in roll.transitions.into_iter().enumerate() {
            let lens: Vec<usize> = episodes.iter().map(Vec::len).collect();
            let mean_len = lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64;
            let boots = vec![0.0; episodes.len()];
            let batch = Batch::from_episodes(i, episodes, &boots, sched.trpo.gamma, sched.trpo.lam)?;
            if batch.agent != i {
                return Err(Error::Contract("batch provenance does not match the agent being updated".into()));
            }
            let actor_data = handles[i].actor_data(&batch)?;
            let critic_data = handles[i].critic_data(&batch)?;
            let (actor, report) = trpo_step(&handles[i].actor, &actor_data, sched.trpo)?;
            let (critic, mse) = fit_value(&handles[i].critic, &critic_data, sched.trpo, &mut rng)?;
            handles[i].actor = actor;
            handles[i].critic = critic;
            reports.push((report, mse, mean_len));
        }
        for (i, h) in handles.iter().enumerate() {
            if h.frozen_fingerprint() != fingerprints[i] {
                return Err(Error::Contract(format!("frozen networks of agent {i} changed during training")));
            }
        }
        let probe_seed: u64 = probe_rng.gen();
        let traces = evaluate_episodes(&probe_settings, &handles, sched.curriculum.probe_episodes, probe_seed)?;
        let joint = traces.iter().filter(|t| t.success()).count() as f64 / traces.len() as f64;
        for (i, (report, mse, mean_len)) in reports.into_iter().enumerate() {
            let agent_success = traces.iter().filter(|t| t.outcomes[i] == Outcome::Reached).count() as f64 / traces.len() as f64;
            let row = MetricsRow {
                stage: sched.stage.to_string(),
                iteration: it,
                agent: handles[i].role,
                mean_episode_length: mean_len,
                success_probe: joint,
                agent_success_probe: agent_success,
                kl: report.kl,
                improvement: report.improvement,
                value_mse: mse,
                accepted: report.accepted,
                backtracks: report.backtracks,
                entropy: report.entropy,
            };
            observer(&row);
            metrics.push(row);
        }
        done_iters = it + 1;
        streak = if joint >= sched.curriculum.early_stop_success { streak + 1 } else { 0 };
        if sched.curriculum.early_stop_window > 0 && streak >= sched.curriculum.early_stop_window {
            break;
        }
    }
    let convergence = handles
        .iter()
        .map(|h| convergence_iteration(&metrics, h.role, sched.curriculum.converge_threshold))
        .collect();
    Ok(TrainOutput {
        handles,
        metrics,
        convergence,
        iterations: done_iters,
    })
}

/// Stage 1: trains one goal-conditioned single-agent policy per role, each
/// alone in its environment.
pub fn train_single(
    env: &EnvConfig,
    trpo: &TrpoConfig,
    cur: &CurriculumConfig,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<Vec<TrainOutput>> {
    env.validate()?;
    trpo.validate()?;
    cur.validate()?;
    (0..cur.env_id.n_agents())
        .map(|role| {
            let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cur.seed, "stage1-init", role as u64));
            let handle = PolicyHandle::new_single(cur.env_id, role, &cur.hidden, cur.policy_final_scale, &mut init_rng)?;
            let sched = Schedule {
                stage: "single",
                settings: RolloutSettings {
                    env_id: cur.env_id,
                    env,
                    mode: RolloutMode::Single,
                    deterministic: false,
                    record_steps: false,
                },
                trpo,
                curriculum: cur,
                iterations: cur.stage1_iterations,
                seed: derive_seed(cur.seed, "stage1", role as u64),
            };
            run_schedule(&sched, vec![handle], observer)
        })
        .collect()
}

/// Stage 2: freezes the stage-1 policies and trains a modifier per agent in
/// the multi-agent environment.
pub fn train_iatrpo(
    env: &EnvConfig,
    trpo: &TrpoConfig,
    cur: &CurriculumConfig,
    singles: &[PolicyHandle],
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    env.validate()?;
    trpo.validate()?;
    cur.validate()?;
    let n = cur.env_id.n_agents();
    if singles.len() != n {
        return Err(Error::dim("stage-1 checkpoints", n, singles.len()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cur.seed, "stage2-init", 0));
    let handles = singles
        .iter()
        .enumerate()
        .map(|(role, s)| {
            if s.kind != PolicyKind::SingleAgent || s.role != role || s.env_id != cur.env_id {
                return Err(Error::Contract(format!(
                    "stage-1 checkpoint {role} is a {} policy for role {} on {}",
                    s.kind.tag(),
                    s.role,
                    s.env_id
                )));
            }
            PolicyHandle::new_composed(s, n, cur.modifier_goal, cur.modifier_final_scale, &mut init_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let sched = Schedule {
        stage: "iatrpo",
        settings: RolloutSettings {
            env_id: cur.env_id,
            env,
            mode: RolloutMode::Multi,
            deterministic: false,
            record_steps: false,
        },
        trpo,
        curriculum: cur,
        iterations: cur.stage2_iterations,
        seed: derive_seed(cur.seed, "stage2", 0),
    };
    run_schedule(&sched, handles, observer)
}

/// Centralized-critic baseline trained from scratch in the multi-agent
/// environment.
pub fn train_matrpo(
    env: &EnvConfig,
    trpo: &TrpoConfig,
    cur: &CurriculumConfig,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    env.validate()?;
    trpo.validate()?;
    cur.validate()?;
    let n = cur.env_id.n_agents();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cur.seed, "matrpo-init", 0));
    let handles = (0..n)
        .map(|role| PolicyHandle::new_matrpo(cur.env_id, role, n, &cur.hidden, cur.policy_final_scale, &mut init_rng))
        .collect::<Result<Vec<_>>>()?;
    let sched = Schedule {
        stage: "matrpo",
        settings: RolloutSettings {
            env_id: cur.env_id,
            env,
            mode: RolloutMode::Multi,
            deterministic: false,
            record_steps: false,
        },
        trpo,
        curriculum: cur,
        iterations: cur.matrpo_iterations,
        seed: derive_seed(cur.seed, "matrpo", 0),
    };
    run_schedule(&sched, handles, observer)
}

/// Builds the per-step record used by [`EpisodeTrace::record`].
pub(crate) fn step_record(world: &WorldState, actions: &[[f64; 2]], rewards: &[f64]) -> StepRecord {
    StepRecord {
        t: world.t,
        agents: world.agents.clone(),
        actions: actions.to_vec(),
        rewards: rewards.to_vec(),
    }
}
