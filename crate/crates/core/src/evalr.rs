//! Evaluation protocols: success rate, first-arrival interactiveness,
//! discrete Fréchet compromise between single-agent and multi-agent
//! trajectories, and mixed pairings of agents trained under different seeds.
//!
//! Percentages are reported as mean and population standard deviation over
//! seed groups.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{AgentState, EnvConfig, EnvId, StepOutcome, WorldState};
use crate::error::{Error, Result};
use crate::trainer::{
    derive_seed, evaluate_episodes, initial_world, run_episode, step_record, PolicyHandle, PolicyKind, RolloutMode,
    RolloutSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Reached,
    Broken,
    Timeout,
}

/// Who reached their goal first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrival {
    Agent(usize),
    /// Several agents arrived on the same earliest step; counted for nobody.
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub agents: Vec<AgentState>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub env_id: EnvId,
    pub roles: Vec<usize>,
    pub goals: Vec<[f64; 2]>,
    pub initial: Vec<AgentState>,
    /// Per agent, its position after every step it acted in.
    pub positions: Vec<Vec<[f64; 2]>>,
    pub outcomes: Vec<Outcome>,
    pub arrival_steps: Vec<Option<usize>>,
    /// `Some` iff at least one agent reached its goal.
    pub first_arrival: Option<Arrival>,
    /// World steps taken.
    pub length: usize,
    /// Full per-step records, only when requested.
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn new(seed: u64, world: &WorldState) -> Self {
        let n = world.n_agents();
        EpisodeTrace {
            seed,
            env_id: world.env_id,
            roles: world.roles.clone(),
            goals: world.goals.clone(),
            initial: world.agents.clone(),
            positions: vec![Vec::new(); n],
            outcomes: vec![Outcome::Timeout; n],
            arrival_steps: vec![None; n],
            first_arrival: None,
            length: 0,
            steps: Vec::new(),
        }
    }

    pub fn record(&mut self, world: &WorldState, out: &StepOutcome, actions: &[[f64; 2]], keep_step: bool) {
        for (i, a) in world.agents.iter().enumerate() {
            if !out.active[i] {
                continue;
            }
            self.positions[i].push(a.position());
            if a.reached && self.arrival_steps[i].is_none() {
                self.arrival_steps[i] = Some(world.t);
            }
        }
        self.length = world.t;
        if keep_step {
            self.steps.push(step_record(world, actions, &out.rewards));
        }
    }

    pub fn finish(&mut self, world: &WorldState) {
        self.outcomes = world
            .agents
            .iter()
            .map(|a| {
                if a.reached {
                    Outcome::Reached
                } else if a.broken {
                    Outcome::Broken
                } else {
                    Outcome::Timeout
                }
            })
            .collect();
        let first = self.arrival_steps.iter().flatten().min().copied();
        self.first_arrival = first.map(|step| {
            let who: Vec<usize> = (0..self.arrival_steps.len()).filter(|&i| self.arrival_steps[i] == Some(step)).collect();
            if who.len() == 1 {
                Arrival::Agent(who[0])
            } else {
                Arrival::Tie
            }
        });
    }

    /// Every agent reached its goal.
    pub fn success(&self) -> bool {
        self.outcomes.iter().all(|o| *o == Outcome::Reached)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Fraction of `n_episodes` mean-action episodes in which every agent reached
/// its goal. Deterministic in `(policies, seed, n_episodes)`.
pub fn success_rate(
    env: &EnvConfig,
    env_id: EnvId,
    mode: RolloutMode,
    policies: &[PolicyHandle],
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::Contract("success rate over zero episodes".into()));
    }
    for p in policies {
        if p.env_id != env_id {
            return Err(Error::Contract(format!("policy trained on {} evaluated on {env_id}", p.env_id)));
        }
    }
    let settings = RolloutSettings {
        env_id,
        env,
        mode,
        deterministic: true,
        record_steps: false,
    };
    let traces = evaluate_episodes(&settings, policies, n_episodes, seed)?;
    Ok(traces.iter().filter(|t| t.success()).count() as f64 / n_episodes as f64)
}

/// Per agent, the share (%) of episodes in which it reached its goal strictly
/// first, as mean and std over the seed groups. Ties and episodes without any
/// arrival stay in the denominator but count for nobody, so shares of one
/// group sum to at most 100.
pub fn first_arrival_stats(groups: &[Vec<EpisodeTrace>]) -> Result<Vec<MeanStd>> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Contract("first-arrival statistics need at least one trace per seed group".into()));
    }
    let n_agents = groups[0][0].outcomes.len();
    let mut shares = vec![Vec::with_capacity(groups.len()); n_agents];
    for g in groups {
        let mut counts = vec![0usize; n_agents];
        for t in g {
            if t.outcomes.len() != n_agents {
                return Err(Error::dim("agents per trace", n_agents, t.outcomes.len()));
            }
            if let Some(Arrival::Agent(i)) = t.first_arrival {
                counts[i] += 1;
            }
        }
        for (i, c) in counts.into_iter().enumerate() {
            shares[i].push(100.0 * c as f64 / g.len() as f64);
        }
    }
    Ok(shares.iter().map(|s| MeanStd::of(s)).collect())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Discrete Fréchet distance by the `O(|p| |q|)` coupling recurrence
/// `F(i, j) = max(d(p_i, q_j), min(F(i-1, j), F(i, j-1), F(i-1, j-1)))`.
pub fn discrete_frechet(p: &[[f64; 2]], q: &[[f64; 2]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Contract("Fréchet distance of an empty curve".into()));
    }
    let m = q.len();
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    for (i, &pi) in p.iter().enumerate() {
        for j in 0..m {
            let d = dist(pi, q[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => d.max(cur[j - 1]),
                (_, 0) => d.max(prev[0]),
                _ => d.max(prev[j].min(cur[j - 1]).min(prev[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompromiseReport {
    /// Mean Fréchet distance between each agent's single-agent and
    /// multi-agent trajectory.
    pub mean_frechet: Vec<f64>,
    /// Each agent's share of the summed mean distances (%).
    pub compromise_percent: Vec<f64>,
    /// All distances were zero; percentages are a uniform split.
    pub degenerate: bool,
    /// Multi-agent episodes and their single-agent replays, per episode.
    pub multi_traces: Vec<EpisodeTrace>,
    pub single_traces: Vec<Vec<EpisodeTrace>>,
}

/// The frozen stage-1 policy inside a composed handle, as a standalone handle.
pub fn frozen_as_single(h: &PolicyHandle) -> Result<PolicyHandle> {
    let f = h
        .frozen_single
        .as_ref()
        .ok_or_else(|| Error::Contract("handle has no frozen single-agent policy".into()))?;
    Ok(PolicyHandle {
        kind: PolicyKind::SingleAgent,
        env_id: h.env_id,
        role: h.role,
        n_agents: 1,
        actor: f.actor.clone(),
        critic: f.critic.clone(),
        frozen_single: None,
        modifier_goal: false,
    })
}

/// For each episode, rolls the composed policies jointly and each agent's
/// single-agent policy alone from the same initial state, then measures how
/// far every agent deviated from its single-agent behaviour.
pub fn compromise_analysis(
    env: &EnvConfig,
    singles: &[PolicyHandle],
    composed: &[PolicyHandle],
    n_episodes: usize,
    seed: u64,
) -> Result<CompromiseReport> {
    if singles.len() != composed.len() || composed.is_empty() {
        return Err(Error::dim("single/composed policies", composed.len(), singles.len()));
    }
    for (s, c) in singles.iter().zip(composed) {
        if s.kind != PolicyKind::SingleAgent || s.role != c.role || s.env_id != c.env_id {
            return Err(Error::Contract(format!("single policy for role {} does not match composed role {}", s.role, c.role)));
        }
        if let Some(f) = &c.frozen_single {
            if f.actor != s.actor {
                return Err(Error::Contract(format!("role {}: composed policy does not wrap this single-agent policy", s.role)));
            }
        }
    }
    let env_id = composed[0].env_id;
    let multi = RolloutSettings {
        env_id,
        env,
        mode: RolloutMode::Multi,
        deterministic: true,
        record_steps: false,
    };
    let single = RolloutSettings {
        mode: RolloutMode::Single,
        ..multi.clone()
    };
    let n = composed.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0; n];
    let mut multi_traces = Vec::with_capacity(n_episodes);
    let mut single_traces = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep_seed: u64 = rng.gen();
        let mut ep_rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let world = initial_world(&multi, composed, &mut ep_rng)?;
        let joint = run_episode(&multi, composed, world.clone(), ep_seed, &mut ep_rng)?;
        let mut singles_here = Vec::with_capacity(n);
        for (i, s) in singles.iter().enumerate() {
            let mut s_rng = ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, "single-replay", i as u64));
            let alone = world.clone().single(s.role)?;
            let ep = run_episode(&single, std::slice::from_ref(s), alone, ep_seed, &mut s_rng)?;
            sums[i] += discrete_frechet(&ep.trace.positions[0], &joint.trace.positions[i])?;
            singles_here.push(ep.trace);
        }
        multi_traces.push(joint.trace);
        single_traces.push(singles_here);
    }
    let mean_frechet: Vec<f64> = sums.iter().map(|s| s / n_episodes.max(1) as f64).collect();
    let total: f64 = mean_frechet.iter().sum();
    let degenerate = !(total > 0.0);
    let compromise_percent = if degenerate {
        vec![100.0 / n as f64; n]
    } else {
        mean_frechet.iter().map(|m| 100.0 * m / total).collect()
    };
    Ok(CompromiseReport {
        mean_frechet,
        compromise_percent,
        degenerate,
        multi_traces,
        single_traces,
    })
}

/// One team assembled from agents of different training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    /// Seed index used for each role.
    pub seeds: Vec<usize>,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub pairings: Vec<Pairing>,
    /// Success of each seed's own team.
    pub same_seed: Vec<f64>,
    /// Percent.
    pub mixed: MeanStd,
    pub same: MeanStd,
}

/// Role-to-seed assignments with no seed used twice. For two roles all ordered
/// pairs are taken in lexicographic order; for more roles the injective
/// assignments are shuffled with `seed`. At most `n_pairs` are returned.
pub fn pairing_assignments(n_seeds: usize, n_roles: usize, n_pairs: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_seeds < n_roles || n_seeds < 2 {
        return Err(Error::Contract(format!("{n_seeds} seeds cannot fill {n_roles} roles without repeats")));
    }
    let mut all = Vec::new();
    let mut cur = Vec::with_capacity(n_roles);
    fn rec(n_seeds: usize, n_roles: usize, cur: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        if cur.len() == n_roles {
            all.push(cur.clone());
            return;
        }
        for s in 0..n_seeds {
            if !cur.contains(&s) {
                cur.push(s);
                rec(n_seeds, n_roles, cur, all);
                cur.pop();
            }
        }
    }
    rec(n_seeds, n_roles, &mut cur, &mut all);
    if n_roles > 2 {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    all.truncate(n_pairs);
    Ok(all)
}

/// Evaluates teams mixed across training seeds. `by_seed[s][r]` is the policy
/// for role `r` trained under seed index `s`.
pub fn mixed_pairing_eval(
    env: &EnvConfig,
    by_seed: &[Vec<PolicyHandle>],
    n_pairs: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<PairingReport> {
    let first = by_seed.first().ok_or_else(|| Error::Contract("no checkpoints".into()))?;
    let env_id = first.first().ok_or_else(|| Error::Contract("empty team".into()))?.env_id;
    let n_roles = env_id.n_agents();
    for team in by_seed {
        if team.len() != n_roles {
            return Err(Error::dim("policies per seed", n_roles, team.len()));
        }
        for (r, p) in team.iter().enumerate() {
            if p.role != r || p.env_id != env_id {
                return Err(Error::Contract(format!("team slot {r} holds role {} on {}", p.role, p.env_id)));
            }
        }
    }
    let assignments = pairing_assignments(by_seed.len(), n_roles, n_pairs, seed)?;
    let eval_seed = derive_seed(seed, "mixed-eval", 0);
    let mut pairings = Vec::with_capacity(assignments.len());
    for seeds in assignments {
        let team: Vec<PolicyHandle> = seeds.iter().enumerate().map(|(r, &s)| by_seed[s][r].clone()).collect();
        let success = success_rate(env, env_id, RolloutMode::Multi, &team, n_episodes, eval_seed)?;
        pairings.push(Pairing { seeds, success });
    }
    let same_seed = by_seed
        .iter()
        .map(|team| success_rate(env, env_id, RolloutMode::Multi, team, n_episodes, eval_seed))
        .collect::<Result<Vec<_>>>()?;
    let pct = |xs: &[f64]| MeanStd::of(&xs.iter().map(|x| 100.0 * x).collect::<Vec<_>>());
    Ok(PairingReport {
        mixed: pct(&pairings.iter().map(|p| p.success).collect::<Vec<_>>()),
        same: pct(&same_seed),
        pairings,
        same_seed,
    })
}
