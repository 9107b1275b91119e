//! Lane-change (bicycle cars) and robot-navigation (unicycle robots)
//! multi-agent environments.
//!
//! Actions are normalized to `[-1, 1]` per component. Cars interpret them as
//! (acceleration, steering command scaled by `max_steer`), robots as
//! (acceleration, angular acceleration). Worlds are plain state machines
//! mutated by [`env_step`]; all randomness comes from the caller's RNG.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Success radius around a goal.
pub const GOAL_RADIUS: f64 = 0.4;
/// Length of an agent's own-state observation vector.
pub const OWN_OBS_DIM: usize = 7;
/// Length of one other-agent observation block: (x, y, v, heading, omega).
pub const OTHER_OBS_DIM: usize = 5;
pub const GOAL_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "C2-fixed", alias = "C2Fixed")]
    C2Fixed,
    C2,
    R2,
    R3,
}

impl EnvId {
    pub fn n_agents(self) -> usize {
        match self {
            EnvId::R3 => 3,
            _ => 2,
        }
    }

    pub fn kinematics(self) -> Kinematics {
        match self {
            EnvId::C2Fixed | EnvId::C2 => Kinematics::Bicycle,
            EnvId::R2 | EnvId::R3 => Kinematics::Unicycle,
        }
    }

    pub fn is_lane_change(self) -> bool {
        self.kinematics() == Kinematics::Bicycle
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvId::C2Fixed => "C2-fixed",
            EnvId::C2 => "C2",
            EnvId::R2 => "R2",
            EnvId::R3 => "R3",
        }
    }

    pub fn role_names(self) -> &'static [&'static str] {
        match self {
            EnvId::C2Fixed | EnvId::C2 => &["bottom", "top"],
            EnvId::R2 => &["left", "right"],
            EnvId::R3 => &["left", "right", "bottom"],
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C2-fixed" | "C2Fixed" | "c2-fixed" | "c2fixed" => Ok(EnvId::C2Fixed),
            "C2" | "c2" => Ok(EnvId::C2),
            "R2" | "r2" => Ok(EnvId::R2),
            "R3" | "r3" => Ok(EnvId::R3),
            other => Err(Error::Config {
                key: "env_id".into(),
                msg: format!("unknown environment `{other}` (expected C2-fixed, C2, R2 or R3)"),
            }),
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kinematics {
    Bicycle,
    Unicycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub omega: f64,
    pub heading: f64,
    pub broken: bool,
    pub reached: bool,
}

impl AgentState {
    pub fn at(x: f64, y: f64) -> Self {
        AgentState {
            x,
            y,
            v: 0.0,
            omega: 0.0,
            heading: 0.0,
            broken: false,
            reached: false,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0]) && (self.y_min..=self.y_max).contains(&p[1])
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max && other.x_min < self.x_max && self.y_min < other.y_max && other.y_min < self.y_max
    }
}

/// Lane-change course parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaneCourse {
    pub width: f64,
    pub height: f64,
    /// Lane center y-coordinates, lane 1 first (bottom).
    pub lane_centers: Vec<f64>,
    /// x-coordinate of every lane's goal point.
    pub goal_x: f64,
    /// C2-fixed start rows for the bottom and top car.
    pub fixed_start_y: [f64; 2],
    /// C2-fixed start x is `fixed_start_x + U[0, fixed_start_x_range]`.
    pub fixed_start_x: f64,
    pub fixed_start_x_range: f64,
}

impl Default for LaneCourse {
    fn default() -> Self {
        LaneCourse {
            width: 8.0,
            height: 4.0,
            lane_centers: vec![0.5, 1.5, 2.5, 3.5],
            goal_x: 7.5,
            fixed_start_y: [1.0, 3.0],
            fixed_start_x: 0.5,
            fixed_start_x_range: 1.5,
        }
    }
}

/// Robot-navigation course parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavCourse {
    pub width: f64,
    pub height: f64,
    pub left_goal: [f64; 2],
    pub right_goal: [f64; 2],
    pub top_goal: [f64; 2],
    pub left_region: Rect,
    pub right_region: Rect,
    pub bottom_region: Rect,
}

impl Default for NavCourse {
    fn default() -> Self {
        NavCourse {
            width: 8.0,
            height: 8.0,
            left_goal: [0.8, 4.0],
            right_goal: [7.2, 4.0],
            top_goal: [4.0, 7.2],
            left_region: Rect { x_min: 0.5, y_min: 2.5, x_max: 2.0, y_max: 5.5 },
            right_region: Rect { x_min: 6.0, y_min: 2.5, x_max: 7.5, y_max: 5.5 },
            bottom_region: Rect { x_min: 2.5, y_min: 0.5, x_max: 5.5, y_max: 2.0 },
        }
    }
}

/// Every environment parameter that can be set from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub horizon: usize,
    pub agent_radius: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub own_obs_noise: f64,
    pub other_obs_noise: f64,
    pub action_noise: f64,
    /// Sign of the `d / 1000` distance term of the reward.
    pub shaping_sign: f64,
    pub reward_scale: f64,
    /// Clearance kept between a spawn position and the edge of its start region.
    pub spawn_margin: f64,
    pub lane: LaneCourse,
    pub nav: NavCourse,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.1,
            horizon: 300,
            agent_radius: 0.2,
            wheelbase: 0.3,
            max_steer: 0.6,
            own_obs_noise: 0.01,
            other_obs_noise: 0.1,
            action_noise: 0.1,
            shaping_sign: -1.0,
            reward_scale: 3.0,
            spawn_margin: 0.3,
            lane: LaneCourse::default(),
            nav: NavCourse::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("env.{key}"),
                msg: msg.to_string(),
            })
        };
        for (key, v) in [
            ("dt", self.dt),
            ("agent_radius", self.agent_radius),
            ("wheelbase", self.wheelbase),
            ("max_steer", self.max_steer),
            ("reward_scale", self.reward_scale),
            ("lane.width", self.lane.width),
            ("lane.height", self.lane.height),
            ("nav.width", self.nav.width),
            ("nav.height", self.nav.height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be a positive finite number");
            }
        }
        if self.horizon == 0 {
            return bad("horizon", "must be >= 1");
        }
        for (key, v) in [
            ("own_obs_noise", self.own_obs_noise),
            ("other_obs_noise", self.other_obs_noise),
            ("action_noise", self.action_noise),
            ("spawn_margin", self.spawn_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be a non-negative finite number");
            }
        }
        if self.shaping_sign != 1.0 && self.shaping_sign != -1.0 {
            return bad("shaping_sign", "must be +1 or -1");
        }
        if self.lane.lane_centers.len() < 3 {
            return bad("lane.lane_centers", "need at least three lanes for non-adjacent goal pairs");
        }
        Ok(())
    }

    pub fn geometry(&self, env: EnvId) -> EnvGeometry {
        let (w, h, lanes) = if env.is_lane_change() {
            (self.lane.width, self.lane.height, self.lane.lane_centers.clone())
        } else {
            (self.nav.width, self.nav.height, Vec::new())
        };
        EnvGeometry {
            bounds: Rect { x_min: 0.0, y_min: 0.0, x_max: w, y_max: h },
            lane_centers: lanes,
            agent_radius: self.agent_radius,
            goal_radius: GOAL_RADIUS,
            dt: self.dt,
            horizon: self.horizon,
            wheelbase: self.wheelbase,
            max_steer: self.max_steer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvGeometry {
    pub bounds: Rect,
    pub lane_centers: Vec<f64>,
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub dt: f64,
    pub horizon: usize,
    pub wheelbase: f64,
    pub max_steer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub env_id: EnvId,
    pub agents: Vec<AgentState>,
    pub goals: Vec<[f64; 2]>,
    /// Role of each agent (index into `env_id.role_names()`).
    pub roles: Vec<usize>,
    pub t: usize,
}

impl WorldState {
    /// Keeps only the agent playing `role`; used for single-agent training.
    pub fn single(mut self, role: usize) -> Result<Self> {
        let idx = self
            .roles
            .iter()
            .position(|&r| r == role)
            .ok_or_else(|| Error::Contract(format!("role {role} not present in {}", self.env_id)))?;
        self.agents = vec![self.agents[idx]];
        self.goals = vec![self.goals[idx]];
        self.roles = vec![role];
        Ok(self)
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent_done(&self, i: usize, horizon: usize) -> bool {
        let a = &self.agents[i];
        a.broken || a.reached || self.t >= horizon
    }

    pub fn all_done(&self, horizon: usize) -> bool {
        (0..self.n_agents()).all(|i| self.agent_done(i, horizon))
    }

    pub fn all_reached(&self) -> bool {
        self.agents.iter().all(|a| a.reached)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Kinematic bicycle update. `action = (acceleration, steering angle in rad)`.
/// Position advances along `heading + slip` with the updated speed, then the
/// heading turns at the (clamped) yaw rate.
pub fn bicycle_step(s: &AgentState, action: [f64; 2], geom: &EnvGeometry) -> AgentState {
    let dt = geom.dt;
    let steer = action[1].clamp(-geom.max_steer, geom.max_steer);
    let v = (s.v + action[0] * dt).clamp(-1.0, 1.0);
    let slip = (0.5 * steer.tan()).atan();
    let omega = (v / geom.wheelbase * slip.sin()).clamp(-1.0, 1.0);
    AgentState {
        x: s.x + v * (s.heading + slip).cos() * dt,
        y: s.y + v * (s.heading + slip).sin() * dt,
        v,
        omega,
        heading: wrap_angle(s.heading + omega * dt),
        ..*s
    }
}

/// Unicycle update. `action = (acceleration, angular acceleration)`.
pub fn unicycle_step(s: &AgentState, action: [f64; 2], geom: &EnvGeometry) -> AgentState {
    let dt = geom.dt;
    let omega = (s.omega + action[1] * dt).clamp(-1.0, 1.0);
    let v = (s.v + action[0] * dt).clamp(-1.0, 1.0);
    let heading = wrap_angle(s.heading + omega * dt);
    AgentState {
        x: s.x + v * heading.cos() * dt,
        y: s.y + v * heading.sin() * dt,
        v,
        omega,
        heading,
        ..*s
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, r: &Rect, margin: f64) -> (f64, f64) {
    let lo_x = r.x_min + margin;
    let hi_x = (r.x_max - margin).max(lo_x);
    let lo_y = r.y_min + margin;
    let hi_y = (r.y_max - margin).max(lo_y);
    (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y))
}

/// Non-adjacent (lower, upper) lane index pairs.
pub fn lane_goal_pairs(n_lanes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..n_lanes {
        for j in i + 2..n_lanes {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Draws the initial world for `env`.
///
/// Lane change: agent 0 is the bottom car, agent 1 the top car; they swap
/// sides, so the bottom car targets the upper lane of the goal pair.
/// Navigation: agent 0 starts left (goal right), agent 1 right (goal left),
/// agent 2 bottom (goal top, R3 only).
pub fn sample_initial<R: Rng + ?Sized>(env: EnvId, cfg: &EnvConfig, rng: &mut R) -> WorldState {
    let m = cfg.spawn_margin;
    let (agents, goals) = match env {
        EnvId::C2Fixed => {
            let lane = &cfg.lane;
            let goal = |k: usize| [lane.goal_x, lane.lane_centers[k]];
            let x0 = lane.fixed_start_x + rng.gen_range(0.0..=lane.fixed_start_x_range);
            let x1 = lane.fixed_start_x + rng.gen_range(0.0..=lane.fixed_start_x_range);
            (
                vec![AgentState::at(x0, lane.fixed_start_y[0]), AgentState::at(x1, lane.fixed_start_y[1])],
                vec![goal(2), goal(0)],
            )
        }
        EnvId::C2 => {
            let lane = &cfg.lane;
            let pairs = lane_goal_pairs(lane.lane_centers.len());
            let (lo, hi) = pairs[rng.gen_range(0..pairs.len())];
            let (w, h) = (lane.width, lane.height);
            let bottom = Rect { x_min: 0.0, y_min: 0.0, x_max: w / 2.0, y_max: h / 2.0 };
            let top = Rect { x_min: 0.0, y_min: h / 2.0, x_max: w / 2.0, y_max: h };
            let (bx, by) = uniform_in(rng, &bottom, m);
            let (tx, ty) = uniform_in(rng, &top, m);
            (
                vec![AgentState::at(bx, by), AgentState::at(tx, ty)],
                vec![[lane.goal_x, lane.lane_centers[hi]], [lane.goal_x, lane.lane_centers[lo]]],
            )
        }
        EnvId::R2 | EnvId::R3 => {
            let nav = &cfg.nav;
            let mut regions = vec![(&nav.left_region, nav.right_goal), (&nav.right_region, nav.left_goal)];
            if env == EnvId::R3 {
                regions.push((&nav.bottom_region, nav.top_goal));
            }
            let mut agents = Vec::new();
            let mut goals = Vec::new();
            for (region, goal) in regions {
                let (x, y) = uniform_in(rng, region, 0.0);
                agents.push(AgentState::at(x, y));
                goals.push(goal);
            }
            (agents, goals)
        }
    };
    let roles = (0..agents.len()).collect();
    WorldState {
        env_id: env,
        agents,
        goals,
        roles,
        t: 0,
    }
}

/// What agent `i` perceives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// (x, y, v, omega, heading, broken, reached)
    pub own: [f64; OWN_OBS_DIM],
    pub goal: [f64; GOAL_DIM],
    /// One (x, y, v, heading, omega) block per other agent, by agent index.
    pub others: Vec<[f64; OTHER_OBS_DIM]>,
}

impl Observation {
    pub fn others_flat(&self) -> Vec<f64> {
        self.others.iter().flat_map(|o| o.iter().copied()).collect()
    }
}

fn noise<R: Rng + ?Sized>(rng: &mut R, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.gen_range(-amp..=amp)
    } else {
        0.0
    }
}

pub fn observe<R: Rng + ?Sized>(world: &WorldState, i: usize, cfg: &EnvConfig, rng: &mut R) -> Result<Observation> {
    let me = world
        .agents
        .get(i)
        .ok_or_else(|| Error::Contract(format!("agent index {i} out of range")))?;
    let a = cfg.own_obs_noise;
    let own = [
        me.x + noise(rng, a),
        me.y + noise(rng, a),
        me.v + noise(rng, a),
        me.omega + noise(rng, a),
        me.heading + noise(rng, a),
        f64::from(u8::from(me.broken)),
        f64::from(u8::from(me.reached)),
    ];
    let b = cfg.other_obs_noise;
    let others = world
        .agents
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, o)| {
            [
                o.x + noise(rng, b),
                o.y + noise(rng, b),
                o.v + noise(rng, b),
                o.heading + noise(rng, b),
                o.omega + noise(rng, b),
            ]
        })
        .collect();
    Ok(Observation {
        own,
        goal: world.goals[i],
        others,
    })
}

/// Single-agent reward: `-scale` on environment collision, `+scale` inside the
/// goal radius, otherwise `scale * shaping_sign * d / 1000`.
pub fn reward_single(s: &AgentState, goal: [f64; 2], env_collision: bool, scale: f64, shaping_sign: f64) -> f64 {
    if env_collision {
        return -scale;
    }
    let d = s.distance_to(goal);
    if d < GOAL_RADIUS {
        scale
    } else {
        scale * shaping_sign * d / 1000.0
    }
}

/// Multi-agent reward: the single-agent reward with an additional `-scale`
/// case for agent-agent collisions. Environment collisions take precedence.
pub fn reward_multi(
    s: &AgentState,
    goal: [f64; 2],
    env_collision: bool,
    agent_collision: bool,
    scale: f64,
    shaping_sign: f64,
) -> f64 {
    if !env_collision && agent_collision {
        return -scale;
    }
    reward_single(s, goal, env_collision, scale, shaping_sign)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionFlags {
    pub env: bool,
    pub agent: bool,
}

/// Per-agent collision flags. An agent hits the environment when its disc
/// crosses the course boundary; two agents collide when their centers are
/// strictly closer than two radii.
pub fn collision_check(world: &WorldState, geom: &EnvGeometry) -> Vec<CollisionFlags> {
    let r = geom.agent_radius;
    let b = &geom.bounds;
    let n = world.agents.len();
    let mut flags = vec![CollisionFlags::default(); n];
    for (i, a) in world.agents.iter().enumerate() {
        flags[i].env = a.x - r < b.x_min || a.x + r > b.x_max || a.y - r < b.y_min || a.y + r > b.y_max;
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, o) = (&world.agents[i], &world.agents[j]);
            if (a.x - o.x).hypot(a.y - o.y) < 2.0 * r {
                flags[i].agent = true;
                flags[j].agent = true;
            }
        }
    }
    flags
}

/// Reward mode: `Single` uses the single-agent reward, `Multi` adds the
/// agent-collision penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Which agents were acting during this step.
    pub active: Vec<bool>,
    pub collisions: Vec<CollisionFlags>,
    /// Executed actions (normalized units, after clamping and noise).
    pub executed: Vec<[f64; 2]>,
}

/// Advances the world by one step.
///
/// Agents that were already broken or at their goal do not move and get a zero
/// reward. Collisions break an agent (it freezes in place); entering the goal
/// radius marks it reached. Both flags are absorbing. Stepping a world whose
/// horizon has elapsed is an error; stepping a world whose agents are all
/// terminal before the horizon is a no-op that only advances `t`.
pub fn env_step<R: Rng + ?Sized>(
    world: &mut WorldState,
    actions: &[[f64; 2]],
    mode: RewardMode,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let geom = cfg.geometry(world.env_id);
    let n = world.n_agents();
    if world.t >= geom.horizon {
        return Err(Error::Contract("step on a world whose horizon has elapsed".into()));
    }
    if actions.len() != n {
        return Err(Error::dim("joint action", n, actions.len()));
    }
    let active: Vec<bool> = world.agents.iter().map(|a| !a.broken && !a.reached).collect();
    let mut executed = vec![[0.0; 2]; n];
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let mut a = [0.0; 2];
        for k in 0..2 {
            let raw = actions[i][k];
            if !raw.is_finite() {
                return Err(Error::NonFinite(format!("action of agent {i}")));
            }
            a[k] = raw.clamp(-1.0, 1.0) + noise(rng, cfg.action_noise);
        }
        executed[i] = a;
        let s = &world.agents[i];
        world.agents[i] = match world.env_id.kinematics() {
            Kinematics::Bicycle => bicycle_step(s, [a[0], a[1] * geom.max_steer], &geom),
            Kinematics::Unicycle => unicycle_step(s, a, &geom),
        };
    }
    world.t += 1;
    let collisions = collision_check(world, &geom);
    let mut rewards = vec![0.0; n];
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let c = collisions[i];
        let agent_hit = mode == RewardMode::Multi && c.agent;
        let s = world.agents[i];
        rewards[i] = reward_multi(&s, world.goals[i], c.env, agent_hit, cfg.reward_scale, cfg.shaping_sign);
        let agent = &mut world.agents[i];
        if c.env || agent_hit {
            agent.broken = true;
            agent.v = 0.0;
            agent.omega = 0.0;
        } else if s.distance_to(world.goals[i]) < GOAL_RADIUS {
            agent.reached = true;
            agent.v = 0.0;
            agent.omega = 0.0;
        }
    }
    let dones = (0..n).map(|i| world.agent_done(i, geom.horizon)).collect();
    Ok(StepOutcome {
        rewards,
        dones,
        active,
        collisions,
        executed,
    })
}
