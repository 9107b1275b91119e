//! Python bindings: configs, the simulators, checkpointed policies, training
//! entry points and the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ::iatrpo::cliio::{load_checkpoint, load_team, parse_config, save_team, CheckpointMeta, RunConfig};
use ::iatrpo::envs::{env_step, observe, sample_initial, EnvId, RewardMode, WorldState};
use ::iatrpo::evalr::{discrete_frechet as frechet, success_rate as success};
use ::iatrpo::nnet::{gaussian_kl, GaussianAction};
use ::iatrpo::trainer::{train_iatrpo, train_matrpo, train_single, PolicyHandle, RolloutMode};
use ::iatrpo::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(text: Option<&str>) -> PyResult<RunConfig> {
    parse_config(text.unwrap_or("")).map_err(py_err)
}

/// Parses a TOML run config; returns (resolved JSON, hash).
#[pyfunction]
#[pyo3(signature = (text = None))]
fn config_info(text: Option<&str>) -> PyResult<(String, String)> {
    let cfg = config(text)?;
    let json = serde_json::to_string(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((json, cfg.hash()))
}

/// A running environment instance.
#[pyclass]
struct Env {
    cfg: RunConfig,
    env_id: EnvId,
    world: WorldState,
    rng: ChaCha8Rng,
    multi: bool,
}

#[pymethods]
impl Env {
    /// `role` restricts the world to that agent alone (stage-1 setting).
    #[new]
    #[pyo3(signature = (env_id, seed = 0, config = None, role = None))]
    fn new(env_id: &str, seed: u64, config: Option<&str>, role: Option<usize>) -> PyResult<Self> {
        let cfg = self::config(config)?;
        let env_id: EnvId = env_id.parse().map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = sample_initial(env_id, &cfg.env, &mut rng);
        if let Some(r) = role {
            world = world.single(r).map_err(py_err)?;
        }
        Ok(Env {
            cfg,
            env_id,
            world,
            rng,
            multi: role.is_none(),
        })
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.world.n_agents()
    }

    #[getter]
    fn t(&self) -> usize {
        self.world.t
    }

    #[getter]
    fn env_id(&self) -> String {
        self.env_id.to_string()
    }

    fn positions(&self) -> Vec<[f64; 2]> {
        self.world.agents.iter().map(|a| a.position()).collect()
    }

    fn goals(&self) -> Vec<[f64; 2]> {
        self.world.goals.clone()
    }

    /// Flags per agent: (broken, reached).
    fn flags(&self) -> Vec<(bool, bool)> {
        self.world.agents.iter().map(|a| (a.broken, a.reached)).collect()
    }

    /// Noisy observation of agent `i`: (own, goal, others flattened).
    fn observe(&mut self, i: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let o = observe(&self.world, i, &self.cfg.env, &mut self.rng).map_err(py_err)?;
        Ok((o.own.to_vec(), o.goal.to_vec(), o.others_flat()))
    }

    /// Advances one step; returns (rewards, dones).
    fn step(&mut self, actions: Vec<[f64; 2]>) -> PyResult<(Vec<f64>, Vec<bool>)> {
        let mode = if self.multi { RewardMode::Multi } else { RewardMode::Single };
        let out = env_step(&mut self.world, &actions, mode, &self.cfg.env, &mut self.rng).map_err(py_err)?;
        Ok((out.rewards, out.dones))
    }

    fn all_done(&self) -> bool {
        self.world.all_done(self.cfg.env.horizon)
    }
}

/// One agent's policy loaded from a checkpoint.
#[pyclass]
struct Policy {
    inner: PolicyHandle,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = load_checkpoint(&path).map_err(py_err)?;
        Ok(Policy { inner: c.policy })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.tag()
    }

    #[getter]
    fn role(&self) -> usize {
        self.inner.role
    }

    #[getter]
    fn env_id(&self) -> String {
        self.inner.env_id.to_string()
    }

    /// Action distribution: (mean, log_std).
    #[pyo3(signature = (own, goal, others = None))]
    fn act(&self, own: Vec<f64>, goal: Vec<f64>, others: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let g = self.inner.act(&own, &goal, others.as_deref()).map_err(py_err)?;
        Ok((g.mean, g.log_std))
    }

    #[pyo3(signature = (own, goal, others = None, other_actions = None))]
    fn value(&self, own: Vec<f64>, goal: Vec<f64>, others: Option<Vec<f64>>, other_actions: Option<Vec<f64>>) -> PyResult<f64> {
        self.inner
            .value(&own, &goal, others.as_deref(), other_actions.as_deref())
            .map_err(py_err)
    }
}

fn run_dir(out_dir: &str) -> PyResult<PathBuf> {
    let p = PathBuf::from(out_dir);
    std::fs::create_dir_all(&p).map_err(|e| PyIOError::new_err(format!("{}: {e}", p.display())))?;
    Ok(p)
}

/// Stage-1 training; writes `single_role<k>.ckpt` and returns iterations per role.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, config = None))]
fn train_single_agents(py: Python<'_>, out_dir: &str, seed: u64, config: Option<&str>) -> PyResult<Vec<usize>> {
    let mut cfg = self::config(config)?;
    cfg.curriculum.seed = seed;
    let dir = run_dir(out_dir)?;
    py.detach(|| {
        let outs = train_single(&cfg.env, &cfg.trpo, &cfg.curriculum, &mut |_| {})?;
        let mut iters = Vec::new();
        for o in &outs {
            save_team(&dir, "single", &o.handles, &meta(&cfg, o.iterations))?;
            iters.push(o.iterations);
        }
        Ok(iters)
    })
    .map_err(py_err)
}

fn meta(cfg: &RunConfig, iterations: usize) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.curriculum.seed,
        iterations,
        config_hash: cfg.hash(),
    }
}

/// Stage-2 training on top of `single_role<k>.ckpt` in `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, config = None))]
fn train_interaction_aware(py: Python<'_>, out_dir: &str, seed: u64, config: Option<&str>) -> PyResult<usize> {
    let mut cfg = self::config(config)?;
    cfg.curriculum.seed = seed;
    let dir = run_dir(out_dir)?;
    py.detach(|| {
        let singles: Vec<PolicyHandle> = load_team(&dir, "single")?.into_iter().map(|c| c.policy).collect();
        let out = train_iatrpo(&cfg.env, &cfg.trpo, &cfg.curriculum, &singles, &mut |_| {})?;
        save_team(&dir, "iatrpo", &out.handles, &meta(&cfg, out.iterations))?;
        Ok(out.iterations)
    })
    .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, config = None))]
fn train_baseline(py: Python<'_>, out_dir: &str, seed: u64, config: Option<&str>) -> PyResult<usize> {
    let mut cfg = self::config(config)?;
    cfg.curriculum.seed = seed;
    let dir = run_dir(out_dir)?;
    py.detach(|| {
        let out = train_matrpo(&cfg.env, &cfg.trpo, &cfg.curriculum, &mut |_| {})?;
        save_team(&dir, "matrpo", &out.handles, &meta(&cfg, out.iterations))?;
        Ok(out.iterations)
    })
    .map_err(py_err)
}

/// Joint mean-action success of the team `<prefix>_role<k>.ckpt` in `dir`.
#[pyfunction]
#[pyo3(signature = (dir, prefix = "iatrpo", n_episodes = 100, seed = 0, config = None))]
fn success_rate(py: Python<'_>, dir: &str, prefix: &str, n_episodes: usize, seed: u64, config: Option<&str>) -> PyResult<f64> {
    let cfg = self::config(config)?;
    let dir = PathBuf::from(dir);
    py.detach(|| {
        let team: Vec<PolicyHandle> = load_team(&dir, prefix)?.into_iter().map(|c| c.policy).collect();
        success(&cfg.env, team[0].env_id, RolloutMode::Multi, &team, n_episodes, seed)
    })
    .map_err(py_err)
}

#[pyfunction]
fn discrete_frechet(p: Vec<[f64; 2]>, q: Vec<[f64; 2]>) -> PyResult<f64> {
    frechet(&p, &q).map_err(py_err)
}

/// KL(p || q) between diagonal Gaussians given as (mean, log_std).
#[pyfunction]
fn kl_divergence(p: (Vec<f64>, Vec<f64>), q: (Vec<f64>, Vec<f64>)) -> PyResult<f64> {
    let p = GaussianAction::new(p.0, p.1).map_err(py_err)?;
    let q = GaussianAction::new(q.0, q.1).map_err(py_err)?;
    gaussian_kl(&p, &q).map_err(py_err)
}

/// GAE over one trajectory: (advantages, returns).
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, bootstrap = 0.0, gamma = 0.99, lam = 0.98))]
fn gae(rewards: Vec<f64>, values: Vec<f64>, dones: Vec<bool>, bootstrap: f64, gamma: f64, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    ::iatrpo::trpo::compute_gae(&rewards, &values, bootstrap, &dones, gamma, lam).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "iatrpo")]
fn iatrpo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Env>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(config_info, m)?)?;
    m.add_function(wrap_pyfunction!(train_single_agents, m)?)?;
    m.add_function(wrap_pyfunction!(train_interaction_aware, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    Ok(())
}
