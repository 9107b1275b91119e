//! Single-agent trust-region policy optimization: GAE advantages, conjugate
//! gradient on Fisher-vector products, KL-constrained backtracking line search
//! and value regression.
//!
//! The optimizer never sees environments or policy kinds. Callers flatten
//! their transitions into [`ActorData`] / [`CriticData`]: dense network inputs
//! plus an optional fixed per-sample offset that is added to the network
//! output. The offset carries the frozen half of a composed policy, so the
//! same code trains plain, composed and centralized-critic agents.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::nnet::{backward_batch, forward_batch, jvp_batch, kl_raw, log_prob_raw, MlpSpec, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VfOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    /// Fisher-vector products use every k-th sample of the batch.
    pub fvp_subsample: usize,
    pub backtrack_steps: usize,
    pub backtrack_ratio: f64,
    pub vf_iters: usize,
    pub vf_step: f64,
    pub vf_minibatch: usize,
    pub vf_optimizer: VfOptimizer,
    pub batch_timesteps: usize,
    pub ent_coeff: f64,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        TrpoConfig {
            gamma: 0.99,
            lam: 0.98,
            max_kl: 0.01,
            cg_iters: 10,
            cg_damping: 0.1,
            fvp_subsample: 5,
            backtrack_steps: 10,
            backtrack_ratio: 0.5,
            vf_iters: 5,
            vf_step: 1e-3,
            vf_minibatch: 64,
            vf_optimizer: VfOptimizer::Adam,
            batch_timesteps: 4096,
            ent_coeff: 0.0,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("trpo.{key}"),
                msg: msg.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return bad("lam", "must lie in [0, 1]");
        }
        if !(self.max_kl > 0.0) {
            return bad("max_kl", "must be > 0");
        }
        if self.cg_iters == 0 {
            return bad("cg_iters", "must be >= 1");
        }
        if !(self.cg_damping >= 0.0) {
            return bad("cg_damping", "must be >= 0");
        }
        if self.fvp_subsample == 0 {
            return bad("fvp_subsample", "must be >= 1");
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return bad("backtrack_ratio", "must lie in (0, 1)");
        }
        if !(self.vf_step > 0.0) {
            return bad("vf_step", "must be > 0");
        }
        if self.vf_minibatch == 0 {
            return bad("vf_minibatch", "must be >= 1");
        }
        if self.batch_timesteps == 0 {
            return bad("batch_timesteps", "must be >= 1");
        }
        if !self.ent_coeff.is_finite() {
            return bad("ent_coeff", "must be finite");
        }
        Ok(())
    }
}

/// One step of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub goal: Vec<f64>,
    pub other_obs: Option<Vec<f64>>,
    /// Most recent executed actions of the other agents (centralized critics only).
    pub other_actions: Option<Vec<f64>>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value_estimate: f64,
    pub done: bool,
}

/// Transitions of one agent grouped by episode, with advantages and returns.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Provenance: index of the agent whose experience this is.
    pub agent: usize,
    pub transitions: Vec<Transition>,
    /// Exclusive end index of each episode in `transitions`.
    pub episode_ends: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    /// Runs GAE per episode (bootstrapping from `bootstraps[e]` when the last
    /// transition of episode `e` is not terminal) and normalizes advantages.
    pub fn from_episodes(
        agent: usize,
        episodes: Vec<Vec<Transition>>,
        bootstraps: &[f64],
        gamma: f64,
        lam: f64,
    ) -> Result<Self> {
        if episodes.len() != bootstraps.len() {
            return Err(Error::dim("episode bootstraps", episodes.len(), bootstraps.len()));
        }
        let mut transitions = Vec::new();
        let mut episode_ends = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for (ep, &boot) in episodes.into_iter().zip(bootstraps) {
            if ep.is_empty() {
                continue;
            }
            let rewards: Vec<f64> = ep.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = ep.iter().map(|t| t.value_estimate).collect();
            let dones: Vec<bool> = ep.iter().map(|t| t.done).collect();
            let (adv, ret) = compute_gae(&rewards, &values, boot, &dones, gamma, lam)?;
            advantages.extend(adv);
            returns.extend(ret);
            transitions.extend(ep);
            episode_ends.push(transitions.len());
        }
        if transitions.is_empty() {
            return Err(Error::Contract("batch has no transitions".into()));
        }
        normalize_advantages(&mut advantages);
        Ok(Batch {
            agent,
            transitions,
            episode_ends,
            advantages,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Generalized advantage estimation over one trajectory segment.
///
/// `delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t`, with
/// `V_T = bootstrap`, and `A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    dones: &[bool],
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("GAE over an empty trajectory".into()));
    }
    if values.len() != n {
        return Err(Error::dim("GAE values", n, values.len()));
    }
    if dones.len() != n {
        return Err(Error::dim("GAE dones", n, dones.len()));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return Err(Error::Contract(format!(
            "GAE needs gamma, lam in [0, 1], got {gamma}, {lam}"
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lam * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts to zero mean and scales to unit (population) standard deviation.
/// Batches of one sample, or constant batches, are only centered.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let scale = if n > 1 && std > 1e-12 { 1.0 / std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) * scale;
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` given as a closure.
/// Stops once `||r|| < residual_tol` or after `iters` iterations.
pub fn conjugate_gradient<F>(mut matvec: F, b: &[f64], iters: usize, residual_tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let tol2 = residual_tol * residual_tol;
    for _ in 0..iters {
        if rr < tol2 {
            break;
        }
        let ap = matvec(&p)?;
        if ap.len() != b.len() {
            return Err(Error::dim("CG operator output", b.len(), ap.len()));
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::NonFinite(format!(
                "conjugate gradient curvature p^T A p = {pap}"
            )));
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(Error::NonFinite("conjugate gradient residual".into()));
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Ok(x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense actor-side view of a batch for one trainable policy network.
#[derive(Debug, Clone)]
pub struct ActorData {
    pub n: usize,
    /// `n x spec.input_dim`, row-major.
    pub inputs: Vec<f64>,
    /// Fixed contribution added to the network mean (`n x act_dim`).
    pub mean_offset: Option<Vec<f64>>,
    pub actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Dense critic-side view of a batch.
#[derive(Debug, Clone)]
pub struct CriticData {
    pub n: usize,
    pub inputs: Vec<f64>,
    pub value_offset: Option<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl ActorData {
    fn check(&self, params: &ParameterVector) -> Result<usize> {
        let spec = &params.spec;
        let d = spec.output_dim;
        if params.log_std.is_none() {
            return Err(Error::Contract("policy parameters need a log-std".into()));
        }
        if self.n == 0 {
            return Err(Error::Contract("empty actor batch".into()));
        }
        if self.inputs.len() != self.n * spec.input_dim {
            return Err(Error::dim("actor inputs", self.n * spec.input_dim, self.inputs.len()));
        }
        if self.actions.len() != self.n * d {
            return Err(Error::dim("actions", self.n * d, self.actions.len()));
        }
        if let Some(off) = &self.mean_offset {
            if off.len() != self.n * d {
                return Err(Error::dim("mean offset", self.n * d, off.len()));
            }
        }
        if self.old_log_probs.len() != self.n || self.advantages.len() != self.n {
            return Err(Error::dim("per-sample arrays", self.n, self.old_log_probs.len()));
        }
        Ok(d)
    }

    fn subsample(&self, every: usize, d: usize, in_dim: usize) -> ActorData {
        if every <= 1 {
            return self.clone();
        }
        let idx: Vec<usize> = (0..self.n).step_by(every).collect();
        let rows = |src: &[f64], w: usize| -> Vec<f64> {
            idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect()
        };
        ActorData {
            n: idx.len(),
            inputs: rows(&self.inputs, in_dim),
            mean_offset: self.mean_offset.as_ref().map(|o| rows(o, d)),
            actions: rows(&self.actions, d),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
        }
    }
}

fn means(spec: &MlpSpec, weights: &[f64], data: &ActorData) -> (crate::nnet::ForwardCache, Vec<f64>) {
    let cache = forward_batch(spec, weights, &data.inputs, data.n);
    let mut mu = cache.output().to_vec();
    if let Some(off) = &data.mean_offset {
        for (m, o) in mu.iter_mut().zip(off) {
            *m += o;
        }
    }
    (cache, mu)
}

fn split_flat<'a>(spec: &MlpSpec, flat: &'a [f64]) -> (&'a [f64], &'a [f64]) {
    flat.split_at(spec.param_count())
}

/// Importance-weighted surrogate `mean_i exp(logpi(a_i) - logpi_old(a_i)) A_i`
/// plus `ent_coeff * entropy`, evaluated at the flat parameters `flat`.
fn surrogate_at(spec: &MlpSpec, flat: &[f64], data: &ActorData, ent_coeff: f64) -> Result<f64> {
    let (w, ls) = split_flat(spec, flat);
    let d = spec.output_dim;
    let (_, mu) = means(spec, w, data);
    let mut total = 0.0;
    for i in 0..data.n {
        let lp = log_prob_raw(&mu[i * d..(i + 1) * d], ls, &data.actions[i * d..(i + 1) * d]);
        total += (lp - data.old_log_probs[i]).exp() * data.advantages[i];
    }
    let ent: f64 = ls.iter().map(|l| 0.5 + 0.918_938_533_204_672_7 + l).sum();
    let loss = total / data.n as f64 + ent_coeff * ent;
    if !loss.is_finite() {
        return Err(Error::NonFinite("surrogate objective".into()));
    }
    Ok(loss)
}

fn surrogate_grad_at(spec: &MlpSpec, flat: &[f64], data: &ActorData, ent_coeff: f64) -> (f64, Vec<f64>) {
    let (w, ls) = split_flat(spec, flat);
    let d = spec.output_dim;
    let (cache, mu) = means(spec, w, data);
    let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
    let scale = 1.0 / data.n as f64;
    let mut d_mu = vec![0.0; data.n * d];
    let mut g_ls = vec![ent_coeff; d];
    let mut total = 0.0;
    for i in 0..data.n {
        let m = &mu[i * d..(i + 1) * d];
        let a = &data.actions[i * d..(i + 1) * d];
        let lp = log_prob_raw(m, ls, a);
        let ratio = (lp - data.old_log_probs[i]).exp();
        let ra = ratio * data.advantages[i];
        total += ra;
        for k in 0..d {
            let diff = a[k] - m[k];
            d_mu[i * d + k] = scale * ra * diff * inv_var[k];
            g_ls[k] += scale * ra * (diff * diff * inv_var[k] - 1.0);
        }
    }
    let mut grad = vec![0.0; flat.len()];
    backward_batch(spec, w, &cache, &d_mu, &mut grad[..spec.param_count()]);
    grad[spec.param_count()..].copy_from_slice(&g_ls);
    let ent: f64 = ls.iter().map(|l| 0.5 + 0.918_938_533_204_672_7 + l).sum();
    (total * scale + ent_coeff * ent, grad)
}

/// Mean `KL(pi_old || pi_flat)` over the batch.
fn mean_kl(spec: &MlpSpec, old_mu: &[f64], old_ls: &[f64], flat: &[f64], data: &ActorData) -> f64 {
    let (w, ls) = split_flat(spec, flat);
    let d = spec.output_dim;
    let (_, mu) = means(spec, w, data);
    let mut kl = 0.0;
    for i in 0..data.n {
        kl += kl_raw(&old_mu[i * d..(i + 1) * d], old_ls, &mu[i * d..(i + 1) * d], ls);
    }
    kl / data.n as f64
}

/// The surrogate objective at `params` over the batch (without entropy bonus).
pub fn surrogate_loss(params: &ParameterVector, data: &ActorData) -> Result<f64> {
    data.check(params)?;
    params.validate()?;
    surrogate_at(&params.spec, &params.flatten(), data, 0.0)
}

/// Gradient of [`surrogate_loss`] with respect to the flat parameters.
pub fn surrogate_gradient(params: &ParameterVector, data: &ActorData) -> Result<Vec<f64>> {
    data.check(params)?;
    params.validate()?;
    let (_, g) = surrogate_grad_at(&params.spec, &params.flatten(), data, 0.0);
    ensure_finite("surrogate gradient", &g)?;
    Ok(g)
}

/// `(H + damping I) v`, where `H` is the Hessian of the mean
/// `KL(pi_old || pi_theta)` at `theta = theta_old = params`.
///
/// At the old parameters the KL Hessian equals the Fisher information of the
/// Gaussian head: `J^T diag(1/sigma^2) J / n` on the network weights (with `J`
/// the Jacobian of the means), `2 I` on the log-std entries and zero between
/// the two blocks. It is evaluated with one forward-mode and one reverse-mode
/// pass instead of differentiating twice.
pub fn fisher_vector_product(params: &ParameterVector, data: &ActorData, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    data.check(params)?;
    if v.len() != params.flat_len() {
        return Err(Error::dim("FVP vector", params.flat_len(), v.len()));
    }
    let cache = forward_batch(&params.spec, &params.values, &data.inputs, data.n);
    let ls = params.log_std.as_deref().unwrap_or(&[]);
    Ok(fvp_cached(&params.spec, &params.values, ls, &cache, data.n, v, damping))
}

fn fvp_cached(
    spec: &MlpSpec,
    weights: &[f64],
    log_std: &[f64],
    cache: &crate::nnet::ForwardCache,
    n: usize,
    v: &[f64],
    damping: f64,
) -> Vec<f64> {
    let np = spec.param_count();
    let d = spec.output_dim;
    let mut jv = jvp_batch(spec, weights, cache, &v[..np]);
    let scale = 1.0 / n as f64;
    for row in jv.chunks_exact_mut(d) {
        for (k, x) in row.iter_mut().enumerate() {
            *x *= scale * (-2.0 * log_std[k]).exp();
        }
    }
    let mut out = vec![0.0; v.len()];
    backward_batch(spec, weights, cache, &jv, &mut out[..np]);
    for k in 0..d {
        out[np + k] = 2.0 * v[np + k];
    }
    for (o, vi) in out.iter_mut().zip(v) {
        *o += damping * vi;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub kl: f64,
    pub improvement: f64,
    pub expected_improvement: f64,
    pub accepted: bool,
    pub backtracks: usize,
    pub entropy: f64,
    pub surrogate_before: f64,
    pub grad_norm: f64,
    /// Set when the step was skipped; the parameters are then unchanged.
    pub skipped: Option<String>,
}

/// One natural-gradient step with KL-constrained backtracking.
///
/// Returns the (possibly unchanged) parameters and a report. Non-finite
/// gradients or curvature skip the step rather than failing the run.
pub fn trpo_step(params: &ParameterVector, data: &ActorData, cfg: &TrpoConfig) -> Result<(ParameterVector, StepReport)> {
    data.check(params)?;
    params.validate()?;
    let spec = &params.spec;
    let d = spec.output_dim;
    let old_flat = params.flatten();
    let old_ls: Vec<f64> = params.log_std.clone().unwrap_or_default();
    let mut report = StepReport {
        entropy: old_ls.iter().map(|l| 0.5 + 0.918_938_533_204_672_7 + l).sum(),
        ..StepReport::default()
    };

    let (surr_before, grad) = surrogate_grad_at(spec, &old_flat, data, cfg.ent_coeff);
    report.surrogate_before = surr_before;
    report.grad_norm = dot(&grad, &grad).sqrt();
    if !surr_before.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        report.skipped = Some("non-finite surrogate gradient".into());
        return Ok((params.clone(), report));
    }
    if report.grad_norm == 0.0 {
        report.skipped = Some("zero gradient".into());
        return Ok((params.clone(), report));
    }

    let sub = data.subsample(cfg.fvp_subsample, d, spec.input_dim);
    let sub_cache = forward_batch(spec, &params.values, &sub.inputs, sub.n);
    let fvp = |v: &[f64]| -> Result<Vec<f64>> {
        Ok(fvp_cached(spec, &params.values, &old_ls, &sub_cache, sub.n, v, cfg.cg_damping))
    };
    let step_dir = match conjugate_gradient(fvp, &grad, cfg.cg_iters, 1e-10) {
        Ok(s) => s,
        Err(e) => {
            report.skipped = Some(e.to_string());
            return Ok((params.clone(), report));
        }
    };
    let shs = 0.5 * dot(&step_dir, &fvp_cached(spec, &params.values, &old_ls, &sub_cache, sub.n, &step_dir, cfg.cg_damping));
    if !(shs > 0.0) || !shs.is_finite() {
        report.skipped = Some(format!("non-positive step curvature {shs}"));
        return Ok((params.clone(), report));
    }
    // sqrt(2 max_kl / s^T H s)
    let step_scale = (cfg.max_kl / shs).sqrt();
    let full_step: Vec<f64> = step_dir.iter().map(|s| s * step_scale).collect();
    let expected = dot(&grad, &full_step);

    let (_, old_mu) = means(spec, &params.values, data);
    let mut frac = 1.0;
    for k in 0..cfg.backtrack_steps {
        let trial: Vec<f64> = old_flat.iter().zip(&full_step).map(|(p, s)| p + frac * s).collect();
        let surr = surrogate_at(spec, &trial, data, cfg.ent_coeff);
        let kl = mean_kl(spec, &old_mu, &old_ls, &trial, data);
        report.backtracks = k;
        if let Ok(surr) = surr {
            let improve = surr - surr_before;
            if kl.is_finite() && kl <= cfg.max_kl && improve > 0.0 {
                report.kl = kl;
                report.improvement = improve;
                report.expected_improvement = expected * frac;
                report.accepted = true;
                let new = ParameterVector::unflatten(spec.clone(), true, &trial)?;
                return Ok((new, report));
            }
        }
        frac *= cfg.backtrack_ratio;
    }
    report.backtracks = cfg.backtrack_steps;
    report.expected_improvement = expected;
    Ok((params.clone(), report))
}

/// Mean squared error of `offset + V(inputs)` against the targets.
pub fn value_mse(params: &ParameterVector, data: &CriticData) -> Result<f64> {
    check_critic(params, data)?;
    let cache = forward_batch(&params.spec, &params.values, &data.inputs, data.n);
    let pred = cache.output();
    let mut mse = 0.0;
    for i in 0..data.n {
        let p = pred[i] + data.value_offset.as_ref().map_or(0.0, |o| o[i]);
        mse += (p - data.targets[i]).powi(2);
    }
    Ok(mse / data.n as f64)
}

fn check_critic(params: &ParameterVector, data: &CriticData) -> Result<()> {
    if params.spec.output_dim != 1 {
        return Err(Error::dim("value network output", 1, params.spec.output_dim));
    }
    if data.inputs.len() != data.n * params.spec.input_dim {
        return Err(Error::dim("critic inputs", data.n * params.spec.input_dim, data.inputs.len()));
    }
    if data.targets.len() != data.n {
        return Err(Error::dim("critic targets", data.n, data.targets.len()));
    }
    if let Some(o) = &data.value_offset {
        if o.len() != data.n {
            return Err(Error::dim("value offset", data.n, o.len()));
        }
    }
    Ok(())
}

/// Regresses the value network onto the targets: `vf_iters` epochs over
/// shuffled minibatches of size `vf_minibatch` with step `vf_step`.
/// Returns the new parameters and the training-batch MSE after fitting.
pub fn fit_value<R: Rng + ?Sized>(
    value_params: &ParameterVector,
    data: &CriticData,
    cfg: &TrpoConfig,
    rng: &mut R,
) -> Result<(ParameterVector, f64)> {
    check_critic(value_params, data)?;
    ensure_finite("value targets", &data.targets)?;
    let spec = &value_params.spec;
    let in_dim = spec.input_dim;
    let mut w = value_params.values.clone();
    let mut adam = Adam::new(w.len());
    let mut order: Vec<usize> = (0..data.n).collect();
    let mb = cfg.vf_minibatch.min(data.n).max(1);
    let mut grad = vec![0.0; w.len()];
    let mut xs = Vec::with_capacity(mb * in_dim);
    let mut d_out = Vec::with_capacity(mb);
    for _ in 0..cfg.vf_iters {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            xs.clear();
            for &i in chunk {
                xs.extend_from_slice(&data.inputs[i * in_dim..(i + 1) * in_dim]);
            }
            let cache = forward_batch(spec, &w, &xs, chunk.len());
            d_out.clear();
            let scale = 2.0 / chunk.len() as f64;
            for (k, &i) in chunk.iter().enumerate() {
                let pred = cache.output()[k] + data.value_offset.as_ref().map_or(0.0, |o| o[i]);
                d_out.push(scale * (pred - data.targets[i]));
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            backward_batch(spec, &w, &cache, &d_out, &mut grad);
            match cfg.vf_optimizer {
                VfOptimizer::Sgd => axpy(-cfg.vf_step, &grad, &mut w),
                VfOptimizer::Adam => adam.step(&mut w, &grad, cfg.vf_step),
            }
        }
    }
    ensure_finite("value network parameters", &w)?;
    let out = ParameterVector {
        spec: spec.clone(),
        values: w,
        log_std: None,
    };
    let mse = value_mse(&out, data)?;
    Ok((out, mse))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}
