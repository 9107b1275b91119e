//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use iatrpo::nnet::{gaussian_kl, gaussian_log_prob, GaussianAction, MlpSpec, ParameterVector};
use iatrpo::trpo::ActorData;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_net(rng: &mut ChaCha8Rng, with_log_std: bool) -> ParameterVector {
    let input = rng.gen_range(1..5);
    let hidden: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..7)).collect();
    let output = rng.gen_range(1..4);
    let spec = MlpSpec::new(input, hidden, output).unwrap();
    let mut p = ParameterVector::init(spec, with_log_std, 0.5, rng);
    for b in p.values.iter_mut() {
        *b += rng.gen_range(-0.3..0.3);
    }
    if let Some(ls) = p.log_std.as_mut() {
        for v in ls.iter_mut() {
            *v = rng.gen_range(-0.5..0.3);
        }
    }
    p
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Finite differences need inputs away from ReLU kinks.
pub fn safe_input(p: &ParameterVector, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..p.spec.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ok = true;
        let mut act = x.clone();
        let mut off = 0;
        let layers = p.spec.layers();
        for (l, &(fi, fo)) in layers.iter().enumerate() {
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut z = p.values[off + fi * fo + o];
                for i in 0..fi {
                    z += p.values[off + o * fi + i] * act[i];
                }
                if l + 1 < layers.len() {
                    ok &= z.abs() > 1e-3;
                    z = z.max(0.0);
                }
                next[o] = z;
            }
            off += (fi + 1) * fo;
            act = next;
        }
        if ok {
            return x;
        }
    }
}

/// Batch whose old log-probabilities come from `p` itself, with actions
/// sampled from `p`'s Gaussian.
pub fn random_batch(p: &ParameterVector, n: usize, rng: &mut ChaCha8Rng) -> ActorData {
    let d = p.spec.output_dim;
    let mut inputs = Vec::new();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    let mut adv = Vec::new();
    for _ in 0..n {
        let x = safe_input(p, rng);
        let g = GaussianAction::new(p.forward(&x).unwrap(), p.log_std.clone().unwrap()).unwrap();
        let a = g.sample(rng);
        old.push(gaussian_log_prob(&g, &a).unwrap());
        inputs.extend(x);
        actions.extend(a);
        adv.push(rng.gen_range(-1.0..1.0));
    }
    assert_eq!(actions.len(), n * d);
    ActorData {
        n,
        inputs,
        mean_offset: None,
        actions,
        old_log_probs: old,
        advantages: adv,
    }
}

pub fn mean_kl(old: &ParameterVector, new: &ParameterVector, data: &ActorData) -> f64 {
    let dim = old.spec.input_dim;
    (0..data.n)
        .map(|i| {
            let x = &data.inputs[i * dim..(i + 1) * dim];
            let p = GaussianAction::new(old.forward(x).unwrap(), old.log_std.clone().unwrap()).unwrap();
            let q = GaussianAction::new(new.forward(x).unwrap(), new.log_std.clone().unwrap()).unwrap();
            gaussian_kl(&p, &q).unwrap()
        })
        .sum::<f64>()
        / data.n as f64
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Literal recursion: A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}.
pub fn gae_recursive(r: &[f64], v: &[f64], boot: f64, d: &[bool], g: f64, l: f64, t: usize) -> f64 {
    let nd = if d[t] { 0.0 } else { 1.0 };
    let next_v = if t + 1 < r.len() { v[t + 1] } else { boot };
    let delta = r[t] + g * next_v * nd - v[t];
    if t + 1 == r.len() {
        delta
    } else {
        delta + g * l * nd * gae_recursive(r, v, boot, d, g, l, t + 1)
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Minimum over every monotone coupling, enumerated recursively.
pub fn frechet_brute(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
    fn go(p: &[[f64; 2]], q: &[[f64; 2]], i: usize, j: usize, worst: f64, best: &mut f64) {
        let worst = worst.max(dist(p[i], q[j]));
        if worst >= *best {
            return;
        }
        if i + 1 == p.len() && j + 1 == q.len() {
            *best = worst;
            return;
        }
        if i + 1 < p.len() {
            go(p, q, i + 1, j, worst, best);
        }
        if j + 1 < q.len() {
            go(p, q, i, j + 1, worst, best);
        }
        if i + 1 < p.len() && j + 1 < q.len() {
            go(p, q, i + 1, j + 1, worst, best);
        }
    }
    let mut best = f64::INFINITY;
    go(p, q, 0, 0, 0.0, &mut best);
    best
}
