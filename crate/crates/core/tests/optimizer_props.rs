mod common;

use common::{gae_recursive, mean_kl, random_batch, random_net, rel_err, safe_input, solve};
use iatrpo::nnet::{gaussian_kl, mlp_backward, mlp_forward, GaussianAction, ParameterVector};
use iatrpo::trpo::{
    compute_gae, conjugate_gradient, fisher_vector_product, normalize_advantages, surrogate_gradient,
    surrogate_loss, trpo_step, TrpoConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn backprop_matches_finite_differences_on_100_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = random_net(&mut rng, false);
        let x = safe_input(&p, &mut rng);
        let w: Vec<f64> = (0..p.spec.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = mlp_backward(&p, &x, &w).unwrap();
        let f = |q: &ParameterVector| -> f64 {
            mlp_forward(q, &x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        for k in 0..p.values.len() {
            let mut plus = p.clone();
            plus.values[k] += h;
            let mut minus = p.clone();
            minus.values[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g[k], fd));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-6;
    for _ in 0..20 {
        let p = random_net(&mut rng, true);
        let data = random_batch(&p, 12, &mut rng);
        let g = surrogate_gradient(&p, &data).unwrap();
        let flat = p.flatten();
        for k in 0..flat.len() {
            let mut a = flat.clone();
            a[k] += h;
            let mut b = flat.clone();
            b[k] -= h;
            let pa = ParameterVector::unflatten(p.spec.clone(), true, &a).unwrap();
            let pb = ParameterVector::unflatten(p.spec.clone(), true, &b).unwrap();
            let fd = (surrogate_loss(&pa, &data).unwrap() - surrogate_loss(&pb, &data).unwrap()) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "k={k}: {} vs {fd}", g[k]);
        }
    }
}

#[test]
fn fisher_product_is_second_derivative_of_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let p = random_net(&mut rng, true);
        let data = random_batch(&p, 10, &mut rng);
        let flat = p.flatten();
        let v: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fv = fisher_vector_product(&p, &data, &v, 0.0).unwrap();
        let vfv: f64 = v.iter().zip(&fv).map(|(a, b)| a * b).sum();
        let eps = 1e-4;
        let shifted = |s: f64| {
            let f: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            ParameterVector::unflatten(p.spec.clone(), true, &f).unwrap()
        };
        let second = (mean_kl(&p, &shifted(eps), &data) + mean_kl(&p, &shifted(-eps), &data)) / (eps * eps);
        assert!(rel_err(vfv, second) < 1e-3, "vFv {vfv} vs FD {second}");
    }
}

#[test]
fn fisher_product_is_linear_symmetric_and_damped() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let p = random_net(&mut rng, true);
        let data = random_batch(&p, 8, &mut rng);
        let n = p.flat_len();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let comb: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let fu = fisher_vector_product(&p, &data, &u, 0.0).unwrap();
        let fv = fisher_vector_product(&p, &data, &v, 0.0).unwrap();
        let fc = fisher_vector_product(&p, &data, &comb, 0.0).unwrap();
        for k in 0..n {
            assert!((fc[k] - (a * fu[k] + b * fv[k])).abs() < 1e-9);
        }
        let ufv: f64 = u.iter().zip(&fv).map(|(x, y)| x * y).sum();
        let vfu: f64 = v.iter().zip(&fu).map(|(x, y)| x * y).sum();
        assert!((ufv - vfu).abs() < 1e-9 * ufv.abs().max(1.0));
        let damped = fisher_vector_product(&p, &data, &u, 0.1).unwrap();
        for k in 0..n {
            assert!((damped[k] - fu[k] - 0.1 * u[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn conjugate_gradient_matches_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let n = rng.gen_range(2..9);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| m[k][i] * m[k][j]).sum::<f64>() + if i == j { 0.5 } else { 0.0 })
                    .collect()
            })
            .collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let direct = solve(a.clone(), b.clone());
        let cg = conjugate_gradient(
            |v: &[f64]| Ok(a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()),
            &b,
            4 * n,
            1e-20,
        )
        .unwrap();
        for k in 0..n {
            assert!((cg[k] - direct[k]).abs() <= 1e-6, "{} vs {}", cg[k], direct[k]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gae_equals_recursion(
        steps in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0, prop::bool::weighted(0.15)), 1..30),
        boot in -2.0f64..2.0,
        gamma in 0.0f64..=1.0,
        lam in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&r, &v, boot, &d, gamma, lam).unwrap();
        for t in 0..r.len() {
            let want = gae_recursive(&r, &v, boot, &d, gamma, lam, t);
            prop_assert!((adv[t] - want).abs() <= 1e-12 * want.abs().max(1.0));
            prop_assert!((ret[t] - (adv[t] + v[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn gae_with_unit_lambda_is_monte_carlo(
        rv in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0), 1..40),
        gamma in 0.5f64..=1.0,
    ) {
        let r: Vec<f64> = rv.iter().map(|s| s.0).collect();
        let v: Vec<f64> = rv.iter().map(|s| s.1).collect();
        let mut d = vec![false; r.len()];
        *d.last_mut().unwrap() = true;
        let (adv, _) = compute_gae(&r, &v, 0.0, &d, gamma, 1.0).unwrap();
        for t in 0..r.len() {
            let mc: f64 = (t..r.len()).map(|k| gamma.powi((k - t) as i32) * r[k]).sum();
            prop_assert!((adv[t] - (mc - v[t])).abs() <= 1e-9);
        }
    }

    #[test]
    fn normalized_advantages_are_standardized(xs in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let mut a = xs.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn kl_is_non_negative_and_zero_on_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..1000 {
        let d = rng.gen_range(1..5);
        let mut g = || {
            GaussianAction::new(
                (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                (0..d).map(|_| rng.gen_range(-2.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (p, q) = (g(), g());
        assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
    }
}

#[test]
fn accepted_steps_respect_the_trust_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut accepted = 0;
    for case in 0..60 {
        let p = random_net(&mut rng, true);
        let data = random_batch(&p, 40, &mut rng);
        let cfg = TrpoConfig {
            max_kl: [0.001, 0.01, 0.05][case % 3],
            fvp_subsample: 1 + case % 5,
            ..TrpoConfig::default()
        };
        let before = surrogate_loss(&p, &data).unwrap();
        let (next, report) = trpo_step(&p, &data, &cfg).unwrap();
        if report.accepted {
            accepted += 1;
            let kl = mean_kl(&p, &next, &data);
            assert!(kl <= cfg.max_kl + 1e-6, "kl {kl} > {}", cfg.max_kl);
            assert!(surrogate_loss(&next, &data).unwrap() > before);
        } else {
            assert_eq!(next, p);
        }
    }
    assert!(accepted >= 40, "only {accepted} of 60 steps accepted");
}
