//! Feed-forward ReLU networks over flat parameter vectors, plus the diagonal
//! Gaussian policy head.
//!
//! Flat layout, layer by layer from the input side: the weight matrix stored
//! row-major as `out x in` (row `o` holds the incoming weights of unit `o`),
//! followed by the `out` biases. Policy networks append one log-std entry per
//! action dimension after the last layer; [`ParameterVector::flatten`] and
//! [`ParameterVector::unflatten`] use exactly that order.
//!
//! Batched passes operate on row-major `n x dim` matrices and go through
//! `matrixmultiply::dgemm`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two hidden layers of 128 units.
    pub fn with_default_hidden(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(input_dim, Self::DEFAULT_HIDDEN.to_vec(), output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Contract("an MLP needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Contract("all layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of weights and biases, excluding any log-std entries.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| (i + 1) * o).sum()
    }

    fn max_width(&self) -> usize {
        self.hidden_dims
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

/// Trainable parameters of one network. `log_std` is present on policy
/// networks only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub spec: MlpSpec,
    pub values: Vec<f64>,
    pub log_std: Option<Vec<f64>>,
}

impl ParameterVector {
    pub fn zeros(spec: MlpSpec, with_log_std: bool) -> Self {
        let values = vec![0.0; spec.param_count()];
        let log_std = with_log_std.then(|| vec![0.0; spec.output_dim]);
        ParameterVector {
            spec,
            values,
            log_std,
        }
    }

    /// Column-normalized Gaussian initialization: every unit's incoming weight
    /// row is rescaled to L2 norm 1, except the final layer whose rows get norm
    /// `final_scale`. Biases start at zero and log-std at 0.
    pub fn init<R: Rng + ?Sized>(
        spec: MlpSpec,
        with_log_std: bool,
        final_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(spec, with_log_std);
        let layers = p.spec.layers();
        let last = layers.len() - 1;
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let scale = if l == last { final_scale } else { 1.0 };
            for o in 0..fan_out {
                let row = &mut p.values[off + o * fan_in..off + (o + 1) * fan_in];
                for w in row.iter_mut() {
                    *w = rng.sample(StandardNormal);
                }
                let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
                for w in row.iter_mut() {
                    *w *= scale / norm;
                }
            }
            off += (fan_in + 1) * fan_out;
        }
        p
    }

    pub fn flat_len(&self) -> usize {
        self.values.len() + self.log_std.as_ref().map_or(0, Vec::len)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.flat_len());
        flat.extend_from_slice(&self.values);
        if let Some(ls) = &self.log_std {
            flat.extend_from_slice(ls);
        }
        flat
    }

    pub fn unflatten(spec: MlpSpec, with_log_std: bool, flat: &[f64]) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        let expected = n + if with_log_std { spec.output_dim } else { 0 };
        if flat.len() != expected {
            return Err(Error::dim("flat parameter vector", expected, flat.len()));
        }
        Ok(ParameterVector {
            values: flat[..n].to_vec(),
            log_std: with_log_std.then(|| flat[n..].to_vec()),
            spec,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.values.len() != self.spec.param_count() {
            return Err(Error::dim(
                "parameter vector",
                self.spec.param_count(),
                self.values.len(),
            ));
        }
        ensure_finite("network parameters", &self.values)?;
        if let Some(ls) = &self.log_std {
            if ls.len() != self.spec.output_dim {
                return Err(Error::dim("log-std", self.spec.output_dim, ls.len()));
            }
            ensure_finite("log-std", ls)?;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(self, input)
    }
}

/// Evaluates the network on a single input.
pub fn mlp_forward(params: &ParameterVector, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != params.spec.input_dim {
        return Err(Error::dim("network input", params.spec.input_dim, input.len()));
    }
    if params.values.len() != params.spec.param_count() {
        return Err(Error::dim(
            "parameter vector",
            params.spec.param_count(),
            params.values.len(),
        ));
    }
    let mut out = vec![0.0; params.spec.output_dim];
    let mut buf = SingleScratch::new(&params.spec);
    forward_single_into(&params.spec, &params.values, input, &mut buf, &mut out);
    Ok(out)
}

/// Gradient of `output_grad . f(input)` with respect to the network weights and
/// biases, laid out like [`ParameterVector::values`].
pub fn mlp_backward(
    params: &ParameterVector,
    input: &[f64],
    output_grad: &[f64],
) -> Result<Vec<f64>> {
    if output_grad.len() != params.spec.output_dim {
        return Err(Error::dim(
            "output gradient",
            params.spec.output_dim,
            output_grad.len(),
        ));
    }
    if input.len() != params.spec.input_dim {
        return Err(Error::dim("network input", params.spec.input_dim, input.len()));
    }
    let cache = forward_batch(&params.spec, &params.values, input, 1);
    let mut grad = vec![0.0; params.values.len()];
    backward_batch(&params.spec, &params.values, &cache, output_grad, &mut grad);
    Ok(grad)
}

/// Reusable buffers for allocation-free single-sample evaluation during rollouts.
#[derive(Debug, Clone)]
pub struct SingleScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl SingleScratch {
    pub fn new(spec: &MlpSpec) -> Self {
        let w = spec.max_width();
        SingleScratch {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

/// Single-sample forward pass without validation. `weights` must have
/// `spec.param_count()` entries and `out` `spec.output_dim`.
pub fn forward_single_into(
    spec: &MlpSpec,
    weights: &[f64],
    input: &[f64],
    scratch: &mut SingleScratch,
    out: &mut [f64],
) {
    let layers = spec.layers();
    let last = layers.len() - 1;
    scratch.a[..input.len()].copy_from_slice(input);
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &weights[off..off + fan_in * fan_out];
        let bias = &weights[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let x = &scratch.a[..fan_in];
        let y = if l == last {
            &mut out[..]
        } else {
            &mut scratch.b[..fan_out]
        };
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = bias[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y[o] = if l == last { acc } else { acc.max(0.0) };
        }
        if l != last {
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        off += (fan_in + 1) * fan_out;
    }
}

/// Activations retained by a batched forward pass. `acts[0]` is the input,
/// `acts[l]` the post-activation output of layer `l` and the last entry the
/// linear network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub n: usize,
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

// C (m x n) = beta*C + A (m x k) * op(B) where op(B) is read with the given strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices whose extents match (m, k, n) and the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched forward pass over `n` row-major inputs.
pub fn forward_batch(spec: &MlpSpec, weights: &[f64], inputs: &[f64], n: usize) -> ForwardCache {
    assert_eq!(inputs.len(), n * spec.input_dim, "batch input shape");
    assert_eq!(weights.len(), spec.param_count(), "parameter count");
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(inputs.to_vec());
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &weights[off..off + fan_in * fan_out];
        let bias = &weights[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let mut z = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            z.extend_from_slice(bias);
        }
        let prev = &acts[l];
        // Z += A * W^T ; W^T is read from row-major W with rs=1, cs=fan_in.
        gemm(
            n,
            fan_in,
            fan_out,
            prev,
            fan_in as isize,
            1,
            w,
            1,
            fan_in as isize,
            1.0,
            &mut z,
        );
        if l != last {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
        off += (fan_in + 1) * fan_out;
    }
    ForwardCache { n, acts }
}

/// Accumulates into `grad` the gradient of `sum_i d_out[i] . f(x_i)` with
/// respect to the weights.
pub fn backward_batch(
    spec: &MlpSpec,
    weights: &[f64],
    cache: &ForwardCache,
    d_out: &[f64],
    grad: &mut [f64],
) {
    let n = cache.n;
    assert_eq!(d_out.len(), n * spec.output_dim, "output gradient shape");
    assert_eq!(grad.len(), spec.param_count(), "gradient length");
    let layers = spec.layers();
    let offsets = layer_offsets(&layers);
    let mut delta = d_out.to_vec();
    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let off = offsets[l];
        let a_prev = &cache.acts[l];
        {
            let (gw, gb) = grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            // dW += delta^T * A_prev
            gemm(
                fan_out,
                n,
                fan_in,
                &delta,
                1,
                fan_out as isize,
                a_prev,
                fan_in as isize,
                1,
                1.0,
                gw,
            );
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &weights[off..off + fan_in * fan_out];
        let mut next = vec![0.0; n * fan_in];
        gemm(
            n,
            fan_out,
            fan_in,
            &delta,
            fan_out as isize,
            1,
            w,
            fan_in as isize,
            1,
            0.0,
            &mut next,
        );
        // ReLU derivative: post-activation > 0.
        for (g, a) in next.iter_mut().zip(a_prev) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        delta = next;
    }
}

/// Forward-mode directional derivative of the batch outputs along the weight
/// tangent `tangent` (same layout as the weights). Returns `n x output_dim`.
pub fn jvp_batch(spec: &MlpSpec, weights: &[f64], cache: &ForwardCache, tangent: &[f64]) -> Vec<f64> {
    let n = cache.n;
    assert_eq!(tangent.len(), spec.param_count(), "tangent length");
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut d_prev: Option<Vec<f64>> = None;
    let mut off = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &weights[off..off + fan_in * fan_out];
        let dw = &tangent[off..off + fan_in * fan_out];
        let db = &tangent[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let mut dz = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            dz.extend_from_slice(db);
        }
        gemm(
            n,
            fan_in,
            fan_out,
            &cache.acts[l],
            fan_in as isize,
            1,
            dw,
            1,
            fan_in as isize,
            1.0,
            &mut dz,
        );
        if let Some(da) = &d_prev {
            gemm(
                n,
                fan_in,
                fan_out,
                da,
                fan_in as isize,
                1,
                w,
                1,
                fan_in as isize,
                1.0,
                &mut dz,
            );
        }
        if l != last {
            for (d, a) in dz.iter_mut().zip(&cache.acts[l + 1]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        d_prev = Some(dz);
        off += (fan_in + 1) * fan_out;
    }
    d_prev.unwrap_or_default()
}

fn layer_offsets(layers: &[(usize, usize)]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(layers.len());
    let mut off = 0;
    for &(i, o) in layers {
        offs.push(off);
        off += (i + 1) * o;
    }
    offs
}

/// Diagonal Gaussian over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAction {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianAction {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::dim("gaussian log-std", mean.len(), log_std.len()));
        }
        ensure_finite("gaussian mean", &mean)?;
        ensure_finite("gaussian log-std", &log_std)?;
        Ok(GaussianAction { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Log-density of `action` under `g`.
pub fn gaussian_log_prob(g: &GaussianAction, action: &[f64]) -> Result<f64> {
    if action.len() != g.dim() {
        return Err(Error::dim("action", g.dim(), action.len()));
    }
    ensure_finite("action", action)?;
    Ok(log_prob_raw(&g.mean, &g.log_std, action))
}

pub(crate) fn log_prob_raw(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((m, ls), a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) * (-ls).exp();
        lp += -0.5 * z * z - ls - HALF_LN_2PI;
    }
    lp
}

/// KL(p || q) for diagonal Gaussians.
pub fn gaussian_kl(p: &GaussianAction, q: &GaussianAction) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim("gaussian pair", p.dim(), q.dim()));
    }
    ensure_finite("gaussian p", &p.mean)?;
    ensure_finite("gaussian q", &q.mean)?;
    ensure_finite("gaussian p log-std", &p.log_std)?;
    ensure_finite("gaussian q log-std", &q.log_std)?;
    Ok(kl_raw(&p.mean, &p.log_std, &q.mean, &q.log_std))
}

pub(crate) fn kl_raw(mp: &[f64], lp: &[f64], mq: &[f64], lq: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mp.len() {
        let var_p = (2.0 * lp[i]).exp();
        let var_q = (2.0 * lq[i]).exp();
        let dm = mp[i] - mq[i];
        kl += lq[i] - lp[i] + (var_p + dm * dm) / (2.0 * var_q) - 0.5;
    }
    kl
}

pub fn gaussian_entropy(g: &GaussianAction) -> Result<f64> {
    ensure_finite("gaussian log-std", &g.log_std)?;
    Ok(g.log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ParameterVector {
        // 2 -> 2 -> 1, hand-picked.
        let spec = MlpSpec::new(2, vec![2], 1).unwrap();
        #[rustfmt::skip]
        let values = vec![
            1.0, -2.0,   0.5, 1.0,   // W1 rows
            0.1, -0.3,               // b1
            2.0, -1.0,               // W2
            0.25,                    // b2
        ];
        ParameterVector { spec, values, log_std: None }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = ParameterVector::zeros(MlpSpec::with_default_hidden(4, 3).unwrap(), true);
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_hidden_layer_passes_positive_input() {
        // 2 -> 2 (I) -> 2 (I): ReLU is the identity on positive inputs.
        let spec = MlpSpec::new(2, vec![2], 2).unwrap();
        let values = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let p = ParameterVector { spec, values, log_std: None };
        assert_eq!(p.forward(&[0.3, 2.5]).unwrap(), vec![0.3, 2.5]);
    }

    #[test]
    fn hand_computed_two_layer_example() {
        // x = (1, 0.5): h = relu((1 - 1 + 0.1, 0.5 + 0.5 - 0.3)) = (0.1, 0.7)
        // y = 2*0.1 - 0.7 + 0.25 = -0.25
        let out = tiny().forward(&[1.0, 0.5]).unwrap();
        assert!((out[0] + 0.25).abs() < 1e-15);
        // x = (-1, 1): pre = (-1 - 2 + 0.1, -0.5 + 1 - 0.3) = (-2.9, 0.2) -> h = (0, 0.2)
        let out = tiny().forward(&[-1.0, 1.0]).unwrap();
        assert!((out[0] - (-0.2 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = tiny();
        assert!(matches!(p.forward(&[1.0]), Err(Error::Dimension { .. })));
        assert!(mlp_backward(&p, &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_of_zero_output_grad_is_zero() {
        let g = mlp_backward(&tiny(), &[0.4, -0.2], &[0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        // With the hidden layer all-positive the output is linear in W2 and
        // d y / d W2_j = h_j.
        let p = tiny();
        let g = mlp_backward(&p, &[1.0, 0.5], &[1.0]).unwrap();
        assert!((g[6] - 0.1).abs() < 1e-15);
        assert!((g[7] - 0.7).abs() < 1e-15);
        assert_eq!(g[8], 1.0);
        // First layer: d y / d W1[0][j] = w2_0 * x_j
        assert!((g[0] - 2.0).abs() < 1e-15);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jvp_matches_directional_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(3, vec![6, 5], 2).unwrap();
        let p = ParameterVector::init(spec.clone(), false, 0.5, &mut rng);
        let n = 4;
        let inputs: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tangent: Vec<f64> = (0..p.values.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = forward_batch(&spec, &p.values, &inputs, n);
        let jv = jvp_batch(&spec, &p.values, &cache, &tangent);
        let eps = 1e-6;
        let shift = |s: f64| -> Vec<f64> {
            let w: Vec<f64> = p.values.iter().zip(&tangent).map(|(w, t)| w + s * t).collect();
            forward_batch(&spec, &w, &inputs, n).output().to_vec()
        };
        let (hi, lo) = (shift(eps), shift(-eps));
        for i in 0..jv.len() {
            let fd = (hi[i] - lo[i]) / (2.0 * eps);
            assert!((fd - jv[i]).abs() < 1e-6, "{i}: {fd} vs {}", jv[i]);
        }
    }

    #[test]
    fn log_prob_reference_values() {
        let g = GaussianAction::new(vec![0.3], vec![0.0]).unwrap();
        assert!((gaussian_log_prob(&g, &[0.3]).unwrap() + 0.918_938_5).abs() < 1e-7);
        assert!((gaussian_log_prob(&g, &[1.3]).unwrap() + 1.418_938_5).abs() < 1e-7);
        let g2 = GaussianAction::new(vec![0.0], vec![0.5f64.ln()]).unwrap();
        let expect = -0.918_938_533_204_672_7 - 0.5 - 0.5f64.ln();
        assert!((gaussian_log_prob(&g2, &[0.5]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_density_product() {
        let g = GaussianAction::new(vec![0.2, -1.1], vec![-0.3, 0.4]).unwrap();
        let a = [0.9, -0.4];
        let dens: f64 = (0..2)
            .map(|i| {
                let s = g.log_std[i].exp();
                let z = (a[i] - g.mean[i]) / s;
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .product();
        assert!((gaussian_log_prob(&g, &a).unwrap() - dens.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        assert!(GaussianAction::new(vec![f64::NAN], vec![0.0]).is_err());
        let g = GaussianAction::new(vec![0.0], vec![0.0]).unwrap();
        assert!(gaussian_log_prob(&g, &[f64::INFINITY]).is_err());
        let bad = GaussianAction { mean: vec![0.0], log_std: vec![f64::NAN] };
        assert!(gaussian_kl(&g, &bad).is_err());
        assert!(gaussian_entropy(&bad).is_err());
    }

    #[test]
    fn kl_reference_values() {
        let p = GaussianAction::new(vec![1.0], vec![0.0]).unwrap();
        let q = GaussianAction::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        assert!((gaussian_kl(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_numerical_integration() {
        // KL(N(0,4) || N(0,1)) by trapezoidal quadrature of p log(p/q).
        let p = GaussianAction::new(vec![0.0], vec![2f64.ln()]).unwrap();
        let q = GaussianAction::new(vec![0.0], vec![0.0]).unwrap();
        let log_dens = |x: f64, s: f64| -0.5 * (x / s).powi(2) - s.ln() - HALF_LN_2PI;
        let (lo, hi, steps) = (-40.0, 40.0, 400_000);
        let h = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for k in 0..=steps {
            let x = lo + k as f64 * h;
            let lp = log_dens(x, 2.0);
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            integral += w * lp.exp() * (lp - log_dens(x, 1.0));
        }
        integral *= h;
        // frozen oracle value (closed form 1.5 - ln 2)
        assert!((integral - 0.806_852_819_440_055).abs() < 1e-6);
        assert!((gaussian_kl(&p, &q).unwrap() - integral).abs() < 1e-6);
    }

    #[test]
    fn entropy_reference_values() {
        let g = GaussianAction::new(vec![0.0], vec![0.0]).unwrap();
        assert!((gaussian_entropy(&g).unwrap() - 1.418_938_5).abs() < 1e-7);
        let g2 = GaussianAction::new(vec![0.0], vec![2f64.ln()]).unwrap();
        let d = gaussian_entropy(&g2).unwrap() - gaussian_entropy(&g).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-15);
        let g3 = GaussianAction::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!((gaussian_entropy(&g3).unwrap() - 2.837_877).abs() < 1e-6);
    }

    #[test]
    fn flat_length_of_reference_policy() {
        let spec = MlpSpec::with_default_hidden(5, 2).unwrap();
        let p = ParameterVector::zeros(spec, true);
        // (5+1)*128 + (128+1)*128 + (128+1)*2 + 2
        assert_eq!(p.flat_len(), 17540);
        assert_eq!(p.flatten(), vec![0.0; 17540]);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let spec = MlpSpec::new(2, vec![3], 1).unwrap();
        assert!(ParameterVector::unflatten(spec, true, &[0.0; 5]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(0, vec![4], 1).is_err());
        assert!(MlpSpec::new(2, vec![], 1).is_err());
        assert!(MlpSpec::new(2, vec![4, 0], 1).is_err());
        assert_eq!(MlpSpec::with_default_hidden(3, 1).unwrap().hidden_dims, vec![128, 128]);
    }

    #[test]
    fn init_scales_final_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(3, vec![8], 2).unwrap();
        let p = ParameterVector::init(spec, true, 0.01, &mut rng);
        let row: f64 = p.values[32..40].iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!((row - 0.01).abs() < 1e-12);
        assert_eq!(p.log_std, Some(vec![0.0, 0.0]));
        p.validate().unwrap();
    }
}
