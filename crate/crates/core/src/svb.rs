//! AlphaSVB: stochastic ascent on the Monte Carlo variational Rényi bound.
//!
//! Each iteration draws `K` samples `(θ, z)` from the current mean-field law,
//! turns their log importance ratios into normalised weights
//! `softmax((1 − α)·log r)`, and ascends the weighted sum of
//! `∇ log p(θ, z, Y)/q(θ)` in the unconstrained coordinates
//! `(μ, log σ, logit γ)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cavi::initial_params;
use crate::error::{Error, Result};
use crate::model_core::{
    clamp_gamma, gaussian_logpdf, laplace_logpdf, logistic, logit, DatasetView, PriorSpec, VariationalParams, LN_2PI,
};

/// Below this distance from 1 the bound is replaced by its ELBO limit.
pub const ALPHA_ONE_BAND: f64 = 1e-6;
/// The bound is recorded in the trace every this many iterations.
pub const TRACE_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvbConfig {
    pub alpha: f64,
    pub k_samples: usize,
    pub max_iters: usize,
    pub lr_mu: f64,
    pub lr_sigma: f64,
    pub lr_gamma: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SvbConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            k_samples: 64,
            max_iters: 3000,
            lr_mu: 1e-2,
            lr_sigma: 1e-2,
            lr_gamma: 1e-2,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl SvbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) || self.alpha == 1.0 {
            return Err(Error::Domain(format!(
                "alpha must be positive and != 1, got {}",
                self.alpha
            )));
        }
        if self.k_samples == 0 {
            return Err(Error::InvalidConfig("k_samples must be at least 1".into()));
        }
        // zero learning rates are allowed; they freeze the parameters
        for (name, v) in [
            ("lr_mu", self.lr_mu),
            ("lr_sigma", self.lr_sigma),
            ("lr_gamma", self.lr_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One draw from the mean-field law; `z[i] == false` implies `theta[i] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvbSample {
    pub theta: Vec<f64>,
    pub z: Vec<bool>,
}

/// `(μ, η = log σ, τ = logit γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
}

impl UnconstrainedParams {
    pub fn from_params(params: &VariationalParams) -> Self {
        Self {
            mu: params.mu.clone(),
            eta: params.sigma.iter().map(|s| s.ln()).collect(),
            tau: params.gamma.iter().map(|&g| logit(g)).collect(),
        }
    }

    pub fn to_params(&self) -> VariationalParams {
        VariationalParams {
            mu: self.mu.clone(),
            sigma: self.eta.iter().map(|e| e.exp()).collect(),
            gamma: self.tau.iter().map(|&t| clamp_gamma(logistic(t))).collect(),
        }
    }
}

/// Draws one sample: `zᵢ ~ Bernoulli(γᵢ)`, then `θᵢ ~ N(μᵢ, σᵢ²)` when active.
pub fn sample_one<R: Rng + ?Sized>(params: &VariationalParams, rng: &mut R) -> SvbSample {
    let p = params.len();
    let mut theta = vec![0.0; p];
    let mut z = vec![false; p];
    for i in 0..p {
        if rng.random::<f64>() < params.gamma[i] {
            z[i] = true;
            let e: f64 = rng.sample(StandardNormal);
            theta[i] = params.mu[i] + params.sigma[i] * e;
        }
    }
    SvbSample { theta, z }
}

/// `K` independent samples drawn sequentially from `rng`.
pub fn sample_batch<R: Rng + ?Sized>(params: &VariationalParams, k: usize, rng: &mut R) -> Vec<SvbSample> {
    (0..k).map(|_| sample_one(params, rng)).collect()
}

/// `log p(θ, z, Y) − log q(θ, z)`, conditional on `z` so the Dirac atoms
/// cancel.
pub fn log_ratio(sample: &SvbSample, view: &DatasetView, prior: &PriorSpec, params: &VariationalParams) -> Result<f64> {
    let n = view.n() as f64;
    let nv = prior.noise_var();
    let w = prior.w_bar();
    let (ln_w, ln_1mw) = (w.ln(), (-w).ln_1p());

    let rss = residual_sum_of_squares(view, sample);
    let mut total = -0.5 * n * (LN_2PI + nv.ln()) - rss / (2.0 * nv);
    for i in 0..sample.theta.len() {
        if sample.z[i] {
            total += laplace_logpdf(sample.theta[i], prior.lambda())? + ln_w;
            total -= params.gamma[i].ln() + gaussian_logpdf(sample.theta[i], params.mu[i], params.sigma[i])?;
        } else {
            total += ln_1mw - (-params.gamma[i]).ln_1p();
        }
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NumericOverflow)
    }
}

/// `‖Y − Xθ‖²` via the cached cross-products, touching only active columns.
fn residual_sum_of_squares(view: &DatasetView, sample: &SvbSample) -> f64 {
    let active: Vec<usize> = (0..sample.z.len()).filter(|&i| sample.z[i]).collect();
    let gram = view.gram();
    let xty = view.xty();
    let mut quad = 0.0;
    let mut lin = 0.0;
    for (a, &i) in active.iter().enumerate() {
        let ti = sample.theta[i];
        lin += xty[i] * ti;
        let row = gram.row(i);
        let mut acc = 0.5 * row[i] * ti;
        for &j in &active[a + 1..] {
            acc += row[j] * sample.theta[j];
        }
        quad += 2.0 * ti * acc;
    }
    (view.yty() - 2.0 * lin + quad).max(0.0)
}

/// Normalised importance weights `softmax((1 − α)·log r)`.
pub fn importance_weights(log_ratios: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if log_ratios.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let scale = 1.0 - alpha;
    let scaled: Vec<f64> = log_ratios
        .iter()
        .map(|&l| if scale == 0.0 { 0.0 } else { scale * l })
        .collect();
    if scaled.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateBatch);
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let mut weights: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Gradient of `log q(θᵢ | zᵢ)` with respect to `(μᵢ, σᵢ, γᵢ)`.
pub fn grad_log_q(sample: &SvbSample, params: &VariationalParams, i: usize) -> (f64, f64, f64) {
    let (mu, sigma, gamma) = (params.mu[i], params.sigma[i], params.gamma[i]);
    if sample.z[i] {
        let d = sample.theta[i] - mu;
        let s2 = sigma * sigma;
        (d / s2, (d * d - s2) / (s2 * sigma), 1.0 / gamma)
    } else {
        (0.0, 0.0, -1.0 / (1.0 - gamma))
    }
}

/// Gradient of the bound in `(μ, σ, γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VrGradient {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn batch_log_ratios(
    batch: &[SvbSample],
    view: &DatasetView,
    prior: &PriorSpec,
    params: &VariationalParams,
) -> Result<Vec<f64>> {
    batch.iter().map(|s| log_ratio(s, view, prior, params)).collect()
}

fn weighted_gradient(batch: &[SvbSample], weights: &[f64], params: &VariationalParams, clip: f64) -> VrGradient {
    let p = params.len();
    let mut g = VrGradient {
        mu: vec![0.0; p],
        sigma: vec![0.0; p],
        gamma: vec![0.0; p],
    };
    for (sample, &w) in batch.iter().zip(weights) {
        for i in 0..p {
            let (dm, ds, dg) = grad_log_q(sample, params, i);
            // the model terms do not depend on the variational parameters
            g.mu[i] -= w * dm;
            g.sigma[i] -= w * ds;
            g.gamma[i] -= w * dg;
        }
    }
    for v in g.mu.iter_mut().chain(g.sigma.iter_mut()).chain(g.gamma.iter_mut()) {
        *v = v.clamp(-clip, clip);
    }
    g
}

/// Weighted gradient of the bound on a fixed batch, clipped componentwise to
/// `[-clip, clip]`.
pub fn vr_gradient(
    batch: &[SvbSample],
    view: &DatasetView,
    prior: &PriorSpec,
    params: &VariationalParams,
    alpha: f64,
    clip: f64,
) -> Result<VrGradient> {
    let lr = batch_log_ratios(batch, view, prior, params)?;
    let w = importance_weights(&lr, alpha)?;
    Ok(weighted_gradient(batch, &w, params, clip))
}

/// `log mean exp(x)`, computed with a max shift.
fn log_mean_exp(xs: &[f64]) -> Result<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || xs.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateBatch);
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + (s / xs.len() as f64).ln())
}

/// Bound from precomputed log ratios; the ELBO average near `α = 1`.
pub fn vr_bound_from_log_ratios(log_ratios: &[f64], alpha: f64) -> Result<f64> {
    if log_ratios.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    if (alpha - 1.0).abs() < ALPHA_ONE_BAND {
        if log_ratios.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBatch);
        }
        return Ok(log_ratios.iter().sum::<f64>() / log_ratios.len() as f64);
    }
    let scale = 1.0 - alpha;
    let scaled: Vec<f64> = log_ratios.iter().map(|&l| scale * l).collect();
    Ok(log_mean_exp(&scaled)? / scale)
}

/// Monte Carlo bound on a fixed batch, evaluated at `params`.
pub fn vr_bound_on_batch(
    batch: &[SvbSample],
    view: &DatasetView,
    prior: &PriorSpec,
    params: &VariationalParams,
    alpha: f64,
) -> Result<f64> {
    vr_bound_from_log_ratios(&batch_log_ratios(batch, view, prior, params)?, alpha)
}

/// ELBO estimate `(1/K) Σ log r` on a fixed batch.
pub fn elbo_on_batch(
    batch: &[SvbSample],
    view: &DatasetView,
    prior: &PriorSpec,
    params: &VariationalParams,
) -> Result<f64> {
    let lr = batch_log_ratios(batch, view, prior, params)?;
    Ok(lr.iter().sum::<f64>() / lr.len() as f64)
}

/// Draws `k` samples and returns the Monte Carlo Rényi bound.
pub fn estimate_vr_bound<R: Rng + ?Sized>(
    params: &VariationalParams,
    view: &DatasetView,
    prior: &PriorSpec,
    alpha: f64,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::DegenerateBatch);
    }
    let batch = sample_batch(params, k, rng);
    vr_bound_on_batch(&batch, view, prior, params, alpha)
}

/// Sign that turns [`vr_gradient`] into an ascent direction for the bound.
///
/// With self-normalised weights, the fixed-sample gradient has expectation
/// `−((1 − α)/α)·∇L` (the score term through the sampling law is absent), so
/// it points uphill for `α > 1` and downhill for `α < 1`.
pub fn ascent_sign(alpha: f64) -> f64 {
    if alpha > 1.0 {
        1.0
    } else {
        -1.0
    }
}

/// Output of [`run_svb`].
#[derive(Debug, Clone, PartialEq)]
pub struct SvbFit {
    pub params: VariationalParams,
    /// `(iteration, bound)` recorded every [`TRACE_EVERY`] iterations,
    /// evaluated on that iteration's batch.
    pub trace: Vec<(usize, f64)>,
    pub iterations: usize,
    pub diverged: bool,
}

/// SplitMix64 finaliser, used to derive per-sample seeds.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG for sample `j` of iteration `iter`; independent of evaluation order.
pub fn sample_rng(seed: u64, iter: usize, j: usize) -> ChaCha8Rng {
    let s = mix64(mix64(mix64(seed) ^ iter as u64) ^ j as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Runs AlphaSVB for `max_iters` iterations from the marginal least-squares start.
pub fn run_svb(view: &DatasetView, prior: &PriorSpec, cfg: &SvbConfig) -> Result<SvbFit> {
    run_svb_from(view, prior, cfg, initial_params(view))
}

pub fn run_svb_from(view: &DatasetView, prior: &PriorSpec, cfg: &SvbConfig, init: VariationalParams) -> Result<SvbFit> {
    cfg.validate()?;
    if init.len() != view.p() {
        return Err(Error::Shape(format!(
            "initial params have length {} but p = {}",
            init.len(),
            view.p()
        )));
    }
    let p = view.p();
    let mut params = init;
    let mut free = UnconstrainedParams::from_params(&params);
    let mut trace = Vec::new();

    for iter in 0..cfg.max_iters {
        let batch: Vec<SvbSample> = (0..cfg.k_samples)
            .map(|j| sample_one(&params, &mut sample_rng(cfg.seed, iter, j)))
            .collect();
        let log_ratios = batch_log_ratios(&batch, view, prior, &params)?;
        let weights = importance_weights(&log_ratios, cfg.alpha)?;
        if iter % TRACE_EVERY == 0 {
            trace.push((iter, vr_bound_from_log_ratios(&log_ratios, cfg.alpha)?));
        }
        let grad = weighted_gradient(&batch, &weights, &params, cfg.grad_clip);
        let dir = ascent_sign(cfg.alpha);

        for i in 0..p {
            let (s, g) = (params.sigma[i], params.gamma[i]);
            free.mu[i] += dir * cfg.lr_mu * grad.mu[i];
            free.eta[i] += dir * cfg.lr_sigma * s * grad.sigma[i];
            free.tau[i] += dir * cfg.lr_gamma * g * (1.0 - g) * grad.gamma[i];
        }
        // keep τ where the clamped γ round-trips
        let tau_max = logit(1.0 - crate::model_core::GAMMA_FLOOR);
        for t in &mut free.tau {
            *t = t.clamp(-tau_max, tau_max);
        }
        let next = free.to_params();
        if !next.is_valid() {
            return Ok(SvbFit {
                params,
                trace,
                iterations: iter,
                diverged: true,
            });
        }
        params = next;
    }

    Ok(SvbFit {
        params,
        trace,
        iterations: cfg.max_iters,
        diverged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_core::{precompute, GAMMA_FLOOR};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn random_view(n: usize, p: usize, seed: u64) -> DatasetView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
        precompute(x, y).unwrap()
    }

    fn random_params(p: usize, rng: &mut ChaCha8Rng) -> VariationalParams {
        VariationalParams::new(
            (0..p).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..p).map(|_| rng.random_range(0.2..1.5)).collect(),
            (0..p).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap()
    }

    /// Log ratio assembled term by term from the joint and the variational
    /// density, with the residual computed from `X` directly.
    fn direct_log_ratio(s: &SvbSample, view: &DatasetView, prior: &PriorSpec, q: &VariationalParams) -> f64 {
        let x = view.x();
        let (n, p) = x.dim();
        let mut rss = 0.0;
        for r in 0..n {
            let fit: f64 = (0..p).map(|c| x[[r, c]] * s.theta[c]).sum();
            rss += (view.y()[r] - fit).powi(2);
        }
        let w = prior.w_bar();
        let lam = prior.lambda();
        let mut v = -(n as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln() - 0.5 * rss;
        for i in 0..p {
            let zi = if s.z[i] { 1.0 } else { 0.0 };
            v += zi * ((lam / 2.0).ln() - lam * s.theta[i].abs());
            v += zi * w.ln() + (1.0 - zi) * (1.0 - w).ln();
            let lq = if s.z[i] {
                let d = s.theta[i] - q.mu[i];
                q.gamma[i].ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - q.sigma[i].ln()
                    - d * d / (2.0 * q.sigma[i] * q.sigma[i])
            } else {
                (1.0 - q.gamma[i]).ln()
            };
            v -= lq;
        }
        v
    }

    #[test]
    fn degenerate_spike_samples_are_zero() {
        let params = VariationalParams::new(vec![1.0; 4], vec![1.0; 4], vec![0.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&params, 1000, &mut rng);
        for s in &batch {
            assert!(s.z.iter().all(|&z| !z));
            assert!(s.theta.iter().all(|&t| t == 0.0));
        }
    }

    #[test]
    fn slab_samples_center_on_mu() {
        let params = VariationalParams::new(vec![1.5, -0.5], vec![0.7, 2.0], vec![1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 100_000;
        let batch = sample_batch(&params, k, &mut rng);
        for i in 0..2 {
            let mean = batch.iter().map(|s| s.theta[i]).sum::<f64>() / k as f64;
            assert!((mean - params.mu[i]).abs() < 4.0 * params.sigma[i] / (k as f64).sqrt());
        }
        for s in &batch {
            for i in 0..2 {
                if !s.z[i] {
                    assert_eq!(s.theta[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn inclusion_frequency_matches_gamma() {
        let params = VariationalParams::new(vec![0.0], vec![1.0], vec![0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&params, 100_000, &mut rng);
        let freq = batch.iter().filter(|s| s.z[0]).count() as f64 / 1e5;
        assert!((0.294..=0.306).contains(&freq), "{freq}");
    }

    #[test]
    fn log_ratio_spike_only() {
        let view = precompute(array![[1.0], [2.0]], array![0.5, -1.0]).unwrap();
        let params = VariationalParams::new(vec![0.3], vec![1.0], vec![0.2]).unwrap();
        let prior = PriorSpec::new(1.0, 1.0, 4.0).unwrap(); // w = 0.2 = γ
        let s = SvbSample {
            theta: vec![0.0],
            z: vec![false],
        };
        let loglik = -LN_2PI - 0.5 * (0.25 + 1.0);
        assert_abs_diff_eq!(log_ratio(&s, &view, &prior, &params).unwrap(), loglik, epsilon = 1e-12);
    }

    #[test]
    fn log_ratio_slab_decomposition() {
        let view = precompute(array![[1.0], [2.0], [-1.0]], array![0.5, -1.0, 2.0]).unwrap();
        let params = VariationalParams::new(vec![0.3], vec![0.8], vec![0.6]).unwrap();
        let prior = PriorSpec::new(1.5, 1.0, 3.0).unwrap();
        let th: f64 = -0.4;
        let s = SvbSample {
            theta: vec![th],
            z: vec![true],
        };
        let rss: f64 = [(0.5 - th), (-1.0 - 2.0 * th), (2.0 + th)].iter().map(|r| r * r).sum();
        let loglik = -1.5 * LN_2PI - 0.5 * rss;
        let want = loglik + laplace_logpdf(th, 1.5).unwrap() + 0.25f64.ln()
            - 0.6f64.ln()
            - gaussian_logpdf(th, 0.3, 0.8).unwrap();
        assert_abs_diff_eq!(log_ratio(&s, &view, &prior, &params).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn log_ratio_matches_direct_assembly() {
        let view = random_view(7, 3, 13);
        let prior = PriorSpec::new(0.8, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let params = random_params(3, &mut rng);
            let s = sample_one(&params, &mut rng);
            let got = log_ratio(&s, &view, &prior, &params).unwrap();
            let want = direct_log_ratio(&s, &view, &prior, &params);
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn weights_examples() {
        let w = importance_weights(&[0.7, 0.7, 0.7], 0.5).unwrap();
        for v in w {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        for alpha in [1.0 + 1e-9, 1.0 - 1e-9] {
            let w = importance_weights(&[-3.0, 10.0, 250.0], alpha).unwrap();
            for v in w {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }
        // softmax(0, 0.5, 1)
        let w = importance_weights(&[0.0, 1.0, 2.0], 0.5).unwrap();
        let want = [0.186_323_723_225_847_6, 0.307_195_885_718_498_4, 0.506_480_391_055_654];
        for (a, b) in w.iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(matches!(
            importance_weights(&[f64::NEG_INFINITY; 3], 0.5),
            Err(Error::DegenerateBatch)
        ));
        assert!(importance_weights(&[], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn weights_normalised(ls in proptest::collection::vec(-1e4f64..1e4, 1..64),
                              alpha in prop::sample::select(vec![0.01, 0.5, 0.9, 1.1, 2.0, 5.0])) {
            let w = importance_weights(&ls, alpha).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn reparameterisation_round_trip(mu in -50.0f64..50.0, sigma in 1e-3f64..1e3, gamma in 1e-6f64..(1.0 - 1e-6)) {
            let q = VariationalParams::new(vec![mu], vec![sigma], vec![gamma]).unwrap();
            let back = UnconstrainedParams::from_params(&q).to_params();
            prop_assert_eq!(back.mu[0], mu);
            prop_assert!((back.sigma[0] - sigma).abs() <= 1e-12 * sigma.max(1.0));
            prop_assert!((back.gamma[0] - gamma).abs() <= 1e-12);
        }
    }

    #[test]
    fn grad_log_q_branches() {
        let params = VariationalParams::new(vec![0.5], vec![2.0], vec![0.25]).unwrap();
        let off = SvbSample {
            theta: vec![0.0],
            z: vec![false],
        };
        assert_eq!(grad_log_q(&off, &params, 0), (0.0, 0.0, -1.0 / 0.75));
        let on = SvbSample {
            theta: vec![0.5],
            z: vec![true],
        };
        assert_eq!(grad_log_q(&on, &params, 0), (0.0, -0.5, 4.0));
    }

    #[test]
    fn single_sample_gradient_is_negated_score() {
        let view = random_view(5, 3, 4);
        let prior = PriorSpec::new(1.0, 1.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(3, &mut rng);
        let s = sample_one(&params, &mut rng);
        let g = vr_gradient(std::slice::from_ref(&s), &view, &prior, &params, 0.7, 1e9).unwrap();
        for i in 0..3 {
            let (dm, ds, dg) = grad_log_q(&s, &params, i);
            assert_eq!((g.mu[i], g.sigma[i], g.gamma[i]), (-dm, -ds, -dg));
        }
        let clipped = vr_gradient(std::slice::from_ref(&s), &view, &prior, &params, 0.7, 0.1).unwrap();
        assert!(clipped
            .mu
            .iter()
            .chain(&clipped.sigma)
            .chain(&clipped.gamma)
            .all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn spike_only_batch_gradient() {
        let view = random_view(5, 2, 5);
        let prior = PriorSpec::new(1.0, 1.0, 2.0).unwrap();
        let params = VariationalParams::new(vec![1.0, 2.0], vec![1.0, 1.0], vec![0.3, 0.6]).unwrap();
        let batch: Vec<SvbSample> = (0..10)
            .map(|_| SvbSample {
                theta: vec![0.0, 0.0],
                z: vec![false, false],
            })
            .collect();
        let g = vr_gradient(&batch, &view, &prior, &params, 0.5, 1e9).unwrap();
        assert_eq!(g.mu, vec![0.0, 0.0]);
        assert_eq!(g.sigma, vec![0.0, 0.0]);
        for i in 0..2 {
            assert_abs_diff_eq!(g.gamma[i], 1.0 / (1.0 - params.gamma[i]), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_sample_bound_is_log_ratio() {
        let view = random_view(6, 2, 6);
        let prior = PriorSpec::new(1.0, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_params(2, &mut rng);
        let s = sample_one(&params, &mut rng);
        let lr = log_ratio(&s, &view, &prior, &params).unwrap();
        for alpha in [0.1, 0.9, 1.5, 3.0] {
            let b = vr_bound_on_batch(std::slice::from_ref(&s), &view, &prior, &params, alpha).unwrap();
            assert!((b - lr).abs() < 1e-9 * lr.abs().max(1.0));
        }
    }

    #[test]
    fn bound_non_increasing_in_alpha() {
        let view = random_view(10, 3, 7);
        let prior = PriorSpec::new(1.0, 1.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let params = random_params(3, &mut rng);
            let batch = sample_batch(&params, 50, &mut rng);
            let vals: Vec<f64> = [0.5, 0.9, 1.1, 2.0]
                .iter()
                .map(|&a| vr_bound_on_batch(&batch, &view, &prior, &params, a).unwrap())
                .collect();
            for w in vals.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{vals:?}");
            }
        }
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let view = random_view(20, 4, 8);
        let prior = PriorSpec::default_for(4);
        let cfg = SvbConfig {
            lr_mu: 0.0,
            lr_sigma: 0.0,
            lr_gamma: 0.0,
            max_iters: 50,
            seed: 8,
            ..SvbConfig::default()
        };
        let fit = run_svb(&view, &prior, &cfg).unwrap();
        let init = initial_params(&view);
        assert_eq!(fit.params.mu, init.mu);
        assert_eq!(fit.params.sigma, init.sigma);
        assert!(fit
            .params
            .gamma
            .iter()
            .zip(&init.gamma)
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(fit.trace.len(), 5);
    }

    #[test]
    fn run_is_reproducible() {
        let view = random_view(30, 6, 9);
        let prior = PriorSpec::default_for(6);
        let cfg = SvbConfig {
            max_iters: 200,
            seed: 99,
            ..SvbConfig::default()
        };
        let a = run_svb(&view, &prior, &cfg).unwrap();
        let b = run_svb(&view, &prior, &cfg).unwrap();
        assert_eq!(a, b);
        let c = run_svb(&view, &prior, &SvbConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn config_validation() {
        assert!(SvbConfig::default().validate().is_ok());
        assert!(SvbConfig {
            alpha: 1.0,
            ..SvbConfig::default()
        }
        .validate()
        .is_err());
        assert!(SvbConfig {
            k_samples: 0,
            ..SvbConfig::default()
        }
        .validate()
        .is_err());
        assert!(SvbConfig {
            grad_clip: 0.0,
            ..SvbConfig::default()
        }
        .validate()
        .is_err());
    }

    /// Conditional log density of the variational law at one coordinate.
    fn log_q_coord(theta: f64, z: bool, mu: f64, sigma: f64, gamma: f64) -> f64 {
        if z {
            gamma.ln() - 0.5 * LN_2PI - sigma.ln() - (theta - mu).powi(2) / (2.0 * sigma * sigma)
        } else {
            (1.0 - gamma).ln()
        }
    }

    proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(1000))]
        #[test]
        fn grad_log_q_slab_matches_finite_differences(theta in -4.0f64..4.0, mu in -3.0f64..3.0,
                                                     sigma in 0.3f64..3.0, gamma in 0.05f64..0.95) {
            check_grad_fd(theta, true, mu, sigma, gamma)?;
        }

        #[test]
        fn grad_log_q_spike_matches_finite_differences(mu in -3.0f64..3.0, sigma in 0.3f64..3.0,
                                                      gamma in 0.05f64..0.95) {
            check_grad_fd(0.0, false, mu, sigma, gamma)?;
        }
    }

    fn check_grad_fd(
        theta: f64,
        z: bool,
        mu: f64,
        sigma: f64,
        gamma: f64,
    ) -> std::result::Result<(), proptest::test_runner::TestCaseError> {
        let h = 1e-6;
        let q = VariationalParams::new(vec![mu], vec![sigma], vec![gamma]).unwrap();
        let s = SvbSample {
            theta: vec![theta],
            z: vec![z],
        };
        let (dm, ds, dg) = grad_log_q(&s, &q, 0);
        let f = |m: f64, sd: f64, g: f64| log_q_coord(theta, z, m, sd, g);
        let fm = (f(mu + h, sigma, gamma) - f(mu - h, sigma, gamma)) / (2.0 * h);
        let fs = (f(mu, sigma + h, gamma) - f(mu, sigma - h, gamma)) / (2.0 * h);
        let fg = (f(mu, sigma, gamma + h) - f(mu, sigma, gamma - h)) / (2.0 * h);
        prop_assert!((dm - fm).abs() <= 1e-4, "mu {} vs {}", dm, fm);
        prop_assert!((ds - fs).abs() <= 1e-4, "sigma {} vs {}", ds, fs);
        prop_assert!((dg - fg).abs() <= 1e-4, "gamma {} vs {}", dg, fg);
        Ok(())
    }

    /// Central differences of the bound on one frozen batch, perturbing a
    /// single parameter with the draws held fixed.
    #[test]
    fn gradient_matches_fixed_batch_finite_differences() {
        let view = random_view(15, 2, 17);
        let prior = PriorSpec::new(1.0, 1.0, 2.0).unwrap();
        let params = VariationalParams::new(vec![0.4, -0.8], vec![0.6, 0.9], vec![0.6, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = sample_batch(&params, 500, &mut rng);
        let alpha = 0.9;
        let g = vr_gradient(&batch, &view, &prior, &params, alpha, f64::INFINITY).unwrap();
        let bound = |q: &VariationalParams| vr_bound_on_batch(&batch, &view, &prior, q, alpha).unwrap();
        let h = 1e-4;
        for i in 0..2 {
            for (which, analytic) in [(0, g.mu[i]), (1, g.sigma[i]), (2, g.gamma[i])] {
                let bump = |d: f64| {
                    let mut q = params.clone();
                    match which {
                        0 => q.mu[i] += d,
                        1 => q.sigma[i] += d,
                        _ => q.gamma[i] += d,
                    }
                    bound(&q)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() <= 0.05 * analytic.abs().max(1e-3),
                    "param {which}, coord {i}: {fd} vs {analytic}"
                );
            }
        }
    }

    /// `(1/(1−α)) log ∫ q(θ)^α p(θ, Y)^{1−α} dθ` for one slab coordinate,
    /// by the trapezoid rule.
    fn renyi_integral_p1(alpha: f64, y: f64, mu: f64, sigma: f64, lambda: f64, w: f64) -> f64 {
        let (lo, hi, m) = (-30.0, 30.0, 600_000);
        let step = (hi - lo) / m as f64;
        let mut acc = 0.0;
        for k in 0..=m {
            let t = lo + k as f64 * step;
            let log_q = -0.5 * LN_2PI - sigma.ln() - (t - mu).powi(2) / (2.0 * sigma * sigma);
            let log_p = -0.5 * LN_2PI - 0.5 * (y - t).powi(2) + (lambda / 2.0).ln() - lambda * t.abs() + w.ln();
            let v = (alpha * log_q + (1.0 - alpha) * log_p).exp();
            acc += if k == 0 || k == m { 0.5 * v } else { v };
        }
        (acc * step).ln() / (1.0 - alpha)
    }

    #[test]
    fn bound_matches_quadrature_for_single_slab() {
        let view = precompute(array![[1.0]], array![0.0]).unwrap();
        let prior = PriorSpec::new(1.0, 1.0, 1.0).unwrap();
        let params = VariationalParams::new(vec![0.0], vec![1.0], vec![1.0]).unwrap();
        let k = 100_000;
        for (alpha, seed) in [(0.5, 1u64), (0.9, 2), (2.0, 3)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_batch(&params, k, &mut rng);
            let lr = batch_log_ratios(&batch, &view, &prior, &params).unwrap();
            let est = vr_bound_from_log_ratios(&lr, alpha).unwrap();
            let exact = renyi_integral_p1(alpha, 0.0, 0.0, 1.0, 1.0, 0.5);
            // delta-method standard error of (1/(1−α)) log mean(r^{1−α})
            let vals: Vec<f64> = lr.iter().map(|l| ((1.0 - alpha) * l).exp()).collect();
            let mean = vals.iter().sum::<f64>() / k as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
            let se = (var / k as f64).sqrt() / (mean * (1.0 - alpha).abs());
            assert!(
                (est - exact).abs() <= 4.0 * se + 1e-9,
                "alpha {alpha}: {est} vs {exact} (se {se})"
            );
        }
    }

    #[test]
    fn bound_near_one_equals_elbo() {
        let view = random_view(12, 3, 21);
        let prior = PriorSpec::default_for(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let params = random_params(3, &mut rng);
            let batch = sample_batch(&params, 64, &mut rng);
            let elbo = elbo_on_batch(&batch, &view, &prior, &params).unwrap();
            for alpha in [1.0 + 1e-6, 1.0 - 1e-6, 1.0 + 5e-7] {
                let b = vr_bound_on_batch(&batch, &view, &prior, &params, alpha).unwrap();
                assert!((b - elbo).abs() < 1e-3 * elbo.abs(), "{b} vs {elbo}");
            }
        }
    }

    #[test]
    fn estimate_uses_fresh_draws() {
        let view = random_view(10, 2, 22);
        let prior = PriorSpec::default_for(2);
        let params = initial_params(&view);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let x = estimate_vr_bound(&params, &view, &prior, 0.5, 32, &mut a).unwrap();
        let y = estimate_vr_bound(&params, &view, &prior, 0.5, 32, &mut b).unwrap();
        assert_eq!(x, y);
        assert!(estimate_vr_bound(&params, &view, &prior, 0.5, 0, &mut a).is_err());
    }

    fn single_signal_view(theta: f64, n: usize, seed: u64) -> DatasetView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array1::from_shape_fn(n, |r| theta * x[[r, 0]] + rng.sample::<f64, _>(StandardNormal));
        precompute(x, y).unwrap()
    }

    #[test]
    fn strong_single_signal_is_included() {
        let view = single_signal_view(3.0, 200, 3);
        let prior = PriorSpec::new(1.0, 1.0, 1.0).unwrap();
        let cfg = SvbConfig {
            alpha: 0.9,
            max_iters: 2000,
            seed: 5,
            ..SvbConfig::default()
        };
        let fit = run_svb(&view, &prior, &cfg).unwrap();
        assert!(!fit.diverged);
        assert!(fit.params.gamma[0] > 0.9, "{:?}", fit.params);
        assert!((fit.params.mu[0] - 3.0).abs() < 0.2);
    }

    #[test]
    fn ascent_raises_the_bound() {
        let view = single_signal_view(1.5, 100, 4);
        let prior = PriorSpec::new(1.0, 1.0, 1.0).unwrap();
        for alpha in [0.5, 0.9, 1.5] {
            let cfg = SvbConfig {
                alpha,
                max_iters: 1000,
                seed: 6,
                ..SvbConfig::default()
            };
            let fit = run_svb(&view, &prior, &cfg).unwrap();
            let early: f64 = fit.trace[..5].iter().map(|t| t.1).sum::<f64>() / 5.0;
            let late: f64 = fit.trace[fit.trace.len() - 5..].iter().map(|t| t.1).sum::<f64>() / 5.0;
            assert!(late > early, "alpha {alpha}: {early} -> {late}");
        }
    }

    #[test]
    fn ascent_sign_follows_alpha() {
        assert_eq!(ascent_sign(0.5), -1.0);
        assert_eq!(ascent_sign(2.0), 1.0);
    }

    #[test]
    fn clamped_gamma_never_yields_infinite_gradient() {
        let params = VariationalParams::new(vec![0.0], vec![1.0], vec![1.0]).unwrap();
        assert_eq!(params.gamma[0], 1.0 - GAMMA_FLOOR);
        let off = SvbSample {
            theta: vec![0.0],
            z: vec![false],
        };
        assert!(grad_log_q(&off, &params, 0).2.is_finite());
    }
}
