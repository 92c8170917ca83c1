//! Shared domain types and log-density primitives.
//!
//! Everything here is immutable once built and safe to share between
//! threads; both solvers read a [`DatasetView`] and a [`PriorSpec`] and
//! exchange [`VariationalParams`].

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Inclusion probabilities are kept inside `[GAMMA_FLOOR, 1 - GAMMA_FLOOR]`.
pub const GAMMA_FLOOR: f64 = 1e-10;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Design matrix, response and the cross-products every update reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView {
    x: Array2<f64>,
    y: Array1<f64>,
    gram: Array2<f64>,
    xty: Array1<f64>,
    yty: f64,
}

impl DatasetView {
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// `XᵀX`, exactly symmetric.
    pub fn gram(&self) -> &Array2<f64> {
        &self.gram
    }

    /// `XᵀY`, one entry per column of `X`.
    pub fn xty(&self) -> &Array1<f64> {
        &self.xty
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Builds a [`DatasetView`], caching `XᵀX`, `XᵀY` and `YᵀY`.
pub fn precompute(x: Array2<f64>, y: Array1<f64>) -> Result<DatasetView> {
    let (n, p) = x.dim();
    if n == 0 || p == 0 {
        return Err(Error::Shape(format!("design matrix is {n}x{p}")));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("X has {n} rows but Y has length {}", y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }

    let mut gram = x.t().dot(&x);
    // mirror the upper triangle so the cache is bitwise symmetric
    for i in 0..p {
        for j in (i + 1)..p {
            gram[[j, i]] = gram[[i, j]];
        }
    }
    let xty = x.t().dot(&y);
    let yty = y.dot(&y);

    Ok(DatasetView { x, y, gram, xty, yty })
}

/// Mean-field spike-and-slab parameters: coordinate `i` is
/// `γᵢ·N(μᵢ, σᵢ²) + (1 − γᵢ)·δ₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl VariationalParams {
    /// Validates lengths and `σ > 0`; `γ` is clamped into the open interval.
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let p = mu.len();
        if sigma.len() != p || gamma.len() != p {
            return Err(Error::Shape(format!(
                "mu/sigma/gamma lengths {}/{}/{}",
                p,
                sigma.len(),
                gamma.len()
            )));
        }
        if mu.iter().chain(&sigma).chain(&gamma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("sigma must be positive".into()));
        }
        let gamma = gamma.into_iter().map(clamp_gamma).collect();
        Ok(Self { mu, sigma, gamma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// True when every entry is finite and the type invariants hold.
    pub fn is_valid(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|&s| s.is_finite() && s > 0.0)
            && self
                .gamma
                .iter()
                .all(|&g| (GAMMA_FLOOR..=1.0 - GAMMA_FLOOR).contains(&g))
    }
}

pub fn clamp_gamma(g: f64) -> f64 {
    g.clamp(GAMMA_FLOOR, 1.0 - GAMMA_FLOOR)
}

/// Laplace slab rate and Beta hyperparameters of the inclusion probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    lambda: f64,
    a0: f64,
    b0: f64,
    w_bar: f64,
    noise_var: f64,
}

impl PriorSpec {
    pub fn new(lambda: f64, a0: f64, b0: f64) -> Result<Self> {
        Self::with_noise_var(lambda, a0, b0, 1.0)
    }

    pub fn with_noise_var(lambda: f64, a0: f64, b0: f64, noise_var: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("a0", a0), ("b0", b0), ("noise_var", noise_var)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            lambda,
            a0,
            b0,
            w_bar: a0 / (a0 + b0),
            noise_var,
        })
    }

    /// `λ = 1`, `a₀ = 1`, `b₀ = p`.
    pub fn default_for(p: usize) -> Self {
        Self::new(1.0, 1.0, p.max(1) as f64).expect("default prior is valid")
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn a0(&self) -> f64 {
        self.a0
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    /// Prior inclusion probability `a₀ / (a₀ + b₀)`.
    pub fn w_bar(&self) -> f64 {
        self.w_bar
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

/// Divergence order and the coordinate-ascent tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiConfig {
    pub alpha: f64,
    pub epsilon_abs: f64,
    pub tol_entropy: f64,
    pub max_sweeps: usize,
    pub scalar_opt_tol: f64,
}

impl Default for RenyiConfig {
    fn default() -> Self {
        Self {
            alpha: 1.01,
            epsilon_abs: 1e-8,
            tol_entropy: 1e-5,
            max_sweeps: 200,
            scalar_opt_tol: 1e-8,
        }
    }
}

impl RenyiConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) || self.alpha == 1.0 {
            return Err(Error::Domain(format!(
                "alpha must be positive and != 1, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon_abs > 0.0) {
            return Err(Error::Domain("epsilon_abs must be positive".into()));
        }
        if !(self.tol_entropy > 0.0) || !(self.scalar_opt_tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::InvalidConfig(
                "tolerances and max_sweeps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `log N(x; μ, σ²)`.
pub fn gaussian_logpdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let z = (x - mu) / sigma;
    Ok(-LN_SQRT_2PI - sigma.ln() - 0.5 * z * z)
}

/// `log((λ/2)·exp(−λ|x|))`.
pub fn laplace_logpdf(x: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    Ok((0.5 * lambda).ln() - lambda * x.abs())
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `E|Z|` for `Z ~ N(μ, σ²)` (mean of the folded Gaussian).
pub fn folded_normal_mean(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    // the law of |θ| only depends on |μ|
    let m = mu.abs();
    let r = m / sigma;
    // sqrt(2/pi) = FRAC_2_SQRT_PI / sqrt(2)
    let half_normal = sigma * (FRAC_2_SQRT_PI / SQRT_2) * (-0.5 * r * r).exp();
    let signed = m * (1.0 - 2.0 * std_normal_cdf(-r));
    Ok((half_normal + signed).max(m))
}

/// Binary entropy in bits, with `0·log 0 = 0`.
pub fn binary_entropy(z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::Domain(format!("entropy argument {z} outside [0,1]")));
    }
    let term = |v: f64| if v > 0.0 { -v * v.log2() } else { 0.0 };
    Ok(term(z) + term(1.0 - z))
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(g: f64) -> f64 {
    (g / (1.0 - g)).ln()
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
