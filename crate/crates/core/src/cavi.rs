//! AlphaVB: coordinate ascent on the delta-method surrogate of the Rényi
//! objective.
//!
//! For each coordinate `i` (visited in decreasing order of `|μᵢ|`) the solver
//! minimises `log κᵢ` over `μᵢ`, then over `σᵢ`, and finally sets `γᵢ` from the
//! closed-form logit `Γᵢ`. Sweeps repeat until the largest change in binary
//! entropy of the inclusion probabilities drops below `tol_entropy`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_core::{
    binary_entropy, clamp_gamma, folded_normal_mean, logistic, DatasetView, PriorSpec, RenyiConfig, VariationalParams,
};

/// Argument floor of `log(1 + corrections)`.
pub const LOG_ARG_FLOOR: f64 = 1e-12;
/// Half-width of the initial `μᵢ` bracket around the current value.
pub const MU_BRACKET_HALF_WIDTH: f64 = 5.0;
/// `σᵢ` is searched over `[SIGMA_MIN, SIGMA_MAX]` in log space.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e2;

const MAX_BRACKET_EXPANSIONS: usize = 30;

/// The three delta-method corrections of coordinate `i` and `log g(E[θ])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionTerms {
    pub a_term: f64,
    pub b_term: f64,
    pub c_term: f64,
    pub log_g: f64,
}

impl CorrectionTerms {
    /// `1 + ((α−1)²/2)A + ((α−1)/2)B + ((α−1)²/2)C`, before flooring.
    pub fn bracket(&self, alpha: f64) -> f64 {
        let am1 = alpha - 1.0;
        1.0 + 0.5 * am1 * am1 * self.a_term + 0.5 * am1 * self.b_term + 0.5 * am1 * am1 * self.c_term
    }
}

/// Conditional mean `E[θ | zᵢ = 1]` and the diagonal of `Cov(θ | zᵢ = 1)`.
///
/// Off-diagonal covariances vanish under the mean-field law.
pub fn mean_field_moments(params: &VariationalParams, i: usize) -> (Vec<f64>, Vec<f64>) {
    let p = params.len();
    let mut mean = Vec::with_capacity(p);
    let mut var = Vec::with_capacity(p);
    for k in 0..p {
        let (m, s, g) = (params.mu[k], params.sigma[k], params.gamma[k]);
        if k == i {
            mean.push(m);
            var.push(s * s);
        } else {
            mean.push(g * m);
            var.push(g * (1.0 - g) * m * m + g * s * s);
        }
    }
    (mean, var)
}

/// `√(x² + ε)`, the twice-differentiable stand-in for `|x|`.
pub fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps).sqrt()
}

/// Everything about coordinate `i` that does not depend on the candidate
/// `(μᵢ, σᵢ)`: the data terms and the sums over the other coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CoordinateContext {
    xty_i: f64,
    gram_ii: f64,
    /// `Σ_{j≠i} γⱼμⱼ(XᵀX)ⱼᵢ`
    cross: f64,
    /// `Σ_{k≠i} (XᵀX)²ₖᵢ (γₖ(1−γₖ)μₖ² + γₖσₖ²)`
    spread: f64,
    lambda: f64,
    eps: f64,
    alpha: f64,
}

impl CoordinateContext {
    pub(crate) fn new(
        view: &DatasetView,
        params: &VariationalParams,
        prior: &PriorSpec,
        cfg: &RenyiConfig,
        i: usize,
    ) -> Self {
        let row = view.gram().row(i);
        let mut cross = 0.0;
        let mut spread = 0.0;
        for (k, &g_ki) in row.iter().enumerate() {
            if k == i {
                continue;
            }
            let (m, s, g) = (params.mu[k], params.sigma[k], params.gamma[k]);
            cross += g * m * g_ki;
            spread += g_ki * g_ki * (g * (1.0 - g) * m * m + g * s * s);
        }
        Self {
            xty_i: view.xty()[i],
            gram_ii: row[i],
            cross,
            spread,
            lambda: prior.lambda(),
            eps: cfg.epsilon_abs,
            alpha: cfg.alpha,
        }
    }

    fn linear_part(&self, mu: f64) -> f64 {
        -self.xty_i * mu + 0.5 * mu * mu * self.gram_ii + mu * self.cross + self.lambda * smooth_abs(mu, self.eps)
    }

    pub(crate) fn terms(&self, mu: f64, sigma: f64) -> Result<CorrectionTerms> {
        let s2 = sigma * sigma;
        let r2 = mu * mu + self.eps;
        let inv_r = r2.sqrt().recip();
        let slope = -self.xty_i + mu * self.gram_ii + self.cross + self.lambda * mu * inv_r;
        let a_term = slope * slope * s2;
        let b_term = self.gram_ii * s2 - 1.0 + self.lambda * s2 * (inv_r - mu * mu * inv_r * inv_r * inv_r);
        let c_term = mu * mu * self.spread;
        let log_g = (self.alpha - 1.0) * (self.linear_part(mu) - sigma.ln());
        let t = CorrectionTerms {
            a_term,
            b_term,
            c_term,
            log_g,
        };
        if [a_term, b_term, c_term, log_g].iter().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(Error::NumericOverflow)
        }
    }

    fn log_bracket(&self, terms: &CorrectionTerms) -> f64 {
        terms.bracket(self.alpha).max(LOG_ARG_FLOOR).ln()
    }

    pub(crate) fn log_kappa_mu(&self, mu: f64, sigma: f64) -> Result<f64> {
        let terms = self.terms(mu, sigma)?;
        let v = (self.alpha - 1.0) * self.linear_part(mu) + self.log_bracket(&terms);
        finite(v)
    }

    pub(crate) fn log_kappa_sigma(&self, mu: f64, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        let terms = self.terms(mu, sigma)?;
        let v = -(self.alpha - 1.0) * sigma.ln() + self.log_bracket(&terms);
        finite(v)
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericOverflow)
    }
}

/// `Aᵢ`, `Bᵢ`, `Cᵢ` and `log g` at the candidate `(mu_i, sigma_i)`, all other
/// coordinates held at `params`.
pub fn correction_terms(
    view: &DatasetView,
    params: &VariationalParams,
    prior: &PriorSpec,
    cfg: &RenyiConfig,
    i: usize,
    mu_i: f64,
    sigma_i: f64,
) -> Result<CorrectionTerms> {
    if !(sigma_i > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma_i}")));
    }
    CoordinateContext::new(view, params, prior, cfg, i).terms(mu_i, sigma_i)
}

/// `log κᵢ` as a function of `μᵢ` (the `−log σᵢ` constant dropped), with
/// `σᵢ` fixed at its current value.
pub fn log_kappa_mu(
    view: &DatasetView,
    params: &VariationalParams,
    prior: &PriorSpec,
    cfg: &RenyiConfig,
    i: usize,
    mu_candidate: f64,
) -> Result<f64> {
    CoordinateContext::new(view, params, prior, cfg, i).log_kappa_mu(mu_candidate, params.sigma[i])
}

/// `log κᵢ` as a function of `σᵢ`, with `μᵢ` fixed at its current value.
pub fn log_kappa_sigma(
    view: &DatasetView,
    params: &VariationalParams,
    prior: &PriorSpec,
    cfg: &RenyiConfig,
    i: usize,
    sigma_candidate: f64,
) -> Result<f64> {
    if !(sigma_candidate > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma_candidate}")));
    }
    CoordinateContext::new(view, params, prior, cfg, i).log_kappa_sigma(params.mu[i], sigma_candidate)
}

/// Result of a bracketed one-dimensional minimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMinimum {
    pub x: f64,
    pub value: f64,
    /// Final bracket `(a, b)` containing `x`.
    pub bracket: (f64, f64),
}

const PROBES: usize = 33;
const MAX_BRENT_ITERS: usize = 500;
const CGOLD: f64 = 0.381_966_011_250_105_1;

/// Derivative-free minimisation of `f` on `[lo, hi]`.
///
/// A uniform probe grid locates the best cell (guarding against the kinks
/// and shallow secondary wells of the surrogate objectives), then Brent's
/// golden-section/parabolic iteration refines inside that cell until the
/// bracket is narrower than `tol·max(1, |x|)`. Non-finite evaluations count as
/// `+∞`.
pub fn scalar_minimize<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<ScalarMinimum>
where
    F: FnMut(f64) -> f64,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain(format!("invalid bracket ({lo}, {hi})")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let step = (hi - lo) / (PROBES - 1) as f64;
    let grid: Vec<f64> = (0..PROBES)
        .map(|k| if k == PROBES - 1 { hi } else { lo + k as f64 * step })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&x| eval(x)).collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (k, &v)| if v < values[b] { k } else { b });
    if !values[best].is_finite() {
        return Err(Error::InfeasibleObjective);
    }

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(PROBES - 1)];
    let (mut x, mut fx) = (grid[best], values[best]);
    let (mut w, mut fw) = (x, fx);
    let (mut v, mut fv) = (x, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..MAX_BRENT_ITERS {
        let xm = 0.5 * (a + b);
        let tol1 = 0.25 * tol * x.abs().max(1.0);
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            // parabolic fit through (x, w, v)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut pnum = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                pnum = -pnum;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if pnum.abs() < (0.5 * q * etemp).abs() && pnum > q * (a - x) && pnum < q * (b - x) {
                d = pnum / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = eval(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    Ok(ScalarMinimum {
        x,
        value: fx,
        bracket: (a, b),
    })
}

/// Closed-form logit `Γᵢ` of the inclusion-probability update.
pub fn gamma_logit(view: &DatasetView, params: &VariationalParams, prior: &PriorSpec, i: usize) -> Result<f64> {
    let row = view.gram().row(i);
    let cross: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(k, &g_ik)| g_ik * params.gamma[k] * params.mu[k])
        .sum();
    let (mu, sigma) = (params.mu[i], params.sigma[i]);
    let lambda = prior.lambda();
    let v = (prior.a0() / prior.b0()).ln()
        + (std::f64::consts::PI.sqrt() * sigma * lambda / std::f64::consts::SQRT_2).ln()
        + view.xty()[i] * mu
        - mu * cross
        - 0.5 * row[i] * (sigma * sigma + mu * mu)
        - lambda * folded_normal_mean(mu, sigma)?
        + 0.5;
    finite(v)
}

/// Marginal least-squares start: `μᵢ = (XᵀY)ᵢ / (XᵀX)ᵢᵢ` (0 for an all-zero
/// column), `σᵢ = 1`, `γᵢ = 1/2`.
pub fn initial_params(view: &DatasetView) -> VariationalParams {
    let p = view.p();
    let mu = (0..p)
        .map(|i| {
            let g = view.gram()[[i, i]];
            if g > 0.0 {
                view.xty()[i] / g
            } else {
                0.0
            }
        })
        .collect();
    VariationalParams {
        mu,
        sigma: vec![1.0; p],
        gamma: vec![0.5; p],
    }
}

/// Coordinates sorted by `|μᵢ|` descending, ties by ascending index.
pub fn update_order(params: &VariationalParams) -> Vec<usize> {
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by(|&a, &b| params.mu[b].abs().total_cmp(&params.mu[a].abs()).then(a.cmp(&b)));
    order
}

/// Solver state after (or during) a coordinate-ascent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaviState {
    pub params: VariationalParams,
    pub order: Vec<usize>,
    pub sweep_count: usize,
    /// `Δ_H` of the last completed sweep.
    pub delta_entropy: f64,
    /// `Δ_H` of every sweep, in order.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Emitted after each coordinate's `(μᵢ, σᵢ, γᵢ)` update.
#[derive(Debug)]
pub struct CoordinateUpdate<'a> {
    pub sweep: usize,
    pub index: usize,
    pub gamma_old: f64,
    /// Logit on which the new `γᵢ` was based.
    pub logit: f64,
    pub params: &'a VariationalParams,
}

/// Runs AlphaVB from the marginal least-squares start.
pub fn run_cavi(view: &DatasetView, prior: &PriorSpec, cfg: &RenyiConfig) -> Result<CaviState> {
    run_cavi_observed(view, prior, cfg, initial_params(view), |_| {})
}

/// Runs AlphaVB from `init`, calling `observer` after every coordinate update.
pub fn run_cavi_observed<F>(
    view: &DatasetView,
    prior: &PriorSpec,
    cfg: &RenyiConfig,
    init: VariationalParams,
    mut observer: F,
) -> Result<CaviState>
where
    F: FnMut(&CoordinateUpdate<'_>),
{
    if !(cfg.alpha > 1.0) {
        return Err(Error::CaviAlpha);
    }
    cfg.validate()?;
    if init.len() != view.p() {
        return Err(Error::Shape(format!(
            "initial params have length {} but p = {}",
            init.len(),
            view.p()
        )));
    }

    let mut params = init;
    let order = update_order(&params);
    let mut trace = Vec::new();
    let mut delta_entropy = f64::INFINITY;
    let mut converged = false;

    for sweep in 0..cfg.max_sweeps {
        let mut max_change: f64 = 0.0;
        for &i in &order {
            let ctx = CoordinateContext::new(view, &params, prior, cfg, i);

            let sigma_cur = params.sigma[i];
            params.mu[i] = minimize_mu(&ctx, params.mu[i], sigma_cur, cfg.scalar_opt_tol)?;

            let mu_new = params.mu[i];
            params.sigma[i] = minimize_sigma(&ctx, mu_new, cfg.scalar_opt_tol)?;

            let gamma_old = params.gamma[i];
            let logit = gamma_logit(view, &params, prior, i)?;
            params.gamma[i] = clamp_gamma(logistic(logit));

            let change = (binary_entropy(params.gamma[i])? - binary_entropy(gamma_old)?).abs();
            max_change = max_change.max(change);

            observer(&CoordinateUpdate {
                sweep,
                index: i,
                gamma_old,
                logit,
                params: &params,
            });
        }
        delta_entropy = max_change;
        trace.push(max_change);
        if max_change < cfg.tol_entropy {
            converged = true;
            break;
        }
    }

    Ok(CaviState {
        params,
        order,
        sweep_count: trace.len(),
        delta_entropy,
        trace,
        converged,
    })
}

fn minimize_mu(ctx: &CoordinateContext, mu_cur: f64, sigma: f64, tol: f64) -> Result<f64> {
    let mut lo = mu_cur - MU_BRACKET_HALF_WIDTH;
    let mut hi = mu_cur + MU_BRACKET_HALF_WIDTH;
    let objective = |m: f64| ctx.log_kappa_mu(m, sigma).unwrap_or(f64::INFINITY);
    let mut best = scalar_minimize(objective, lo, hi, tol)?;
    for _ in 0..MAX_BRACKET_EXPANSIONS {
        let width = hi - lo;
        let margin = 1e-3 * width;
        if best.x - lo <= margin {
            lo -= width;
        } else if hi - best.x <= margin {
            hi += width;
        } else {
            break;
        }
        best = scalar_minimize(objective, lo, hi, tol)?;
    }
    Ok(best.x)
}

fn minimize_sigma(ctx: &CoordinateContext, mu: f64, tol: f64) -> Result<f64> {
    let objective = |t: f64| ctx.log_kappa_sigma(mu, t.exp()).unwrap_or(f64::INFINITY);
    let best = scalar_minimize(objective, SIGMA_MIN.ln(), SIGMA_MAX.ln(), tol)?;
    Ok(best.x.exp())
}
