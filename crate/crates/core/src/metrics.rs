//! Point estimates, support selection and the four evaluation metrics.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_core::{DatasetView, VariationalParams};
use crate::simgen::SimInstance;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How the coefficient vector is read off the variational law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimate {
    /// `γᵢ·μᵢ`, the variational posterior mean.
    #[default]
    Gm,
    /// `μᵢ` on the selected support, zero elsewhere.
    MuSelected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub l2: f64,
    pub fdr: f64,
    pub tpr: f64,
    pub mspe: f64,
}

pub fn point_estimate(params: &VariationalParams) -> Vec<f64> {
    params.gamma.iter().zip(&params.mu).map(|(g, m)| g * m).collect()
}

/// Indices with `γᵢ > threshold`, ascending.
pub fn select(params: &VariationalParams, threshold: f64) -> Vec<usize> {
    (0..params.len()).filter(|&i| params.gamma[i] > threshold).collect()
}

pub fn estimate(params: &VariationalParams, kind: Estimate, threshold: f64) -> Vec<f64> {
    match kind {
        Estimate::Gm => point_estimate(params),
        Estimate::MuSelected => {
            let mut out = vec![0.0; params.len()];
            for i in select(params, threshold) {
                out[i] = params.mu[i];
            }
            out
        }
    }
}

/// `(fdr, tpr)` of `selected` against the true `support`; both must be sorted.
pub fn selection_rates(selected: &[usize], support: &[usize]) -> (f64, f64) {
    let hits = selected.iter().filter(|i| support.binary_search(i).is_ok()).count();
    let fdr = (selected.len() - hits) as f64 / selected.len().max(1) as f64;
    let tpr = if support.is_empty() {
        1.0
    } else {
        hits as f64 / support.len() as f64
    };
    (fdr, tpr)
}

/// `‖Y − Xθ̂‖² / n` on `view`.
pub fn prediction_error(view: &DatasetView, theta_hat: &[f64]) -> Result<f64> {
    if theta_hat.len() != view.p() {
        return Err(Error::Shape(format!(
            "estimate has length {} but p = {}",
            theta_hat.len(),
            view.p()
        )));
    }
    let fit = view.x().dot(&Array1::from(theta_hat.to_vec()));
    let rss: f64 = view.y().iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum();
    Ok(rss / view.n() as f64)
}

pub fn evaluate_with(
    params: &VariationalParams,
    instance: &SimInstance,
    kind: Estimate,
    threshold: f64,
) -> Result<MetricBundle> {
    let p = instance.theta_true.len();
    if params.len() != p {
        return Err(Error::Shape(format!("params have length {} but p = {p}", params.len())));
    }
    let theta_hat = estimate(params, kind, threshold);
    let l2 = theta_hat
        .iter()
        .zip(&instance.theta_true)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let (fdr, tpr) = selection_rates(&select(params, threshold), &instance.support);
    let mspe = prediction_error(&instance.test, &theta_hat)?;
    Ok(MetricBundle { l2, fdr, tpr, mspe })
}

/// Metrics with the posterior-mean estimate and the 0.5 threshold.
pub fn evaluate(params: &VariationalParams, instance: &SimInstance) -> Result<MetricBundle> {
    evaluate_with(params, instance, Estimate::Gm, DEFAULT_THRESHOLD)
}
