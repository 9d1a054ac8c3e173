//! Probabilistic forecast scores and Gaussian fitting of scenario ensembles.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("quantile level {0} outside (0, 1)")]
    QuantileRange(f64),
    #[error("need at least 2 scenarios to fit a standard deviation, got {0}")]
    TooFewScenarios(usize),
    #[error("scenario length {got} does not match point forecast length {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in ensemble")]
    NonFinite,
}

/// Empirical-CDF CRPS in energy form: mean|X - y| - mean|X - X'| / 2.
pub fn crps(ensemble: &[f64], y: f64) -> Result<f64, MetricError> {
    if ensemble.is_empty() {
        return Err(MetricError::EmptyEnsemble);
    }
    if ensemble.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let mut xs = ensemble.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let abs_obs: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // Σ_{i,j} |x_i - x_j| = 2 Σ_i (2i - n + 1) x_(i) over the sorted sample;
    // the weights sum to zero, so shifting by the minimum is free and keeps
    // constant ensembles exact
    let lo = xs[0];
    let pair: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * (x - lo))
        .sum::<f64>()
        * 2.0
        / (n * n);
    Ok((abs_obs - 0.5 * pair).max(0.0))
}

/// Pinball loss of a predicted q-quantile.
pub fn pinball(y_hat_q: f64, y: f64, q: f64) -> Result<f64, MetricError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MetricError::QuantileRange(q));
    }
    Ok(if y >= y_hat_q {
        q * (y - y_hat_q)
    } else {
        (1.0 - q) * (y_hat_q - y)
    })
}

/// Linear-interpolation empirical quantile with the i-th order statistic at
/// position (i - 1) / (n - 1).
pub fn quantile(ensemble: &[f64], q: f64) -> Result<f64, MetricError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MetricError::QuantileRange(q));
    }
    if ensemble.is_empty() {
        return Err(MetricError::EmptyEnsemble);
    }
    let mut xs = ensemble.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&xs, q))
}

pub(crate) fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let n = xs.len();
    if n == 1 {
        return xs[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Per-slot normal approximation of a forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProfile {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Fit mu = point + mean(residual) and sigma = sample std (n - 1) per slot.
/// `scenarios` holds one residual profile per row.
pub fn fit_gaussian(scenarios: &[Vec<f64>], point: &[f64]) -> Result<GaussianProfile, MetricError> {
    let n = scenarios.len();
    if n < 2 {
        return Err(MetricError::TooFewScenarios(n));
    }
    let slots = point.len();
    for s in scenarios {
        if s.len() != slots {
            return Err(MetricError::Shape {
                expected: slots,
                got: s.len(),
            });
        }
    }
    let mut mu = Vec::with_capacity(slots);
    let mut sigma = Vec::with_capacity(slots);
    for t in 0..slots {
        let mean = scenarios.iter().map(|s| s[t]).sum::<f64>() / n as f64;
        let var = scenarios.iter().map(|s| (s[t] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        mu.push(point[t] + mean);
        sigma.push(var.sqrt());
    }
    Ok(GaussianProfile { mu, sigma })
}

/// Per-slot scores of one observed day against an ensemble of full-day
/// forecasts (`ensemble[k][t]` is member k at slot t).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotScore {
    pub crps: f64,
    pub pl_q10: f64,
    pub pl_q50: f64,
    pub pl_q90: f64,
}

pub fn score_day(ensemble: &[Vec<f64>], actual: &[f64]) -> Result<Vec<SlotScore>, MetricError> {
    if ensemble.is_empty() {
        return Err(MetricError::EmptyEnsemble);
    }
    let mut out = Vec::with_capacity(actual.len());
    let mut col = vec![0.0; ensemble.len()];
    for (t, &y) in actual.iter().enumerate() {
        for (c, member) in col.iter_mut().zip(ensemble) {
            *c = member[t];
        }
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        out.push(SlotScore {
            crps: crps(&col, y)?,
            pl_q10: pinball(quantile_sorted(&sorted, 0.1), y, 0.1)?,
            pl_q50: pinball(quantile_sorted(&sorted, 0.5), y, 0.5)?,
            pl_q90: pinball(quantile_sorted(&sorted, 0.9), y, 0.9)?,
        });
    }
    Ok(out)
}
