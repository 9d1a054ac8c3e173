use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{build_condition_vector, Channel, ConditionVector, ForecastError, Normalizer, SeriesFrame};
use super::{CONDITION_DIM, LAGS, SLOTS_PER_DAY};

/// Day-ahead profile predictor f(X).
pub trait PointForecaster {
    /// 48-slot nonnegative profile in kW.
    fn predict(&self, cond: &ConditionVector) -> Vec<f64>;
}

/// Linear map from the condition vector to the normalized day profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeChannel {
    /// Row-major 48 x 290.
    pub coef: Vec<f64>,
    pub intercept: Vec<f64>,
}

impl RidgeChannel {
    fn zero() -> Self {
        Self {
            coef: vec![0.0; SLOTS_PER_DAY * CONDITION_DIM],
            intercept: vec![0.0; SLOTS_PER_DAY],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..SLOTS_PER_DAY)
            .map(|t| {
                let row = &self.coef[t * CONDITION_DIM..(t + 1) * CONDITION_DIM];
                self.intercept[t] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// Ridge-regression baseline, one pooled model per channel over all
/// prosumers, on min-max normalized inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointModel {
    pub alpha: f64,
    pub normalizer: Normalizer,
    pub demand: RidgeChannel,
    pub pv: RidgeChannel,
    /// In-sample mean absolute error in kW, per channel.
    pub in_sample_mae: [f64; 2],
}

impl PointModel {
    pub fn channel(&self, c: Channel) -> &RidgeChannel {
        match c {
            Channel::Demand => &self.demand,
            Channel::Pv => &self.pv,
        }
    }
}

impl PointForecaster for PointModel {
    fn predict(&self, cond: &ConditionVector) -> Vec<f64> {
        let p = self
            .normalizer
            .prosumers
            .iter()
            .position(|&id| id == cond.prosumer)
            .unwrap_or_else(|| panic!("prosumer {} was not seen in training", cond.prosumer));
        self.channel(cond.channel)
            .apply(&cond.values)
            .into_iter()
            .map(|u| self.normalizer.denormalize(p, cond.channel, u).max(0.0))
            .collect()
    }
}

/// Fit on `days` (at least 60; days without a complete 21-day history are
/// skipped). `alpha = 0` gives the minimum-norm least-squares solution.
pub fn fit_point_model(
    frame: &SeriesFrame,
    norm: &Normalizer,
    days: &[usize],
    alpha: f64,
) -> Result<PointModel, ForecastError> {
    if days.len() < 60 {
        return Err(ForecastError::Fit(format!(
            "point model needs at least 60 training days, got {}",
            days.len()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(ForecastError::Fit(format!("ridge penalty must be >= 0, got {alpha}")));
    }
    let max_lag = *LAGS.iter().max().expect("lags");
    let usable: Vec<usize> = days.iter().copied().filter(|&d| d >= max_lag).collect();
    let mut fitted = Vec::new();
    let mut mae = [0.0; 2];
    for c in Channel::ALL {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut raw: Vec<(usize, usize)> = Vec::new();
        for &d in &usable {
            for (p, &id) in frame.prosumers.iter().enumerate() {
                let cond = match build_condition_vector(frame, norm, id, frame.date(d), c) {
                    Ok(v) => v,
                    Err(ForecastError::MissingLag(_)) => continue,
                    Err(e) => return Err(e),
                };
                let target = frame.day_profile(c, p, d);
                if target.iter().any(|v| !v.is_finite()) {
                    continue;
                }
                xs.extend_from_slice(&cond.values);
                ys.extend(target.iter().map(|&v| norm.normalize(p, c, v)));
                raw.push((p, d));
            }
        }
        let n = raw.len();
        if n == 0 {
            return Err(ForecastError::Fit(format!("no usable {c} training days")));
        }
        let all_zero = raw
            .iter()
            .all(|&(p, d)| frame.day_profile(c, p, d).iter().all(|&v| v == 0.0));
        let model = if all_zero {
            log::warn!("{c} channel is identically zero on the training days; forecasting zero");
            RidgeChannel::zero()
        } else {
            ridge(
                DMatrix::from_row_slice(n, CONDITION_DIM, &xs),
                DMatrix::from_row_slice(n, SLOTS_PER_DAY, &ys),
                alpha,
            )?
        };
        let mut err = 0.0;
        for (k, &(p, d)) in raw.iter().enumerate() {
            let pred = model.apply(&xs[k * CONDITION_DIM..(k + 1) * CONDITION_DIM]);
            let actual = frame.day_profile(c, p, d);
            for t in 0..SLOTS_PER_DAY {
                err += (norm.denormalize(p, c, pred[t]).max(0.0) - actual[t]).abs();
            }
        }
        mae[c.index()] = err / (n * SLOTS_PER_DAY) as f64;
        log::info!("point model {c}: {n} samples, in-sample MAE {:.4} kW", mae[c.index()]);
        fitted.push(model);
    }
    let pv = fitted.pop().expect("pv");
    let demand = fitted.pop().expect("demand");
    Ok(PointModel {
        alpha,
        normalizer: norm.clone(),
        demand,
        pv,
        in_sample_mae: mae,
    })
}

/// Ridge with an unpenalized intercept: center, solve (XᵀX + αI)β = XᵀY.
fn ridge(mut x: DMatrix<f64>, mut y: DMatrix<f64>, alpha: f64) -> Result<RidgeChannel, ForecastError> {
    let n = x.nrows() as f64;
    let xm: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).sum() / n).collect();
    let ym: Vec<f64> = (0..y.ncols()).map(|j| y.column(j).sum() / n).collect();
    for (j, m) in xm.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    for (j, m) in ym.iter().enumerate() {
        y.column_mut(j).add_scalar_mut(-m);
    }
    let mut gram = x.tr_mul(&x);
    let rhs = x.tr_mul(&y);
    for i in 0..gram.nrows() {
        gram[(i, i)] += alpha;
    }
    let beta = match (alpha > 0.0).then(|| gram.clone().cholesky()).flatten() {
        Some(ch) => ch.solve(&rhs),
        None => {
            // minimum-norm least squares
            let svd = gram.svd(true, true);
            let tol = 1e-12 * svd.singular_values.max().max(1e-300);
            svd.solve(&rhs, tol)
                .map_err(|e| ForecastError::Fit(format!("least squares: {e}")))?
        }
    };
    // beta: 290 x 48
    let mut coef = vec![0.0; SLOTS_PER_DAY * CONDITION_DIM];
    let mut intercept = vec![0.0; SLOTS_PER_DAY];
    for t in 0..SLOTS_PER_DAY {
        let mut b = ym[t];
        for j in 0..CONDITION_DIM {
            coef[t * CONDITION_DIM + j] = beta[(j, t)];
            b -= xm[j] * beta[(j, t)];
        }
        intercept[t] = b;
    }
    Ok(RidgeChannel { coef, intercept })
}
