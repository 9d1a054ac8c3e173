//! Chance-constrained branch-flow OPF: Gaussian margin tightening, conic
//! assembly, binary handling, envelope extraction and Monte Carlo checks.
//!
//! Per-unit conventions follow [`crate::netmodel`]: squared voltages, powers
//! on `base_mva`. Forecasts, envelopes and reports are in kW.

mod assemble;
mod margins;
mod montecarlo;
mod powerflow;
mod quantile;
mod solve;

pub use assemble::{assemble_problem, Layout, OpfProblem, RowMap};
pub use margins::{build_margins, Margins};
pub use montecarlo::{monte_carlo_validate, ViolationRow, ViolationSummary};
pub use powerflow::{power_flow, PowerFlow};
pub use quantile::{normal_cdf, normal_quantile};
pub use solve::{
    extract_envelopes, solve, verify_relaxation, BinaryStrategy, EnvelopeSchedule, InfeasibilityHint, OpfSolution, OpfStatus,
    RelaxationReport,
};

use crate::metrics::GaussianProfile;
use crate::netmodel::NetError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum OpfError {
    #[error("chance level {name} = {value} outside (0, 0.5)")]
    ChanceLevel { name: &'static str, value: f64 },
    #[error("quantile level {0} outside (0, 1)")]
    QuantileRange(f64),
    #[error(transparent)]
    Network(#[from] NetError),
    #[error("forecast: {0}")]
    Forecast(String),
    #[error("infeasible bounds: {0}")]
    InfeasibleBounds(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("conic backend: {0}")]
    Solver(#[from] conic::SolverError),
    #[error("solution is not optimal (status {0})")]
    NotOptimal(String),
    #[error("Monte Carlo needs at least 1000 draws, got {0}")]
    TooFewDraws(usize),
}

/// Violation probabilities of the voltage, line-flow and battery chance
/// constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceLevels {
    pub xi_v: f64,
    pub xi_l: f64,
    pub xi_p: f64,
}

impl Default for ChanceLevels {
    fn default() -> Self {
        Self {
            xi_v: 0.05,
            xi_l: 0.05,
            xi_p: 0.05,
        }
    }
}

impl ChanceLevels {
    pub fn validate(&self) -> Result<(), OpfError> {
        for (name, value) in [("xi_v", self.xi_v), ("xi_l", self.xi_l), ("xi_p", self.xi_p)] {
            if !(value > 0.0 && value < 0.5) {
                return Err(OpfError::ChanceLevel { name, value });
            }
        }
        Ok(())
    }

    pub fn z_v(&self) -> Result<f64, OpfError> {
        normal_quantile(1.0 - self.xi_v)
    }

    pub fn z_l(&self) -> Result<f64, OpfError> {
        normal_quantile(1.0 - self.xi_l)
    }
}

/// Day-ahead Gaussian forecast of one prosumer (kW per slot).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeForecast {
    pub bus_id: u32,
    pub demand: GaussianProfile,
    pub pv: GaussianProfile,
}

impl NodeForecast {
    pub fn slots(&self) -> usize {
        self.demand.mu.len()
    }
}

/// Residual spread per prosumer and slot, in kW. `covariance[t]` optionally
/// replaces the independent model with a full covariance (kW²) of the net
/// injection residuals, indexed like `bus_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySpec {
    pub bus_ids: Vec<u32>,
    pub sigma_d: Vec<Vec<f64>>,
    pub sigma_pv: Vec<Vec<f64>>,
    pub covariance: Option<Vec<Vec<Vec<f64>>>>,
}

impl UncertaintySpec {
    pub fn from_forecasts(nodes: &[NodeForecast]) -> Self {
        Self {
            bus_ids: nodes.iter().map(|n| n.bus_id).collect(),
            sigma_d: nodes.iter().map(|n| n.demand.sigma.clone()).collect(),
            sigma_pv: nodes.iter().map(|n| n.pv.sigma.clone()).collect(),
            covariance: None,
        }
    }

    pub fn slots(&self) -> usize {
        self.sigma_d.first().map_or(0, |s| s.len())
    }

    /// Multiply every standard deviation by `f` (covariances by f²).
    pub fn scaled(&self, f: f64) -> Self {
        let scale = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|s| s * f).collect()).collect();
        Self {
            bus_ids: self.bus_ids.clone(),
            sigma_d: scale(&self.sigma_d),
            sigma_pv: scale(&self.sigma_pv),
            covariance: self.covariance.as_ref().map(|c| {
                c.iter()
                    .map(|m| m.iter().map(|r| r.iter().map(|v| v * f * f).collect()).collect())
                    .collect()
            }),
        }
    }

    /// Variance (kW²) of the net injection residual of prosumer `k` at `t`.
    pub fn variance(&self, k: usize, t: usize) -> f64 {
        match &self.covariance {
            Some(c) => c[t][k][k],
            None => self.sigma_d[k][t].powi(2) + self.sigma_pv[k][t].powi(2),
        }
    }

    /// Covariance (kW²) between the residuals of prosumers `a` and `b` at `t`.
    pub fn covariance_at(&self, a: usize, b: usize, t: usize) -> f64 {
        match &self.covariance {
            Some(c) => c[t][a][b],
            None if a == b => self.variance(a, t),
            None => 0.0,
        }
    }

    pub(crate) fn validate(&self, slots: usize) -> Result<(), OpfError> {
        let n = self.bus_ids.len();
        let bad = |m: &str| Err(OpfError::Forecast(m.to_string()));
        if self.sigma_d.len() != n || self.sigma_pv.len() != n {
            return bad("uncertainty rows do not match the prosumer list");
        }
        for s in self.sigma_d.iter().chain(&self.sigma_pv) {
            if s.len() != slots {
                return bad("uncertainty horizon does not match the forecast horizon");
            }
            if s.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return bad("standard deviations must be finite and nonnegative");
            }
        }
        if let Some(c) = &self.covariance {
            if c.len() != slots || c.iter().any(|m| m.len() != n || m.iter().any(|r| r.len() != n)) {
                return bad("covariance must be slots x prosumers x prosumers");
            }
        }
        Ok(())
    }
}

/// OPF settings that are not network or forecast data.
#[derive(Debug, Clone)]
pub struct OpfConfig {
    /// Per-prosumer export cap in kW.
    pub export_cap_kw: f64,
    pub dt_hours: f64,
    /// Weight on the sum of all exports, breaking ties among non-minimal
    /// prosumers.
    pub fairness_tiebreak: f64,
    /// Weight on total line losses; pins the current variables to the
    /// physical branch flow. Negative values reward losses (diagnostics only).
    pub loss_weight: f64,
    /// Largest binary count accepted by exhaustive enumeration.
    pub enumeration_limit: usize,
    pub solver: conic::Settings,
}

impl Default for OpfConfig {
    fn default() -> Self {
        Self {
            export_cap_kw: 10.0,
            dt_hours: 0.5,
            fairness_tiebreak: 1e-3,
            loss_weight: 1e-2,
            enumeration_limit: 8,
            solver: conic::Settings::default(),
        }
    }
}
