use super::{ChanceLevels, OpfError, UncertaintySpec};
use crate::netmodel::{Network, SensitivityMatrices};

/// Deterministic tightening of the voltage and flow limits.
#[derive(Debug, Clone, PartialEq)]
pub struct Margins {
    /// `voltage[bus][slot]` in pu² (squared voltage), zero at the slack.
    pub voltage: Vec<Vec<f64>>,
    /// `flow[line][slot]` in pu, subtracted from the apparent-power limit.
    pub flow: Vec<Vec<f64>>,
}

impl Margins {
    pub fn zeros(buses: usize, lines: usize, slots: usize) -> Self {
        Self {
            voltage: vec![vec![0.0; slots]; buses],
            flow: vec![vec![0.0; slots]; lines],
        }
    }

    pub fn slots(&self) -> usize {
        self.voltage.first().map_or(0, |v| v.len())
    }

    pub fn without_voltage(&self) -> Self {
        Self {
            voltage: self.voltage.iter().map(|r| vec![0.0; r.len()]).collect(),
            flow: self.flow.clone(),
        }
    }

    pub fn without_flow(&self) -> Self {
        Self {
            voltage: self.voltage.clone(),
            flow: self.flow.iter().map(|r| vec![0.0; r.len()]).collect(),
        }
    }
}

/// Gaussian margins from linearized sensitivities. The residual net injection
/// of prosumer k is δ_k (active) and κ_k·δ_k (reactive); the squared voltage
/// at bus i moves by Σ_k 2(R_ik + κ_k X_ik) δ_k and the flow on a line by the
/// sum of its downstream residuals.
pub fn build_margins(
    net: &Network,
    unc: &UncertaintySpec,
    sens: &SensitivityMatrices,
    levels: &ChanceLevels,
) -> Result<Margins, OpfError> {
    levels.validate()?;
    let slots = unc.slots();
    unc.validate(slots)?;
    let z_v = levels.z_v()?;
    let z_l = levels.z_l()?;
    let buses: Vec<usize> = unc
        .bus_ids
        .iter()
        .map(|&id| {
            let b = net
                .bus_index(id)
                .ok_or_else(|| OpfError::Forecast(format!("bus {id} is not in the network")))?;
            if net.buses[b].prosumer.is_none() {
                return Err(OpfError::Forecast(format!("bus {id} has no prosumer")));
            }
            Ok(b)
        })
        .collect::<Result<_, _>>()?;
    let kappa: Vec<f64> = buses
        .iter()
        .map(|&b| net.buses[b].prosumer.as_ref().expect("prosumer").kappa())
        .collect();
    let kw2 = net.kw_to_pu(1.0).powi(2);
    let n = buses.len();
    let std_of = |a: &[f64], t: usize| -> f64 {
        let mut var = 0.0;
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                var += a[i] * a[j] * unc.covariance_at(i, j, t);
            }
        }
        (var.max(0.0) * kw2).sqrt()
    };
    let mut m = Margins::zeros(net.buses.len(), net.lines.len(), slots);
    for (i, row) in m.voltage.iter_mut().enumerate() {
        let a: Vec<f64> = (0..n)
            .map(|k| 2.0 * (sens.r[i][buses[k]] + kappa[k] * sens.x[i][buses[k]]))
            .collect();
        for (t, v) in row.iter_mut().enumerate() {
            *v = z_v * std_of(&a, t);
        }
    }
    for (l, row) in m.flow.iter_mut().enumerate() {
        let down = &sens.downstream[l];
        let inside: Vec<bool> = buses.iter().map(|b| down.binary_search(b).is_ok()).collect();
        let ones: Vec<f64> = inside.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        let kap: Vec<f64> = (0..n).map(|k| ones[k] * kappa[k]).collect();
        for (t, v) in row.iter_mut().enumerate() {
            let (sp, sq) = (std_of(&ones, t), std_of(&kap, t));
            *v = z_l * (sp * sp + sq * sq).sqrt();
        }
    }
    Ok(m)
}
