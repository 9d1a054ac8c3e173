use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::powerflow::power_flow;
use super::{EnvelopeSchedule, OpfError, UncertaintySpec};
use crate::netmodel::Network;

pub const MIN_DRAWS: usize = 1000;
/// Slack on limit comparisons, absorbing solver tolerance at binding limits.
pub const LIMIT_TOL: f64 = 1e-7;

/// Empirical violation rate of one constraint in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationRow {
    /// `v_max:<bus>`, `v_min:<bus>` or `s_max:<from>-<to>`.
    pub constraint: String,
    pub slot: usize,
    pub violation_rate: f64,
    /// 95% normal-approximation binomial half-width.
    pub ci_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationSummary {
    pub draws: usize,
    pub rows: Vec<ViolationRow>,
    /// Draws whose power flow did not converge, per slot; they are excluded
    /// from the rates.
    pub divergences: Vec<usize>,
}

impl ViolationSummary {
    pub fn max_rate(&self) -> f64 {
        self.rows.iter().map(|r| r.violation_rate).fold(0.0, f64::max)
    }

    /// Largest rate among constraints whose label starts with `prefix`.
    pub fn max_rate_of(&self, prefix: &str) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.constraint.starts_with(prefix))
            .map(|r| r.violation_rate)
            .fold(0.0, f64::max)
    }

    pub fn total_violations(&self) -> f64 {
        self.rows.iter().map(|r| r.violation_rate).sum()
    }

    /// `constraint,slot,violation_rate,ci_halfwidth`
    pub fn write_csv(&self, w: impl std::io::Write, slot_offset: usize) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["constraint", "slot", "violation_rate", "ci_halfwidth"])?;
        self.append_csv(&mut wr, slot_offset)?;
        wr.flush()?;
        Ok(())
    }

    pub fn append_csv<W: std::io::Write>(&self, wr: &mut csv::Writer<W>, slot_offset: usize) -> Result<(), csv::Error> {
        for r in &self.rows {
            wr.write_record([
                r.constraint.clone(),
                (r.slot + slot_offset).to_string(),
                format!("{:.6}", r.violation_rate),
                format!("{:.6}", r.ci_halfwidth),
            ])?;
        }
        Ok(())
    }
}

/// Lower-triangular factor of a covariance, tolerating semidefinite input.
fn factor(cov: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cov.len();
    let m = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
    if let Some(ch) = m.clone().cholesky() {
        let l = ch.l();
        return (0..n).map(|i| (0..n).map(|j| l[(i, j)]).collect()).collect();
    }
    // symmetric square root through the eigendecomposition
    let eig = m.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    (0..n).map(|i| (0..n).map(|j| r[(i, j)]).collect()).collect()
}

/// Sample net-injection residuals per slot, apply them on top of the
/// envelope exports and run an AC sweep for each draw. Residuals of prosumer
/// k are δ = σ_pv·ξ₁ − σ_d·ξ₂ (or correlated through the given covariance)
/// with reactive part κ_k·δ. Each slot draws from its own ChaCha8 stream.
pub fn monte_carlo_validate(
    net: &Network,
    schedule: &EnvelopeSchedule,
    unc: &UncertaintySpec,
    n: usize,
    seed: u64,
) -> Result<ViolationSummary, OpfError> {
    if n < MIN_DRAWS {
        return Err(OpfError::TooFewDraws(n));
    }
    let tree = net.tree()?;
    let slots = schedule.slots();
    unc.validate(slots)?;
    if unc.bus_ids != schedule.bus_ids {
        return Err(OpfError::Forecast("uncertainty and envelope prosumers differ".into()));
    }
    let buses: Vec<usize> = schedule
        .bus_ids
        .iter()
        .map(|&id| net.bus_index(id).ok_or_else(|| OpfError::Forecast(format!("unknown bus {id}"))))
        .collect::<Result<_, _>>()?;
    let kappa: Vec<f64> = buses
        .iter()
        .map(|&b| net.buses[b].prosumer.as_ref().map_or(0.0, |p| p.kappa()))
        .collect();
    let (nb, nl, np) = (net.buses.len(), net.lines.len(), buses.len());
    let mut rows = Vec::new();
    let mut divergences = vec![0; slots];
    for t in 0..slots {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let chol = unc.covariance.as_ref().map(|c| factor(&c[t]));
        let mut v_hi = vec![0usize; nb];
        let mut v_lo = vec![0usize; nb];
        let mut s_hi = vec![0usize; nl];
        let mut ok = 0usize;
        let mut ip = vec![0.0; nb];
        let mut iq = vec![0.0; nb];
        let mut delta = vec![0.0; np];
        let mut xi = vec![0.0; np];
        for _ in 0..n {
            match &chol {
                Some(l) => {
                    for v in xi.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    for k in 0..np {
                        delta[k] = (0..=k).map(|j| l[k][j] * xi[j]).sum();
                    }
                }
                None => {
                    for k in 0..np {
                        let a: f64 = StandardNormal.sample(&mut rng);
                        let b: f64 = StandardNormal.sample(&mut rng);
                        delta[k] = unc.sigma_pv[k][t] * a - unc.sigma_d[k][t] * b;
                    }
                }
            }
            for (k, &b) in buses.iter().enumerate() {
                ip[b] = net.kw_to_pu(schedule.export_kw[k][t] + delta[k]);
                iq[b] = net.kw_to_pu(schedule.reactive_kvar[k][t] + kappa[k] * delta[k]);
            }
            let pf = power_flow(net, &tree, &ip, &iq);
            if !pf.converged {
                divergences[t] += 1;
                continue;
            }
            ok += 1;
            for (b, bus) in net.buses.iter().enumerate() {
                if bus.slack {
                    continue;
                }
                if pf.v[b] > bus.v_max + LIMIT_TOL {
                    v_hi[b] += 1;
                }
                if pf.v[b] < bus.v_min - LIMIT_TOL {
                    v_lo[b] += 1;
                }
            }
            for (l, s) in pf.apparent().into_iter().enumerate() {
                if s > net.lines[l].s_max + LIMIT_TOL {
                    s_hi[l] += 1;
                }
            }
        }
        let rate = |c: usize| -> (f64, f64) {
            if ok == 0 {
                return (f64::NAN, f64::NAN);
            }
            let p = c as f64 / ok as f64;
            (p, 1.96 * (p * (1.0 - p) / ok as f64).sqrt())
        };
        for (b, bus) in net.buses.iter().enumerate() {
            if bus.slack {
                continue;
            }
            for (label, count) in [("v_max", v_hi[b]), ("v_min", v_lo[b])] {
                let (r, ci) = rate(count);
                rows.push(ViolationRow {
                    constraint: format!("{label}:{}", bus.id),
                    slot: t,
                    violation_rate: r,
                    ci_halfwidth: ci,
                });
            }
        }
        for (l, line) in net.lines.iter().enumerate() {
            let (r, ci) = rate(s_hi[l]);
            rows.push(ViolationRow {
                constraint: format!("s_max:{}-{}", line.from, line.to),
                slot: t,
                violation_rate: r,
                ci_halfwidth: ci,
            });
        }
    }
    Ok(ViolationSummary {
        draws: n,
        rows,
        divergences,
    })
}
