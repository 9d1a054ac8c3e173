use conic::{ConeSolution, ConicBackend, IterationLog, Status};

use super::powerflow::power_flow;
use super::{OpfError, OpfProblem};

/// Threshold above which simultaneous charge and discharge counts as a
/// complementarity violation (pu).
pub const COMPLEMENTARITY_TOL: f64 = 1e-6;
/// Relaxation residuals above this (pu²) flag an inexact SOC relaxation.
pub const EXACTNESS_TOL: f64 = 1e-5;
const ROUNDING_PASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryStrategy {
    /// Continuous relaxation only, b ∈ [0, 1].
    Relaxed,
    /// Relax, fix conflicting slots by the sign of net battery power, re-solve.
    RoundAndFix,
    /// Every assignment of the battery binaries (small instances only).
    Enumerate,
}

impl std::str::FromStr for BinaryStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relaxed" => Ok(Self::Relaxed),
            "round-and-fix" => Ok(Self::RoundAndFix),
            "enumerate" => Ok(Self::Enumerate),
            _ => Err(format!("unknown binary strategy `{s}` (relaxed, round-and-fix, enumerate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpfStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    NumericalError,
}

impl std::fmt::Display for OpfStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpfStatus::Optimal => "optimal",
            OpfStatus::Infeasible => "infeasible",
            OpfStatus::IterationLimit => "iteration-limit",
            OpfStatus::NumericalError => "numerical-error",
        })
    }
}

/// Which tightening made an infeasible instance infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibilityHint {
    VoltageMargins,
    FlowMargins,
    VoltageAndFlowMargins,
    /// Infeasible even without margins.
    Deterministic,
}

impl std::fmt::Display for InfeasibilityHint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::VoltageMargins => "voltage margins (feasible once voltage tightening is removed)",
            Self::FlowMargins => "line-flow margins (feasible once flow tightening is removed)",
            Self::VoltageAndFlowMargins => "voltage and line-flow margins together",
            Self::Deterministic => "deterministic limits (infeasible without any tightening)",
        })
    }
}

#[derive(Debug, Clone)]
pub struct OpfSolution {
    pub status: OpfStatus,
    pub hint: Option<InfeasibilityHint>,
    /// Σ_t γ_t in pu.
    pub objective: f64,
    /// c'x including the tie-break and loss terms.
    pub solver_objective: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub pres: f64,
    pub dres: f64,
    pub gap: f64,
    pub reduced_accuracy: bool,
    /// Binaries pinned by the strategy, `(t, k, charging)`.
    pub fixed: Vec<(usize, usize, bool)>,
    /// Slots still charging and discharging at once, `(t, k)`.
    pub complementarity_violations: Vec<(usize, usize)>,
    pub solves: usize,
    pub iterations: usize,
    /// Iteration log of the final cone solve.
    pub log: Vec<IterationLog>,
}

impl OpfSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == OpfStatus::Optimal
    }

    /// Duals of the `γ_t ≤ exp_k` rows, `[t][k]`.
    pub fn gamma_duals(&self, problem: &OpfProblem) -> Vec<Vec<f64>> {
        problem
            .rows
            .gamma
            .iter()
            .map(|r| r.iter().map(|&i| self.z[i]).collect())
            .collect()
    }
}

fn map_status(s: Status) -> OpfStatus {
    match s {
        Status::Optimal => OpfStatus::Optimal,
        Status::PrimalInfeasible => OpfStatus::Infeasible,
        Status::MaxIterations => OpfStatus::IterationLimit,
        Status::DualInfeasible | Status::NumericalError => OpfStatus::NumericalError,
    }
}

fn conflicts(problem: &OpfProblem, x: &[f64]) -> Vec<(usize, usize)> {
    let lay = &problem.layout;
    problem
        .binaries
        .iter()
        .copied()
        .filter(|&(t, k)| x[lay.ch(t, k)] > COMPLEMENTARITY_TOL && x[lay.dis(t, k)] > COMPLEMENTARITY_TOL)
        .collect()
}

fn package(
    problem: &OpfProblem,
    sol: ConeSolution,
    fixed: Vec<(usize, usize, bool)>,
    solves: usize,
    iterations: usize,
) -> OpfSolution {
    let status = map_status(sol.status);
    let objective = if status == OpfStatus::Optimal {
        (0..problem.slots()).map(|t| sol.x[problem.layout.gamma(t)]).sum()
    } else {
        f64::NAN
    };
    let complementarity_violations = if status == OpfStatus::Optimal {
        conflicts(problem, &sol.x)
    } else {
        Vec::new()
    };
    OpfSolution {
        status,
        hint: None,
        objective,
        solver_objective: sol.pcost,
        x: sol.x,
        y: sol.y,
        z: sol.z,
        s: sol.s,
        pres: sol.pres,
        dres: sol.dres,
        gap: sol.gap,
        reduced_accuracy: sol.reduced_accuracy,
        fixed,
        complementarity_violations,
        solves,
        iterations,
        log: sol.log,
    }
}

/// Solve the envelope problem, resolving battery binaries with `strategy`.
/// Infeasible instances are re-solved with margins removed to name the
/// responsible tightening.
pub fn solve(
    problem: &OpfProblem,
    backend: &dyn ConicBackend,
    strategy: BinaryStrategy,
) -> Result<OpfSolution, OpfError> {
    let mut out = match strategy {
        BinaryStrategy::Relaxed => {
            let sol = backend.solve(&problem.cone_problem())?;
            let it = sol.iterations;
            package(problem, sol, Vec::new(), 1, it)
        }
        BinaryStrategy::RoundAndFix => round_and_fix(problem, backend)?,
        BinaryStrategy::Enumerate => enumerate(problem, backend)?,
    };
    if out.status == OpfStatus::Infeasible {
        out.hint = Some(diagnose(problem, backend)?);
        log::warn!("envelope problem infeasible: {}", out.hint.expect("set"));
    }
    Ok(out)
}

fn round_and_fix(problem: &OpfProblem, backend: &dyn ConicBackend) -> Result<OpfSolution, OpfError> {
    let mut fixed: Vec<(usize, usize, bool)> = Vec::new();
    let sol = backend.solve(&problem.cone_problem())?;
    let mut iterations = sol.iterations;
    let mut solves = 1;
    let mut current = sol;
    for _ in 0..ROUNDING_PASSES {
        if current.status != Status::Optimal {
            break;
        }
        let bad = conflicts(problem, &current.x);
        if bad.is_empty() {
            break;
        }
        log::info!("rounding {} simultaneous charge/discharge slots", bad.len());
        let lay = &problem.layout;
        for (t, k) in bad {
            let charging = current.x[lay.ch(t, k)] >= current.x[lay.dis(t, k)];
            fixed.push((t, k, charging));
        }
        let next = backend.solve(&problem.cone_problem_fixed(&fixed))?;
        iterations += next.iterations;
        solves += 1;
        current = next;
    }
    let out = package(problem, current, fixed, solves, iterations);
    if !out.complementarity_violations.is_empty() {
        log::warn!(
            "{} battery slots still violate complementarity after rounding",
            out.complementarity_violations.len()
        );
    }
    Ok(out)
}

fn enumerate(problem: &OpfProblem, backend: &dyn ConicBackend) -> Result<OpfSolution, OpfError> {
    let nb = problem.binaries.len();
    let limit = problem.config.enumeration_limit;
    if nb > limit {
        return Err(OpfError::Config(format!(
            "enumeration over {nb} binaries exceeds the limit of {limit}"
        )));
    }
    let mut best: Option<(ConeSolution, Vec<(usize, usize, bool)>)> = None;
    let mut last: Option<ConeSolution> = None;
    let mut iterations = 0;
    for mask in 0u64..(1u64 << nb) {
        let fixed: Vec<(usize, usize, bool)> = problem
            .binaries
            .iter()
            .enumerate()
            .map(|(i, &(t, k))| (t, k, mask >> i & 1 == 1))
            .collect();
        let sol = backend.solve(&problem.cone_problem_fixed(&fixed))?;
        iterations += sol.iterations;
        if sol.status == Status::Optimal {
            if best.as_ref().is_none_or(|(b, _)| sol.pcost < b.pcost) {
                best = Some((sol, fixed));
            }
        } else {
            last = Some(sol);
        }
    }
    let solves = 1usize << nb;
    Ok(match best {
        Some((sol, fixed)) => package(problem, sol, fixed, solves, iterations),
        None => package(problem, last.expect("at least one assignment"), Vec::new(), solves, iterations),
    })
}

fn diagnose(problem: &OpfProblem, backend: &dyn ConicBackend) -> Result<InfeasibilityHint, OpfError> {
    let feasible = |m: &super::Margins| -> Result<bool, OpfError> {
        let p = problem.with_margins(m)?;
        Ok(backend.solve(&p.cone_problem())?.status == Status::Optimal)
    };
    let m = &problem.margins;
    Ok(if feasible(&m.without_voltage())? {
        InfeasibilityHint::VoltageMargins
    } else if feasible(&m.without_flow())? {
        InfeasibilityHint::FlowMargins
    } else if feasible(&m.without_voltage().without_flow())? {
        InfeasibilityHint::VoltageAndFlowMargins
    } else {
        InfeasibilityHint::Deterministic
    })
}

/// Per-prosumer export limits and dispatch in kW.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeSchedule {
    pub bus_ids: Vec<u32>,
    /// `[k][t]`
    pub export_kw: Vec<Vec<f64>>,
    /// Solver fairness value γ_t.
    pub gamma_kw: Vec<f64>,
    /// Nominal reactive injection κ(pv − d), `[k][t]`.
    pub reactive_kvar: Vec<Vec<f64>>,
    pub pv_kw: Vec<Vec<f64>>,
    pub charge_kw: Vec<Vec<f64>>,
    pub discharge_kw: Vec<Vec<f64>>,
    pub soc_kwh: Vec<Vec<f64>>,
}

impl EnvelopeSchedule {
    pub fn slots(&self) -> usize {
        self.gamma_kw.len()
    }

    /// min_k export, recomputed from the limits.
    pub fn min_export_kw(&self, t: usize) -> f64 {
        self.export_kw.iter().map(|e| e[t]).fold(f64::INFINITY, f64::min)
    }

    /// Largest minus smallest export limit per slot.
    pub fn spread_kw(&self, t: usize) -> f64 {
        let max = self.export_kw.iter().map(|e| e[t]).fold(f64::NEG_INFINITY, f64::max);
        max - self.min_export_kw(t)
    }

    /// Exports multiplied by `factor`, everything else unchanged.
    pub fn scaled_exports(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.export_kw {
            row.iter_mut().for_each(|e| *e *= factor);
        }
        out
    }

    /// `prosumer_id,slot,export_limit_kw,gamma_kw`; `slot_offset` shifts
    /// slot numbers for multi-day files.
    pub fn write_csv<W: std::io::Write>(
        &self,
        wr: &mut csv::Writer<W>,
        slot_offset: usize,
    ) -> Result<(), csv::Error> {
        for (k, id) in self.bus_ids.iter().enumerate() {
            for t in 0..self.slots() {
                wr.write_record([
                    id.to_string(),
                    (t + slot_offset).to_string(),
                    format!("{:.6}", self.export_kw[k][t]),
                    format!("{:.6}", self.gamma_kw[t]),
                ])?;
            }
        }
        Ok(())
    }

    pub fn csv_header() -> [&'static str; 4] {
        ["prosumer_id", "slot", "export_limit_kw", "gamma_kw"]
    }
}

pub fn extract_envelopes(solution: &OpfSolution, problem: &OpfProblem) -> Result<EnvelopeSchedule, OpfError> {
    if !solution.is_optimal() {
        return Err(OpfError::NotOptimal(solution.status.to_string()));
    }
    let net = &problem.network;
    let lay = &problem.layout;
    let x = &solution.x;
    let kw = |v: f64| net.pu_to_kw(v);
    let (np, slots) = (lay.prosumers.len(), lay.slots);
    let per = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..np).map(|k| (0..slots).map(|t| f(t, k)).collect()).collect()
    };
    let kappa: Vec<f64> = lay
        .prosumers
        .iter()
        .map(|&b| net.buses[b].prosumer.as_ref().expect("prosumer").kappa())
        .collect();
    Ok(EnvelopeSchedule {
        bus_ids: lay.prosumers.iter().map(|&b| net.buses[b].id).collect(),
        export_kw: per(&|t, k| kw(x[lay.exp(t, k)])),
        gamma_kw: (0..slots).map(|t| kw(x[lay.gamma(t)])).collect(),
        reactive_kvar: per(&|t, k| kw(kappa[k] * (x[lay.pv(t, k)] - problem.demand_pu[k][t]))),
        pv_kw: per(&|t, k| kw(x[lay.pv(t, k)])),
        charge_kw: per(&|t, k| kw(x[lay.ch(t, k)])),
        discharge_kw: per(&|t, k| kw(x[lay.dis(t, k)])),
        soc_kwh: per(&|t, k| kw(x[lay.soc(t, k)])),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationReport {
    /// ℓ·v_i − (p² + q²) in pu², `[t][line]`.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
    pub min_residual: f64,
    /// `(t, line)` with residual above [`EXACTNESS_TOL`].
    pub inexact: Vec<(usize, usize)>,
    /// Largest |v| mismatch (pu²) between the cone solution and an AC sweep
    /// at the same injections.
    pub ac_voltage_mismatch: f64,
    /// Largest sending-end |p|, |q| mismatch (pu).
    pub ac_flow_mismatch: f64,
    /// Slots where the AC sweep failed to converge.
    pub ac_diverged: Vec<usize>,
}

impl RelaxationReport {
    pub fn is_exact(&self) -> bool {
        self.inexact.is_empty()
    }
}

pub fn verify_relaxation(solution: &OpfSolution, problem: &OpfProblem) -> RelaxationReport {
    let net = &problem.network;
    let tree = &problem.tree;
    let lay = &problem.layout;
    let x = &solution.x;
    let volt = |t: usize, b: usize| lay.v(t, b).map_or(net.slack_v, |c| x[c]);
    let mut residuals = Vec::with_capacity(lay.slots);
    let mut inexact = Vec::new();
    let (mut max_r, mut min_r) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut vm, mut fm) = (0.0f64, 0.0f64);
    let mut diverged = Vec::new();
    for t in 0..lay.slots {
        let mut row = Vec::with_capacity(net.lines.len());
        for l in 0..net.lines.len() {
            let (p, q, ell) = (x[lay.p(t, l)], x[lay.q(t, l)], x[lay.ell(t, l)]);
            let r = ell * volt(t, tree.line_parent(l)) - (p * p + q * q);
            if r > EXACTNESS_TOL {
                inexact.push((t, l));
            }
            max_r = max_r.max(r);
            min_r = min_r.min(r);
            row.push(r);
        }
        residuals.push(row);

        let mut ip = vec![0.0; net.buses.len()];
        let mut iq = vec![0.0; net.buses.len()];
        for (k, &b) in lay.prosumers.iter().enumerate() {
            let kappa = net.buses[b].prosumer.as_ref().expect("prosumer").kappa();
            ip[b] = x[lay.exp(t, k)];
            iq[b] = kappa * (x[lay.pv(t, k)] - problem.demand_pu[k][t]);
        }
        let pf = power_flow(net, tree, &ip, &iq);
        if !pf.converged {
            diverged.push(t);
            continue;
        }
        for b in 0..net.buses.len() {
            vm = vm.max((pf.v[b] - volt(t, b)).abs());
        }
        for l in 0..net.lines.len() {
            fm = fm.max((pf.p[l] - x[lay.p(t, l)]).abs());
            fm = fm.max((pf.q[l] - x[lay.q(t, l)]).abs());
        }
    }
    RelaxationReport {
        residuals,
        max_residual: max_r,
        min_residual: min_r,
        inexact,
        ac_voltage_mismatch: vm,
        ac_flow_mismatch: fm,
        ac_diverged: diverged,
    }
}
