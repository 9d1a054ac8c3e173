use conic::{Cone, ConeProblem, Triplets};

use super::{Margins, NodeForecast, OpfConfig, OpfError};
use crate::netmodel::{Network, SensitivityMatrices, Tree};

/// Column layout. Each slot owns a contiguous block
/// `p[L] q[L] ℓ[L] v[N-1] pv[P] ch[P] dis[P] exp[P] e[P] γ`,
/// and the P·T battery binaries follow all continuous columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub slots: usize,
    pub lines: usize,
    pub buses: usize,
    /// Bus index of each prosumer, in network order.
    pub prosumers: Vec<usize>,
    /// Position of each non-slack bus inside the voltage sub-block.
    v_pos: Vec<Option<usize>>,
    per_slot: usize,
}

impl Layout {
    pub fn new(net: &Network, tree: &Tree) -> Self {
        let mut v_pos = vec![None; net.buses.len()];
        let mut k = 0;
        for (b, pos) in v_pos.iter_mut().enumerate() {
            if b != tree.slack {
                *pos = Some(k);
                k += 1;
            }
        }
        let prosumers = net.prosumer_buses();
        let (l, n, p) = (net.lines.len(), net.buses.len(), prosumers.len());
        Self {
            slots: 0,
            lines: l,
            buses: n,
            prosumers,
            v_pos,
            per_slot: 3 * l + (n - 1) + 5 * p + 1,
        }
    }

    fn with_slots(mut self, slots: usize) -> Self {
        self.slots = slots;
        self
    }

    fn np(&self) -> usize {
        self.prosumers.len()
    }

    fn base(&self, t: usize) -> usize {
        t * self.per_slot
    }

    pub fn p(&self, t: usize, l: usize) -> usize {
        self.base(t) + l
    }
    pub fn q(&self, t: usize, l: usize) -> usize {
        self.base(t) + self.lines + l
    }
    pub fn ell(&self, t: usize, l: usize) -> usize {
        self.base(t) + 2 * self.lines + l
    }
    /// Squared-voltage column of a bus; `None` at the slack.
    pub fn v(&self, t: usize, bus: usize) -> Option<usize> {
        self.v_pos[bus].map(|k| self.base(t) + 3 * self.lines + k)
    }
    fn prosumer_base(&self, t: usize) -> usize {
        self.base(t) + 3 * self.lines + self.buses - 1
    }
    pub fn pv(&self, t: usize, k: usize) -> usize {
        self.prosumer_base(t) + k
    }
    pub fn ch(&self, t: usize, k: usize) -> usize {
        self.prosumer_base(t) + self.np() + k
    }
    pub fn dis(&self, t: usize, k: usize) -> usize {
        self.prosumer_base(t) + 2 * self.np() + k
    }
    pub fn exp(&self, t: usize, k: usize) -> usize {
        self.prosumer_base(t) + 3 * self.np() + k
    }
    pub fn soc(&self, t: usize, k: usize) -> usize {
        self.prosumer_base(t) + 4 * self.np() + k
    }
    pub fn gamma(&self, t: usize) -> usize {
        self.prosumer_base(t) + 5 * self.np()
    }
    pub fn bin(&self, t: usize, k: usize) -> usize {
        self.num_continuous() + t * self.np() + k
    }

    pub fn num_continuous(&self) -> usize {
        self.slots * self.per_slot
    }
    pub fn num_binary(&self) -> usize {
        self.slots * self.np()
    }
    pub fn num_vars(&self) -> usize {
        self.num_continuous() + self.num_binary()
    }
}

/// Positions of selected constraint rows, for reading duals back.
/// Inequality rows index the conic slack/dual vectors `s`, `z`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowMap {
    /// `γ_t − exp_{k,t} ≤ 0`, `[t][k]`.
    pub gamma: Vec<Vec<usize>>,
    /// `exp_{k,t} ≤ cap`, `[t][k]`.
    pub export_cap: Vec<Vec<usize>>,
    /// Lower squared-voltage bound, `[t][bus]` (none at the slack).
    pub v_min: Vec<Vec<Option<usize>>>,
    /// Linearized upper squared-voltage bound, `[t][bus]`.
    pub v_max: Vec<Vec<Option<usize>>>,
    /// First row of the branch-flow relaxation cone, `[t][line]`.
    pub relax_cone: Vec<Vec<usize>>,
    /// First row of the apparent-power cone, `[t][line]`.
    pub flow_cone: Vec<Vec<usize>>,
    /// First row of the lossless export-flow cone, `[t][line]`; none when
    /// no prosumer sits downstream.
    pub export_cone: Vec<Vec<Option<usize>>>,
}

/// Assembled mixed-integer cone program with everything needed to re-solve,
/// fix binaries and interpret the solution.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    pub network: Network,
    pub tree: Tree,
    pub sens: SensitivityMatrices,
    /// One forecast per prosumer, in `layout.prosumers` order.
    pub forecasts: Vec<NodeForecast>,
    pub margins: Margins,
    pub config: OpfConfig,
    pub layout: Layout,
    pub rows: RowMap,
    /// Binary columns that carry a battery decision, as `(t, k)`.
    pub binaries: Vec<(usize, usize)>,
    /// Mean demand in pu, `[k][t]`.
    pub demand_pu: Vec<Vec<f64>>,
    /// Available PV (clamped mean) in pu, `[k][t]`.
    pub pv_avail_pu: Vec<Vec<f64>>,
    c: Vec<f64>,
    a: Triplets,
    b: Vec<f64>,
    g: Triplets,
    h: Vec<f64>,
    cones: Vec<Cone>,
}

impl OpfProblem {
    pub fn slots(&self) -> usize {
        self.layout.slots
    }

    pub fn objective_vector(&self) -> &[f64] {
        &self.c
    }

    pub fn num_equalities(&self) -> usize {
        self.b.len()
    }

    pub fn num_inequality_rows(&self) -> usize {
        self.h.len()
    }

    /// The relaxed cone program (binaries in [0, 1]).
    pub fn cone_problem(&self) -> ConeProblem {
        self.cone_problem_fixed(&[])
    }

    /// The cone program with `(t, k, value)` binaries pinned by equality rows.
    pub fn cone_problem_fixed(&self, fixed: &[(usize, usize, bool)]) -> ConeProblem {
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        for &(t, k, val) in fixed {
            let row = b.len();
            a.set_nrows(row + 1);
            a.push(row, self.layout.bin(t, k), 1.0);
            b.push(if val { 1.0 } else { 0.0 });
        }
        ConeProblem {
            c: self.c.clone(),
            a: a.to_csc(),
            b,
            g: self.g.to_csc(),
            h: self.h.clone(),
            cones: self.cones.clone(),
        }
    }

    /// Human-readable name of every column, e.g. `exp[7]@3` or `p[0-1]@0`.
    pub fn column_labels(&self) -> Vec<String> {
        let lay = &self.layout;
        let net = &self.network;
        let mut out = vec![String::new(); lay.num_vars()];
        for t in 0..lay.slots {
            for l in 0..net.lines.len() {
                let (a, b) = (net.buses[self.tree.line_parent(l)].id, net.buses[self.tree.line_child[l]].id);
                out[lay.p(t, l)] = format!("p[{a}-{b}]@{t}");
                out[lay.q(t, l)] = format!("q[{a}-{b}]@{t}");
                out[lay.ell(t, l)] = format!("l[{a}-{b}]@{t}");
            }
            for (j, bus) in net.buses.iter().enumerate() {
                if let Some(c) = lay.v(t, j) {
                    out[c] = format!("v[{}]@{t}", bus.id);
                }
            }
            for (k, &b) in lay.prosumers.iter().enumerate() {
                let id = net.buses[b].id;
                out[lay.pv(t, k)] = format!("pv[{id}]@{t}");
                out[lay.ch(t, k)] = format!("ch[{id}]@{t}");
                out[lay.dis(t, k)] = format!("dis[{id}]@{t}");
                out[lay.exp(t, k)] = format!("exp[{id}]@{t}");
                out[lay.soc(t, k)] = format!("e[{id}]@{t}");
                out[lay.bin(t, k)] = format!("b[{id}]@{t}");
            }
            out[lay.gamma(t)] = format!("gamma@{t}");
        }
        out
    }

    /// Reassemble with different margins (infeasibility diagnosis).
    pub fn with_margins(&self, margins: &Margins) -> Result<OpfProblem, OpfError> {
        assemble_problem(&self.network, &self.forecasts, margins, &self.config)
    }

    /// Reassemble with a different objective weighting.
    pub fn with_config(&self, config: &OpfConfig) -> Result<OpfProblem, OpfError> {
        assemble_problem(&self.network, &self.forecasts, &self.margins, config)
    }
}

struct Rows {
    t: Triplets,
    rhs: Vec<f64>,
}

impl Rows {
    fn new(ncols: usize) -> Self {
        Self {
            t: Triplets::new(0, ncols),
            rhs: Vec::new(),
        }
    }

    fn add(&mut self, entries: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.rhs.len();
        self.t.set_nrows(row + 1);
        for &(c, v) in entries {
            if v != 0.0 {
                self.t.push(row, c, v);
            }
        }
        self.rhs.push(rhs);
        row
    }
}

/// Build the envelope MISOCP for the horizon of `forecasts`.
///
/// Every non-slack bus j fed by line l = (i, j) gets the branch-flow balance
/// and voltage-drop equalities; every line a relaxation cone
/// `ℓ·v_i ≥ p² + q²`, a tightened apparent-power cone on the sending-end flow
/// and, when prosumers are downstream, the same limit on the lossless export
/// flow. The upper voltage limit is imposed on the lossless linearized
/// voltage, which bounds the branch-flow voltage from above on radial feeders.
pub fn assemble_problem(
    net: &Network,
    forecasts: &[NodeForecast],
    margins: &Margins,
    config: &OpfConfig,
) -> Result<OpfProblem, OpfError> {
    let tree = net.tree()?;
    let sens = net.path_sensitivities()?;
    let slots = forecasts.first().map_or(0, |f| f.slots());
    if slots == 0 {
        return Err(OpfError::Forecast("empty forecast horizon".into()));
    }
    if !(config.dt_hours > 0.0) || !(config.export_cap_kw >= 0.0) {
        return Err(OpfError::Config("dt_hours must be > 0 and export_cap_kw >= 0".into()));
    }
    let layout = Layout::new(net, &tree).with_slots(slots);
    let np = layout.prosumers.len();
    let (nl, nb) = (net.lines.len(), net.buses.len());
    if margins.voltage.len() != nb || margins.flow.len() != nl || margins.slots() != slots {
        return Err(OpfError::Forecast("margins do not match the network and horizon".into()));
    }
    if margins
        .voltage
        .iter()
        .chain(&margins.flow)
        .flatten()
        .any(|m| !(*m >= 0.0) || !m.is_finite())
    {
        return Err(OpfError::Config("margins must be finite and nonnegative".into()));
    }

    // forecasts ordered like the prosumer buses
    let mut ordered = Vec::with_capacity(np);
    for &bus in &layout.prosumers {
        let id = net.buses[bus].id;
        let f = forecasts
            .iter()
            .find(|f| f.bus_id == id)
            .ok_or_else(|| OpfError::Forecast(format!("no forecast for prosumer bus {id}")))?;
        for prof in [&f.demand, &f.pv] {
            if prof.mu.len() != slots || prof.sigma.len() != slots {
                return Err(OpfError::Forecast(format!("bus {id}: forecast horizon differs")));
            }
            if prof.mu.iter().any(|v| !v.is_finite()) {
                return Err(OpfError::Forecast(format!("bus {id}: non-finite forecast mean")));
            }
        }
        ordered.push(f.clone());
    }
    if forecasts.len() != np {
        return Err(OpfError::Forecast(format!(
            "{} forecasts for {np} prosumers",
            forecasts.len()
        )));
    }

    let assets: Vec<_> = layout
        .prosumers
        .iter()
        .map(|&b| net.buses[b].prosumer.clone().expect("prosumer bus"))
        .collect();
    for (k, a) in assets.iter().enumerate() {
        let id = net.buses[layout.prosumers[k]].id;
        if a.soc_min > a.soc_max || a.soc_init < a.soc_min || a.soc_init > a.soc_max {
            return Err(OpfError::InfeasibleBounds(format!(
                "bus {id}: soc_init {} outside [{}, {}]",
                a.soc_init, a.soc_min, a.soc_max
            )));
        }
        if a.batt_p_min > 0.0 || a.batt_p_max < 0.0 || a.pv_cap < 0.0 {
            return Err(OpfError::InfeasibleBounds(format!(
                "bus {id}: battery limits must straddle zero and PV capacity be >= 0"
            )));
        }
        if !(a.eta > 0.0 && a.eta <= 1.0) {
            return Err(OpfError::InfeasibleBounds(format!("bus {id}: efficiency {}", a.eta)));
        }
    }

    let pu = |kw: f64| net.kw_to_pu(kw);
    let demand_pu: Vec<Vec<f64>> = ordered
        .iter()
        .map(|f| f.demand.mu.iter().map(|&d| pu(d.max(0.0))).collect())
        .collect();
    let pv_avail_pu: Vec<Vec<f64>> = ordered
        .iter()
        .zip(&assets)
        .map(|(f, a)| f.pv.mu.iter().map(|&p| pu(p.clamp(0.0, a.pv_cap))).collect())
        .collect();

    let n = layout.num_vars();
    let v0 = net.slack_v;
    let cap = pu(config.export_cap_kw);
    let dt = config.dt_hours;
    let mut c = vec![0.0; n];
    let mut eq = Rows::new(n);
    let mut ineq = Rows::new(n);
    let mut rows = RowMap::default();
    let mut binaries = Vec::new();

    for t in 0..slots {
        c[layout.gamma(t)] = -1.0;
        for k in 0..np {
            c[layout.exp(t, k)] = -config.fairness_tiebreak;
        }
        for (l, line) in net.lines.iter().enumerate() {
            c[layout.ell(t, l)] = config.loss_weight * line.r;
        }
    }

    // prosumer index by bus
    let mut pros_of = vec![None; nb];
    for (k, &b) in layout.prosumers.iter().enumerate() {
        pros_of[b] = Some(k);
    }
    let kappa: Vec<f64> = assets.iter().map(|a| a.kappa()).collect();

    // equalities
    for t in 0..slots {
        for &j in &tree.order {
            let Some(l) = tree.parent_line[j] else { continue };
            let i = tree.parent[j].expect("parent");
            let line = &net.lines[l];
            let mut act = vec![(layout.p(t, l), 1.0), (layout.ell(t, l), -line.r)];
            let mut rea = vec![(layout.q(t, l), 1.0), (layout.ell(t, l), -line.x)];
            let mut rea_rhs = 0.0;
            if let Some(k) = pros_of[j] {
                act.push((layout.exp(t, k), 1.0));
                rea.push((layout.pv(t, k), kappa[k]));
                rea_rhs = kappa[k] * demand_pu[k][t];
            }
            for &ch in &tree.children[j] {
                let lc = tree.parent_line[ch].expect("child line");
                act.push((layout.p(t, lc), -1.0));
                rea.push((layout.q(t, lc), -1.0));
            }
            eq.add(&act, 0.0);
            eq.add(&rea, rea_rhs);
            let mut drop = vec![
                (layout.v(t, j).expect("non-slack"), 1.0),
                (layout.p(t, l), 2.0 * line.r),
                (layout.q(t, l), 2.0 * line.x),
                (layout.ell(t, l), -line.z2()),
            ];
            let rhs = match layout.v(t, i) {
                Some(vi) => {
                    drop.push((vi, -1.0));
                    0.0
                }
                None => v0,
            };
            eq.add(&drop, rhs);
        }
        for (k, a) in assets.iter().enumerate() {
            eq.add(
                &[
                    (layout.exp(t, k), 1.0),
                    (layout.pv(t, k), -1.0),
                    (layout.ch(t, k), 1.0),
                    (layout.dis(t, k), -1.0),
                ],
                -demand_pu[k][t],
            );
            if a.has_battery() {
                let mut dyn_row = vec![
                    (layout.soc(t, k), 1.0),
                    (layout.ch(t, k), -a.eta * dt),
                    (layout.dis(t, k), dt / a.eta),
                ];
                let rhs = if t == 0 {
                    pu(a.soc_init)
                } else {
                    dyn_row.push((layout.soc(t - 1, k), -1.0));
                    0.0
                };
                eq.add(&dyn_row, rhs);
                binaries.push((t, k));
            } else {
                eq.add(&[(layout.ch(t, k), 1.0)], 0.0);
                eq.add(&[(layout.dis(t, k), 1.0)], 0.0);
                eq.add(&[(layout.soc(t, k), 1.0)], 0.0);
                eq.add(&[(layout.bin(t, k), 1.0)], 0.0);
            }
            if pv_avail_pu[k][t] <= 0.0 {
                eq.add(&[(layout.pv(t, k), 1.0)], 0.0);
            }
        }
    }

    // linear inequalities
    rows.gamma = vec![Vec::with_capacity(np); slots];
    rows.export_cap = vec![Vec::with_capacity(np); slots];
    rows.v_min = vec![vec![None; nb]; slots];
    rows.v_max = vec![vec![None; nb]; slots];
    for t in 0..slots {
        for (k, a) in assets.iter().enumerate() {
            if pv_avail_pu[k][t] > 0.0 {
                ineq.add(&[(layout.pv(t, k), -1.0)], 0.0);
                ineq.add(&[(layout.pv(t, k), 1.0)], pv_avail_pu[k][t]);
            }
            if a.has_battery() {
                let (pc, pd) = (pu(a.batt_p_max), pu(-a.batt_p_min));
                let b = layout.bin(t, k);
                ineq.add(&[(layout.ch(t, k), -1.0)], 0.0);
                ineq.add(&[(layout.ch(t, k), 1.0), (b, -pc)], 0.0);
                ineq.add(&[(layout.dis(t, k), -1.0)], 0.0);
                ineq.add(&[(layout.dis(t, k), 1.0), (b, pd)], pd);
                ineq.add(&[(layout.soc(t, k), 1.0)], pu(a.soc_max));
                ineq.add(&[(layout.soc(t, k), -1.0)], -pu(a.soc_min));
                ineq.add(&[(b, 1.0)], 1.0);
                ineq.add(&[(b, -1.0)], 0.0);
            }
            rows.export_cap[t].push(ineq.add(&[(layout.exp(t, k), 1.0)], cap));
            rows.gamma[t].push(ineq.add(&[(layout.gamma(t), 1.0), (layout.exp(t, k), -1.0)], 0.0));
        }
        for j in 0..nb {
            let Some(vj) = layout.v(t, j) else { continue };
            let bus = &net.buses[j];
            let m = margins.voltage[j][t];
            rows.v_min[t][j] = Some(ineq.add(&[(vj, -1.0)], -(bus.v_min + m)));
            let mut lin = Vec::with_capacity(2 * np);
            let mut rhs = bus.v_max - m - v0;
            for (k, &bk) in layout.prosumers.iter().enumerate() {
                let (r, x) = (sens.r[j][bk], sens.x[j][bk]);
                lin.push((layout.exp(t, k), 2.0 * r));
                lin.push((layout.pv(t, k), 2.0 * x * kappa[k]));
                rhs += 2.0 * x * kappa[k] * demand_pu[k][t];
            }
            rows.v_max[t][j] = Some(ineq.add(&lin, rhs));
        }
    }
    let nonneg = ineq.rhs.len();
    let mut cones = vec![Cone::NonNeg(nonneg)];

    // second-order cones
    rows.relax_cone = vec![Vec::with_capacity(nl); slots];
    rows.flow_cone = vec![Vec::with_capacity(nl); slots];
    rows.export_cone = vec![Vec::with_capacity(nl); slots];
    for t in 0..slots {
        for (l, line) in net.lines.iter().enumerate() {
            let i = tree.line_parent(l);
            let (p, q, ell) = (layout.p(t, l), layout.q(t, l), layout.ell(t, l));
            let start = ineq.rhs.len();
            match layout.v(t, i) {
                Some(vi) => {
                    ineq.add(&[(ell, -1.0), (vi, -1.0)], 0.0);
                    ineq.add(&[(p, -2.0)], 0.0);
                    ineq.add(&[(q, -2.0)], 0.0);
                    ineq.add(&[(ell, -1.0), (vi, 1.0)], 0.0);
                }
                None => {
                    ineq.add(&[(ell, -1.0)], v0);
                    ineq.add(&[(p, -2.0)], 0.0);
                    ineq.add(&[(q, -2.0)], 0.0);
                    ineq.add(&[(ell, -1.0)], -v0);
                }
            }
            rows.relax_cone[t].push(start);
            cones.push(Cone::Soc(4));

            let limit = line.s_max - margins.flow[l][t];
            let start = ineq.rhs.len();
            ineq.add(&[], limit);
            ineq.add(&[(p, -1.0)], 0.0);
            ineq.add(&[(q, -1.0)], 0.0);
            rows.flow_cone[t].push(start);
            cones.push(Cone::Soc(3));

            let down: Vec<usize> = sens.downstream[l].iter().filter_map(|&b| pros_of[b]).collect();
            if down.is_empty() {
                rows.export_cone[t].push(None);
                continue;
            }
            let start = ineq.rhs.len();
            ineq.add(&[], limit);
            let ps: Vec<(usize, f64)> = down.iter().map(|&k| (layout.exp(t, k), 1.0)).collect();
            ineq.add(&ps, 0.0);
            let qs: Vec<(usize, f64)> = down.iter().map(|&k| (layout.pv(t, k), kappa[k])).collect();
            let qd: f64 = down.iter().map(|&k| kappa[k] * demand_pu[k][t]).sum();
            ineq.add(&qs, qd);
            rows.export_cone[t].push(Some(start));
            cones.push(Cone::Soc(3));
        }
    }

    Ok(OpfProblem {
        network: net.clone(),
        tree,
        sens,
        forecasts: ordered,
        margins: margins.clone(),
        config: config.clone(),
        layout,
        rows,
        binaries,
        demand_pu,
        pv_avail_pu,
        c,
        a: eq.t,
        b: eq.rhs,
        g: ineq.t,
        h: ineq.rhs,
        cones,
    })
}
