//! Radial distribution-network model: ingestion, validation and path
//! sensitivities.
//!
//! Voltages are squared magnitudes in per unit. Line impedances and limits are
//! per unit on (`base_mva`, `base_kv`). Prosumer assets stay in kW / kWh and
//! are converted with [`Network::kw_to_pu`] where needed.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::path::Path;

pub const DEFAULT_ETA: f64 = 0.95;
pub const DEFAULT_POWER_FACTOR: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProsumerAssets {
    pub pv_cap: f64,
    pub batt_p_min: f64,
    pub batt_p_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub eta: f64,
    pub power_factor: f64,
}

impl ProsumerAssets {
    /// Reactive-to-active ratio tan(arccos(pf)).
    pub fn kappa(&self) -> f64 {
        let pf = self.power_factor;
        (1.0 - pf * pf).max(0.0).sqrt() / pf
    }

    pub fn has_battery(&self) -> bool {
        self.batt_p_max > 0.0 || self.batt_p_min < 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub prosumer: Option<ProsumerAssets>,
    pub v_min: f64,
    pub v_max: f64,
    pub slack: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub s_max: f64,
}

impl Line {
    pub fn z2(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub slack_v: f64,
    pub base_mva: f64,
    pub base_kv: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading network file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid network data: {0}")]
    Invalid(String),
    #[error("network is not radial: {0}")]
    NotRadial(ValidationReport),
}

// ---------------------------------------------------------------------------
// file format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub base_mva: f64,
    pub base_kv: f64,
    /// Source voltage magnitude in per unit (squared on ingestion).
    pub slack_v: f64,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: u32,
    /// Signed deviation from nominal magnitude, e.g. -6 for 0.94 pu.
    pub v_min_pct: f64,
    pub v_max_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prosumer: Option<ProsumerRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub slack: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProsumerRecord {
    pub pv_cap_kw: f64,
    pub batt_p_max_kw: f64,
    pub batt_p_min_kw: f64,
    pub soc_min_kwh: f64,
    pub soc_max_kwh: f64,
    pub soc_init_kwh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_factor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: u32,
    pub to: u32,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub s_max_kva: f64,
}

fn pct_to_v2(pct: f64) -> f64 {
    let m = 1.0 + pct / 100.0;
    m * m
}

fn v2_to_pct(v: f64) -> f64 {
    (v.sqrt() - 1.0) * 100.0
}

impl NetworkFile {
    pub fn into_network(self) -> Result<Network, NetError> {
        if !(self.base_mva > 0.0) || !(self.base_kv > 0.0) {
            return Err(NetError::Invalid(format!(
                "base_mva and base_kv must be positive (got {}, {})",
                self.base_mva, self.base_kv
            )));
        }
        if !(self.slack_v > 0.0) {
            return Err(NetError::Invalid(format!("slack_v must be positive, got {}", self.slack_v)));
        }
        let z_base = self.base_kv * self.base_kv / self.base_mva;
        let s_base_kva = self.base_mva * 1000.0;
        let any_slack = self.buses.iter().any(|b| b.slack);
        let mut buses = Vec::with_capacity(self.buses.len());
        for (k, b) in self.buses.into_iter().enumerate() {
            let v_min = pct_to_v2(b.v_min_pct);
            let v_max = pct_to_v2(b.v_max_pct);
            if !(v_min < v_max) || b.v_min_pct <= -100.0 {
                return Err(NetError::Invalid(format!(
                    "bus {}: v_min_pct {} must be below v_max_pct {}",
                    b.id, b.v_min_pct, b.v_max_pct
                )));
            }
            let prosumer = match b.prosumer {
                None => None,
                Some(p) => Some(p.into_assets(b.id)?),
            };
            buses.push(Bus {
                id: b.id,
                prosumer,
                v_min,
                v_max,
                slack: if any_slack { b.slack } else { k == 0 },
            });
        }
        let mut lines = Vec::with_capacity(self.lines.len());
        for (k, l) in self.lines.into_iter().enumerate() {
            if !(l.r_ohm >= 0.0) || !(l.x_ohm >= 0.0) || !(l.s_max_kva > 0.0) {
                return Err(NetError::Invalid(format!(
                    "line {k} ({}-{}): need r_ohm >= 0, x_ohm >= 0, s_max_kva > 0",
                    l.from, l.to
                )));
            }
            lines.push(Line {
                from: l.from,
                to: l.to,
                r: l.r_ohm / z_base,
                x: l.x_ohm / z_base,
                s_max: l.s_max_kva / s_base_kva,
            });
        }
        Ok(Network {
            buses,
            lines,
            slack_v: self.slack_v * self.slack_v,
            base_mva: self.base_mva,
            base_kv: self.base_kv,
        })
    }
}

impl ProsumerRecord {
    fn into_assets(self, bus: u32) -> Result<ProsumerAssets, NetError> {
        let a = ProsumerAssets {
            pv_cap: self.pv_cap_kw,
            batt_p_min: self.batt_p_min_kw,
            batt_p_max: self.batt_p_max_kw,
            soc_min: self.soc_min_kwh,
            soc_max: self.soc_max_kwh,
            soc_init: self.soc_init_kwh,
            eta: self.eta.unwrap_or(DEFAULT_ETA),
            power_factor: self.power_factor.unwrap_or(DEFAULT_POWER_FACTOR),
        };
        let bad = |msg: &str| Err(NetError::Invalid(format!("bus {bus} prosumer: {msg}")));
        if !(a.pv_cap >= 0.0) {
            return bad("pv_cap_kw must be nonnegative");
        }
        if !(a.batt_p_min <= 0.0 && a.batt_p_max >= 0.0) {
            return bad("need batt_p_min_kw <= 0 <= batt_p_max_kw");
        }
        if !(a.soc_min <= a.soc_init && a.soc_init <= a.soc_max) {
            return bad("need soc_min_kwh <= soc_init_kwh <= soc_max_kwh");
        }
        if !(a.eta > 0.0 && a.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(a.power_factor > 0.0 && a.power_factor <= 1.0) {
            return bad("power_factor must lie in (0, 1]");
        }
        Ok(a)
    }
}

impl Network {
    pub fn from_json_str(s: &str) -> Result<Self, NetError> {
        let file: NetworkFile = serde_json::from_str(s)?;
        file.into_network()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&s)
    }

    /// The 26-bus (slack + 25 prosumers) reference feeder shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json_str(include_str!("../data/network25.json"))
            .expect("bundled network is well-formed")
    }

    pub fn to_file(&self) -> NetworkFile {
        let z_base = self.z_base();
        let s_base_kva = self.base_mva * 1000.0;
        NetworkFile {
            base_mva: self.base_mva,
            base_kv: self.base_kv,
            slack_v: self.slack_v.sqrt(),
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    v_min_pct: v2_to_pct(b.v_min),
                    v_max_pct: v2_to_pct(b.v_max),
                    prosumer: b.prosumer.as_ref().map(|p| ProsumerRecord {
                        pv_cap_kw: p.pv_cap,
                        batt_p_max_kw: p.batt_p_max,
                        batt_p_min_kw: p.batt_p_min,
                        soc_min_kwh: p.soc_min,
                        soc_max_kwh: p.soc_max,
                        soc_init_kwh: p.soc_init,
                        eta: Some(p.eta),
                        power_factor: Some(p.power_factor),
                    }),
                    slack: b.slack,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: l.from,
                    to: l.to,
                    r_ohm: l.r * z_base,
                    x_ohm: l.x * z_base,
                    s_max_kva: l.s_max * s_base_kva,
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("network serializes")
    }

    pub fn z_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / (self.base_mva * 1000.0)
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.base_mva * 1000.0
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Indices of buses carrying a prosumer, in bus order.
    pub fn prosumer_buses(&self) -> Vec<usize> {
        (0..self.buses.len())
            .filter(|&i| self.buses[i].prosumer.is_some())
            .collect()
    }

    pub fn validate_radial(&self) -> ValidationReport {
        let mut defects = Vec::new();
        let slacks: Vec<u32> = self.buses.iter().filter(|b| b.slack).map(|b| b.id).collect();
        match slacks.len() {
            0 => defects.push(Defect::NoSlack),
            1 => {}
            _ => defects.push(Defect::MultipleSlack(slacks)),
        }
        let mut index: HashMap<u32, usize> = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                defects.push(Defect::DuplicateBus(b.id));
            }
        }
        let mut uf = UnionFind::new(self.buses.len());
        for (k, l) in self.lines.iter().enumerate() {
            let (Some(&a), Some(&b)) = (index.get(&l.from), index.get(&l.to)) else {
                for id in [l.from, l.to] {
                    if !index.contains_key(&id) {
                        defects.push(Defect::UnknownBus { line: k, bus: id });
                    }
                }
                continue;
            };
            if a == b {
                defects.push(Defect::SelfLoop { line: k, bus: l.from });
            } else if !uf.union(a, b) {
                defects.push(Defect::Cycle {
                    line: k,
                    from: l.from,
                    to: l.to,
                });
            }
        }
        let root = self
            .buses
            .iter()
            .position(|b| b.slack)
            .unwrap_or(0);
        if !self.buses.is_empty() {
            let mut comps: Vec<(usize, Vec<u32>)> = Vec::new();
            let r = uf.find(root);
            for (i, b) in self.buses.iter().enumerate() {
                let c = uf.find(i);
                if c == r {
                    continue;
                }
                match comps.iter_mut().find(|(k, _)| *k == c) {
                    Some((_, v)) => v.push(b.id),
                    None => comps.push((c, vec![b.id])),
                }
            }
            for (_, buses) in comps {
                defects.push(Defect::Disconnected { buses });
            }
        }
        ValidationReport { defects }
    }

    /// Orientation of the feeder away from the slack bus.
    pub fn tree(&self) -> Result<Tree, NetError> {
        let report = self.validate_radial();
        if !report.is_ok() {
            return Err(NetError::NotRadial(report));
        }
        let n = self.buses.len();
        let slack = self.buses.iter().position(|b| b.slack).expect("validated");
        let index: HashMap<u32, usize> =
            self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, l) in self.lines.iter().enumerate() {
            let (a, b) = (index[&l.from], index[&l.to]);
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let mut parent = vec![None; n];
        let mut parent_line = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut depth = vec![0usize; n];
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    parent_line[v] = Some(k);
                    children[u].push(v);
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let mut line_child = vec![0; self.lines.len()];
        for v in 0..n {
            if let Some(k) = parent_line[v] {
                line_child[k] = v;
            }
        }
        Ok(Tree {
            slack,
            parent,
            parent_line,
            children,
            depth,
            order,
            line_child,
        })
    }

    pub fn path_sensitivities(&self) -> Result<SensitivityMatrices, NetError> {
        let tree = self.tree()?;
        Ok(SensitivityMatrices::from_tree(self, &tree))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Defect {
    NoSlack,
    MultipleSlack(Vec<u32>),
    DuplicateBus(u32),
    UnknownBus { line: usize, bus: u32 },
    SelfLoop { line: usize, bus: u32 },
    Cycle { line: usize, from: u32, to: u32 },
    Disconnected { buses: Vec<u32> },
}

impl std::fmt::Display for Defect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Defect::NoSlack => write!(f, "no slack bus"),
            Defect::MultipleSlack(ids) => write!(f, "multiple slack buses {ids:?}"),
            Defect::DuplicateBus(id) => write!(f, "duplicate bus id {id}"),
            Defect::UnknownBus { line, bus } => write!(f, "line {line} references unknown bus {bus}"),
            Defect::SelfLoop { line, bus } => write!(f, "line {line} is a self loop on bus {bus}"),
            Defect::Cycle { line, from, to } => write!(f, "cycle: line {line} ({from}-{to}) closes a loop"),
            Defect::Disconnected { buses } => write!(f, "disconnected component {buses:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub defects: Vec<Defect>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.defects.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.defects.is_empty() {
            return write!(f, "no defects");
        }
        let parts: Vec<String> = self.defects.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Returns false when a and b were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}

/// Feeder oriented from the slack bus. Bus and line references are indices
/// into `Network::buses` / `Network::lines`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub slack: usize,
    pub parent: Vec<Option<usize>>,
    pub parent_line: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub depth: Vec<usize>,
    /// Breadth-first order starting at the slack.
    pub order: Vec<usize>,
    /// The downstream bus of each line.
    pub line_child: Vec<usize>,
}

impl Tree {
    pub fn line_parent(&self, line: usize) -> usize {
        self.parent[self.line_child[line]].expect("line child has a parent")
    }

    /// Lines on the path from the slack to `bus`, nearest the bus first.
    pub fn path_lines(&self, mut bus: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(k) = self.parent_line[bus] {
            out.push(k);
            bus = self.parent[bus].expect("non-slack bus has parent");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    /// Common-path resistance sums, indexed by bus.
    pub r: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    /// Buses fed through each line (the line's child subtree).
    pub downstream: Vec<Vec<usize>>,
}

impl SensitivityMatrices {
    fn from_tree(net: &Network, tree: &Tree) -> Self {
        let n = net.buses.len();
        let mut r = vec![vec![0.0; n]; n];
        let mut x = vec![vec![0.0; n]; n];
        let mut downstream = vec![Vec::new(); net.lines.len()];
        for &v in tree.order.iter().rev() {
            if let Some(k) = tree.parent_line[v] {
                let mut sub = vec![v];
                for &c in &tree.children[v] {
                    let kc = tree.parent_line[c].expect("child line");
                    sub.extend_from_slice(&downstream[kc]);
                }
                sub.sort_unstable();
                downstream[k] = sub;
            }
        }
        // path(v) = path(u) + line k, so R[v][j] = R[u][j] + r_k when j is fed
        // through k
        for &v in &tree.order {
            let Some(k) = tree.parent_line[v] else { continue };
            let u = tree.parent[v].expect("parent");
            let line = &net.lines[k];
            for j in 0..n {
                r[v][j] = r[u][j];
                x[v][j] = x[u][j];
            }
            for &j in &downstream[k] {
                r[v][j] += line.r;
                x[v][j] += line.x;
            }
        }
        Self { r, x, downstream }
    }
}
