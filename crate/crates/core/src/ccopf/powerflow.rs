use crate::netmodel::{Network, Tree};

pub const SWEEP_TOL: f64 = 1e-12;
pub const SWEEP_MAX_ITER: usize = 100;

/// Branch-flow state of a radial feeder. Voltages are squared, flows are
/// sending-end (parent side) values, all in per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlow {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub ell: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PowerFlow {
    /// Sending-end apparent power of each line.
    pub fn apparent(&self) -> Vec<f64> {
        self.p.iter().zip(&self.q).map(|(p, q)| p.hypot(*q)).collect()
    }
}

/// Backward/forward sweep of the DistFlow equations with bus injections
/// `inj_p`, `inj_q` (pu, positive = generation). Stops when squared voltages
/// move less than [`SWEEP_TOL`]; a non-finite or nonpositive voltage or the
/// iteration cap marks the result as not converged.
pub fn power_flow(net: &Network, tree: &Tree, inj_p: &[f64], inj_q: &[f64]) -> PowerFlow {
    let (nb, nl) = (net.buses.len(), net.lines.len());
    let mut v = vec![net.slack_v; nb];
    let mut p = vec![0.0; nl];
    let mut q = vec![0.0; nl];
    let mut ell = vec![0.0; nl];
    for it in 1..=SWEEP_MAX_ITER {
        for &j in tree.order.iter().rev() {
            let Some(l) = tree.parent_line[j] else { continue };
            let mut pr = -inj_p[j];
            let mut qr = -inj_q[j];
            for &c in &tree.children[j] {
                let lc = tree.parent_line[c].expect("child line");
                pr += p[lc];
                qr += q[lc];
            }
            let line = &net.lines[l];
            ell[l] = (pr * pr + qr * qr) / v[j];
            p[l] = pr + line.r * ell[l];
            q[l] = qr + line.x * ell[l];
        }
        let mut delta = 0.0f64;
        for &j in &tree.order {
            let Some(l) = tree.parent_line[j] else { continue };
            let i = tree.parent[j].expect("parent");
            let line = &net.lines[l];
            let vj = v[i] - 2.0 * (line.r * p[l] + line.x * q[l]) + line.z2() * ell[l];
            delta = delta.max((vj - v[j]).abs());
            v[j] = vj;
        }
        if !delta.is_finite() || v.iter().any(|&x| !(x > 0.0)) {
            return PowerFlow { v, p, q, ell, iterations: it, converged: false };
        }
        if delta < SWEEP_TOL {
            return PowerFlow { v, p, q, ell, iterations: it, converged: true };
        }
    }
    PowerFlow {
        v,
        p,
        q,
        ell,
        iterations: SWEEP_MAX_ITER,
        converged: false,
    }
}
