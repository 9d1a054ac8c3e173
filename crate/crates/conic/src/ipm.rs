//! Homogeneous self-dual primal-dual interior-point method.
//!
//! Solves
//!
//! ```text
//! minimize    c'x
//! subject to  A x = b
//!             G x + s = h,   s ∈ K
//! ```
//!
//! with `K` a product of nonnegative orthants and second-order cones, and its
//! dual `maximize -b'y - h'z  s.t.  A'y + G'z + c = 0, z ∈ K`. Search
//! directions use Nesterov–Todd scaling and Mehrotra's predictor-corrector;
//! each Newton system is a sparse quasi-definite KKT system factored by
//! [`LdlFactor`] with static regularization and iterative refinement.

use crate::cones::{Cone, NtScaling, ProductCone};
use crate::ldl::LdlFactor;
use crate::sparse::{dot, norm_inf, CscMatrix};
use log::{debug, trace};

/// A cone program in the standard form above.
#[derive(Debug, Clone)]
pub struct ConeProblem {
    pub c: Vec<f64>,
    pub a: CscMatrix,
    pub b: Vec<f64>,
    pub g: CscMatrix,
    pub h: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConeProblem {
    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    fn validate(&self) -> Result<(), SolverError> {
        let n = self.c.len();
        let m: usize = self.cones.iter().map(|c| c.dim()).sum();
        if self.a.ncols != n || self.g.ncols != n {
            return Err(SolverError::Dimension(format!(
                "A has {} columns, G has {}, c has {}",
                self.a.ncols, self.g.ncols, n
            )));
        }
        if self.a.nrows != self.b.len() {
            return Err(SolverError::Dimension(format!(
                "A has {} rows but b has {}",
                self.a.nrows,
                self.b.len()
            )));
        }
        if self.g.nrows != self.h.len() || self.h.len() != m {
            return Err(SolverError::Dimension(format!(
                "G has {} rows, h has {}, cones cover {}",
                self.g.nrows,
                self.h.len(),
                m
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.c) || !finite(&self.b) || !finite(&self.h)
            || !finite(&self.a.nzval) || !finite(&self.g.nzval)
        {
            return Err(SolverError::NonFiniteData);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub max_iter: usize,
    /// Primal and dual residual tolerance (relative).
    pub feastol: f64,
    pub abstol: f64,
    pub reltol: f64,
    /// Looser tolerances accepted when progress stalls numerically.
    pub feastol_inacc: f64,
    pub reltol_inacc: f64,
    pub static_reg: f64,
    pub dyn_reg_eps: f64,
    pub dyn_reg_delta: f64,
    pub refine_steps: usize,
    pub step_fraction: f64,
    pub equilibrate_iters: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            feastol: 1e-8,
            abstol: 1e-8,
            reltol: 1e-8,
            feastol_inacc: 1e-6,
            reltol_inacc: 1e-6,
            static_reg: 1e-9,
            dyn_reg_eps: 1e-13,
            dyn_reg_delta: 2e-8,
            refine_steps: 10,
            step_fraction: 0.99,
            equilibrate_iters: 15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalError,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::Optimal => "optimal",
            Status::PrimalInfeasible => "primal-infeasible",
            Status::DualInfeasible => "dual-infeasible",
            Status::MaxIterations => "iteration-limit",
            Status::NumericalError => "numerical-error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub pcost: f64,
    pub dcost: f64,
    pub gap: f64,
    pub pres: f64,
    pub dres: f64,
    pub kappa_over_tau: f64,
    pub sigma: f64,
    pub step: f64,
}

/// Solver output. For `Optimal` (and the iteration-limit best iterate) the
/// vectors are the primal-dual point; for infeasible statuses they hold the
/// normalized certificate.
#[derive(Debug, Clone)]
pub struct ConeSolution {
    pub status: Status,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub pcost: f64,
    pub dcost: f64,
    pub pres: f64,
    pub dres: f64,
    pub gap: f64,
    pub iterations: usize,
    /// Set when only the looser fallback tolerances were met.
    pub reduced_accuracy: bool,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem data contains NaN or infinity")]
    NonFiniteData,
}

/// A pluggable conic optimizer: submit a cone program, receive primal and
/// dual solutions.
pub trait ConicBackend {
    fn solve(&self, problem: &ConeProblem) -> Result<ConeSolution, SolverError>;
}

/// The bundled interior-point backend.
#[derive(Debug, Clone, Default)]
pub struct InteriorPoint {
    pub settings: Settings,
}

impl InteriorPoint {
    pub fn new(settings: Settings) -> Self {
        Self { settings }
    }
}

impl ConicBackend for InteriorPoint {
    fn solve(&self, problem: &ConeProblem) -> Result<ConeSolution, SolverError> {
        problem.validate()?;
        Ok(Workspace::new(problem, &self.settings).run())
    }
}

/// Ruiz equilibration of [A; G]: x = D x̃, ỹ = y / E_A, z̃ = z / E_G,
/// s̃ = E_G s. Second-order cone blocks share one row factor.
struct Equilibration {
    d: Vec<f64>,
    e: Vec<f64>,
}

impl Equilibration {
    fn compute(prob: &ConeProblem, cone: &ProductCone, iters: usize) -> Self {
        let n = prob.c.len();
        let p = prob.b.len();
        let m = prob.h.len();
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; p + m];
        for _ in 0..iters {
            let mut cn = vec![0.0f64; n];
            let mut rn = vec![0.0f64; p + m];
            for (mat, roff) in [(&prob.a, 0usize), (&prob.g, p)] {
                for j in 0..n {
                    for (i, v) in mat.col(j) {
                        let a = (e[roff + i] * v * d[j]).abs();
                        cn[j] = cn[j].max(a);
                        rn[roff + i] = rn[roff + i].max(a);
                    }
                }
            }
            for &(c, o) in cone.blocks() {
                if let Cone::Soc(dim) = c {
                    let mx = rn[p + o..p + o + dim].iter().fold(0.0f64, |a, &b| a.max(b));
                    rn[p + o..p + o + dim].iter_mut().for_each(|v| *v = mx);
                }
            }
            let mut done = true;
            for j in 0..n {
                if cn[j] > 0.0 {
                    if (1.0 - cn[j]).abs() > 0.1 {
                        done = false;
                    }
                    d[j] = (d[j] / cn[j].sqrt()).clamp(1e-4, 1e4);
                }
            }
            for i in 0..p + m {
                if rn[i] > 0.0 {
                    if (1.0 - rn[i]).abs() > 0.1 {
                        done = false;
                    }
                    e[i] = (e[i] / rn[i].sqrt()).clamp(1e-4, 1e4);
                }
            }
            if done {
                break;
            }
        }
        Self { d, e }
    }

    fn scale(&self, prob: &ConeProblem) -> ConeProblem {
        let p = prob.b.len();
        let scale_mat = |mat: &CscMatrix, roff: usize| {
            let mut out = mat.clone();
            for j in 0..mat.ncols {
                for k in mat.colptr[j]..mat.colptr[j + 1] {
                    out.nzval[k] *= self.e[roff + mat.rowval[k]] * self.d[j];
                }
            }
            out
        };
        ConeProblem {
            c: prob.c.iter().zip(&self.d).map(|(c, d)| c * d).collect(),
            a: scale_mat(&prob.a, 0),
            b: prob.b.iter().zip(&self.e[..p]).map(|(b, e)| b * e).collect(),
            g: scale_mat(&prob.g, p),
            h: prob.h.iter().zip(&self.e[p..]).map(|(h, e)| h * e).collect(),
            cones: prob.cones.clone(),
        }
    }
}

struct Workspace<'a> {
    orig: &'a ConeProblem,
    prob: ConeProblem,
    eq: Equilibration,
    cone: ProductCone,
    settings: &'a Settings,
    n: usize,
    p: usize,
    m: usize,
    kkt: LdlFactor,
    kkt_vals: Vec<f64>,
    /// index into kkt_vals where the W² block values start
    w2_start: usize,
    diag_shift: Vec<f64>,
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Metrics {
    pcost: f64,
    dcost: f64,
    pres: f64,
    dres: f64,
    gap: f64,
    relgap: f64,
    pinf: Option<f64>,
    dinf: Option<f64>,
}

impl<'a> Workspace<'a> {
    fn new(orig: &'a ConeProblem, settings: &'a Settings) -> Self {
        let cone = ProductCone::new(&orig.cones);
        let eq = Equilibration::compute(orig, &cone, settings.equilibrate_iters);
        let prob = eq.scale(orig);
        let (n, p, m) = (prob.c.len(), prob.b.len(), prob.h.len());

        let mut entries: Vec<(usize, usize)> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        for j in 0..n {
            for (i, v) in prob.a.col(j) {
                entries.push((j, n + i));
                vals.push(v);
            }
            for (i, v) in prob.g.col(j) {
                entries.push((j, n + p + i));
                vals.push(v);
            }
        }
        let w2_start = entries.len();
        let mut m_len = vec![0.0; m];
        cone.set_identity(&mut m_len);
        let ident = NtScaling::new(&cone, &m_len, &m_len);
        ident.for_each_w2_upper(|i, j, v| {
            entries.push((n + p + i, n + p + j));
            vals.push(-v);
        });
        let signs: Vec<f64> = (0..n + p + m).map(|k| if k < n { 1.0 } else { -1.0 }).collect();
        let diag_shift: Vec<f64> = signs.iter().map(|s| s * settings.static_reg).collect();
        let kkt = LdlFactor::new(n + p + m, &entries, &signs);
        debug!(
            "kkt: dim {} nnz(K) {} nnz(L) {}",
            n + p + m,
            entries.len(),
            kkt.nnz_l()
        );
        Self {
            orig,
            prob,
            eq,
            cone,
            settings,
            n,
            p,
            m,
            kkt,
            kkt_vals: vals,
            w2_start,
            diag_shift,
        }
    }

    fn set_scaling(&mut self, w: &NtScaling) -> bool {
        let mut k = self.w2_start;
        let vals = &mut self.kkt_vals;
        w.for_each_w2_upper(|_, _, v| {
            vals[k] = -v;
            k += 1;
        });
        self.kkt
            .factor(
                &self.kkt_vals,
                &self.diag_shift,
                self.settings.dyn_reg_eps,
                self.settings.dyn_reg_delta,
            )
            .is_ok()
    }

    /// K u for the unregularized KKT matrix with scaling `w`.
    fn kkt_mul(&self, w: &NtScaling, u: &[f64], out: &mut [f64]) {
        let (n, p, m) = (self.n, self.p, self.m);
        let (ux, rest) = u.split_at(n);
        let (uy, uz) = rest.split_at(p);
        out.iter_mut().for_each(|v| *v = 0.0);
        {
            let (ox, rest) = out.split_at_mut(n);
            let (oy, oz) = rest.split_at_mut(p);
            self.prob.a.gemv_t(1.0, uy, ox);
            self.prob.g.gemv_t(1.0, uz, ox);
            self.prob.a.gemv(1.0, ux, oy);
            self.prob.g.gemv(1.0, ux, oz);
            let mut t = vec![0.0; m];
            let mut t2 = vec![0.0; m];
            w.apply(uz, &mut t);
            w.apply(&t, &mut t2);
            for i in 0..m {
                oz[i] -= t2[i];
            }
        }
    }

    fn kkt_solve(&self, w: &NtScaling, rhs: &[f64]) -> Vec<f64> {
        let mut u = rhs.to_vec();
        self.kkt.solve(&mut u);
        let dim = rhs.len();
        let mut ku = vec![0.0; dim];
        let tol = 1e-14 * (1.0 + norm_inf(rhs));
        for _ in 0..self.settings.refine_steps {
            self.kkt_mul(w, &u, &mut ku);
            let mut err: Vec<f64> = rhs.iter().zip(&ku).map(|(r, k)| r - k).collect();
            if norm_inf(&err) <= tol {
                break;
            }
            self.kkt.solve(&mut err);
            for (a, e) in u.iter_mut().zip(&err) {
                *a += e;
            }
        }
        u
    }

    fn initial_point(&mut self) -> Option<Iterate> {
        let (n, p, m) = (self.n, self.p, self.m);
        let mut e = vec![0.0; m];
        self.cone.set_identity(&mut e);
        let ident = NtScaling::new(&self.cone, &e, &e);
        if !self.set_scaling(&ident) {
            return None;
        }
        let mut rhs = vec![0.0; n + p + m];
        rhs[n..n + p].copy_from_slice(&self.prob.b);
        rhs[n + p..].copy_from_slice(&self.prob.h);
        let u = self.kkt_solve(&ident, &rhs);
        let x = u[..n].to_vec();
        let mut s: Vec<f64> = u[n + p..].iter().map(|v| -v).collect();
        let ap = self.cone.shift_to_boundary(&s);
        if ap >= 0.0 {
            self.cone.add_identity(&mut s, 1.0 + ap);
        }

        let mut rhs = vec![0.0; n + p + m];
        for (r, c) in rhs[..n].iter_mut().zip(&self.prob.c) {
            *r = -c;
        }
        let u = self.kkt_solve(&ident, &rhs);
        let y = u[n..n + p].to_vec();
        let mut z = u[n + p..].to_vec();
        let ad = self.cone.shift_to_boundary(&z);
        if ad >= 0.0 {
            self.cone.add_identity(&mut z, 1.0 + ad);
        }
        Some(Iterate {
            x,
            y,
            z,
            s,
            tau: 1.0,
            kappa: 1.0,
        })
    }

    fn unscaled(&self, it: &Iterate) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = self.p;
        let x = it.x.iter().zip(&self.eq.d).map(|(v, d)| v * d).collect();
        let y = it.y.iter().zip(&self.eq.e[..p]).map(|(v, e)| v * e).collect();
        let z = it.z.iter().zip(&self.eq.e[p..]).map(|(v, e)| v * e).collect();
        let s = it.s.iter().zip(&self.eq.e[p..]).map(|(v, e)| v / e).collect();
        (x, y, z, s)
    }

    fn metrics(&self, it: &Iterate) -> Metrics {
        let o = self.orig;
        let (x, y, z, s) = self.unscaled(it);
        let tau = it.tau;
        let (n, p, m) = (self.n, self.p, self.m);
        let mut ax = vec![0.0; p];
        o.a.gemv(1.0, &x, &mut ax);
        let mut gx = vec![0.0; m];
        o.g.gemv(1.0, &x, &mut gx);
        let mut aty = vec![0.0; n];
        o.a.gemv_t(1.0, &y, &mut aty);
        o.g.gemv_t(1.0, &z, &mut aty);
        let nb = norm_inf(&o.b);
        let nh = norm_inf(&o.h);
        let nc = norm_inf(&o.c);

        let rp_a = ax.iter().zip(&o.b).map(|(a, b)| (a / tau - b).abs()).fold(0.0, f64::max);
        let rp_g = (0..m)
            .map(|i| ((gx[i] + s[i]) / tau - o.h[i]).abs())
            .fold(0.0, f64::max);
        let pres = (rp_a / (1.0 + nb)).max(rp_g / (1.0 + nh));
        let dres = (0..n)
            .map(|j| (aty[j] / tau + o.c[j]).abs())
            .fold(0.0, f64::max)
            / (1.0 + nc);
        let cx = dot(&o.c, &x);
        let by_hz = dot(&o.b, &y) + dot(&o.h, &z);
        let pcost = cx / tau;
        let dcost = -by_hz / tau;
        let gap = dot(&s, &z) / (tau * tau);
        let relgap = if pcost < 0.0 {
            gap / -pcost
        } else if dcost > 0.0 {
            gap / dcost
        } else {
            f64::INFINITY
        };

        // infeasibility certificates (unnormalized by τ)
        let pinf = if by_hz < 0.0 {
            Some(norm_inf(&aty) / -by_hz)
        } else {
            None
        };
        let dinf = if cx < 0.0 {
            let r = ax.iter().map(|v| v.abs()).fold(0.0, f64::max).max(
                gx.iter().zip(&s).map(|(g, s)| (g + s).abs()).fold(0.0, f64::max),
            );
            Some(r / -cx)
        } else {
            None
        };
        Metrics {
            pcost,
            dcost,
            pres,
            dres,
            gap,
            relgap,
            pinf,
            dinf,
        }
    }

    fn finish(&self, it: &Iterate, status: Status, m: &Metrics, iters: usize, reduced: bool, log: Vec<IterationLog>) -> ConeSolution {
        let (x, y, z, s) = self.unscaled(it);
        let (x, y, z, s) = match status {
            Status::PrimalInfeasible => {
                let scale = -(dot(&self.orig.b, &y) + dot(&self.orig.h, &z));
                (
                    vec![f64::NAN; x.len()],
                    y.iter().map(|v| v / scale).collect(),
                    z.iter().map(|v| v / scale).collect(),
                    vec![f64::NAN; s.len()],
                )
            }
            Status::DualInfeasible => {
                let scale = -dot(&self.orig.c, &x);
                (
                    x.iter().map(|v| v / scale).collect(),
                    vec![f64::NAN; y.len()],
                    vec![f64::NAN; z.len()],
                    s.iter().map(|v| v / scale).collect(),
                )
            }
            _ => {
                let t = it.tau;
                (
                    x.iter().map(|v| v / t).collect(),
                    y.iter().map(|v| v / t).collect(),
                    z.iter().map(|v| v / t).collect(),
                    s.iter().map(|v| v / t).collect(),
                )
            }
        };
        ConeSolution {
            status,
            x,
            y,
            z,
            s,
            pcost: m.pcost,
            dcost: m.dcost,
            pres: m.pres,
            dres: m.dres,
            gap: m.gap,
            iterations: iters,
            reduced_accuracy: reduced,
            log,
        }
    }

    fn converged(&self, m: &Metrics, feastol: f64, abstol: f64, reltol: f64) -> bool {
        m.pres <= feastol && m.dres <= feastol && (m.gap <= abstol || m.relgap <= reltol)
    }

    fn step_length(&self, it: &Iterate, dz: &[f64], ds: &[f64], dtau: f64, dkappa: f64) -> f64 {
        let mut a = self.cone.max_step(&it.s, ds).min(self.cone.max_step(&it.z, dz));
        if dtau < 0.0 {
            a = a.min(-it.tau / dtau);
        }
        if dkappa < 0.0 {
            a = a.min(-it.kappa / dkappa);
        }
        a
    }

    fn run(mut self) -> ConeSolution {
        let (n, p, m) = (self.n, self.p, self.m);
        let dim = n + p + m;
        let settings = self.settings;
        let mut log = Vec::new();
        let mut it = match self.initial_point() {
            Some(it) => it,
            None => {
                let it = Iterate {
                    x: vec![0.0; n],
                    y: vec![0.0; p],
                    z: vec![1.0; m],
                    s: vec![1.0; m],
                    tau: 1.0,
                    kappa: 1.0,
                };
                let mt = self.metrics(&it);
                return self.finish(&it, Status::NumericalError, &mt, 0, false, log);
            }
        };
        let nu = self.cone.degree() as f64;
        let mut e = vec![0.0; m];
        self.cone.set_identity(&mut e);

        let mut best: Option<(f64, Iterate)> = None;
        let mut sigma = 0.0;
        let mut step = 0.0;

        for iter in 0..=settings.max_iter {
            let mt = self.metrics(&it);
            log.push(IterationLog {
                iter,
                pcost: mt.pcost,
                dcost: mt.dcost,
                gap: mt.gap,
                pres: mt.pres,
                dres: mt.dres,
                kappa_over_tau: it.kappa / it.tau,
                sigma,
                step,
            });
            trace!(
                "ipm {iter:3} pcost {:+.6e} dcost {:+.6e} gap {:.2e} pres {:.2e} dres {:.2e} k/t {:.2e}",
                mt.pcost, mt.dcost, mt.gap, mt.pres, mt.dres, it.kappa / it.tau
            );
            if self.converged(&mt, settings.feastol, settings.abstol, settings.reltol) {
                return self.finish(&it, Status::Optimal, &mt, iter, false, log);
            }
            if let Some(r) = mt.pinf {
                if r < settings.feastol && it.tau < it.kappa {
                    return self.finish(&it, Status::PrimalInfeasible, &mt, iter, false, log);
                }
            }
            if let Some(r) = mt.dinf {
                if r < settings.feastol && it.tau < it.kappa {
                    return self.finish(&it, Status::DualInfeasible, &mt, iter, false, log);
                }
            }
            let merit = mt.pres.max(mt.dres).max(mt.relgap.min(mt.gap));
            if best.as_ref().map_or(true, |(b, _)| merit < *b) {
                best = Some((
                    merit,
                    Iterate {
                        x: it.x.clone(),
                        y: it.y.clone(),
                        z: it.z.clone(),
                        s: it.s.clone(),
                        tau: it.tau,
                        kappa: it.kappa,
                    },
                ));
            }
            if iter == settings.max_iter {
                break;
            }

            // residuals in scaled space
            let pr = &self.prob;
            let mut rx: Vec<f64> = pr.c.iter().map(|c| c * it.tau).collect();
            pr.a.gemv_t(1.0, &it.y, &mut rx);
            pr.g.gemv_t(1.0, &it.z, &mut rx);
            let mut ry: Vec<f64> = pr.b.iter().map(|b| -b * it.tau).collect();
            pr.a.gemv(1.0, &it.x, &mut ry);
            let mut rz: Vec<f64> = (0..m).map(|i| it.s[i] - pr.h[i] * it.tau).collect();
            pr.g.gemv(1.0, &it.x, &mut rz);
            let rtau = it.kappa + dot(&pr.c, &it.x) + dot(&pr.b, &it.y) + dot(&pr.h, &it.z);

            let w = NtScaling::new(&self.cone, &it.s, &it.z);
            let mut lambda = vec![0.0; m];
            w.apply(&it.z, &mut lambda);
            if !self.set_scaling(&w) {
                break;
            }

            let mut rhs1 = vec![0.0; dim];
            for j in 0..n {
                rhs1[j] = -self.prob.c[j];
            }
            rhs1[n..n + p].copy_from_slice(&self.prob.b);
            rhs1[n + p..].copy_from_slice(&self.prob.h);
            let u1 = self.kkt_solve(&w, &rhs1);
            let pr = &self.prob;
            let denom = dot(&pr.c, &u1[..n]) + dot(&pr.b, &u1[n..n + p])
                + dot(&pr.h, &u1[n + p..])
                - it.kappa / it.tau;

            let mut ll = vec![0.0; m];
            self.cone.jordan_product(&lambda, &lambda, &mut ll);

            // Solve one Newton system with residual factor `d`,
            // complementarity rhs `ds` and `dkappa`.
            let newton = |ds: &[f64], dkappa: f64, d: f64| {
                let mut t = vec![0.0; m];
                self.cone.jordan_div(&lambda, ds, &mut t);
                let mut wt = vec![0.0; m];
                w.apply(&t, &mut wt);
                let mut rhs = vec![0.0; dim];
                for j in 0..n {
                    rhs[j] = -d * rx[j];
                }
                for i in 0..p {
                    rhs[n + i] = -d * ry[i];
                }
                for i in 0..m {
                    rhs[n + p + i] = -d * rz[i] - wt[i];
                }
                let u2 = self.kkt_solve(&w, &rhs);
                let pr = &self.prob;
                let num = -d * rtau - dkappa / it.tau
                    - dot(&pr.c, &u2[..n])
                    - dot(&pr.b, &u2[n..n + p])
                    - dot(&pr.h, &u2[n + p..]);
                let dtau = num / denom;
                let du: Vec<f64> = u2.iter().zip(&u1).map(|(a, b)| a + dtau * b).collect();
                let dz = du[n + p..].to_vec();
                let mut wdz = vec![0.0; m];
                let mut w2dz = vec![0.0; m];
                w.apply(&dz, &mut wdz);
                w.apply(&wdz, &mut w2dz);
                let dsv: Vec<f64> = (0..m).map(|i| wt[i] - w2dz[i]).collect();
                let dk = (dkappa - it.kappa * dtau) / it.tau;
                (du, dsv, dtau, dk)
            };

            // predictor
            let ds_aff: Vec<f64> = ll.iter().map(|v| -v).collect();
            let (du_a, ds_a, dtau_a, dk_a) = newton(&ds_aff, -it.kappa * it.tau, 1.0);
            let alpha_aff = self
                .step_length(&it, &du_a[n + p..], &ds_a, dtau_a, dk_a)
                .min(1.0);
            sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);
            let mu = (dot(&it.s, &it.z) + it.kappa * it.tau) / (nu + 1.0);

            // corrector
            let mut sa = vec![0.0; m];
            let mut za = vec![0.0; m];
            w.apply_inv(&ds_a, &mut sa);
            w.apply(&du_a[n + p..], &mut za);
            let mut corr = vec![0.0; m];
            self.cone.jordan_product(&sa, &za, &mut corr);
            let ds_c: Vec<f64> = (0..m)
                .map(|i| -ll[i] - corr[i] + sigma * mu * e[i])
                .collect();
            let dk_c = -it.kappa * it.tau - dk_a * dtau_a + sigma * mu;
            let (du, dsv, dtau, dk) = newton(&ds_c, dk_c, 1.0 - sigma);
            let amax = self.step_length(&it, &du[n + p..], &dsv, dtau, dk);
            step = (settings.step_fraction * amax).min(1.0);
            if !(step > 1e-12) || du.iter().any(|v| !v.is_finite()) {
                debug!("ipm: step collapsed at iteration {iter}");
                break;
            }
            for j in 0..n {
                it.x[j] += step * du[j];
            }
            for i in 0..p {
                it.y[i] += step * du[n + i];
            }
            for i in 0..m {
                it.z[i] += step * du[n + p + i];
                it.s[i] += step * dsv[i];
            }
            it.tau += step * dtau;
            it.kappa += step * dk;
            if !(it.tau > 0.0 && it.kappa > 0.0) {
                break;
            }
        }

        // iteration limit or numerical stall: fall back to the best iterate
        let (_, best) = best.expect("at least one iterate");
        let mt = self.metrics(&best);
        let iters = log.len().saturating_sub(1);
        if self.converged(&mt, settings.feastol_inacc, settings.feastol_inacc, settings.reltol_inacc) {
            return self.finish(&best, Status::Optimal, &mt, iters, true, log);
        }
        let status = if iters >= settings.max_iter {
            Status::MaxIterations
        } else {
            Status::NumericalError
        };
        self.finish(&best, status, &mt, iters, false, log)
    }
}
