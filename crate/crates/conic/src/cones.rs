//! Nonnegative orthant and second-order cone primitives: Jordan algebra,
//! step lengths, and Nesterov–Todd scaling.

use crate::sparse::dot;

/// One block of the product cone.
///
/// `Soc(d)` is `{ u ∈ R^d : u[0] ≥ ‖u[1..]‖ }`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    NonNeg(usize),
    Soc(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::NonNeg(d) | Cone::Soc(d) => d,
        }
    }

    /// Barrier degree contribution.
    pub fn degree(&self) -> usize {
        match *self {
            Cone::NonNeg(d) => d,
            Cone::Soc(_) => 1,
        }
    }
}

pub(crate) fn soc_det(u: &[f64]) -> f64 {
    let t = u[0];
    let r = dot(&u[1..], &u[1..]);
    (t - r.sqrt()) * (t + r.sqrt())
}

/// Cartesian product of cone blocks laid out contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductCone {
    blocks: Vec<(Cone, usize)>,
    dim: usize,
    degree: usize,
}

impl ProductCone {
    pub fn new(cones: &[Cone]) -> Self {
        let mut blocks = Vec::with_capacity(cones.len());
        let mut off = 0;
        let mut degree = 0;
        for &c in cones {
            assert!(c.dim() > 0, "empty cone block");
            if let Cone::Soc(d) = c {
                assert!(d >= 2, "second-order cone needs dimension >= 2");
            }
            blocks.push((c, off));
            off += c.dim();
            degree += c.degree();
        }
        Self {
            blocks,
            dim: off,
            degree,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn blocks(&self) -> &[(Cone, usize)] {
        &self.blocks
    }

    pub fn set_identity(&self, e: &mut [f64]) {
        for &(c, o) in &self.blocks {
            match c {
                Cone::NonNeg(d) => e[o..o + d].iter_mut().for_each(|v| *v = 1.0),
                Cone::Soc(d) => {
                    e[o] = 1.0;
                    e[o + 1..o + d].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    /// Smallest α with u + α e in the (closed) cone.
    pub fn shift_to_boundary(&self, u: &[f64]) -> f64 {
        let mut alpha = f64::NEG_INFINITY;
        for &(c, o) in &self.blocks {
            match c {
                Cone::NonNeg(d) => {
                    for &v in &u[o..o + d] {
                        alpha = alpha.max(-v);
                    }
                }
                Cone::Soc(d) => {
                    let r = dot(&u[o + 1..o + d], &u[o + 1..o + d]).sqrt();
                    alpha = alpha.max(r - u[o]);
                }
            }
        }
        alpha
    }

    /// Add `a * e` in place.
    pub fn add_identity(&self, u: &mut [f64], a: f64) {
        for &(c, o) in &self.blocks {
            match c {
                Cone::NonNeg(d) => u[o..o + d].iter_mut().for_each(|v| *v += a),
                Cone::Soc(_) => u[o] += a,
            }
        }
    }

    pub fn is_interior(&self, u: &[f64]) -> bool {
        self.blocks.iter().all(|&(c, o)| match c {
            Cone::NonNeg(d) => u[o..o + d].iter().all(|&v| v > 0.0),
            Cone::Soc(d) => u[o] > 0.0 && soc_det(&u[o..o + d]) > 0.0,
        })
    }

    /// Largest α ≥ 0 (possibly +∞) with u + α du in the cone, for interior u.
    pub fn max_step(&self, u: &[f64], du: &[f64]) -> f64 {
        let mut alpha = f64::INFINITY;
        for &(c, o) in &self.blocks {
            match c {
                Cone::NonNeg(d) => {
                    for i in o..o + d {
                        if du[i] < 0.0 {
                            alpha = alpha.min(-u[i] / du[i]);
                        }
                    }
                }
                Cone::Soc(d) => {
                    alpha = alpha.min(soc_max_step(&u[o..o + d], &du[o..o + d]));
                }
            }
        }
        alpha
    }

    /// out = u ∘ v
    pub fn jordan_product(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for &(c, o) in &self.blocks {
            match c {
                Cone::NonNeg(d) => {
                    for i in o..o + d {
                        out[i] = u[i] * v[i];
                    }
                }
                Cone::Soc(d) => {
                    let (u0, v0) = (u[o], v[o]);
                    out[o] = dot(&u[o..o + d], &v[o..o + d]);
                    for i in o + 1..o + d {
                        out[i] = u0 * v[i] + v0 * u[i];
                    }
                }
            }
        }
    }

    /// out = λ \ w, i.e. the solution of λ ∘ out = w, for λ interior.
    pub fn jordan_div(&self, lambda: &[f64], w: &[f64], out: &mut [f64]) {
        for &(c, o) in &self.blocks {
            match c {
                Cone::NonNeg(d) => {
                    for i in o..o + d {
                        out[i] = w[i] / lambda[i];
                    }
                }
                Cone::Soc(d) => {
                    let l = &lambda[o..o + d];
                    let det = soc_det(l);
                    let u0 = (l[0] * w[o] - dot(&l[1..], &w[o + 1..o + d])) / det;
                    out[o] = u0;
                    for i in 1..d {
                        out[o + i] = (w[o + i] - u0 * l[i]) / l[0];
                    }
                }
            }
        }
    }
}

fn soc_max_step(u: &[f64], du: &[f64]) -> f64 {
    // f(α) = det(u + α du) = a α² + 2 b α + c, c > 0
    let a = soc_det(du);
    let b = u[0] * du[0] - dot(&u[1..], &du[1..]);
    let c = soc_det(u).max(0.0);
    let mut best = f64::INFINITY;
    if a.abs() < 1e-300 {
        if b < 0.0 {
            best = -c / (2.0 * b);
        }
    } else {
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let q = -(b + b.signum() * sq);
            let roots = [if q != 0.0 { c / q } else { f64::INFINITY }, q / a];
            for r in roots {
                if r > 0.0 && r < best {
                    best = r;
                }
            }
        }
    }
    // also keep the leading coordinate positive
    if du[0] < 0.0 {
        best = best.min(-u[0] / du[0]);
    }
    best
}

/// Nesterov–Todd scaling W for the pair (s, z): W z = W⁻¹ s = λ.
/// W is symmetric positive definite and block diagonal.
#[derive(Debug, Clone)]
pub struct NtScaling {
    blocks: Vec<BlockScaling>,
}

#[derive(Debug, Clone)]
enum BlockScaling {
    NonNeg { off: usize, w: Vec<f64> },
    Soc { off: usize, beta: f64, wbar: Vec<f64> },
}

impl NtScaling {
    pub fn new(cone: &ProductCone, s: &[f64], z: &[f64]) -> Self {
        let blocks = cone
            .blocks()
            .iter()
            .map(|&(c, o)| match c {
                Cone::NonNeg(d) => BlockScaling::NonNeg {
                    off: o,
                    w: (o..o + d).map(|i| (s[i] / z[i]).sqrt()).collect(),
                },
                Cone::Soc(d) => {
                    let (sb, zb) = (&s[o..o + d], &z[o..o + d]);
                    let sdet = soc_det(sb).max(f64::MIN_POSITIVE).sqrt();
                    let zdet = soc_det(zb).max(f64::MIN_POSITIVE).sqrt();
                    let sn: Vec<f64> = sb.iter().map(|v| v / sdet).collect();
                    let zn: Vec<f64> = zb.iter().map(|v| v / zdet).collect();
                    let gamma = ((1.0 + dot(&sn, &zn)) / 2.0).sqrt();
                    let mut wbar = vec![0.0; d];
                    wbar[0] = (sn[0] + zn[0]) / (2.0 * gamma);
                    for i in 1..d {
                        wbar[i] = (sn[i] - zn[i]) / (2.0 * gamma);
                    }
                    BlockScaling::Soc {
                        off: o,
                        beta: (sdet / zdet).sqrt(),
                        wbar,
                    }
                }
            })
            .collect();
        Self { blocks }
    }

    fn apply_impl(&self, u: &[f64], out: &mut [f64], inverse: bool) {
        for b in &self.blocks {
            match b {
                BlockScaling::NonNeg { off, w } => {
                    for (i, wi) in w.iter().enumerate() {
                        out[off + i] = if inverse { u[off + i] / wi } else { u[off + i] * wi };
                    }
                }
                BlockScaling::Soc { off, beta, wbar } => {
                    let d = wbar.len();
                    let o = *off;
                    let sign = if inverse { -1.0 } else { 1.0 };
                    let scale = if inverse { 1.0 / beta } else { *beta };
                    let w0 = wbar[0];
                    let w1 = &wbar[1..];
                    let u0 = u[o];
                    let u1 = &u[o + 1..o + d];
                    let w1u1 = dot(w1, u1);
                    // H(w) = [w0, w1'; w1, I + w1 w1'/(1+w0)], inverse flips w1
                    out[o] = scale * (w0 * u0 + sign * w1u1);
                    let coef = sign * u0 + w1u1 / (1.0 + w0);
                    for i in 0..d - 1 {
                        out[o + 1 + i] = scale * (u1[i] + coef * w1[i]);
                    }
                }
            }
        }
    }

    /// out = W u
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.apply_impl(u, out, false);
    }

    /// out = W⁻¹ u
    pub fn apply_inv(&self, u: &[f64], out: &mut [f64]) {
        self.apply_impl(u, out, true);
    }

    /// Visit the upper triangle (row ≤ col, block-local offsets added) of W².
    pub fn for_each_w2_upper(&self, mut f: impl FnMut(usize, usize, f64)) {
        for b in &self.blocks {
            match b {
                BlockScaling::NonNeg { off, w } => {
                    for (i, wi) in w.iter().enumerate() {
                        f(off + i, off + i, wi * wi);
                    }
                }
                BlockScaling::Soc { off, beta, wbar } => {
                    // W² = β² (2 w w' - J)
                    let d = wbar.len();
                    let b2 = beta * beta;
                    for j in 0..d {
                        for i in 0..=j {
                            let mut v = 2.0 * wbar[i] * wbar[j];
                            if i == j {
                                v += if i == 0 { -1.0 } else { 1.0 };
                            }
                            f(off + i, off + j, b2 * v);
                        }
                    }
                }
            }
        }
    }
}
