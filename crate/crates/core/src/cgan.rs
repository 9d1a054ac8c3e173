//! Conditional adversarial generator of residual day profiles.
//!
//! Generator and critic are fully connected rectifier networks. The critic is
//! trained with the Wasserstein loss plus gradient penalty (default), with
//! weight clipping, or with the cross-entropy loss. All batch tensors keep one
//! sample per column.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: &str = "gridflex-cgan/1";

#[derive(Debug, thiserror::Error)]
pub enum CganError {
    #[error("layer {0} has zero size")]
    ZeroLayer(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: L_G={l_g} L_D={l_d} GP={gp}")]
    NonFinite {
        iteration: usize,
        l_g: f64,
        l_d: f64,
        gp: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WganGp,
    WganClip,
    Vanilla,
}

impl Mode {
    pub fn critic_output(self) -> OutputActivation {
        match self {
            Mode::Vanilla => OutputActivation::Logistic,
            _ => OutputActivation::Identity,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wgan_gp" => Ok(Mode::WganGp),
            "wgan_clip" => Ok(Mode::WganClip),
            "vanilla" => Ok(Mode::Vanilla),
            _ => Err(format!("unknown mode `{s}` (wgan_gp, wgan_clip, vanilla)")),
        }
    }
}

/// Layer widths from input to output; hidden layers use the rectifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn generator(noise_dim: usize, cond_dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            sizes: vec![noise_dim + cond_dim, hidden, out],
            output: OutputActivation::Identity,
        }
    }

    pub fn critic(sample_dim: usize, cond_dim: usize, hidden: usize, mode: Mode) -> Self {
        Self {
            sizes: vec![sample_dim + cond_dim, hidden, 1],
            output: mode.critic_output(),
        }
    }

    /// 802 -> 256 -> 48
    pub fn default_generator() -> Self {
        Self::generator(512, 290, 256, 48)
    }

    /// 338 -> 128 -> 1
    pub fn default_critic(mode: Mode) -> Self {
        Self::critic(48, 290, 128, mode)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    /// `weights[l]` is (sizes[l+1] x sizes[l])
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

struct Trace {
    /// activations a_0 (input) .. a_{L-1}
    acts: Vec<DMatrix<f64>>,
    /// pre-activations z_1 .. z_L
    pre: Vec<DMatrix<f64>>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn relu_mask(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^v) without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl Mlp {
    fn check_spec(spec: &MlpSpec) -> Result<(), CganError> {
        if spec.sizes.len() < 2 {
            return Err(CganError::Dimension("an MLP needs at least two layer sizes".into()));
        }
        if let Some(i) = spec.sizes.iter().position(|&s| s == 0) {
            return Err(CganError::ZeroLayer(i));
        }
        Ok(())
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self, CganError> {
        Self::check_spec(spec)?;
        let s = &spec.sizes;
        Ok(Self {
            spec: spec.clone(),
            weights: (0..s.len() - 1).map(|l| DMatrix::zeros(s[l + 1], s[l])).collect(),
            biases: (0..s.len() - 1).map(|l| DVector::zeros(s[l + 1])).collect(),
        })
    }

    /// Uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero biases. Weights
    /// are drawn layer by layer in row-major order.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self, CganError> {
        let mut m = Self::zeros(spec)?;
        for w in m.weights.iter_mut() {
            let (rows, cols) = w.shape();
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for i in 0..rows {
                for j in 0..cols {
                    w[(i, j)] = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(m)
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn trace(&self, x: DMatrix<f64>) -> Trace {
        let depth = self.num_layers();
        let mut acts = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut a = x;
        for l in 0..depth {
            let mut z = &self.weights[l] * &a;
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            let next = if l + 1 < depth { relu(&z) } else { DMatrix::zeros(0, 0) };
            acts.push(a);
            pre.push(z);
            a = next;
        }
        Trace { acts, pre }
    }

    /// Last-layer pre-activations (logits) for a batch.
    pub fn logits(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        self.trace(x).pre.pop().expect("at least one layer")
    }

    /// Network output for a batch, output activation applied.
    pub fn forward(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        let z = self.logits(x);
        match self.spec.output {
            OutputActivation::Identity => z,
            OutputActivation::Logistic => z.map(logistic),
        }
    }

    /// Gradients of sum_k <d_out[:,k], z_L[:,k]> with respect to weights,
    /// biases and the input.
    fn backward(&self, tr: &Trace, d_out: DMatrix<f64>) -> (Grads, DMatrix<f64>) {
        let depth = self.num_layers();
        let mut gw = vec![DMatrix::zeros(0, 0); depth];
        let mut gb = vec![DVector::zeros(0); depth];
        let mut delta = d_out;
        for l in (0..depth).rev() {
            gw[l] = &delta * tr.acts[l].transpose();
            gb[l] = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            let back = self.weights[l].tr_mul(&delta);
            if l > 0 {
                delta = back.component_mul(&relu_mask(&tr.pre[l - 1]));
            } else {
                delta = back;
            }
        }
        (Grads { w: gw, b: gb }, delta)
    }

    fn all_params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.all_params().all(|v| v.is_finite())
    }

    pub fn max_abs_param(&self) -> f64 {
        self.all_params().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn clip(&mut self, bound: f64) {
        for w in self.weights.iter_mut() {
            w.apply(|v| *v = v.clamp(-bound, bound));
        }
        for b in self.biases.iter_mut() {
            b.apply(|v| *v = v.clamp(-bound, bound));
        }
    }
}

#[derive(Debug, Clone)]
struct Grads {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

impl Grads {
    fn add_assign(&mut self, o: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&o.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&o.b) {
            *a += b;
        }
    }
}

pub fn init_networks(spec: &MlpSpec, seed: u64) -> Result<Mlp, CganError> {
    Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Stack [top; bottom] column by column into one input matrix.
fn stack_inputs(top: &[Vec<f64>], bottom: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>, CganError> {
    if top.len() != bottom.len() {
        return Err(CganError::Dimension(format!(
            "{} samples but {} condition vectors",
            top.len(),
            bottom.len()
        )));
    }
    if top.is_empty() {
        return Err(CganError::EmptyBatch);
    }
    let mut m = DMatrix::zeros(dim, top.len());
    for (k, (a, b)) in top.iter().zip(bottom).enumerate() {
        if a.len() + b.len() != dim {
            return Err(CganError::Dimension(format!(
                "input of length {} + {} for a layer of width {dim}",
                a.len(),
                b.len()
            )));
        }
        let mut col = m.column_mut(k);
        for (i, v) in a.iter().chain(b.iter()).enumerate() {
            col[i] = *v;
        }
    }
    Ok(m)
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

pub fn generator_forward(g: &Mlp, z: &[f64], c: &[f64]) -> Result<Vec<f64>, CganError> {
    let x = stack_inputs(&[z.to_vec()], &[c.to_vec()], g.spec.input_dim())?;
    Ok(g.forward(x).column(0).iter().copied().collect())
}

pub fn critic_forward(d: &Mlp, sample: &[f64], c: &[f64]) -> Result<f64, CganError> {
    let x = stack_inputs(&[sample.to_vec()], &[c.to_vec()], d.spec.input_dim())?;
    Ok(d.forward(x)[(0, 0)])
}

/// Gradient of the critic's score with respect to its sample input (the
/// condition part is excluded).
pub fn critic_input_gradient(d: &Mlp, sample: &[f64], c: &[f64]) -> Result<Vec<f64>, CganError> {
    let x = stack_inputs(&[sample.to_vec()], &[c.to_vec()], d.spec.input_dim())?;
    let tr = d.trace(x);
    let mut d_out = DMatrix::from_element(1, 1, 1.0);
    if d.spec.output == OutputActivation::Logistic {
        let s = logistic(tr.pre.last().expect("layer")[(0, 0)]);
        d_out[(0, 0)] = s * (1.0 - s);
    }
    let (_, gin) = d.backward(&tr, d_out);
    Ok(gin.column(0).rows(0, sample.len()).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub l_g: f64,
    /// Includes the gradient penalty in wgan_gp mode.
    pub l_d: f64,
    pub gp: f64,
}

/// Batch-mean generator and critic losses. `rho` (one per pair) is used for
/// the gradient penalty in wgan_gp mode and ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn losses(
    g: &Mlp,
    d: &Mlp,
    real: &[Vec<f64>],
    noise: &[Vec<f64>],
    conds: &[Vec<f64>],
    mode: Mode,
    lambda: f64,
    rho: &[f64],
) -> Result<Losses, CganError> {
    if real.len() != noise.len() {
        return Err(CganError::Dimension("real and noise batches differ in size".into()));
    }
    let fake = columns(&g.forward(stack_inputs(noise, conds, g.spec.input_dim())?));
    let ar = d.logits(stack_inputs(real, conds, d.spec.input_dim())?);
    let af = d.logits(stack_inputs(&fake, conds, d.spec.input_dim())?);
    let n = real.len() as f64;
    let (l_g, mut l_d) = match mode {
        Mode::Vanilla => {
            // log D = -softplus(-a), log(1 - D) = -softplus(a)
            let l_d = (ar.iter().map(|&a| softplus(-a)).sum::<f64>()
                + af.iter().map(|&a| softplus(a)).sum::<f64>())
                / n;
            let l_g = -af.iter().map(|&a| softplus(a)).sum::<f64>() / n;
            (l_g, l_d)
        }
        _ => {
            let mr = ar.sum() / n;
            let mf = af.sum() / n;
            (-mf, mf - mr)
        }
    };
    let mut gp = 0.0;
    if mode == Mode::WganGp {
        gp = penalty_with_rho(d, real, &fake, conds, lambda, rho)?;
        l_d += gp;
    }
    Ok(Losses { l_g, l_d, gp })
}

/// λ · mean((‖∇_s D(ŝ)‖ − 1)²) with ŝ = ρ s_g + (1 − ρ) s_r and ρ ~ U(0, 1)
/// drawn per pair from `seed`.
pub fn gradient_penalty(
    d: &Mlp,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    conds: &[Vec<f64>],
    lambda: f64,
    seed: u64,
) -> Result<f64, CganError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rho: Vec<f64> = (0..real.len()).map(|_| rng.random::<f64>()).collect();
    penalty_with_rho(d, real, fake, conds, lambda, &rho)
}

/// Gradient penalty at explicit interpolation weights together with its
/// gradient with respect to the critic weights (one matrix per layer).
pub fn penalty_weight_gradient(
    d: &Mlp,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    conds: &[Vec<f64>],
    lambda: f64,
    rho: &[f64],
) -> Result<(f64, Vec<DMatrix<f64>>), CganError> {
    if real.len() != fake.len() || real.len() != rho.len() {
        return Err(CganError::Dimension("penalty batches differ in size".into()));
    }
    if real.is_empty() {
        return Err(CganError::EmptyBatch);
    }
    let interp = interpolate(real, fake, rho);
    let x = stack_inputs(&interp, conds, d.spec.input_dim())?;
    let (gp, g) = penalty_param_grads(d, x, real[0].len(), lambda);
    Ok((gp, g.w))
}

fn interpolate(real: &[Vec<f64>], fake: &[Vec<f64>], rho: &[f64]) -> Vec<Vec<f64>> {
    real.iter()
        .zip(fake)
        .zip(rho)
        .map(|((r, f), &p)| r.iter().zip(f).map(|(a, b)| p * b + (1.0 - p) * a).collect())
        .collect()
}

fn penalty_with_rho(
    d: &Mlp,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    conds: &[Vec<f64>],
    lambda: f64,
    rho: &[f64],
) -> Result<f64, CganError> {
    if real.len() != fake.len() || real.len() != rho.len() {
        return Err(CganError::Dimension("penalty batches differ in size".into()));
    }
    if real.is_empty() {
        return Err(CganError::EmptyBatch);
    }
    let interp = interpolate(real, fake, rho);
    let sample_dim = real[0].len();
    let x = stack_inputs(&interp, conds, d.spec.input_dim())?;
    Ok(penalty_param_grads(d, x, sample_dim, lambda).0)
}

/// For a critic with identity output, D's input gradient is
/// g = W_1ᵀ δ_1 with δ_L = 1 and δ_l = M_l ⊙ (W_{l+1}ᵀ δ_{l+1}), where M_l is
/// the rectifier mask. With γ = ∂GP/∂g (restricted to the sample rows) and
/// φ_0 = [γ; 0], φ_l = M_l ⊙ (W_l φ_{l-1}), the penalty's parameter gradient
/// is ∂GP/∂W_l = δ_l φ_{l-1}ᵀ; biases only move the (locally constant)
/// masks, so their gradient is zero.
fn penalty_param_grads(d: &Mlp, x: DMatrix<f64>, sample_dim: usize, lambda: f64) -> (f64, Grads) {
    let depth = d.num_layers();
    let b = x.ncols();
    let tr = d.trace(x);
    let masks: Vec<DMatrix<f64>> = (0..depth - 1).map(|l| relu_mask(&tr.pre[l])).collect();
    // δ_l for l = 1..L stored at index l-1
    let mut deltas = vec![DMatrix::zeros(0, 0); depth];
    deltas[depth - 1] = DMatrix::from_element(1, b, 1.0);
    for l in (0..depth - 1).rev() {
        deltas[l] = d.weights[l + 1].tr_mul(&deltas[l + 1]).component_mul(&masks[l]);
    }
    let g_full = d.weights[0].tr_mul(&deltas[0]);
    let mut gp = 0.0;
    let mut phi = DMatrix::zeros(g_full.nrows(), b);
    for k in 0..b {
        let g: Vec<f64> = g_full.column(k).iter().take(sample_dim).copied().collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        gp += (norm - 1.0).powi(2);
        if norm > 0.0 {
            let scale = lambda * 2.0 * (norm - 1.0) / (norm * b as f64);
            for i in 0..sample_dim {
                phi[(i, k)] = scale * g[i];
            }
        }
    }
    gp *= lambda / b as f64;
    let mut gw = Vec::with_capacity(depth);
    let mut gb = Vec::with_capacity(depth);
    for l in 0..depth {
        gw.push(&deltas[l] * phi.transpose());
        gb.push(DVector::zeros(d.biases[l].len()));
        if l + 1 < depth {
            phi = (&d.weights[l] * &phi).component_mul(&masks[l]);
        }
    }
    (gp, Grads { w: gw, b: gb })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub noise_dim: usize,
    pub hidden_generator: usize,
    pub hidden_critic: usize,
    pub iterations: usize,
    pub critic_steps_per_gen: usize,
    pub batch_size: usize,
    pub gp_weight: f64,
    pub mode: Mode,
    pub clip_bound: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_dim: 512,
            hidden_generator: 256,
            hidden_critic: 128,
            iterations: 20_000,
            critic_steps_per_gen: 5,
            batch_size: 32,
            gp_weight: 10.0,
            mode: Mode::WganGp,
            clip_bound: 0.01,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CganError> {
        let bad = |m: &str| Err(CganError::Config(m.to_string()));
        if self.critic_steps_per_gen < 1 {
            return bad("critic_steps_per_gen must be >= 1");
        }
        if !(self.gp_weight >= 0.0) {
            return bad("gp_weight must be >= 0");
        }
        if self.noise_dim == 0 || self.batch_size == 0 {
            return bad("noise_dim and batch_size must be positive");
        }
        if self.mode == Mode::WganClip && !(self.clip_bound > 0.0) {
            return bad("clip_bound must be positive in wgan_clip mode");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("need learning_rate > 0 and betas in [0, 1)");
        }
        Ok(())
    }
}

/// Real residual days with their condition vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub samples: Vec<Vec<f64>>,
    pub conditions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_g: f64,
    pub l_d: f64,
    pub gp: f64,
}

pub fn write_loss_csv(history: &[LossRecord], w: impl std::io::Write) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "iteration,L_G,L_D,GP")?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.iteration, r.l_g, r.l_d, r.gp)?;
    }
    w.flush()
}

struct Adam {
    m: Grads,
    v: Grads,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
}

impl Adam {
    fn new(net: &Mlp, lr: f64, b1: f64, b2: f64) -> Self {
        let zero = Grads {
            w: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            b: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        };
        Self {
            m: zero.clone(),
            v: zero,
            t: 0,
            lr,
            b1,
            b2,
        }
    }

    fn step(&mut self, net: &mut Mlp, g: &Grads) {
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        let (b1, b2, lr) = (self.b1, self.b2, self.lr);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        };
        for l in 0..net.weights.len() {
            update(
                net.weights[l].as_mut_slice(),
                self.m.w[l].as_mut_slice(),
                self.v.w[l].as_mut_slice(),
                g.w[l].as_slice(),
            );
            update(
                net.biases[l].as_mut_slice(),
                self.m.b[l].as_mut_slice(),
                self.v.b[l].as_mut_slice(),
                g.b[l].as_slice(),
            );
        }
    }
}

/// Trained generator/critic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Cgan {
    pub generator: Mlp,
    pub critic: Mlp,
    pub mode: Mode,
    pub noise_dim: usize,
    pub seed: u64,
    pub iterations: usize,
}

impl Cgan {
    pub fn sample_dim(&self) -> usize {
        self.generator.spec.output_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.generator.spec.input_dim() - self.noise_dim
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn pick(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn gather(data: &[Vec<f64>], idx: &[usize]) -> DMatrix<f64> {
    let dim = data[idx[0]].len();
    DMatrix::from_fn(dim, idx.len(), |i, k| data[idx[k]][i])
}

/// Alternating training: `critic_steps_per_gen` critic updates per
/// generator update; one history record per generator update.
pub fn train(set: &TrainingSet, config: &TrainConfig) -> Result<(Cgan, Vec<LossRecord>), CganError> {
    train_with_callback(set, config, |_| {})
}

pub fn train_with_callback(
    set: &TrainingSet,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<(Cgan, Vec<LossRecord>), CganError> {
    config.validate()?;
    if set.samples.is_empty() || set.samples.len() != set.conditions.len() {
        return Err(CganError::Dimension(format!(
            "training set has {} samples and {} conditions",
            set.samples.len(),
            set.conditions.len()
        )));
    }
    let sample_dim = set.samples[0].len();
    let cond_dim = set.conditions[0].len();
    if set.samples.iter().any(|s| s.len() != sample_dim) || set.conditions.iter().any(|c| c.len() != cond_dim) {
        return Err(CganError::Dimension("ragged training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut g = Mlp::init(
        &MlpSpec::generator(config.noise_dim, cond_dim, config.hidden_generator, sample_dim),
        &mut rng,
    )?;
    let mut d = Mlp::init(
        &MlpSpec::critic(sample_dim, cond_dim, config.hidden_critic, config.mode),
        &mut rng,
    )?;
    if config.mode == Mode::WganClip {
        d.clip(config.clip_bound);
    }
    let mut opt_g = Adam::new(&g, config.learning_rate, config.beta1, config.beta2);
    let mut opt_d = Adam::new(&d, config.learning_rate, config.beta1, config.beta2);
    let b = config.batch_size;
    let n = set.samples.len();
    let nz = config.noise_dim;
    let mut history = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let (mut l_d, mut gp) = (0.0, 0.0);
        for _ in 0..config.critic_steps_per_gen {
            let idx = pick(&mut rng, n, b);
            let real = gather(&set.samples, &idx);
            let cond = gather(&set.conditions, &idx);
            let z = normal_matrix(&mut rng, nz, b);
            let fake = g.forward(concat_rows(&z, &cond));
            let rho: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();

            let x_real = concat_rows(&real, &cond);
            let x_fake = concat_rows(&fake, &cond);
            let tr_r = d.trace(x_real);
            let tr_f = d.trace(x_fake);
            let ar = tr_r.pre.last().expect("layer").clone();
            let af = tr_f.pre.last().expect("layer").clone();
            let bf = b as f64;
            let (loss, dr, df) = match config.mode {
                Mode::Vanilla => {
                    let loss = (ar.iter().map(|&a| softplus(-a)).sum::<f64>()
                        + af.iter().map(|&a| softplus(a)).sum::<f64>())
                        / bf;
                    (
                        loss,
                        ar.map(|a| -logistic(-a) / bf),
                        af.map(|a| logistic(a) / bf),
                    )
                }
                _ => (
                    (af.sum() - ar.sum()) / bf,
                    DMatrix::from_element(1, b, -1.0 / bf),
                    DMatrix::from_element(1, b, 1.0 / bf),
                ),
            };
            let (mut grads, _) = d.backward(&tr_r, dr);
            let (gf, _) = d.backward(&tr_f, df);
            grads.add_assign(&gf);
            l_d = loss;
            gp = 0.0;
            if config.mode == Mode::WganGp {
                let mut xh = DMatrix::zeros(sample_dim + cond_dim, b);
                for k in 0..b {
                    for i in 0..sample_dim {
                        xh[(i, k)] = rho[k] * fake[(i, k)] + (1.0 - rho[k]) * real[(i, k)];
                    }
                    for i in 0..cond_dim {
                        xh[(sample_dim + i, k)] = cond[(i, k)];
                    }
                }
                let (p, pg) = penalty_param_grads(&d, xh, sample_dim, config.gp_weight);
                gp = p;
                l_d += p;
                grads.add_assign(&pg);
            }
            opt_d.step(&mut d, &grads);
            if config.mode == Mode::WganClip {
                d.clip(config.clip_bound);
            }
        }

        // generator step
        let idx = pick(&mut rng, n, b);
        let cond = gather(&set.conditions, &idx);
        let z = normal_matrix(&mut rng, nz, b);
        let tr_g = g.trace(concat_rows(&z, &cond));
        let fake = tr_g.pre.last().expect("layer").clone();
        let tr_d = d.trace(concat_rows(&fake, &cond));
        let af = tr_d.pre.last().expect("layer").clone();
        let bf = b as f64;
        let (l_g, d_af) = match config.mode {
            Mode::Vanilla => (
                -af.iter().map(|&a| softplus(a)).sum::<f64>() / bf,
                af.map(|a| -logistic(a) / bf),
            ),
            _ => (-af.sum() / bf, DMatrix::from_element(1, b, -1.0 / bf)),
        };
        let (_, d_in) = d.backward(&tr_d, d_af);
        let d_fake = d_in.rows(0, sample_dim).into_owned();
        let (g_grads, _) = g.backward(&tr_g, d_fake);
        opt_g.step(&mut g, &g_grads);

        let rec = LossRecord {
            iteration: it,
            l_g,
            l_d,
            gp,
        };
        if !(l_g.is_finite() && l_d.is_finite() && gp.is_finite()) {
            return Err(CganError::NonFinite {
                iteration: it,
                l_g,
                l_d,
                gp,
            });
        }
        on_iteration(&rec);
        history.push(rec);
    }
    Ok((
        Cgan {
            generator: g,
            critic: d,
            mode: config.mode,
            noise_dim: nz,
            seed: config.seed,
            iterations: config.iterations,
        },
        history,
    ))
}

fn concat_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, r2) = (top.nrows(), bottom.nrows());
    let mut m = DMatrix::zeros(r1 + r2, top.ncols());
    m.rows_mut(0, r1).copy_from(top);
    m.rows_mut(r1, r2).copy_from(bottom);
    m
}

/// Generated residual profiles for one condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub condition: Vec<f64>,
    pub seed: u64,
    /// one row per scenario
    pub scenarios: Vec<Vec<f64>>,
}

/// Noise vector `index` of the stream keyed by `seed`; independent of how
/// many scenarios are drawn or in which order.
pub fn scenario_noise(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample_scenarios(g: &Mlp, noise_dim: usize, c: &[f64], n: usize, seed: u64) -> Result<ScenarioSet, CganError> {
    if n == 0 {
        return Err(CganError::EmptyBatch);
    }
    if noise_dim + c.len() != g.spec.input_dim() {
        return Err(CganError::Dimension(format!(
            "noise {noise_dim} + condition {} does not match generator input {}",
            c.len(),
            g.spec.input_dim()
        )));
    }
    let mut x = DMatrix::zeros(g.spec.input_dim(), n);
    for k in 0..n {
        let z = scenario_noise(seed, k as u64, noise_dim);
        let mut col = x.column_mut(k);
        for (i, v) in z.iter().chain(c.iter()).enumerate() {
            col[i] = *v;
        }
    }
    Ok(ScenarioSet {
        condition: c.to_vec(),
        seed,
        scenarios: columns(&g.forward(x)),
    })
}

// ---------------------------------------------------------------------------
// checkpoint

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpRecord {
    spec: MlpSpec,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    version: String,
    mode: Mode,
    seed: u64,
    iterations: usize,
    noise_dim: usize,
    generator: MlpRecord,
    critic: MlpRecord,
}

impl MlpRecord {
    fn from_mlp(m: &Mlp) -> Self {
        Self {
            spec: m.spec.clone(),
            layers: m
                .weights
                .iter()
                .zip(&m.biases)
                .map(|(w, b)| LayerRecord {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: w.transpose().as_slice().to_vec(),
                    bias: b.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    fn into_mlp(self) -> Result<Mlp, CganError> {
        let mut m = Mlp::zeros(&self.spec)?;
        if self.layers.len() != m.weights.len() {
            return Err(CganError::Checkpoint("layer count does not match spec".into()));
        }
        for (l, rec) in self.layers.into_iter().enumerate() {
            let (r, c) = m.weights[l].shape();
            if rec.rows != r || rec.cols != c || rec.weights.len() != r * c || rec.bias.len() != r {
                return Err(CganError::Checkpoint(format!("layer {l} shape mismatch")));
            }
            m.weights[l] = DMatrix::from_row_slice(r, c, &rec.weights);
            m.biases[l] = DVector::from_vec(rec.bias);
        }
        Ok(m)
    }
}

impl Cgan {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&CheckpointRecord {
            version: CHECKPOINT_VERSION.to_string(),
            mode: self.mode,
            seed: self.seed,
            iterations: self.iterations,
            noise_dim: self.noise_dim,
            generator: MlpRecord::from_mlp(&self.generator),
            critic: MlpRecord::from_mlp(&self.critic),
        })
        .expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CganError> {
        let rec: CheckpointRecord =
            serde_json::from_str(s).map_err(|e| CganError::Checkpoint(e.to_string()))?;
        if rec.version != CHECKPOINT_VERSION {
            return Err(CganError::Checkpoint(format!(
                "unsupported checkpoint version `{}`",
                rec.version
            )));
        }
        Ok(Self {
            generator: rec.generator.into_mlp()?,
            critic: rec.critic.into_mlp()?,
            mode: rec.mode,
            noise_dim: rec.noise_dim,
            seed: rec.seed,
            iterations: rec.iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn default_shapes() {
        let g = init_networks(&MlpSpec::default_generator(), 1).unwrap();
        assert_eq!(g.weights[0].shape(), (256, 802));
        assert_eq!(g.weights[1].shape(), (48, 256));
        let d = init_networks(&MlpSpec::default_critic(Mode::WganGp), 1).unwrap();
        assert_eq!(d.weights[0].shape(), (128, 338));
        assert_eq!(d.weights[1].shape(), (1, 128));
    }

    #[test]
    fn zero_size_layer_rejected() {
        let spec = MlpSpec {
            sizes: vec![3, 0, 1],
            output: OutputActivation::Identity,
        };
        assert!(matches!(Mlp::zeros(&spec), Err(CganError::ZeroLayer(1))));
    }
}
