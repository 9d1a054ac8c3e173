use gridflex::cgan::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_spec(sizes: &[usize], out: OutputActivation) -> MlpSpec {
    MlpSpec {
        sizes: sizes.to_vec(),
        output: out,
    }
}

fn random_vecs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Randomized critic whose biases are nonzero too.
fn random_critic(seed: u64, sizes: &[usize]) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Mlp::init(&toy_spec(sizes, OutputActivation::Identity), &mut rng).unwrap();
    for b in d.biases.iter_mut() {
        b.apply(|v| *v = rng.random_range(-0.3..0.3));
    }
    d
}

/// Independent scalar-loop forward pass.
fn naive_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let depth = m.weights.len();
    for l in 0..depth {
        let w = &m.weights[l];
        let mut z = vec![0.0; w.nrows()];
        for i in 0..w.nrows() {
            let mut acc = m.biases[l][i];
            for j in 0..w.ncols() {
                acc += w[(i, j)] * a[j];
            }
            z[i] = acc;
        }
        a = if l + 1 < depth {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z
        };
    }
    if m.spec.output == OutputActivation::Logistic {
        a.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    }
    a
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

#[test]
fn init_is_seeded_and_bounded() {
    let spec = MlpSpec::default_generator();
    let a = init_networks(&spec, 11).unwrap();
    let b = init_networks(&spec, 11).unwrap();
    assert_eq!(a, b);
    let bound = (6.0f64 / (256.0 + 802.0)).sqrt();
    assert!(a.weights[0].iter().all(|v| v.abs() <= bound));
    assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    assert_ne!(a, init_networks(&spec, 12).unwrap());
}

#[test]
fn zero_networks() {
    let g = Mlp::zeros(&MlpSpec::default_generator()).unwrap();
    let out = generator_forward(&g, &vec![0.3; 512], &vec![0.7; 290]).unwrap();
    assert_eq!(out, vec![0.0; 48]);
    let d = Mlp::zeros(&MlpSpec::default_critic(Mode::Vanilla)).unwrap();
    assert_eq!(critic_forward(&d, &[0.0; 48], &vec![1.0; 290]).unwrap(), 0.5);
    let d = Mlp::zeros(&MlpSpec::default_critic(Mode::WganGp)).unwrap();
    assert_eq!(critic_forward(&d, &[2.0; 48], &vec![1.0; 290]).unwrap(), 0.0);
    let s = sample_scenarios(&g, 512, &vec![0.1; 290], 5, 9).unwrap();
    assert!(s.scenarios.iter().all(|r| r.iter().all(|&v| v == 0.0)));
}

#[test]
fn dimension_mismatch_is_an_error() {
    let g = Mlp::zeros(&MlpSpec::default_generator()).unwrap();
    assert!(generator_forward(&g, &[0.0; 10], &[0.0; 290]).is_err());
    let d = Mlp::zeros(&MlpSpec::default_critic(Mode::WganGp)).unwrap();
    assert!(critic_forward(&d, &[0.0; 47], &[0.0; 290]).is_err());
}

#[test]
fn toy_forward_by_hand() {
    // one affine layer on a 2-dim input embedding the identity
    let mut g = Mlp::zeros(&toy_spec(&[2, 2], OutputActivation::Identity)).unwrap();
    g.weights[0] = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    g.biases[0][0] = 0.5;
    g.biases[0][1] = -1.0;
    assert_eq!(generator_forward(&g, &[2.0], &[3.0]).unwrap(), vec![2.5, 2.0]);

    // critic 2 -> 2 -> 1 with one unit inactive
    let mut d = Mlp::zeros(&toy_spec(&[2, 2, 1], OutputActivation::Identity)).unwrap();
    d.weights[0] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, -1.0]);
    d.weights[1] = DMatrix::from_row_slice(1, 2, &[3.0, 5.0]);
    d.biases[1][0] = 0.25;
    // hidden = relu([1 + 4, -1 - 2]) = [5, 0]; out = 15 + 0.25
    assert_eq!(critic_forward(&d, &[1.0], &[2.0]).unwrap(), 15.25);
    let grad = critic_input_gradient(&d, &[1.0], &[2.0]).unwrap();
    assert_eq!(grad, vec![3.0]);
}

#[test]
fn forward_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Mlp::init(&toy_spec(&[9, 7, 4], OutputActivation::Identity), &mut rng).unwrap();
    for _ in 0..20 {
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = generator_forward(&g, &z, &c).unwrap();
        let b = naive_forward(&g, &cat(&z, &c));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_critic_losses() {
    // critic ≡ c0: zero weights, output bias c0
    let c0 = 0.7;
    let mut d = Mlp::zeros(&toy_spec(&[5, 3, 1], OutputActivation::Identity)).unwrap();
    d.biases[1][0] = c0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Mlp::init(&toy_spec(&[4, 6, 3], OutputActivation::Identity), &mut rng).unwrap();
    let real = random_vecs(&mut rng, 8, 3);
    let noise = random_vecs(&mut rng, 8, 2);
    let conds = random_vecs(&mut rng, 8, 2);
    let rho = vec![0.5; 8];
    let l = losses(&g, &d, &real, &noise, &conds, Mode::WganClip, 0.0, &rho).unwrap();
    assert!(l.l_d.abs() < 1e-15);
    assert!((l.l_g + c0).abs() < 1e-15);
    // constant critic: zero gradient, GP = λ (0 - 1)² = λ
    let l = losses(&g, &d, &real, &noise, &conds, Mode::WganGp, 10.0, &rho).unwrap();
    assert!((l.gp - 10.0).abs() < 1e-12);
    assert!((l.l_d - 10.0).abs() < 1e-12);
    let fake = random_vecs(&mut rng, 8, 3);
    assert!((gradient_penalty(&d, &real, &fake, &conds, 10.0, 3).unwrap() - 10.0).abs() < 1e-12);

    // vanilla with D ≡ 0.5: L_D = -2 log 0.5
    let dz = Mlp::zeros(&toy_spec(&[5, 3, 1], OutputActivation::Logistic)).unwrap();
    let l = losses(&g, &dz, &real, &noise, &conds, Mode::Vanilla, 0.0, &rho).unwrap();
    assert!((l.l_d - 1.3862943611198906).abs() < 1e-12);
    assert!((l.l_g - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn unit_norm_linear_critic_has_zero_penalty() {
    let mut d = Mlp::zeros(&toy_spec(&[6, 1], OutputActivation::Identity)).unwrap();
    // sample part (first 4 inputs) has unit norm; condition weights are ignored
    let w = [0.5, -0.5, 0.5, 0.5, 3.0, -2.0];
    for (j, v) in w.iter().enumerate() {
        d.weights[0][(0, j)] = *v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let real = random_vecs(&mut rng, 10, 4);
    let fake = random_vecs(&mut rng, 10, 4);
    let conds = random_vecs(&mut rng, 10, 2);
    assert!(gradient_penalty(&d, &real, &fake, &conds, 10.0, 4).unwrap().abs() < 1e-24);
}

/// Independent loss oracle with scalar loops.
fn naive_losses(g: &Mlp, d: &Mlp, real: &[Vec<f64>], noise: &[Vec<f64>], conds: &[Vec<f64>], mode: Mode) -> (f64, f64) {
    let n = real.len() as f64;
    let (mut lg, mut ld) = (0.0, 0.0);
    for k in 0..real.len() {
        let fake = naive_forward(g, &cat(&noise[k], &conds[k]));
        let dr = naive_forward(d, &cat(&real[k], &conds[k]))[0];
        let df = naive_forward(d, &cat(&fake, &conds[k]))[0];
        match mode {
            Mode::Vanilla => {
                ld += -dr.ln() - (1.0 - df).ln();
                lg += (1.0 - df).ln();
            }
            _ => {
                ld += df - dr;
                lg += -df;
            }
        }
    }
    (lg / n, ld / n)
}

#[test]
fn losses_match_naive_loops() {
    for (seed, mode) in [(1u64, Mode::WganClip), (2, Mode::Vanilla), (3, Mode::WganClip), (4, Mode::Vanilla)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Mlp::init(&toy_spec(&[5, 8, 4], OutputActivation::Identity), &mut rng).unwrap();
        let d = Mlp::init(&toy_spec(&[6, 5, 1], mode.critic_output()), &mut rng).unwrap();
        let real = random_vecs(&mut rng, 7, 4);
        let noise = random_vecs(&mut rng, 7, 3);
        let conds = random_vecs(&mut rng, 7, 2);
        let l = losses(&g, &d, &real, &noise, &conds, mode, 0.0, &[0.5; 7]).unwrap();
        let (lg, ld) = naive_losses(&g, &d, &real, &noise, &conds, mode);
        assert!((l.l_g - lg).abs() < 1e-12, "{mode:?} L_G {} vs {lg}", l.l_g);
        assert!((l.l_d - ld).abs() < 1e-12, "{mode:?} L_D {} vs {ld}", l.l_d);
    }
}

#[test]
fn empty_batch_rejected() {
    let g = Mlp::zeros(&toy_spec(&[3, 2], OutputActivation::Identity)).unwrap();
    let d = Mlp::zeros(&toy_spec(&[3, 1], OutputActivation::Identity)).unwrap();
    assert!(losses(&g, &d, &[], &[], &[], Mode::WganGp, 10.0, &[]).is_err());
}

/// Naive penalty: input gradients by central differences, nothing shared
/// with the library's backward pass.
fn fd_penalty(d: &Mlp, real: &[Vec<f64>], fake: &[Vec<f64>], conds: &[Vec<f64>], lambda: f64, rho: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..real.len() {
        let s: Vec<f64> = (0..real[k].len()).map(|i| rho[k] * fake[k][i] + (1.0 - rho[k]) * real[k][i]).collect();
        let mut n2 = 0.0;
        for i in 0..s.len() {
            let h = 1e-6;
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[i] += h;
            sm[i] -= h;
            let gi = (naive_forward(d, &cat(&sp, &conds[k]))[0] - naive_forward(d, &cat(&sm, &conds[k]))[0]) / (2.0 * h);
            n2 += gi * gi;
        }
        acc += (n2.sqrt() - 1.0).powi(2);
    }
    lambda * acc / real.len() as f64
}

#[test]
fn penalty_matches_finite_difference_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = random_critic(3, &[7, 6, 5, 1]);
    let real = random_vecs(&mut rng, 5, 4);
    let fake = random_vecs(&mut rng, 5, 4);
    let conds = random_vecs(&mut rng, 5, 3);
    let rho: Vec<f64> = (0..5).map(|_| rng.random()).collect();
    let (gp, _) = penalty_weight_gradient(&d, &real, &fake, &conds, 10.0, &rho).unwrap();
    let oracle = fd_penalty(&d, &real, &fake, &conds, 10.0, &rho);
    assert!((gp - oracle).abs() <= 1e-6 * oracle.abs().max(1.0), "{gp} vs {oracle}");
}

#[test]
fn penalty_weight_gradient_matches_central_differences() {
    // finite-difference reference over θ_D (step 1e-4) on the penalty alone
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = random_critic(seed, &[6, 5, 4, 1]);
        let real = random_vecs(&mut rng, 4, 3);
        let fake = random_vecs(&mut rng, 4, 3);
        let conds = random_vecs(&mut rng, 4, 3);
        let rho: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let (_, grads) = penalty_weight_gradient(&d, &real, &fake, &conds, 10.0, &rho).unwrap();
        let gp_at = |m: &Mlp| penalty_weight_gradient(m, &real, &fake, &conds, 10.0, &rho).unwrap().0;
        for l in 0..d.weights.len() {
            let (r, c) = d.weights[l].shape();
            for i in 0..r {
                for j in 0..c {
                    let h = 1e-4;
                    let (mut p, mut m) = (d.clone(), d.clone());
                    p.weights[l][(i, j)] += h;
                    m.weights[l][(i, j)] -= h;
                    let fd = (gp_at(&p) - gp_at(&m)) / (2.0 * h);
                    let an = grads[l][(i, j)];
                    // penalty is quadratic in each weight between mask switches
                    assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "layer {l} ({i},{j}): analytic {an} fd {fd}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn input_gradient_matches_central_differences(seed in 0u64..1_000_000) {
        let d = random_critic(seed, &[8, 6, 5, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let s: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = critic_input_gradient(&d, &s, &c).unwrap();
        let h = 1e-5;
        for i in 0..s.len() {
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[i] += h;
            sm[i] -= h;
            let fd = (critic_forward(&d, &sp, &c).unwrap() - critic_forward(&d, &sm, &c).unwrap()) / (2.0 * h);
            // skip draws where a rectifier switches inside the stencil
            let kink = naive_kink(&d, &cat(&s, &c), h * 2.0);
            prop_assume!(!kink);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "slot {}: {} vs {}", i, g[i], fd);
        }
    }
}

/// True when some hidden pre-activation lies within `eps`-scaled reach of 0.
fn naive_kink(m: &Mlp, x: &[f64], eps: f64) -> bool {
    let mut a = x.to_vec();
    for l in 0..m.weights.len() - 1 {
        let w = &m.weights[l];
        let mut z = vec![0.0; w.nrows()];
        for i in 0..w.nrows() {
            z[i] = m.biases[l][i] + (0..w.ncols()).map(|j| w[(i, j)] * a[j]).sum::<f64>();
            let reach: f64 = (0..w.ncols()).map(|j| w[(i, j)].abs()).sum::<f64>() * eps * 10.0;
            if z[i].abs() < reach {
                return true;
            }
        }
        a = z.iter().map(|v| v.max(0.0)).collect();
    }
    false
}

fn toy_set(n: usize, cond_dim: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainingSet::default();
    for _ in 0..n {
        set.samples.push((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        set.conditions.push((0..cond_dim).map(|_| rng.random::<f64>()).collect());
    }
    set
}

fn small_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        noise_dim: 4,
        hidden_generator: 8,
        hidden_critic: 8,
        iterations: 30,
        batch_size: 8,
        mode,
        seed,
        ..Default::default()
    }
}

#[test]
fn training_is_reproducible() {
    let set = toy_set(40, 3, 1);
    let (a, ha) = train(&set, &small_config(Mode::WganGp, 5)).unwrap();
    let (b, hb) = train(&set, &small_config(Mode::WganGp, 5)).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    let (_, hc) = train(&set, &small_config(Mode::WganGp, 6)).unwrap();
    assert_ne!(ha, hc);
}

#[test]
fn clip_mode_bounds_critic_weights_every_step() {
    let set = toy_set(40, 3, 2);
    for iters in [1, 2, 7] {
        let mut cfg = small_config(Mode::WganClip, 9);
        cfg.iterations = iters;
        cfg.gp_weight = 0.0;
        let (m, _) = train(&set, &cfg).unwrap();
        assert!(m.critic.max_abs_param() <= 0.01 + 1e-15);
    }
}

#[test]
fn vanilla_mode_trains() {
    let set = toy_set(40, 3, 3);
    let (_, h) = train(&set, &small_config(Mode::Vanilla, 1)).unwrap();
    assert!(h.iter().all(|r| r.l_d.is_finite() && r.gp == 0.0));
}

#[test]
fn sampling_is_reproducible_and_index_stable() {
    let set = toy_set(40, 3, 4);
    let (m, _) = train(&set, &small_config(Mode::WganGp, 2)).unwrap();
    let c = &set.conditions[0];
    let a = sample_scenarios(&m.generator, 4, c, 50, 77).unwrap();
    let b = sample_scenarios(&m.generator, 4, c, 50, 77).unwrap();
    assert_eq!(a, b);
    let short = sample_scenarios(&m.generator, 4, c, 10, 77).unwrap();
    assert_eq!(short.scenarios[..], a.scenarios[..10]);
    for (k, row) in a.scenarios.iter().enumerate().take(5) {
        let z = scenario_noise(77, k as u64, 4);
        let single = generator_forward(&m.generator, &z, c).unwrap();
        assert!(row.iter().zip(&single).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn checkpoint_round_trip() {
    let set = toy_set(40, 3, 5);
    let (m, _) = train(&set, &small_config(Mode::WganGp, 3)).unwrap();
    let back = Cgan::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
    assert!(Cgan::from_json(&m.to_json().replace("gridflex-cgan/1", "other/9")).is_err());
}

#[test]
fn loss_csv_schema() {
    let h = vec![LossRecord { iteration: 0, l_g: 1.0, l_d: -0.5, gp: 0.25 }];
    let mut out = Vec::new();
    write_loss_csv(&h, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "iteration,L_G,L_D,GP\n0,1,-0.5,0.25\n");
}

#[test]
fn separates_low_and_high_spread_slots() {
    use rand_distr::StandardNormal;
    let sig = [0.1, 0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cond = vec![0.25, 0.75];
    let mut set = TrainingSet::default();
    for _ in 0..1000 {
        set.samples.push(sig.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect());
        set.conditions.push(cond.clone());
    }
    let cfg = TrainConfig {
        noise_dim: 8,
        hidden_generator: 32,
        hidden_critic: 32,
        iterations: 2000,
        batch_size: 64,
        learning_rate: 5e-4,
        seed: 1,
        ..Default::default()
    };
    let (m, hist) = train(&set, &cfg).unwrap();
    let s = sample_scenarios(&m.generator, 8, &cond, 4000, 2).unwrap();
    let sd: Vec<f64> = (0..8)
        .map(|t| {
            let xs: Vec<f64> = s.scenarios.iter().map(|r| r[t]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        })
        .collect();
    let low = sd[..4].iter().sum::<f64>() / 4.0;
    let high = sd[4..].iter().sum::<f64>() / 4.0;
    assert!(high > 3.0 * low, "low-half sd {low}, high-half sd {high}");
    assert!((high / 0.5 - 1.0).abs() < 0.3, "high-half sd {high}");
    let early = hist[..200].iter().map(|r| r.l_d.abs()).sum::<f64>() / 200.0;
    let late = hist[1800..].iter().map(|r| r.l_d.abs()).sum::<f64>() / 200.0;
    assert!(late < early, "|L_D| {early} -> {late}");
}
