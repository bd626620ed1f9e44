use super::*;
use crate::nn::AdamConfig;
use crate::tensor::check_scalar_fn;

fn moments(x: &Tensor) -> (f64, f64) {
    let m = x.mean();
    let v = x.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.numel() as f64;
    (m, v)
}

/// MMSE noise predictor for scalar data `x₀ ~ N(m, v)`.
fn oracle(m: f64, v: f64, s: &DiffusionSchedule) -> impl Fn(&Tensor, &Tensor, usize) -> Result<Tensor> + '_ {
    move |x: &Tensor, _: &Tensor, t: usize| {
        let ab = s.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * v + 1.0 - ab);
        Ok(x.map(|xv| k * (xv - ab.sqrt() * m)))
    }
}

#[test]
fn schedule_basics() {
    let s = make_schedule(1, 1e-4, 0.02).unwrap();
    assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    assert_eq!(s.posterior_var(1), 0.0);

    let s = DiffusionSchedule::default();
    assert_eq!(s.steps(), 200);
    assert_eq!(s.posterior_var(1), 0.0);
    assert_eq!(s.alpha_bar(0), 1.0);
    let mut prod = 1.0;
    for t in 1..=200 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 199.0;
        prod *= 1.0 - beta;
    }
    assert!((s.alpha_bar(200) - prod).abs() < 1e-14);
    for t in 1..200 {
        assert!(s.beta(t) < s.beta(t + 1));
        assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
    }
    assert!(make_schedule(0, 1e-4, 0.02).is_err());
    assert!(make_schedule(10, 0.1, 0.01).is_err());
}

#[test]
fn q_sample_examples() {
    let s = DiffusionSchedule::default();
    let mut rng = SimRng::new(1);
    let x0 = rng.normal_tensor(&[5]);
    let eps = rng.normal_tensor(&[5]);
    assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
    let z = q_sample(&x0.zeros_like(), 50, &eps, &s).unwrap();
    assert!(z.max_abs_diff(&eps.scale((1.0 - s.alpha_bar(50)).sqrt())).unwrap() < 1e-15);
}

#[test]
fn q_sample_monte_carlo() {
    let s = DiffusionSchedule::default();
    let mut rng = SimRng::new(2);
    let x0 = Tensor::full(vec![100_000], 1.5).unwrap();
    let eps = rng.normal_tensor(&[100_000]);
    let (m, v) = moments(&q_sample(&x0, 100, &eps, &s).unwrap());
    let ab = s.alpha_bar(100);
    let (em, esd) = (ab.sqrt() * 1.5, (1.0 - ab).sqrt());
    assert!((m - em).abs() < 0.02 * em, "{m} vs {em}");
    assert!((v.sqrt() - esd).abs() < 0.02 * esd);
}

#[test]
fn forward_chain_matches_marginal() {
    let s = DiffusionSchedule::default();
    let mut rng = SimRng::new(3);
    let mut x = Tensor::full(vec![20_000], 2.0).unwrap();
    for t in 1..=200 {
        x = forward_step(&x, t, &s, &mut rng).unwrap();
    }
    let (m, v) = moments(&x);
    let ab = s.alpha_bar(200);
    assert!((m - 2.0 * ab.sqrt()).abs() < 0.03, "{m}");
    assert!((v - (1.0 - ab)).abs() < 0.03 * (1.0 - ab), "{v}");

    let a = forward_step(&x, 5, &s, &mut SimRng::new(9)).unwrap();
    let b = forward_step(&x, 5, &s, &mut SimRng::new(9)).unwrap();
    assert_eq!(a, b);
    assert!(forward_step(&x, 0, &s, &mut rng).is_err());
}

#[test]
fn posterior_matches_analytic_mean() {
    let s = DiffusionSchedule::default();
    let mut rng = SimRng::new(4);
    let x0 = rng.normal_tensor(&[16]);
    let eps = rng.normal_tensor(&[16]);
    for t in [1, 2, 37, 120, 200] {
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let (mu, var) = posterior_mean_variance(&xt, &eps, t, &s).unwrap();
        assert_eq!(var, s.posterior_var(t));
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let oracle = x0.zip_map(&xt, |a, b| {
            (abp.sqrt() * s.beta(t) * a + s.alpha(t).sqrt() * (1.0 - abp) * b) / (1.0 - ab)
        })
        .unwrap();
        assert!(mu.max_abs_diff(&oracle).unwrap() < 1e-10, "t={t}");
    }
    let (_, v1) = posterior_mean_variance(&x0, &eps, 1, &s).unwrap();
    assert_eq!(v1, 0.0);
}

/// Variance of `x_0` after the implicit sampler with the MMSE predictor,
/// propagated exactly: every step is affine in `x_t` plus independent noise.
fn ddim_exact_variance(v: f64, s: &DiffusionSchedule, steps: usize, eta: f64) -> f64 {
    let t_max = s.steps();
    let ab = |t| s.alpha_bar(t);
    let mut var = ab(t_max) * v + 1.0 - ab(t_max);
    let mut ts = vec![0];
    ts.extend(ddim_timesteps(t_max, steps).unwrap());
    for w in ts.windows(2).rev() {
        let (p, t) = (w[0], w[1]);
        let k = (1.0 - ab(t)).sqrt() / (ab(t) * v + 1.0 - ab(t));
        let sig2 = eta * eta * (1.0 - ab(p)) / (1.0 - ab(t)) * (1.0 - ab(t) / ab(p));
        let c = ab(p).sqrt() * (1.0 - (1.0 - ab(t)).sqrt() * k) / ab(t).sqrt() + (1.0 - ab(p) - sig2).max(0.0).sqrt() * k;
        var = c * c * var + sig2;
    }
    var
}

/// `x_T` drawn from the forward marginal of `N(m, v)`.
fn marginal_start(m: f64, v: f64, s: &DiffusionSchedule, n: usize, rng: &mut SimRng) -> Tensor {
    let ab = s.alpha_bar(s.steps());
    let (mt, sdt) = (ab.sqrt() * m, (ab * v + 1.0 - ab).sqrt());
    rng.normal_tensor(&[n]).map(|e| mt + sdt * e)
}

#[test]
fn ddpm_oracle_predictor_recovers_gaussian() {
    let s = DiffusionSchedule::default();
    let (m, v) = (1.0, 1.0);
    let p = oracle(m, v, &s);
    let mut rng = SimRng::new(5);
    let n = 20_000;
    let x_t = marginal_start(m, v, &s, n, &mut rng);
    let cond = Tensor::zeros(vec![n]).unwrap();
    let out = ddpm_sample(&p, &cond, x_t, &s, Some(&mut rng)).unwrap();
    let (om, ov) = moments(&out);
    assert!((om - m).abs() < 0.05 * m, "mean {om}");
    assert!((ov - v).abs() < 0.05 * v, "var {ov}");
}

#[test]
fn ddim_oracle_predictor_mean() {
    let s = DiffusionSchedule::default();
    let (m, v) = (1.0, 0.1);
    let p = oracle(m, v, &s);
    // Start from the forward marginal q(x_T): with ᾱ_T ≈ 0.13 a standard
    // normal start would shift the deterministic flow by about -0.12.
    let x_t = marginal_start(m, v, &s, 2000, &mut SimRng::new(6));
    let cond = Tensor::zeros(vec![2000]).unwrap();
    let out = ddim_sample(&p, &cond, x_t, &s, 10, 0.0, None).unwrap();
    assert!((out.mean() - m).abs() < 0.05 * m, "{}", out.mean());
}

#[test]
fn ddim_variance_matches_exact_propagation() {
    // Ten posterior-mean jumps under-disperse: the exact output variance is
    // well below the target, and Monte-Carlo agrees with the recurrence.
    let s = DiffusionSchedule::default();
    for (v, eta, seed) in [(1.0, 0.0, 1), (0.1, 0.0, 2), (1.0, 1.0, 3)] {
        let exact = ddim_exact_variance(v, &s, 10, eta);
        let p = oracle(0.0, v, &s);
        let mut rng = SimRng::new(seed);
        let n = 20_000;
        let x_t = marginal_start(0.0, v, &s, n, &mut rng);
        let cond = Tensor::zeros(vec![n]).unwrap();
        let out = ddim_sample(&p, &cond, x_t, &s, 10, eta, Some(&mut rng)).unwrap();
        let (_, ov) = moments(&out);
        // Sample-variance standard error is exact·sqrt(2/n) ≈ 1%.
        assert!((ov - exact).abs() < 0.04 * exact, "v={v} eta={eta}: {ov} vs {exact}");
        assert!(exact < 0.9 * v);
    }
    // Full-length stochastic sampling approaches the target.
    assert!((ddim_exact_variance(1.0, &s, 200, 1.0) - 1.0).abs() < 0.05);
}

#[test]
fn zero_predictor_single_step() {
    let s = make_schedule(1, 0.01, 0.01).unwrap();
    let zero = |x: &Tensor, _: &Tensor, _: usize| Ok(x.zeros_like());
    let x1 = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let out = ddpm_sample(&zero, &x1, x1.clone(), &s, Some(&mut SimRng::new(0))).unwrap();
    assert!(out.max_abs_diff(&x1.scale(1.0 / s.alpha(1).sqrt())).unwrap() < 1e-15);
}

#[test]
fn samplers_are_deterministic() {
    let s = DiffusionSchedule::default();
    let p = oracle(0.3, 0.5, &s);
    let x_t = SimRng::new(7).normal_tensor(&[8]);
    let c = x_t.zeros_like();
    let a = ddim_sample(&p, &c, x_t.clone(), &s, 10, 0.0, None).unwrap();
    let b = ddim_sample(&p, &c, x_t.clone(), &s, 10, 0.0, None).unwrap();
    assert_eq!(a.data(), b.data());
    let a = ddpm_sample(&p, &c, x_t.clone(), &s, Some(&mut SimRng::new(8))).unwrap();
    let b = ddpm_sample(&p, &c, x_t, &s, Some(&mut SimRng::new(8))).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn full_length_implicit_chain_matches_ancestral_mean() {
    let s = DiffusionSchedule::default();
    let p = oracle(0.5, 0.2, &s);
    let x_t = SimRng::new(9).normal_tensor(&[4]);
    let c = x_t.zeros_like();
    let ddim = ddim_trajectory(&p, &c, x_t.clone(), &s, 200, 1.0, None).unwrap();
    let ddpm = ddpm_trajectory(&p, &c, x_t, &s, None).unwrap();
    assert_eq!(ddim.len(), ddpm.len());
    for (a, b) in ddim.iter().zip(&ddpm) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-8);
    }
    assert_eq!(ddim_timesteps(200, 10).unwrap(), (1..=10).map(|i| 20 * i).collect::<Vec<_>>());
    assert!(ddim_timesteps(10, 11).is_err());
}

#[test]
fn non_finite_prediction_is_reported() {
    let s = make_schedule(5, 1e-4, 0.02).unwrap();
    let bad = |x: &Tensor, _: &Tensor, t: usize| Ok(if t == 3 { x.map(|_| f64::NAN) } else { x.zeros_like() });
    let x = Tensor::zeros(vec![2]).unwrap();
    let err = ddpm_sample(&bad, &x, x.clone(), &s, None).unwrap_err();
    assert!(matches!(err, Error::Numerical(ref m) if m.contains("t=3")), "{err}");
}

fn tiny_net(seed: u64) -> EpsNet {
    let cfg = EpsNetConfig { width: 4, window: 4, total_steps: 20, ..EpsNetConfig::default() };
    EpsNet::new(cfg, &mut SimRng::new(seed)).unwrap()
}

#[test]
fn predictor_shapes_and_checkpoint() {
    let net = tiny_net(1);
    let x = SimRng::new(2).normal_tensor(&[1, 6, 6]);
    let out = net.predict(&x, &x, 3).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert!(out.all_finite());
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path()).unwrap();
    assert_eq!(EpsNet::load(dir.path()).unwrap(), net);
    assert!(EpsNet::load(dir.path().join("nope")).is_err());
}

#[test]
fn training_reduces_loss_on_constant_data() {
    let s = make_schedule(20, 1e-3, 0.2).unwrap();
    let net = tiny_net(3);
    let zero = Tensor::zeros(vec![1, 4, 4]).unwrap();
    let data = vec![EpsilonSample { cond: zero.clone(), x0: zero }];
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        ema_rate: 0.99,
        recon_every: 0,
        ..TrainConfig::default()
    };
    let out = train_epsilon(&net, &data, &s, &cfg).unwrap();
    let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.9 * head, "{head} -> {tail}");
    assert!(out.ema.all_finite());
    assert!(out.recon_losses.is_empty());
}

#[test]
fn rollout_loss_and_frozen_ema() {
    let s = make_schedule(20, 1e-3, 0.2).unwrap();
    let net = tiny_net(4);
    let mut rng = SimRng::new(5);
    let data: Vec<_> = (0..3)
        .map(|_| EpsilonSample { cond: rng.uniform_tensor(&[1, 4, 4], -1.0, 1.0), x0: rng.uniform_tensor(&[1, 4, 4], -1.0, 1.0) })
        .collect();
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 2,
        ema_rate: 1.0,
        recon_every: 2,
        rollout_steps: 4,
        ..TrainConfig::default()
    };
    let out = train_epsilon(&net, &data, &s, &cfg).unwrap();
    assert_eq!(out.recon_losses.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!(out.ema, net.params);
    assert_ne!(out.params, net.params);
}

#[test]
fn training_rejects_bad_input() {
    let s = make_schedule(20, 1e-3, 0.2).unwrap();
    let net = tiny_net(6);
    assert!(train_epsilon(&net, &[], &s, &TrainConfig::default()).is_err());
    let bad = Tensor::full(vec![1, 4, 4], f64::NAN).unwrap();
    let data = vec![EpsilonSample { cond: bad.clone(), x0: bad }];
    let cfg = TrainConfig { steps: 3, batch_size: 1, recon_every: 0, ..TrainConfig::default() };
    let err = train_epsilon(&net, &data, &s, &cfg).unwrap_err();
    assert!(matches!(err, Error::Numerical(ref m) if m.contains("step 0")), "{err}");
}

#[test]
fn epsilon_loss_gradient_matches_finite_differences() {
    let s = make_schedule(20, 1e-3, 0.2).unwrap();
    let cfg = EpsNetConfig { width: 2, window: 2, total_steps: 20, ..EpsNetConfig::default() };
    let net = EpsNet::new(cfg, &mut SimRng::new(7)).unwrap();
    let mut rng = SimRng::new(8);
    let x0 = rng.uniform_tensor(&[2, 1, 4, 4], -1.0, 1.0);
    let cond = rng.uniform_tensor(&[2, 1, 4, 4], -1.0, 1.0);
    let eps = rng.normal_tensor(&[2, 1, 4, 4]);
    let ts = [4, 15];
    let mut xt = Vec::new();
    for (k, &t) in ts.iter().enumerate() {
        let r = k * 16..(k + 1) * 16;
        let a = Tensor::new(vec![16], x0.data()[r.clone()].to_vec()).unwrap();
        let e = Tensor::new(vec![16], eps.data()[r].to_vec()).unwrap();
        xt.extend(q_sample(&a, t, &e, &s).unwrap().into_data());
    }
    let xt = Tensor::new(vec![2, 1, 4, 4], xt).unwrap();
    let report = check_scalar_fn("eps_loss", net.params.tensors(), |tape, vars| {
        let b = net.params.bind_vars(vars)?;
        let pred = net.forward(tape, &b, tape.constant(xt.clone()), tape.constant(cond.clone()), &ts)?;
        Ok(pred.sub(tape.constant(eps.clone()))?.square().mean())
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}
