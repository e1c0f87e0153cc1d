use cpgg_core::diffusion::*;
use cpgg_core::metrics::pearson;
use cpgg_core::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Rng, Tensor};
use cpgg_core::testing::{check_params, rel_err};
use proptest::prelude::*;

fn small_cfg(d: usize, w: usize) -> DenoiserConfig {
    DenoiserConfig { token_dim: d, cond_dim: w, width: 8, blocks: 2, train_steps: 20, infer_steps: 5, n_rep: 1 }
}

/// ε that a perfect model would predict from x_t given the clean token x.
fn oracle_eps(xt: &[f64], x: &[f64], ab: f64) -> Vec<f64> {
    xt.iter().zip(x).map(|(a, b)| (a - ab.sqrt() * b) / (1.0 - ab).sqrt()).collect()
}

#[test]
fn exact_oracle_has_zero_loss() {
    let s = NoiseSchedule::cosine(200).unwrap();
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let x: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let t = rng.int_range(1, 200);
        let eps: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let ab = s.alpha_bar[t];
        let xt = noise_at(&s, &x, t, &eps).unwrap();
        let pred = oracle_eps(&xt, &x, ab);
        let loss: f64 = pred.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(loss < 1e-20, "{loss}");
    }
}

#[test]
fn zero_denoiser_loss_is_token_dim() {
    // The output layer starts at zero, so a fresh head predicts ε̂ = 0.
    let d = 32;
    let mut store = ParamStore::<f64>::new();
    let den = DenoiserMlp::new(DenoiserConfig::desk(d, 16), &mut store, "den", &mut Rng::new(0)).unwrap();
    let s = NoiseSchedule::cosine(200).unwrap();
    let mut rng = Rng::new(2);
    let m = 10_000;
    let x: Vec<f64> = (0..m * d).map(|_| rng.normal()).collect();
    let z: Vec<f64> = (0..m * 16).map(|_| rng.normal()).collect();
    let draw = NoiseDraw::sample(m, d, 200, &mut rng);
    let mut g = Graph::with_params(&store).no_grad();
    let xv = g.constant_f64([m, d], &x).unwrap();
    let zv = g.constant_f64([m, 16], &z).unwrap();
    let l = diffusion_loss(&mut g, &den, &s, xv, zv, &draw).unwrap();
    let v = g.scalar(l);
    assert!((v - d as f64).abs() < 0.05 * d as f64, "{v}");
}

#[test]
fn oracle_round_trip_over_two_steps() {
    let s = NoiseSchedule::cosine(2).unwrap();
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let eps: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mut cur = noise_at(&s, &x, 2, &eps).unwrap();
        for t in [2usize, 1] {
            let e = oracle_eps(&cur, &x, s.alpha_bar[t]);
            let ab_prev = s.alpha_bar[t - 1];
            // σ = 0 throughout: no δ contribution.
            let alpha = s.alpha_bar[t] / ab_prev;
            let c = (1.0 - alpha) / (1.0 - s.alpha_bar[t]).sqrt();
            cur = cur.iter().zip(&e).map(|(v, e)| (v - c * e) / alpha.sqrt()).collect();
        }
        for (a, b) in cur.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn final_step_ignores_delta() {
    let a = reverse_step(&[0.3, -0.2], &[0.1, 0.4], 0.99, 1.0, &[0.0, 0.0]);
    let b = reverse_step(&[0.3, -0.2], &[0.1, 0.4], 0.99, 1.0, &[5.0, -5.0]);
    assert_eq!(a, b);
    // Zero prediction with zero noise divides by √α.
    let c = reverse_step(&[1.0], &[0.0], 0.5, 1.0, &[0.0]);
    assert!((c[0] - 1.0 / 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (d, w, m) = (3, 4, 5);
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(4);
    let den = DenoiserMlp::new(small_cfg(d, w), &mut store, "den", &mut rng).unwrap();
    // Perturb the zero-initialized output layer so every path carries signal.
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let s = NoiseSchedule::cosine(20).unwrap();
    let x: Vec<f64> = (0..m * d).map(|_| rng.normal()).collect();
    let z: Vec<f64> = (0..m * w).map(|_| rng.normal()).collect();
    let draw = NoiseDraw::sample(m, d, 20, &mut rng);
    let loss = |g: &mut Graph<'_, f64>, zt: &Tensor<f64>| {
        let xv = g.constant_f64([m, d], &x).unwrap();
        let zv = g.input(zt);
        diffusion_loss(g, &den, &s, xv, zv, &draw)
    };
    let zt = Tensor::from_f64([m, w], &z).unwrap();
    let err = check_params(&store, |g| loss(g, &zt), 1e-5, 6).unwrap();
    assert!(err < 1e-4, "params: {err:e}");

    let analytic = {
        let mut g = Graph::with_params(&store);
        let xv = g.constant_f64([m, d], &x).unwrap();
        let zv = g.input(&zt.clone().with_grad());
        let l = diffusion_loss(&mut g, &den, &s, xv, zv, &draw).unwrap();
        g.backward(l).unwrap();
        g.grad(zv).unwrap().to_vec()
    };
    let h = 1e-5;
    for j in 0..m * w {
        let eval = |delta: f64| {
            let mut zz = z.clone();
            zz[j] += delta;
            let mut g = Graph::with_params(&store).no_grad();
            let l = loss(&mut g, &Tensor::from_f64([m, w], &zz).unwrap()).unwrap();
            g.scalar(l)
        };
        let num = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(rel_err(analytic[j], num) < 1e-4, "z[{j}]: {} vs {num}", analytic[j]);
    }
}

#[test]
fn unguided_sampling_uses_one_evaluation_per_step() {
    let mut store = ParamStore::<f64>::new();
    let den = DenoiserMlp::new(small_cfg(2, 3), &mut store, "den", &mut Rng::new(0)).unwrap();
    let s = NoiseSchedule::cosine(20).unwrap();
    let cond = vec![0.1; 4 * 3];
    let mut rngs: Vec<Rng> = (0..4).map(|i| Rng::stream(9, &[i])).collect();
    let c = TokenConditions { cond: &cond, null: None, cfg_scale: 1.0 };
    let (tok, evals) = sample_tokens(&den, &store, &s, &c, &mut rngs).unwrap();
    assert_eq!(tok.len(), 8);
    assert_eq!(evals, 4 * 5);
    let null = vec![0.0; 4 * 3];
    let mut rngs: Vec<Rng> = (0..4).map(|i| Rng::stream(9, &[i])).collect();
    let c = TokenConditions { cond: &cond, null: Some(&null), cfg_scale: 3.0 };
    let (_, evals) = sample_tokens(&den, &store, &s, &c, &mut rngs).unwrap();
    assert_eq!(evals, 2 * 4 * 5);
    let c = TokenConditions { cond: &cond, null: None, cfg_scale: 3.0 };
    assert!(sample_tokens(&den, &store, &s, &c, &mut rngs).is_err());
}

#[test]
fn toy_targets_are_tracked_after_training() {
    // z carries the target mean; tokens are that mean plus small noise.
    let cfg = DenoiserConfig { token_dim: 1, cond_dim: 1, width: 64, blocks: 2, train_steps: 100, infer_steps: 25, n_rep: 1 };
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(11);
    let den = DenoiserMlp::new(cfg, &mut store, "den", &mut rng).unwrap();
    let s = NoiseSchedule::cosine(100).unwrap();
    let mut opt = AdamW::new(&store, AdamWConfig { lr: 2e-3, ..Default::default() });
    let b = 128;
    for _ in 0..1500 {
        let mu: Vec<f64> = (0..b).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let x: Vec<f64> = mu.iter().map(|m| m + 0.1 * rng.normal()).collect();
        let draw = NoiseDraw::sample(b, 1, 100, &mut rng);
        let grads = {
            let mut g = Graph::with_params(&store);
            let xv = g.constant_f64([b, 1], &x).unwrap();
            let zv = g.constant_f64([b, 1], &mu).unwrap();
            let l = diffusion_loss(&mut g, &den, &s, xv, zv, &draw).unwrap();
            g.backward(l).unwrap();
            g.param_grads()
        };
        store.accumulate(&grads);
        opt.step(&mut store).unwrap();
    }
    let n = 200;
    let mu: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
    let mut rngs: Vec<Rng> = (0..n).map(|i| Rng::stream(12, &[i as u64])).collect();
    let c = TokenConditions { cond: &mu, null: None, cfg_scale: 1.0 };
    let (tok, _) = sample_tokens(&den, &store, &s, &c, &mut rngs).unwrap();
    let r = pearson(&tok, &mu).unwrap();
    assert!(r > 0.9, "toy correlation {r}");
}

proptest! {
    #[test]
    fn cfg_is_affine_in_scale(c in -5.0..5.0f64, n in -5.0..5.0f64, s1 in -4.0..4.0f64, s2 in -4.0..4.0f64) {
        let a = cfg_combine(&[c], &[n], s1)[0];
        let b = cfg_combine(&[c], &[n], s2)[0];
        let mid = cfg_combine(&[c], &[n], 0.5 * (s1 + s2))[0];
        prop_assert!((mid - 0.5 * (a + b)).abs() < 1e-9);
    }

    #[test]
    fn schedules_are_monotone_with_endpoints(steps in 2usize..2000) {
        let s = NoiseSchedule::cosine(steps).unwrap();
        prop_assert_eq!(s.alpha_bar[0], 1.0);
        prop_assert!(s.alpha_bar[steps] < 0.01 && s.alpha_bar[steps] > 0.0);
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn inference_steps_are_a_subsequence(steps in 2usize..1000, frac in 0.0..1.0f64) {
        let s = NoiseSchedule::cosine(steps).unwrap();
        let n = 2 + ((steps - 2) as f64 * frac) as usize;
        let ts = s.inference_steps(n).unwrap();
        prop_assert_eq!(ts.len(), n);
        prop_assert_eq!(ts[0], steps);
        prop_assert_eq!(*ts.last().unwrap(), 1);
        prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }
}
