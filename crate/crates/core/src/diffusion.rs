//! Per-token conditional diffusion head with ε-prediction.

use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Element, Graph, ParamStore, Rng, Var};
use crate::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
/// Lower bound on per-step α during sampling (β ≤ 0.98). The cosine ᾱ at the
/// last training step is ~1e-33, and without the bound the first reverse step
/// would amplify any ε̂ error by 1/√α.
pub const MIN_ALPHA: f64 = 0.02;

/// Cosine ᾱ schedule over `steps` training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// ᾱ_t for t = 0..=steps.
    pub alpha_bar: Vec<f64>,
}

fn cosine_f(t: f64) -> f64 {
    (((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("noise schedule needs at least 2 steps, got {steps}")));
        }
        let f0 = cosine_f(0.0);
        let alpha_bar = (0..=steps).map(|t| cosine_f(t as f64 / steps as f64) / f0).collect();
        Ok(NoiseSchedule { steps, alpha_bar })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..={}", self.steps)))
    }

    /// `n` evenly spaced training steps from 1 to `steps`, descending.
    pub fn inference_steps(&self, n: usize) -> Result<Vec<usize>> {
        if n < 2 || n > self.steps {
            return Err(Error::invalid(format!(
                "inference steps {n} must be in 2..={}",
                self.steps
            )));
        }
        let span = (self.steps - 1) as f64;
        let mut ts: Vec<usize> =
            (0..n).map(|j| 1 + (j as f64 * span / (n - 1) as f64).round() as usize).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// x_t = √ᾱ x + √(1−ᾱ) ε
pub fn noise(x: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

pub fn noise_at(s: &NoiseSchedule, x: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    Ok(noise(x, eps, s.alpha_bar(t)?))
}

/// One ancestral step from noise level ᾱ_t to ᾱ_prev:
/// x' = (x − (1−α)/√(1−ᾱ_t)·ε̂)/√α + σ δ, with α = ᾱ_t/ᾱ_prev clipped below
/// at [`MIN_ALPHA`] and σ² = (1−ᾱ_prev)/(1−ᾱ_t)·(1−α). `delta` is ignored
/// when ᾱ_prev = 1, which makes the final step deterministic.
pub fn reverse_step(x: &[f64], eps_hat: &[f64], ab_t: f64, ab_prev: f64, delta: &[f64]) -> Vec<f64> {
    let alpha = (ab_t / ab_prev).max(MIN_ALPHA);
    let c = (1.0 - alpha) / (1.0 - ab_t).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = if ab_prev >= 1.0 { 0.0 } else { ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha)).sqrt() };
    x.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| inv * (x - c * e) + if sigma > 0.0 { sigma * delta[i] } else { 0.0 })
        .collect()
}

/// ε̃ = ε_null + s(ε_cond − ε_null)
pub fn cfg_combine(eps_cond: &[f64], eps_null: &[f64], scale: f64) -> Vec<f64> {
    eps_cond.iter().zip(eps_null).map(|(c, n)| n + scale * (c - n)).collect()
}

pub const TIME_EMBED_DIM: usize = 64;

/// Sinusoidal embedding of integer timesteps, (n, TIME_EMBED_DIM).
pub fn timestep_embedding(ts: &[usize]) -> Vec<f64> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
    for &t in ts {
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * f).cos());
        }
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * f).sin());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub token_dim: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub train_steps: usize,
    pub infer_steps: usize,
    /// Noise draws per token per training step.
    pub n_rep: usize,
}

impl DenoiserConfig {
    pub fn desk(token_dim: usize, cond_dim: usize) -> Self {
        DenoiserConfig { token_dim, cond_dim, width: 128, blocks: 2, train_steps: 200, infer_steps: 50, n_rep: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.cond_dim == 0 || self.width == 0 || self.blocks == 0 {
            return Err(Error::Config("denoiser dims and block count must be positive".into()));
        }
        if !(1..=4).contains(&self.n_rep) {
            return Err(Error::Config(format!("n_rep must be in 1..=4, got {}", self.n_rep)));
        }
        if self.infer_steps < 2 || self.infer_steps > self.train_steps {
            return Err(Error::Config(format!(
                "inference steps {} must be in 2..={}",
                self.infer_steps, self.train_steps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Residual MLP ε_θ(x_t | t, z). The condition c = time(t) + proj(z) is added
/// to the input of every block.
#[derive(Clone, Debug)]
pub struct DenoiserMlp {
    pub cfg: DenoiserConfig,
    input: Linear,
    time: Linear,
    cond: Linear,
    blocks: Vec<ResBlock>,
    out_norm: LayerNorm,
    out: Linear,
}

impl DenoiserMlp {
    pub fn new<E: Element>(cfg: DenoiserConfig, store: &mut ParamStore<E>, prefix: &str, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let input = Linear::new(store, &format!("{prefix}.input"), cfg.token_dim, w, rng);
        let time = Linear::new(store, &format!("{prefix}.time"), TIME_EMBED_DIM, w, rng);
        let cond = Linear::new(store, &format!("{prefix}.cond"), cfg.cond_dim, w, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| ResBlock {
                norm: LayerNorm::new(store, &format!("{prefix}.block.{i}.norm"), w),
                fc1: Linear::new(store, &format!("{prefix}.block.{i}.fc1"), w, w, rng),
                fc2: Linear::new(store, &format!("{prefix}.block.{i}.fc2"), w, w, rng),
            })
            .collect();
        let out_norm = LayerNorm::new(store, &format!("{prefix}.out_norm"), w);
        let out = Linear::zeros(store, &format!("{prefix}.out"), w, cfg.token_dim);
        Ok(DenoiserMlp { cfg, input, time, cond, blocks, out_norm, out })
    }

    /// x_t (n, D_tok), z (n, cond_dim), one timestep per row → ε̂ (n, D_tok).
    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, xt: Var, z: Var, ts: &[usize]) -> Result<Var> {
        let n = ts.len();
        if g.dims(xt) != [n, self.cfg.token_dim] || g.dims(z) != [n, self.cfg.cond_dim] {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "x_t {} and z {} for {n} timesteps; expected widths {} and {}",
                    g.shape(xt),
                    g.shape(z),
                    self.cfg.token_dim,
                    self.cfg.cond_dim
                ),
            ));
        }
        let temb = g.constant_f64([n, TIME_EMBED_DIM], &timestep_embedding(ts))?;
        let tc = self.time.forward(g, temb)?;
        let zc = self.cond.forward(g, z)?;
        let c = g.add(tc, zc)?;
        let mut h = self.input.forward(g, xt)?;
        for b in &self.blocks {
            let u = g.add(h, c)?;
            let u = b.norm.forward(g, u)?;
            let u = b.fc1.forward(g, u)?;
            let u = g.silu(u);
            let u = b.fc2.forward(g, u)?;
            h = g.add(h, u)?;
        }
        let h = self.out_norm.forward(g, h)?;
        self.out.forward(g, h)
    }

    /// No-grad evaluation on plain rows.
    pub fn eval<E: Element>(&self, store: &ParamStore<E>, xt: &[f64], z: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(store).no_grad();
        let n = ts.len();
        let xv = g.constant_f64([n, self.cfg.token_dim], xt)?;
        let zv = g.constant_f64([n, self.cfg.cond_dim], z)?;
        let y = self.forward(&mut g, xv, zv, ts)?;
        Ok(g.value(y).iter().map(|v| v.f64()).collect())
    }
}

/// Noise draws for one training step: per row (after repetition) a timestep
/// t ~ U{1..T_d} and ε ~ N(0, I).
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(rows: usize, dim: usize, steps: usize, rng: &mut Rng) -> Self {
        let ts = (0..rows).map(|_| rng.int_range(1, steps)).collect();
        let eps = (0..rows * dim).map(|_| rng.normal()).collect();
        NoiseDraw { ts, eps }
    }
}

/// Mean over rows of ‖ε − ε_θ(x_t | t, z)‖² for token targets `x` (m, D_tok)
/// and conditions `z` (m, W). Each row is repeated `n_rep` times.
pub fn diffusion_loss<E: Element>(
    g: &mut Graph<'_, E>,
    den: &DenoiserMlp,
    sched: &NoiseSchedule,
    x: Var,
    z: Var,
    draw: &NoiseDraw,
) -> Result<Var> {
    let m = g.dims(x)[0];
    let d = den.cfg.token_dim;
    let rep = den.cfg.n_rep;
    if draw.ts.len() != m * rep || draw.eps.len() != m * rep * d {
        return Err(Error::shape("diffusion_loss", format!("{} draws for {m} rows × {rep}", draw.ts.len())));
    }
    let (x, z) = if rep > 1 {
        let idx: Vec<usize> = (0..rep).flat_map(|_| 0..m).collect();
        (g.gather_rows(x, &idx)?, g.gather_rows(z, &idx)?)
    } else {
        (x, z)
    };
    let n = m * rep;
    let mut ca = Vec::with_capacity(n * d);
    let mut cb = Vec::with_capacity(n * d);
    for &t in &draw.ts {
        let ab = sched.alpha_bar(t)?;
        ca.extend(std::iter::repeat(ab.sqrt()).take(d));
        cb.extend(std::iter::repeat((1.0 - ab).sqrt()).take(d));
    }
    let ca = g.constant_f64([n, d], &ca)?;
    let noise: Vec<f64> = draw.eps.iter().zip(&cb).map(|(e, b)| e * b).collect();
    let noise = g.constant_f64([n, d], &noise)?;
    let xa = g.mul(x, ca)?;
    let xt = g.add(xa, noise)?;
    let eps_hat = den.forward(g, xt, z, &draw.ts)?;
    let eps = g.constant_f64([n, d], &draw.eps)?;
    let mse = g.mse(eps_hat, eps)?;
    Ok(g.scale(mse, d as f64))
}

/// Conditions for a batch of tokens sampled together.
pub struct TokenConditions<'a> {
    pub cond: &'a [f64],
    /// Null-condition rows, required when `cfg_scale ≠ 1`.
    pub null: Option<&'a [f64]>,
    pub cfg_scale: f64,
}

/// Runs the reverse chain over the inference sub-schedule for `rngs.len()`
/// tokens at once. Token `i` draws its start noise and every δ from
/// `rngs[i]`. Returns the tokens (rows of D_tok) and the number of
/// per-token denoiser evaluations performed.
pub fn sample_tokens<E: Element>(
    den: &DenoiserMlp,
    store: &ParamStore<E>,
    sched: &NoiseSchedule,
    conds: &TokenConditions<'_>,
    rngs: &mut [Rng],
) -> Result<(Vec<f64>, usize)> {
    let n = rngs.len();
    let d = den.cfg.token_dim;
    let guided = conds.cfg_scale != 1.0;
    if guided && conds.null.is_none() {
        return Err(Error::invalid("classifier-free guidance needs null-condition vectors"));
    }
    let steps = sched.inference_steps(den.cfg.infer_steps)?;
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| (0..d).map(|_| r.normal()).collect::<Vec<_>>()).collect();
    let mut evals = 0;
    for (j, &t) in steps.iter().enumerate() {
        let prev = steps.get(j + 1).copied().unwrap_or(0);
        let ts = vec![t; n];
        let mut eps = den.eval(store, &x, conds.cond, &ts)?;
        evals += n;
        if guided {
            let null = den.eval(store, &x, conds.null.expect("checked"), &ts)?;
            evals += n;
            eps = cfg_combine(&eps, &null, conds.cfg_scale);
        }
        let (ab_t, ab_prev) = (sched.alpha_bar(t)?, sched.alpha_bar(prev)?);
        let mut next = Vec::with_capacity(n * d);
        for (i, r) in rngs.iter_mut().enumerate() {
            let delta: Vec<f64> = if prev > 0 { (0..d).map(|_| r.normal()).collect() } else { vec![0.0; d] };
            next.extend(reverse_step(&x[i * d..(i + 1) * d], &eps[i * d..(i + 1) * d], ab_t, ab_prev, &delta));
        }
        x = next;
    }
    Ok((x, evals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar[1000] < 0.01 && s.alpha_bar[1000] > 0.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(NoiseSchedule::cosine(1).is_err());
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn midpoint_matches_direct_evaluation() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let want = ((0.508 / 1.008) * half_pi).cos().powi(2) / ((0.008 / 1.008) * half_pi).cos().powi(2);
        assert!((s.alpha_bar[500] - want).abs() < 1e-12);
    }

    #[test]
    fn inference_subsequence_covers_both_ends() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let ts = s.inference_steps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (200, 1));
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.inference_steps(200).unwrap(), (1..=200).rev().collect::<Vec<_>>());
    }

    #[test]
    fn noise_hand_case_and_limits() {
        let v = noise(&[1.0], &[2.0], 0.25)[0];
        assert!((v - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-15);
        assert!((v - 2.2321).abs() < 1e-4);
        assert_eq!(noise(&[0.3], &[5.0], 1.0), vec![0.3]);
        assert_eq!(noise(&[0.3], &[5.0], 0.0), vec![5.0]);
    }

    #[test]
    fn reverse_step_hand_case() {
        let v = reverse_step(&[1.0], &[0.5], 0.81, 1.0, &[7.0])[0];
        assert!((v - (1.0 - 0.5 * 0.19f64.sqrt()) / 0.9).abs() < 1e-12);
        assert!((v - 0.8690).abs() < 1e-4);
    }

    #[test]
    fn cfg_endpoints() {
        let c = [1.0, -2.0];
        let n = [0.5, 4.0];
        assert_eq!(cfg_combine(&c, &n, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&c, &n, 0.0), n.to_vec());
        assert_eq!(cfg_combine(&c, &n, 3.0), vec![2.0, -14.0]);
    }

    #[test]
    fn denoiser_rejects_wrong_widths() {
        let mut store = ParamStore::<f64>::new();
        let den = DenoiserMlp::new(DenoiserConfig::desk(4, 8), &mut store, "den", &mut Rng::new(0)).unwrap();
        assert!(den.eval(&store, &[0.0; 3], &[0.0; 8], &[1]).is_err());
        assert_eq!(den.eval(&store, &[0.0; 4], &[0.0; 8], &[1]).unwrap().len(), 4);
    }
}
