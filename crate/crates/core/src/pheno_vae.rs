//! Fully connected VAE over normalized phenotype vectors.

use crate::dataset::Normalizer;
use crate::nn::Linear;
use crate::numerics::{AdamW, AdamWConfig, Element, Graph, ParamStore, Rng, Tensor, Var};
use crate::phantom::{EF, PHENOTYPE_NAMES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PhenoVaeConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub leaky_slope: f64,
    pub beta: f64,
}

impl Default for PhenoVaeConfig {
    fn default() -> Self {
        PhenoVaeConfig {
            input_dim: PHENOTYPE_NAMES.len(),
            hidden: vec![64, 32],
            latent: 4,
            leaky_slope: 0.01,
            beta: 1.0,
        }
    }
}

impl PhenoVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.latent >= self.input_dim {
            return Err(Error::Config(format!(
                "pheno-vae latent dim {} must be in 1..{}",
                self.latent, self.input_dim
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("pheno-vae hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenoLatent {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Layer layout; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PhenoVae {
    pub cfg: PhenoVaeConfig,
    enc: Vec<Linear>,
    mu: Linear,
    logvar: Linear,
    dec: Vec<Linear>,
    out: Linear,
}

impl PhenoVae {
    pub fn new<E: Element>(cfg: PhenoVaeConfig, store: &mut ParamStore<E>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::new();
        let mut d = cfg.input_dim;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            enc.push(Linear::new(store, &format!("enc.{i}"), d, h, rng));
            d = h;
        }
        let mu = Linear::new(store, "enc.mu", d, cfg.latent, rng);
        let logvar = Linear::new(store, "enc.logvar", d, cfg.latent, rng);
        let mut dec = Vec::new();
        let mut d = cfg.latent;
        for (i, &h) in cfg.hidden.iter().rev().enumerate() {
            dec.push(Linear::new(store, &format!("dec.{i}"), d, h, rng));
            d = h;
        }
        let out = Linear::new(store, "dec.out", d, cfg.input_dim, rng);
        Ok(PhenoVae { cfg, enc, mu, logvar, dec, out })
    }

    /// (N, P) → (μ, logvar), each (N, L).
    pub fn encode_graph<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<(Var, Var)> {
        let dims = g.dims(x);
        if dims.len() != 2 || dims[1] != self.cfg.input_dim {
            return Err(Error::shape(
                "pheno_vae.encode",
                format!("input {} but config expects P = {}", g.shape(x), self.cfg.input_dim),
            ));
        }
        let mut h = x;
        for l in &self.enc {
            h = l.forward(g, h)?;
            h = g.leaky_relu(h, self.cfg.leaky_slope);
        }
        Ok((self.mu.forward(g, h)?, self.logvar.forward(g, h)?))
    }

    /// (N, L) → (N, P); linear output layer.
    pub fn decode_graph<E: Element>(&self, g: &mut Graph<'_, E>, z: Var) -> Result<Var> {
        let mut h = z;
        for l in &self.dec {
            h = l.forward(g, h)?;
            h = g.leaky_relu(h, self.cfg.leaky_slope);
        }
        self.out.forward(g, h)
    }

    /// Negative ELBO for a batch: squared reconstruction error summed over
    /// the P dimensions plus β·KL, both averaged over the batch. `eps` is
    /// (N, L) standard normal noise.
    pub fn loss_graph<E: Element>(&self, g: &mut Graph<'_, E>, x: Var, eps: Var) -> Result<Var> {
        let (mu, logvar) = self.encode_graph(g, x)?;
        let z = reparameterize_graph(g, mu, logvar, eps)?;
        let recon = self.decode_graph(g, z)?;
        let mse = g.mse(recon, x)?;
        let sq = g.scale(mse, self.cfg.input_dim as f64);
        let kl = kl_graph(g, mu, logvar)?;
        let n = g.dims(x)[0] as f64;
        let kl = g.scale(kl, self.cfg.beta / n);
        g.add(sq, kl)
    }

    pub fn encode<E: Element>(&self, store: &ParamStore<E>, x: &[f64]) -> Result<PhenoLatent> {
        let mut g = Graph::with_params(store).no_grad();
        let xv = g.constant_f64([1, x.len()], x)?;
        let (mu, lv) = self.encode_graph(&mut g, xv)?;
        Ok(PhenoLatent {
            mu: g.value(mu).iter().map(|v| v.f64()).collect(),
            logvar: g.value(lv).iter().map(|v| v.f64()).collect(),
        })
    }

    pub fn decode<E: Element>(&self, store: &ParamStore<E>, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.latent {
            return Err(Error::shape("pheno_vae.decode", format!("z has {} values, L = {}", z.len(), self.cfg.latent)));
        }
        let mut g = Graph::with_params(store).no_grad();
        let zv = g.constant_f64([1, z.len()], z)?;
        let y = self.decode_graph(&mut g, zv)?;
        Ok(g.value(y).iter().map(|v| v.f64()).collect())
    }
}

/// z = μ + exp(logvar/2)·ε
pub fn reparameterize_graph<E: Element>(g: &mut Graph<'_, E>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let n = g.mul(sd, eps)?;
    g.add(mu, n)
}

/// Σ −½(1 + logvar − μ² − exp(logvar)), summed over every element.
pub fn kl_graph<E: Element>(g: &mut Graph<'_, E>, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.sub(logvar, m2)?;
    let a = g.sub(a, ev)?;
    let a = g.add_scalar(a, 1.0);
    let s = g.sum(a);
    Ok(g.scale(s, -0.5))
}

pub fn reparameterize(l: &PhenoLatent, rng: &mut Rng) -> Vec<f64> {
    l.mu.iter().zip(&l.logvar).map(|(m, lv)| m + (lv / 2.0).exp() * rng.normal()).collect()
}

pub fn kl_divergence(l: &PhenoLatent) -> f64 {
    -0.5 * l.mu.iter().zip(&l.logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum::<f64>()
}

/// Squared error summed over dimensions plus β·KL, for a single sample.
pub fn elbo_loss(x: &[f64], recon: &[f64], l: &PhenoLatent, beta: f64) -> Result<f64> {
    if x.len() != recon.len() {
        return Err(Error::shape("elbo_loss", format!("x has {} values, recon {}", x.len(), recon.len())));
    }
    let sq = x.iter().zip(recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    Ok(sq + beta * kl_divergence(l))
}

/// First physically impossible phenotype in `x` (physical units), if any.
pub fn invalid_dimension(x: &[f64]) -> Option<&'static str> {
    let [eda, esa, ef, wall, _, _, noise, _] = x else {
        return Some("length");
    };
    if !x.iter().all(|v| v.is_finite()) {
        return Some("non-finite");
    }
    if !(*ef > 0.0 && *ef < 1.0) {
        return Some(PHENOTYPE_NAMES[EF]);
    }
    if *eda <= 0.0 {
        return Some(PHENOTYPE_NAMES[0]);
    }
    if *esa <= 0.0 || esa >= eda {
        return Some(PHENOTYPE_NAMES[1]);
    }
    if *wall <= 0.0 {
        return Some(PHENOTYPE_NAMES[3]);
    }
    if *noise < 0.0 {
        return Some(PHENOTYPE_NAMES[6]);
    }
    None
}

const MAX_TRIES: usize = 100;

/// Draws `n` phenotype vectors in physical units. Sample `i` uses its own
/// child stream of `rng`, and impossible draws are resampled.
pub fn sample_phenotypes<E: Element>(
    vae: &PhenoVae,
    store: &ParamStore<E>,
    norm: &Normalizer,
    n: usize,
    rng: &Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.child(&[i as u64]);
        let mut last = "";
        let mut found = None;
        for _ in 0..MAX_TRIES {
            let z: Vec<f64> = (0..vae.cfg.latent).map(|_| r.normal()).collect();
            let x = norm.denormalize(&vae.decode(store, &z)?);
            match invalid_dimension(&x) {
                None => {
                    found = Some(x);
                    break;
                }
                Some(d) => last = d,
            }
        }
        match found {
            Some(x) => out.push(x),
            None => {
                return Err(Error::RejectionExhausted {
                    tries: MAX_TRIES,
                    detail: format!("sample {i}: decoded `{last}` out of physical range"),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenoTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PhenoTrainConfig {
    fn default() -> Self {
        PhenoTrainConfig { epochs: 200, batch: 32, lr: 1e-3 }
    }
}

/// One epoch over `rows` (normalized), shuffled by `rng`. Returns mean batch loss.
pub fn train_epoch<E: Element>(
    vae: &PhenoVae,
    store: &mut ParamStore<E>,
    opt: &mut AdamW<E>,
    rows: &[Vec<f64>],
    batch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    rng.shuffle(&mut order);
    let p = vae.cfg.input_dim;
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch.max(1)) {
        let x: Vec<f64> = chunk.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        let eps: Vec<f64> = (0..chunk.len() * vae.cfg.latent).map(|_| rng.normal()).collect();
        let (loss, grads) = {
            let mut g = Graph::with_params(store);
            let xv = g.input(&Tensor::from_f64([chunk.len(), p], &x)?);
            let ev = g.input(&Tensor::from_f64([chunk.len(), vae.cfg.latent], &eps)?);
            let l = vae.loss_graph(&mut g, xv, ev)?;
            let lv = g.scalar(l).f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite { what: format!("pheno-vae loss at step {}", opt.step + 1) });
            }
            g.backward(l)?;
            (lv, g.param_grads())
        };
        store.accumulate(&grads);
        opt.step(store)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

pub fn new_optimizer<E: Element>(store: &ParamStore<E>, lr: f64) -> AdamW<E> {
    AdamW::new(store, AdamWConfig { lr, ..Default::default() })
}
