//! 3D convolutional VAE mapping cines to latent grids and back.

use crate::nn::{sample_grads, Conv3d, GroupNorm};
use crate::numerics::{AdamW, Element, Graph, ParamStore, Rng, Var};
use crate::phantom::Cine;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CineVaeConfig {
    /// Latent channels |x|.
    pub latent: usize,
    /// Output width of each downsampling stage.
    pub widths: Vec<usize>,
    /// (t, h, w) stride of each downsampling stage.
    pub strides: Vec<[usize; 3]>,
    pub beta: f64,
}

impl Default for CineVaeConfig {
    fn default() -> Self {
        CineVaeConfig {
            latent: 4,
            widths: vec![8, 16, 32],
            strides: vec![[1, 2, 2], [1, 2, 2], [2, 1, 1]],
            beta: 1e-4,
        }
    }
}

impl CineVaeConfig {
    /// Factors of the large-scale model: |x| = 16, f_t = 2, f_s = 8.
    pub fn full_factors(widths: Vec<usize>) -> Self {
        CineVaeConfig {
            latent: 16,
            widths,
            strides: vec![[1, 2, 2], [1, 2, 2], [1, 2, 2], [2, 1, 1]],
            beta: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("cine-vae latent and widths must be positive".into()));
        }
        if self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "cine-vae has {} widths for {} stages",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().flatten().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config("cine-vae strides must be 1 or 2".into()));
        }
        Ok(())
    }

    /// (f_t, f_s): products of the stage strides.
    pub fn factors(&self) -> (usize, usize) {
        let ft = self.strides.iter().map(|s| s[0]).product();
        let fs = self.strides.iter().map(|s| s[1]).product();
        (ft, fs)
    }

    /// Latent shape for a (T, H, W) cine, or an error naming the factors.
    pub fn latent_dims(&self, t: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        let (ft, fs) = self.factors();
        let fw: usize = self.strides.iter().map(|s| s[2]).product();
        if t % ft != 0 || h % fs != 0 || w % fw != 0 {
            return Err(Error::shape(
                "cine_vae",
                format!("cine (T={t}, H={h}, W={w}) needs T divisible by {ft} and H, W by {fs}"),
            ));
        }
        Ok([self.latent, t / ft, h / fs, w / fw])
    }
}

/// Latent cine, (|x|, T/f_t, H/f_s, W/f_s) in C order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("latent", format!("{} values for {dims:?}", data.len())));
        }
        Ok(LatentGrid { dims, data })
    }

    pub fn channel_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv3d,
    norm: GroupNorm,
}

impl Block {
    fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        Ok(g.silu(h))
    }
}

fn block<E: Element>(
    store: &mut ParamStore<E>,
    name: &str,
    cin: usize,
    cout: usize,
    stride: [usize; 3],
    rng: &mut Rng,
) -> Block {
    Block {
        conv: Conv3d::new(store, &format!("{name}.conv"), cin, cout, [3, 3, 3], stride, rng),
        norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
    }
}

#[derive(Clone, Debug)]
pub struct CineVae {
    pub cfg: CineVaeConfig,
    enc_in: Block,
    down: Vec<Block>,
    enc_out: Conv3d,
    dec_in: Block,
    up: Vec<Block>,
    dec_out: Conv3d,
}

impl CineVae {
    pub fn new<E: Element>(cfg: CineVaeConfig, store: &mut ParamStore<E>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let k = [3, 3, 3];
        let w = &cfg.widths;
        let enc_in = block(store, "enc.in", 1, w[0], [1, 1, 1], rng);
        let mut down = Vec::new();
        for (i, &s) in cfg.strides.iter().enumerate() {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            down.push(block(store, &format!("enc.down.{i}"), cin, w[i], s, rng));
        }
        let last = *w.last().expect("validated");
        let enc_out = Conv3d::new(store, "enc.out", last, 2 * cfg.latent, k, [1, 1, 1], rng);
        let dec_in = block(store, "dec.in", cfg.latent, last, [1, 1, 1], rng);
        let mut up = Vec::new();
        for i in (0..cfg.strides.len()).rev() {
            let cout = if i == 0 { w[0] } else { w[i - 1] };
            up.push(block(store, &format!("dec.up.{i}"), w[i], cout, [1, 1, 1], rng));
        }
        let dec_out = Conv3d::new(store, "dec.out", w[0], 1, k, [1, 1, 1], rng);
        Ok(CineVae { cfg, enc_in, down, enc_out, dec_in, up, dec_out })
    }

    /// (1, T, H, W) → (μ, logvar), each (|x|, T', H', W').
    pub fn encode_graph<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<(Var, Var)> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[0] != 1 {
            return Err(Error::shape("cine_vae.encode", format!("expected (1, T, H, W), got {}", g.shape(x))));
        }
        let ld = self.cfg.latent_dims(d[1], d[2], d[3])?;
        let mut h = self.enc_in.forward(g, x)?;
        for b in &self.down {
            h = b.forward(g, h)?;
        }
        let out = self.enc_out.forward(g, h)?;
        let m = ld[1] * ld[2] * ld[3];
        // Channels are outermost, so μ and logvar are contiguous halves.
        let flat = g.reshape(out, [2 * self.cfg.latent, m])?;
        let mu = g.slice_rows(flat, 0, self.cfg.latent)?;
        let lv = g.slice_rows(flat, self.cfg.latent, 2 * self.cfg.latent)?;
        Ok((g.reshape(mu, ld)?, g.reshape(lv, ld)?))
    }

    /// (|x|, T', H', W') → (1, T, H, W) in (0, 1).
    pub fn decode_graph<E: Element>(&self, g: &mut Graph<'_, E>, z: Var) -> Result<Var> {
        let d = g.dims(z);
        if d.len() != 4 || d[0] != self.cfg.latent {
            return Err(Error::shape(
                "cine_vae.decode",
                format!("latent {} but config has |x| = {}", g.shape(z), self.cfg.latent),
            ));
        }
        let mut h = self.dec_in.forward(g, z)?;
        for (b, s) in self.up.iter().zip(self.cfg.strides.iter().rev()) {
            h = g.upsample_nearest3d(h, *s)?;
            h = b.forward(g, h)?;
        }
        let out = self.dec_out.forward(g, h)?;
        Ok(g.sigmoid(out))
    }

    /// Voxel MSE plus β_c times the KL averaged over latent elements.
    pub fn loss_graph<E: Element>(&self, g: &mut Graph<'_, E>, x: Var, eps: Var) -> Result<Var> {
        let (mu, lv) = self.encode_graph(g, x)?;
        let half = g.scale(lv, 0.5);
        let sd = g.exp(half);
        let n = g.mul(sd, eps)?;
        let z = g.add(mu, n)?;
        let recon = self.decode_graph(g, z)?;
        let mse = g.mse(recon, x)?;
        let kl = crate::pheno_vae::kl_graph(g, mu, lv)?;
        let numel = g.value(mu).len() as f64;
        let kl = g.scale(kl, self.cfg.beta / numel);
        g.add(mse, kl)
    }

    pub fn encode<E: Element>(&self, store: &ParamStore<E>, c: &Cine) -> Result<(LatentGrid, LatentGrid)> {
        let mut g = Graph::with_params(store).no_grad();
        let x = g.constant([1, c.t, c.h, c.w], c.data.iter().map(|&v| E::of(v as f64)).collect())?;
        let (mu, lv) = self.encode_graph(&mut g, x)?;
        let dims: [usize; 4] = g.dims(mu).try_into().expect("rank 4");
        let grid = |v: Var| LatentGrid { dims, data: g.value(v).iter().map(|e| e.f64()).collect() };
        Ok((grid(mu), grid(lv)))
    }

    pub fn decode<E: Element>(&self, store: &ParamStore<E>, z: &LatentGrid) -> Result<Cine> {
        let mut g = Graph::with_params(store).no_grad();
        let zv = g.constant_f64(z.dims, &z.data)?;
        let y = self.decode_graph(&mut g, zv)?;
        let d = g.dims(y).to_vec();
        Cine::new(d[1], d[2], d[3], g.value(y).iter().map(|v| v.f64() as f32).collect())
    }

    /// Mean per-voxel squared error of decode(encode-mean) over `cines`.
    pub fn recon_mse<E: Element>(&self, store: &ParamStore<E>, cines: &[&Cine]) -> Result<f64> {
        let mut total = 0.0;
        for c in cines {
            let (mu, _) = self.encode(store, c)?;
            let r = self.decode(store, &mu)?;
            total += c.data.iter().zip(&r.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
                / c.data.len() as f64;
        }
        Ok(total / cines.len().max(1) as f64)
    }
}

/// Loss of a single cine under explicit noise, outside any graph.
pub fn vae_loss(c: &[f64], recon: &[f64], mu: &[f64], logvar: &[f64], beta: f64) -> Result<f64> {
    if c.len() != recon.len() || mu.len() != logvar.len() {
        return Err(Error::shape("vae_loss", format!("{} vs {} voxels", c.len(), recon.len())));
    }
    let mse = c.iter().zip(recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c.len() as f64;
    let kl = -0.5 * mu.iter().zip(logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum::<f64>();
    Ok(mse + beta * kl / mu.len().max(1) as f64)
}

/// One epoch of minibatch training over `cines`; returns the mean batch loss.
pub fn train_epoch<E: Element>(
    vae: &CineVae,
    store: &mut ParamStore<E>,
    opt: &mut AdamW<E>,
    cines: &[&Cine],
    batch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..cines.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch.max(1)) {
        let seeds: Vec<u64> = chunk.iter().map(|_| rng.next_seed()).collect();
        let (loss, mut grads) = sample_grads(store, chunk.len(), |i, g| {
            let c = cines[chunk[i]];
            let x = g.constant([1, c.t, c.h, c.w], c.data.iter().map(|&v| E::of(v as f64)).collect())?;
            let ld = vae.cfg.latent_dims(c.t, c.h, c.w)?;
            let mut r = Rng::new(seeds[i]);
            let eps: Vec<f64> = (0..ld.iter().product::<usize>()).map(|_| r.normal()).collect();
            let ev = g.constant_f64(ld, &eps)?;
            vae.loss_graph(g, x, ev)
        })
        .map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite { what: format!("cine-vae {what} at step {}", opt.step + 1) },
            e => e,
        })?;
        grads.scale(E::of(1.0 / chunk.len() as f64));
        store.accumulate(&grads);
        opt.step(store)?;
        total += loss / chunk.len() as f64;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Per-channel latent mean and std used to standardize MAR targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Population statistics per channel over every position of `grids`.
    pub fn fit(grids: &[LatentGrid]) -> Result<Self> {
        let c = grids.first().ok_or_else(|| Error::invalid("latent stats need at least one grid"))?.dims[0];
        let mut mean = vec![0.0; c];
        let mut count = 0.0;
        for gr in grids {
            let m = gr.channel_len();
            for (ch, mu) in mean.iter_mut().enumerate() {
                *mu += gr.data[ch * m..(ch + 1) * m].iter().sum::<f64>();
            }
            count += m as f64;
        }
        mean.iter_mut().for_each(|v| *v /= count);
        let mut var = vec![0.0; c];
        for gr in grids {
            let m = gr.channel_len();
            for (ch, v) in var.iter_mut().enumerate() {
                *v += gr.data[ch * m..(ch + 1) * m].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt().max(1e-8)).collect();
        Ok(LatentStats { mean, std })
    }

    pub fn standardize(&self, g: &LatentGrid) -> LatentGrid {
        self.map(g, |x, m, s| (x - m) / s)
    }

    pub fn destandardize(&self, g: &LatentGrid) -> LatentGrid {
        self.map(g, |x, m, s| x * s + m)
    }

    fn map(&self, g: &LatentGrid, f: impl Fn(f64, f64, f64) -> f64) -> LatentGrid {
        let m = g.channel_len();
        let data = g.data.iter().enumerate().map(|(i, &x)| f(x, self.mean[i / m], self.std[i / m])).collect();
        LatentGrid { dims: g.dims, data }
    }
}

/// Summary features of an encoded cine for distribution distances: spatial
/// mean and std of each (channel, latent frame) slice.
pub fn latent_features(g: &LatentGrid) -> Vec<f64> {
    let [c, t, h, w] = g.dims;
    let plane = h * w;
    let mut means = Vec::with_capacity(c * t);
    let mut stds = Vec::with_capacity(c * t);
    for k in 0..c * t {
        let s = &g.data[k * plane..(k + 1) * plane];
        let m = s.iter().sum::<f64>() / plane as f64;
        means.push(m);
        stds.push((s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / plane as f64).sqrt());
    }
    means.extend(stds);
    means
}
