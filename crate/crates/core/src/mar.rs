//! Masked autoregressive transformer over latent tokens.
//!
//! An MAE-style encoder sees the condition token plus the known tokens; a
//! decoder sees every position, with a learned mask embedding where the token
//! is unknown, and emits one condition vector per position for the diffusion
//! head.

use crate::cine_vae::LatentGrid;
use crate::diffusion::{diffusion_loss, DenoiserConfig, DenoiserMlp, NoiseDraw, NoiseSchedule};
use crate::nn::{sample_grads, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::numerics::{AdamW, Element, Graph, ParamStore, Rng, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MarConfig {
    /// Latent grid (|x|, T', H', W') the model is built for.
    pub grid: [usize; 4],
    /// (p_t, p_s) patch strides.
    pub patch: [usize; 2],
    pub width: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_lo: f64,
    pub mask_hi: f64,
    /// Probability of replacing the condition by the null embedding in training.
    pub p_drop: f64,
    pub cond_dim: usize,
    /// Linear layers in the condition projection.
    pub cond_depth: usize,
    pub den_width: usize,
    pub den_blocks: usize,
    pub train_steps: usize,
    pub infer_steps: usize,
    pub n_rep: usize,
}

impl MarConfig {
    pub fn desk(grid: [usize; 4], cond_dim: usize) -> Self {
        MarConfig {
            grid,
            patch: [2, 2],
            width: 64,
            enc_depth: 2,
            dec_depth: 2,
            heads: 4,
            mlp_ratio: 2,
            mask_lo: 0.7,
            mask_hi: 1.0,
            p_drop: 0.1,
            cond_dim,
            cond_depth: 1,
            den_width: 128,
            den_blocks: 2,
            train_steps: 200,
            infer_steps: 50,
            n_rep: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [_, t, h, w] = self.grid;
        let [pt, ps] = self.patch;
        if pt == 0 || ps == 0 || t % pt != 0 || h % ps != 0 || w % ps != 0 {
            return Err(Error::Config(format!(
                "latent grid {:?} not divisible by patch ({pt}, {ps}, {ps})",
                self.grid
            )));
        }
        if !(0.0 <= self.mask_lo && self.mask_lo <= self.mask_hi && self.mask_hi <= 1.0) {
            return Err(Error::Config(format!(
                "mask range [{}, {}] must satisfy 0 ≤ lo ≤ hi ≤ 1",
                self.mask_lo, self.mask_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.cond_depth == 0 {
            return Err(Error::Config("condition projection needs at least one layer".into()));
        }
        Ok(())
    }

    /// Token-grid extents (T'/p_t, H'/p_s, W'/p_s).
    pub fn token_grid(&self) -> [usize; 3] {
        let [_, t, h, w] = self.grid;
        [t / self.patch[0], h / self.patch[1], w / self.patch[1]]
    }

    pub fn n_tokens(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn token_dim(&self) -> usize {
        self.grid[0] * self.patch[0] * self.patch[1] * self.patch[1]
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            token_dim: self.token_dim(),
            cond_dim: self.width,
            width: self.den_width,
            blocks: self.den_blocks,
            train_steps: self.train_steps,
            infer_steps: self.infer_steps,
            n_rep: self.n_rep,
        }
    }
}

/// Flat tokens with their 3D grid positions and the mask (true = unknown).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f64>,
    pub dim: usize,
    pub positions: Vec<[usize; 3]>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

/// Splits a latent grid into non-overlapping (p_t, p_s, p_s) patches in
/// raster order. Each token holds (channel, dt, dh, dw) in C order.
pub fn patchify(x: &LatentGrid, patch: [usize; 2]) -> Result<TokenSequence> {
    let [c, t, h, w] = x.dims;
    let [pt, ps] = patch;
    if pt == 0 || ps == 0 || t % pt != 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::shape(
            "patchify",
            format!("grid {:?} not divisible by patch ({pt}, {ps}, {ps})", x.dims),
        ));
    }
    let (nt, nh, nw) = (t / pt, h / ps, w / ps);
    let dim = c * pt * ps * ps;
    let mut tokens = Vec::with_capacity(nt * nh * nw * dim);
    let mut positions = Vec::with_capacity(nt * nh * nw);
    for it in 0..nt {
        for ih in 0..nh {
            for iw in 0..nw {
                positions.push([it, ih, iw]);
                for ch in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ps {
                            for dw in 0..ps {
                                let (a, b, e) = (it * pt + dt, ih * ps + dh, iw * ps + dw);
                                tokens.push(x.data[((ch * t + a) * h + b) * w + e]);
                            }
                        }
                    }
                }
            }
        }
    }
    let n = positions.len();
    Ok(TokenSequence { tokens, dim, positions, mask: vec![false; n] })
}

/// Inverse of [`patchify`] for a grid of shape `dims`.
pub fn unpatchify(seq: &TokenSequence, dims: [usize; 4], patch: [usize; 2]) -> Result<LatentGrid> {
    let [c, t, h, w] = dims;
    let [pt, ps] = patch;
    if seq.dim != c * pt * ps * ps || seq.tokens.len() != dims.iter().product::<usize>() {
        return Err(Error::shape(
            "unpatchify",
            format!("{} tokens of dim {} for grid {dims:?}", seq.len(), seq.dim),
        ));
    }
    let mut data = vec![0.0; seq.tokens.len()];
    for (i, &[it, ih, iw]) in seq.positions.iter().enumerate() {
        let tok = seq.token(i);
        let mut j = 0;
        for ch in 0..c {
            for dt in 0..pt {
                for dh in 0..ps {
                    for dw in 0..ps {
                        let (a, b, e) = (it * pt + dt, ih * ps + dh, iw * ps + dw);
                        data[((ch * t + a) * h + b) * w + e] = tok[j];
                        j += 1;
                    }
                }
            }
        }
    }
    LatentGrid::new(dims, data)
}

/// Masks exactly ⌈ratio·n⌉ positions chosen uniformly without replacement.
/// The product is nudged down by 1e-9 so that e.g. 0.7·10 masks 7, not 8.
pub fn mask_with_ratio(n: usize, ratio: f64, rng: &mut Rng) -> Vec<bool> {
    let k = ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut mask = vec![false; n];
    for i in rng.choose(n, k) {
        mask[i] = true;
    }
    mask
}

/// Draws a ratio m ~ U[lo, hi] and masks ⌈m·n⌉ positions. Returns (m, mask).
pub fn sample_mask(n: usize, rng: &mut Rng, lo: f64, hi: f64) -> (f64, Vec<bool>) {
    let m = if hi > lo { rng.uniform_range(lo, hi) } else { lo };
    (m, mask_with_ratio(n, m, rng))
}

/// Checks that the step sets are pairwise disjoint and cover 0..n.
pub fn factorization_check(steps: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (k, set) in steps.iter().enumerate() {
        for &i in set {
            if i >= n {
                return Err(Error::invalid(format!("step {} names token {i} of {n}", k + 1)));
            }
            if seen[i] {
                return Err(Error::invalid(format!("token {i} decoded twice (again at step {})", k + 1)));
            }
            seen[i] = true;
        }
    }
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("token {gap} never decoded")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Mar {
    pub cfg: MarConfig,
    cond: Vec<Linear>,
    null: Embedding,
    tok_in: Linear,
    enc_pos: Embedding,
    enc: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    dec_in: Linear,
    mask_emb: Embedding,
    dec_pos: Embedding,
    dec: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    pub den: DenoiserMlp,
    pub sched: NoiseSchedule,
}

impl Mar {
    pub fn new<E: Element>(cfg: MarConfig, store: &mut ParamStore<E>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let n = cfg.n_tokens();
        let mut cond = Vec::new();
        for i in 0..cfg.cond_depth {
            let fan_in = if i == 0 { cfg.cond_dim } else { w };
            cond.push(Linear::new(store, &format!("mar.cond.{i}"), fan_in, w, rng));
        }
        let null = Embedding::new(store, "mar.null", 1, w, rng);
        let tok_in = Linear::new(store, "mar.tok_in", cfg.token_dim(), w, rng);
        // One extra positional row for the condition token.
        let enc_pos = Embedding::new(store, "mar.enc_pos", n + 1, w, rng);
        let enc = (0..cfg.enc_depth)
            .map(|i| TransformerBlock::new(store, &format!("mar.enc.{i}"), w, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let enc_norm = LayerNorm::new(store, "mar.enc_norm", w);
        let dec_in = Linear::new(store, "mar.dec_in", w, w, rng);
        let mask_emb = Embedding::new(store, "mar.mask", 1, w, rng);
        let dec_pos = Embedding::new(store, "mar.dec_pos", n + 1, w, rng);
        let dec = (0..cfg.dec_depth)
            .map(|i| TransformerBlock::new(store, &format!("mar.dec.{i}"), w, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let dec_norm = LayerNorm::new(store, "mar.dec_norm", w);
        let den = DenoiserMlp::new(cfg.denoiser(), store, "den", rng)?;
        let sched = NoiseSchedule::cosine(cfg.train_steps)?;
        Ok(Mar { cfg, cond, null, tok_in, enc_pos, enc, enc_norm, dec_in, mask_emb, dec_pos, dec, dec_norm, den, sched })
    }

    fn flat_pos(&self, p: &[usize; 3]) -> Result<usize> {
        let [nt, nh, nw] = self.cfg.token_grid();
        if p[0] >= nt || p[1] >= nh || p[2] >= nw {
            return Err(Error::shape("mar", format!("position {p:?} outside token grid {:?}", [nt, nh, nw])));
        }
        Ok((p[0] * nh + p[1]) * nw + p[2])
    }

    /// Condition token: projected phenotypes, or the null embedding.
    fn cls<E: Element>(&self, g: &mut Graph<'_, E>, cond: Option<Var>) -> Result<Var> {
        match cond {
            None => self.null.lookup(g, &[0]),
            Some(c) => {
                if g.dims(c) != [1, self.cfg.cond_dim] {
                    return Err(Error::shape(
                        "mar.cond",
                        format!("condition {} but config expects (1, {})", g.shape(c), self.cfg.cond_dim),
                    ));
                }
                let mut h = c;
                for (i, l) in self.cond.iter().enumerate() {
                    if i > 0 {
                        h = g.silu(h);
                    }
                    h = l.forward(g, h)?;
                }
                Ok(h)
            }
        }
    }

    /// Condition vectors z (N, width) for every position. `tokens` is (N, D_tok);
    /// rows at masked positions are never read.
    pub fn forward_graph<E: Element>(
        &self,
        g: &mut Graph<'_, E>,
        tokens: Var,
        positions: &[[usize; 3]],
        mask: &[bool],
        cond: Option<Var>,
    ) -> Result<Var> {
        let n = positions.len();
        if g.dims(tokens) != [n, self.cfg.token_dim()] || mask.len() != n {
            return Err(Error::shape(
                "mar.forward",
                format!("tokens {} with {n} positions and {} mask flags", g.shape(tokens), mask.len()),
            ));
        }
        let flat: Vec<usize> = positions.iter().map(|p| self.flat_pos(p)).collect::<Result<_>>()?;
        let cls_row = self.cfg.n_tokens();
        let visible: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();

        let cls = self.cls(g, cond)?;
        let cls_pos = self.enc_pos.lookup(g, &[cls_row])?;
        let mut h = g.add(cls, cls_pos)?;
        if !visible.is_empty() {
            let x = g.gather_rows(tokens, &visible)?;
            let x = self.tok_in.forward(g, x)?;
            let vpos: Vec<usize> = visible.iter().map(|&i| flat[i]).collect();
            let pe = self.enc_pos.lookup(g, &vpos)?;
            let x = g.add(x, pe)?;
            h = g.concat_rows(&[h, x])?;
        }
        for b in &self.enc {
            h = b.forward(g, h)?;
        }
        let h = self.enc_norm.forward(g, h)?;
        let h = self.dec_in.forward(g, h)?;

        // Row 0 is the condition token, rows 1..=V the visible tokens, row V+1 the mask embedding.
        let m = self.mask_emb.lookup(g, &[0])?;
        let pool = g.concat_rows(&[h, m])?;
        let mask_row = visible.len() + 1;
        let mut idx = Vec::with_capacity(n + 1);
        idx.push(0);
        let mut rank = 0;
        for &masked in mask {
            if masked {
                idx.push(mask_row);
            } else {
                rank += 1;
                idx.push(rank);
            }
        }
        let seq = g.gather_rows(pool, &idx)?;
        let mut dpos = Vec::with_capacity(n + 1);
        dpos.push(cls_row);
        dpos.extend(&flat);
        let pe = self.dec_pos.lookup(g, &dpos)?;
        let mut d = g.add(seq, pe)?;
        for b in &self.dec {
            d = b.forward(g, d)?;
        }
        let d = self.dec_norm.forward(g, d)?;
        g.slice_rows(d, 1, n + 1)
    }

    /// No-grad condition vectors for a sequence, (N × width) row-major.
    pub fn forward<E: Element>(
        &self,
        store: &ParamStore<E>,
        seq: &TokenSequence,
        cond: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(store).no_grad();
        let t = g.constant_f64([seq.len(), seq.dim], &seq.tokens)?;
        let c = match cond {
            Some(c) => Some(g.constant_f64([1, c.len()], c)?),
            None => None,
        };
        let z = self.forward_graph(&mut g, t, &seq.positions, &seq.mask, c)?;
        Ok(g.value(z).iter().map(|v| v.f64()).collect())
    }

    /// Diffusion loss on masked positions only, averaged over masked tokens.
    /// `inputs` feed the encoder; `targets` supply the diffusion targets.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<E: Element>(
        &self,
        g: &mut Graph<'_, E>,
        inputs: Var,
        targets: Var,
        positions: &[[usize; 3]],
        mask: &[bool],
        cond: Option<Var>,
        draw: &NoiseDraw,
    ) -> Result<Var> {
        let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if masked.is_empty() {
            return Err(Error::invalid("loss needs at least one masked token"));
        }
        let z = self.forward_graph(g, inputs, positions, mask, cond)?;
        let zm = g.gather_rows(z, &masked)?;
        let xm = g.gather_rows(targets, &masked)?;
        diffusion_loss(g, &self.den, &self.sched, xm, zm, draw)
    }
}

/// Per-sample randomness of one training step: mask, condition dropout and
/// diffusion noise.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub mask: Vec<bool>,
    pub drop_cond: bool,
    pub noise: NoiseDraw,
}

impl StepDraw {
    pub fn sample(cfg: &MarConfig, rng: &mut Rng) -> Self {
        let n = cfg.n_tokens();
        let (_, mask) = sample_mask(n, rng, cfg.mask_lo, cfg.mask_hi);
        let drop_cond = rng.bernoulli(cfg.p_drop);
        let m = mask.iter().filter(|&&b| b).count();
        let noise = NoiseDraw::sample(m * cfg.n_rep, cfg.token_dim(), cfg.train_steps, rng);
        StepDraw { mask, drop_cond, noise }
    }
}

/// One AdamW step on a batch of (standardized token sequence, normalized
/// phenotypes). Returns the batch-mean loss.
pub fn train_step<E: Element>(
    mar: &Mar,
    store: &mut ParamStore<E>,
    opt: &mut AdamW<E>,
    batch: &[(&TokenSequence, &[f64])],
    rng: &mut Rng,
) -> Result<f64> {
    let draws: Vec<StepDraw> = batch.iter().map(|_| StepDraw::sample(&mar.cfg, rng)).collect();
    let (loss, mut grads) = sample_grads(store, batch.len(), |i, g| {
        let (seq, cond) = batch[i];
        let d = &draws[i];
        let x = g.constant_f64([seq.len(), seq.dim], &seq.tokens)?;
        let c = if d.drop_cond { None } else { Some(g.constant_f64([1, cond.len()], cond)?) };
        mar.loss_graph(g, x, x, &seq.positions, &d.mask, c, &d.noise)
    })
    .map_err(|e| match e {
        Error::NonFinite { what } => Error::NonFinite { what: format!("mar {what} at step {}", opt.step + 1) },
        e => e,
    })?;
    let n = batch.len() as f64;
    grads.scale(E::of(1.0 / n));
    store.accumulate(&grads);
    opt.step(store)?;
    Ok(loss / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_token_counts() {
        let cfg = MarConfig::desk([4, 4, 8, 8], 8);
        assert_eq!((cfg.n_tokens(), cfg.token_dim()), (32, 32));
        let large = MarConfig { patch: [5, 2], ..MarConfig::desk([16, 25, 12, 12], 8) };
        assert_eq!((large.n_tokens(), large.token_dim()), (180, 320));
    }

    #[test]
    fn patchify_rejects_indivisible_grid() {
        let g = LatentGrid::new([1, 3, 4, 4], vec![0.0; 48]).unwrap();
        assert!(patchify(&g, [2, 2]).is_err());
    }

    #[test]
    fn ceiling_mask_count() {
        let mut rng = Rng::new(0);
        assert_eq!(mask_with_ratio(32, 0.75, &mut rng).iter().filter(|&&m| m).count(), 24);
        assert!(mask_with_ratio(32, 1.0, &mut rng).iter().all(|&m| m));
        assert_eq!(mask_with_ratio(32, 0.71, &mut rng).iter().filter(|&&m| m).count(), 23);
        assert_eq!(mask_with_ratio(10, 0.7, &mut rng).iter().filter(|&&m| m).count(), 7);
    }

    #[test]
    fn partition_errors() {
        assert!(factorization_check(&[vec![0, 1], vec![2]], 3).is_ok());
        assert!(factorization_check(&[vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(factorization_check(&[vec![0], vec![2]], 3).is_err());
    }
}
