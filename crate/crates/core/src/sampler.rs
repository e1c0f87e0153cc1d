//! Iterative parallel decoding of token grids and end-to-end cine generation.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::cine_vae::{CineVae, LatentGrid, LatentStats};
use crate::dataset::Normalizer;
use crate::diffusion::{sample_tokens, TokenConditions};
use crate::mar::{factorization_check, patchify, unpatchify, Mar, TokenSequence};
use crate::numerics::{Element, ParamStore, Rng};
use crate::phantom::Cine;
use crate::pheno_vae::{sample_phenotypes, PhenoVae};
use crate::{Error, Result};

const SELECT_KEY: u64 = 1;
const TOKEN_KEY: u64 = 2;
const PHENO_KEY: u64 = 3;

/// Cosine-shaped reveal schedule: how many tokens become known at each step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeSchedule {
    pub n: usize,
    pub counts: Vec<usize>,
}

/// Unclamped cumulative keep count ⌈N·(1 − cos(πk/2K))⌉.
pub fn cosine_keep(n: usize, k: usize, steps: usize) -> usize {
    let frac = 1.0 - (std::f64::consts::PI * k as f64 / (2.0 * steps as f64)).cos();
    // Guards against 1 − cos landing a hair above an integer multiple of 1/N.
    ((n as f64 * frac - 1e-9).ceil().max(0.0) as usize).min(n)
}

impl DecodeSchedule {
    /// Every step reveals at least one token and the last step reveals the
    /// rest, so the cosine keep curve is clamped into [keep(k−1)+1, N−(K−k)].
    pub fn new(n: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > n {
            return Err(Error::invalid(format!("decode steps must satisfy 1 ≤ K ≤ N, got K = {steps}, N = {n}")));
        }
        let mut counts = Vec::with_capacity(steps);
        let mut prev = 0;
        for k in 1..=steps {
            let keep = if k == steps { n } else { cosine_keep(n, k, steps).clamp(prev + 1, n - (steps - k)) };
            counts.push(keep - prev);
            prev = keep;
        }
        Ok(DecodeSchedule { n, counts })
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    /// Known tokens after step k (keep(0) = 0).
    pub fn keep(&self, k: usize) -> usize {
        self.counts[..k].iter().sum()
    }

    /// Position sets per step, each drawn uniformly among the still-masked.
    pub fn draw_sets(&self, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        let mut remaining: Vec<usize> = (0..self.n).collect();
        let mut sets = Vec::with_capacity(self.steps());
        for &c in &self.counts {
            let mut pick = rng.choose(remaining.len(), c);
            pick.sort_unstable();
            let set: Vec<usize> = pick.iter().map(|&j| remaining[j]).collect();
            for &j in pick.iter().rev() {
                remaining.remove(j);
            }
            sets.push(set);
        }
        factorization_check(&sets, self.n)?;
        Ok(sets)
    }
}

/// Cost counters for one generated latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeCost {
    pub mar_passes: usize,
    pub denoiser_evals: usize,
}

/// Samples a full token grid for one condition. `cond` is the normalized
/// phenotype vector. Known tokens stay frozen; token `i` draws its diffusion
/// noise from a stream keyed by (seed, i).
pub fn generate_latent<E: Element>(
    mar: &Mar,
    store: &ParamStore<E>,
    cond: &[f64],
    cfg_scale: f64,
    steps: usize,
    seed: u64,
) -> Result<(LatentGrid, DecodeCost)> {
    if cond.len() != mar.cfg.cond_dim {
        return Err(Error::shape(
            "generate",
            format!("condition has {} values but the model expects {}", cond.len(), mar.cfg.cond_dim),
        ));
    }
    if !(cfg_scale >= 0.0) {
        return Err(Error::invalid(format!("cfg scale must be ≥ 0, got {cfg_scale}")));
    }
    let grid = mar.cfg.grid;
    let mut seq: TokenSequence = patchify(&LatentGrid::new(grid, vec![0.0; grid.iter().product()])?, mar.cfg.patch)?;
    let n = seq.len();
    let d = seq.dim;
    seq.mask = vec![true; n];
    let sched = DecodeSchedule::new(n, steps)?;
    let sets = sched.draw_sets(&mut Rng::stream(seed, &[SELECT_KEY]))?;
    let guided = cfg_scale != 1.0;
    let w = mar.cfg.width;
    let mut cost = DecodeCost::default();
    for set in &sets {
        let z = mar.forward(store, &seq, Some(cond))?;
        cost.mar_passes += 1;
        let zn = if guided {
            cost.mar_passes += 1;
            Some(mar.forward(store, &seq, None)?)
        } else {
            None
        };
        let rows = |m: &[f64]| -> Vec<f64> { set.iter().flat_map(|&i| m[i * w..(i + 1) * w].to_vec()).collect() };
        let zc = rows(&z);
        let zn = zn.as_deref().map(rows);
        let conds = TokenConditions { cond: &zc, null: zn.as_deref(), cfg_scale };
        let mut rngs: Vec<Rng> = set.iter().map(|&i| Rng::stream(seed, &[TOKEN_KEY, i as u64])).collect();
        let (tok, evals) = sample_tokens(&mar.den, store, &mar.sched, &conds, &mut rngs)?;
        cost.denoiser_evals += evals;
        for (r, &i) in set.iter().enumerate() {
            seq.tokens[i * d..(i + 1) * d].copy_from_slice(&tok[r * d..(r + 1) * d]);
            seq.mask[i] = false;
        }
    }
    Ok((unpatchify(&seq, grid, mar.cfg.patch)?, cost))
}

/// Borrowed set of trained models needed to go from phenotypes to cines.
pub struct Models<'a, E: Element> {
    pub pheno: &'a PhenoVae,
    pub pheno_store: &'a ParamStore<E>,
    pub norm: &'a Normalizer,
    pub vae: &'a CineVae,
    pub vae_store: &'a ParamStore<E>,
    pub stats: &'a LatentStats,
    pub mar: &'a Mar,
    pub mar_store: &'a ParamStore<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    /// Phenotypes in physical units; drawn from the phenotype VAE when absent.
    pub condition: Option<Vec<f64>>,
    pub cfg_scale: f64,
    pub seed: u64,
    pub count: usize,
    pub steps: usize,
}

/// A generated cine and the phenotypes it was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub cine: Cine,
    pub phenotypes: Vec<f64>,
    pub cost: DecodeCost,
}

/// Generates `req.count` cines; sample `i` is fully determined by seed + i.
pub fn generate_cines<E: Element>(m: &Models<'_, E>, req: &GenerationRequest) -> Result<Vec<Generated>> {
    (0..req.count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = req.seed.wrapping_add(i);
            let phenotypes = match &req.condition {
                Some(c) => c.clone(),
                None => {
                    let rng = Rng::stream(seed, &[PHENO_KEY]);
                    sample_phenotypes(m.pheno, m.pheno_store, m.norm, 1, &rng)?.remove(0)
                }
            };
            generate_one(m, &phenotypes, req.cfg_scale, req.steps, seed)
        })
        .collect()
}

/// Generates one cine for explicit physical-unit phenotypes.
pub fn generate_one<E: Element>(
    m: &Models<'_, E>,
    phenotypes: &[f64],
    cfg_scale: f64,
    steps: usize,
    seed: u64,
) -> Result<Generated> {
    if phenotypes.len() != m.norm.dim() {
        return Err(Error::shape("generate", format!("{} phenotypes, expected {}", phenotypes.len(), m.norm.dim())));
    }
    let cond = m.norm.normalize(phenotypes);
    let (z, cost) = generate_latent(m.mar, m.mar_store, &cond, cfg_scale, steps, seed)?;
    let cine = m.vae.decode(m.vae_store, &m.stats.destandardize(&z))?;
    Ok(Generated { cine, phenotypes: phenotypes.to_vec(), cost })
}

/// MAR passes needed for K steps.
pub fn mar_passes(steps: usize, cfg_scale: f64) -> usize {
    steps * cfg_factor(cfg_scale)
}

/// Denoiser evaluations for N tokens; independent of the step count.
pub fn denoiser_evals(n: usize, infer_steps: usize, cfg_scale: f64) -> usize {
    n * infer_steps * cfg_factor(cfg_scale)
}

fn cfg_factor(cfg_scale: f64) -> usize {
    if cfg_scale != 1.0 {
        2
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub steps: usize,
    pub mar_passes: usize,
    pub denoiser_evals: usize,
    pub wall_ms_per_cine: f64,
}

/// Times end-to-end generation of `reps` cines for each K.
pub fn bench_decode<E: Element>(
    m: &Models<'_, E>,
    steps: &[usize],
    cfg_scale: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let pheno = sample_phenotypes(m.pheno, m.pheno_store, m.norm, reps.max(1), &Rng::stream(seed, &[PHENO_KEY]))?;
    let mut rows = Vec::with_capacity(steps.len());
    for &k in steps {
        let start = Instant::now();
        let mut cost = DecodeCost::default();
        for (i, p) in pheno.iter().enumerate() {
            cost = generate_one(m, p, cfg_scale, k, seed.wrapping_add(i as u64))?.cost;
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / pheno.len() as f64;
        rows.push(BenchRow { steps: k, mar_passes: cost.mar_passes, denoiser_evals: cost.denoiser_evals, wall_ms_per_cine: ms });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["K", "mar_passes", "denoiser_evals", "wall_ms_per_cine"])?;
    for r in rows {
        out.write_record([
            r.steps.to_string(),
            r.mar_passes.to_string(),
            r.denoiser_evals.to_string(),
            format!("{:.3}", r.wall_ms_per_cine),
        ])?;
    }
    out.flush()?;
    Ok(())
}
