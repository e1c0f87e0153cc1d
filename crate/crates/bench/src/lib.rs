//! Shared fixtures for the criterion benchmarks in `benches/`.
//!
//! Models are freshly initialized at desk size; timing does not depend on
//! the weights, so no training is needed.

use cpgg_core::cine_vae::{CineVae, CineVaeConfig, LatentStats};
use cpgg_core::dataset::Normalizer;
use cpgg_core::mar::{Mar, MarConfig};
use cpgg_core::numerics::{ParamStore, Rng};
use cpgg_core::phantom::{self, Cine, P};
use cpgg_core::pheno_vae::{PhenoVae, PhenoVaeConfig};
use cpgg_core::sampler::Models;

pub const FRAMES: usize = 8;
pub const SIZE: usize = 32;

pub struct Desk {
    pub pheno: PhenoVae,
    pub pheno_store: ParamStore<f32>,
    pub norm: Normalizer,
    pub vae: CineVae,
    pub vae_store: ParamStore<f32>,
    pub stats: LatentStats,
    pub mar: Mar,
    pub mar_store: ParamStore<f32>,
}

impl Desk {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut pheno_store = ParamStore::new();
        let pheno = PhenoVae::new(PhenoVaeConfig::default(), &mut pheno_store, &mut rng).expect("pheno config");
        let mut vae_store = ParamStore::new();
        let vae = CineVae::new(CineVaeConfig::default(), &mut vae_store, &mut rng).expect("cine config");
        let grid = vae.cfg.latent_dims(FRAMES, SIZE, SIZE).expect("latent grid");
        let mut mar_store = ParamStore::new();
        let mar = Mar::new(MarConfig::desk(grid, P), &mut mar_store, &mut rng).expect("mar config");
        let norm = Normalizer { mean: vec![0.0; P], std: vec![1.0; P] };
        let stats = LatentStats { mean: vec![0.0; grid[0]], std: vec![1.0; grid[0]] };
        Desk { pheno, pheno_store, norm, vae, vae_store, stats, mar, mar_store }
    }

    pub fn models(&self) -> Models<'_, f32> {
        Models {
            pheno: &self.pheno,
            pheno_store: &self.pheno_store,
            norm: &self.norm,
            vae: &self.vae,
            vae_store: &self.vae_store,
            stats: &self.stats,
            mar: &self.mar,
            mar_store: &self.mar_store,
        }
    }
}

/// One rendered phantom cine at desk size.
pub fn phantom_cine(seed: u64) -> Cine {
    let mut rng = Rng::new(seed);
    let p = phantom::sample_params(&mut rng, SIZE, SIZE).expect("phantom params");
    phantom::render_cine(&p, FRAMES, SIZE, SIZE, &mut rng).expect("render")
}
