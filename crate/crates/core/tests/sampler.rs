use cpgg_core::cine_vae::{CineVae, CineVaeConfig, LatentStats};
use cpgg_core::dataset::Dataset;
use cpgg_core::mar::{factorization_check, Mar, MarConfig};
use cpgg_core::numerics::{ParamStore, Rng};
use cpgg_core::pheno_vae::{PhenoVae, PhenoVaeConfig};
use cpgg_core::sampler::*;
use proptest::prelude::*;

#[test]
fn cosine_counts_for_32_tokens_in_8_steps() {
    let s = DecodeSchedule::new(32, 8).unwrap();
    assert_eq!(s.counts, vec![1, 2, 3, 4, 5, 5, 6, 6]);
    let keeps: Vec<usize> = (1..=8).map(|k| s.keep(k)).collect();
    assert_eq!(keeps, vec![1, 3, 6, 10, 15, 20, 26, 32]);
}

#[test]
fn large_grid_schedule_and_pass_ratio() {
    let s = DecodeSchedule::new(180, 16).unwrap();
    assert_eq!(s.counts, vec![1, 3, 4, 6, 8, 9, 10, 12, 13, 14, 16, 16, 16, 17, 18, 17]);
    let ratio = mar_passes(180, 1.0) as f64 / mar_passes(16, 1.0) as f64;
    assert_eq!(ratio, 11.25);
    assert_eq!(denoiser_evals(180, 100, 3.0), 2 * denoiser_evals(180, 100, 1.0));
}

#[test]
fn every_small_schedule_partitions_and_increases() {
    for n in 1..=256 {
        for k in 1..=n {
            let s = DecodeSchedule::new(n, k).unwrap();
            assert_eq!(s.counts.len(), k);
            assert_eq!(s.keep(k), n, "N={n} K={k}");
            assert!(s.counts.iter().all(|&c| c >= 1), "N={n} K={k}");
        }
    }
}

struct Fixture {
    pheno: PhenoVae,
    pheno_store: ParamStore<f32>,
    ds: Dataset,
    vae: CineVae,
    vae_store: ParamStore<f32>,
    stats: LatentStats,
    mar: Mar,
    mar_store: ParamStore<f32>,
}

impl Fixture {
    fn new() -> Self {
        let ds = Dataset::generate(12, 4, 8, 32, 32).unwrap();
        let mut rng = Rng::new(5);
        let mut pheno_store = ParamStore::new();
        let pheno = PhenoVae::new(PhenoVaeConfig::default(), &mut pheno_store, &mut rng).unwrap();
        let mut vae_store = ParamStore::new();
        let vae = CineVae::new(CineVaeConfig::default(), &mut vae_store, &mut rng).unwrap();
        let stats = LatentStats { mean: vec![0.0; 4], std: vec![1.0; 4] };
        let cfg = MarConfig {
            width: 16,
            heads: 2,
            enc_depth: 1,
            dec_depth: 1,
            den_width: 16,
            den_blocks: 1,
            train_steps: 20,
            infer_steps: 4,
            ..MarConfig::desk([4, 4, 8, 8], 8)
        };
        let mut mar_store = ParamStore::new();
        let mar = Mar::new(cfg, &mut mar_store, &mut rng).unwrap();
        // Give the zero-initialized denoiser head some output.
        for id in mar_store.ids().collect::<Vec<_>>() {
            if mar_store.name(id).starts_with("den.out") {
                for v in mar_store.get_mut(id).data_mut() {
                    *v = 0.1 * rng.normal() as f32;
                }
            }
        }
        Fixture { pheno, pheno_store, ds, vae, vae_store, stats, mar, mar_store }
    }

    fn models(&self) -> Models<'_, f32> {
        Models {
            pheno: &self.pheno,
            pheno_store: &self.pheno_store,
            norm: &self.ds.norm,
            vae: &self.vae,
            vae_store: &self.vae_store,
            stats: &self.stats,
            mar: &self.mar,
            mar_store: &self.mar_store,
        }
    }
}

#[test]
fn latent_generation_counts_and_determinism() {
    let f = Fixture::new();
    let cond = f.ds.normalized(0);
    let n = f.mar.cfg.n_tokens();
    for (k, cfg) in [(1, 1.0), (4, 1.0), (4, 3.0), (n, 3.0)] {
        let (z, cost) = generate_latent(&f.mar, &f.mar_store, &cond, cfg, k, 9).unwrap();
        assert_eq!(z.dims, [4, 4, 8, 8]);
        assert_eq!(cost.mar_passes, mar_passes(k, cfg));
        assert_eq!(cost.denoiser_evals, denoiser_evals(n, 4, cfg));
        let (again, _) = generate_latent(&f.mar, &f.mar_store, &cond, cfg, k, 9).unwrap();
        assert_eq!(z, again);
    }
    let (a, _) = generate_latent(&f.mar, &f.mar_store, &cond, 1.0, 4, 9).unwrap();
    let (b, _) = generate_latent(&f.mar, &f.mar_store, &cond, 3.0, 4, 9).unwrap();
    assert_ne!(a, b);
    assert!(generate_latent(&f.mar, &f.mar_store, &cond[..3], 1.0, 4, 9).is_err());
    assert!(generate_latent(&f.mar, &f.mar_store, &cond, -1.0, 4, 9).is_err());
    assert!(generate_latent(&f.mar, &f.mar_store, &cond, 1.0, n + 1, 9).is_err());
}

#[test]
fn cine_batches_are_distinct_and_reproducible() {
    let f = Fixture::new();
    let req = GenerationRequest { condition: None, cfg_scale: 3.0, seed: 40, count: 3, steps: 4 };
    let out = generate_cines(&f.models(), &req).unwrap();
    assert_eq!(out.len(), 3);
    for g in &out {
        assert_eq!(g.cine.dims(), [1, 8, 32, 32]);
        assert_eq!(g.phenotypes.len(), 8);
    }
    assert_ne!(out[0].cine, out[1].cine);
    assert_ne!(out[1].cine, out[2].cine);
    assert_eq!(out, generate_cines(&f.models(), &req).unwrap());
    // Sample i of a batch equals a single request seeded at seed + i.
    let single = GenerationRequest { seed: 42, count: 1, ..req.clone() };
    assert_eq!(generate_cines(&f.models(), &single).unwrap()[0], out[2]);

    let fixed = GenerationRequest { condition: Some(f.ds.phenotypes[0].to_vec()), count: 2, ..req };
    let out = generate_cines(&f.models(), &fixed).unwrap();
    assert_eq!(out[0].phenotypes, f.ds.phenotypes[0].to_vec());
}

#[test]
fn bench_rows_follow_pass_arithmetic() {
    let f = Fixture::new();
    let n = f.mar.cfg.n_tokens();
    let rows = bench_decode(&f.models(), &[4, n], 3.0, 1, 1).unwrap();
    assert_eq!(rows[0].mar_passes, 8);
    assert_eq!(rows[1].mar_passes, 2 * n);
    assert_eq!(rows[0].denoiser_evals, rows[1].denoiser_evals);
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("K,mar_passes,denoiser_evals,wall_ms_per_cine\n4,8,"));
    assert_eq!(text.lines().count(), 3);
}

proptest! {
    #[test]
    fn drawn_sets_partition_tokens(n in 1usize..=256, frac in 0.0..1.0f64, seed in 0u64..10_000) {
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let s = DecodeSchedule::new(n, k).unwrap();
        let sets = s.draw_sets(&mut Rng::new(seed)).unwrap();
        prop_assert!(factorization_check(&sets, n).is_ok());
        for (j, set) in sets.iter().enumerate() {
            prop_assert_eq!(set.len(), s.counts[j]);
        }
        prop_assert!((1..=k).all(|j| s.keep(j) > s.keep(j - 1)));
    }

    #[test]
    fn clamped_keep_tracks_the_cosine_curve(n in 1usize..=256, frac in 0.0..1.0f64) {
        // Clamping only moves keep(k) when the raw curve would stall or overrun.
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let s = DecodeSchedule::new(n, k).unwrap();
        for j in 1..k {
            let raw = cosine_keep(n, j, k);
            let keep = s.keep(j);
            prop_assert!(keep == raw || keep == s.keep(j - 1) + 1 || keep == n - (k - j));
        }
    }
}
