use cpgg_core::dataset::{Dataset, Split};
use cpgg_core::metrics::wasserstein1;
use cpgg_core::numerics::{ParamStore, Rng};
use cpgg_core::phantom::EF;
use cpgg_core::pheno_vae::{
    elbo_loss, kl_divergence, new_optimizer, reparameterize, sample_phenotypes, train_epoch, PhenoLatent, PhenoVae,
    PhenoVaeConfig,
};
use proptest::prelude::*;

#[test]
fn reparameterized_moments() {
    let l = PhenoLatent { mu: vec![1.5], logvar: vec![(0.49f64).ln()] };
    let mut rng = Rng::new(12);
    let z: Vec<f64> = (0..10_000).map(|_| reparameterize(&l, &mut rng)[0]).collect();
    let m = z.iter().sum::<f64>() / 1e4;
    let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 1e4;
    assert!((m - 1.5).abs() < 3.0 * 0.7 / 100.0, "mean {m}");
    assert!((v - 0.49).abs() < 0.049, "var {v}");
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 1..6), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let logvar: Vec<f64> = mu.iter().map(|_| rng.uniform_range(-6.0, 4.0)).collect();
        let l = PhenoLatent { mu, logvar };
        prop_assert!(kl_divergence(&l) >= 0.0);
        let x = vec![0.0; 3];
        prop_assert!(elbo_loss(&x, &x, &l, 1.0).unwrap() >= 0.0);
    }
}

#[test]
fn training_fits_phantom_phenotypes() {
    let ds = Dataset::generate(300, 1, 8, 32, 32).unwrap();
    let train: Vec<Vec<f64>> = ds.indices(Split::Train).iter().map(|&i| ds.normalized(i)).collect();
    let mut rng = Rng::new(5);
    let mut store = ParamStore::<f32>::new();
    let vae = PhenoVae::new(PhenoVaeConfig::default(), &mut store, &mut rng).unwrap();
    let mut opt = new_optimizer(&store, 2e-3);
    let mut losses = Vec::new();
    for _ in 0..150 {
        losses.push(train_epoch(&vae, &mut store, &mut opt, &train, 32, &mut rng).unwrap());
    }
    assert!(losses[49] < losses[0], "{} vs {}", losses[49], losses[0]);

    let recon: f64 = train
        .iter()
        .map(|x| {
            let mu = vae.encode(&store, x).unwrap().mu;
            let y = vae.decode(&store, &mu).unwrap();
            x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64
        })
        .sum::<f64>()
        / train.len() as f64;
    assert!(recon < 0.1, "recon mse {recon}");

    let samples = sample_phenotypes(&vae, &store, &ds.norm, 400, &Rng::new(9)).unwrap();
    assert_eq!(samples.len(), 400);
    assert!(samples.iter().all(|s| s[EF] > 0.0 && s[EF] < 1.0));
    let sampled: Vec<f64> = samples.iter().map(|s| s[EF]).collect();
    let real: Vec<f64> = ds.indices(Split::Train).iter().map(|&i| ds.phenotypes[i][EF]).collect();
    let w = wasserstein1(&sampled, &real);
    assert!(w < 0.1, "W1 {w}");
}
