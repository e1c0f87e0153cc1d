use cpgg_core::dataset::{Dataset, Split};
use cpgg_core::downstream::*;
use cpgg_core::metrics::{auc, r2};
use cpgg_core::numerics::{Graph, ParamStore, Rng, Tensor};
use cpgg_core::phantom::Cine;
use cpgg_core::testing::check_params;
use proptest::prelude::*;

fn tiny_mae() -> MaeConfig {
    MaeConfig { frames: 2, size: 8, patch: 4, width: 8, heads: 2, depth: 1, mlp_ratio: 2, dec_width: 4, dec_depth: 1, mask_ratio: 0.5 }
}

#[test]
fn desk_patch_counts() {
    let cfg = MaeConfig::default();
    assert_eq!((cfg.n_patches(), cfg.n_masked(), cfg.patch_dim()), (16, 12, 512));
    assert!(MaeConfig { patch: 6, ..cfg.clone() }.validate().is_err());
    assert!(MaeConfig { mask_ratio: 1.0, ..cfg }.validate().is_err());
}

#[test]
fn frames_become_patch_channels() {
    let (t, s) = (8, 32);
    let data: Vec<f32> = (0..t * s * s).map(|i| i as f32).collect();
    let c = Cine::new(t, s, s, data).unwrap();
    let p = patchify_frames(&c, &MaeConfig::default()).unwrap();
    assert_eq!(p.len(), 16 * 512);
    // Patch 5 is (row 1, col 1); element (t=3, dy=2, dx=7) sits at frame 3, pixel (10, 15).
    assert_eq!(p[5 * 512 + 3 * 64 + 2 * 8 + 7], (3 * 1024 + 10 * 32 + 15) as f64);
    let wrong = Cine::zeros(4, 32, 32);
    assert!(patchify_frames(&wrong, &MaeConfig::default()).is_err());
}

#[test]
fn unmasked_patch_targets_receive_no_gradient() {
    let cfg = tiny_mae();
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f64>::new();
    let mae = Mae::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let x: Vec<f64> = (0..cfg.n_patches() * cfg.patch_dim()).map(|_| rng.uniform()).collect();
    let mask = vec![true, false, false, true];
    let mut g = Graph::with_params(&store);
    let inputs = g.constant_f64([4, cfg.patch_dim()], &x).unwrap();
    let targets = g.input(&Tensor::from_f64([4, cfg.patch_dim()], &x).unwrap().with_grad());
    let l = mae.loss_graph(&mut g, inputs, targets, &mask).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(targets).unwrap();
    let d = cfg.patch_dim();
    for (i, &m) in mask.iter().enumerate() {
        let row = &grad[i * d..(i + 1) * d];
        if m {
            assert!(row.iter().any(|&v| v != 0.0));
        } else {
            assert!(row.iter().all(|&v| v == 0.0), "patch {i}");
        }
    }
}

#[test]
fn mae_loss_gradients_match_finite_differences() {
    let cfg = tiny_mae();
    let mut rng = Rng::new(2);
    let mut store = ParamStore::<f64>::new();
    let mae = Mae::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let x: Vec<f64> = (0..cfg.n_patches() * cfg.patch_dim()).map(|_| rng.uniform()).collect();
    let mask = vec![false, true, true, false];
    let err = check_params(
        &store,
        |g| {
            let v = g.constant_f64([4, cfg.patch_dim()], &x)?;
            mae.loss_graph(g, v, v, &mask)
        },
        1e-5,
        4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn pretraining_cuts_masked_error_fivefold() {
    let ds = Dataset::generate(200, 31, 8, 32, 32).unwrap();
    let cfg = MaeConfig::default();
    let train: Vec<Vec<f64>> =
        ds.indices(Split::Train).iter().map(|&i| patchify_frames(&ds.cines[i], &cfg).unwrap()).collect();
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(3);
    let mae = Mae::new(cfg, &mut store, &mut rng).unwrap();
    let before = masked_mse(&mae, &store, &train, 4).unwrap();
    let tc = TrainConfig { epochs: 100, batch: 16, lr: 1e-3 };
    let hist = mae_pretrain(&mae, &mut store, &train, &tc, &mut rng).unwrap();
    assert_eq!(hist.len(), 100);
    let after = masked_mse(&mae, &store, &train, 4).unwrap();
    assert!(after * 5.0 <= before, "masked mse {before} → {after}");
}

#[test]
fn folds_are_stratified_and_deterministic() {
    let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
    let f = assign_folds(&labels, 5, 9).unwrap();
    assert_eq!(f, assign_folds(&labels, 5, 9).unwrap());
    for k in 0..5 {
        let members: Vec<usize> = (0..40).filter(|&i| f[i] == k).collect();
        assert!(members.iter().any(|&i| labels[i] == 1) && members.iter().any(|&i| labels[i] == 0));
    }
    assert!(assign_folds(&[1, 1, 1, 0, 0, 0, 0, 0], 5, 1).is_err());
}

fn sweep_fixture() -> (Dataset, Vec<(Cine, Vec<f64>)>, DownstreamConfig) {
    let ds = Dataset::generate(40, 5, 8, 32, 32).unwrap();
    // Stand-in synthetic pool: freshly generated phantoms with their true phenotypes.
    let extra = Dataset::generate(40, 6, 8, 32, 32).unwrap();
    let syn = extra.cines.iter().zip(&extra.phenotypes).map(|(c, p)| (c.clone(), p.to_vec())).collect();
    let cfg = DownstreamConfig {
        mae: MaeConfig { width: 16, heads: 2, depth: 1, dec_width: 8, ..MaeConfig::default() },
        pretrain: TrainConfig { epochs: 2, batch: 16, lr: 1e-3 },
        finetune: TrainConfig { epochs: 2, batch: 16, lr: 1e-3 },
        folds: 5,
    };
    (ds, syn, cfg)
}

#[test]
fn sweep_rows_and_real_only_baseline() {
    let (ds, syn, cfg) = sweep_fixture();
    let rows = mixing_sweep::<f32>(&ds, &syn, &[0, 1], true, 11, &cfg).unwrap();
    let count = |task: &str, rho: usize, star: bool| {
        rows.iter().filter(|r| r.task == task && r.rho == rho && r.mix_star == star).count()
    };
    assert_eq!(count("classify", 0, false), 5 * 2);
    assert_eq!(count("classify", 1, false), 5 * 2);
    assert_eq!(count("regress", 1, true), count("regress", 1, false));
    assert_eq!(count("regress", 0, true), 0);
    for r in &rows {
        if r.metric == "acc" || r.metric == "auc" {
            assert!((0.0..=1.0).contains(&r.value));
        }
        if r.metric.starts_with("r2") || r.metric == "mean_r2" {
            assert!(r.value <= 1.0);
        }
    }
    // The ρ = 0 rows do not depend on which other ratios are swept.
    let alone = mixing_sweep::<f32>(&ds, &syn, &[0], true, 11, &cfg).unwrap();
    let zero: Vec<&ReportRow> = rows.iter().filter(|r| r.rho == 0).collect();
    assert_eq!(zero, alone.iter().collect::<Vec<_>>());

    let mut buf = Vec::new();
    write_report_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("task,rho,mix_star,fold,metric,value\n"));
    assert_eq!(text.lines().count(), rows.len() + 1);
    let table = summary_table(&rows);
    assert!(table.contains("MAE(real)") && table.contains("mix 100%*"));

    assert!(mixing_sweep::<f32>(&ds, &syn, &[2], false, 11, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_are_disjoint_and_exhaustive(n in 10usize..200, seed in 0u64..1000, p in 0.3..0.7f64) {
        let mut rng = Rng::new(seed);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(p))).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos >= 5 && n - pos >= 5);
        let f = assign_folds(&labels, 5, seed).unwrap();
        prop_assert!(f.iter().all(|&k| k < 5));
        let sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 2);
    }

    #[test]
    fn auc_equals_pair_counting(scores in prop::collection::vec(0u8..6, 4..60), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
        let mut l: Vec<u8> = (0..s.len()).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        l[0] = 0;
        l[1] = 1;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert_eq!(auc(&s, &l).unwrap(), num / den);
    }

    #[test]
    fn train_mean_predictor_has_nonnegative_r2(y in prop::collection::vec(-10.0..10.0f64, 2..50)) {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        if let Some(v) = r2(&vec![m; y.len()], &y) {
            prop_assert!(v >= -1e-12 && v <= 1e-12);
        }
    }
}
