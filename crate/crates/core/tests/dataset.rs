use cpgg_core::dataset::{balanced_subset, build_dataset, Dataset, Split};
use cpgg_core::numerics::Rng;
use cpgg_core::phantom::P;

#[test]
fn build_writes_files_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_dataset(100, 7, dir.path(), 8, 32, 32).unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 80);
    assert_eq!(ds.indices(Split::Val).len(), 10);
    assert_eq!(ds.indices(Split::Test).len(), 10);
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.cines, ds.cines);
    assert_eq!(back.phenotypes, ds.phenotypes);
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.norm, ds.norm);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(30, 3, a.path(), 8, 32, 32).unwrap();
    build_dataset(30, 3, b.path(), 8, 32, 32).unwrap();
    for f in ["cines.cpgc", "phenotypes.csv", "manifest.csv", "norm.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn splits_disjoint_and_exhaustive() {
    let ds = Dataset::generate(57, 11, 8, 16, 16).unwrap();
    let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| ds.indices(s)).collect();
    all.sort_unstable();
    assert_eq!(all, (0..57).collect::<Vec<_>>());
}

#[test]
fn train_split_normalizes_to_zero_mean_unit_std() {
    let ds = Dataset::generate(120, 5, 8, 32, 32).unwrap();
    let train = ds.indices(Split::Train);
    for j in 0..P {
        let z: Vec<f64> = train.iter().map(|&i| ds.normalized(i)[j]).collect();
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let s = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "dim {j}: {m} {s}");
    }
}

#[test]
fn classification_subset_is_balanced() {
    let ds = Dataset::generate(200, 2, 8, 32, 32).unwrap();
    let labels = ds.labels();
    assert!(labels.iter().any(|&l| l == 1) && labels.iter().any(|&l| l == 0));
    let s = balanced_subset(&(0..200).collect::<Vec<_>>(), &labels, &mut Rng::new(1));
    let pos = s.iter().filter(|&&i| labels[i] == 1).count();
    assert_eq!(2 * pos, s.len());
}
