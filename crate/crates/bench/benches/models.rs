use criterion::{criterion_group, criterion_main, Criterion};
use cpgg_bench::{phantom_cine, Desk};
use cpgg_core::mar::patchify;

fn cine_vae(c: &mut Criterion) {
    let desk = Desk::new(2);
    let cine = phantom_cine(3);
    let (mu, _) = desk.vae.encode(&desk.vae_store, &cine).unwrap();
    c.bench_function("cine_vae/encode", |b| b.iter(|| desk.vae.encode(&desk.vae_store, &cine).unwrap()));
    c.bench_function("cine_vae/decode", |b| b.iter(|| desk.vae.decode(&desk.vae_store, &mu).unwrap()));
}

fn mar_forward(c: &mut Criterion) {
    let desk = Desk::new(4);
    let cine = phantom_cine(5);
    let (mu, _) = desk.vae.encode(&desk.vae_store, &cine).unwrap();
    let mut seq = patchify(&mu, desk.mar.cfg.patch).unwrap();
    let cond = vec![0.0; desk.mar.cfg.cond_dim];
    for (name, masked) in [("all_masked", seq.len()), ("half_masked", seq.len() / 2)] {
        seq.mask = (0..seq.len()).map(|i| i < masked).collect();
        c.bench_function(&format!("mar/forward_{name}"), |b| {
            b.iter(|| desk.mar.forward(&desk.mar_store, &seq, Some(&cond)).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = cine_vae, mar_forward
}
criterion_main!(benches);
