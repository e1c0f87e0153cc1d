//! One function per subcommand.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use cpgg_core::checkpoint::{Checkpoint, NamedTensor};
use cpgg_core::cine_vae::{self, latent_features, CineVae, LatentGrid, LatentStats};
use cpgg_core::config::RunConfig;
use cpgg_core::dataset::{self, Dataset, Split, CINES_FILE};
use cpgg_core::downstream::{self, mixing_sweep, ReportRow};
use cpgg_core::export::export_cine;
use cpgg_core::mar::{self, patchify, Mar, TokenSequence};
use cpgg_core::metrics::{bucket_means, frechet_distance, pearson, wasserstein1};
use cpgg_core::numerics::{AdamW, AdamWConfig, ParamStore, Rng};
use cpgg_core::phantom::{measure_phenotypes, Cine, EF, P, PHENOTYPE_NAMES};
use cpgg_core::pheno_vae::{self, PhenoVae};
use cpgg_core::sampler::{bench_decode, generate_cines, generate_one, write_bench_csv, GenerationRequest, Generated};
use cpgg_core::Error;
use rayon::prelude::*;

use crate::artifacts::{self as art, Loaded};
use crate::{CliError, CliResult, Command, TrainArgs};

const MAX_RHO: usize = 5;
const NOISE_KEY: u64 = 11;
const HALVES_KEY: u64 = 12;
const SYNTH_KEY: u64 = 13;

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { n, seed, out, common } => gen_data(n, seed, &out, &common.resolve()?),
        Command::TrainPhenoVae(a) => train_pheno_vae(&a),
        Command::TrainCineVae(a) => train_cine_vae(&a),
        Command::TrainMar(a) => train_mar(&a),
        Command::Sample { count, cfg, seed, steps, pheno_file, export, run, out, common } => {
            let rc = common.resolve()?;
            let opts = SampleOpts {
                count,
                cfg: cfg.map_or_else(|| rc.get("sampler.cfg"), Ok)?,
                seed: seed.map_or_else(|| rc.get("sampler.seed"), Ok)?,
                steps: steps.map_or_else(|| rc.get("sampler.steps"), Ok)?,
                pheno_file,
                export,
            };
            sample(&opts, &run, &out, &rc)
        }
        Command::EvalGen { n, cfg, seed, run, data, out, common } => {
            let rc = common.resolve()?;
            let cfg = cfg.map_or_else(|| rc.get("sampler.cfg"), Ok)?;
            let seed = seed.map_or_else(|| rc.get("sampler.seed"), Ok)?;
            eval_gen(n, cfg, seed, &run, &data, &out, &rc)
        }
        Command::Downstream { rho_list, mix_star, seeds, run, data, out, common } => {
            let rc = common.resolve()?;
            let seeds = match seeds {
                Some(s) => s,
                None => vec![rc.get("downstream.seed")?],
            };
            downstream_cmd(&rho_list, mix_star, &seeds, &run, &data, &out, &rc)
        }
        Command::Bench { k_list, cfg, reps, run, out, common } => {
            let rc = common.resolve()?;
            let cfg = cfg.map_or_else(|| rc.get("sampler.cfg"), Ok)?;
            bench(&k_list, cfg, reps, &run, &out, &rc)
        }
    }
}

fn gen_data(n: Option<usize>, seed: Option<u64>, out: &Path, cfg: &RunConfig) -> CliResult<()> {
    art::log_inputs("gen-data", cfg, &[])?;
    let n = n.map_or_else(|| cfg.get("data.n"), Ok)?;
    let seed = seed.map_or_else(|| cfg.get("data.seed"), Ok)?;
    let (t, s) = (cfg.get("data.frames")?, cfg.get("data.size")?);
    let ds = dataset::build_dataset(n, seed, out, t, s, s)?;
    let count = |sp| ds.indices(sp).len();
    log::info!(
        "wrote {} cines to {} (train {}, val {}, test {})",
        ds.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    if !dir.join(CINES_FILE).is_file() {
        return Err(Error::Missing(format!("dataset {} not found; run gen-data first", dir.display())).into());
    }
    Ok(Dataset::load(dir)?)
}

/// Trainer state carried between epochs and across `--resume`.
struct Progress {
    epoch: usize,
    rng: Rng,
    losses: Vec<Vec<f64>>,
}

/// Restores parameters, optimizer and RNG from `ckpt` when resuming, or
/// starts fresh at epoch 0.
fn start(
    args: &TrainArgs,
    ckpt: &Path,
    loss_csv: &Path,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    fresh: Rng,
) -> CliResult<Progress> {
    if !args.resume {
        return Ok(Progress { epoch: 0, rng: fresh, losses: Vec::new() });
    }
    art::require(ckpt, "resume")?;
    let ck = Checkpoint::load(ckpt)?;
    ck.restore_params(store)?;
    ck.restore_optimizer(store, opt)?;
    let epoch = ck.meta_parse("epoch")?.unwrap_or(0);
    let rng = ck.rng()?.ok_or_else(|| Error::Format("checkpoint lacks RNG state".into()))?;
    let mut losses = if loss_csv.is_file() { art::read_loss_csv(loss_csv)? } else { Vec::new() };
    losses.truncate(epoch);
    log::info!("resuming {} at epoch {epoch}, step {}", ckpt.display(), opt.step);
    Ok(Progress { epoch, rng, losses })
}

fn save(
    path: &Path,
    kind: &str,
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    opt: &AdamW<f32>,
    p: &Progress,
    extra: &[(&str, String)],
) -> CliResult<()> {
    let mut ck = Checkpoint::from_store(store, Some(opt));
    ck.meta.insert("kind".into(), kind.into());
    ck.meta.insert("config".into(), cfg.dump());
    ck.meta.insert("epoch".into(), p.epoch.to_string());
    ck.set_rng(&p.rng);
    for (k, v) in extra {
        ck.meta.insert(k.to_string(), v.clone());
    }
    ck.save(path)?;
    Ok(())
}

fn adamw(store: &ParamStore<f32>, lr: f64) -> AdamW<f32> {
    AdamW::new(store, AdamWConfig { lr, ..Default::default() })
}

fn train_pheno_vae(args: &TrainArgs) -> CliResult<()> {
    let cfg = args.common.resolve()?;
    art::log_inputs("train-pheno-vae", &cfg, &[&args.data])?;
    let ds = load_data(&args.data)?;
    let (model, train) = cfg.pheno_vae()?;
    let seed: u64 = cfg.get("pheno_vae.seed")?;
    fs::create_dir_all(&args.out)?;
    let mut store = ParamStore::new();
    let vae = PhenoVae::new(model, &mut store, &mut Rng::stream(seed, &[0]))?;
    let mut opt = pheno_vae::new_optimizer(&store, train.lr);
    let (ckpt, loss_csv) = (args.out.join(art::PHENO_VAE), args.out.join("pheno_vae_loss.csv"));
    let mut p = start(args, &ckpt, &loss_csv, &mut store, &mut opt, Rng::stream(seed, &[1]))?;
    let rows: Vec<Vec<f64>> = ds.indices(Split::Train).into_iter().map(|i| ds.normalized(i)).collect();
    let extra = [("norm.mean", art::encode_f64s(&ds.norm.mean)), ("norm.std", art::encode_f64s(&ds.norm.std))];
    while p.epoch < train.epochs {
        let loss = pheno_vae::train_epoch(&vae, &mut store, &mut opt, &rows, train.batch, &mut p.rng)?;
        p.epoch += 1;
        p.losses.push(vec![loss]);
        if p.epoch % 20 == 0 || p.epoch == train.epochs {
            log::info!("pheno-vae epoch {}/{}: loss {loss:.5}", p.epoch, train.epochs);
        }
    }
    save(&ckpt, "pheno_vae", &cfg, &store, &opt, &p, &extra)?;
    art::write_loss_csv(&loss_csv, &["epoch", "train_loss"], &p.losses)?;
    Ok(())
}

fn train_cine_vae(args: &TrainArgs) -> CliResult<()> {
    let cfg = args.common.resolve()?;
    art::log_inputs("train-cine-vae", &cfg, &[&args.data])?;
    let ds = load_data(&args.data)?;
    let model = cfg.cine_vae()?;
    let (epochs, batch): (usize, usize) = (cfg.get("cine_vae.epochs")?, cfg.get("cine_vae.batch")?);
    let seed: u64 = cfg.get("cine_vae.seed")?;
    fs::create_dir_all(&args.out)?;
    let mut store = ParamStore::new();
    let vae = CineVae::new(model, &mut store, &mut Rng::stream(seed, &[0]))?;
    let mut opt = adamw(&store, cfg.get("cine_vae.lr")?);
    let (ckpt, loss_csv) = (args.out.join(art::CINE_VAE), args.out.join("cine_vae_loss.csv"));
    let mut p = start(args, &ckpt, &loss_csv, &mut store, &mut opt, Rng::stream(seed, &[1]))?;
    let train: Vec<&Cine> = ds.indices(Split::Train).into_iter().map(|i| &ds.cines[i]).collect();
    let val: Vec<&Cine> = ds.indices(Split::Val).into_iter().map(|i| &ds.cines[i]).collect();
    while p.epoch < epochs {
        let loss = cine_vae::train_epoch(&vae, &mut store, &mut opt, &train, batch, &mut p.rng)?;
        let val_mse = vae.recon_mse(&store, &val)?;
        p.epoch += 1;
        p.losses.push(vec![loss, val_mse]);
        log::info!("cine-vae epoch {}/{epochs}: loss {loss:.5}, val mse {val_mse:.5}", p.epoch);
        save(&ckpt, "cine_vae", &cfg, &store, &opt, &p, &[])?;
        art::write_loss_csv(&loss_csv, &["epoch", "train_loss", "val_mse"], &p.losses)?;
    }
    if epochs == 0 || p.epoch > epochs {
        save(&ckpt, "cine_vae", &cfg, &store, &opt, &p, &[])?;
        art::write_loss_csv(&loss_csv, &["epoch", "train_loss", "val_mse"], &p.losses)?;
    }
    Ok(())
}

/// Encoder means of every cine, cached next to the cine VAE checkpoint and
/// recomputed whenever the checkpoint or the cines change.
fn cached_latents(run: &Path, data: &Path, ds: &Dataset) -> CliResult<Vec<LatentGrid>> {
    let path = run.join(art::LATENTS);
    let vae_hash = art::file_hash(&run.join(art::CINE_VAE))?;
    let data_hash = art::file_hash(&data.join(CINES_FILE))?;
    if path.is_file() {
        let ck = Checkpoint::load(&path)?;
        if ck.meta.get("cine_vae.hash") == Some(&vae_hash) && ck.meta.get("cines.hash") == Some(&data_hash) {
            log::info!("using cached latents {}", path.display());
            return ck
                .tensors
                .iter()
                .map(|t| {
                    let dims: [usize; 4] = t.dims.as_slice().try_into().map_err(|_| Error::Format("latent rank".into()))?;
                    Ok(LatentGrid::new(dims, t.data.iter().map(|&v| f64::from(v)).collect())?)
                })
                .collect();
        }
        log::info!("latent cache is stale, re-encoding");
    }
    let loaded = art::load_cine_vae(run)?;
    let grids: Vec<LatentGrid> = ds
        .cines
        .par_iter()
        .map(|c| loaded.vae.encode(&loaded.store, c).map(|(mu, _)| mu))
        .collect::<cpgg_core::Result<_>>()?;
    let mut ck = Checkpoint::default();
    for (i, g) in grids.iter().enumerate() {
        ck.tensors.push(NamedTensor {
            name: format!("mu.{i}"),
            dims: g.dims.to_vec(),
            data: g.data.iter().map(|&v| v as f32).collect(),
        });
    }
    ck.meta.insert("cine_vae.hash".into(), vae_hash);
    ck.meta.insert("cines.hash".into(), data_hash);
    ck.save(&path)?;
    // Reload through f32 so a fresh encode and a cache hit train on identical values.
    Ok(grids.into_iter().map(|g| LatentGrid { dims: g.dims, data: g.data.iter().map(|&v| f64::from(v as f32)).collect() }).collect())
}

fn train_mar(args: &TrainArgs) -> CliResult<()> {
    let cfg = args.common.resolve()?;
    art::require(&args.out.join(art::CINE_VAE), "cine VAE")?;
    art::log_inputs("train-mar", &cfg, &[&args.data, &args.out.join(art::CINE_VAE)])?;
    let ds = load_data(&args.data)?;
    let latents = cached_latents(&args.out, &args.data, &ds)?;
    let train_idx = ds.indices(Split::Train);
    let train_grids: Vec<LatentGrid> = train_idx.iter().map(|&i| latents[i].clone()).collect();
    let stats = LatentStats::fit(&train_grids)?;
    let mcfg = cfg.mar(latents[0].dims, P)?;
    let seqs: Vec<TokenSequence> =
        train_grids.iter().map(|g| patchify(&stats.standardize(g), mcfg.patch)).collect::<cpgg_core::Result<_>>()?;
    let conds: Vec<Vec<f64>> = train_idx.iter().map(|&i| ds.normalized(i)).collect();

    let (epochs, batch): (usize, usize) = (cfg.get("mar.epochs")?, cfg.get("mar.batch")?);
    let seed: u64 = cfg.get("mar.seed")?;
    let mut store = ParamStore::new();
    let model = Mar::new(mcfg, &mut store, &mut Rng::stream(seed, &[0]))?;
    let mut opt = adamw(&store, cfg.get("mar.lr")?);
    let (ckpt, loss_csv) = (args.out.join(art::MAR), args.out.join("mar_loss.csv"));
    let mut p = start(args, &ckpt, &loss_csv, &mut store, &mut opt, Rng::stream(seed, &[1]))?;
    let extra = [
        ("cond_dim", P.to_string()),
        ("latent.mean", art::encode_f64s(&stats.mean)),
        ("latent.std", art::encode_f64s(&stats.std)),
    ];
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    while p.epoch < epochs {
        p.rng.shuffle(&mut order);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(batch.max(1)) {
            let b: Vec<(&TokenSequence, &[f64])> = chunk.iter().map(|&i| (&seqs[i], conds[i].as_slice())).collect();
            total += mar::train_step(&model, &mut store, &mut opt, &b, &mut p.rng)?;
            steps += 1;
        }
        let loss = total / steps.max(1) as f64;
        p.epoch += 1;
        p.losses.push(vec![loss]);
        if p.epoch % 5 == 0 || p.epoch == epochs {
            log::info!("mar epoch {}/{epochs}: loss {loss:.5}", p.epoch);
            save(&ckpt, "mar", &cfg, &store, &opt, &p, &extra)?;
            art::write_loss_csv(&loss_csv, &["epoch", "train_loss"], &p.losses)?;
        }
    }
    save(&ckpt, "mar", &cfg, &store, &opt, &p, &extra)?;
    art::write_loss_csv(&loss_csv, &["epoch", "train_loss"], &p.losses)?;
    Ok(())
}

struct SampleOpts {
    count: usize,
    cfg: f64,
    seed: u64,
    steps: usize,
    pheno_file: Option<std::path::PathBuf>,
    export: bool,
}

fn as_row(v: &[f64]) -> CliResult<[f64; P]> {
    v.try_into().map_err(|_| Error::Format(format!("{} phenotypes, expected {P}", v.len())).into())
}

fn sample(o: &SampleOpts, run: &Path, out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let ckpts = Loaded::checkpoint_paths(run);
    for (p, what) in ckpts.iter().zip(["phenotype VAE", "cine VAE", "MAR"]) {
        art::require(p, what)?;
    }
    let mut inputs: Vec<&Path> = ckpts.iter().map(|p| p.as_path()).collect();
    if let Some(f) = &o.pheno_file {
        inputs.push(f);
    }
    art::log_inputs("sample", cfg, &inputs)?;
    let loaded = Loaded::load(run)?;
    let m = loaded.models();
    let generated: Vec<Generated> = match &o.pheno_file {
        Some(f) => {
            let rows = dataset::read_phenotypes(f)?;
            if rows.len() < o.count {
                return Err(CliError::Usage(format!("{} has {} rows, --count is {}", f.display(), rows.len(), o.count)));
            }
            (0..o.count)
                .into_par_iter()
                .map(|i| generate_one(&m, &rows[i], o.cfg, o.steps, o.seed.wrapping_add(i as u64)))
                .collect::<cpgg_core::Result<_>>()?
        }
        None => generate_cines(
            &m,
            &GenerationRequest { condition: None, cfg_scale: o.cfg, seed: o.seed, count: o.count, steps: o.steps },
        )?,
    };
    fs::create_dir_all(out)?;
    let cines: Vec<Cine> = generated.iter().map(|g| g.cine.clone()).collect();
    dataset::write_cines(&out.join(CINES_FILE), &cines)?;
    let rows = generated.iter().map(|g| as_row(&g.phenotypes)).collect::<CliResult<Vec<_>>>()?;
    dataset::write_phenotypes(&out.join("phenotypes.csv"), &rows)?;
    if o.export {
        for (i, c) in cines.iter().enumerate() {
            export_cine(out, &format!("sample_{i:03}"), c)?;
        }
    }
    log::info!("wrote {} cines to {}", cines.len(), out.display());
    Ok(())
}

fn features(vae: &art::LoadedCineVae, cines: &[&Cine]) -> CliResult<Vec<Vec<f64>>> {
    Ok(cines
        .par_iter()
        .map(|c| vae.vae.encode(&vae.store, c).map(|(mu, _)| latent_features(&mu)))
        .collect::<cpgg_core::Result<_>>()?)
}

fn eval_gen(n: usize, cfg_scale: f64, seed: u64, run: &Path, data: &Path, out: &Path, cfg: &RunConfig) -> CliResult<()> {
    if n < 2 {
        return Err(CliError::Usage(format!("--n must be at least 2, got {n}")));
    }
    if n < 50 {
        log::warn!("--n {n} < 50: Fréchet moments will be unstable");
    }
    let ckpts = Loaded::checkpoint_paths(run);
    for (p, what) in ckpts.iter().zip(["phenotype VAE", "cine VAE", "MAR"]) {
        art::require(p, what)?;
    }
    let mut inputs: Vec<&Path> = ckpts.iter().map(|p| p.as_path()).collect();
    inputs.push(data);
    art::log_inputs("eval-gen", cfg, &inputs)?;
    let ds = load_data(data)?;
    let loaded = Loaded::load(run)?;
    let steps: usize = cfg.get("sampler.steps")?;
    let generated = generate_cines(
        &loaded.models(),
        &GenerationRequest { condition: None, cfg_scale, seed, count: n, steps },
    )?;

    let mut real_idx = ds.indices(Split::Val);
    real_idx.extend(ds.indices(Split::Test));
    let real: Vec<&Cine> = real_idx.iter().map(|&i| &ds.cines[i]).collect();
    let gen: Vec<&Cine> = generated.iter().map(|g| &g.cine).collect();
    let mut noise_rng = Rng::stream(seed, &[NOISE_KEY]);
    let noise: Vec<Cine> = (0..n)
        .map(|_| {
            let c = &ds.cines[0];
            Cine::new(c.t, c.h, c.w, (0..c.data.len()).map(|_| noise_rng.uniform() as f32).collect())
        })
        .collect::<cpgg_core::Result<_>>()?;
    let noise: Vec<&Cine> = noise.iter().collect();

    let f_real = features(&loaded.cine, &real)?;
    let f_gen = features(&loaded.cine, &gen)?;
    let f_noise = features(&loaded.cine, &noise)?;
    let mut halves: Vec<usize> = (0..ds.len()).collect();
    Rng::stream(seed, &[HALVES_KEY]).shuffle(&mut halves);
    let all: Vec<&Cine> = halves.iter().map(|&i| &ds.cines[i]).collect();
    let f_all = features(&loaded.cine, &all)?;
    let (a, b) = f_all.split_at(f_all.len() / 2);

    let mut rows: Vec<(String, f64)> = vec![
        ("n_generated".into(), n as f64),
        ("n_real".into(), real.len() as f64),
        ("cfg".into(), cfg_scale),
        ("fd_gen_real".into(), frechet_distance(&f_gen, &f_real)?),
        ("fd_noise_real".into(), frechet_distance(&f_noise, &f_real)?),
        ("fd_real_halves".into(), frechet_distance(a, b)?),
    ];

    let measured: Vec<Option<[f64; P]>> = gen.par_iter().map(|c| measure_phenotypes(c)).collect();
    let valid: Vec<usize> = (0..n).filter(|&i| measured[i].is_some()).collect();
    rows.push(("valid_fraction".into(), valid.len() as f64 / n as f64));
    for (j, name) in PHENOTYPE_NAMES.iter().enumerate() {
        let g: Vec<f64> = valid.iter().map(|&i| measured[i].unwrap()[j]).collect();
        let r: Vec<f64> = real_idx.iter().map(|&i| ds.phenotypes[i][j]).collect();
        let w = if g.is_empty() { f64::NAN } else { wasserstein1(&g, &r) };
        rows.push((format!("w1_{name}"), w));
    }
    let cond_ef: Vec<f64> = valid.iter().map(|&i| generated[i].phenotypes[EF]).collect();
    let meas_ef: Vec<f64> = valid.iter().map(|&i| measured[i].unwrap()[EF]).collect();
    let r = pearson(&cond_ef, &meas_ef).unwrap_or(f64::NAN);
    rows.push(("pearson_ef".into(), r));
    let buckets = bucket_means(&cond_ef, &meas_ef, 3);
    for (b, v) in buckets.iter().enumerate() {
        rows.push((format!("ef_bucket_{b}"), *v));
    }
    let monotone = buckets.windows(2).all(|w| w[0] < w[1]);
    rows.push(("ef_buckets_monotone".into(), if monotone { 1.0 } else { 0.0 }));

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in &rows {
        log::info!("{k} = {v:.6}");
        w.write_record([k.as_str(), &format!("{v:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

fn downstream_cmd(
    rhos: &[usize],
    mix_star: bool,
    seeds: &[u64],
    run: &Path,
    data: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> CliResult<()> {
    if rhos.is_empty() {
        return Err(CliError::Usage("--rho-list is empty".into()));
    }
    if let Some(r) = rhos.iter().find(|&&r| r > MAX_RHO) {
        return Err(CliError::Usage(format!("ρ must be in 0..={MAX_RHO}, got {r}")));
    }
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let dcfg = cfg.downstream()?;
    let ds = load_data(data)?;
    let need = rhos.iter().max().copied().unwrap_or(0) * ds.indices(Split::Train).len();
    let ckpts = Loaded::checkpoint_paths(run);
    let mut inputs: Vec<&Path> = vec![data];
    if need > 0 {
        for (p, what) in ckpts.iter().zip(["phenotype VAE", "cine VAE", "MAR"]) {
            art::require(p, what)?;
        }
        inputs.extend(ckpts.iter().map(|p| p.as_path()));
    }
    art::log_inputs("downstream", cfg, &inputs)?;
    let loaded = if need > 0 { Some(Loaded::load(run)?) } else { None };
    let (cfg_scale, steps): (f64, usize) = (cfg.get("sampler.cfg")?, cfg.get("sampler.steps")?);

    let mut rows: Vec<ReportRow> = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let synthetic: Vec<(Cine, Vec<f64>)> = match &loaded {
            Some(l) if need > 0 => {
                log::info!("seed {seed}: generating {need} synthetic cines");
                let syn_seed = Rng::stream(seed, &[SYNTH_KEY]).next_seed();
                generate_cines(
                    &l.models(),
                    &GenerationRequest { condition: None, cfg_scale, seed: syn_seed, count: need, steps },
                )?
                .into_iter()
                .map(|g| (g.cine, g.phenotypes))
                .collect()
            }
            _ => Vec::new(),
        };
        let mut r = mixing_sweep::<f32>(&ds, &synthetic, rhos, mix_star, seed, &dcfg)?;
        for row in &mut r {
            row.fold += si * dcfg.folds;
        }
        rows.extend(r);
    }
    fs::create_dir_all(out)?;
    downstream::write_report_csv(BufWriter::new(File::create(out.join("report.csv"))?), &rows)?;
    let table = downstream::summary_table(&rows);
    fs::write(out.join("summary.txt"), &table)?;
    log::info!("summary\n{table}");
    Ok(())
}

fn bench(k_list: &[String], cfg_scale: f64, reps: usize, run: &Path, out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let ckpts = Loaded::checkpoint_paths(run);
    for (p, what) in ckpts.iter().zip(["phenotype VAE", "cine VAE", "MAR"]) {
        art::require(p, what)?;
    }
    art::log_inputs("bench", cfg, &ckpts.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
    let loaded = Loaded::load(run)?;
    let n = loaded.mar.mar.cfg.n_tokens();
    let ks = k_list
        .iter()
        .map(|k| match k.trim() {
            "N" | "n" => Ok(n),
            s => s.parse::<usize>().map_err(|_| CliError::Usage(format!("--K-list item `{s}` is not an integer or N"))),
        })
        .collect::<CliResult<Vec<usize>>>()?;
    if let Some(k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(CliError::Usage(format!("K must be in 1..={n}, got {k}")));
    }
    let seed: u64 = cfg.get("sampler.seed")?;
    let rows = bench_decode(&loaded.models(), &ks, cfg_scale, reps, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_bench_csv(BufWriter::new(File::create(out)?), &rows)?;
    for r in &rows {
        log::info!("K {:>4}: {} MAR passes, {} denoiser evals, {:.1} ms/cine", r.steps, r.mar_passes, r.denoiser_evals, r.wall_ms_per_cine);
    }
    let passes = |k| rows.iter().find(|r| r.steps == k).map(|r| r.mar_passes as f64);
    if let (Some(a), Some(b)) = (passes(16), passes(n)) {
        log::info!("K=N vs K=16 MAR pass ratio {:.2} (N/16 = {:.2})", b / a, n as f64 / 16.0);
    }
    Ok(())
}
