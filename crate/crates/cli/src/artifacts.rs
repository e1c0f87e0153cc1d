//! Run-directory layout, checkpoint (de)serialization of each model and
//! content hashing of inputs.

use std::fs;
use std::path::{Path, PathBuf};

use cpgg_core::checkpoint::Checkpoint;
use cpgg_core::cine_vae::{CineVae, LatentStats};
use cpgg_core::config::RunConfig;
use cpgg_core::dataset::Normalizer;
use cpgg_core::mar::Mar;
use cpgg_core::numerics::{ParamStore, Rng};
use cpgg_core::pheno_vae::PhenoVae;
use cpgg_core::sampler::Models;
use cpgg_core::Error;
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const PHENO_VAE: &str = "pheno_vae.cpgw";
pub const CINE_VAE: &str = "cine_vae.cpgw";
pub const MAR: &str = "mar.cpgw";
pub const LATENTS: &str = "latents.cpgw";

/// Git-style blob hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(blob_hash(&fs::read(path)?))
}

/// Logs the resolved config and the hash of every input file (directories
/// are expanded one level, sorted by name).
pub fn log_inputs(command: &str, cfg: &RunConfig, inputs: &[&Path]) -> CliResult<()> {
    log::info!("{command}: resolved config\n{}", cfg.dump());
    for p in inputs {
        let mut files: Vec<PathBuf> = if p.is_dir() {
            fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect()
        } else {
            vec![p.to_path_buf()]
        };
        files.sort();
        for f in files {
            log::info!("input {} sha256-blob {}", f.display(), file_hash(&f)?);
        }
    }
    Ok(())
}

pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} checkpoint {} not found; train it first", path.display())).into())
    }
}

pub fn encode_f64s(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn decode_f64s(ck: &Checkpoint, key: &str) -> CliResult<Vec<f64>> {
    let raw = ck.meta.get(key).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))?;
    raw.split(',')
        .map(|s| s.parse().map_err(|e| Error::Format(format!("`{key}` value `{s}`: {e}")).into()))
        .collect()
}

pub fn checkpoint_config(ck: &Checkpoint) -> CliResult<RunConfig> {
    let text = ck.meta.get("config").ok_or_else(|| Error::Format("checkpoint metadata lacks `config`".into()))?;
    Ok(RunConfig::parse(text)?)
}

pub struct LoadedPheno {
    pub vae: PhenoVae,
    pub store: ParamStore<f32>,
    pub norm: Normalizer,
}

pub fn load_pheno(run: &Path) -> CliResult<LoadedPheno> {
    let path = run.join(PHENO_VAE);
    require(&path, "phenotype VAE")?;
    let ck = Checkpoint::load(&path)?;
    let (cfg, _) = checkpoint_config(&ck)?.pheno_vae()?;
    let mut store = ParamStore::new();
    let vae = PhenoVae::new(cfg, &mut store, &mut Rng::new(0))?;
    ck.restore_params(&mut store)?;
    let norm = Normalizer { mean: decode_f64s(&ck, "norm.mean")?, std: decode_f64s(&ck, "norm.std")? };
    Ok(LoadedPheno { vae, store, norm })
}

pub struct LoadedCineVae {
    pub vae: CineVae,
    pub store: ParamStore<f32>,
}

pub fn load_cine_vae(run: &Path) -> CliResult<LoadedCineVae> {
    let path = run.join(CINE_VAE);
    require(&path, "cine VAE")?;
    let ck = Checkpoint::load(&path)?;
    let cfg = checkpoint_config(&ck)?.cine_vae()?;
    let mut store = ParamStore::new();
    let vae = CineVae::new(cfg, &mut store, &mut Rng::new(0))?;
    ck.restore_params(&mut store)?;
    Ok(LoadedCineVae { vae, store })
}

pub struct LoadedMar {
    pub mar: Mar,
    pub store: ParamStore<f32>,
    pub stats: LatentStats,
    pub cfg: RunConfig,
}

/// Latent grid shape implied by a run config's data and cine VAE settings.
pub fn latent_grid(cfg: &RunConfig) -> CliResult<[usize; 4]> {
    let (t, s) = (cfg.get::<usize>("data.frames")?, cfg.get::<usize>("data.size")?);
    Ok(cfg.cine_vae()?.latent_dims(t, s, s)?)
}

pub fn load_mar(run: &Path) -> CliResult<LoadedMar> {
    let path = run.join(MAR);
    require(&path, "MAR")?;
    let ck = Checkpoint::load(&path)?;
    let cfg = checkpoint_config(&ck)?;
    let cond_dim: usize = ck.meta_parse("cond_dim")?.ok_or_else(|| Error::Format("MAR checkpoint lacks `cond_dim`".into()))?;
    let mcfg = cfg.mar(latent_grid(&cfg)?, cond_dim)?;
    let mut store = ParamStore::new();
    let mar = Mar::new(mcfg, &mut store, &mut Rng::new(0))?;
    ck.restore_params(&mut store)?;
    let stats = LatentStats { mean: decode_f64s(&ck, "latent.mean")?, std: decode_f64s(&ck, "latent.std")? };
    Ok(LoadedMar { mar, store, stats, cfg })
}

/// All three trained models of a run.
pub struct Loaded {
    pub pheno: LoadedPheno,
    pub cine: LoadedCineVae,
    pub mar: LoadedMar,
}

impl Loaded {
    pub fn load(run: &Path) -> CliResult<Self> {
        Ok(Loaded { pheno: load_pheno(run)?, cine: load_cine_vae(run)?, mar: load_mar(run)? })
    }

    pub fn models(&self) -> Models<'_, f32> {
        Models {
            pheno: &self.pheno.vae,
            pheno_store: &self.pheno.store,
            norm: &self.pheno.norm,
            vae: &self.cine.vae,
            vae_store: &self.cine.store,
            stats: &self.mar.stats,
            mar: &self.mar.mar,
            mar_store: &self.mar.store,
        }
    }

    pub fn checkpoint_paths(run: &Path) -> [PathBuf; 3] {
        [run.join(PHENO_VAE), run.join(CINE_VAE), run.join(MAR)]
    }
}

/// Writes a loss log with a header row.
pub fn write_loss_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (epoch, r) in rows.iter().enumerate() {
        let mut rec = vec![(epoch + 1).to_string()];
        rec.extend(r.iter().map(|v| format!("{v:.8}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Loss rows of a previous run, without the epoch column.
pub fn read_loss_csv(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("loss log value `{s}`: {e}")).into()))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(vals);
    }
    Ok(rows)
}
