//! Flat `key = value` run configuration with per-module defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cine_vae::CineVaeConfig;
use crate::downstream::{DownstreamConfig, MaeConfig, TrainConfig};
use crate::mar::MarConfig;
use crate::pheno_vae::{PhenoTrainConfig, PhenoVaeConfig};
use crate::{Error, Result};

/// Every recognised key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.n", "500"),
    ("data.seed", "7"),
    ("data.frames", "8"),
    ("data.size", "32"),
    ("pheno_vae.hidden", "64,32"),
    ("pheno_vae.latent", "4"),
    ("pheno_vae.beta", "1.0"),
    ("pheno_vae.epochs", "200"),
    ("pheno_vae.batch", "32"),
    ("pheno_vae.lr", "1e-3"),
    ("pheno_vae.seed", "1"),
    ("cine_vae.latent", "4"),
    ("cine_vae.widths", "8,16,32"),
    ("cine_vae.beta", "1e-4"),
    ("cine_vae.epochs", "6"),
    ("cine_vae.batch", "8"),
    ("cine_vae.lr", "2e-3"),
    ("cine_vae.seed", "2"),
    ("mar.patch_t", "2"),
    ("mar.patch_s", "2"),
    ("mar.width", "64"),
    ("mar.enc_depth", "2"),
    ("mar.dec_depth", "2"),
    ("mar.heads", "4"),
    ("mar.mlp_ratio", "2"),
    ("mar.mask_lo", "0.7"),
    ("mar.mask_hi", "1.0"),
    ("mar.p_drop", "0.1"),
    ("mar.cond_depth", "1"),
    ("mar.epochs", "60"),
    ("mar.batch", "16"),
    ("mar.lr", "8e-4"),
    ("mar.seed", "3"),
    ("diffusion.width", "128"),
    ("diffusion.blocks", "2"),
    ("diffusion.train_steps", "200"),
    ("diffusion.infer_steps", "50"),
    ("diffusion.n_rep", "1"),
    ("sampler.steps", "16"),
    ("sampler.cfg", "3.0"),
    ("sampler.seed", "100"),
    ("downstream.patch", "8"),
    ("downstream.mask_ratio", "0.75"),
    ("downstream.width", "64"),
    ("downstream.depth", "2"),
    ("downstream.heads", "4"),
    ("downstream.dec_width", "32"),
    ("downstream.dec_depth", "1"),
    ("downstream.pretrain_epochs", "100"),
    ("downstream.pretrain_batch", "32"),
    ("downstream.pretrain_lr", "5e-4"),
    ("downstream.finetune_epochs", "15"),
    ("downstream.finetune_batch", "16"),
    ("downstream.finetune_lr", "5e-4"),
    ("downstream.folds", "5"),
    ("downstream.seed", "5"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overridden by `text`: one `key = value` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or_else(|| panic!("`{key}` is not a config key"), String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| Error::Config(format!("`{key}` = `{v}`: {e}")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("`{key}` item `{s}`: {e}"))))
            .collect()
    }

    /// Resolved configuration, one sorted `key = value` line per entry.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn pheno_vae(&self) -> Result<(PhenoVaeConfig, PhenoTrainConfig)> {
        let model = PhenoVaeConfig {
            hidden: self.list("pheno_vae.hidden")?,
            latent: self.get("pheno_vae.latent")?,
            beta: self.get("pheno_vae.beta")?,
            ..PhenoVaeConfig::default()
        };
        model.validate()?;
        let train = PhenoTrainConfig {
            epochs: self.get("pheno_vae.epochs")?,
            batch: self.get("pheno_vae.batch")?,
            lr: self.get("pheno_vae.lr")?,
        };
        Ok((model, train))
    }

    pub fn cine_vae(&self) -> Result<CineVaeConfig> {
        let cfg = CineVaeConfig {
            latent: self.get("cine_vae.latent")?,
            widths: self.list("cine_vae.widths")?,
            beta: self.get("cine_vae.beta")?,
            ..CineVaeConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mar(&self, grid: [usize; 4], cond_dim: usize) -> Result<MarConfig> {
        let cfg = MarConfig {
            grid,
            patch: [self.get("mar.patch_t")?, self.get("mar.patch_s")?],
            width: self.get("mar.width")?,
            enc_depth: self.get("mar.enc_depth")?,
            dec_depth: self.get("mar.dec_depth")?,
            heads: self.get("mar.heads")?,
            mlp_ratio: self.get("mar.mlp_ratio")?,
            mask_lo: self.get("mar.mask_lo")?,
            mask_hi: self.get("mar.mask_hi")?,
            p_drop: self.get("mar.p_drop")?,
            cond_dim,
            cond_depth: self.get("mar.cond_depth")?,
            den_width: self.get("diffusion.width")?,
            den_blocks: self.get("diffusion.blocks")?,
            train_steps: self.get("diffusion.train_steps")?,
            infer_steps: self.get("diffusion.infer_steps")?,
            n_rep: self.get("diffusion.n_rep")?,
        };
        cfg.validate()?;
        cfg.denoiser().validate()?;
        Ok(cfg)
    }

    pub fn downstream(&self) -> Result<DownstreamConfig> {
        let mae = MaeConfig {
            frames: self.get("data.frames")?,
            size: self.get("data.size")?,
            patch: self.get("downstream.patch")?,
            mask_ratio: self.get("downstream.mask_ratio")?,
            width: self.get("downstream.width")?,
            depth: self.get("downstream.depth")?,
            heads: self.get("downstream.heads")?,
            mlp_ratio: 2,
            dec_width: self.get("downstream.dec_width")?,
            dec_depth: self.get("downstream.dec_depth")?,
        };
        mae.validate()?;
        Ok(DownstreamConfig {
            mae,
            pretrain: TrainConfig {
                epochs: self.get("downstream.pretrain_epochs")?,
                batch: self.get("downstream.pretrain_batch")?,
                lr: self.get("downstream.pretrain_lr")?,
            },
            finetune: TrainConfig {
                epochs: self.get("downstream.finetune_epochs")?,
                batch: self.get("downstream.finetune_batch")?,
                lr: self.get("downstream.finetune_lr")?,
            },
            folds: self.get("downstream.folds")?,
        })
    }
}
