//! Masked-autoencoder pretraining on real plus synthetic cines, then
//! fine-tuning for reduced-EF classification and phenotype regression.

use std::fmt::Write as _;
use std::io::Write;

use crate::dataset::{balanced_subset, Dataset, Normalizer, Split};
use crate::mar::mask_with_ratio;
use crate::metrics::{self, accuracy, auc, mean_std, r2};
use crate::nn::{sample_grads, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::numerics::{AdamW, AdamWConfig, Element, Graph, ParamStore, Rng, Var};
use crate::phantom::{Cine, PHENOTYPE_NAMES};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub frames: usize,
    pub size: usize,
    pub patch: usize,
    pub mask_ratio: f64,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            frames: 8,
            size: 32,
            patch: 8,
            mask_ratio: 0.75,
            width: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            dec_width: 32,
            dec_depth: 1,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.size % self.patch != 0 {
            return Err(Error::Config(format!("patch {} must divide cine size {}", self.patch, self.size)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio must be in [0, 1), got {}", self.mask_ratio)));
        }
        if self.width % self.heads != 0 || self.dec_width % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide widths", self.heads)));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.frames * self.patch * self.patch
    }

    pub fn n_masked(&self) -> usize {
        ((self.mask_ratio * self.n_patches() as f64 - 1e-9).ceil().max(0.0) as usize).min(self.n_patches())
    }
}

/// Frames-as-channels 2-D patches, raster order, each patch laid out (t, dy, dx).
pub fn patchify_frames(c: &Cine, cfg: &MaeConfig) -> Result<Vec<f64>> {
    let [_, t, h, w] = c.dims();
    if t != cfg.frames || h != cfg.size || w != cfg.size {
        return Err(Error::shape(
            "mae",
            format!("cine ({t}, {h}, {w}) but encoder expects ({}, {s}, {s})", cfg.frames, s = cfg.size),
        ));
    }
    let p = cfg.patch;
    let g = cfg.size / p;
    let mut out = Vec::with_capacity(t * h * w);
    for py in 0..g {
        for px in 0..g {
            for f in 0..t {
                let frame = c.frame(f);
                for dy in 0..p {
                    let row = (py * p + dy) * w + px * p;
                    out.extend(frame[row..row + p].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Mae {
    pub cfg: MaeConfig,
    embed: Linear,
    pos: Embedding,
    enc: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    dec_in: Linear,
    mask_emb: Embedding,
    dec_pos: Embedding,
    dec: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    out: Linear,
}

impl Mae {
    pub fn new<E: Element>(cfg: MaeConfig, store: &mut ParamStore<E>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (n, w, dw) = (cfg.n_patches(), cfg.width, cfg.dec_width);
        let embed = Linear::new(store, "mae.embed", cfg.patch_dim(), w, rng);
        let pos = Embedding::new(store, "mae.pos", n, w, rng);
        let enc = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("mae.enc.{i}"), w, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let enc_norm = LayerNorm::new(store, "mae.enc_norm", w);
        let dec_in = Linear::new(store, "mae.dec_in", w, dw, rng);
        let mask_emb = Embedding::new(store, "mae.mask", 1, dw, rng);
        let dec_pos = Embedding::new(store, "mae.dec_pos", n, dw, rng);
        let dec = (0..cfg.dec_depth)
            .map(|i| TransformerBlock::new(store, &format!("mae.dec.{i}"), dw, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let dec_norm = LayerNorm::new(store, "mae.dec_norm", dw);
        let out = Linear::new(store, "mae.out", dw, cfg.patch_dim(), rng);
        Ok(Mae { cfg, embed, pos, enc, enc_norm, dec_in, mask_emb, dec_pos, dec, dec_norm, out })
    }

    /// Encoder features (|visible|, width) for the given patch rows.
    pub fn encode_graph<E: Element>(&self, g: &mut Graph<'_, E>, patches: Var, visible: &[usize]) -> Result<Var> {
        let x = g.gather_rows(patches, visible)?;
        let x = self.embed.forward(g, x)?;
        let pe = self.pos.lookup(g, visible)?;
        let mut h = g.add(x, pe)?;
        for b in &self.enc {
            h = b.forward(g, h)?;
        }
        self.enc_norm.forward(g, h)
    }

    /// Masked-patch MSE. `inputs` feed the encoder, `targets` the loss; both (n_patches, patch_dim).
    pub fn loss_graph<E: Element>(&self, g: &mut Graph<'_, E>, inputs: Var, targets: Var, mask: &[bool]) -> Result<Var> {
        let n = self.cfg.n_patches();
        if mask.len() != n || g.dims(inputs) != [n, self.cfg.patch_dim()] {
            return Err(Error::shape("mae", format!("inputs {} with {} mask flags", g.shape(inputs), mask.len())));
        }
        let visible: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
        let masked: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if visible.is_empty() || masked.is_empty() {
            return Err(Error::invalid("mae mask must leave both visible and masked patches"));
        }
        let h = self.encode_graph(g, inputs, &visible)?;
        let h = self.dec_in.forward(g, h)?;
        let m = self.mask_emb.lookup(g, &[0])?;
        let pool = g.concat_rows(&[h, m])?;
        let mut rank = 0;
        let idx: Vec<usize> = mask
            .iter()
            .map(|&masked| {
                if masked {
                    visible.len()
                } else {
                    rank += 1;
                    rank - 1
                }
            })
            .collect();
        let seq = g.gather_rows(pool, &idx)?;
        let all: Vec<usize> = (0..n).collect();
        let pe = self.dec_pos.lookup(g, &all)?;
        let mut d = g.add(seq, pe)?;
        for b in &self.dec {
            d = b.forward(g, d)?;
        }
        let d = self.dec_norm.forward(g, d)?;
        let dm = g.gather_rows(d, &masked)?;
        let pred = self.out.forward(g, dm)?;
        let tm = g.gather_rows(targets, &masked)?;
        g.mse(pred, tm)
    }

    /// Mean-pooled encoder features over all patches, (1, width).
    pub fn pooled_graph<E: Element>(&self, g: &mut Graph<'_, E>, patches: Var) -> Result<Var> {
        let all: Vec<usize> = (0..self.cfg.n_patches()).collect();
        let h = self.encode_graph(g, patches, &all)?;
        g.mean_rows(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

fn optimizer<E: Element>(store: &ParamStore<E>, lr: f64) -> AdamW<E> {
    AdamW::new(store, AdamWConfig { lr, ..Default::default() })
}

/// Pretrains on `patches` (one flattened patch matrix per cine). Returns the
/// mean masked MSE of every epoch.
pub fn mae_pretrain<E: Element>(
    mae: &Mae,
    store: &mut ParamStore<E>,
    patches: &[Vec<f64>],
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let (n, d) = (mae.cfg.n_patches(), mae.cfg.patch_dim());
    let mut opt = optimizer(store, tc.lr);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for _ in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch.max(1)) {
            let masks: Vec<Vec<bool>> = chunk.iter().map(|_| mask_with_ratio(n, mae.cfg.mask_ratio, rng)).collect();
            let (loss, mut grads) = sample_grads(store, chunk.len(), |j, g| {
                let x = g.constant_f64([n, d], &patches[chunk[j]])?;
                mae.loss_graph(g, x, x, &masks[j])
            })?;
            grads.scale(E::of(1.0 / chunk.len() as f64));
            store.accumulate(&grads);
            opt.step(store)?;
            total += loss;
        }
        history.push(total / patches.len().max(1) as f64);
    }
    Ok(history)
}

/// Mean masked MSE with masks drawn from `seed`; no parameter updates.
pub fn masked_mse<E: Element>(mae: &Mae, store: &ParamStore<E>, patches: &[Vec<f64>], seed: u64) -> Result<f64> {
    let (n, d) = (mae.cfg.n_patches(), mae.cfg.patch_dim());
    let mut total = 0.0;
    for (i, p) in patches.iter().enumerate() {
        let mask = mask_with_ratio(n, mae.cfg.mask_ratio, &mut Rng::stream(seed, &[i as u64]));
        let mut g = Graph::with_params(store).no_grad();
        let x = g.constant_f64([n, d], p)?;
        let l = mae.loss_graph(&mut g, x, x, &mask)?;
        total += g.scalar(l).f64();
    }
    Ok(total / patches.len().max(1) as f64)
}

/// Fine-tunes the full encoder plus a linear head on (patches, target rows).
/// `classify` selects a single-logit BCE head; otherwise MSE on every target column.
fn finetune<E: Element>(
    mae: &Mae,
    pretrained: &ParamStore<E>,
    x: &[&[f64]],
    y: &[Vec<f64>],
    classify: bool,
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ParamStore<E>, Linear)> {
    let mut store = pretrained.clone();
    let outs = y.first().map_or(1, Vec::len);
    let head = Linear::new(&mut store, "head", mae.cfg.width, outs, rng);
    let mut opt = optimizer(&store, tc.lr);
    let (n, d) = (mae.cfg.n_patches(), mae.cfg.patch_dim());
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..tc.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(tc.batch.max(1)) {
            let (_, mut grads) = sample_grads(&store, chunk.len(), |j, g| {
                let i = chunk[j];
                let p = g.constant_f64([n, d], x[i])?;
                let f = mae.pooled_graph(g, p)?;
                let out = head.forward(g, f)?;
                if classify {
                    g.bce_with_logits(out, &y[i])
                } else {
                    let t = g.constant_f64([1, outs], &y[i])?;
                    g.mse(out, t)
                }
            })?;
            grads.scale(E::of(1.0 / chunk.len() as f64));
            store.accumulate(&grads);
            opt.step(&mut store)?;
        }
    }
    Ok((store, head))
}

fn predict<E: Element>(mae: &Mae, store: &ParamStore<E>, head: &Linear, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::with_params(store).no_grad();
    let p = g.constant_f64([mae.cfg.n_patches(), mae.cfg.patch_dim()], x)?;
    let f = mae.pooled_graph(&mut g, p)?;
    let out = head.forward(&mut g, f)?;
    Ok(g.value(out).iter().map(|v| v.f64()).collect())
}

/// Stratified fold assignment: each class is shuffled with `seed` and dealt
/// round-robin, so every fold holds both classes.
pub fn assign_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut folds = vec![0; labels.len()];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, fewer than {k} folds",
                members.len()
            )));
        }
        Rng::stream(seed, &[u64::from(class)]).shuffle(&mut members);
        for (r, &i) in members.iter().enumerate() {
            folds[i] = r % k;
        }
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub task: &'static str,
    pub rho: usize,
    pub mix_star: bool,
    pub fold: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamConfig {
    pub mae: MaeConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub folds: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            mae: MaeConfig::default(),
            pretrain: TrainConfig { epochs: 100, batch: 32, lr: 5e-4 },
            finetune: TrainConfig { epochs: 15, batch: 16, lr: 5e-4 },
            folds: 5,
        }
    }
}

/// 5-fold (by default) reduced-EF classification on a balanced subset of real cines.
pub fn finetune_classify<E: Element>(
    mae: &Mae,
    pretrained: &ParamStore<E>,
    patches: &[Vec<f64>],
    labels: &[u8],
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let folds = assign_folds(labels, cfg.folds, seed)?;
    let mut out = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
        let x: Vec<&[f64]> = train.iter().map(|&i| patches[i].as_slice()).collect();
        let y: Vec<Vec<f64>> = train.iter().map(|&i| vec![f64::from(labels[i])]).collect();
        let mut rng = Rng::stream(seed, &[10, f as u64]);
        let (store, head) = finetune(mae, pretrained, &x, &y, true, &cfg.finetune, &mut rng)?;
        let scores: Vec<f64> =
            test.iter().map(|&i| predict(mae, &store, &head, &patches[i]).map(|v| v[0])).collect::<Result<_>>()?;
        let probs: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let tl: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
        out.push((f, accuracy(&probs, &tl), auc(&scores, &tl)?));
    }
    Ok(out)
}

/// Per-phenotype regression outcome on the held-out real cines.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionReport {
    /// R² per phenotype; `None` when the test target has zero variance.
    pub r2: Vec<Option<f64>>,
    /// Mean absolute error in physical units.
    pub mae: Vec<f64>,
}

impl RegressionReport {
    pub fn mean_r2(&self) -> f64 {
        let v: Vec<f64> = self.r2.iter().flatten().copied().collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Regresses every phenotype at once, z-scored with `norm` (train-split stats).
#[allow(clippy::too_many_arguments)]
pub fn finetune_regress<E: Element>(
    mae: &Mae,
    pretrained: &ParamStore<E>,
    train: &[(&[f64], &[f64])],
    test: &[(&[f64], &[f64])],
    norm: &Normalizer,
    tc: &TrainConfig,
    seed: u64,
) -> Result<RegressionReport> {
    let x: Vec<&[f64]> = train.iter().map(|(p, _)| *p).collect();
    let y: Vec<Vec<f64>> = train.iter().map(|(_, t)| norm.normalize(t)).collect();
    let mut rng = Rng::stream(seed, &[20]);
    let (store, head) = finetune(mae, pretrained, &x, &y, false, tc, &mut rng)?;
    let preds: Vec<Vec<f64>> =
        test.iter().map(|(p, _)| predict(mae, &store, &head, p).map(|v| norm.denormalize(&v))).collect::<Result<_>>()?;
    let dim = norm.dim();
    let mut report = RegressionReport { r2: Vec::with_capacity(dim), mae: Vec::with_capacity(dim) };
    for j in 0..dim {
        let p: Vec<f64> = preds.iter().map(|v| v[j]).collect();
        let t: Vec<f64> = test.iter().map(|(_, t)| t[j]).collect();
        report.r2.push(r2(&p, &t));
        report.mae.push(metrics::mae(&p, &t));
    }
    Ok(report)
}

/// Runs pretraining and both fine-tuning tasks for every ρ. `synthetic`
/// holds (cine, conditioning phenotypes) pairs; ρ uses the first ρ·N_train
/// of them. Regression trains on the real train split and is scored on the
/// held-out val and test cines, which never enter pretraining or any
/// generative model. Synthetic cines never enter any test set.
pub fn mixing_sweep<E: Element>(
    real: &Dataset,
    synthetic: &[(Cine, Vec<f64>)],
    rhos: &[usize],
    mix_star: bool,
    seed: u64,
    cfg: &DownstreamConfig,
) -> Result<Vec<ReportRow>> {
    let train_idx = real.indices(Split::Train);
    let mut test_idx = real.indices(Split::Val);
    test_idx.extend(real.indices(Split::Test));
    let real_patches: Vec<Vec<f64>> =
        real.cines.iter().map(|c| patchify_frames(c, &cfg.mae)).collect::<Result<_>>()?;
    let labels = real.labels();
    let all: Vec<usize> = (0..real.len()).collect();
    let balanced = balanced_subset(&all, &labels, &mut Rng::stream(seed, &[1]));
    let bal_patches: Vec<Vec<f64>> = balanced.iter().map(|&i| real_patches[i].clone()).collect();
    let bal_labels: Vec<u8> = balanced.iter().map(|&i| labels[i]).collect();
    let train_norm = Normalizer::fit(train_idx.iter().map(|&i| real.phenotypes[i].as_slice()))?;
    let test: Vec<(&[f64], &[f64])> =
        test_idx.iter().map(|&i| (real_patches[i].as_slice(), real.phenotypes[i].as_slice())).collect();

    let mut rows = Vec::new();
    for &rho in rhos {
        let need = rho * train_idx.len();
        if synthetic.len() < need {
            return Err(Error::invalid(format!(
                "ρ = {rho} needs {need} synthetic cines, only {} available",
                synthetic.len()
            )));
        }
        let syn_patches: Vec<Vec<f64>> =
            synthetic[..need].iter().map(|(c, _)| patchify_frames(c, &cfg.mae)).collect::<Result<_>>()?;
        let mut pool: Vec<Vec<f64>> = train_idx.iter().map(|&i| real_patches[i].clone()).collect();
        pool.extend(syn_patches.iter().cloned());

        let mut rng = Rng::stream(seed, &[2, rho as u64]);
        let mut store = ParamStore::<E>::new();
        let mae_model = Mae::new(cfg.mae.clone(), &mut store, &mut rng)?;
        let history = mae_pretrain(&mae_model, &mut store, &pool, &cfg.pretrain, &mut rng)?;
        log::info!("rho {rho}: pretrain masked mse {:.5} -> {:.5}", history[0], history[history.len() - 1]);

        for (fold, acc, a) in finetune_classify(&mae_model, &store, &bal_patches, &bal_labels, cfg, seed)? {
            for (metric, value) in [("acc", acc), ("auc", a)] {
                rows.push(ReportRow { task: "classify", rho, mix_star: false, fold, metric: metric.into(), value });
            }
        }

        let stars: &[bool] = if mix_star && rho > 0 { &[false, true] } else { &[false] };
        for &star in stars {
            let mut train: Vec<(&[f64], &[f64])> = train_idx
                .iter()
                .map(|&i| (real_patches[i].as_slice(), real.phenotypes[i].as_slice()))
                .collect();
            if star {
                train.extend(syn_patches.iter().zip(&synthetic[..need]).map(|(p, (_, y))| (p.as_slice(), y.as_slice())));
            }
            let rep = finetune_regress(&mae_model, &store, &train, &test, &train_norm, &cfg.finetune, seed)?;
            let mut push = |metric: String, value: f64| {
                rows.push(ReportRow { task: "regress", rho, mix_star: star, fold: 0, metric, value })
            };
            for (j, name) in PHENOTYPE_NAMES.iter().enumerate() {
                match rep.r2[j] {
                    Some(v) => push(format!("r2_{name}"), v),
                    None => log::warn!("{name}: zero-variance test target, R² excluded"),
                }
                push(format!("mae_{name}"), rep.mae[j]);
            }
            push("mean_r2".into(), rep.mean_r2());
        }
    }
    Ok(rows)
}

pub fn write_report_csv<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "rho", "mix_star", "fold", "metric", "value"])?;
    for r in rows {
        out.write_record([
            r.task.to_string(),
            r.rho.to_string(),
            r.mix_star.to_string(),
            r.fold.to_string(),
            r.metric.clone(),
            format!("{:.6}", r.value),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean ± std of `metric` over folds for one (task, ρ, mix_star) cell.
pub fn summarize(rows: &[ReportRow], task: &str, rho: usize, mix_star: bool, metric: &str) -> Option<(f64, f64)> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.task == task && r.rho == rho && r.mix_star == mix_star && r.metric == metric)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| mean_std(&v))
}

/// Text table: one line per (ρ, mix_star) with ACC, AUC and mean R².
pub fn summary_table(rows: &[ReportRow]) -> String {
    let mut cells: Vec<(usize, bool)> = rows.iter().map(|r| (r.rho, r.mix_star)).collect();
    cells.sort_unstable();
    cells.dedup();
    let mut s = String::from("method             ACC            AUC            mean R2\n");
    for (rho, star) in cells {
        let label = if rho == 0 { "MAE(real)".to_string() } else { format!("mix {}%{}", rho * 100, if star { "*" } else { "" }) };
        let fmt = |v: Option<(f64, f64)>| v.map_or("-".to_string(), |(m, sd)| format!("{m:.3}±{sd:.3}"));
        let cls = |m| if star { None } else { summarize(rows, "classify", rho, false, m) };
        let _ = writeln!(
            s,
            "{label:<18} {:<14} {:<14} {}",
            fmt(cls("acc")),
            fmt(cls("auc")),
            fmt(summarize(rows, "regress", rho, star, "mean_r2"))
        );
    }
    s
}
