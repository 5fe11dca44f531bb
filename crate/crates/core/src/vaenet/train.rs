//! Mini-batch training with best-validation checkpointing, and inference.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::layers::Scalar;
use super::loss::{self, LossParts};
use super::model::{standard_normal, Architecture, NetworkConfig};
use super::optim::{adamw_step, AdamW, Plateau};
use crate::dsp::StftSegment;
use crate::error::{invalid, Error, Result};
use crate::pipeline::{Dataset, Split};
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub scheduler: Plateau,
    pub epochs: usize,
    pub kld_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            optimizer: AdamW::default(),
            scheduler: Plateau::default(),
            epochs: 1024,
            kld_weight: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.kld_weight >= 0.0 && self.kld_weight.is_finite()) {
            return Err(invalid("kld_weight must be finite and >= 0"));
        }
        self.optimizer.validate()?;
        self.scheduler.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_recon: f64,
    pub train_kld: f64,
    pub val_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss (initialization if no epoch ran).
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Loss and parameter gradient of one sample for a fixed noise draw.
///
/// `weight` scales the gradient (1/batch for batch averaging).
pub fn sample_loss_grad<T: Scalar>(
    arch: &Architecture,
    params: &[T],
    input: &[T],
    target: &[T],
    eps: &[T],
    beta: f64,
    weight: f64,
) -> Result<(LossParts, Vec<T>)> {
    let cache = arch.forward(params, input, eps)?;
    let parts = loss::loss(&cache.output, target, &cache.mu, &cache.logvar, beta)?;
    let (d_out, d_mu, d_lv) = loss::loss_grads(&cache.output, target, &cache.mu, &cache.logvar, beta, weight);
    let mut grads = vec![T::zero(); arch.n_params()];
    arch.backward(params, &cache, &d_out, &d_mu, &d_lv, &mut grads);
    Ok((parts, grads))
}

/// Mean total loss over a split with `z = mu`.
pub fn evaluate(arch: &Architecture, params: &[f32], ds: &Dataset, split: Split, beta: f64) -> Result<LossParts> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(invalid(format!("{split:?} split is empty")));
    }
    let parts: Vec<LossParts> = idx
        .par_iter()
        .map(|&k| {
            let (mu, logvar) = arch.encode(params, ds.mixture_planes(k))?;
            let out = arch.decode(params, &mu)?;
            loss::loss(&out, ds.clean_planes(k), &mu, &logvar, beta)
        })
        .collect::<Result<_>>()?;
    Ok(mean_parts(&parts))
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let mut acc = LossParts::default();
    for p in parts {
        acc.total += p.total;
        acc.recon += p.recon;
        acc.kld += p.kld;
    }
    LossParts { total: acc.total / n, recon: acc.recon / n, kld: acc.kld / n }
}

fn check_dataset(ds: &Dataset, net: &NetworkConfig) -> Result<()> {
    let [c, b, f] = ds.manifest.image_shape();
    if (c, b, f) != net.input_size {
        return Err(Error::ShapeMismatch {
            expected: vec![net.input_size.0, net.input_size.1, net.input_size.2],
            got: vec![c, b, f],
        });
    }
    if ds.indices(Split::Train).is_empty() || ds.indices(Split::Val).is_empty() {
        return Err(invalid("dataset needs non-empty train and validation splits"));
    }
    Ok(())
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Diverged { message, .. } => Error::Diverged { epoch, message },
        other => other,
    }
}

/// Trains from a fresh initialization.
///
/// When `out_dir` is given, the best checkpoint is written to
/// `out_dir/best` on every improvement, the final state to `out_dir/last`
/// and the per-epoch log to `out_dir/metrics.csv`.
pub fn train(ds: &Dataset, net: &NetworkConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = Architecture::new(net)?;
    check_dataset(ds, net)?;
    let tree = SeedTree::new(cfg.seed);
    let mut ckpt = Checkpoint::initial(net, cfg)?;
    let mut best = ckpt.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut log = match out_dir {
        Some(dir) => {
            crate::pipeline::create_dir(dir)?;
            Some(MetricsLog::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        best.save(&dir.join("best"))?;
    }

    let beta = cfg.kld_weight;
    let latent = net.latent_dim;
    for epoch in 1..=cfg.epochs {
        let eps_tree = tree.child("eps", epoch as u64);
        let batches = ds.batches(Split::Train, cfg.batch_size, &mut tree.rng("shuffle", epoch as u64));
        let n_img = net.input_len();
        let mut recon_sum = 0.0;
        let mut kld_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in &batches {
            let b = batch.indices.len();
            let weight = 1.0 / b as f64;
            let params = &ckpt.params;
            let results: Vec<(LossParts, Vec<f32>)> = (0..b)
                .into_par_iter()
                .map(|j| {
                    let k = batch.indices[j];
                    let eps: Vec<f32> = standard_normal(latent, &mut eps_tree.rng("sample", k as u64));
                    let x = &batch.inputs[j * n_img..(j + 1) * n_img];
                    let t = &batch.targets[j * n_img..(j + 1) * n_img];
                    sample_loss_grad(&arch, params, x, t, &eps, beta, weight)
                })
                .collect::<Result<_>>()?;
            let mut grads = vec![0.0f32; arch.n_params()];
            for (parts, g) in &results {
                if !parts.total.is_finite() {
                    return Err(Error::Diverged { epoch, message: format!("non-finite training loss {}", parts.total) });
                }
                recon_sum += parts.recon;
                kld_sum += parts.kld;
                grads.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
            n_seen += b;
            let lr = ckpt.scheduler.lr;
            adamw_step(&mut ckpt.params, &grads, &mut ckpt.adam, &cfg.optimizer, lr).map_err(|e| diverged(epoch, e))?;
        }
        let val = evaluate(&arch, &ckpt.params, ds, Split::Val, beta)?;
        if !val.total.is_finite() {
            return Err(Error::Diverged { epoch, message: format!("non-finite validation loss {}", val.total) });
        }
        let m = EpochMetrics {
            epoch,
            train_recon: recon_sum / n_seen as f64,
            train_kld: kld_sum / n_seen as f64,
            val_total: val.total,
            lr: ckpt.scheduler.lr,
        };
        ckpt.epoch = epoch;
        ckpt.scheduler.step(&cfg.scheduler, val.total);
        let improved = ckpt.best_val_loss.is_none_or(|b| val.total < b);
        if improved {
            ckpt.best_val_loss = Some(val.total);
            best = ckpt.clone();
            if let Some(dir) = out_dir {
                best.save(&dir.join("best"))?;
            }
        }
        if let Some(l) = log.as_mut() {
            l.append(&m)?;
        }
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("last"))?;
    }
    Ok(TrainOutcome { best, last: ckpt, metrics })
}

struct MetricsLog {
    path: std::path::PathBuf,
    file: std::fs::File,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "epoch,train_recon,train_kld,val_total,lr").map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{},{},{},{},{}", m.epoch, m.train_recon, m.train_kld, m.val_total, m.lr)
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        out.push(row.map_err(|e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Sample,
    Mean,
}

/// Estimates the vital-sign segment from a peak-normalized mixture segment.
///
/// With `norm_scale`, the estimate is multiplied back to the mixture's
/// original scale.
pub fn infer(
    ckpt: &Checkpoint,
    mixture: &StftSegment,
    mode: InferMode,
    norm_scale: Option<f64>,
    rng: &mut impl Rng,
) -> Result<StftSegment> {
    let arch = ckpt.architecture()?;
    let (c, h, w) = ckpt.network.input_size;
    if c != 2 || mixture.shape() != (h, w) {
        return Err(Error::ShapeMismatch { expected: vec![c, h, w], got: vec![2, mixture.n_bins(), mixture.n_frames()] });
    }
    let x: Vec<f32> = mixture.to_planes().iter().map(|&v| v as f32).collect();
    let (mu, logvar) = arch.encode(&ckpt.params, &x)?;
    let z = match mode {
        InferMode::Mean => mu,
        InferMode::Sample => super::model::reparameterize(&mu, &logvar, rng)?,
    };
    let out = arch.decode(&ckpt.params, &z)?;
    let scale = norm_scale.unwrap_or(1.0);
    let planes: Vec<f64> = out.iter().map(|&v| v as f64 * scale).collect();
    StftSegment::from_planes(&planes, h, w, mixture.origin_frame)
}
