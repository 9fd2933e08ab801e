//! Optimization loop: SGD with momentum on the lambda-weighted total loss,
//! poly learning-rate decay per epoch, rotation x4 + random-crop
//! augmentation, CSV loss logging and resumable checkpoints.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataio::{
    augment_crop, augment_rotate, derive_attention_target, derive_generic_attention_target,
    generic_labels, sample_rng, ImageSample, Rotation,
};
use crate::error::{Error, Result};
use crate::losses::{
    edge_loss, edge_loss_single, focal_attention_loss, total_loss, EdgeLossParams, FocalLossParams,
};
use crate::model::{preprocess_batch, RindNet};
use crate::nn::ParamStore;

/// Poly decay: `lr0 * (1 - epoch/epochs)^power`, evaluated once per epoch.
pub fn poly_lr(lr0: f64, epochs: usize, power: f64, epoch: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let frac = 1.0 - epoch as f64 / epochs as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// SGD with classical momentum. Shared parameters appear once in the list
/// (the store deduplicates by name), and candle accumulates their gradient
/// over every use site, so a shared stream receives the sum of both
/// decoders' contributions and is stepped exactly once.
pub struct Sgd {
    params: Vec<(String, Var)>,
    velocity: BTreeMap<String, Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            params,
            velocity: BTreeMap::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in &self.params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = if self.weight_decay > 0.0 {
                (grad + var.as_tensor().affine(self.weight_decay, 0.0)?)?
            } else {
                grad.clone()
            };
            let v = match self.velocity.get(name) {
                Some(prev) => (prev.affine(self.momentum, 0.0)? + grad)?,
                None => grad,
            };
            var.set(&(var.as_tensor() - v.affine(lr, 0.0)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load_state(&mut self, path: &Path, device: &candle_core::Device) -> Result<()> {
        let map = candle_core::safetensors::load(path, device)?;
        self.velocity = map.into_iter().collect();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub total: f64,
    pub edge: f64,
    pub attention: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub running_loss: Option<EpochStats>,
    pub loss_tail: Vec<f64>,
}

fn meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("meta.json")
}

fn opt_path(weights: &Path) -> PathBuf {
    weights.with_extension("opt.safetensors")
}

/// Persist weights + manifest, optimizer state and checkpoint metadata.
pub fn save_checkpoint(
    store: &ParamStore,
    sgd: Option<&Sgd>,
    meta: &CheckpointMeta,
    weights: &Path,
) -> Result<()> {
    store.save(weights)?;
    if let Some(sgd) = sgd {
        sgd.save_state(&opt_path(weights))?;
    }
    let mpath = meta_path(weights);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Data(format!("checkpoint meta serialization: {e}")))?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_checkpoint_meta(weights: &Path) -> Result<CheckpointMeta> {
    let mpath = meta_path(weights);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))
}

/// Rebuild the configuration recorded in a checkpoint.
pub fn config_from_meta(meta: &CheckpointMeta) -> Result<Config> {
    let mut cfg = Config::default();
    for (k, v) in &meta.config {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn labels_tensor(samples: &[ImageSample], device: &candle_core::Device) -> Result<Tensor> {
    let (b, h, w) = (
        samples.len(),
        samples[0].height(),
        samples[0].width(),
    );
    let mut data = Vec::with_capacity(b * 4 * h * w);
    for s in samples {
        data.extend(s.labels.iter().map(|&v| f32::from(v)));
    }
    Ok(Tensor::from_vec(data, (b, 4, h, w), device)?)
}

fn attention_tensor(samples: &[ImageSample], device: &candle_core::Device) -> Result<Tensor> {
    let (b, h, w) = (samples.len(), samples[0].height(), samples[0].width());
    let mut data = Vec::with_capacity(b * 5 * h * w);
    for s in samples {
        let t = derive_attention_target(&s.labels);
        data.extend(t.target.iter().map(|&v| f32::from(v)));
    }
    Ok(Tensor::from_vec(data, (b, 5, h, w), device)?)
}

fn generic_tensors(
    samples: &[ImageSample],
    device: &candle_core::Device,
) -> Result<(Tensor, Tensor)> {
    let (b, h, w) = (samples.len(), samples[0].height(), samples[0].width());
    let mut e = Vec::with_capacity(b * h * w);
    let mut t = Vec::with_capacity(b * 2 * h * w);
    for s in samples {
        e.extend(generic_labels(&s.labels).iter().map(|&v| f32::from(v)));
        t.extend(
            derive_generic_attention_target(&s.labels)
                .iter()
                .map(|&v| f32::from(v)),
        );
    }
    Ok((
        Tensor::from_vec(e, (b, h, w), device)?,
        Tensor::from_vec(t, (b, 2, h, w), device)?,
    ))
}

/// The rotation-expanded work list for one epoch, shuffled deterministically
/// from (seed, epoch).
pub fn epoch_order(n_samples: usize, seed: u64, epoch: usize) -> Vec<(usize, Rotation)> {
    let mut items: Vec<(usize, Rotation)> = (0..n_samples)
        .flat_map(|i| Rotation::ALL.into_iter().map(move |r| (i, r)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(epoch as u64),
    );
    items.shuffle(&mut rng);
    items
}

struct BatchLoss {
    total: Tensor,
    edge: f64,
    attention: f64,
}

fn batch_losses(model: &RindNet, batch: &[ImageSample], cfg: &Config) -> Result<BatchLoss> {
    let device = candle_core::Device::Cpu;
    let images: Vec<_> = batch.iter().map(|s| s.image.clone()).collect();
    let x = preprocess_batch(&images, &device)?;
    let edge_params = EdgeLossParams {
        beta: cfg.train.beta,
        gamma1: cfg.train.gamma1,
    };
    let focal_params = FocalLossParams {
        alpha2: cfg.train.alpha2,
        gamma2: cfg.train.gamma2,
    };

    if cfg.model.generic_mode {
        let (p, set) = model.forward_generic(&x)?;
        let (e_gen, t_gen) = generic_tensors(batch, &device)?;
        let l_e = edge_loss_single(&p.squeeze(1)?, &e_gen, &edge_params)?;
        if cfg.model.use_am {
            let l_att = focal_attention_loss(&set.a, &t_gen, &focal_params)?;
            let total = total_loss(&l_e, &l_att, cfg.train.lambda)?;
            let att_v: f64 = l_att.to_dtype(DType::F64)?.to_scalar()?;
            let edge_v: f64 = l_e.to_dtype(DType::F64)?.to_scalar()?;
            return Ok(BatchLoss {
                total,
                edge: edge_v,
                attention: att_v,
            });
        }
        let edge_v: f64 = l_e.to_dtype(DType::F64)?.to_scalar()?;
        return Ok(BatchLoss {
            total: l_e.affine(cfg.train.lambda, 0.0)?,
            edge: edge_v,
            attention: 0.0,
        });
    }

    let set = model.forward_full(&x)?;
    let e = labels_tensor(batch, &device)?;
    let l_e = edge_loss(&set.y, &e, &edge_params)?;
    let edge_v: f64 = l_e.to_dtype(DType::F64)?.to_scalar()?;
    if cfg.model.use_am {
        let t = attention_tensor(batch, &device)?;
        let l_att = focal_attention_loss(&set.a, &t, &focal_params)?;
        let att_v: f64 = l_att.to_dtype(DType::F64)?.to_scalar()?;
        let total = total_loss(&l_e, &l_att, cfg.train.lambda)?;
        Ok(BatchLoss {
            total,
            edge: edge_v,
            attention: att_v,
        })
    } else {
        // without the attention module only the edge term carries gradients
        Ok(BatchLoss {
            total: l_e.affine(cfg.train.lambda, 0.0)?,
            edge: edge_v,
            attention: 0.0,
        })
    }
}

/// One pass over the rotation-expanded sample list: augment, batch, step.
pub fn train_epoch(
    model: &RindNet,
    samples: &[ImageSample],
    cfg: &Config,
    epoch: usize,
    lr: f64,
    sgd: &mut Sgd,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let order = epoch_order(samples.len(), cfg.train.seed, epoch);
    let mut totals = (0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.train.batch_size) {
        let prepared: Vec<ImageSample> = chunk
            .iter()
            .map(|(i, rot)| {
                let s = &samples[*i];
                let rotated = augment_rotate(s, *rot);
                let stream_id = format!("{}#{}", s.id, rot.degrees());
                let mut rng = sample_rng(cfg.train.seed, &stream_id, epoch);
                augment_crop(&rotated, cfg.train.crop, &mut rng)
            })
            .collect();
        let loss = batch_losses(model, &prepared, cfg)?;
        let total_v: f64 = loss.total.to_dtype(DType::F64)?.to_scalar()?;
        if !total_v.is_finite() {
            let ids: Vec<&str> = prepared.iter().map(|s| s.id.as_str()).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss {total_v} at epoch {epoch}, batch {batches} (samples {ids:?})"
            )));
        }
        let grads = loss.total.backward()?;
        sgd.step(&grads, lr)?;
        totals.0 += total_v;
        totals.1 += loss.edge;
        totals.2 += loss.attention;
        batches += 1;
    }
    let n = batches as f64;
    Ok(EpochStats {
        total: totals.0 / n,
        edge: totals.1 / n,
        attention: totals.2 / n,
    })
}

pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub stats: Vec<EpochStats>,
}

/// Full training run with per-epoch poly decay, loss CSV and periodic
/// checkpoints. `resume` continues from a saved checkpoint (weights,
/// optimizer state and epoch counter).
pub fn fit(
    model: &RindNet,
    store: &ParamStore,
    samples: &[ImageSample],
    cfg: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sgd = Sgd::new(
        store.trainable_vars(),
        cfg.train.momentum,
        cfg.train.weight_decay,
    );
    let mut start_epoch = 0usize;
    if let Some(ckpt) = resume {
        let report = store.load(ckpt, None, true)?;
        debug_assert!(report.missing.is_empty());
        let meta = load_checkpoint_meta(ckpt)?;
        if meta.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} differs from current {}; refusing to resume",
                meta.config_hash,
                cfg.hash()
            )));
        }
        let opt = opt_path(ckpt);
        if opt.exists() {
            sgd.load_state(&opt, store.device())?;
        }
        start_epoch = meta.epoch + 1;
    }

    let csv_path = out_dir.join("loss_curve.csv");
    let mut csv = if start_epoch > 0 && csv_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?
    } else {
        let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        writeln!(f, "epoch,lr,total,edge,attention").map_err(|e| Error::io(&csv_path, e))?;
        f
    };

    let mut stats_log = Vec::new();
    let mut tail: Vec<f64> = Vec::new();
    let mut last_lr = cfg.train.lr0;
    for epoch in start_epoch..cfg.train.epochs {
        let lr = poly_lr(cfg.train.lr0, cfg.train.epochs, cfg.train.poly_power, epoch);
        last_lr = lr;
        let stats = train_epoch(model, samples, cfg, epoch, lr, &mut sgd)?;
        writeln!(
            csv,
            "{epoch},{lr},{:.6},{:.6},{:.6}",
            stats.total, stats.edge, stats.attention
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        tail.push(stats.total);
        if tail.len() > 5 {
            tail.remove(0);
        }
        stats_log.push(stats);
        if cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_epoch{epoch}.safetensors"));
            let meta = CheckpointMeta {
                epoch,
                lr,
                seed: cfg.train.seed,
                config_hash: cfg.hash(),
                config: cfg.as_map(),
                running_loss: Some(stats),
                loss_tail: tail.clone(),
            };
            save_checkpoint(store, Some(&sgd), &meta, &path)?;
        }
    }

    let final_path = out_dir.join("ckpt_final.safetensors");
    let meta = CheckpointMeta {
        epoch: cfg.train.epochs.saturating_sub(1),
        lr: last_lr,
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        config: cfg.as_map(),
        running_loss: stats_log.last().copied(),
        loss_tail: tail,
    };
    save_checkpoint(store, Some(&sgd), &meta, &final_path)?;
    Ok(FitOutcome {
        final_checkpoint: final_path,
        stats: stats_log,
    })
}
