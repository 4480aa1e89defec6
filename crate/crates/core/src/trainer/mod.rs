//! Two-scale hierarchical training: losses, the poly schedule, SGD with
//! momentum, and the epoch loop that writes a run directory.
//!
//! Runs are deterministic for a fixed seed and config on a given machine:
//! data order, augmentation and initialization come from seeded streams, and
//! all reductions run in a fixed order on the CPU backend.

mod loss;
mod optim;

pub use loss::{compute_loss, cross_entropy, targets, CrossEntropy, MainLoss, Targets};
pub use optim::Sgd;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentConfig, LabeledImage};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{batch_tensor, save_checkpoint, Mode, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub poly_power: f64,
    /// Weight of the summed per-scale auxiliary losses.
    pub aux_weight: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Fraction of the data held out for per-epoch validation.
    pub val_fraction: f64,
    /// Tiling used for validation inference.
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr: 5e-3,
            poly_power: 2.0,
            aux_weight: 0.4,
            seed: 0,
            augment: AugmentConfig::default(),
            val_fraction: 0.2,
            tile: 224,
            overlap: 128,
        }
    }
}

impl TrainConfig {
    /// The 4K setting: 175 epochs, 896 crops and tiles, 512 overlap.
    pub fn full_scale() -> Self {
        Self {
            epochs: 175,
            augment: AugmentConfig::full_scale(),
            tile: 896,
            overlap: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("poly_power", self.poly_power),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be positive"));
            }
        }
        for (k, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay), ("aux_weight", self.aux_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        if self.overlap >= self.tile {
            return Err(Error::config("overlap", "must be smaller than tile"));
        }
        self.augment.validate()
    }
}

/// `lr0 * (1 - t / T) ^ power`; steps past `T` clamp to zero.
pub fn poly_lr(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if step > total {
        log::warn!("poly_lr: step {step} beyond total {total}, clamping to 0");
        return 0.0;
    }
    if total == 0 {
        return cfg.lr;
    }
    cfg.lr * (1.0 - step as f64 / total as f64).powf(cfg.poly_power)
}

/// Seeded 80/20-style split: `(train, val)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if n > 1 { n_val.min(n - 1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

const SPLIT_STREAM: u64 = 0x5eed_0001;

/// Loss and gradients of the training graph on one batch.
pub fn loss_and_grads(
    model: &Model,
    images: &Tensor,
    target: &Targets,
    aux_weight: f64,
    main_loss: &dyn MainLoss,
) -> Result<(f64, GradStore)> {
    let out = model.forward_train(images, Mode::Train)?;
    let loss = compute_loss(&out.main, &out.aux, target, aux_weight, main_loss)?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let grads = loss.backward()?;
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_miou: f64,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,miou\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{:.9},{:.9}", r.epoch, r.lr, r.loss, r.miou);
        }
        s
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. With `run_dir`, writes `metrics.csv` after every
/// epoch, `ckpt-last`, `ckpt-best` (highest validation mIoU) and `run.meta`.
pub fn train(model: &Model, data: &[LabeledImage], cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainReport> {
    train_with_loss(model, data, cfg, run_dir, &CrossEntropy)
}

pub fn train_with_loss(
    model: &Model,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    main_loss: &dyn MainLoss,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("data", "no training images"));
    }
    let n_class = model.config().n_class;
    if let Some(bad) = data.iter().find(|s| !s.labels_valid(n_class)) {
        return Err(Error::Contract(format!("{}: label outside 0..{n_class}", bad.id)));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = format!(
            "strategy = {}\nmain_loss = {}\naux_loss = cross-entropy\nseed = {}\ntrain_scales = {:?}\ninfer_scales = {:?}\n",
            model.strategy(),
            main_loss.name(),
            cfg.seed,
            model.train_scales(),
            model.infer_scales()
        );
        write(&dir.join("run.meta"), &meta)?;
    }

    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<&LabeledImage> = val_idx.iter().map(|&i| &data[i]).collect();
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let mut step = 0;
    let mut report = TrainReport {
        rows: Vec::new(),
        best_epoch: 0,
        best_miou: f64::NEG_INFINITY,
    };

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let epoch_lr = poly_lr(step, total, cfg);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augment(&data[i], &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let imgs: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let images = batch_tensor(&imgs, model.dtype(), model.device())?;
            let labels: Vec<_> = batch.iter().map(|s| &s.labels).collect();
            let target = targets(&labels, n_class, model.dtype(), model.device())?;
            let (loss, grads) = loss_and_grads(model, &images, &target, cfg.aux_weight, main_loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.step(model.params(), &grads, poly_lr(step, total, cfg))?;
            loss_sum += loss;
            step += 1;
        }
        let miou = if val.is_empty() {
            f64::NAN
        } else {
            eval::evaluate(model, &val, cfg.tile, cfg.overlap)?.miou
        };
        let row = EpochRow {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / steps_per_epoch as f64,
            miou,
        };
        log::info!("epoch {epoch}: lr {:.3e} loss {:.4} mIoU {:.4}", row.lr, row.loss, row.miou);
        let improved = report.rows.is_empty() || miou > report.best_miou;
        report.rows.push(row);
        if improved {
            report.best_epoch = epoch;
            report.best_miou = miou;
        }
        if let Some(dir) = run_dir {
            write(&dir.join("metrics.csv"), &report.metrics_csv())?;
            save_checkpoint(model, &dir.join("ckpt-last"))?;
            if improved {
                save_checkpoint(model, &dir.join("ckpt-best"))?;
            }
        }
    }
    Ok(report)
}
