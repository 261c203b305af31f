//! Victim-side evaluation: train classifiers on clean or poisoned data,
//! track clean-validation accuracy per epoch, and derive final/peak metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, Classifier, ClassifierConfig};
use crate::augment::AugmentationPolicy;
use crate::data::adapt::to_rgb_square;
use crate::data::{registry, LabeledDataset};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::nn::layers::NormMode;
use crate::nn::optim::{cosine_lr, MomentumSgd};
use crate::perturb::{load_poison_dir, PoisonManifest};
use crate::poison::{poison_dataset, CombinePolicy};
use crate::trainer::training_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub arch: Architecture,
    pub width_scale: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Standard crop+flip pipeline when true; measuring without input
    /// augmentation is the contrasting mode.
    pub augment: bool,
    pub seed: u64,
    pub num_runs: usize,
}

impl VictimConfig {
    /// The standard CIFAR recipe at full scale: momentum SGD, lr 0.1, cosine
    /// decay, weight decay 5e-4, batch 128, 60 epochs, 5 runs.
    pub fn standard(arch: Architecture, seed: u64) -> Self {
        Self {
            arch,
            width_scale: 1.0,
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            seed,
            num_runs: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.num_runs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig(
                "epochs, num_runs and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One victim training run: the accuracy trace and its derived metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimRunRecord {
    pub per_epoch_val_acc: Vec<f64>,
    pub final_acc: f64,
    pub peak_acc: f64,
    /// 1-based; earliest epoch on ties.
    pub peak_epoch: usize,
    pub run_seed: u64,
    pub config: VictimConfig,
    pub train_hash: String,
    pub val_hash: String,
}

/// final = last epoch, peak = max (earliest argmax), peak_epoch 1-based.
pub fn derive_metrics(per_epoch_val_acc: &[f64]) -> Result<(f64, f64, usize)> {
    if per_epoch_val_acc.is_empty() {
        return Err(Error::EmptyInput("empty accuracy trace".into()));
    }
    let final_acc = *per_epoch_val_acc.last().expect("non-empty");
    let mut peak = f64::NEG_INFINITY;
    let mut peak_epoch = 1;
    for (i, &acc) in per_epoch_val_acc.iter().enumerate() {
        if acc > peak {
            peak = acc;
            peak_epoch = i + 1;
        }
    }
    Ok((final_acc, peak, peak_epoch))
}

/// Training data for a victim, either clean or re-verified poison.
pub struct VictimData {
    pub train: LabeledDataset,
    /// Poison manifest when the data came from a poison directory.
    pub manifest: Option<PoisonManifest>,
}

impl VictimData {
    pub fn clean(train: LabeledDataset) -> Self {
        Self {
            train,
            manifest: None,
        }
    }

    /// Load a poison directory, re-verifying the manifest and the epsilon
    /// bound before anything trains on it.
    pub fn poisoned(dir: &Path) -> Result<Self> {
        let loaded = load_poison_dir(dir)?;
        loaded.verify_bound()?;
        Ok(Self {
            train: loaded.dataset,
            manifest: Some(loaded.manifest),
        })
    }
}

fn eval_accuracy(model: &Classifier, ds: &LabeledDataset, batch_size: usize) -> Result<f64> {
    let device = candle_core::Device::Cpu;
    let labels = ds.labels();
    let mut correct = 0usize;
    let mut row = 0usize;
    while row < ds.len() {
        let take = batch_size.min(ds.len() - row);
        let rows: Vec<usize> = (row..row + take).collect();
        let x = ds.batch.rows_to_tensor(&rows, &device)?;
        let logits = model.forward(&x, NormMode::Running)?;
        let preds = logits.argmax(1)?.to_vec1::<u32>()?;
        for (i, p) in preds.iter().enumerate() {
            if *p as usize == labels[row + i] {
                correct += 1;
            }
        }
        row += take;
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

fn train_one_victim(
    data: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &VictimConfig,
    run_seed: u64,
) -> Result<(Classifier, Vec<f64>)> {
    let device = candle_core::Device::Cpu;
    let clf_cfg =
        ClassifierConfig::new(cfg.arch, data.num_classes).with_width_scale(cfg.width_scale);
    let model = Classifier::build(clf_cfg, derive_seed(run_seed, "victim-init"), false)?;
    let mut opt = MomentumSgd::new(model.store().vars(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut order_rng = ChaCha12Rng::seed_from_u64(derive_seed(run_seed, "victim-order"));
    let mut aug = if cfg.augment {
        Some(AugmentationPolicy::standard(derive_seed(run_seed, "victim-aug")).stream())
    } else {
        None
    };
    let labels = data.labels();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            opt.lr = cosine_lr(cfg.lr, step, total_steps);
            let mut x = data.batch.rows_to_tensor(chunk, &device)?;
            if let Some(stream) = aug.as_mut() {
                x = stream.apply(&x)?;
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = model.forward(
                &x,
                NormMode::BatchStats {
                    update_running: true,
                },
            )?;
            let loss = training_loss(&logits, &batch_labels)?;
            let loss_val = loss.to_scalar::<f32>()?;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            step += 1;
        }
        trace.push(eval_accuracy(&model, val, 256)?);
    }
    Ok((model, trace))
}

/// Train `cfg.num_runs` victims with derived seeds; validation is always the
/// clean split.
pub fn train_victim(
    data: &VictimData,
    val: &LabeledDataset,
    cfg: &VictimConfig,
) -> Result<Vec<VictimRunRecord>> {
    cfg.validate()?;
    if data.train.num_classes != val.num_classes {
        return Err(Error::InvalidConfig(format!(
            "train has {} classes, validation {}",
            data.train.num_classes, val.num_classes
        )));
    }
    let train_hash = data.train.content_hash();
    let val_hash = val.content_hash();
    let mut records = Vec::with_capacity(cfg.num_runs);
    for run in 0..cfg.num_runs {
        let run_seed = derive_seed(cfg.seed, &format!("victim-run-{run}"));
        let (_model, trace) = train_one_victim(&data.train, val, cfg, run_seed)?;
        let (final_acc, peak_acc, peak_epoch) = derive_metrics(&trace)?;
        records.push(VictimRunRecord {
            per_epoch_val_acc: trace,
            final_acc,
            peak_acc,
            peak_epoch,
            run_seed,
            config: cfg.clone(),
            train_hash: train_hash.clone(),
            val_hash: val_hash.clone(),
        });
    }
    Ok(records)
}

/// Train once and persist the model (used to produce the well-trained
/// discriminator for the ablation).
pub fn train_and_save_classifier(
    data: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &VictimConfig,
    out_path: &Path,
) -> Result<(String, Vec<f64>)> {
    cfg.validate()?;
    let run_seed = derive_seed(cfg.seed, "pretrain");
    let (model, trace) = train_one_victim(data, val, cfg, run_seed)?;
    let hash = model.save(
        out_path,
        serde_json::json!({
            "train_dataset_hash": data.content_hash(),
            "final_val_acc": trace.last(),
        }),
    )?;
    Ok((hash, trace))
}

/// Mean +- population std over runs, plus the modal peak epoch (smallest on
/// ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_runs: usize,
    pub final_mean: f64,
    pub final_std: f64,
    pub peak_mean: f64,
    pub peak_std: f64,
    pub peak_epoch_mode: usize,
}

pub fn summarize(records: &[VictimRunRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no victim runs to summarize".into()));
    }
    let stats = |vals: Vec<f64>| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (final_mean, final_std) = stats(records.iter().map(|r| r.final_acc).collect());
    let (peak_mean, peak_std) = stats(records.iter().map(|r| r.peak_acc).collect());
    let mut counts = std::collections::BTreeMap::new();
    for r in records {
        *counts.entry(r.peak_epoch).or_insert(0usize) += 1;
    }
    // BTreeMap iterates in ascending epoch order, so strict `>` keeps the
    // smallest epoch on count ties.
    let mut peak_epoch_mode = 0;
    let mut best = 0;
    for (epoch, count) in counts {
        if count > best {
            best = count;
            peak_epoch_mode = epoch;
        }
    }
    Ok(Summary {
        num_runs: records.len(),
        final_mean,
        final_std,
        peak_mean,
        peak_std,
        peak_epoch_mode,
    })
}

/// Table-3 style evaluation: the same poison against several victim
/// architectures.
pub fn transfer_eval(
    poison_dir: &Path,
    archs: &[Architecture],
    val: &LabeledDataset,
    base_cfg: &VictimConfig,
) -> Result<Vec<(Architecture, Summary)>> {
    let data = VictimData::poisoned(poison_dir)?;
    let mut rows = Vec::with_capacity(archs.len());
    for &arch in archs {
        let cfg = VictimConfig {
            arch,
            ..base_cfg.clone()
        };
        let records = train_victim(&data, val, &cfg)?;
        rows.push((arch, summarize(&records)?));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossDatasetReport {
    pub target: String,
    pub clean: Summary,
    pub poisoned: Summary,
}

/// Table-4 style evaluation: a generator trained elsewhere poisons an unseen
/// dataset; victims are compared on clean vs poisoned versions of it.
pub fn cross_dataset_eval(
    checkpoints: &[&Path],
    target: &str,
    opts: &registry::DatasetOptions,
    victim_cfg: &VictimConfig,
    out_dir: &Path,
) -> Result<CrossDatasetReport> {
    let train = to_rgb_square(&registry::load(target, "train", opts)?, 32)?;
    let val_opts = registry::DatasetOptions {
        size: opts.size.map(|s| (s / 4).max(1)),
        ..opts.clone()
    };
    let val = to_rgb_square(&registry::load(target, "val", &val_opts)?, 32)?;
    let poison_out = out_dir.join("poison");
    poison_dataset(
        checkpoints,
        &train,
        Some(CombinePolicy::default()),
        &poison_out,
        256,
        false,
    )?;
    let poisoned = VictimData::poisoned(&poison_out)?;
    let poisoned_records = train_victim(&poisoned, &val, victim_cfg)?;
    let clean_records = train_victim(&VictimData::clean(train), &val, victim_cfg)?;
    Ok(CrossDatasetReport {
        target: target.to_string(),
        clean: summarize(&clean_records)?,
        poisoned: summarize(&poisoned_records)?,
    })
}
