//! Generator training against a frozen discriminator: the error-minimizing
//! objective, plain or with input augmentation inside the loss.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::LabeledDataset;
use crate::discriminator::FrozenClassifier;
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::hashing::{derive_seed, sha256_hex};
use crate::nn::optim::cosine_lr;
use crate::perturb::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoAug,
    Aug,
}

impl Variant {
    pub fn provenance(self) -> Provenance {
        match self {
            Variant::NoAug => Provenance::NoAug,
            Variant::Aug => Provenance::Aug,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam peak learning rate, cosine-decayed to zero over the run.
    pub lr: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Augmentation applied to the discriminator input; only read when
    /// `variant == Aug`.
    pub aug_policy: Option<AugmentationPolicy>,
}

impl TrainConfig {
    pub fn new(variant: Variant, epochs: usize, seed: u64) -> Self {
        let aug_policy = match variant {
            Variant::Aug => Some(AugmentationPolicy::standard(derive_seed(seed, "gen-aug"))),
            Variant::NoAug => None,
        };
        Self {
            epochs,
            batch_size: 128,
            lr: 2e-4,
            seed,
            variant,
            aug_policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits [N, K]` against integer labels.
pub fn training_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    for &label in labels {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: k,
            });
        }
    }
    let idx = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<u32>>(),
        (n, 1),
        logits.device(),
    )?;
    let log_probs = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = log_probs.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Per-run record: epoch losses plus enough provenance to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_mean_loss: Vec<f64>,
    pub discriminator_hash: String,
    pub dataset_hash: String,
    pub config_hash: String,
    pub wall_secs: f64,
    pub images_per_sec: f64,
}

/// Minimize `CE(disc(gen(x) + x), y)` (or the augmented variant) over the
/// generator parameters only. The discriminator hash is asserted unchanged
/// every epoch.
pub fn train_generator(
    gen: &mut GeneratorModel,
    disc: &FrozenClassifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    let device = candle_core::Device::Cpu;
    let disc_hash = disc.param_hash().to_string();
    let gen_hash_before = gen.param_hash()?;
    let mut opt = AdamW::new(
        gen.store().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut order_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "gen-order"));
    let mut aug_stream = cfg.aug_policy.as_ref().map(|p| p.stream());
    let labels = data.labels();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let started = std::time::Instant::now();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            opt.set_learning_rate(cosine_lr(cfg.lr, step, total_steps));
            let x = data.batch.rows_to_tensor(chunk, &device)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let delta = gen.forward(&x)?;
            let poisoned = (delta + &x)?;
            let disc_in = match (cfg.variant, aug_stream.as_mut()) {
                (Variant::Aug, Some(stream)) => stream.apply(&poisoned)?,
                _ => poisoned,
            };
            let logits = disc.classify(&disc_in)?;
            let loss = training_loss(&logits, &batch_labels)?;
            let loss_val = loss.to_scalar::<f32>()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            opt.backward_step(&loss)?;
            epoch_loss += loss_val * chunk.len() as f64;
            step += 1;
        }
        epoch_mean_loss.push(epoch_loss / data.len() as f64);
        let current = disc.current_param_hash()?;
        if current != disc_hash {
            return Err(Error::DiscriminatorNotFrozen {
                expected: disc_hash,
                actual: current,
            });
        }
    }
    let wall_secs = started.elapsed().as_secs_f64();
    gen.set_variant(cfg.variant.provenance());
    debug_assert_ne!(gen.param_hash()?, gen_hash_before);
    Ok(TrainReport {
        variant: cfg.variant,
        epochs: cfg.epochs,
        steps: step,
        epoch_mean_loss,
        discriminator_hash: disc_hash,
        dataset_hash: data.content_hash(),
        config_hash: sha256_hex(serde_json::to_string(cfg)?.as_bytes()),
        wall_secs,
        images_per_sec: (data.len() * cfg.epochs) as f64 / wall_secs.max(1e-9),
    })
}

pub struct GeneratorRunArtifacts {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub report: TrainReport,
}

/// Train, then persist checkpoint + loss CSV + run manifest under `out_dir`.
pub fn train_and_save(
    gen: &mut GeneratorModel,
    disc: &FrozenClassifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<GeneratorRunArtifacts> {
    let report = train_generator(gen, disc, data, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("generator.ckpt");
    let hash = gen.save(
        &ckpt,
        serde_json::json!({
            "train": cfg,
            "discriminator_hash": report.discriminator_hash,
            "discriminator_spec": disc.spec(),
            "dataset_hash": report.dataset_hash,
        }),
    )?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (i, loss) in report.epoch_mean_loss.iter().enumerate() {
        csv.push_str(&format!("{},{loss}\n", i + 1));
    }
    std::fs::write(out_dir.join("loss.csv"), csv)?;
    let manifest = serde_json::json!({
        "kind": "generator-run",
        "config": cfg,
        "checkpoint": ckpt.file_name().and_then(|s| s.to_str()),
        "checkpoint_hash": hash,
        "report": report,
    });
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(GeneratorRunArtifacts {
        checkpoint: ckpt,
        checkpoint_hash: hash,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Architecture;
    use crate::data::synth;
    use crate::discriminator::{build_discriminator, DiscriminatorSpec};
    use crate::generator::{GeneratorConfig, GeneratorModel};

    fn tiny_gen() -> GeneratorModel {
        GeneratorModel::build(
            GeneratorConfig {
                base_width: 4,
                num_residual_blocks: 1,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn tiny_disc(seed: u64) -> FrozenClassifier {
        build_discriminator(
            DiscriminatorSpec::random(Architecture::Cnn, 10, seed).with_width_scale(0.0625),
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let device = candle_core::Device::Cpu;
        let logits = Tensor::zeros((4, 10), candle_core::DType::F64, &device).unwrap();
        let loss = training_loss(&logits, &[0, 3, 5, 9]).unwrap();
        let got = loss.to_scalar::<f64>().unwrap();
        assert!((got - 10f64.ln()).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn concentrated_logits_drive_loss_to_zero() {
        let device = candle_core::Device::Cpu;
        let mut rows = vec![0f32; 2 * 10];
        rows[3] = 50.0;
        rows[10 + 7] = 50.0;
        let logits = Tensor::from_vec(rows, (2, 10), &device).unwrap();
        let loss = training_loss(&logits, &[3, 7]).unwrap();
        assert!(loss.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn random_logits_match_f64_reference() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let (n, k) = (32, 10);
        let vals: Vec<f32> = (0..n * k).map(|_| rng.random::<f32>() * 6.0 - 3.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        // independent reference: f64 log-sum-exp
        let mut expect = 0.0f64;
        for i in 0..n {
            let row: Vec<f64> = vals[i * k..(i + 1) * k].iter().map(|&v| v as f64).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - row[labels[i]];
        }
        expect /= n as f64;
        let device = candle_core::Device::Cpu;
        let logits = Tensor::from_vec(vals, (n, k), &device).unwrap();
        let got = training_loss(&logits, &labels).unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((got - expect).abs() < 1e-6, "got {got}, want {expect}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let device = candle_core::Device::Cpu;
        let logits = Tensor::zeros((1, 10), candle_core::DType::F32, &device).unwrap();
        assert!(matches!(
            training_loss(&logits, &[10]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn training_moves_generator_not_discriminator() {
        let mut gen = tiny_gen();
        let disc = tiny_disc(5);
        let data = synth::object10("train", 64, 3).unwrap();
        let gen_before = gen.param_hash().unwrap();
        let disc_before = disc.param_hash().to_string();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            variant: Variant::NoAug,
            aug_policy: None,
        };
        let report = train_generator(&mut gen, &disc, &data, &cfg).unwrap();
        assert_ne!(gen.param_hash().unwrap(), gen_before);
        assert_eq!(disc.current_param_hash().unwrap(), disc_before);
        assert!(report.epoch_mean_loss.iter().all(|l| l.is_finite()));
        assert_eq!(report.steps, 4);
    }

    #[test]
    fn loss_decreases_on_a_small_run() {
        let mut gen = tiny_gen();
        let disc = tiny_disc(9);
        let data = synth::object10("train", 128, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 64,
            lr: 3e-3,
            seed: 2,
            variant: Variant::NoAug,
            aug_policy: None,
        };
        let report = train_generator(&mut gen, &disc, &data, &cfg).unwrap();
        let first = report.epoch_mean_loss.first().unwrap();
        let last = report.epoch_mean_loss.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn aug_with_disabled_ops_reduces_to_no_aug() {
        let data = synth::object10("train", 64, 7).unwrap();
        let disc = tiny_disc(13);
        let mut gen_a = tiny_gen();
        let cfg_noaug = TrainConfig {
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            seed: 21,
            variant: Variant::NoAug,
            aug_policy: None,
        };
        let report_a = train_generator(&mut gen_a, &disc, &data, &cfg_noaug).unwrap();
        let mut gen_b = tiny_gen();
        let cfg_aug = TrainConfig {
            variant: Variant::Aug,
            aug_policy: Some(AugmentationPolicy::disabled(99)),
            ..cfg_noaug
        };
        let report_b = train_generator(&mut gen_b, &disc, &data, &cfg_aug).unwrap();
        for (a, b) in report_a
            .epoch_mean_loss
            .iter()
            .zip(report_b.epoch_mean_loss.iter())
        {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
