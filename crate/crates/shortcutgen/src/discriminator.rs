//! The frozen discriminator the generator is trained against: either
//! randomly initialized (the mechanism of interest) or a well-trained
//! checkpoint (the failure-mode ablation).

use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::nn::layers::NormMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    RandomInit { seed: u64 },
    Pretrained { checkpoint: PathBuf },
}

/// Normalization statistics used while the discriminator is frozen. A
/// never-trained net has meaningless running buffers, so the random source
/// defaults to instantaneous batch statistics; a pretrained one keeps its
/// learned running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenNorm {
    BatchStats,
    Running,
}

impl FrozenNorm {
    fn mode(self) -> NormMode {
        match self {
            FrozenNorm::BatchStats => NormMode::BatchStats {
                update_running: false,
            },
            FrozenNorm::Running => NormMode::Running,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub architecture: Architecture,
    pub source: ParamSource,
    pub num_classes: usize,
    pub width_scale: f32,
    pub norm: FrozenNorm,
}

impl DiscriminatorSpec {
    pub fn random(architecture: Architecture, num_classes: usize, seed: u64) -> Self {
        Self {
            architecture,
            source: ParamSource::RandomInit { seed },
            num_classes,
            width_scale: 1.0,
            norm: FrozenNorm::BatchStats,
        }
    }

    pub fn pretrained(checkpoint: PathBuf) -> Self {
        Self {
            // architecture/classes are read from the checkpoint at build time
            architecture: Architecture::Rn18,
            source: ParamSource::Pretrained { checkpoint },
            num_classes: 10,
            width_scale: 1.0,
            norm: FrozenNorm::Running,
        }
    }

    pub fn with_width_scale(mut self, scale: f32) -> Self {
        self.width_scale = scale;
        self
    }
}

/// A classifier whose parameters sit outside the autograd graph: gradients
/// flow through its inputs, never into its weights.
pub struct FrozenClassifier {
    spec: DiscriminatorSpec,
    net: Classifier,
    param_hash: String,
}

pub fn build_discriminator(spec: DiscriminatorSpec) -> Result<FrozenClassifier> {
    let (net, spec) = match &spec.source {
        ParamSource::RandomInit { seed } => {
            let cfg = ClassifierConfig::new(spec.architecture, spec.num_classes)
                .with_width_scale(spec.width_scale);
            (Classifier::build(cfg, *seed, true)?, spec)
        }
        ParamSource::Pretrained { checkpoint } => {
            if !checkpoint.exists() {
                return Err(Error::CheckpointNotFound(checkpoint.display().to_string()));
            }
            let (net, _meta) = Classifier::load(checkpoint, true)?;
            let mut spec = spec.clone();
            spec.architecture = net.config().arch;
            spec.num_classes = net.config().num_classes;
            spec.width_scale = net.config().width_scale;
            return Ok(FrozenClassifier {
                param_hash: net.param_hash()?,
                net,
                spec,
            });
        }
    };
    Ok(FrozenClassifier {
        param_hash: net.param_hash()?,
        net,
        spec: spec.clone(),
    })
}

impl FrozenClassifier {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Hash recorded at construction; training asserts it never changes.
    pub fn param_hash(&self) -> &str {
        &self.param_hash
    }

    /// Recompute the hash from the live parameters.
    pub fn current_param_hash(&self) -> Result<String> {
        self.net.param_hash()
    }

    /// Canonical parameter byte serialization (for byte-identity checks).
    pub fn serialized_params(&self) -> Result<Vec<u8>> {
        let values = self.net.store().to_value_map()?;
        let mut out = Vec::new();
        for (name, (dims, data)) in &values {
            out.extend_from_slice(name.as_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Logits for a pixel tensor. Gradients flow to the input only.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x, self.spec.norm.mode())
    }

    /// Validation accuracy (percent), batched to bound memory.
    pub fn accuracy(&self, ds: &crate::data::LabeledDataset, batch_size: usize) -> Result<f64> {
        let device = candle_core::Device::Cpu;
        let labels = ds.labels();
        let mut correct = 0usize;
        let mut row = 0usize;
        while row < ds.len() {
            let take = batch_size.min(ds.len() - row);
            let rows: Vec<usize> = (row..row + take).collect();
            let x = ds.batch.rows_to_tensor(&rows, &device)?;
            let logits = self.classify(&x)?;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;
    use candle_core::{DType, Device, Var};

    fn tiny_spec(seed: u64) -> DiscriminatorSpec {
        DiscriminatorSpec::random(Architecture::Cnn, 10, seed).with_width_scale(0.125)
    }

    #[test]
    fn random_init_is_deterministic_per_seed() {
        let a = build_discriminator(tiny_spec(7)).unwrap();
        let b = build_discriminator(tiny_spec(7)).unwrap();
        let c = build_discriminator(tiny_spec(8)).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn classify_leaves_params_untouched() {
        let disc = build_discriminator(tiny_spec(1)).unwrap();
        let before = disc.serialized_params().unwrap();
        let x = Tensor::rand(0f32, 1f32, (4, 3, 32, 32), &Device::Cpu).unwrap();
        for _ in 0..3 {
            let logits = disc.classify(&x).unwrap();
            let loss = logits.sqr().unwrap().mean_all().unwrap();
            let _grads = loss.backward().unwrap();
        }
        assert_eq!(disc.serialized_params().unwrap(), before);
        assert_eq!(disc.current_param_hash().unwrap(), disc.param_hash());
    }

    #[test]
    fn random_discriminator_is_near_chance() {
        // Chance is 10% on balanced 10-class data; a random net must sit in
        // [5%, 20%].
        let disc = build_discriminator(tiny_spec(3)).unwrap();
        let val = synth::object10("val", 500, 99).unwrap();
        let acc = disc.accuracy(&val, 250).unwrap();
        assert!((5.0..=20.0).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn missing_pretrained_checkpoint_errors() {
        let spec = DiscriminatorSpec::pretrained(PathBuf::from("/no/such.ckpt"));
        assert!(matches!(
            build_discriminator(spec),
            Err(Error::CheckpointNotFound(_))
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // f64 end to end so the finite-difference oracle is meaningful.
        let cfg = ClassifierConfig::new(Architecture::Cnn, 10).with_width_scale(0.125);
        let net = Classifier::build_with_dtype(cfg, 5, true, DType::F64).unwrap();
        let device = Device::Cpu;
        let x0 = Tensor::rand(0f64, 1f64, (1, 3, 8, 8), &device).unwrap();
        let mode = NormMode::BatchStats {
            update_running: false,
        };
        // scalar objective: fixed random projection of the logits
        let proj = Tensor::rand(0f64, 1f64, (10, 1), &device).unwrap();
        let objective = |x: &Tensor| -> f64 {
            net.forward(x, mode)
                .unwrap()
                .matmul(&proj)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let var = Var::from_tensor(&x0).unwrap();
        let y = net.forward(var.as_tensor(), mode).unwrap();
        let loss = y.matmul(&proj).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .expect("input gradient")
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let h = 1e-5;
        let flat = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // probe 4 pixels
        for &idx in &[0usize, 17, 63, 100] {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let shape = (1usize, 3usize, 8usize, 8usize);
            let fp = objective(&Tensor::from_vec(plus, shape, &device).unwrap());
            let fm = objective(&Tensor::from_vec(minus, shape, &device).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[idx].abs().max(1e-8);
            let rel = (fd - analytic[idx]).abs() / denom;
            assert!(rel < 1e-3, "pixel {idx}: fd {fd} vs analytic {}", analytic[idx]);
        }
    }
}
