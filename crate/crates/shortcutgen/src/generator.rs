//! The perturbation generator: residual encoder/decoder that maps an image
//! to an additive perturbation bounded inside (-epsilon, +epsilon) by
//! construction, with a latent tap at the last non-upsampling layer.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::budget::PerturbationBudget;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, InstanceNorm2d, NetBuilder};
use crate::nn::{load_checkpoint, save_checkpoint, ParamStore};
use crate::perturb::{GeneratorStamp, PerturbationSet, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub num_residual_blocks: usize,
    pub downsample_stages: usize,
    pub budget: PerturbationBudget,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 64,
            num_residual_blocks: 6,
            downsample_stages: 2,
            budget: PerturbationBudget::default_linf(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_residual_blocks < 1 {
            return Err(Error::InvalidConfig("need at least one residual block".into()));
        }
        if self.downsample_stages < 1 {
            return Err(Error::InvalidConfig("need at least one downsample stage".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig("zero-width generator".into()));
        }
        Ok(())
    }

    /// Channel count of the residual trunk (= latent dimensionality).
    pub fn trunk_width(&self) -> usize {
        self.base_width << self.downsample_stages
    }
}

/// `epsilon * tanh(raw)`: smooth bijection onto (-epsilon, +epsilon), so the
/// budget holds by construction rather than by post-hoc clipping.
pub fn soft_clip(raw: &Tensor, epsilon: f32) -> Result<Tensor> {
    Ok((raw.tanh()? * epsilon as f64)?)
}

struct ConvNorm {
    conv: Conv2d,
    norm: InstanceNorm2d,
}

struct ResBlock {
    a: ConvNorm,
    b: ConvNorm,
}

struct GenLayers {
    stem: ConvNorm,
    down: Vec<ConvNorm>,
    blocks: Vec<ResBlock>,
    up: Vec<ConvNorm>,
    head: Conv2d,
}

/// Spatially-pooled activation of the last non-upsampling layer, one record
/// per sample. Labels ride along only to color analysis plots.
#[derive(Debug, Clone)]
pub struct LatentRecord {
    pub sample_id: String,
    pub vector: Vec<f32>,
    pub label: Option<usize>,
}

pub struct GeneratorModel {
    config: GeneratorConfig,
    seed: u64,
    store: ParamStore,
    layers: GenLayers,
    variant: Provenance,
    forward_count: AtomicUsize,
}

fn pad_same(x: &Tensor, pad: usize) -> Result<Tensor> {
    Ok(x
        .pad_with_same(2, pad, pad)?
        .pad_with_same(3, pad, pad)?)
}

impl GeneratorModel {
    /// Deterministic construction: two builds with equal (config, seed) have
    /// identical parameters.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = candle_core::Device::Cpu;
        let mut store = ParamStore::new(&device, seed);
        let mut b = NetBuilder::new(&mut store, false);
        let w = config.base_width;
        let stem = ConvNorm {
            conv: b.conv2d("stem.conv", config.in_channels, w, 7, 1, 0, false)?,
            norm: b.instance_norm("stem.norm", w)?,
        };
        let mut down = Vec::new();
        for i in 0..config.downsample_stages {
            let cin = w << i;
            let cout = w << (i + 1);
            down.push(ConvNorm {
                conv: b.conv2d(&format!("down.{i}.conv"), cin, cout, 3, 2, 1, false)?,
                norm: b.instance_norm(&format!("down.{i}.norm"), cout)?,
            });
        }
        let trunk = config.trunk_width();
        let mut blocks = Vec::new();
        for i in 0..config.num_residual_blocks {
            blocks.push(ResBlock {
                a: ConvNorm {
                    conv: b.conv2d(&format!("block.{i}.conv1"), trunk, trunk, 3, 1, 1, false)?,
                    norm: b.instance_norm(&format!("block.{i}.norm1"), trunk)?,
                },
                b: ConvNorm {
                    conv: b.conv2d(&format!("block.{i}.conv2"), trunk, trunk, 3, 1, 1, false)?,
                    norm: b.instance_norm(&format!("block.{i}.norm2"), trunk)?,
                },
            });
        }
        let mut up = Vec::new();
        for i in (0..config.downsample_stages).rev() {
            let cin = w << (i + 1);
            let cout = w << i;
            up.push(ConvNorm {
                conv: b.conv2d(&format!("up.{i}.conv"), cin, cout, 3, 1, 1, false)?,
                norm: b.instance_norm(&format!("up.{i}.norm"), cout)?,
            });
        }
        let head = b.conv2d("head.conv", w, config.in_channels, 7, 1, 0, true)?;
        let layers = GenLayers {
            stem,
            down,
            blocks,
            up,
            head,
        };
        Ok(Self {
            config,
            seed,
            store,
            layers,
            variant: Provenance::NoAug,
            forward_count: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Which training variant produced these parameters; stamped by the
    /// trainer and carried into every perturbation set.
    pub fn variant(&self) -> Provenance {
        self.variant
    }

    pub fn set_variant(&mut self, variant: Provenance) {
        self.variant = variant;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    pub fn forward_count(&self) -> usize {
        self.forward_count.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_n, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "generator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let factor = 1usize << self.config.downsample_stages;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {h}x{w} must be divisible by {factor}"
            )));
        }
        Ok(())
    }

    /// Raw (pre-clip) head output plus the latent tap (the activation of the
    /// last residual block, before the first upsampling stage).
    fn forward_inner(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut h = pad_same(x, 3)?;
        h = self.layers.stem.conv.forward(&h)?;
        h = self.layers.stem.norm.forward(&h)?.relu()?;
        for d in &self.layers.down {
            h = d.conv.forward(&h)?;
            h = d.norm.forward(&h)?.relu()?;
        }
        for blk in &self.layers.blocks {
            let residual = h.clone();
            let mut y = blk.a.conv.forward(&h)?;
            y = blk.a.norm.forward(&y)?.relu()?;
            y = blk.b.conv.forward(&y)?;
            y = blk.b.norm.forward(&y)?;
            h = (residual + y)?;
        }
        let latent = h.clone();
        for u in &self.layers.up {
            let (_n, _c, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = u.conv.forward(&h)?;
            h = u.norm.forward(&h)?.relu()?;
        }
        let raw = self.layers.head.forward(&pad_same(&h, 3)?)?;
        Ok((raw, latent))
    }

    /// Bounded perturbations for a pixel tensor; shape preserved.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (raw, _) = self.forward_inner(x)?;
        soft_clip(&raw, self.config.budget.epsilon())
    }

    /// Perturbations plus pooled latents in one pass.
    pub fn forward_with_latent(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (raw, latent) = self.forward_inner(x)?;
        let delta = soft_clip(&raw, self.config.budget.epsilon())?;
        let pooled = latent.mean(3)?.mean(2)?;
        Ok((delta, pooled))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<String> {
        let mut config = serde_json::json!({
            "kind": "generator",
            "config": self.config,
            "seed": self.seed,
            "variant": self.variant,
        });
        if let (Some(obj), Some(extra)) = (config.as_object_mut(), extra.as_object()) {
            for (k, v) in extra {
                obj.insert(k.clone(), v.clone());
            }
        }
        save_checkpoint(path, &config, &self.store)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (meta, values) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("generator") {
            return Err(Error::InvalidConfig(format!(
                "{} is not a generator checkpoint",
                path.display()
            )));
        }
        let config: GeneratorConfig = serde_json::from_value(meta["config"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut model = Self::build(config, seed)?;
        model.store.load_values(&values)?;
        if let Some(v) = meta.get("variant") {
            model.variant = serde_json::from_value(v.clone())?;
        }
        Ok((model, meta))
    }
}

/// Generate perturbations for a batch: exactly one forward evaluation, no
/// label access, output within budget by construction.
pub fn generate(model: &GeneratorModel, images: &ImageBatch) -> Result<PerturbationSet> {
    let device = candle_core::Device::Cpu;
    let x = images.to_tensor(&device)?;
    let delta = model.forward(&x)?;
    let (n, c, h, w) = delta.dims4()?;
    let flat = delta.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    let pairs = images.sample_ids().iter().enumerate().map(|(i, id)| {
        let arr = Array3::from_shape_vec((c, h, w), flat[i * per..(i + 1) * per].to_vec())
            .expect("shape matches");
        (id.clone(), arr)
    });
    debug_assert_eq!(n, images.len());
    PerturbationSet::from_pairs(
        model.config.budget,
        model.variant,
        vec![GeneratorStamp {
            checkpoint_hash: model.param_hash()?,
            seed: model.seed,
        }],
        pairs,
    )
}

/// One latent record per sample: global average pool of the tapped layer.
pub fn extract_latents(model: &GeneratorModel, images: &ImageBatch) -> Result<Vec<LatentRecord>> {
    let device = candle_core::Device::Cpu;
    let x = images.to_tensor(&device)?;
    let (_delta, pooled) = model.forward_with_latent(&x)?;
    let dims = pooled.dims2()?;
    let flat = pooled.flatten_all()?.to_vec1::<f32>()?;
    let labels = images.labels();
    Ok(images
        .sample_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| LatentRecord {
            sample_id: id.clone(),
            vector: flat[i * dims.1..(i + 1) * dims.1].to_vec(),
            label: labels.map(|l| l[i]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_id;
    use ndarray::Array4;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            base_width: 4,
            num_residual_blocks: 1,
            ..Default::default()
        }
    }

    fn batch(n: usize, side: usize, seed: u64) -> ImageBatch {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut pixels = Array4::zeros((n, 3, side, side));
        for v in pixels.iter_mut() {
            *v = rng.random::<f32>();
        }
        let ids = (0..n).map(|i| sample_id("t", i)).collect();
        ImageBatch::new(pixels, Some(vec![0; n]), ids, Some(10)).unwrap()
    }

    #[test]
    fn same_config_seed_same_params() {
        let a = GeneratorModel::build(tiny_config(), 5).unwrap();
        let b = GeneratorModel::build(tiny_config(), 5).unwrap();
        let c = GeneratorModel::build(tiny_config(), 6).unwrap();
        assert_eq!(a.param_hash().unwrap(), b.param_hash().unwrap());
        assert_ne!(a.param_hash().unwrap(), c.param_hash().unwrap());
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let model = GeneratorModel::build(tiny_config(), 0).unwrap();
        for side in [8usize, 16, 32] {
            let x = batch(2, side, 1).to_tensor(&candle_core::Device::Cpu).unwrap();
            let y = model.forward(&x).unwrap();
            assert_eq!(y.dims4().unwrap(), (2, 3, side, side));
        }
    }

    #[test]
    fn soft_clip_matches_reference_tanh() {
        let device = candle_core::Device::Cpu;
        let eps = 8.0f32 / 255.0;
        let raw = Tensor::from_vec(vec![0.0f32, 1.0, -3.0, 50.0], (4,), &device).unwrap();
        let out = soft_clip(&raw, eps).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out[0], 0.0);
        // independent reference: f64 tanh from the standard library
        let expect = (1.0f64.tanh() * eps as f64) as f32;
        assert!((out[1] - expect).abs() < 1e-7, "got {}, want {expect}", out[1]);
        assert!(out[2] < 0.0);
        // asymptote: approaches but never exceeds epsilon
        assert!(out[3] <= eps);
        assert!(out[3] > eps * 0.999);
    }

    #[test]
    fn generate_is_deterministic_and_bounded() {
        let model = GeneratorModel::build(tiny_config(), 3).unwrap();
        let images = batch(4, 16, 2);
        let a = generate(&model, &images).unwrap();
        let b = generate(&model, &images).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert!(a.verify_budget().ok());
    }

    #[test]
    fn generate_never_reads_labels() {
        let model = GeneratorModel::build(tiny_config(), 3).unwrap();
        let images = batch(2, 16, 2).with_label_trap();
        // would panic if labels were touched
        let perts = generate(&model, &images).unwrap();
        assert_eq!(perts.len(), 2);
    }

    #[test]
    fn one_forward_per_generate_call() {
        let model = GeneratorModel::build(tiny_config(), 3).unwrap();
        let images = batch(8, 16, 2);
        let before = model.forward_count();
        generate(&model, &images).unwrap();
        assert_eq!(model.forward_count(), before + 1);
    }

    #[test]
    fn latents_constant_dim_and_input_dependent() {
        let model = GeneratorModel::build(tiny_config(), 3).unwrap();
        let images = batch(3, 16, 2);
        let latents = extract_latents(&model, &images).unwrap();
        assert_eq!(latents.len(), 3);
        let dim = latents[0].vector.len();
        assert_eq!(dim, tiny_config().trunk_width());
        assert!(latents.iter().all(|l| l.vector.len() == dim));
        // duplicated input rows produce identical latents
        let mut dup = batch(1, 16, 9);
        let pixels = dup.pixels().clone();
        let two = ndarray::concatenate(
            ndarray::Axis(0),
            &[pixels.view(), pixels.view()],
        )
        .unwrap();
        dup = ImageBatch::new(
            two,
            Some(vec![0, 0]),
            vec![sample_id("d", 0), sample_id("d", 1)],
            Some(10),
        )
        .unwrap();
        let lat = extract_latents(&model, &dup).unwrap();
        for (a, b) in lat[0].vector.iter().zip(lat[1].vector.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_output() {
        let model = GeneratorModel::build(tiny_config(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let hash = model.save(&path, serde_json::json!({"variant": "no_aug"})).unwrap();
        let (loaded, meta) = GeneratorModel::load(&path).unwrap();
        assert_eq!(loaded.param_hash().unwrap(), hash);
        assert_eq!(meta["variant"], "no_aug");
        let images = batch(2, 16, 4);
        let a = generate(&model, &images).unwrap();
        let b = generate(&loaded, &images).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn rejects_bad_config_and_bad_shapes() {
        let mut cfg = tiny_config();
        cfg.num_residual_blocks = 0;
        assert!(GeneratorModel::build(cfg, 0).is_err());
        let model = GeneratorModel::build(tiny_config(), 0).unwrap();
        let x = Tensor::zeros((1, 3, 30, 30), candle_core::DType::F32, &candle_core::Device::Cpu)
            .unwrap();
        assert!(model.forward(&x).is_err());
    }
}
