//! Classifier architectures shared by the discriminator and the victim
//! harness. All are 32x32 variants; `width_scale` shrinks channel counts for
//! desk-scale runs without changing topology.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d, Linear, NetBuilder, NormMode};
use crate::nn::{load_checkpoint, save_checkpoint, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Rn18,
    Vgg11,
    Cnn,
    MobileNetV2,
    WideResnet,
}

impl Architecture {
    pub fn all() -> &'static [Architecture] {
        &[
            Architecture::Rn18,
            Architecture::Vgg11,
            Architecture::Cnn,
            Architecture::MobileNetV2,
            Architecture::WideResnet,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Rn18 => "rn18",
            Architecture::Vgg11 => "vgg11",
            Architecture::Cnn => "cnn",
            Architecture::MobileNetV2 => "mobilenetv2",
            Architecture::WideResnet => "wrn",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rn18" | "resnet18" => Ok(Architecture::Rn18),
            "vgg11" => Ok(Architecture::Vgg11),
            "cnn" => Ok(Architecture::Cnn),
            "mobilenetv2" | "mn" | "mnv2" => Ok(Architecture::MobileNetV2),
            "wrn" | "wideresnet" | "wide-resnet" => Ok(Architecture::WideResnet),
            other => Err(Error::ArchUnknown(other.to_string())),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Architecture,
    pub num_classes: usize,
    pub in_channels: usize,
    pub width_scale: f32,
}

impl ClassifierConfig {
    pub fn new(arch: Architecture, num_classes: usize) -> Self {
        Self {
            arch,
            num_classes,
            in_channels: 3,
            width_scale: 1.0,
        }
    }

    pub fn with_width_scale(mut self, scale: f32) -> Self {
        self.width_scale = scale;
        self
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f32 * self.width_scale).round() as usize).max(4)
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    down: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let y = self.a.forward(x, mode)?.relu()?;
        let y = self.b.forward(&y, mode)?;
        let skip = match &self.down {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok((skip + y)?.relu()?)
    }
}

/// Pre-activation block used by the wide variant.
struct WideBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    down: Option<Conv2d>,
}

impl WideBlock {
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let pre = self.bn1.forward(x, mode)?.relu()?;
        let y = self.conv1.forward(&pre)?;
        let y = self.bn2.forward(&y, mode)?.relu()?;
        let y = self.conv2.forward(&y)?;
        let skip = match &self.down {
            Some(d) => d.forward(&pre)?,
            None => x.clone(),
        };
        Ok((skip + y)?)
    }
}

struct InvertedResidual {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    project: ConvBn,
    skip: bool,
}

impl InvertedResidual {
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut y = match &self.expand {
            Some(e) => e.forward(x, mode)?.relu()?,
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, mode)?.relu()?;
        y = self.project.forward(&y, mode)?;
        if self.skip {
            y = (y + x)?;
        }
        Ok(y)
    }
}

enum Stage {
    ConvBnRelu(ConvBn),
    Basic(BasicBlock),
    Wide(WideBlock),
    Inverted(InvertedResidual),
    MaxPool2,
    BnRelu(BatchNorm2d),
}

impl Stage {
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        match self {
            Stage::ConvBnRelu(cb) => Ok(cb.forward(x, mode)?.relu()?),
            Stage::Basic(b) => b.forward(x, mode),
            Stage::Wide(w) => w.forward(x, mode),
            Stage::Inverted(ir) => ir.forward(x, mode),
            Stage::MaxPool2 => Ok(x.max_pool2d(2)?),
            Stage::BnRelu(bn) => Ok(bn.forward(x, mode)?.relu()?),
        }
    }
}

/// A classifier over `[N, C, H, W]` pixel tensors, producing logits.
pub struct Classifier {
    config: ClassifierConfig,
    seed: u64,
    store: ParamStore,
    stages: Vec<Stage>,
    fc: Linear,
}

impl Classifier {
    pub fn build(config: ClassifierConfig, seed: u64, frozen: bool) -> Result<Self> {
        Self::build_with_dtype(config, seed, frozen, candle_core::DType::F32)
    }

    /// f64 builds exist for finite-difference oracles; same seed, same values.
    pub fn build_with_dtype(
        config: ClassifierConfig,
        seed: u64,
        frozen: bool,
        dtype: candle_core::DType,
    ) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        let device = candle_core::Device::Cpu;
        let mut store = ParamStore::with_dtype(&device, seed, dtype);
        let mut b = NetBuilder::new(&mut store, frozen);
        let (stages, feat) = match config.arch {
            Architecture::Rn18 => build_rn18(&config, &mut b)?,
            Architecture::Vgg11 => build_vgg11(&config, &mut b)?,
            Architecture::Cnn => build_cnn(&config, &mut b)?,
            Architecture::MobileNetV2 => build_mobilenet_v2(&config, &mut b)?,
            Architecture::WideResnet => build_wide_resnet(&config, &mut b)?,
        };
        let fc = b.linear("fc", feat, config.num_classes)?;
        Ok(Self {
            config,
            seed,
            store,
            stages,
            fc,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
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

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Logits `[N, num_classes]`. Gradients flow to the input; whether they
    /// flow to the parameters depends on how the net was built.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(&h, mode)?;
        }
        // global average pool
        h = h.mean(3)?.mean(2)?;
        self.fc.forward(&h)
    }

    pub fn save(&self, path: &std::path::Path, extra: serde_json::Value) -> Result<String> {
        let mut config = serde_json::json!({
            "kind": "classifier",
            "config": self.config,
            "seed": self.seed,
        });
        if let (Some(obj), Some(extra)) = (config.as_object_mut(), extra.as_object()) {
            for (k, v) in extra {
                obj.insert(k.clone(), v.clone());
            }
        }
        save_checkpoint(path, &config, &self.store)
    }

    /// Load a classifier checkpoint, rebuilding in the requested frozen-ness.
    pub fn load(path: &std::path::Path, frozen: bool) -> Result<(Self, serde_json::Value)> {
        let (meta, values) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
            return Err(Error::InvalidConfig(format!(
                "{} is not a classifier checkpoint",
                path.display()
            )));
        }
        let config: ClassifierConfig = serde_json::from_value(meta["config"].clone())?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut model = Self::build(config, seed, frozen)?;
        model.store.load_values(&values)?;
        Ok((model, meta))
    }
}

fn build_rn18(cfg: &ClassifierConfig, b: &mut NetBuilder) -> Result<(Vec<Stage>, usize)> {
    // CIFAR stem: 3x3, no max pool.
    let w = cfg.scaled(64);
    let mut stages = vec![Stage::ConvBnRelu(ConvBn {
        conv: b.conv2d("stem.conv", cfg.in_channels, w, 3, 1, 1, false)?,
        bn: b.batch_norm("stem.bn", w)?,
    })];
    let widths = [w, cfg.scaled(128), cfg.scaled(256), cfg.scaled(512)];
    let mut cin = w;
    for (g, &cout) in widths.iter().enumerate() {
        for i in 0..2 {
            let stride = if g > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{g}.{i}");
            let down = if stride != 1 || cin != cout {
                Some(ConvBn {
                    conv: b.conv2d(&format!("{name}.down.conv"), cin, cout, 1, stride, 0, false)?,
                    bn: b.batch_norm(&format!("{name}.down.bn"), cout)?,
                })
            } else {
                None
            };
            stages.push(Stage::Basic(BasicBlock {
                a: ConvBn {
                    conv: b.conv2d(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false)?,
                    bn: b.batch_norm(&format!("{name}.bn1"), cout)?,
                },
                b: ConvBn {
                    conv: b.conv2d(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false)?,
                    bn: b.batch_norm(&format!("{name}.bn2"), cout)?,
                },
                down,
            }));
            cin = cout;
        }
    }
    Ok((stages, cin))
}

fn build_vgg11(cfg: &ClassifierConfig, b: &mut NetBuilder) -> Result<(Vec<Stage>, usize)> {
    // Layout A: 64 M 128 M 256 256 M 512 512 M 512 512 M
    let plan: &[Option<usize>] = &[
        Some(64),
        None,
        Some(128),
        None,
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        None,
    ];
    let mut stages = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, entry) in plan.iter().enumerate() {
        match entry {
            Some(base) => {
                let cout = cfg.scaled(*base);
                stages.push(Stage::ConvBnRelu(ConvBn {
                    conv: b.conv2d(&format!("conv{i}"), cin, cout, 3, 1, 1, false)?,
                    bn: b.batch_norm(&format!("bn{i}"), cout)?,
                }));
                cin = cout;
            }
            None => stages.push(Stage::MaxPool2),
        }
    }
    Ok((stages, cin))
}

/// The small baseline CNN: five conv layers, roughly 1M parameters at scale
/// 1.0, which lands near a 67% clean CIFAR10 accuracy.
fn build_cnn(cfg: &ClassifierConfig, b: &mut NetBuilder) -> Result<(Vec<Stage>, usize)> {
    let plan = [
        (64usize, 1usize),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 2),
    ];
    let mut stages = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, (base, stride)) in plan.iter().enumerate() {
        let cout = cfg.scaled(*base);
        stages.push(Stage::ConvBnRelu(ConvBn {
            conv: b.conv2d(&format!("conv{i}"), cin, cout, 3, *stride, 1, false)?,
            bn: b.batch_norm(&format!("bn{i}"), cout)?,
        }));
        cin = cout;
    }
    Ok((stages, cin))
}

fn build_mobilenet_v2(cfg: &ClassifierConfig, b: &mut NetBuilder) -> Result<(Vec<Stage>, usize)> {
    // (expansion, channels, repeats, stride); CIFAR variant keeps the stem
    // and the first two stages at stride 1.
    let settings: &[(usize, usize, usize, usize)] = &[
        (1, 16, 1, 1),
        (6, 24, 2, 1),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let stem = cfg.scaled(32);
    let mut stages = vec![Stage::ConvBnRelu(ConvBn {
        conv: b.conv2d("stem.conv", cfg.in_channels, stem, 3, 1, 1, false)?,
        bn: b.batch_norm("stem.bn", stem)?,
    })];
    let mut cin = stem;
    for (s, &(t, c, n, stride)) in settings.iter().enumerate() {
        let cout = cfg.scaled(c);
        for i in 0..n {
            let stride = if i == 0 { stride } else { 1 };
            let name = format!("ir{s}.{i}");
            let hidden = cin * t;
            let expand = if t == 1 {
                None
            } else {
                Some(ConvBn {
                    conv: b.conv2d(&format!("{name}.expand.conv"), cin, hidden, 1, 1, 0, false)?,
                    bn: b.batch_norm(&format!("{name}.expand.bn"), hidden)?,
                })
            };
            let depthwise = ConvBn {
                conv: b.conv2d_grouped(
                    &format!("{name}.dw.conv"),
                    hidden,
                    hidden,
                    3,
                    stride,
                    1,
                    hidden,
                )?,
                bn: b.batch_norm(&format!("{name}.dw.bn"), hidden)?,
            };
            let project = ConvBn {
                conv: b.conv2d(&format!("{name}.project.conv"), hidden, cout, 1, 1, 0, false)?,
                bn: b.batch_norm(&format!("{name}.project.bn"), cout)?,
            };
            stages.push(Stage::Inverted(InvertedResidual {
                expand,
                depthwise,
                project,
                skip: stride == 1 && cin == cout,
            }));
            cin = cout;
        }
    }
    let head = cfg.scaled(1280);
    stages.push(Stage::ConvBnRelu(ConvBn {
        conv: b.conv2d("head.conv", cin, head, 1, 1, 0, false)?,
        bn: b.batch_norm("head.bn", head)?,
    }));
    Ok((stages, head))
}

fn build_wide_resnet(cfg: &ClassifierConfig, b: &mut NetBuilder) -> Result<(Vec<Stage>, usize)> {
    // WRN-28-10: 3 groups x 4 pre-activation blocks, widen factor 10.
    let n = 4;
    let widths = [
        cfg.scaled(16),
        cfg.scaled(160),
        cfg.scaled(320),
        cfg.scaled(640),
    ];
    let mut stages = vec![Stage::ConvBnRelu(ConvBn {
        conv: b.conv2d("stem.conv", cfg.in_channels, widths[0], 3, 1, 1, false)?,
        bn: b.batch_norm("stem.bn", widths[0])?,
    })];
    let mut cin = widths[0];
    for g in 0..3 {
        let cout = widths[g + 1];
        for i in 0..n {
            let stride = if g > 0 && i == 0 { 2 } else { 1 };
            let name = format!("group{g}.{i}");
            let down = if stride != 1 || cin != cout {
                Some(b.conv2d(&format!("{name}.down"), cin, cout, 1, stride, 0, false)?)
            } else {
                None
            };
            stages.push(Stage::Wide(WideBlock {
                bn1: b.batch_norm(&format!("{name}.bn1"), cin)?,
                conv1: b.conv2d(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false)?,
                bn2: b.batch_norm(&format!("{name}.bn2"), cout)?,
                conv2: b.conv2d(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false)?,
                down,
            }));
            cin = cout;
        }
    }
    stages.push(Stage::BnRelu(b.batch_norm("final.bn", cin)?));
    Ok((stages, cin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny(arch: Architecture) -> ClassifierConfig {
        ClassifierConfig::new(arch, 10).with_width_scale(0.125)
    }

    #[test]
    fn every_architecture_produces_logits() {
        let device = Device::Cpu;
        let x = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &device).unwrap();
        for &arch in Architecture::all() {
            let model = Classifier::build(tiny(arch), 0, false).unwrap();
            let logits = model
                .forward(&x, NormMode::BatchStats { update_running: false })
                .unwrap();
            assert_eq!(logits.dims2().unwrap(), (2, 10), "{arch}");
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        for &arch in Architecture::all() {
            let a = Classifier::build(tiny(arch), 7, false).unwrap();
            let b = Classifier::build(tiny(arch), 7, false).unwrap();
            let c = Classifier::build(tiny(arch), 8, false).unwrap();
            assert_eq!(a.param_hash().unwrap(), b.param_hash().unwrap(), "{arch}");
            assert_ne!(a.param_hash().unwrap(), c.param_hash().unwrap(), "{arch}");
        }
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let device = Device::Cpu;
        let model = Classifier::build(tiny(Architecture::Cnn), 1, false).unwrap();
        let row = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &device).unwrap();
        let x = Tensor::cat(&[&row, &row], 0).unwrap();
        // batch statistics see the same batch either way, so rows must agree
        let logits = model
            .forward(&x, NormMode::BatchStats { update_running: false })
            .unwrap();
        let a = logits.narrow(0, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = logits.narrow(0, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn cnn_parameter_count_is_about_one_million_at_full_width() {
        let model = Classifier::build(
            ClassifierConfig::new(Architecture::Cnn, 10),
            0,
            false,
        )
        .unwrap();
        let p = model.num_params();
        assert!((800_000..1_400_000).contains(&p), "got {p}");
    }

    #[test]
    fn arch_names_round_trip() {
        for &arch in Architecture::all() {
            let parsed: Architecture = arch.name().parse().unwrap();
            assert_eq!(parsed, arch);
        }
        assert!("alexnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        let model = Classifier::build(tiny(Architecture::Cnn), 3, false).unwrap();
        let hash = model.save(&path, serde_json::json!({})).unwrap();
        let (loaded, _) = Classifier::load(&path, true).unwrap();
        assert_eq!(loaded.param_hash().unwrap(), hash);
    }
}
