//! End-to-end experiment orchestration: a fixed stage DAG (generators ->
//! poisons -> victims -> analysis -> report) with content-hash caching, so
//! reruns of an unchanged config do zero retraining.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{tsne_export, TsneParams};
use crate::arch::Architecture;
use crate::data::adapt::to_rgb_square;
use crate::data::{registry, LabeledDataset};
use crate::discriminator::{build_discriminator, DiscriminatorSpec};
use crate::error::{Error, Result};
use crate::generator::{extract_latents, GeneratorConfig, GeneratorModel};
use crate::hashing::{derive_seed, sha256_hex};
use crate::perturb::Provenance;
use crate::poison::{poison_dataset, CombinePolicy};
use crate::report::{final_peak_csv, render_final_peak_table, MethodRow};
use crate::trainer::{train_and_save, TrainConfig, Variant};
use crate::victim::{
    summarize, train_and_save_classifier, train_victim, Summary, VictimConfig, VictimData,
    VictimRunRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub name: String,
    pub train_size: usize,
    pub val_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSection {
    pub base_width: usize,
    pub residual_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSection {
    pub arch: Architecture,
    pub width_scale: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimSection {
    pub arch: Architecture,
    pub width_scale: f32,
    pub epochs: usize,
    pub runs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneSection {
    pub datasets: Vec<String>,
    pub samples: usize,
    pub perplexity: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_root: PathBuf,
    pub dataset: DatasetSection,
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorSection,
    pub victim: VictimSection,
    pub pretrain: PretrainSection,
    pub tsne: TsneSection,
    pub stages: Vec<Stage>,
    /// Cache directory for real datasets; `None` falls back to the env var.
    pub data_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The desk-scale defaults: a 4000/1000 subset, 10 generator epochs,
    /// 15 victim epochs, 3 runs, compact widths sized for CPU-class hardware.
    pub fn desk(out_root: PathBuf, seed: u64) -> Self {
        Self {
            name: "desk".into(),
            seed,
            out_root,
            dataset: DatasetSection {
                name: "cifar10-synth".into(),
                train_size: 4000,
                val_size: 1000,
            },
            generator: GeneratorSection {
                base_width: 8,
                residual_blocks: 2,
                epochs: 10,
                batch_size: 128,
                lr: 2e-3,
            },
            discriminator: DiscriminatorSection {
                arch: Architecture::Cnn,
                width_scale: 0.125,
            },
            victim: VictimSection {
                arch: Architecture::Cnn,
                width_scale: 0.125,
                epochs: 15,
                runs: 3,
                batch_size: 128,
                lr: 0.1,
                augment: true,
            },
            pretrain: PretrainSection { epochs: 15 },
            tsne: TsneSection {
                datasets: vec![
                    "cifar10-synth".into(),
                    "mnist-synth".into(),
                    "imagenet-synth".into(),
                ],
                samples: 400,
                perplexity: 30.0,
                iters: 500,
            },
            stages: Stage::all().to_vec(),
            data_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Stages must appear after everything they consume.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.train_size == 0 || self.dataset.val_size == 0 {
            return Err(Error::InvalidConfig("empty dataset split".into()));
        }
        let mut seen: Vec<Stage> = Vec::new();
        for stage in &self.stages {
            for dep in stage.deps() {
                if !seen.contains(&dep) {
                    return Err(Error::InvalidConfig(format!(
                        "stage `{stage}` requires `{dep}` earlier in the stage list"
                    )));
                }
            }
            seen.push(*stage);
        }
        Ok(())
    }

    fn dataset_opts(&self, size: usize) -> registry::DatasetOptions {
        registry::DatasetOptions {
            data_dir: self.data_dir.clone(),
            size: Some(size),
            seed: derive_seed(self.seed, "dataset"),
        }
    }

    pub fn load_train(&self) -> Result<LabeledDataset> {
        registry::load(
            &self.dataset.name,
            "train",
            &self.dataset_opts(self.dataset.train_size),
        )
    }

    pub fn load_val(&self) -> Result<LabeledDataset> {
        registry::load(
            &self.dataset.name,
            "val",
            &self.dataset_opts(self.dataset.val_size),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainDisc,
    GenNoAug,
    GenAug,
    GenPretrained,
    PoisonNoAug,
    PoisonAug,
    PoisonCombined,
    PoisonPretrained,
    VictimClean,
    VictimNoAug,
    VictimAug,
    VictimCombined,
    VictimPretrained,
    Tsne,
    Report,
}

impl Stage {
    pub fn all() -> &'static [Stage] {
        use Stage::*;
        &[
            PretrainDisc,
            GenNoAug,
            GenAug,
            GenPretrained,
            PoisonNoAug,
            PoisonAug,
            PoisonCombined,
            PoisonPretrained,
            VictimClean,
            VictimNoAug,
            VictimAug,
            VictimCombined,
            VictimPretrained,
            Tsne,
            Report,
        ]
    }

    pub fn name(&self) -> &'static str {
        use Stage::*;
        match self {
            PretrainDisc => "pretrain-disc",
            GenNoAug => "gen-no-aug",
            GenAug => "gen-aug",
            GenPretrained => "gen-pretrained",
            PoisonNoAug => "poison-no-aug",
            PoisonAug => "poison-aug",
            PoisonCombined => "poison-combined",
            PoisonPretrained => "poison-pretrained",
            VictimClean => "victim-clean",
            VictimNoAug => "victim-no-aug",
            VictimAug => "victim-aug",
            VictimCombined => "victim-combined",
            VictimPretrained => "victim-pretrained",
            Tsne => "tsne",
            Report => "report",
        }
    }

    pub fn deps(&self) -> Vec<Stage> {
        use Stage::*;
        match self {
            PretrainDisc | GenNoAug | GenAug | VictimClean => vec![],
            GenPretrained => vec![PretrainDisc],
            PoisonNoAug => vec![GenNoAug],
            PoisonAug => vec![GenAug],
            PoisonCombined => vec![GenNoAug, GenAug],
            PoisonPretrained => vec![GenPretrained],
            VictimNoAug => vec![PoisonNoAug],
            VictimAug => vec![PoisonAug],
            VictimCombined => vec![PoisonCombined],
            VictimPretrained => vec![PoisonPretrained],
            Tsne => vec![GenNoAug],
            Report => vec![VictimClean],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::all()
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    key: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    completed_unix: u64,
}

/// Everything the run produced, with enough structure for assertions.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunBundle {
    pub out_root: PathBuf,
    pub stages_run: Vec<String>,
    pub stages_cached: Vec<String>,
    /// Victim records keyed by stage name ("victim-clean", ...).
    pub victim_records: BTreeMap<String, Vec<VictimRunRecord>>,
    pub victim_summaries: BTreeMap<String, Summary>,
    /// Silhouette score per t-SNE dataset.
    pub silhouettes: BTreeMap<String, f64>,
    /// Rendered report files.
    pub reports: Vec<PathBuf>,
    /// Stage directory per stage name.
    pub stage_dirs: BTreeMap<String, PathBuf>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    /// stage name -> cache key (inputs for downstream stages)
    keys: BTreeMap<String, String>,
    bundle: RunBundle,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunBundle> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_root)?;
    let mut runner = Runner {
        cfg,
        keys: BTreeMap::new(),
        bundle: RunBundle {
            out_root: cfg.out_root.clone(),
            ..Default::default()
        },
    };
    for stage in &cfg.stages {
        runner
            .run_stage(*stage)
            .map_err(|e| Error::stage(stage.name(), e))?;
    }
    let bundle_json = serde_json::to_string_pretty(&runner.bundle)?;
    std::fs::write(cfg.out_root.join("bundle.json"), bundle_json)?;
    Ok(runner.bundle)
}

impl<'a> Runner<'a> {
    fn stage_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for dep in stage.deps() {
            let key = self.keys.get(dep.name()).ok_or_else(|| {
                Error::InvalidConfig(format!("stage `{stage}` missing dep `{dep}`"))
            })?;
            inputs.insert(dep.name().to_string(), key.clone());
        }
        Ok(inputs)
    }

    fn stage_config_json(&self, stage: Stage) -> Result<String> {
        use Stage::*;
        let cfg = self.cfg;
        let v = match stage {
            PretrainDisc => serde_json::json!({
                "dataset": cfg.dataset, "disc": cfg.discriminator,
                "victim": cfg.victim, "pretrain": cfg.pretrain, "seed": cfg.seed,
            }),
            GenNoAug | GenAug | GenPretrained => serde_json::json!({
                "dataset": cfg.dataset, "generator": cfg.generator,
                "disc": cfg.discriminator, "seed": cfg.seed,
            }),
            PoisonNoAug | PoisonAug | PoisonCombined | PoisonPretrained => serde_json::json!({
                "dataset": cfg.dataset, "seed": cfg.seed,
            }),
            VictimClean | VictimNoAug | VictimAug | VictimCombined | VictimPretrained => {
                serde_json::json!({
                    "dataset": cfg.dataset, "victim": cfg.victim, "seed": cfg.seed,
                })
            }
            Tsne => serde_json::json!({
                "dataset": cfg.dataset, "tsne": cfg.tsne, "seed": cfg.seed,
            }),
            Report => serde_json::json!({ "victim": cfg.victim }),
        };
        Ok(v.to_string())
    }

    /// `(dir, cached)`: either a fresh directory to fill, or the cached one.
    fn prepare(&mut self, stage: Stage) -> Result<(PathBuf, String, BTreeMap<String, String>, bool)> {
        let inputs = self.stage_inputs(stage)?;
        let mut key_src = self.stage_config_json(stage)?;
        for (dep, k) in &inputs {
            key_src.push_str(dep);
            key_src.push_str(k);
        }
        let key = sha256_hex(key_src.as_bytes())[..16].to_string();
        let dir = self
            .cfg
            .out_root
            .join(format!("{}-{key}", stage.name()));
        let marker_path = dir.join("stage.json");
        if dir.exists() {
            if marker_path.exists() {
                let text = std::fs::read_to_string(&marker_path)?;
                let marker: StageMarker =
                    serde_json::from_str(&text).map_err(|_| Error::CacheCorruption {
                        path: marker_path.display().to_string(),
                        reason: "unparseable stage marker".into(),
                    })?;
                if marker.key != key {
                    return Err(Error::CacheCorruption {
                        path: marker_path.display().to_string(),
                        reason: "marker key does not match directory".into(),
                    });
                }
                return Ok((dir, key, inputs, true));
            }
            // a partial run died here; rebuild from scratch
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok((dir, key, inputs, false))
    }

    fn finish(
        &mut self,
        stage: Stage,
        dir: &Path,
        key: &str,
        inputs: BTreeMap<String, String>,
        outputs: BTreeMap<String, String>,
    ) -> Result<()> {
        let marker = StageMarker {
            stage: stage.name().to_string(),
            key: key.to_string(),
            inputs,
            outputs,
            completed_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        std::fs::write(
            dir.join("stage.json"),
            serde_json::to_string_pretty(&marker)?,
        )?;
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let (dir, key, inputs, cached) = self.prepare(stage)?;
        self.keys.insert(stage.name().to_string(), key.clone());
        self.bundle
            .stage_dirs
            .insert(stage.name().to_string(), dir.clone());
        if cached {
            self.bundle.stages_cached.push(stage.name().to_string());
            self.collect(stage, &dir)?;
            return Ok(());
        }
        let outputs = self.execute(stage, &dir)?;
        self.finish(stage, &dir, &key, inputs, outputs)?;
        self.bundle.stages_run.push(stage.name().to_string());
        self.collect(stage, &dir)?;
        Ok(())
    }

    /// Pull stage outputs (fresh or cached) into the bundle.
    fn collect(&mut self, stage: Stage, dir: &Path) -> Result<()> {
        use Stage::*;
        match stage {
            VictimClean | VictimNoAug | VictimAug | VictimCombined | VictimPretrained => {
                let records: Vec<VictimRunRecord> =
                    serde_json::from_str(&std::fs::read_to_string(dir.join("records.json"))?)?;
                let summary = summarize(&records)?;
                self.bundle
                    .victim_summaries
                    .insert(stage.name().to_string(), summary);
                self.bundle
                    .victim_records
                    .insert(stage.name().to_string(), records);
            }
            Tsne => {
                let scores: BTreeMap<String, f64> =
                    serde_json::from_str(&std::fs::read_to_string(dir.join("silhouettes.json"))?)?;
                self.bundle.silhouettes.extend(scores);
            }
            Report => {
                for name in ["final_peak.txt", "final_peak.csv"] {
                    let p = dir.join(name);
                    if p.exists() {
                        self.bundle.reports.push(p);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn gen_ckpt(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self
            .bundle
            .stage_dirs
            .get(stage.name())
            .ok_or_else(|| Error::InvalidConfig(format!("missing stage dir for `{stage}`")))?;
        Ok(dir.join("generator.ckpt"))
    }

    fn poison_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self
            .bundle
            .stage_dirs
            .get(stage.name())
            .ok_or_else(|| Error::InvalidConfig(format!("missing stage dir for `{stage}`")))?;
        Ok(dir.join("poison"))
    }

    fn victim_cfg(&self) -> VictimConfig {
        let v = &self.cfg.victim;
        VictimConfig {
            arch: v.arch,
            width_scale: v.width_scale,
            epochs: v.epochs,
            batch_size: v.batch_size,
            lr: v.lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: v.augment,
            seed: derive_seed(self.cfg.seed, "victim"),
            num_runs: v.runs,
        }
    }

    fn train_generator_stage(
        &self,
        dir: &Path,
        variant: Variant,
        disc_spec: DiscriminatorSpec,
        tag: &str,
    ) -> Result<BTreeMap<String, String>> {
        let train = self.cfg.load_train()?;
        let disc = build_discriminator(disc_spec)?;
        let gen_cfg = GeneratorConfig {
            base_width: self.cfg.generator.base_width,
            num_residual_blocks: self.cfg.generator.residual_blocks,
            ..Default::default()
        };
        let mut gen = GeneratorModel::build(gen_cfg, derive_seed(self.cfg.seed, tag))?;
        let train_cfg = TrainConfig {
            epochs: self.cfg.generator.epochs,
            batch_size: self.cfg.generator.batch_size,
            lr: self.cfg.generator.lr,
            seed: derive_seed(self.cfg.seed, &format!("{tag}-train")),
            variant,
            aug_policy: match variant {
                Variant::Aug => Some(crate::augment::AugmentationPolicy::standard(derive_seed(
                    self.cfg.seed,
                    &format!("{tag}-aug"),
                ))),
                Variant::NoAug => None,
            },
        };
        let artifacts = train_and_save(&mut gen, &disc, &train, &train_cfg, dir)?;
        let mut outputs = BTreeMap::new();
        outputs.insert("checkpoint_hash".into(), artifacts.checkpoint_hash);
        Ok(outputs)
    }

    fn poison_stage(
        &self,
        dir: &Path,
        checkpoints: &[PathBuf],
        combine: Option<CombinePolicy>,
    ) -> Result<BTreeMap<String, String>> {
        let train = self.cfg.load_train()?;
        let ckpt_refs: Vec<&Path> = checkpoints.iter().map(|p| p.as_path()).collect();
        let summary = poison_dataset(&ckpt_refs, &train, combine, &dir.join("poison"), 256, false)?;
        std::fs::write(
            dir.join("poison_summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        let mut outputs = BTreeMap::new();
        outputs.insert("poisoned_hash".into(), summary.poisoned_hash);
        Ok(outputs)
    }

    fn victim_stage(
        &self,
        dir: &Path,
        data: VictimData,
    ) -> Result<BTreeMap<String, String>> {
        let val = self.cfg.load_val()?;
        let records = train_victim(&data, &val, &self.victim_cfg())?;
        std::fs::write(
            dir.join("records.json"),
            serde_json::to_string_pretty(&records)?,
        )?;
        let summary = summarize(&records)?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        let mut outputs = BTreeMap::new();
        outputs.insert("final_mean".into(), format!("{:.4}", summary.final_mean));
        Ok(outputs)
    }

    fn execute(&mut self, stage: Stage, dir: &Path) -> Result<BTreeMap<String, String>> {
        use Stage::*;
        match stage {
            PretrainDisc => {
                let train = self.cfg.load_train()?;
                let val = self.cfg.load_val()?;
                let mut cfg = self.victim_cfg();
                cfg.arch = self.cfg.discriminator.arch;
                cfg.width_scale = self.cfg.discriminator.width_scale;
                cfg.epochs = self.cfg.pretrain.epochs;
                cfg.seed = derive_seed(self.cfg.seed, "pretrain-disc");
                let (hash, trace) =
                    train_and_save_classifier(&train, &val, &cfg, &dir.join("classifier.ckpt"))?;
                std::fs::write(
                    dir.join("trace.json"),
                    serde_json::to_string_pretty(&trace)?,
                )?;
                let mut outputs = BTreeMap::new();
                outputs.insert("checkpoint_hash".into(), hash);
                Ok(outputs)
            }
            GenNoAug => self.train_generator_stage(
                dir,
                Variant::NoAug,
                DiscriminatorSpec::random(
                    self.cfg.discriminator.arch,
                    10,
                    derive_seed(self.cfg.seed, "disc-no-aug"),
                )
                .with_width_scale(self.cfg.discriminator.width_scale),
                "gen-no-aug",
            ),
            GenAug => self.train_generator_stage(
                dir,
                Variant::Aug,
                DiscriminatorSpec::random(
                    self.cfg.discriminator.arch,
                    10,
                    derive_seed(self.cfg.seed, "disc-aug"),
                )
                .with_width_scale(self.cfg.discriminator.width_scale),
                "gen-aug",
            ),
            GenPretrained => {
                let ckpt = self
                    .bundle
                    .stage_dirs
                    .get(Stage::PretrainDisc.name())
                    .ok_or_else(|| Error::InvalidConfig("pretrain-disc not run".into()))?
                    .join("classifier.ckpt");
                self.train_generator_stage(
                    dir,
                    Variant::NoAug,
                    DiscriminatorSpec::pretrained(ckpt),
                    "gen-pretrained",
                )
            }
            PoisonNoAug => {
                let ck = self.gen_ckpt(GenNoAug)?;
                self.poison_stage(dir, &[ck], None)
            }
            PoisonAug => {
                let ck = self.gen_ckpt(GenAug)?;
                self.poison_stage(dir, &[ck], None)
            }
            PoisonCombined => {
                let a = self.gen_ckpt(GenNoAug)?;
                let b = self.gen_ckpt(GenAug)?;
                self.poison_stage(dir, &[a, b], Some(CombinePolicy::default()))
            }
            PoisonPretrained => {
                let ck = self.gen_ckpt(GenPretrained)?;
                self.poison_stage(dir, &[ck], None)
            }
            VictimClean => {
                let train = self.cfg.load_train()?;
                self.victim_stage(dir, VictimData::clean(train))
            }
            VictimNoAug => {
                let p = self.poison_dir(PoisonNoAug)?;
                self.victim_stage(dir, VictimData::poisoned(&p)?)
            }
            VictimAug => {
                let p = self.poison_dir(PoisonAug)?;
                self.victim_stage(dir, VictimData::poisoned(&p)?)
            }
            VictimCombined => {
                let p = self.poison_dir(PoisonCombined)?;
                self.victim_stage(dir, VictimData::poisoned(&p)?)
            }
            VictimPretrained => {
                let p = self.poison_dir(PoisonPretrained)?;
                self.victim_stage(dir, VictimData::poisoned(&p)?)
            }
            Tsne => {
                let (gen, _meta) = GeneratorModel::load(&self.gen_ckpt(GenNoAug)?)?;
                let mut scores = BTreeMap::new();
                for name in &self.cfg.tsne.datasets {
                    let opts = registry::DatasetOptions {
                        data_dir: self.cfg.data_dir.clone(),
                        size: Some(self.cfg.tsne.samples),
                        seed: derive_seed(self.cfg.seed, "dataset"),
                    };
                    let ds = to_rgb_square(&registry::load(name, "val", &opts)?, 32)?;
                    let latents = extract_latents(&gen, &ds.batch)?;
                    let params = TsneParams {
                        perplexity: self.cfg.tsne.perplexity,
                        iters: self.cfg.tsne.iters,
                        seed: derive_seed(self.cfg.seed, &format!("tsne-{name}")),
                        ..Default::default()
                    };
                    let plot = tsne_export(&latents, &params)?;
                    let safe = name.replace('/', "_");
                    plot.write_csv(&dir.join(format!("{safe}.csv")))?;
                    plot.write_svg(&dir.join(format!("{safe}.svg")))?;
                    if let Some(score) = plot.silhouette {
                        scores.insert(name.clone(), score);
                    }
                }
                std::fs::write(
                    dir.join("silhouettes.json"),
                    serde_json::to_string_pretty(&scores)?,
                )?;
                let mut outputs = BTreeMap::new();
                for (k, v) in &scores {
                    outputs.insert(format!("silhouette:{k}"), format!("{v:.6}"));
                }
                Ok(outputs)
            }
            Report => {
                let label_for = |stage: Stage| match stage {
                    VictimClean => "Clean",
                    VictimNoAug => "SG no Aug",
                    VictimAug => "SG",
                    VictimCombined => "Combined",
                    VictimPretrained => "SG (well-trained disc)",
                    _ => unreachable!(),
                };
                let mut rows = Vec::new();
                for stage in [
                    VictimClean,
                    VictimNoAug,
                    VictimAug,
                    VictimCombined,
                    VictimPretrained,
                ] {
                    if let Some(summary) = self.bundle.victim_summaries.get(stage.name()) {
                        rows.push(MethodRow {
                            label: label_for(stage).to_string(),
                            summary: summary.clone(),
                        });
                    }
                }
                if rows.is_empty() {
                    return Err(Error::IncompleteReport(
                        "no victim summaries to report".into(),
                    ));
                }
                let title = format!(
                    "Validation accuracy (%), final ({} epochs) and peak, {} runs",
                    self.cfg.victim.epochs, self.cfg.victim.runs
                );
                let table = render_final_peak_table(&title, &rows)?;
                std::fs::write(dir.join("final_peak.txt"), &table)?;
                std::fs::write(dir.join("final_peak.csv"), final_peak_csv(&rows)?)?;
                Ok(BTreeMap::new())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(out: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(out, 3);
        cfg.dataset.train_size = 60;
        cfg.dataset.val_size = 30;
        cfg.generator.base_width = 4;
        cfg.generator.residual_blocks = 1;
        cfg.generator.epochs = 1;
        cfg.generator.batch_size = 32;
        cfg.discriminator.width_scale = 0.0625;
        cfg.victim.width_scale = 0.0625;
        cfg.victim.epochs = 1;
        cfg.victim.runs = 1;
        cfg.victim.batch_size = 32;
        cfg.pretrain.epochs = 1;
        cfg.tsne.samples = 40;
        cfg.tsne.perplexity = 8.0;
        cfg.tsne.iters = 60;
        cfg
    }

    #[test]
    fn stage_order_validation_rejects_victim_before_poison() {
        let mut cfg = micro_config(PathBuf::from("/tmp/unused"));
        cfg.stages = vec![Stage::VictimNoAug, Stage::GenNoAug, Stage::PoisonNoAug];
        let err = cfg.validate();
        assert!(matches!(err, Err(Error::InvalidConfig(_))), "{err:?}");
        cfg.stages = vec![Stage::GenNoAug, Stage::PoisonNoAug, Stage::VictimNoAug];
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = micro_config(PathBuf::from("runs/x"));
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn micro_pipeline_runs_and_reruns_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path().to_path_buf());
        // a fast subset of the DAG
        cfg.stages = vec![
            Stage::GenNoAug,
            Stage::PoisonNoAug,
            Stage::VictimClean,
            Stage::VictimNoAug,
            Stage::Report,
        ];
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.stages_run.len(), 5);
        assert!(first.stages_cached.is_empty());
        assert!(first.victim_summaries.contains_key("victim-clean"));
        assert!(first.victim_summaries.contains_key("victim-no-aug"));
        assert!(!first.reports.is_empty());
        // rerun: everything cache-hits, zero retraining
        let second = run_experiment(&cfg).unwrap();
        assert!(second.stages_run.is_empty(), "{:?}", second.stages_run);
        assert_eq!(second.stages_cached.len(), 5);
        // summaries still collected from cache
        assert!(second.victim_summaries.contains_key("victim-no-aug"));
        // a config change re-executes dependents
        let mut cfg2 = cfg.clone();
        cfg2.victim.lr = 0.05;
        let third = run_experiment(&cfg2).unwrap();
        assert!(third.stages_run.contains(&"victim-clean".to_string()));
        assert!(third
            .stages_cached
            .contains(&"gen-no-aug".to_string()));
    }
}
