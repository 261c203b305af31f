//! Per-sample additive perturbations, bound verification, quantization, and
//! poisoned-dataset persistence.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::budget::{BudgetReport, PerturbationBudget};
use crate::data::{ImageBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::hashing::Hasher;

/// Which training variant produced a perturbation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NoAug,
    Aug,
    Combined,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::NoAug => "no_aug",
            Provenance::Aug => "aug",
            Provenance::Combined => "combined",
        };
        f.write_str(s)
    }
}

/// Identity of a generator checkpoint that contributed to a perturbation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorStamp {
    pub checkpoint_hash: String,
    pub seed: u64,
}

/// Per-sample perturbations, each bounded by the budget's epsilon.
#[derive(Debug, Clone)]
pub struct PerturbationSet {
    deltas: BTreeMap<String, Array3<f32>>,
    budget: PerturbationBudget,
    provenance: Provenance,
    generators: Vec<GeneratorStamp>,
}

impl PerturbationSet {
    pub fn from_pairs(
        budget: PerturbationBudget,
        provenance: Provenance,
        generators: Vec<GeneratorStamp>,
        pairs: impl IntoIterator<Item = (String, Array3<f32>)>,
    ) -> Result<Self> {
        let mut deltas = BTreeMap::new();
        let mut shape: Option<[usize; 3]> = None;
        for (id, delta) in pairs {
            let s = [delta.shape()[0], delta.shape()[1], delta.shape()[2]];
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::ShapeMismatch(format!(
                        "delta for `{id}` has shape {s:?}, expected {prev:?}"
                    )))
                }
                _ => {}
            }
            if deltas.insert(id.clone(), delta).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate delta for `{id}`")));
            }
        }
        Ok(Self {
            deltas,
            budget,
            provenance,
            generators,
        })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn budget(&self) -> PerturbationBudget {
        self.budget
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn generators(&self) -> &[GeneratorStamp] {
        &self.generators
    }

    pub fn delta(&self, sample_id: &str) -> Option<&Array3<f32>> {
        self.deltas.get(sample_id)
    }

    /// Deterministic (id-sorted) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array3<f32>)> {
        self.deltas.iter()
    }

    pub fn sample_shape(&self) -> Option<[usize; 3]> {
        self.deltas
            .values()
            .next()
            .map(|d| [d.shape()[0], d.shape()[1], d.shape()[2]])
    }

    /// Scan every element against the budget. Reporting only: callers decide
    /// whether violations are fatal.
    pub fn verify_budget(&self) -> BudgetReport {
        let eps = self.budget.epsilon();
        let mut report = BudgetReport::default();
        for (id, delta) in &self.deltas {
            report.scan(id, delta.as_slice().expect("standard layout"), eps);
        }
        report
    }

    pub fn content_hash(&self) -> String {
        let mut h = Hasher::new();
        for (id, delta) in &self.deltas {
            h.update_str(id);
            h.update_f32s(delta.as_slice().expect("standard layout"));
        }
        h.finish()
    }
}

/// How pixel values were snapped to the 8-bit grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    None,
    /// `round_half_up(v * 255) / 255`
    RoundHalfUp255,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceInfo {
    pub name: String,
    pub split: String,
    pub content_hash: String,
}

/// Everything needed to audit a poisoned dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub format_version: u32,
    pub source: SourceInfo,
    pub epsilon_num: u32,
    pub epsilon_den: u32,
    pub provenance: Provenance,
    pub generators: Vec<GeneratorStamp>,
    pub quantization: Quantization,
    /// Inputs are clipped to this range before quantization.
    pub clip: String,
    pub num_classes: usize,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Hash of the poisoned image batch (pixels + ids + labels).
    pub poisoned_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DELTAS_FILE: &str = "deltas.bin";
pub const IMAGES_DIR: &str = "images";

/// A poisoned dataset: clipped `clean + delta` images with original labels.
/// The clean batch is retained so bound checks stay possible end to end.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    images: ImageBatch,
    clean: ImageBatch,
    manifest: PoisonManifest,
}

fn grid_round(v: f32) -> i32 {
    // round-half-up on the 1/255 grid, done in f64 so ties are decided by the
    // policy rather than by f32 noise
    (v as f64 * 255.0 + 0.5).floor() as i32
}

impl PoisonedDataset {
    pub fn images(&self) -> &ImageBatch {
        &self.images
    }

    pub fn clean(&self) -> &ImageBatch {
        &self.clean
    }

    pub fn manifest(&self) -> &PoisonManifest {
        &self.manifest
    }

    pub fn budget(&self) -> Result<PerturbationBudget> {
        PerturbationBudget::new(self.manifest.epsilon_num, self.manifest.epsilon_den)
    }

    pub fn labeled(&self, name_suffix: &str) -> Result<LabeledDataset> {
        LabeledDataset::new(
            &format!("{}-{}", self.manifest.source.name, name_suffix),
            &self.manifest.source.split,
            self.images.clone(),
            self.manifest.num_classes,
        )
    }

    /// Snap both the poisoned and the clean pixels to the 1/255 grid and
    /// re-verify the bound on the grid, exactly, in integer units.
    pub fn quantize_roundtrip(&self) -> Result<PoisonedDataset> {
        let budget = self.budget()?;
        if !budget.grid_aligned() {
            return Err(Error::QuantizationBreaksBound(format!(
                "epsilon {}/{} is not on the 1/255 grid",
                budget.numerator(),
                budget.denominator()
            )));
        }
        let k = budget.numerator() as i32;
        let mut poisoned = self.images.pixels().clone();
        let clean = self.clean.pixels();
        for (offset, (p, c)) in poisoned.iter_mut().zip(clean.iter()).enumerate() {
            let gp = grid_round(*p);
            let gc = grid_round(*c);
            if (gp - gc).abs() > k {
                return Err(Error::QuantizationBreaksBound(format!(
                    "element {offset}: |{gp} - {gc}| > {k} grid steps"
                )));
            }
            *p = gp as f32 / 255.0;
        }
        let mut clean_q = clean.clone();
        for v in clean_q.iter_mut() {
            *v = grid_round(*v) as f32 / 255.0;
        }
        let images = ImageBatch::new(
            poisoned,
            self.images.labels().map(|l| l.to_vec()),
            self.images.sample_ids().to_vec(),
            self.images.num_classes(),
        )?;
        let clean = ImageBatch::new(
            clean_q,
            self.clean.labels().map(|l| l.to_vec()),
            self.clean.sample_ids().to_vec(),
            self.clean.num_classes(),
        )?;
        let mut manifest = self.manifest.clone();
        manifest.quantization = Quantization::RoundHalfUp255;
        manifest.poisoned_hash = images.content_hash();
        Ok(PoisonedDataset {
            images,
            clean,
            manifest,
        })
    }

    /// Persist as `images/<id>.png` + `manifest.json` + `deltas.bin`.
    /// Quantizes first when not already on the grid, so what lands on disk is
    /// exactly what a reader gets back.
    pub fn save_dir(&self, dir: &Path, audit_deltas: bool) -> Result<()> {
        let quantized = match self.manifest.quantization {
            Quantization::RoundHalfUp255 => self.clone(),
            Quantization::None => self.quantize_roundtrip()?,
        };
        std::fs::create_dir_all(dir.join(IMAGES_DIR))?;
        let (c, h, w) = quantized.images.sample_shape();
        if c != 3 {
            return Err(Error::InvalidConfig(format!(
                "poison persistence expects RGB images, got {c} channels"
            )));
        }
        for (i, id) in quantized.images.sample_ids().iter().enumerate() {
            let view = quantized.images.sample(i);
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        grid_round(view[[0, y, x]]) as u8,
                        grid_round(view[[1, y, x]]) as u8,
                        grid_round(view[[2, y, x]]) as u8,
                    ];
                    buf.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            let path = dir.join(IMAGES_DIR).join(format!("{id}.png"));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            buf.save(&path)?;
        }
        quantized.write_deltas(&dir.join(DELTAS_FILE), audit_deltas)?;
        let json = serde_json::to_string_pretty(&quantized.manifest)?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Grid-unit deltas (`q(poisoned) - q(clean)`), i8 per element, plus the
    /// raw f32 deltas when `audit` is set.
    fn write_deltas(&self, path: &Path, audit: bool) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(b"SGDL")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&[if audit { 1u8 } else { 0u8 }])?;
        let (c, h, w) = self.images.sample_shape();
        out.write_all(&(self.images.len() as u32).to_le_bytes())?;
        for d in [c, h, w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for (i, id) in self.images.sample_ids().iter().enumerate() {
            out.write_all(&(id.len() as u16).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            let p = self.images.sample(i);
            let cl = self.clean.sample(i);
            for (pv, cv) in p.iter().zip(cl.iter()) {
                let g = grid_round(*pv) - grid_round(*cv);
                let g8 = i8::try_from(g).map_err(|_| {
                    Error::BudgetViolation(format!("grid delta {g} out of i8 range"))
                })?;
                out.write_all(&[g8 as u8])?;
            }
            if audit {
                for (pv, cv) in p.iter().zip(cl.iter()) {
                    out.write_all(&(*pv - *cv).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

/// `x' = clip(x + delta, 0, 1)` per sample; labels copied unchanged.
pub fn apply_perturbations(
    clean: &LabeledDataset,
    perts: &PerturbationSet,
) -> Result<PoisonedDataset> {
    let (c, h, w) = clean.batch.sample_shape();
    if let Some(shape) = perts.sample_shape() {
        if shape != [c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "deltas are {shape:?}, images are [{c}, {h}, {w}]"
            )));
        }
    }
    let n = clean.len();
    let mut poisoned = Array4::<f32>::zeros((n, c, h, w));
    for (i, id) in clean.batch.sample_ids().iter().enumerate() {
        let delta = perts
            .delta(id)
            .ok_or_else(|| Error::MissingDelta(id.clone()))?;
        let x = clean.batch.sample(i);
        let mut out = poisoned.index_axis_mut(ndarray::Axis(0), i);
        for ((o, xv), dv) in out.iter_mut().zip(x.iter()).zip(delta.iter()) {
            *o = (xv + dv).clamp(0.0, 1.0);
        }
    }
    let images = ImageBatch::new(
        poisoned,
        Some(clean.labels().to_vec()),
        clean.batch.sample_ids().to_vec(),
        Some(clean.num_classes),
    )?;
    let manifest = PoisonManifest {
        format_version: 1,
        source: SourceInfo {
            name: clean.name.clone(),
            split: clean.split.clone(),
            content_hash: clean.content_hash(),
        },
        epsilon_num: perts.budget().numerator(),
        epsilon_den: perts.budget().denominator(),
        provenance: perts.provenance(),
        generators: perts.generators().to_vec(),
        quantization: Quantization::None,
        clip: "unit-interval".into(),
        num_classes: clean.num_classes,
        sample_ids: images.sample_ids().to_vec(),
        labels: clean.labels().to_vec(),
        poisoned_hash: images.content_hash(),
    };
    Ok(PoisonedDataset {
        images,
        clean: clean.batch.clone(),
        manifest,
    })
}

/// A poison directory read back for victim training.
pub struct LoadedPoison {
    pub dataset: LabeledDataset,
    pub manifest: PoisonManifest,
    /// Grid-unit deltas per sample, id-sorted, `[C*H*W]` each.
    pub grid_deltas: BTreeMap<String, Vec<i8>>,
}

impl LoadedPoison {
    /// Re-verify the persisted bound: every grid delta within epsilon, and
    /// the reconstructed clean pixels within [0, 255].
    pub fn verify_bound(&self) -> Result<()> {
        let num = self.manifest.epsilon_num as i32;
        let pixels = self.dataset.batch.pixels();
        for (i, id) in self.dataset.batch.sample_ids().iter().enumerate() {
            let deltas = self
                .grid_deltas
                .get(id)
                .ok_or_else(|| Error::MissingDelta(id.clone()))?;
            let img = self.dataset.batch.sample(i);
            for (v, g) in img.iter().zip(deltas.iter()) {
                let g = *g as i32;
                if g.abs() > num {
                    return Err(Error::BudgetViolation(format!(
                        "sample `{id}`: grid delta {g} exceeds {num}"
                    )));
                }
                let poisoned = grid_round(*v);
                let clean = poisoned - g;
                if !(0..=255).contains(&clean) {
                    return Err(Error::BudgetViolation(format!(
                        "sample `{id}`: reconstructed clean value {clean} outside [0, 255]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load a directory written by [`PoisonedDataset::save_dir`], verifying the
/// manifest against the actual contents.
pub fn load_poison_dir(dir: &Path) -> Result<LoadedPoison> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: PoisonManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::DatasetManifestInvalid(
            format!("{}: {e}", manifest_path.display()),
        ))?,
    )
    .map_err(|e| Error::DatasetManifestInvalid(e.to_string()))?;
    if manifest.sample_ids.len() != manifest.labels.len() {
        return Err(Error::DatasetManifestInvalid(
            "sample_ids and labels disagree in length".into(),
        ));
    }
    let mut pixels: Option<Array4<f32>> = None;
    for (i, id) in manifest.sample_ids.iter().enumerate() {
        let path = dir.join(IMAGES_DIR).join(format!("{id}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::DatasetManifestInvalid(format!("{}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let store = pixels.get_or_insert_with(|| {
            Array4::zeros((manifest.sample_ids.len(), 3, h, w))
        });
        if store.shape()[2] != h || store.shape()[3] != w {
            return Err(Error::ShapeMismatch(format!("image {id} has odd shape")));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    store[[i, c, y, x]] = img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
                }
            }
        }
    }
    let pixels = pixels.ok_or_else(|| Error::DatasetManifestInvalid("no samples".into()))?;
    let batch = ImageBatch::new(
        pixels,
        Some(manifest.labels.clone()),
        manifest.sample_ids.clone(),
        Some(manifest.num_classes),
    )?;
    if batch.content_hash() != manifest.poisoned_hash {
        return Err(Error::DatasetManifestInvalid(
            "poisoned content hash does not match manifest".into(),
        ));
    }
    let grid_deltas = read_deltas(&dir.join(DELTAS_FILE))?;
    let dataset = LabeledDataset::new(
        &format!("{}-poisoned", manifest.source.name),
        &manifest.source.split,
        batch,
        manifest.num_classes,
    )?;
    Ok(LoadedPoison {
        dataset,
        manifest,
        grid_deltas,
    })
}

fn read_deltas(path: &Path) -> Result<BTreeMap<String, Vec<i8>>> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let malformed = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != b"SGDL" {
        return Err(malformed("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    reader.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != 1 {
        return Err(malformed("unsupported version"));
    }
    let mut flag = [0u8; 1];
    reader.read_exact(&mut flag)?;
    let audit = flag[0] == 1;
    reader.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        reader.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let elems = dims.iter().product::<usize>();
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        reader.read_exact(&mut u16buf)?;
        let id_len = u16::from_le_bytes(u16buf) as usize;
        let mut id = vec![0u8; id_len];
        reader.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| malformed("non-utf8 id"))?;
        let mut grid = vec![0u8; elems];
        reader.read_exact(&mut grid)?;
        if audit {
            let mut skip = vec![0u8; elems * 4];
            reader.read_exact(&mut skip)?;
        }
        out.insert(id, grid.into_iter().map(|b| b as i8).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_id;
    use ndarray::{Array3, Array4};

    const EPS: f32 = 8.0 / 255.0;

    fn dataset_with_pixels(values: &[f32]) -> LabeledDataset {
        let n = values.len();
        let mut pixels = Array4::zeros((n, 3, 2, 2));
        for (i, &v) in values.iter().enumerate() {
            pixels.index_axis_mut(ndarray::Axis(0), i).fill(v);
        }
        let ids = (0..n).map(|i| sample_id("train", i)).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        let batch = ImageBatch::new(pixels, Some(labels), ids, Some(2)).unwrap();
        LabeledDataset::new("toy", "train", batch, 2).unwrap()
    }

    fn uniform_perts(n: usize, value: f32) -> PerturbationSet {
        let pairs = (0..n).map(|i| {
            (
                sample_id("train", i),
                Array3::from_elem((3, 2, 2), value),
            )
        });
        PerturbationSet::from_pairs(
            PerturbationBudget::default_linf(),
            Provenance::NoAug,
            vec![GeneratorStamp {
                checkpoint_hash: "h".into(),
                seed: 0,
            }],
            pairs,
        )
        .unwrap()
    }

    #[test]
    fn zero_delta_is_identity() {
        let clean = dataset_with_pixels(&[0.25, 0.75]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(2, 0.0)).unwrap();
        assert_eq!(poisoned.images().pixels(), clean.batch.pixels());
        assert_eq!(poisoned.images().labels(), clean.batch.labels());
    }

    #[test]
    fn clips_at_the_boundary() {
        let clean = dataset_with_pixels(&[1.0]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(1, EPS)).unwrap();
        assert!(poisoned.images().pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn interior_addition_is_exact_arithmetic() {
        // 0.5 - 8/255 = 119.5/255
        let clean = dataset_with_pixels(&[0.5]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(1, -EPS)).unwrap();
        let got = poisoned.images().pixels()[[0, 0, 0, 0]];
        let expect = 119.5f64 / 255.0;
        assert!((got as f64 - expect).abs() < 1e-7, "got {got}, want {expect}");
        assert!((got - 0.468_627_45).abs() < 1e-6);
    }

    #[test]
    fn missing_delta_is_reported_with_its_id() {
        let clean = dataset_with_pixels(&[0.5, 0.5, 0.5]);
        let err = apply_perturbations(&clean, &uniform_perts(2, 0.0));
        match err {
            Err(Error::MissingDelta(id)) => assert_eq!(id, sample_id("train", 2)),
            other => panic!("expected MissingDelta, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let clean = dataset_with_pixels(&[0.5]);
        let perts = PerturbationSet::from_pairs(
            PerturbationBudget::default_linf(),
            Provenance::NoAug,
            vec![],
            [(sample_id("train", 0), Array3::zeros((3, 4, 4)))],
        )
        .unwrap();
        assert!(matches!(
            apply_perturbations(&clean, &perts),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn verify_budget_matches_spec_examples() {
        let perts = uniform_perts(2, 0.0);
        let report = perts.verify_budget();
        assert!(report.ok());
        assert_eq!(report.max_abs, 0.0);

        let mut bad = Array3::from_elem((3, 2, 2), 0.0f32);
        bad[[0, 0, 0]] = 9.0 / 255.0;
        let perts = PerturbationSet::from_pairs(
            PerturbationBudget::default_linf(),
            Provenance::NoAug,
            vec![],
            [(sample_id("train", 0), bad)],
        )
        .unwrap();
        let report = perts.verify_budget();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.max_abs, 9.0 / 255.0);
    }

    #[test]
    fn quantize_half_pixel_rounds_up() {
        // 0.5 * 255 = 127.5 -> 128 under round-half-up
        let clean = dataset_with_pixels(&[0.5]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(1, 0.0)).unwrap();
        let q = poisoned.quantize_roundtrip().unwrap();
        let got = q.images().pixels()[[0, 0, 0, 0]];
        assert_eq!(got, 128.0 / 255.0);
    }

    #[test]
    fn grid_aligned_deltas_are_fixed_points() {
        let clean = dataset_with_pixels(&[100.0 / 255.0]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(1, EPS)).unwrap();
        let q = poisoned.quantize_roundtrip().unwrap();
        let got = q.images().pixels()[[0, 0, 0, 0]];
        assert_eq!(got, 108.0 / 255.0);
        // round trip again: idempotent
        let q2 = q.quantize_roundtrip().unwrap();
        assert_eq!(q.images().pixels(), q2.images().pixels());
    }

    #[test]
    fn quantization_rejects_off_grid_epsilon() {
        let clean = dataset_with_pixels(&[0.5]);
        let pairs = [(sample_id("train", 0), Array3::zeros((3, 2, 2)))];
        let perts = PerturbationSet::from_pairs(
            PerturbationBudget::new(1, 10).unwrap(),
            Provenance::NoAug,
            vec![],
            pairs,
        )
        .unwrap();
        let poisoned = apply_perturbations(&clean, &perts).unwrap();
        assert!(matches!(
            poisoned.quantize_roundtrip(),
            Err(Error::QuantizationBreaksBound(_))
        ));
    }

    #[test]
    fn save_and_load_round_trip_verifies() {
        let clean = dataset_with_pixels(&[0.2, 0.5, 0.9]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(3, -EPS)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        poisoned.save_dir(dir.path(), true).unwrap();
        let loaded = load_poison_dir(dir.path()).unwrap();
        loaded.verify_bound().unwrap();
        assert_eq!(loaded.dataset.len(), 3);
        assert_eq!(loaded.manifest.provenance, Provenance::NoAug);
        // pixels on disk match the quantized in-memory ones
        let q = poisoned.quantize_roundtrip().unwrap();
        assert_eq!(loaded.dataset.batch.pixels(), q.images().pixels());
    }

    #[test]
    fn label_preservation_holds_through_quantization() {
        let clean = dataset_with_pixels(&[0.3, 0.6, 0.1, 0.8]);
        let poisoned = apply_perturbations(&clean, &uniform_perts(4, EPS)).unwrap();
        let q = poisoned.quantize_roundtrip().unwrap();
        assert_eq!(q.images().labels(), clean.batch.labels());
    }
}
