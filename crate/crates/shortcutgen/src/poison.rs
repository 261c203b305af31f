//! The poison pipeline: compose perturbation variants, enforce bounds,
//! quantize, persist.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, LabelStore, LabeledDataset};
use crate::error::{Error, Result};
use crate::generator::{generate, GeneratorModel};
use crate::perturb::{
    apply_perturbations, PerturbationSet, Provenance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    /// Keep, per element, whichever input has the larger magnitude (sign
    /// preserved).
    MaxAbsMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Exact-magnitude ties resolve to the non-augmented variant.
    PreferNoAug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinePolicy {
    pub rule: CombineRule,
    pub tie_break: TieBreak,
}

impl Default for CombinePolicy {
    fn default() -> Self {
        Self {
            rule: CombineRule::MaxAbsMagnitude,
            tie_break: TieBreak::PreferNoAug,
        }
    }
}

/// Merge the non-augmented (`a`) and augmented (`b`) perturbations, keeping
/// the larger-magnitude value per element.
pub fn compose_combined(
    a: &PerturbationSet,
    b: &PerturbationSet,
    policy: CombinePolicy,
) -> Result<PerturbationSet> {
    let CombinePolicy { rule, tie_break } = policy;
    let (CombineRule::MaxAbsMagnitude, TieBreak::PreferNoAug) = (rule, tie_break);
    if a.budget() != b.budget() {
        return Err(Error::BudgetMismatch(format!(
            "{}/{} vs {}/{}",
            a.budget().numerator(),
            a.budget().denominator(),
            b.budget().numerator(),
            b.budget().denominator()
        )));
    }
    if a.len() != b.len() {
        return Err(Error::SampleSetMismatch(format!(
            "{} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let mut pairs = Vec::with_capacity(a.len());
    for (id, da) in a.iter() {
        let db = b
            .delta(id)
            .ok_or_else(|| Error::SampleSetMismatch(format!("`{id}` missing from aug set")))?;
        if da.shape() != db.shape() {
            return Err(Error::ShapeMismatch(format!("delta shapes differ for `{id}`")));
        }
        let mut out = Array3::zeros(da.raw_dim());
        for ((o, &va), &vb) in out.iter_mut().zip(da.iter()).zip(db.iter()) {
            // tie (|va| == |vb|) keeps va, the no-aug side
            *o = if vb.abs() > va.abs() { vb } else { va };
        }
        pairs.push((id.clone(), out));
    }
    let mut generators = a.generators().to_vec();
    generators.extend(b.generators().iter().cloned());
    PerturbationSet::from_pairs(a.budget(), Provenance::Combined, generators, pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub out_dir: PathBuf,
    pub sample_count: usize,
    pub provenance: Provenance,
    pub generator_hashes: Vec<String>,
    pub poisoned_hash: String,
    pub max_abs_delta: f32,
    pub wall_secs: f64,
    pub images_per_sec: f64,
}

/// End-to-end poisoning: generate perturbations (label-free, enforced by a
/// label trap), optionally compose two variants, verify the bound, quantize,
/// and persist to `out_dir`.
pub fn poison_dataset(
    checkpoints: &[&Path],
    clean: &LabeledDataset,
    policy: Option<CombinePolicy>,
    out_dir: &Path,
    chunk_size: usize,
    audit_deltas: bool,
) -> Result<PoisonSummary> {
    if checkpoints.is_empty() || checkpoints.len() > 2 {
        return Err(Error::InvalidConfig(
            "poisoning takes one generator checkpoint, or two to combine".into(),
        ));
    }
    let started = std::time::Instant::now();
    let mut models = Vec::new();
    for path in checkpoints {
        let (model, _meta) = GeneratorModel::load(path)?;
        models.push(model);
    }
    if models.len() == 2 {
        let (a, b) = (models[0].config().budget, models[1].config().budget);
        if a != b {
            return Err(Error::CheckpointMismatch(format!(
                "epsilon {}/{} vs {}/{}",
                a.numerator(),
                a.denominator(),
                b.numerator(),
                b.denominator()
            )));
        }
    }
    let mut sets: Vec<PerturbationSet> = Vec::new();
    for model in &models {
        sets.push(generate_chunked(model, clean, chunk_size)?);
    }
    let perts = match (sets.len(), policy) {
        (1, _) => sets.pop().expect("one set"),
        (2, policy) => {
            let b = sets.pop().expect("aug set");
            let a = sets.pop().expect("no-aug set");
            compose_combined(&a, &b, policy.unwrap_or_default())?
        }
        _ => unreachable!(),
    };
    let report = perts.verify_budget();
    if !report.ok() {
        return Err(Error::BudgetViolation(format!(
            "{} elements exceed epsilon (max |delta| = {})",
            report.violations.len(),
            report.max_abs
        )));
    }
    let poisoned = apply_perturbations(clean, &perts)?.quantize_roundtrip()?;
    poisoned.save_dir(out_dir, audit_deltas)?;
    let wall_secs = started.elapsed().as_secs_f64();
    Ok(PoisonSummary {
        out_dir: out_dir.to_path_buf(),
        sample_count: clean.len(),
        provenance: perts.provenance(),
        generator_hashes: perts
            .generators()
            .iter()
            .map(|g| g.checkpoint_hash.clone())
            .collect(),
        poisoned_hash: poisoned.manifest().poisoned_hash.clone(),
        max_abs_delta: report.max_abs,
        wall_secs,
        images_per_sec: clean.len() as f64 / wall_secs.max(1e-9),
    })
}

/// Run the generator over the dataset in inference chunks. Labels are
/// replaced by a read trap for the duration: generation must stay label-free.
pub fn generate_chunked(
    model: &GeneratorModel,
    clean: &LabeledDataset,
    chunk_size: usize,
) -> Result<PerturbationSet> {
    let n = clean.len();
    let chunk_size = chunk_size.max(1);
    let mut all_pairs: Vec<(String, Array3<f32>)> = Vec::with_capacity(n);
    let mut start = 0usize;
    let mut stamp = None;
    while start < n {
        let take = chunk_size.min(n - start);
        let pixels = clean
            .batch
            .pixels()
            .slice(ndarray::s![start..start + take, .., .., ..])
            .to_owned();
        let ids = clean.batch.sample_ids()[start..start + take].to_vec();
        let chunk = ImageBatch::with_label_store(pixels, LabelStore::Trap, ids, None)?;
        let perts = generate(model, &chunk)?;
        stamp = Some((perts.budget(), perts.provenance(), perts.generators().to_vec()));
        for (id, delta) in perts.iter() {
            all_pairs.push((id.clone(), delta.clone()));
        }
        start += take;
    }
    let (budget, provenance, generators) =
        stamp.ok_or_else(|| Error::EmptyInput("empty dataset".into()))?;
    PerturbationSet::from_pairs(budget, provenance, generators, all_pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::PerturbationBudget;
    use crate::data::{sample_id, synth};
    use crate::generator::GeneratorConfig;
    use crate::perturb::{load_poison_dir, GeneratorStamp};
    use ndarray::Array3;

    fn set_from(values: &[f32], prov: Provenance) -> PerturbationSet {
        let pairs = values.iter().enumerate().map(|(i, &v)| {
            (sample_id("t", i), Array3::from_elem((1, 1, 1), v))
        });
        PerturbationSet::from_pairs(
            PerturbationBudget::default_linf(),
            prov,
            vec![GeneratorStamp {
                checkpoint_hash: format!("{prov}"),
                seed: 0,
            }],
            pairs,
        )
        .unwrap()
    }

    #[test]
    fn zero_aug_side_returns_no_aug_values() {
        let a = set_from(&[0.01, -0.02, 0.03], Provenance::NoAug);
        let b = set_from(&[0.0, 0.0, 0.0], Provenance::Aug);
        let c = compose_combined(&a, &b, CombinePolicy::default()).unwrap();
        for (id, delta) in a.iter() {
            assert_eq!(c.delta(id).unwrap(), delta);
        }
        assert_eq!(c.provenance(), Provenance::Combined);
        assert_eq!(c.generators().len(), 2);
    }

    #[test]
    fn magnitude_wins_regardless_of_sign() {
        let a = set_from(&[0.02], Provenance::NoAug);
        let b = set_from(&[-0.03], Provenance::Aug);
        let c = compose_combined(&a, &b, CombinePolicy::default()).unwrap();
        assert_eq!(c.delta(&sample_id("t", 0)).unwrap()[[0, 0, 0]], -0.03);
    }

    #[test]
    fn exact_ties_prefer_no_aug() {
        let a = set_from(&[0.01], Provenance::NoAug);
        let b = set_from(&[-0.01], Provenance::Aug);
        let c = compose_combined(&a, &b, CombinePolicy::default()).unwrap();
        assert_eq!(c.delta(&sample_id("t", 0)).unwrap()[[0, 0, 0]], 0.01);
    }

    #[test]
    fn composition_is_idempotent() {
        let a = set_from(&[0.01, -0.02, 0.0], Provenance::NoAug);
        let c = compose_combined(&a, &a, CombinePolicy::default()).unwrap();
        for (id, delta) in a.iter() {
            assert_eq!(c.delta(id).unwrap(), delta);
        }
    }

    #[test]
    fn mismatched_budgets_or_samples_error() {
        let a = set_from(&[0.01], Provenance::NoAug);
        let b = set_from(&[0.01, 0.02], Provenance::Aug);
        assert!(matches!(
            compose_combined(&a, &b, CombinePolicy::default()),
            Err(Error::SampleSetMismatch(_))
        ));
        let pairs = [(sample_id("t", 0), Array3::from_elem((1, 1, 1), 0.0f32))];
        let other = PerturbationSet::from_pairs(
            PerturbationBudget::new(4, 255).unwrap(),
            Provenance::Aug,
            vec![],
            pairs,
        )
        .unwrap();
        assert!(matches!(
            compose_combined(&a, &other, CombinePolicy::default()),
            Err(Error::BudgetMismatch(_))
        ));
    }

    #[test]
    fn poison_pipeline_end_to_end() {
        let clean = synth::object10("train", 24, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            base_width: 4,
            num_residual_blocks: 1,
            ..Default::default()
        };
        let gen_a = GeneratorModel::build(cfg, 1).unwrap();
        let gen_b = GeneratorModel::build(cfg, 2).unwrap();
        let ck_a = dir.path().join("a.ckpt");
        let ck_b = dir.path().join("b.ckpt");
        gen_a.save(&ck_a, serde_json::json!({})).unwrap();
        gen_b.save(&ck_b, serde_json::json!({})).unwrap();
        let out = dir.path().join("poison");
        let summary = poison_dataset(
            &[ck_a.as_path(), ck_b.as_path()],
            &clean,
            Some(CombinePolicy::default()),
            &out,
            7, // awkward chunk size on purpose
            true,
        )
        .unwrap();
        assert_eq!(summary.sample_count, 24);
        assert_eq!(summary.provenance, Provenance::Combined);
        assert_eq!(summary.generator_hashes.len(), 2);
        let loaded = load_poison_dir(&out).unwrap();
        loaded.verify_bound().unwrap();
        assert_eq!(loaded.dataset.len(), 24);
        assert_eq!(loaded.manifest.provenance, Provenance::Combined);
        // poisoned images stay within epsilon of the quantized clean pixels,
        // exactly, in grid units
        for (i, id) in clean.batch.sample_ids().iter().enumerate() {
            let p = loaded.dataset.batch.sample(i);
            let c = clean.batch.sample(i);
            for (pv, cv) in p.iter().zip(c.iter()) {
                let gp = (*pv as f64 * 255.0 + 0.5).floor() as i32;
                let gc = (*cv as f64 * 255.0 + 0.5).floor() as i32;
                assert!((gp - gc).abs() <= 8, "sample {id}: {gp} vs {gc}");
            }
        }
    }

    #[test]
    fn single_checkpoint_keeps_its_provenance() {
        let clean = synth::object10("train", 8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            base_width: 4,
            num_residual_blocks: 1,
            ..Default::default()
        };
        let gen = GeneratorModel::build(cfg, 1).unwrap();
        let ck = dir.path().join("g.ckpt");
        gen.save(&ck, serde_json::json!({})).unwrap();
        let out = dir.path().join("poison");
        let summary =
            poison_dataset(&[ck.as_path()], &clean, None, &out, 128, false).unwrap();
        assert_eq!(summary.provenance, Provenance::NoAug);
        assert_eq!(summary.generator_hashes.len(), 1);
    }
}
