//! Dataset abstractions: batched images in `[0, 1]`, stable sample ids, and
//! the loaders/registry that produce them.

use candle_core::{Device, Tensor};
use ndarray::{Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::hashing::Hasher;

pub mod adapt;
pub mod loaders;
pub mod registry;
pub mod synth;

/// Label storage for a batch. `Trap` is an audit guard: any read panics, so a
/// test (or a cautious caller) can prove an operation never touches labels.
#[derive(Debug, Clone)]
pub enum LabelStore {
    None,
    Present(Vec<usize>),
    Trap,
}

/// A batch of images, shape `[N, C, H, W]`, pixel values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pixels: Array4<f32>,
    labels: LabelStore,
    sample_ids: Vec<String>,
    num_classes: Option<usize>,
}

impl ImageBatch {
    pub fn new(
        pixels: Array4<f32>,
        labels: Option<Vec<usize>>,
        sample_ids: Vec<String>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let store = match labels {
            Some(l) => LabelStore::Present(l),
            None => LabelStore::None,
        };
        Self::with_label_store(pixels, store, sample_ids, num_classes)
    }

    pub fn with_label_store(
        pixels: Array4<f32>,
        labels: LabelStore,
        sample_ids: Vec<String>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = pixels.shape()[0];
        if sample_ids.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} sample ids for {} images",
                sample_ids.len(),
                n
            )));
        }
        {
            let mut seen = std::collections::HashSet::with_capacity(n);
            for id in &sample_ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidConfig(format!("duplicate sample id `{id}`")));
                }
            }
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        if let LabelStore::Present(ref l) = labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} images",
                    l.len(),
                    n
                )));
            }
            if let Some(k) = num_classes {
                for &label in l {
                    if label >= k {
                        return Err(Error::LabelOutOfRange {
                            label,
                            num_classes: k,
                        });
                    }
                }
            }
        }
        Ok(Self {
            pixels,
            labels,
            sample_ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    pub fn pixels(&self) -> &Array4<f32> {
        &self.pixels
    }

    pub fn sample(&self, i: usize) -> ArrayView3<'_, f32> {
        self.pixels.index_axis(ndarray::Axis(0), i)
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn has_labels(&self) -> bool {
        matches!(self.labels, LabelStore::Present(_) | LabelStore::Trap)
    }

    /// Read the labels. Panics if this batch carries a label trap: the trap
    /// exists precisely to prove that label-free code paths stay label-free.
    pub fn labels(&self) -> Option<&[usize]> {
        match &self.labels {
            LabelStore::None => None,
            LabelStore::Present(l) => Some(l),
            LabelStore::Trap => panic!("label trap fired: labels were read on a label-free path"),
        }
    }

    /// Same batch with labels replaced by a read trap.
    pub fn with_label_trap(mut self) -> Self {
        self.labels = LabelStore::Trap;
        self
    }

    /// Drop labels (used when handing data to label-free consumers).
    pub fn without_labels(mut self) -> Self {
        self.labels = LabelStore::None;
        self
    }

    /// Pixel tensor `[N, C, H, W]` on `device`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let s = self.pixels.shape();
        let flat = self
            .pixels
            .as_slice()
            .expect("ImageBatch arrays are standard layout");
        Ok(Tensor::from_slice(flat, (s[0], s[1], s[2], s[3]), device)?)
    }

    /// Pixel tensor for a subset of rows, in the given order.
    pub fn rows_to_tensor(&self, rows: &[usize], device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.sample_shape();
        let mut flat = Vec::with_capacity(rows.len() * c * h * w);
        for &r in rows {
            flat.extend_from_slice(self.sample(r).to_slice().expect("standard layout"));
        }
        Ok(Tensor::from_vec(flat, (rows.len(), c, h, w), device)?)
    }

    /// Content hash over shape, pixels, ids and labels (if present).
    pub fn content_hash(&self) -> String {
        let mut h = Hasher::new();
        for d in self.pixels.shape() {
            h.update_u64(*d as u64);
        }
        h.update_f32s(self.pixels.as_slice().expect("standard layout"));
        for id in &self.sample_ids {
            h.update_str(id);
        }
        if let LabelStore::Present(labels) = &self.labels {
            for &l in labels {
                h.update_u64(l as u64);
            }
        }
        h.finish()
    }
}

/// A named, labeled dataset split ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub name: String,
    pub split: String,
    pub batch: ImageBatch,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: &str, split: &str, batch: ImageBatch, num_classes: usize) -> Result<Self> {
        if !batch.has_labels() {
            return Err(Error::MissingLabels);
        }
        Ok(Self {
            name: name.to_string(),
            split: split.to_string(),
            batch,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        self.batch.labels().expect("labeled dataset")
    }

    pub fn content_hash(&self) -> String {
        self.batch.content_hash()
    }

    /// Take the first `n` samples (used to cut desk-scale subsets).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let pixels = self
            .batch
            .pixels
            .slice(ndarray::s![..n, .., .., ..])
            .to_owned();
        let labels = self.labels()[..n].to_vec();
        let ids = self.batch.sample_ids[..n].to_vec();
        let batch = ImageBatch::new(pixels, Some(labels), ids, Some(self.num_classes))?;
        Self::new(&self.name, &self.split, batch, self.num_classes)
    }
}

/// Stable sample id: `<split>/<zero-padded index>`, so perturbation sets
/// survive shuffling and persist cleanly as file paths.
pub fn sample_id(split: &str, index: usize) -> String {
    format!("{split}/{index:05}")
}
