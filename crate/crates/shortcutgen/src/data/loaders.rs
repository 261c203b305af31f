//! Loaders for on-disk datasets: CIFAR-10 binary batches, MNIST idx files,
//! and a generic class-per-directory image folder.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::Array4;

use super::{sample_id, ImageBatch, LabeledDataset};
use crate::error::{Error, Result};

const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_PER_FILE: usize = 10_000;

fn read_cifar_file(path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let mut data = vec![0u8; CIFAR_PER_FILE * CIFAR_RECORD];
    BufReader::new(File::open(path)?).read_exact(&mut data)?;
    for rec in data.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Load the CIFAR-10 binary distribution (`data_batch_*.bin`, `test_batch.bin`)
/// from `dir`. The `train` split concatenates the five training batches.
pub fn cifar10_dir(dir: &Path, split: &str) -> Result<LabeledDataset> {
    let files: Vec<std::path::PathBuf> = match split {
        "train" => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        "test" | "val" => vec![dir.join("test_batch.bin")],
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown CIFAR-10 split `{other}`"
            )))
        }
    };
    for f in &files {
        if !f.exists() {
            return Err(Error::DatasetUnavailable(
                "cifar10".into(),
                format!("missing {}", f.display()),
            ));
        }
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        read_cifar_file(f, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    let pixels = Array4::from_shape_vec((n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE), pixels)
        .map_err(|e| Error::MalformedFile {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?;
    let ids = (0..n).map(|i| sample_id(split, i)).collect();
    let batch = ImageBatch::new(pixels, Some(labels), ids, Some(10))?;
    LabeledDataset::new("cifar10", split, batch, 10)
}

fn read_idx(path: &Path, expect_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; 4];
    reader.read_exact(&mut header)?;
    let malformed = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if header[0] != 0 || header[1] != 0 || header[2] != 0x08 {
        return Err(malformed("not an unsigned-byte idx file"));
    }
    let ndim = header[3] as usize;
    if ndim != expect_dims {
        return Err(malformed(&format!("expected {expect_dims} dims, got {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b)?;
        dims.push(u32::from_be_bytes(b) as usize);
    }
    let total: usize = dims.iter().product();
    let mut data = vec![0u8; total];
    reader.read_exact(&mut data)?;
    Ok((dims, data))
}

/// Load MNIST from the idx files (`train-images-idx3-ubyte` etc.) in `dir`.
pub fn mnist_dir(dir: &Path, split: &str) -> Result<LabeledDataset> {
    let (images_name, labels_name) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test" | "val" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        other => {
            return Err(Error::InvalidConfig(format!("unknown MNIST split `{other}`")))
        }
    };
    let images_path = dir.join(images_name);
    if !images_path.exists() {
        return Err(Error::DatasetUnavailable(
            "mnist".into(),
            format!("missing {}", images_path.display()),
        ));
    }
    let (dims, raw) = read_idx(&images_path, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let (ldims, lraw) = read_idx(&dir.join(labels_name), 1)?;
    if ldims[0] != n {
        return Err(Error::MalformedFile {
            path: dir.display().to_string(),
            reason: format!("{} labels for {} images", ldims[0], n),
        });
    }
    let pixels = Array4::from_shape_vec(
        (n, 1, h, w),
        raw.into_iter().map(|b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| Error::MalformedFile {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let labels = lraw.into_iter().map(|b| b as usize).collect();
    let ids = (0..n).map(|i| sample_id(split, i)).collect();
    let batch = ImageBatch::new(pixels, Some(labels), ids, Some(10))?;
    LabeledDataset::new("mnist", split, batch, 10)
}

/// Load `<root>/<split>/<class-name>/*.png` as a labeled dataset. Classes are
/// directory names in sorted order; all images must share one shape.
pub fn image_folder(root: &Path, name: &str, split: &str) -> Result<LabeledDataset> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(Error::DatasetUnavailable(
            name.into(),
            format!("missing directory {}", split_dir.display()),
        ));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(&split_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::DatasetUnavailable(
            name.into(),
            "no class directories".into(),
        ));
    }
    let mut pixels: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut count = 0usize;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)?.into_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match shape {
                None => shape = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::ShapeMismatch(format!(
                        "image {} is {h}x{w}, expected {}x{}",
                        f.display(),
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            // HWC u8 -> CHW f32
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        pixels.push(img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
                    }
                }
            }
            labels.push(class);
            count += 1;
        }
    }
    let (h, w) = shape.ok_or_else(|| Error::DatasetUnavailable(name.into(), "no images".into()))?;
    let pixels = Array4::from_shape_vec((count, 3, h, w), pixels).map_err(|e| {
        Error::MalformedFile {
            path: root.display().to_string(),
            reason: e.to_string(),
        }
    })?;
    let ids = (0..count).map(|i| sample_id(split, i)).collect();
    let num_classes = class_dirs.len();
    let batch = ImageBatch::new(pixels, Some(labels), ids, Some(num_classes))?;
    LabeledDataset::new(name, split, batch, num_classes)
}
