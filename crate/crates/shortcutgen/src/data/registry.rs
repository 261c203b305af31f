//! Name-based dataset resolution.
//!
//! Real corpora are loaded from a local cache directory (they are never
//! fetched implicitly); `-synth` variants are generated deterministically
//! and exist so every pipeline runs on machines without the real data.

use std::path::PathBuf;

use super::{loaders, synth, LabeledDataset};
use crate::error::{Error, Result};

pub const DATA_DIR_ENV: &str = "SHORTCUTGEN_DATA_DIR";

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Cache directory holding real datasets; defaults to `$SHORTCUTGEN_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Sample count for synthetic splits (real splits ignore this unless
    /// subsetting is requested).
    pub size: Option<usize>,
    /// Seed for synthetic generation.
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            data_dir: None,
            size: None,
            seed: 0,
        }
    }
}

impl DatasetOptions {
    fn resolve_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

pub fn known_datasets() -> &'static [&'static str] {
    &[
        "cifar10",
        "mnist",
        "imagenet-sub",
        "cifar10-synth",
        "mnist-synth",
        "imagenet-synth",
    ]
}

/// Load `name`/`split`. Synthetic splits default to 4000 train / 1000 val
/// samples unless `opts.size` overrides; real splits are optionally truncated
/// to `opts.size`.
pub fn load(name: &str, split: &str, opts: &DatasetOptions) -> Result<LabeledDataset> {
    let synth_size = opts.size.unwrap_or(match split {
        "train" => 4000,
        _ => 1000,
    });
    let ds = match name {
        "cifar10-synth" => synth::object10(split, synth_size, opts.seed)?,
        "mnist-synth" => synth::digits10(split, synth_size, opts.seed)?,
        "imagenet-synth" => synth::textures10(split, synth_size, opts.seed)?,
        "cifar10" => {
            let dir = opts.resolve_dir().ok_or_else(|| missing_dir("cifar10"))?;
            let ds = loaders::cifar10_dir(&dir.join("cifar-10-batches-bin"), split)?;
            maybe_take(ds, opts.size)?
        }
        "mnist" => {
            let dir = opts.resolve_dir().ok_or_else(|| missing_dir("mnist"))?;
            let ds = loaders::mnist_dir(&dir.join("mnist"), split)?;
            maybe_take(ds, opts.size)?
        }
        "imagenet-sub" => {
            let dir = opts.resolve_dir().ok_or_else(|| missing_dir("imagenet-sub"))?;
            let ds = loaders::image_folder(&dir.join("imagenet-sub"), "imagenet-sub", split)?;
            maybe_take(ds, opts.size)?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown dataset `{other}` (known: {})",
                known_datasets().join(", ")
            )))
        }
    };
    Ok(ds)
}

fn maybe_take(ds: LabeledDataset, size: Option<usize>) -> Result<LabeledDataset> {
    match size {
        Some(n) if n < ds.len() => ds.take(n),
        _ => Ok(ds),
    }
}

fn missing_dir(name: &str) -> Error {
    Error::DatasetUnavailable(
        name.into(),
        format!("set {DATA_DIR_ENV} or pass --data-dir to point at the dataset cache"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_datasets_resolve_with_sizes() {
        let opts = DatasetOptions {
            size: Some(30),
            seed: 3,
            ..Default::default()
        };
        for name in ["cifar10-synth", "mnist-synth", "imagenet-synth"] {
            let ds = load(name, "train", &opts).unwrap();
            assert_eq!(ds.len(), 30);
        }
    }

    #[test]
    fn unknown_name_is_config_error() {
        let err = load("cifar11", "train", &DatasetOptions::default());
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn real_dataset_without_cache_dir_reports_unavailable() {
        let opts = DatasetOptions {
            data_dir: Some(PathBuf::from("/nonexistent-cache")),
            ..Default::default()
        };
        let err = load("cifar10", "train", &opts);
        assert!(matches!(err, Err(Error::DatasetUnavailable(..))));
    }
}
