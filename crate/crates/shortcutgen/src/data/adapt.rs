//! Shape/channel adapters that bring foreign datasets to the generator's
//! native input shape (3 x 32 x 32 for CIFAR-trained generators).

use ndarray::Array4;

use super::{ImageBatch, LabeledDataset};
use crate::error::{Error, Result};

/// Adapt `ds` to `(3, target, target)`:
/// * grayscale is replicated to 3 channels,
/// * smaller spatial dims are zero-padded symmetrically,
/// * spatial dims that are an exact multiple of the target are reduced by
///   area averaging.
///
/// Anything else is an `AdapterFailure`: silent resampling of awkward sizes
/// would make the epsilon budget hard to interpret.
pub fn to_rgb_square(ds: &LabeledDataset, target: usize) -> Result<LabeledDataset> {
    let (c, h, w) = ds.batch.sample_shape();
    let n = ds.len();
    if c != 1 && c != 3 {
        return Err(Error::AdapterFailure(format!(
            "cannot adapt {c}-channel images to RGB"
        )));
    }
    let src = ds.batch.pixels();
    // Spatial plan.
    enum Plan {
        Identity,
        Pad(usize, usize),
        Downscale(usize),
    }
    let plan = if h == target && w == target {
        Plan::Identity
    } else if h <= target && w <= target {
        Plan::Pad((target - h) / 2, (target - w) / 2)
    } else if h == w && h % target == 0 {
        Plan::Downscale(h / target)
    } else {
        return Err(Error::AdapterFailure(format!(
            "cannot adapt {h}x{w} to {target}x{target}"
        )));
    };
    let mut out = Array4::<f32>::zeros((n, 3, target, target));
    for i in 0..n {
        for oc in 0..3 {
            let ic = if c == 3 { oc } else { 0 };
            match plan {
                Plan::Identity => {
                    for y in 0..target {
                        for x in 0..target {
                            out[[i, oc, y, x]] = src[[i, ic, y, x]];
                        }
                    }
                }
                Plan::Pad(dy, dx) => {
                    for y in 0..h {
                        for x in 0..w {
                            out[[i, oc, y + dy, x + dx]] = src[[i, ic, y, x]];
                        }
                    }
                }
                Plan::Downscale(f) => {
                    let norm = (f * f) as f32;
                    for y in 0..target {
                        for x in 0..target {
                            let mut acc = 0.0;
                            for sy in 0..f {
                                for sx in 0..f {
                                    acc += src[[i, ic, y * f + sy, x * f + sx]];
                                }
                            }
                            out[[i, oc, y, x]] = acc / norm;
                        }
                    }
                }
            }
        }
    }
    let batch = ImageBatch::new(
        out,
        Some(ds.labels().to_vec()),
        ds.batch.sample_ids().to_vec(),
        Some(ds.num_classes),
    )?;
    LabeledDataset::new(&ds.name, &ds.split, batch, ds.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_id;
    use ndarray::Array4;

    fn ds(c: usize, h: usize, w: usize) -> LabeledDataset {
        let mut pixels = Array4::zeros((2, c, h, w));
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        let batch = ImageBatch::new(
            pixels,
            Some(vec![0, 1]),
            vec![sample_id("t", 0), sample_id("t", 1)],
            Some(2),
        )
        .unwrap();
        LabeledDataset::new("x", "t", batch, 2).unwrap()
    }

    #[test]
    fn identity_on_native_shape() {
        let d = ds(3, 32, 32);
        let a = to_rgb_square(&d, 32).unwrap();
        assert_eq!(a.batch.pixels(), d.batch.pixels());
    }

    #[test]
    fn pads_and_replicates_grayscale() {
        let a = to_rgb_square(&ds(1, 28, 28), 32).unwrap();
        assert_eq!(a.batch.sample_shape(), (3, 32, 32));
        let p = a.batch.pixels();
        // channels replicated
        assert_eq!(p[[0, 0, 10, 10]], p[[0, 2, 10, 10]]);
        // border padded with zeros
        assert_eq!(p[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn area_downscale_averages() {
        let a = to_rgb_square(&ds(3, 64, 64), 32).unwrap();
        assert_eq!(a.batch.sample_shape(), (3, 32, 32));
        let d = ds(3, 64, 64);
        let s = d.batch.pixels();
        let expect = (s[[0, 0, 0, 0]] + s[[0, 0, 0, 1]] + s[[0, 0, 1, 0]] + s[[0, 0, 1, 1]]) / 4.0;
        assert!((a.batch.pixels()[[0, 0, 0, 0]] - expect).abs() < 1e-6);
    }

    #[test]
    fn rejects_awkward_shapes() {
        assert!(to_rgb_square(&ds(3, 48, 64), 32).is_err());
        assert!(to_rgb_square(&ds(2, 32, 32), 32).is_err());
    }
}
