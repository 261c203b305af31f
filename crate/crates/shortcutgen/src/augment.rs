//! Differentiable input augmentation: random crop (reflection padded) and
//! horizontal flip. Both are index operations, so gradients pass through to
//! the input untouched, which is what lets them sit inside the training
//! objective.

use candle_core::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    RandomCrop { padding: usize },
    HorizontalFlip { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub ops: Vec<AugOp>,
    pub seed: u64,
}

impl AugmentationPolicy {
    /// The canonical CIFAR victim recipe: 4-pixel reflect-pad crop + 0.5 flip.
    pub fn standard(seed: u64) -> Self {
        Self {
            ops: vec![
                AugOp::RandomCrop { padding: 4 },
                AugOp::HorizontalFlip { p: 0.5 },
            ],
            seed,
        }
    }

    /// No ops: applying this stream is the identity.
    pub fn disabled(seed: u64) -> Self {
        Self { ops: vec![], seed }
    }

    pub fn stream(&self) -> AugmentationStream {
        AugmentationStream {
            ops: self.ops.clone(),
            rng: ChaCha12Rng::seed_from_u64(self.seed),
        }
    }
}

/// A seeded stream of augmentation draws. Each `apply` consumes randomness;
/// two streams from the same policy replay identically.
pub struct AugmentationStream {
    ops: Vec<AugOp>,
    rng: ChaCha12Rng,
}

impl AugmentationStream {
    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        let ops = self.ops.clone();
        for op in &ops {
            out = match op {
                AugOp::RandomCrop { padding } => self.random_crop(&out, *padding)?,
                AugOp::HorizontalFlip { p } => self.horizontal_flip(&out, *p)?,
            };
        }
        Ok(out)
    }

    fn random_crop(&mut self, x: &Tensor, padding: usize) -> Result<Tensor> {
        if padding == 0 {
            return Ok(x.clone());
        }
        let (n, _c, h, w) = x.dims4()?;
        if h <= padding || w <= padding {
            return Err(Error::ShapeMismatch(format!(
                "cannot reflect-pad {h}x{w} by {padding}"
            )));
        }
        let padded = reflect_pad_hw(x, padding)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let oy = self.rng.random_range(0..=2 * padding);
            let ox = self.rng.random_range(0..=2 * padding);
            rows.push(
                padded
                    .narrow(0, i, 1)?
                    .narrow(2, oy, h)?
                    .narrow(3, ox, w)?,
            );
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::cat(&refs, 0)?)
    }

    fn horizontal_flip(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let (n, _c, _h, _w) = x.dims4()?;
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random_bool(p) { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().all(|&m| m == 0.0) {
            return Ok(x.clone());
        }
        let flipped = x.flip(&[3])?;
        let mask = Tensor::from_vec(mask, (n, 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
        let keep = (1.0 - &mask)?;
        Ok(flipped.broadcast_mul(&mask)?.add(&x.broadcast_mul(&keep)?)?)
    }
}

/// Reflection padding (edge excluded) on both spatial dims. Narrowed views
/// are made contiguous because index-select (inside flip) requires it.
fn reflect_pad_hw(x: &Tensor, pad: usize) -> Result<Tensor> {
    let (_n, _c, h, w) = x.dims4()?;
    let top = x.narrow(2, 1, pad)?.contiguous()?.flip(&[2])?;
    let bottom = x.narrow(2, h - 1 - pad, pad)?.contiguous()?.flip(&[2])?;
    let x = Tensor::cat(&[&top, x, &bottom], 2)?;
    let left = x.narrow(3, 1, pad)?.contiguous()?.flip(&[3])?;
    let right = x.narrow(3, w - 1 - pad, pad)?.contiguous()?.flip(&[3])?;
    Ok(Tensor::cat(&[&left, &x, &right], 3)?)
}
