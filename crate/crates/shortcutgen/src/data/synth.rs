//! Deterministic synthetic image datasets.
//!
//! These are class-structured stand-ins with the same shapes and class counts
//! as the real corpora, for environments where the real data is not cached.
//! Three difficulty tiers mirror how the real sets behave under a generator
//! trained on 32x32 RGB objects:
//!
//! * `object10` (CIFAR10 stand-in): 10 object classes, moderate intra-class
//!   jitter, RGB 32x32.
//! * `digits10` (MNIST stand-in): 10 glyph classes, very low intra-class
//!   variance, grayscale 28x28.
//! * `textures10` (ImageNet-subset stand-in): 10 classes of 3 sub-modes each
//!   with heavy clutter, RGB 64x64.

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::{sample_id, ImageBatch, LabeledDataset};
use crate::error::Result;
use crate::hashing::derive_seed;

pub const NUM_CLASSES: usize = 10;

fn rng_for(name: &str, split: &str, seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("synth/{name}/{split}")))
}

fn normal(rng: &mut ChaCha12Rng) -> f32 {
    rng.sample(StandardNormal)
}

/// h in [0,1), s, v in [0,1] -> rgb
fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl Shape {
    fn of(index: usize) -> Self {
        match index % 5 {
            0 => Shape::Disk,
            1 => Shape::Square,
            2 => Shape::Triangle,
            3 => Shape::Ring,
            _ => Shape::Cross,
        }
    }

    /// Signed distance from point `(x, y)` (object frame) to the boundary.
    fn sdf(&self, x: f32, y: f32, r: f32) -> f32 {
        let box_sdf = |x: f32, y: f32, bx: f32, by: f32| {
            let qx = x.abs() - bx;
            let qy = y.abs() - by;
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            outside + qx.max(qy).min(0.0)
        };
        match self {
            Shape::Disk => (x * x + y * y).sqrt() - r,
            Shape::Square => box_sdf(x, y, r * 0.85, r * 0.85),
            Shape::Triangle => {
                // Equilateral triangle pointing up.
                let k = 3.0f32.sqrt();
                let mut px = x.abs() - r;
                let mut py = y + r / k;
                if px + k * py > 0.0 {
                    let nx = (px - k * py) / 2.0;
                    let ny = (-k * px - py) / 2.0;
                    px = nx;
                    py = ny;
                }
                px -= px.clamp(-2.0 * r, 0.0);
                -(px * px + py * py).sqrt() * py.signum()
            }
            Shape::Ring => ((x * x + y * y).sqrt() - r * 0.8).abs() - r * 0.28,
            Shape::Cross => box_sdf(x, y, r, r * 0.38).min(box_sdf(x, y, r * 0.38, r)),
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    // channel-major, [3][h][w]
    data: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    fn at(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    fn fill_gradient(&mut self, corners: [[f32; 3]; 4]) {
        for y in 0..self.h {
            let fy = y as f32 / (self.h - 1) as f32;
            for x in 0..self.w {
                let fx = x as f32 / (self.w - 1) as f32;
                for c in 0..3 {
                    let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                    let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                    *self.at(c, y, x) = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn draw_shape(
        &mut self,
        shape: Shape,
        cx: f32,
        cy: f32,
        radius: f32,
        angle: f32,
        color: [f32; 3],
        tex_theta: f32,
        tex_freq: f32,
        tex_phase: f32,
        tex_amp: f32,
    ) {
        let (sin_a, cos_a) = angle.sin_cos();
        let (sin_t, cos_t) = tex_theta.sin_cos();
        for y in 0..self.h {
            for x in 0..self.w {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                // rotate into object frame
                let ox = dx * cos_a + dy * sin_a;
                let oy = -dx * sin_a + dy * cos_a;
                let d = shape.sdf(ox, oy, radius);
                if d > 1.0 {
                    continue;
                }
                let coverage = (0.5 - d).clamp(0.0, 1.0);
                let u = (ox * cos_t + oy * sin_t) / radius.max(1.0);
                let tex = 1.0 - tex_amp + tex_amp * (std::f32::consts::TAU * tex_freq * u + tex_phase).sin();
                for c in 0..3 {
                    let v = self.at(c, y, x);
                    *v = *v * (1.0 - coverage) + color[c] * tex * coverage;
                }
            }
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [f32; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                for c in 0..3 {
                    *self.at(c, y, x) = color[c];
                }
            }
        }
    }

    fn add_noise_and_clip(&mut self, sigma: f32, rng: &mut ChaCha12Rng) {
        for v in &mut self.data {
            *v = (*v + sigma * rng.sample::<f32, _>(StandardNormal)).clamp(0.0, 1.0);
        }
    }
}

/// CIFAR10 stand-in: 10 object classes on 32x32 RGB.
///
/// Class signal is redundant (shape family, texture orientation/frequency,
/// hue) with enough positional/color jitter and occlusion that a small CNN
/// has to work for its accuracy.
pub fn object10(split: &str, n: usize, seed: u64) -> Result<LabeledDataset> {
    let (h, w) = (32usize, 32usize);
    let mut rng = rng_for("object10", split, seed);
    let mut pixels = Array4::zeros((n, 3, h, w));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mut canvas = Canvas::new(h, w);
        let mut corner = || {
            let v = 0.25 + 0.4 * rng.random::<f32>();
            let tint = 0.08 * rng.random::<f32>();
            [v, v + tint, v - tint * 0.5]
        };
        let corners = [corner(), corner(), corner(), corner()];
        canvas.fill_gradient(corners);

        let hue = class as f32 / 10.0 + 0.03 * normal(&mut rng);
        let sat = (0.55 + 0.25 * rng.random::<f32>()).min(1.0);
        let val = (0.6 + 0.3 * rng.random::<f32>()).min(1.0);
        let color = hsv_to_rgb(hue, sat, val);
        let cx = 15.5 + 6.0 * (rng.random::<f32>() - 0.5) * 2.0;
        let cy = 15.5 + 6.0 * (rng.random::<f32>() - 0.5) * 2.0;
        let radius = 7.0 + 4.0 * rng.random::<f32>();
        let angle = 0.5 * (rng.random::<f32>() - 0.5);
        let tex_theta = class as f32 * std::f32::consts::PI / 10.0 + 0.2 * (rng.random::<f32>() - 0.5);
        let tex_freq = 2.0 + (class % 3) as f32;
        canvas.draw_shape(
            Shape::of(class),
            cx,
            cy,
            radius,
            angle,
            color,
            tex_theta,
            tex_freq,
            std::f32::consts::TAU * rng.random::<f32>(),
            0.35,
        );
        // Occasional occluder adds intra-class variance.
        if rng.random::<f32>() < 0.3 {
            let ox = rng.random_range(0..w - 6);
            let oy = rng.random_range(0..h - 6);
            let g = 0.3 + 0.4 * rng.random::<f32>();
            canvas.rect(ox, oy, ox + 6, oy + 6, [g, g, g]);
        }
        canvas.add_noise_and_clip(0.03, &mut rng);
        pixels
            .index_axis_mut(ndarray::Axis(0), i)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&canvas.data);
        labels.push(class);
        ids.push(sample_id(split, i));
    }
    let batch = ImageBatch::new(pixels, Some(labels), ids, Some(NUM_CLASSES))?;
    LabeledDataset::new("object10", split, batch, NUM_CLASSES)
}

/// 5x7 glyph bitmaps for the digits 0-9.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111], // 2
    [0b01110, 0b10001, 0b00001, 0b00110, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b01110, 0b10000, 0b11110, 0b10001, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00001, 0b01110], // 9
];

/// MNIST stand-in: near-noiseless glyphs on 28x28 grayscale (1 channel).
pub fn digits10(split: &str, n: usize, seed: u64) -> Result<LabeledDataset> {
    let (h, w) = (28usize, 28usize);
    let mut rng = rng_for("digits10", split, seed);
    let mut pixels = Array4::zeros((n, 1, h, w));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let glyph = &GLYPHS[class];
        let scale = 3usize;
        let ox = 6 + rng.random_range(0..5) as i32 - 2; // jitter +-2
        let oy = 3 + rng.random_range(0..5) as i32 - 2;
        let intensity = 0.75 + 0.25 * rng.random::<f32>();
        let mut img = pixels.index_axis_mut(ndarray::Axis(0), i);
        for (gy, row) in glyph.iter().enumerate() {
            for gx in 0..5 {
                if row & (1 << (4 - gx)) == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let y = oy + (gy * scale + sy) as i32;
                        let x = ox + (gx * scale + sx) as i32;
                        if (0..h as i32).contains(&y) && (0..w as i32).contains(&x) {
                            img[[0, y as usize, x as usize]] = intensity;
                        }
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + 0.04 * rng.sample::<f32, _>(StandardNormal)).clamp(0.0, 1.0);
        }
        labels.push(class);
        ids.push(sample_id(split, i));
    }
    let batch = ImageBatch::new(pixels, Some(labels), ids, Some(NUM_CLASSES))?;
    LabeledDataset::new("digits10", split, batch, NUM_CLASSES)
}

/// ImageNet-subset stand-in: 10 classes x 3 visual sub-modes on 64x64 RGB,
/// heavy clutter, the hardest of the three tiers.
pub fn textures10(split: &str, n: usize, seed: u64) -> Result<LabeledDataset> {
    let (h, w) = (64usize, 64usize);
    let mut rng = rng_for("textures10", split, seed);
    let mut pixels = Array4::zeros((n, 3, h, w));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let mode = rng.random_range(0..3usize);
        let mut canvas = Canvas::new(h, w);
        let mut corner = || {
            [
                0.2 + 0.6 * rng.random::<f32>(),
                0.2 + 0.6 * rng.random::<f32>(),
                0.2 + 0.6 * rng.random::<f32>(),
            ]
        };
        let corners = [corner(), corner(), corner(), corner()];
        canvas.fill_gradient(corners);
        // Clutter: 6 random distractor patches.
        for _ in 0..6 {
            let cw = rng.random_range(4..14usize);
            let ch = rng.random_range(4..14usize);
            let x0 = rng.random_range(0..w - cw);
            let y0 = rng.random_range(0..h - ch);
            let col = hsv_to_rgb(rng.random::<f32>(), 0.5, 0.3 + 0.5 * rng.random::<f32>());
            canvas.rect(x0, y0, x0 + cw, y0 + ch, col);
        }
        // Sub-mode shifts both shape family and hue band.
        let shape = Shape::of(class + mode * 3);
        let hue = (class as f32 + 0.3 * mode as f32) / 10.0 + 0.05 * normal(&mut rng);
        let color = hsv_to_rgb(hue, 0.4 + 0.4 * rng.random::<f32>(), 0.5 + 0.4 * rng.random::<f32>());
        let cx = 31.5 + 16.0 * (rng.random::<f32>() - 0.5) * 2.0;
        let cy = 31.5 + 16.0 * (rng.random::<f32>() - 0.5) * 2.0;
        let radius = 10.0 + 8.0 * rng.random::<f32>();
        canvas.draw_shape(
            shape,
            cx,
            cy,
            radius,
            std::f32::consts::PI * rng.random::<f32>(),
            color,
            (class + mode) as f32 * 0.45,
            1.5 + (mode as f32),
            std::f32::consts::TAU * rng.random::<f32>(),
            0.45,
        );
        canvas.add_noise_and_clip(0.05, &mut rng);
        pixels
            .index_axis_mut(ndarray::Axis(0), i)
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&canvas.data);
        labels.push(class);
        ids.push(sample_id(split, i));
    }
    let batch = ImageBatch::new(pixels, Some(labels), ids, Some(NUM_CLASSES))?;
    LabeledDataset::new("textures10", split, batch, NUM_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = object10("train", 20, 7).unwrap();
        let b = object10("train", 20, 7).unwrap();
        let c = object10("train", 20, 8).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn balanced_labels_and_valid_pixels() {
        let ds = object10("train", 100, 1).unwrap();
        let mut counts = [0usize; 10];
        for &l in ds.labels() {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        assert!(ds.batch.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn native_shapes_differ_per_family() {
        assert_eq!(digits10("t", 4, 0).unwrap().batch.sample_shape(), (1, 28, 28));
        assert_eq!(textures10("t", 4, 0).unwrap().batch.sample_shape(), (3, 64, 64));
        assert_eq!(object10("t", 4, 0).unwrap().batch.sample_shape(), (3, 32, 32));
    }
}
