//! Latent-space analysis: a deterministic exact t-SNE, silhouette scoring,
//! and plot/CSV export.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::LatentRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iters: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            seed: 0,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
        }
    }
}

/// Exact (all-pairs) t-SNE to 2-D.
///
/// The initial layout is content-addressed: each point's starting position
/// is a hash of (seed, its feature vector), not of its position in the
/// input. Shuffling the rows therefore permutes the embedding instead of
/// changing it, and duplicate inputs start (and stay) coincident.
pub fn tsne(points: &[Vec<f32>], params: &TsneParams) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewSamples { got: n, need: 2 });
    }
    if !(params.perplexity > 0.0) || params.perplexity >= n as f64 {
        return Err(Error::InvalidConfig(format!(
            "perplexity {} must be in (0, n = {n})",
            params.perplexity
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("ragged latent vectors".into()));
    }

    // squared Euclidean distances in f64
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0f64;
            for k in 0..dim {
                let diff = points[i][k] as f64 - points[j][k] as f64;
                acc += diff * diff;
            }
            d2[i * n + j] = acc;
            d2[j * n + i] = acc;
        }
    }

    // per-row conditional distributions at the target perplexity
    let target_entropy = params.perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let (mut beta, mut beta_lo, mut beta_hi) = (1.0f64, 0.0f64, f64::INFINITY);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for (j, &dist) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let w = (-beta * dist).exp();
                sum += w;
                weighted += beta * dist * w;
            }
            let entropy = if sum > 0.0 {
                sum.ln() + weighted / sum
            } else {
                0.0
            };
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_lo = beta;
                beta = if beta_hi.is_finite() {
                    (beta + beta_hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_hi = beta;
                beta = (beta + beta_lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for (j, &dist) in row.iter().enumerate() {
            if j != i {
                let w = (-beta * dist).exp();
                p[i * n + j] = w;
                sum += w;
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[i * n + j] /= sum;
            }
        }
    }
    // symmetrize
    let mut pij = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            pij[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    // content-addressed init, approximately N(0, 1e-4)
    let mut y: Vec<[f64; 2]> = points
        .iter()
        .map(|feat| {
            let mut h = Sha256::new();
            h.update(params.seed.to_le_bytes());
            for v in feat {
                h.update(v.to_le_bytes());
            }
            let digest = h.finalize();
            let u = |offset: usize| {
                let raw = u64::from_le_bytes(digest[offset..offset + 8].try_into().expect("8"));
                (raw >> 11) as f64 / (1u64 << 53) as f64
            };
            let (u1, u2) = (u(0).max(1e-12), u(8));
            let r = (-2.0 * u1.ln()).sqrt() * 1e-4;
            let angle = std::f64::consts::TAU * u2;
            [r * angle.cos(), r * angle.sin()]
        })
        .collect();

    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    // standard 250-step exaggeration phase, scaled down for short runs
    let exaggeration_until = 250.min(params.iters / 4);
    let mut q = vec![0.0f64; n * n];
    for iter in 0..params.iters {
        let exag = if iter < exaggeration_until {
            params.early_exaggeration
        } else {
            1.0
        };
        // student-t affinities
        let mut z = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                z += 2.0 * w;
            }
        }
        let z = z.max(1e-12);
        let momentum = if iter < exaggeration_until { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = (exag * pij[i * n + j] - w / z) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let g = 4.0 * grad[k];
                gains[i][k] = if g.signum() != velocity[i][k].signum() {
                    (gains[i][k] + 0.2).min(4.0)
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                velocity[i][k] = momentum * velocity[i][k] - params.learning_rate * gains[i][k] * g;
            }
        }
        let mut mean = [0.0f64; 2];
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
            mean[0] += y[i][0];
            mean[1] += y[i][1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for point in &mut y {
            point[0] -= mean[0];
            point[1] -= mean[1];
        }
    }
    Ok(y)
}

/// Mean silhouette coefficient of a labeled 2-D embedding. Single-member
/// classes score zero, matching the usual convention.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n < 2 || labels.len() != n {
        return Err(Error::TooFewSamples { got: n, need: 2 });
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidConfig(
            "silhouette needs at least two classes".into(),
        ));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for j in 0..n {
            if i == j {
                continue;
            }
            let entry = sums.entry(labels[j]).or_insert((0.0, 0));
            entry.0 += dist(&points[i], &points[j]);
            entry.1 += 1;
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue; // singleton class contributes 0
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(&c, _)| c != labels[i])
            .map(|(_, &(sum, count))| sum / count as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

/// A 2-D embedding with class colors and its separability score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingPlot {
    pub sample_ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<Option<usize>>,
    pub silhouette: Option<f64>,
}

/// Embed latent records and score separability.
pub fn tsne_export(latents: &[LatentRecord], params: &TsneParams) -> Result<EmbeddingPlot> {
    let vectors: Vec<Vec<f32>> = latents.iter().map(|l| l.vector.clone()).collect();
    let points = tsne(&vectors, params)?;
    let labels: Vec<Option<usize>> = latents.iter().map(|l| l.label).collect();
    let silhouette = if labels.iter().all(|l| l.is_some()) {
        let ls: Vec<usize> = labels.iter().map(|l| l.expect("checked")).collect();
        Some(silhouette(&points, &ls)?)
    } else {
        None
    };
    Ok(EmbeddingPlot {
        sample_ids: latents.iter().map(|l| l.sample_id.clone()).collect(),
        points,
        labels,
        silhouette,
    })
}

impl EmbeddingPlot {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,x,y,label\n");
        for i in 0..self.points.len() {
            let label = self.labels[i].map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{label}\n",
                self.sample_ids[i], self.points[i][0], self.points[i][1]
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Simple SVG scatter, one color per class.
    pub fn write_svg(&self, path: &Path) -> Result<()> {
        const PALETTE: [&str; 10] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf",
        ];
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            min_x = min_x.min(p[0]);
            max_x = max_x.max(p[0]);
            min_y = min_y.min(p[1]);
            max_y = max_y.max(p[1]);
        }
        let side = 600.0;
        let span_x = (max_x - min_x).max(1e-9);
        let span_y = (max_y - min_y).max(1e-9);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" \
             viewBox=\"0 0 {side} {side}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        for (i, p) in self.points.iter().enumerate() {
            let x = 20.0 + (p[0] - min_x) / span_x * (side - 40.0);
            let y = 20.0 + (p[1] - min_y) / span_y * (side - 40.0);
            let color = self.labels[i]
                .map(|l| PALETTE[l % PALETTE.len()])
                .unwrap_or("#333333");
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n"
            ));
        }
        if let Some(score) = self.silhouette {
            svg.push_str(&format!(
                "<text x=\"10\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"12\">silhouette = {score:.4}</text>\n",
                side - 6.0
            ));
        }
        svg.push_str("</svg>\n");
        std::fs::write(path, svg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Three well-separated Gaussian-ish blobs in 8-D.
    fn blobs(n_per: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3usize {
            for _ in 0..n_per {
                let v: Vec<f32> = (0..8)
                    .map(|k| {
                        let center = if k == class { 10.0 } else { 0.0 };
                        center + rng.random::<f32>() * 0.5
                    })
                    .collect();
                points.push(v);
                labels.push(class);
            }
        }
        (points, labels)
    }

    fn quick_params(seed: u64) -> TsneParams {
        TsneParams {
            perplexity: 10.0,
            iters: 300,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(matches!(
            tsne(&[vec![1.0]], &TsneParams::default()),
            Err(Error::TooFewSamples { .. })
        ));
        let (points, _) = blobs(4, 0);
        let bad = TsneParams {
            perplexity: 100.0,
            ..TsneParams::default()
        };
        assert!(tsne(&points, &bad).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let (points, _) = blobs(10, 1);
        let a = tsne(&points, &quick_params(5)).unwrap();
        let b = tsne(&points, &quick_params(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn separates_well_separated_blobs() {
        let (points, labels) = blobs(15, 2);
        let emb = tsne(&points, &quick_params(3)).unwrap();
        let score = silhouette(&emb, &labels).unwrap();
        assert!(score > 0.5, "silhouette only {score}");
    }

    #[test]
    fn identical_inputs_embed_coincident() {
        let mut points = blobs(8, 3).0;
        points[0] = points[1].clone();
        let emb = tsne(&points, &quick_params(1)).unwrap();
        let d = ((emb[0][0] - emb[1][0]).powi(2) + (emb[0][1] - emb[1][1]).powi(2)).sqrt();
        assert!(d < 1e-6, "duplicates drifted apart: {d}");
    }

    #[test]
    fn shuffling_inputs_permutes_the_embedding() {
        // a short horizon keeps numerical noise from the (order-dependent)
        // f64 summation below the assertion threshold
        let params = TsneParams {
            perplexity: 10.0,
            iters: 100,
            seed: 9,
            ..Default::default()
        };
        let (points, _) = blobs(10, 4);
        let emb = tsne(&points, &params).unwrap();
        // reverse order as the permutation
        let shuffled: Vec<Vec<f32>> = points.iter().rev().cloned().collect();
        let emb_shuffled = tsne(&shuffled, &params).unwrap();
        let n = points.len();
        // compare pairwise distance structure after inverting the permutation
        for i in 0..n {
            for j in (i + 1)..n {
                let d1 = ((emb[i][0] - emb[j][0]).powi(2) + (emb[i][1] - emb[j][1]).powi(2)).sqrt();
                let (si, sj) = (n - 1 - i, n - 1 - j);
                let d2 = ((emb_shuffled[si][0] - emb_shuffled[sj][0]).powi(2)
                    + (emb_shuffled[si][1] - emb_shuffled[sj][1]).powi(2))
                .sqrt();
                let rel = (d1 - d2).abs() / d1.max(d2).max(1e-9);
                assert!(rel < 1e-3, "pair ({i},{j}): {d1} vs {d2}");
            }
        }
    }

    #[test]
    fn silhouette_orders_tight_vs_mixed_clusters() {
        // tight, far-apart clusters
        let tight: Vec<[f64; 2]> = vec![[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        let labels = vec![0, 0, 1, 1];
        let hi = silhouette(&tight, &labels).unwrap();
        // interleaved labels at the same positions
        let lo = silhouette(&tight, &[0, 1, 0, 1]).unwrap();
        assert!(hi > 0.9);
        assert!(lo < 0.0);
        assert!(hi > lo);
    }

    #[test]
    fn export_writes_csv_and_svg() {
        let (points, labels) = blobs(6, 5);
        let latents: Vec<LatentRecord> = points
            .iter()
            .enumerate()
            .map(|(i, v)| LatentRecord {
                sample_id: format!("t/{i:05}"),
                vector: v.clone(),
                label: Some(labels[i]),
            })
            .collect();
        let plot = tsne_export(&latents, &quick_params(2)).unwrap();
        assert!(plot.silhouette.is_some());
        let dir = tempfile::tempdir().unwrap();
        plot.write_csv(&dir.path().join("emb.csv")).unwrap();
        plot.write_svg(&dir.path().join("emb.svg")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("emb.csv")).unwrap();
        assert!(csv.starts_with("sample_id,x,y,label\n"));
        assert_eq!(csv.lines().count(), 1 + 18);
    }
}
