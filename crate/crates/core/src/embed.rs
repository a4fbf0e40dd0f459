//! Exact 2D t-SNE over penultimate features and oracle embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::data::{DatasetSplit, NormalizationStats};
use crate::eval::{SampleCap, SensitivityReport, EVAL_BATCH};
use crate::tensor::RngStream;
use crate::train::normalized_batch;
use crate::zoo::ModelInstance;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub step: f64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated affinities and the initial momentum.
    pub exaggeration_iters: usize,
    pub momentum: (f64, f64),
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            step: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: (0.5, 0.8),
            seed: 0,
        }
    }
}

/// Symmetric joint affinities of `s` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    pub s: usize,
    /// Row-major `s x s`; zero diagonal, sums to 1.
    pub p: Vec<f64>,
    /// Perplexity `2^H` reached by each conditional row.
    pub row_perplexity: Vec<f64>,
}

fn squared_distances(features: &[f64], s: usize, f: usize) -> Vec<f64> {
    let mut d = vec![0.0; s * s];
    for i in 0..s {
        let a = &features[i * f..(i + 1) * f];
        for j in i + 1..s {
            let b = &features[j * f..(j + 1) * f];
            let v: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            d[i * s + j] = v;
            d[j * s + i] = v;
        }
    }
    d
}

/// Conditional row `p_{j|i}` at precision `beta`; returns the entropy in bits.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (o, &d)) in out.iter_mut().zip(dist).enumerate() {
        *o = if j == i { 0.0 } else { Float::exp(-beta * (d - dmin)) };
        z += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= z;
        if *o > 0.0 {
            h -= *o * Float::log2(*o);
        }
    }
    h
}

/// Gaussian affinities with per-row bandwidths found by bisection so each
/// conditional row has entropy `log2(perplexity)`, symmetrized as
/// `(P + P^T) / (2s)`.
pub fn pairwise_affinities(features: &[f64], s: usize, perplexity: f64) -> Result<Affinities> {
    if s < 4 {
        return Err(Error::InvalidArgument(format!(
            "t-SNE needs at least 4 points, got {}",
            s
        )));
    }
    if !features.len().is_multiple_of(s) || features.is_empty() {
        return Err(Error::shape(
            "affinities",
            format!("{} values for {} points", features.len(), s),
        ));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("features must be finite".into()));
    }
    if !(perplexity > 1.0 && perplexity < (s as f64 - 1.0) / 3.0) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} outside (1, {:.3}) for {} points",
            perplexity,
            (s as f64 - 1.0) / 3.0,
            s
        )));
    }
    let f = features.len() / s;
    let dist = squared_distances(features, s, f);
    if dist.iter().all(|&d| d == 0.0) {
        return Err(Error::Degenerate("all feature rows are identical".into()));
    }
    let target = Float::log2(perplexity);
    let mut cond = vec![0.0; s * s];
    let mut row_perplexity = vec![0.0; s];
    for i in 0..s {
        let drow = &dist[i * s..(i + 1) * s];
        let row = &mut cond[i * s..(i + 1) * s];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let mut h = conditional_row(drow, i, beta, row);
        for _ in 0..200 {
            if (h - target).abs() < 1e-7 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = conditional_row(drow, i, beta, row);
        }
        row_perplexity[i] = Float::powf(2.0, h);
    }
    let mut p = vec![0.0; s * s];
    let norm = 2.0 * s as f64;
    for i in 0..s {
        for j in 0..s {
            p[i * s + j] = (cond[i * s + j] + cond[j * s + i]) / norm;
        }
    }
    Ok(Affinities { s, p, row_perplexity })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// `KL(P || Q)` before each iteration, against the unexaggerated `P`.
    pub kl: Vec<f64>,
}

/// Exact t-SNE of `s` feature rows to two dimensions.
pub fn tsne(features: &[f64], s: usize, cfg: &TsneConfig) -> Result<TsneResult> {
    let aff = pairwise_affinities(features, s, cfg.perplexity)?;
    Ok(tsne_from_affinities(&aff, cfg))
}

pub fn tsne_from_affinities(aff: &Affinities, cfg: &TsneConfig) -> TsneResult {
    let s = aff.s;
    let p = &aff.p;
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut y: Vec<[f64; 2]> = (0..s).map(|_| [1e-4 * rng.normal(), 1e-4 * rng.normal()]).collect();
    recenter(&mut y);
    let mut update = vec![[0.0; 2]; s];
    let mut gains = vec![[1.0; 2]; s];
    let mut num = vec![0.0; s * s];
    let mut grad = vec![[0.0; 2]; s];
    let mut kl = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let exag = if early { cfg.exaggeration } else { 1.0 };
        let momentum = if early { cfg.momentum.0 } else { cfg.momentum.1 };
        let mut z = 0.0;
        for i in 0..s {
            for j in i + 1..s {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * s + j] = v;
                num[j * s + i] = v;
                z += 2.0 * v;
            }
        }
        let mut cost = 0.0;
        for i in 0..s {
            let mut g = [0.0; 2];
            for j in 0..s {
                if i == j {
                    continue;
                }
                let pij = p[i * s + j];
                let q = (num[i * s + j] / z).max(1e-300);
                if pij > 0.0 {
                    cost += pij * Float::ln(pij / q);
                }
                let w = (exag * pij - q) * num[i * s + j];
                g[0] += w * (y[i][0] - y[j][0]);
                g[1] += w * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        kl.push(cost);
        for i in 0..s {
            for a in 0..2 {
                let same = (grad[i][a] > 0.0) == (update[i][a] > 0.0);
                gains[i][a] = if same { gains[i][a] * 0.8 } else { gains[i][a] + 0.2 };
                gains[i][a] = gains[i][a].max(0.01);
                update[i][a] = momentum * update[i][a] - cfg.step * gains[i][a] * grad[i][a];
                y[i][a] += update[i][a];
            }
        }
        recenter(&mut y);
    }
    TsneResult { coords: y, kl }
}

fn recenter(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

/// Mean silhouette coefficient of 2D points under integer labels.
pub fn silhouette(coords: &[[f64; 2]], labels: &[u32]) -> Result<f64> {
    if coords.len() != labels.len() || coords.len() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs matching points and labels".into(),
        ));
    }
    let k = labels.iter().copied().max().unwrap() as usize + 1;
    let dist = |a: [f64; 2], b: [f64; 2]| Float::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]));
    let mut total = 0.0;
    for (i, &ci) in labels.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, &cj) in labels.iter().enumerate() {
            if i != j {
                sums[cj as usize] += dist(coords[i], coords[j]);
                counts[cj as usize] += 1;
            }
        }
        if counts[ci as usize] == 0 {
            continue;
        }
        let a = sums[ci as usize] / counts[ci as usize] as f64;
        let b = (0..k)
            .filter(|&c| c != ci as usize && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    Ok(total / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ColorKey {
    Class(u32),
    Value(f64),
}

impl ColorKey {
    pub fn as_f64(self) -> f64 {
        match self {
            ColorKey::Class(c) => c as f64,
            ColorKey::Value(v) => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingPoint {
    pub sample_id: usize,
    pub p1: f64,
    pub p2: f64,
    pub color: ColorKey,
}

/// Penultimate features `[n, F]` of the selected samples, flattened.
pub fn extract_split_features(
    model: &ModelInstance<f32>,
    split: &DatasetSplit,
    stats: &NormalizationStats,
    ids: &[usize],
) -> Result<Vec<f64>> {
    if split.shape() != model.spec().input {
        return Err(Error::InvalidArgument(format!(
            "split images {:?} do not fit {}",
            split.shape(),
            model.spec().name()
        )));
    }
    let mut out = Vec::with_capacity(ids.len() * model.feature_dim());
    for chunk in ids.chunks(EVAL_BATCH) {
        let f = model.extract_features(&normalized_batch(split, chunk, stats))?;
        out.extend(f.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Embeds the oracle's features of (a seeded subset of) `split`; points are
/// colored by their true class.
pub fn oracle_embed(
    oracle: &ModelInstance<f32>,
    split: &DatasetSplit,
    stats: &NormalizationStats,
    cfg: &TsneConfig,
    cap: SampleCap,
) -> Result<Vec<EmbeddingPoint>> {
    if split.num_classes() != oracle.spec().num_classes {
        return Err(Error::InvalidArgument(format!(
            "split has {} classes, oracle {}",
            split.num_classes(),
            oracle.spec().num_classes
        )));
    }
    let ids = cap.select(split.len());
    let feats = extract_split_features(oracle, split, stats, &ids)?;
    let res = tsne(&feats, ids.len(), cfg)?;
    Ok(ids
        .iter()
        .zip(&res.coords)
        .map(|(&id, c)| EmbeddingPoint {
            sample_id: id,
            p1: c[0],
            p2: c[1],
            color: ColorKey::Class(split.labels()[id]),
        })
        .collect())
}

/// Same coordinates, colored by each sample's sensitivity.
pub fn color_by_sensitivity(points: &[EmbeddingPoint], report: &SensitivityReport) -> Result<Vec<EmbeddingPoint>> {
    points
        .iter()
        .map(|p| {
            let pos = report.sample_ids.binary_search(&p.sample_id).map_err(|_| {
                Error::InvalidArgument(format!("sample {} missing from sensitivity report", p.sample_id))
            })?;
            Ok(EmbeddingPoint {
                color: ColorKey::Value(report.values[pos]),
                ..*p
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_rows(s: usize, f: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 0);
        (0..s * f).map(|_| rng.normal()).collect()
    }

    #[test]
    fn affinity_invariants() {
        let x = gaussian_rows(40, 5, 1);
        let a = pairwise_affinities(&x, 40, 10.0).unwrap();
        let total: f64 = a.p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for i in 0..40 {
            assert_eq!(a.p[i * 40 + i], 0.0);
            for j in 0..40 {
                assert!(a.p[i * 40 + j] >= 0.0);
                assert_eq!(a.p[i * 40 + j], a.p[j * 40 + i]);
            }
            assert!((a.row_perplexity[i] - 10.0).abs() < 1e-3, "{}", a.row_perplexity[i]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            pairwise_affinities(&[1.0; 40], 20, 5.0),
            Err(Error::Degenerate(_))
        ));
        assert!(pairwise_affinities(&[0.0; 6], 3, 1.5).is_err());
        let x = gaussian_rows(20, 2, 2);
        assert!(pairwise_affinities(&x, 20, 7.0).is_err());
        assert!(pairwise_affinities(&x, 20, 1.0).is_err());
    }

    #[test]
    fn tsne_is_centered_and_deterministic() {
        let x = gaussian_rows(30, 4, 3);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            ..TsneConfig::default()
        };
        let a = tsne(&x, 30, &cfg).unwrap();
        let b = tsne(&x, 30, &cfg).unwrap();
        assert_eq!(a, b);
        let mx: f64 = a.coords.iter().map(|c| c[0]).sum::<f64>() / 30.0;
        let my: f64 = a.coords.iter().map(|c| c[1]).sum::<f64>() / 30.0;
        assert!(mx.abs() < 1e-6 && my.abs() < 1e-6);
        assert_eq!(a.kl.len(), 300);
        assert!(a.kl.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silhouette_extremes() {
        let pts = [[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]).unwrap() > 0.95);
        assert!(silhouette(&pts, &[0, 1, 0, 1]).unwrap() < 0.0);
    }
}
