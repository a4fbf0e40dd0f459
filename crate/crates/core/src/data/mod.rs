//! Labeled image sets, balanced subsampling, normalization, augmentation and
//! synthetic fixtures.

mod augment;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use augment::{augment, augment_traced, AugLevel, AugRecord, AugmentationPolicy, EraseRect, Transform};

use crate::tensor::RngStream;
use crate::{Error, Result};

/// Images with 8-bit channels in HWC order plus integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    images: Vec<u8>,
    labels: Vec<u32>,
    /// `[H, W, C]`.
    shape: [usize; 3],
    num_classes: usize,
}

impl DatasetSplit {
    pub fn new(images: Vec<u8>, labels: Vec<u32>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let px: usize = shape.iter().product();
        if px == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "image extents and class count must be positive".into(),
            ));
        }
        if images.len() != labels.len() * px {
            return Err(Error::shape(
                "dataset",
                format!("{} bytes for {} images of {:?}", images.len(), labels.len(), shape),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} of sample {} outside [0, {})",
                l, i, num_classes
            )));
        }
        Ok(DatasetSplit {
            images,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let px = self.pixels_per_image();
        &self.images[i * px..(i + 1) * px]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Samples per class when every class has the same non-zero count.
    pub fn per_class(&self) -> Option<usize> {
        let counts = self.class_counts();
        let n = counts[0];
        (n > 0 && counts.iter().all(|&c| c == n)).then_some(n)
    }

    pub fn is_balanced(&self) -> bool {
        self.per_class().is_some()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> DatasetSplit {
        let px = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        DatasetSplit {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn image_unit(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&p| p as f32 / 255.0).collect()
    }
}

/// Exactly `n` samples of every class, drawn without replacement. The
/// selection depends only on `(split, n, seed)` and keeps the original
/// sample order.
pub fn subsample_balanced(split: &DatasetSplit, n: usize, seed: u64) -> Result<DatasetSplit> {
    Ok(split.select(&balanced_indices(split, n, seed)?))
}

/// Indices chosen by [`subsample_balanced`], ascending.
pub fn balanced_indices(split: &DatasetSplit, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); split.num_classes];
    for (i, &l) in split.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut chosen = Vec::with_capacity(n * split.num_classes);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < n {
            return Err(Error::InsufficientClass {
                class: class as u32,
                available: members.len(),
                requested: n,
            });
        }
        let mut rng = RngStream::new(seed, class as u64);
        // partial Fisher-Yates: the first n slots end up a uniform sample
        for i in 0..n {
            let j = i + rng.below(members.len() - i);
            members.swap(i, j);
        }
        chosen.extend_from_slice(&members[..n]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-channel means in raw pixel units (0-255).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
}

pub fn channel_means(split: &DatasetSplit) -> Result<NormalizationStats> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let c = split.shape[2];
    let mut sums = vec![0u64; c];
    for px in split.images.chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v as u64;
        }
    }
    let count = (split.images.len() / c) as f64;
    Ok(NormalizationStats {
        mean: sums.iter().map(|&s| s as f64 / count).collect(),
    })
}

impl NormalizationStats {
    /// Mean subtraction on an image already scaled to `[0, 1]`.
    pub fn normalize_unit(&self, image: &mut [f32]) {
        let c = self.mean.len();
        let offsets: Vec<f32> = self.mean.iter().map(|&m| (m / 255.0) as f32).collect();
        for px in image.chunks_exact_mut(c) {
            for (v, &o) in px.iter_mut().zip(&offsets) {
                *v -= o;
            }
        }
    }
}

/// Subtracts the channel means from an 8-bit image and rescales to unit
/// range: `(p - mean) / 255`.
pub fn normalize(image: &[u8], stats: &NormalizationStats) -> Vec<f32> {
    let c = stats.mean.len();
    image
        .chunks_exact(c)
        .flat_map(|px| {
            px.iter()
                .zip(&stats.mean)
                .map(|(&p, &m)| ((p as f64 - m) / 255.0) as f32)
        })
        .collect()
}

/// Inverse of [`normalize`], in raw pixel units.
pub fn denormalize(image: &[f32], stats: &NormalizationStats) -> Vec<f64> {
    let c = stats.mean.len();
    image
        .chunks_exact(c)
        .flat_map(|px| px.iter().zip(&stats.mean).map(|(&v, &m)| v as f64 * 255.0 + m))
        .collect()
}

/// Gaussian blobs around `k` random centers, rendered as 8-bit images of
/// the given shape. Per-component center offsets are standard normal and
/// the within-class spread is `1 / separation` of that, so a large
/// separation gives linearly separable classes.
pub fn synth_clusters(
    k: usize,
    per_class: usize,
    shape: [usize; 3],
    separation: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if separation <= 0.0 || !separation.is_finite() {
        return Err(Error::InvalidArgument("separation must be positive".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("at least one class required".into()));
    }
    let dims: usize = shape.iter().product();
    let mut centers = RngStream::new(seed, 0);
    let centers: Vec<f64> = (0..k * dims).map(|_| centers.normal()).collect();
    let mut noise = RngStream::new(seed, 1);
    let spread = 1.0 / separation;
    let mut images = Vec::with_capacity(k * per_class * dims);
    let mut labels = Vec::with_capacity(k * per_class);
    for class in 0..k {
        let c = &centers[class * dims..(class + 1) * dims];
        for _ in 0..per_class {
            for &m in c {
                let v = 128.0 + 40.0 * (m + spread * noise.normal());
                images.push(num_traits::Float::round(v).clamp(0.0, 255.0) as u8);
            }
            labels.push(class as u32);
        }
    }
    DatasetSplit::new(images, labels, shape, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(k: usize, per: &[usize]) -> DatasetSplit {
        let mut labels = Vec::new();
        for (c, &n) in per.iter().enumerate() {
            labels.extend(core::iter::repeat_n(c as u32, n));
        }
        let images = (0..labels.len() * 4).map(|i| (i % 251) as u8).collect();
        DatasetSplit::new(images, labels, [2, 2, 1], k).unwrap()
    }

    #[test]
    fn label_range_is_checked() {
        assert!(DatasetSplit::new(vec![0; 4], vec![3], [2, 2, 1], 3).is_err());
        assert!(DatasetSplit::new(vec![0; 3], vec![0], [2, 2, 1], 3).is_err());
    }

    #[test]
    fn subsample_is_balanced_and_deterministic() {
        let s = toy(10, &[30; 10]);
        let a = subsample_balanced(&s, 10, 4).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_counts(), vec![10; 10]);
        assert_eq!(a, subsample_balanced(&s, 10, 4).unwrap());
        assert_ne!(a, subsample_balanced(&s, 10, 5).unwrap());
    }

    #[test]
    fn full_class_size_takes_everything() {
        let s = toy(3, &[5, 5, 5]);
        assert_eq!(subsample_balanced(&s, 5, 1).unwrap(), s);
    }

    #[test]
    fn insufficient_class_is_named() {
        let s = toy(3, &[5, 2, 5]);
        match subsample_balanced(&s, 3, 0) {
            Err(Error::InsufficientClass { class, available, .. }) => assert_eq!((class, available), (1, 2)),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let s = DatasetSplit::new(vec![100; 12], vec![0], [2, 2, 3], 2).unwrap();
        let st = channel_means(&s).unwrap();
        assert_eq!(st.mean, vec![100.0; 3]);
        assert!(normalize(s.image(0), &st).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let s = toy(2, &[3, 3]);
        let st = channel_means(&s).unwrap();
        let x = normalize(s.image(4), &st);
        for (a, &b) in denormalize(&x, &st).iter().zip(s.image(4)) {
            assert!((a - b as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_split_has_no_means() {
        let s = DatasetSplit::new(Vec::new(), Vec::new(), [2, 2, 1], 2).unwrap();
        assert!(matches!(channel_means(&s), Err(Error::EmptySplit)));
    }

    #[test]
    fn synthetic_clusters() {
        let a = synth_clusters(4, 20, [4, 4, 3], 8.0, 3).unwrap();
        assert_eq!(a, synth_clusters(4, 20, [4, 4, 3], 8.0, 3).unwrap());
        assert_eq!(a.class_counts(), vec![20; 4]);
        let one = synth_clusters(1, 5, [2, 2, 1], 1.0, 0).unwrap();
        assert!(one.labels().iter().all(|&l| l == 0));
        assert!(synth_clusters(2, 5, [2, 2, 1], 0.0, 0).is_err());
    }

    #[test]
    fn separated_clusters_are_nearest_centroid_separable() {
        let s = synth_clusters(5, 60, [4, 4, 3], 10.0, 9).unwrap();
        let d = s.pixels_per_image();
        let mut cent = vec![0.0f64; 5 * d];
        for i in 0..s.len() {
            let l = s.labels()[i] as usize;
            for (c, &p) in cent[l * d..(l + 1) * d].iter_mut().zip(s.image(i)) {
                *c += p as f64 / 60.0;
            }
        }
        let mut correct = 0;
        for i in 0..s.len() {
            let best = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = cent[a * d..(a + 1) * d]
                        .iter()
                        .zip(s.image(i))
                        .map(|(c, &p)| (c - p as f64).powi(2))
                        .sum();
                    let db: f64 = cent[b * d..(b + 1) * d]
                        .iter()
                        .zip(s.image(i))
                        .map(|(c, &p)| (c - p as f64).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += (best == s.labels()[i] as usize) as usize;
        }
        assert!(correct as f64 / s.len() as f64 >= 0.99);
    }
}
