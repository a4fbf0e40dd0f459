use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::tensor::RngStream;
use crate::{Error, Result};

/// Augmentation strength. Each level runs the transforms of the previous
/// level first, then its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AugLevel {
    None,
    Plus,
    PlusPlus,
    PlusPlusPlus,
}

impl AugLevel {
    pub const ALL: [AugLevel; 4] = [
        AugLevel::None,
        AugLevel::Plus,
        AugLevel::PlusPlus,
        AugLevel::PlusPlusPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugLevel::None => "none",
            AugLevel::Plus => "+",
            AugLevel::PlusPlus => "++",
            AugLevel::PlusPlusPlus => "+++",
        }
    }

    /// Transforms in application order.
    pub fn transforms(self) -> &'static [Transform] {
        const ALL: [Transform; 7] = [
            Transform::Crop,
            Transform::Flip,
            Transform::Brightness,
            Transform::Contrast,
            Transform::Saturation,
            Transform::Hue,
            Transform::Erase,
        ];
        match self {
            AugLevel::None => &[],
            AugLevel::Plus => &ALL[..2],
            AugLevel::PlusPlus => &ALL[..6],
            AugLevel::PlusPlusPlus => &ALL,
        }
    }
}

impl fmt::Display for AugLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "" => Ok(AugLevel::None),
            "+" | "plus" => Ok(AugLevel::Plus),
            "++" | "plusplus" => Ok(AugLevel::PlusPlus),
            "+++" | "plusplusplus" => Ok(AugLevel::PlusPlusPlus),
            _ => Err(Error::InvalidArgument(format!("unknown augmentation level `{}`", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Crop,
    Flip,
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Erase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub level: AugLevel,
    /// Zero padding on each side before the random crop.
    pub pad: usize,
    pub flip_prob: f64,
    /// Additive brightness shift drawn from `[-b, b]`, in unit pixel range.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Hue rotation drawn from `[-h, h]` turns of the hue circle.
    pub hue: f64,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl AugmentationPolicy {
    pub fn new(level: AugLevel) -> Self {
        AugmentationPolicy {
            level,
            pad: 4,
            flip_prob: 0.5,
            brightness: 0.25,
            contrast: (0.75, 1.25),
            saturation: (0.75, 1.25),
            hue: 0.1,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::new(AugLevel::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Random draws made by one [`augment_traced`] call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugRecord {
    /// Crop offset `(dy, dx)` into the padded image.
    pub crop: Option<(usize, usize)>,
    pub flipped: bool,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub hue: Option<f64>,
    pub erase: Option<EraseRect>,
}

/// Augments one HWC image with values in `[0, 1]`; output keeps the shape
/// and stays in `[0, 1]`.
pub fn augment(image: &[f32], shape: [usize; 3], policy: &AugmentationPolicy, rng: &mut RngStream) -> Result<Vec<f32>> {
    augment_traced(image, shape, policy, rng).map(|(img, _)| img)
}

pub fn augment_traced(
    image: &[f32],
    shape: [usize; 3],
    policy: &AugmentationPolicy,
    rng: &mut RngStream,
) -> Result<(Vec<f32>, AugRecord)> {
    let [h, w, c] = shape;
    if image.len() != h * w * c || h == 0 || w == 0 {
        return Err(Error::shape(
            "augment",
            format!("{} values for image shape {:?}", image.len(), shape),
        ));
    }
    let transforms = policy.level.transforms();
    if c != 3 && transforms.contains(&Transform::Saturation) {
        return Err(Error::InvalidArgument(format!(
            "color distortion needs 3 channels, image has {}",
            c
        )));
    }
    let mut img = image.to_vec();
    let mut rec = AugRecord::default();
    for t in transforms {
        match t {
            Transform::Crop => {
                let span = 2 * policy.pad + 1;
                let (dy, dx) = (rng.below(span), rng.below(span));
                img = shift(
                    &img,
                    shape,
                    dy as isize - policy.pad as isize,
                    dx as isize - policy.pad as isize,
                );
                rec.crop = Some((dy, dx));
            }
            Transform::Flip => {
                if rng.bernoulli(policy.flip_prob) {
                    flip(&mut img, shape);
                    rec.flipped = true;
                }
            }
            Transform::Brightness => {
                let d = rng.uniform_in(-policy.brightness, policy.brightness);
                for v in img.iter_mut() {
                    *v = clamp01(*v + d as f32);
                }
                rec.brightness = Some(d);
            }
            Transform::Contrast => {
                let f = rng.uniform_in(policy.contrast.0, policy.contrast.1);
                let mut mean = vec![0.0f64; c];
                for px in img.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(px) {
                        *m += v as f64;
                    }
                }
                let n = (h * w) as f64;
                for px in img.chunks_exact_mut(c) {
                    for (v, m) in px.iter_mut().zip(&mean) {
                        let m = m / n;
                        *v = clamp01(((*v as f64 - m) * f + m) as f32);
                    }
                }
                rec.contrast = Some(f);
            }
            Transform::Saturation => {
                let f = rng.uniform_in(policy.saturation.0, policy.saturation.1) as f32;
                for px in img.chunks_exact_mut(3) {
                    let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                    for v in px.iter_mut() {
                        *v = clamp01(gray + (*v - gray) * f);
                    }
                }
                rec.saturation = Some(f as f64);
            }
            Transform::Hue => {
                let d = rng.uniform_in(-policy.hue, policy.hue) as f32;
                for px in img.chunks_exact_mut(3) {
                    let (hh, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let hh = wrap(hh + d, 1.0);
                    let (r, g, b) = hsv_to_rgb(hh, s, v);
                    px[0] = clamp01(r);
                    px[1] = clamp01(g);
                    px[2] = clamp01(b);
                }
                rec.hue = Some(d as f64);
            }
            Transform::Erase => {
                if rng.bernoulli(policy.erase_prob) {
                    if let Some(r) = erase_rect(h, w, policy, rng) {
                        for y in r.top..r.top + r.height {
                            for x in r.left..r.left + r.width {
                                for ch in 0..c {
                                    img[(y * w + x) * c + ch] = rng.uniform() as f32;
                                }
                            }
                        }
                        rec.erase = Some(r);
                    }
                }
            }
        }
    }
    Ok((img, rec))
}

fn wrap(x: f32, m: f32) -> f32 {
    x - (x / m).floor() * m
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Reads the window at offset `(oy, ox)` relative to the original image,
/// zero outside: equivalent to zero padding then cropping.
fn shift(img: &[f32], [h, w, c]: [usize; 3], oy: isize, ox: isize) -> Vec<f32> {
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        let sy = y as isize + oy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + ox;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

fn flip(img: &mut [f32], [h, w, c]: [usize; 3]) {
    for y in 0..h {
        for x in 0..w / 2 {
            for ch in 0..c {
                img.swap((y * w + x) * c + ch, (y * w + w - 1 - x) * c + ch);
            }
        }
    }
}

/// Rectangle with area fraction and aspect drawn from the policy ranges;
/// up to 100 attempts, `None` if none fit.
fn erase_rect(h: usize, w: usize, p: &AugmentationPolicy, rng: &mut RngStream) -> Option<EraseRect> {
    let total = (h * w) as f64;
    for _ in 0..100 {
        let area = rng.uniform_in(p.erase_area.0, p.erase_area.1) * total;
        let aspect = rng.uniform_in(p.erase_aspect.0, p.erase_aspect.1);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let frac = (eh * ew) as f64 / total;
        if frac < p.erase_area.0 || frac > p.erase_area.1 {
            continue;
        }
        return Some(EraseRect {
            top: rng.below(h - eh + 1),
            left: rng.below(w - ew + 1),
            height: eh,
            width: ew,
        });
    }
    None
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, shape: [usize; 3]) -> Vec<f32> {
        let mut rng = RngStream::new(seed, 0);
        (0..shape.iter().product::<usize>())
            .map(|_| rng.uniform() as f32)
            .collect()
    }

    #[test]
    fn levels_nest() {
        for pair in AugLevel::ALL.windows(2) {
            let (lo, hi) = (pair[0].transforms(), pair[1].transforms());
            assert!(hi.len() > lo.len());
            assert_eq!(&hi[..lo.len()], lo);
        }
    }

    #[test]
    fn none_is_identity() {
        let img = image(1, [32, 32, 3]);
        let out = augment(
            &img,
            [32, 32, 3],
            &AugmentationPolicy::new(AugLevel::None),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn shape_and_range_are_kept() {
        let img = image(2, [32, 32, 3]);
        for level in AugLevel::ALL {
            let p = AugmentationPolicy::new(level);
            for s in 0..20 {
                let out = augment(&img, [32, 32, 3], &p, &mut RngStream::new(s, 1)).unwrap();
                assert_eq!(out.len(), img.len());
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn crop_offsets_cover_the_padding_range() {
        let img = image(3, [32, 32, 3]);
        let p = AugmentationPolicy::new(AugLevel::Plus);
        let mut seen = [false; 9];
        let mut rng = RngStream::new(4, 0);
        for _ in 0..2000 {
            let (_, r) = augment_traced(&img, [32, 32, 3], &p, &mut rng).unwrap();
            let (dy, dx) = r.crop.unwrap();
            assert!(dy <= 8 && dx <= 8);
            seen[dy] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let img = image(5, [8, 8, 3]);
        assert_eq!(shift(&img, [8, 8, 3], 0, 0), img);
        let mut f = img.clone();
        flip(&mut f, [8, 8, 3]);
        flip(&mut f, [8, 8, 3]);
        assert_eq!(f, img);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn color_ops_need_rgb() {
        let img = image(6, [32, 32, 1]);
        assert!(augment(
            &img,
            [32, 32, 1],
            &AugmentationPolicy::new(AugLevel::PlusPlus),
            &mut RngStream::new(0, 0)
        )
        .is_err());
        assert!(augment(
            &img,
            [32, 32, 1],
            &AugmentationPolicy::new(AugLevel::Plus),
            &mut RngStream::new(0, 0)
        )
        .is_ok());
        assert!(augment(
            &img[1..],
            [32, 32, 1],
            &AugmentationPolicy::new(AugLevel::Plus),
            &mut RngStream::new(0, 0)
        )
        .is_err());
    }
}
