//! Stochastic image transforms and the two training pipelines built from them.
//!
//! Every random choice made by transform `i` of a policy comes from a
//! generator keyed by `(seed, i)`, so a policy applied to a frame with a given
//! seed always yields the same output regardless of batch order or threads.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::seed;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const SOLARIZE_THRESHOLD: f32 = 0.5;
/// Jitter strengths (brightness, contrast, saturation, hue) shared by both pipelines.
pub const JITTER_STRENGTHS: [f64; 4] = [0.9, 0.9, 0.9, 0.5];
pub const JITTER_P: f64 = 0.9;
pub const GRAYSCALE_P: f64 = 0.2;
pub const BLUR_SIGMA: (f64, f64) = (0.1, 2.0);
pub const DEFAULT_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const MILD_JITTER: [f64; 4] = [0.4, 0.4, 0.4, 0.05];
pub const MILD_CROP_SCALE: (f64, f64) = (0.35, 1.0);

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("probability {p} of transform {index} outside [0, 1]")]
    BadProbability { index: usize, p: f64 },
    #[error("normalize must be the last transform (found at {index} of {len})")]
    NormalizeNotLast { index: usize, len: usize },
    #[error("invalid range {name}: ({lo}, {hi})")]
    BadRange {
        name: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("output size must be positive")]
    ZeroSize,
    #[error("multi-crop needs at least 2 global views (got {0})")]
    TooFewGlobalViews(usize),
}

/// One step of an [`AugmentPolicy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    RandomResizedCrop {
        size: usize,
        scale: (f64, f64),
        #[serde(default = "default_ratio")]
        ratio: (f64, f64),
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
        p: f64,
    },
    RandomGrayscale {
        p: f64,
    },
    GaussianBlur {
        sigma: (f64, f64),
        p: f64,
    },
    Solarize {
        #[serde(default = "default_threshold")]
        threshold: f32,
        p: f64,
    },
    HorizontalFlip {
        p: f64,
    },
    Normalize {
        mean: [f32; 3],
        std: [f32; 3],
    },
}

fn default_ratio() -> (f64, f64) {
    DEFAULT_RATIO
}

fn default_threshold() -> f32 {
    SOLARIZE_THRESHOLD
}

impl Transform {
    fn probability(&self) -> Option<f64> {
        match self {
            Transform::ColorJitter { p, .. }
            | Transform::RandomGrayscale { p }
            | Transform::GaussianBlur { p, .. }
            | Transform::Solarize { p, .. }
            | Transform::HorizontalFlip { p } => Some(*p),
            _ => None,
        }
    }

    pub fn imagenet_normalize() -> Self {
        Transform::Normalize {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    fn jitter(p: f64) -> Self {
        Self::jitter_with(JITTER_STRENGTHS, p)
    }

    fn jitter_with([b, c, s, h]: [f64; 4], p: f64) -> Self {
        Transform::ColorJitter {
            brightness: b,
            contrast: c,
            saturation: s,
            hue: h,
            p,
        }
    }
}

/// Axis-aligned crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub transforms: Vec<Transform>,
}

impl AugmentPolicy {
    pub fn new(transforms: Vec<Transform>) -> Result<Self, AugmentError> {
        let p = AugmentPolicy { transforms };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let len = self.transforms.len();
        for (index, t) in self.transforms.iter().enumerate() {
            if let Some(p) = t.probability() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(AugmentError::BadProbability { index, p });
                }
            }
            match t {
                Transform::Normalize { .. } if index + 1 != len => {
                    return Err(AugmentError::NormalizeNotLast { index, len });
                }
                Transform::RandomResizedCrop { size, scale, ratio } => {
                    if *size == 0 {
                        return Err(AugmentError::ZeroSize);
                    }
                    check_range("scale", *scale, 0.0, 1.0)?;
                    check_range("ratio", *ratio, 0.0, f64::INFINITY)?;
                }
                Transform::GaussianBlur { sigma, .. } => {
                    check_range("sigma", *sigma, 0.0, f64::INFINITY)?
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Output side length if the policy starts with a crop.
    pub fn output_size(&self) -> Option<usize> {
        self.transforms.iter().find_map(|t| match t {
            Transform::RandomResizedCrop { size, .. } => Some(*size),
            _ => None,
        })
    }

    /// Temporal-classification pipeline at output size `size`.
    pub fn temporal_classification(size: usize) -> Self {
        AugmentPolicy {
            transforms: vec![
                Transform::RandomResizedCrop {
                    size,
                    scale: (0.08, 1.0),
                    ratio: DEFAULT_RATIO,
                },
                Transform::jitter(JITTER_P),
                Transform::RandomGrayscale { p: GRAYSCALE_P },
                Transform::GaussianBlur {
                    sigma: BLUR_SIGMA,
                    p: 0.5,
                },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::imagenet_normalize(),
            ],
        }
    }

    /// Labeled finetuning pipeline: the temporal-classification policy without
    /// colour jitter.
    pub fn finetune(size: usize) -> Self {
        let mut p = Self::temporal_classification(size);
        p.transforms
            .retain(|t| !matches!(t, Transform::ColorJitter { .. }));
        p
    }

    /// Lighter crop and colour perturbation for low-resolution frames.
    pub fn mild(size: usize) -> Self {
        AugmentPolicy {
            transforms: vec![
                Transform::RandomResizedCrop {
                    size,
                    scale: MILD_CROP_SCALE,
                    ratio: DEFAULT_RATIO,
                },
                Transform::jitter_with(MILD_JITTER, 0.8),
                Transform::RandomGrayscale { p: 0.1 },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::imagenet_normalize(),
            ],
        }
    }

    /// Plain resize to `size` followed by normalization.
    pub fn eval(size: usize) -> Self {
        AugmentPolicy {
            transforms: vec![
                Transform::RandomResizedCrop {
                    size,
                    scale: (1.0, 1.0),
                    ratio: (1.0, 1.0),
                },
                Transform::imagenet_normalize(),
            ],
        }
    }

    fn dino_view(
        spec: &MultiCropSpec,
        size: usize,
        scale: (f64, f64),
        blur_p: f64,
        solarize_p: Option<f64>,
    ) -> Self {
        let mut transforms = vec![
            Transform::RandomResizedCrop {
                size,
                scale,
                ratio: DEFAULT_RATIO,
            },
            Transform::HorizontalFlip { p: 0.5 },
            Transform::jitter_with(spec.jitter, JITTER_P),
            Transform::RandomGrayscale {
                p: spec.grayscale_p,
            },
            Transform::GaussianBlur {
                sigma: BLUR_SIGMA,
                p: blur_p,
            },
        ];
        if let Some(p) = solarize_p {
            transforms.push(Transform::Solarize {
                threshold: SOLARIZE_THRESHOLD,
                p,
            });
        }
        transforms.push(Transform::imagenet_normalize());
        AugmentPolicy { transforms }
    }
}

fn check_range(
    name: &'static str,
    (lo, hi): (f64, f64),
    min: f64,
    max: f64,
) -> Result<(), AugmentError> {
    if !(lo > min && lo <= hi && hi <= max) {
        return Err(AugmentError::BadRange { name, lo, hi });
    }
    Ok(())
}

/// Applies `policy` to a `[0,1]` frame.
pub fn apply_policy(frame: &Image, policy: &AugmentPolicy, seed: u64) -> Image {
    apply_policy_traced(frame, policy, seed).0
}

/// As [`apply_policy`], also returning the crop window when the policy crops.
pub fn apply_policy_traced(
    frame: &Image,
    policy: &AugmentPolicy,
    seed: u64,
) -> (Image, Option<CropRect>) {
    let mut img = frame.clone();
    let mut rect = None;
    for (i, t) in policy.transforms.iter().enumerate() {
        let mut rng = seed::rng(&[seed, i as u64]);
        if let Some(p) = t.probability() {
            if !(rng.random::<f64>() < p) {
                continue;
            }
        }
        img = match t {
            Transform::RandomResizedCrop { size, scale, ratio } => {
                let r = sample_crop(img.height(), img.width(), *scale, *ratio, &mut rng);
                rect = Some(r);
                resized_crop(&img, r, *size)
            }
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                ..
            } => color_jitter(&img, [*brightness, *contrast, *saturation, *hue], &mut rng),
            Transform::RandomGrayscale { .. } => grayscale(&img),
            Transform::GaussianBlur { sigma, .. } => {
                let s = if sigma.0 == sigma.1 {
                    sigma.0
                } else {
                    rng.random_range(sigma.0..=sigma.1)
                };
                gaussian_blur(&img, s)
            }
            Transform::Solarize { threshold, .. } => solarize(&img, *threshold),
            Transform::HorizontalFlip { .. } => img.flip_horizontal(),
            Transform::Normalize { mean, std } => normalize(&img, *mean, *std),
        };
    }
    (img, rect)
}

/// Samples a crop with area fraction in `scale` and aspect ratio (w/h) in
/// `ratio` (log-uniform); falls back to the central crop after 10 misses.
pub fn sample_crop(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> CropRect {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropRect {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < ratio.0 {
        let w = width;
        (((w as f64 / ratio.0).round() as usize).clamp(1, height), w)
    } else if in_ratio > ratio.1 {
        let h = height;
        (h, ((h as f64 * ratio.1).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    CropRect {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Crops `rect` and resizes it to `size`×`size`.
pub fn resized_crop(img: &Image, rect: CropRect, size: usize) -> Image {
    let c = if rect.top == 0
        && rect.left == 0
        && rect.height == img.height()
        && rect.width == img.width()
    {
        img.clone()
    } else {
        img.crop(rect.top, rect.left, rect.height, rect.width)
    };
    if c.height() == size && c.width() == size {
        c
    } else {
        c.resize(size, size)
    }
}

/// Pixels at or above `threshold` are inverted.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .filter(|v| **v >= threshold)
        .for_each(|v| *v = 1.0 - *v);
    out
}

/// Luminance replicated to all three channels.
pub fn grayscale(img: &Image) -> Image {
    let l = img.luminance();
    let mut data = Vec::with_capacity(l.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&l);
    }
    Image::new(img.height(), img.width(), data)
}

/// Discrete Gaussian taps of radius `max(1, round(3σ))`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = ((3.0 * sigma).round() as usize).max(1);
    let k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d | d c b a`).
/// The extended signal is 2n-periodic, so a sum-1 kernel preserves the mean.
fn reflect(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let j = i.rem_euclid(p) as usize;
    if j >= n {
        2 * n - 1 - j
    } else {
        j
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = img.clone();
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..3 {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * src[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[yy * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    out
}

/// Brightness, contrast, saturation and hue perturbations in random order.
/// Factors for the first three are drawn from `U[1-s, 1+s]`; the hue shift
/// from `U[-h, h]` turns. Zero strengths are skipped.
pub fn color_jitter(img: &Image, strengths: [f64; 4], rng: &mut impl Rng) -> Image {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factors: Vec<f64> = strengths
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s <= 0.0 {
                if i == 3 {
                    0.0
                } else {
                    1.0
                }
            } else if i == 3 {
                rng.random_range(-s.min(0.5)..=s.min(0.5))
            } else {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
            }
        })
        .collect();
    let mut out = img.clone();
    for &i in &order {
        if strengths[i] <= 0.0 {
            continue;
        }
        let f = factors[i] as f32;
        out = match i {
            0 => {
                let mut o = out;
                o.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
                o
            }
            1 => {
                let m = out.luminance().iter().map(|&v| v as f64).sum::<f64>()
                    / (out.height() * out.width()) as f64;
                blend(
                    &out,
                    &Image::filled(out.height(), out.width(), [m as f32; 3]),
                    f,
                )
            }
            2 => blend(&out, &grayscale(&out), f),
            _ => hue_shift(&out, factors[3] as f32),
        };
    }
    out
}

/// `f * a + (1 - f) * b`, clamped to `[0,1]`.
fn blend(a: &Image, b: &Image, f: f32) -> Image {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f * x + (1.0 - f) * y).clamp(0.0, 1.0))
        .collect();
    Image::new(a.height(), a.width(), data)
}

fn hue_shift(img: &Image, turns: f32) -> Image {
    let n = img.height() * img.width();
    let mut out = img.clone();
    for i in 0..n {
        let rgb = [img.data()[i], img.data()[n + i], img.data()[2 * n + i]];
        let (h, s, v) = rgb_to_hsv(rgb);
        let [r, g, b] = hsv_to_rgb((h + turns).rem_euclid(1.0), s, v);
        let d = out.data_mut();
        d[i] = r;
        d[n + i] = g;
        d[2 * n + i] = b;
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| c.clamp(0.0, 1.0))
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        out.plane_mut(c)
            .iter_mut()
            .for_each(|v| *v = (*v - mean[c]) / std[c]);
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        out.plane_mut(c)
            .iter_mut()
            .for_each(|v| *v = *v * std[c] + mean[c]);
    }
    out
}

/// Global/local view layout for self-distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiCropSpec {
    pub n_global: usize,
    pub global_size: usize,
    pub global_scale: (f64, f64),
    pub n_local: usize,
    pub local_size: usize,
    pub local_scale: (f64, f64),
    /// Blur probability of global view 1, global view 2, and the local views.
    pub blur_p: [f64; 3],
    /// Solarization probability on global view 2.
    pub solarize_p: f64,
    /// Colour-jitter strengths (brightness, contrast, saturation, hue).
    #[serde(default = "default_jitter")]
    pub jitter: [f64; 4],
    #[serde(default = "default_grayscale_p")]
    pub grayscale_p: f64,
}

fn default_jitter() -> [f64; 4] {
    JITTER_STRENGTHS
}

fn default_grayscale_p() -> f64 {
    GRAYSCALE_P
}

impl Default for MultiCropSpec {
    fn default() -> Self {
        MultiCropSpec {
            n_global: 2,
            global_size: 224,
            global_scale: (0.15, 1.0),
            n_local: 8,
            local_size: 96,
            local_scale: (0.05, 0.15),
            blur_p: [1.0, 0.1, 0.5],
            solarize_p: 0.2,
            jitter: JITTER_STRENGTHS,
            grayscale_p: GRAYSCALE_P,
        }
    }
}

impl MultiCropSpec {
    /// Same layout with view sizes scaled so the global view is `global_size`.
    pub fn scaled(global_size: usize) -> Self {
        let d = Self::default();
        MultiCropSpec {
            global_size,
            local_size: ((global_size * d.local_size) as f64 / d.global_size as f64)
                .round()
                .max(1.0) as usize,
            ..d
        }
    }

    /// [`MultiCropSpec::scaled`] with the [`AugmentPolicy::mild`] colour
    /// perturbation and larger crops.
    pub fn mild(global_size: usize) -> Self {
        MultiCropSpec {
            global_scale: MILD_CROP_SCALE,
            local_scale: (0.1, MILD_CROP_SCALE.0),
            jitter: MILD_JITTER,
            grayscale_p: 0.1,
            ..Self::scaled(global_size)
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.n_global < 2 {
            return Err(AugmentError::TooFewGlobalViews(self.n_global));
        }
        if self.global_size == 0 || (self.n_local > 0 && self.local_size == 0) {
            return Err(AugmentError::ZeroSize);
        }
        for p in self
            .blur_p
            .iter()
            .chain([&self.solarize_p, &self.grayscale_p])
        {
            if !(0.0..=1.0).contains(p) {
                return Err(AugmentError::BadProbability { index: 0, p: *p });
            }
        }
        Ok(())
    }

    /// Policy for view `v` (globals first, then locals).
    pub fn view_policy(&self, v: usize) -> AugmentPolicy {
        if v < self.n_global {
            let (blur, sol) = match v {
                0 => (self.blur_p[0], None),
                1 => (self.blur_p[1], Some(self.solarize_p)),
                _ => (self.blur_p[1], None),
            };
            AugmentPolicy::dino_view(self, self.global_size, self.global_scale, blur, sol)
        } else {
            AugmentPolicy::dino_view(
                self,
                self.local_size,
                self.local_scale,
                self.blur_p[2],
                None,
            )
        }
    }

    pub fn num_views(&self) -> usize {
        self.n_global + self.n_local
    }
}

#[derive(Clone, Debug)]
pub struct MultiCropViews {
    /// Global views first, then local views.
    pub views: Vec<Image>,
    pub crops: Vec<CropRect>,
    pub n_global: usize,
}

/// Produces the global and local views of one frame.
pub fn dino_multicrop(
    frame: &Image,
    spec: &MultiCropSpec,
    seed: u64,
) -> Result<MultiCropViews, AugmentError> {
    spec.validate()?;
    let mut views = Vec::with_capacity(spec.num_views());
    let mut crops = Vec::with_capacity(spec.num_views());
    for v in 0..spec.num_views() {
        let (img, rect) =
            apply_policy_traced(frame, &spec.view_policy(v), seed::hash(&[seed, v as u64]));
        views.push(img);
        crops.push(rect.expect("view policies start with a crop"));
    }
    Ok(MultiCropViews {
        views,
        crops,
        n_global: spec.n_global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(
            h,
            w,
            (0..3 * h * w)
                .map(|i| ((i * 37) % 101) as f32 / 100.0)
                .collect(),
        )
    }

    #[test]
    fn solarize_examples() {
        let img = Image::new(1, 2, vec![0.6, 0.4, 0.6, 0.4, 0.6, 0.4]);
        let out = solarize(&img, 0.5);
        assert!((out.data()[0] - 0.4).abs() < 1e-7);
        assert_eq!(out.data()[1], 0.4);
        let z = Image::filled(4, 4, [0.0; 3]);
        assert_eq!(solarize(&z, 0.5), z);
    }

    #[test]
    fn blur_small_sigma_concentrates_impulse() {
        let mut img = Image::filled(9, 9, [0.0; 3]);
        for c in 0..3 {
            img.set(c, 4, 4, 1.0);
        }
        let out = gaussian_blur(&img, 0.1);
        let total: f32 = out.plane(0).iter().sum();
        assert!(out.at(0, 4, 4) / total > 0.9);
    }

    #[test]
    fn blur_preserves_constant_and_mean() {
        let c = Image::filled(7, 5, [0.3, 0.6, 0.9]);
        assert!(gaussian_blur(&c, 1.3).max_abs_diff(&c) < 1e-6);
        let img = ramp(13, 17);
        for s in [0.1, 0.7, 2.0, 5.0] {
            let out = gaussian_blur(&img, s);
            assert!((out.mean() - img.mean()).abs() < 1e-6, "sigma {s}");
        }
    }

    #[test]
    fn zero_probability_square_crop_is_resize() {
        let img = ramp(32, 32);
        let policy = AugmentPolicy::new(vec![
            Transform::RandomResizedCrop {
                size: 16,
                scale: (1.0, 1.0),
                ratio: (1.0, 1.0),
            },
            Transform::ColorJitter {
                brightness: 0.9,
                contrast: 0.9,
                saturation: 0.9,
                hue: 0.5,
                p: 0.0,
            },
            Transform::RandomGrayscale { p: 0.0 },
            Transform::GaussianBlur {
                sigma: BLUR_SIGMA,
                p: 0.0,
            },
            Transform::HorizontalFlip { p: 0.0 },
        ])
        .unwrap();
        assert_eq!(apply_policy(&img, &policy, 5), img.resize(16, 16));
    }

    #[test]
    fn zero_strength_jitter_is_identity() {
        let img = ramp(8, 8);
        let mut rng = seed::rng(&[1]);
        assert_eq!(color_jitter(&img, [0.0; 4], &mut rng), img);
    }

    #[test]
    fn normalize_must_be_last() {
        let bad = AugmentPolicy::new(vec![
            Transform::imagenet_normalize(),
            Transform::HorizontalFlip { p: 0.5 },
        ]);
        assert!(matches!(bad, Err(AugmentError::NormalizeNotLast { .. })));
        let bad = AugmentPolicy::new(vec![Transform::HorizontalFlip { p: 1.5 }]);
        assert!(matches!(bad, Err(AugmentError::BadProbability { .. })));
    }

    #[test]
    fn multicrop_counts_and_determinism() {
        let img = ramp(48, 64);
        let spec = MultiCropSpec::scaled(32);
        let a = dino_multicrop(&img, &spec, 11).unwrap();
        assert_eq!(a.views.len(), 10);
        assert!(a.views[..2]
            .iter()
            .all(|v| v.height() == 32 && v.width() == 32));
        assert!(a.views[2..]
            .iter()
            .all(|v| v.height() == 14 && v.width() == 14));
        let b = dino_multicrop(&img, &spec, 11).unwrap();
        assert_eq!(a.views, b.views);
        let c = dino_multicrop(&img, &spec, 12).unwrap();
        assert_ne!(a.crops[0], c.crops[0]);
        let one = MultiCropSpec {
            n_global: 1,
            ..spec
        };
        assert!(dino_multicrop(&img, &one, 0).is_err());
    }

    #[test]
    fn full_scale_view_sizes() {
        let img = ramp(256, 256);
        let v = dino_multicrop(&img, &MultiCropSpec::default(), 3).unwrap();
        assert_eq!((v.views[0].height(), v.views[1].width()), (224, 224));
        assert!(v.views[2..].iter().all(|x| x.height() == 96));
    }
}
