//! Parametric image distortions for out-of-distribution evaluation.
//!
//! Spectral distortions return unclamped images so that their spectral
//! guarantees hold exactly.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::augment::{gaussian_blur, grayscale};
use crate::image::Image;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Contrast,
    UniformNoise,
    LowPass,
    HighPass,
    PhaseScrambling,
    PowerEqualization,
    FalseColor,
    Rotation,
    Grayscale,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 9] = [
        DistortionKind::Contrast,
        DistortionKind::UniformNoise,
        DistortionKind::LowPass,
        DistortionKind::HighPass,
        DistortionKind::PhaseScrambling,
        DistortionKind::PowerEqualization,
        DistortionKind::FalseColor,
        DistortionKind::Rotation,
        DistortionKind::Grayscale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionKind::Contrast => "contrast",
            DistortionKind::UniformNoise => "uniform_noise",
            DistortionKind::LowPass => "low_pass",
            DistortionKind::HighPass => "high_pass",
            DistortionKind::PhaseScrambling => "phase_scrambling",
            DistortionKind::PowerEqualization => "power_equalization",
            DistortionKind::FalseColor => "false_color",
            DistortionKind::Rotation => "rotation",
            DistortionKind::Grayscale => "grayscale",
        }
    }

    /// Parameter at which the distortion is the identity, if one exists.
    pub fn identity_param(self) -> Option<f64> {
        match self {
            DistortionKind::Contrast => Some(1.0),
            DistortionKind::UniformNoise
            | DistortionKind::LowPass
            | DistortionKind::PhaseScrambling => Some(0.0),
            DistortionKind::Rotation => Some(0.0),
            DistortionKind::HighPass => Some(f64::INFINITY),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// Contrast factor, noise half-width, blur sigma, scrambling weight or
    /// rotation in degrees; ignored by parameter-free kinds.
    pub param: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, param: f64) -> Result<Self> {
        let s = DistortionSpec { kind, param };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let ok = match self.kind {
            DistortionKind::Contrast => p > 0.0 && p <= 1.0,
            DistortionKind::UniformNoise => p >= 0.0 && p.is_finite(),
            DistortionKind::LowPass => p >= 0.0 && p.is_finite(),
            DistortionKind::HighPass => p > 0.0,
            DistortionKind::PhaseScrambling => (0.0..=1.0).contains(&p),
            DistortionKind::Rotation => [0.0, 90.0, 180.0, 270.0].contains(&p),
            DistortionKind::PowerEqualization
            | DistortionKind::FalseColor
            | DistortionKind::Grayscale => !p.is_nan(),
        };
        if !ok {
            return Err(EvalError::BadParameter {
                kind: self.kind.as_str(),
                param: p,
            });
        }
        Ok(())
    }
}

/// Per-channel Fourier amplitude spectrum, row-major `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
}

/// Dataset-level state some distortions need.
#[derive(Clone, Debug, Default)]
pub struct DistortionContext {
    pub mean_amplitude: Option<Spectrum>,
}

impl DistortionContext {
    pub fn from_images(images: &[Image]) -> Result<Self> {
        Ok(DistortionContext {
            mean_amplitude: Some(mean_amplitude(images)?),
        })
    }
}

fn fft2(data: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform2(&mut buf, h, w, false);
    buf
}

fn ifft2_real(mut buf: Vec<Complex64>, h: usize, w: usize) -> Vec<f64> {
    transform2(&mut buf, h, w, true);
    let norm = (h * w) as f64;
    buf.into_iter().map(|c| c.re / norm).collect()
}

fn transform2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

fn plane_f64(img: &Image, c: usize) -> Vec<f64> {
    img.plane(c).iter().map(|&v| v as f64).collect()
}

/// Amplitude spectrum of one image.
pub fn amplitude_spectrum(img: &Image) -> Spectrum {
    let (h, w) = (img.height(), img.width());
    let mut amplitude = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        amplitude.extend(fft2(&plane_f64(img, c), h, w).iter().map(|z| z.norm()));
    }
    Spectrum {
        height: h,
        width: w,
        amplitude,
    }
}

/// Mean amplitude spectrum over equally sized images.
pub fn mean_amplitude(images: &[Image]) -> Result<Spectrum> {
    let first = images.first().ok_or(EvalError::Empty("image set"))?;
    let (h, w) = (first.height(), first.width());
    let mut acc = vec![0.0; 3 * h * w];
    for im in images {
        if im.height() != h || im.width() != w {
            return Err(EvalError::Invalid("images differ in size".into()));
        }
        for (a, v) in acc.iter_mut().zip(amplitude_spectrum(im).amplitude) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= images.len() as f64);
    Ok(Spectrum {
        height: h,
        width: w,
        amplitude: acc,
    })
}

/// `c·(x − 0.5) + 0.5`.
pub fn adjust_contrast(img: &Image, c: f32) -> Image {
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = c * (*v - 0.5) + 0.5);
    out
}

/// Adds `U[−w, w]` per pixel and channel, then clamps to `[0, 1]`.
pub fn uniform_noise(img: &Image, w: f64, seed: u64) -> Image {
    if w == 0.0 {
        return img.clone();
    }
    let mut rng = seed::rng(&[seed, seed::tag("uniform-noise")]);
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v + rng.random_range(-w..=w) as f32).clamp(0.0, 1.0));
    out
}

/// Gaussian blur; `sigma = 0` leaves the image unchanged.
pub fn low_pass(img: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    gaussian_blur(img, sigma)
}

/// `x − blur(x) + 0.5`, clamped; an infinite `sigma` passes every frequency.
pub fn high_pass(img: &Image, sigma: f64) -> Image {
    if sigma.is_infinite() {
        return img.clone();
    }
    let blurred = gaussian_blur(img, sigma);
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .zip(blurred.data())
        .for_each(|(v, b)| *v = (*v - b + 0.5).clamp(0.0, 1.0));
    out
}

/// Random phase field with `φ(−k) = −φ(k)`, zero at self-conjugate
/// frequencies, scaled by `weight`.
fn phase_field(h: usize, w: usize, weight: f64, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(&[seed, seed::tag("phase-field")]);
    let mut phi = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = ((h - y) % h, (w - x) % w);
            let (i, j) = (y * w + x, py * w + px);
            if i < j {
                let v = weight * rng.random_range(-PI..=PI);
                phi[i] = v;
                phi[j] = -v;
            }
        }
    }
    phi
}

/// Rotates every Fourier phase by the same random field on each channel;
/// amplitudes are unchanged.
pub fn phase_scramble(img: &Image, weight: f64, seed: u64) -> Image {
    if weight == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let phi = phase_field(h, w, weight, seed);
    let mut out = Image::filled(h, w, [0.0; 3]);
    for c in 0..3 {
        let spec: Vec<Complex64> = fft2(&plane_f64(img, c), h, w)
            .into_iter()
            .zip(&phi)
            .map(|(z, &p)| z * Complex64::from_polar(1.0, p))
            .collect();
        for (o, v) in out.plane_mut(c).iter_mut().zip(ifft2_real(spec, h, w)) {
            *o = v as f32;
        }
    }
    out
}

/// Replaces each channel's amplitude spectrum with `mean`, keeping phases.
pub fn power_equalize(img: &Image, mean: &Spectrum) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if mean.height != h || mean.width != w {
        return Err(EvalError::Invalid(format!(
            "mean spectrum is {}x{}, image is {h}x{w}",
            mean.height, mean.width
        )));
    }
    let mut out = Image::filled(h, w, [0.0; 3]);
    for c in 0..3 {
        let amp = &mean.amplitude[c * h * w..(c + 1) * h * w];
        let spec: Vec<Complex64> = fft2(&plane_f64(img, c), h, w)
            .into_iter()
            .zip(amp)
            .map(|(z, &a)| {
                if z.norm() == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::from_polar(a, z.arg())
                }
            })
            .collect();
        for (o, v) in out.plane_mut(c).iter_mut().zip(ifft2_real(spec, h, w)) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// Mirrors each channel about the pixel's luminance: `2L − x`. Luminance is
/// preserved and the map is an involution.
pub fn false_color(img: &Image) -> Image {
    let lum = img.luminance();
    let mut out = img.clone();
    for c in 0..3 {
        out.plane_mut(c)
            .iter_mut()
            .zip(&lum)
            .for_each(|(v, &l)| *v = 2.0 * l - *v);
    }
    out
}

/// Rotation by a multiple of 90 degrees.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let turns = ((degrees / 90.0).round() as i64).rem_euclid(4);
    (0..turns).fold(img.clone(), |im, _| im.rot90())
}

/// Applies `spec` to a `[0, 1]` frame. `seed` drives the stochastic kinds.
pub fn apply_distortion(
    img: &Image,
    spec: &DistortionSpec,
    ctx: &DistortionContext,
    seed: u64,
) -> Result<Image> {
    spec.validate()?;
    let p = spec.param;
    Ok(match spec.kind {
        DistortionKind::Contrast => adjust_contrast(img, p as f32),
        DistortionKind::UniformNoise => uniform_noise(img, p, seed),
        DistortionKind::LowPass => low_pass(img, p),
        DistortionKind::HighPass => high_pass(img, p),
        DistortionKind::PhaseScrambling => phase_scramble(img, p, seed),
        DistortionKind::PowerEqualization => {
            let mean = ctx.mean_amplitude.as_ref().ok_or_else(|| {
                EvalError::Invalid("power equalization needs a mean amplitude spectrum".into())
            })?;
            power_equalize(img, mean)?
        }
        DistortionKind::FalseColor => false_color(img),
        DistortionKind::Rotation => rotate(img, p),
        DistortionKind::Grayscale => grayscale(img),
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
                .map(|i| ((i * 53) % 97) as f32 / 96.0)
                .collect(),
        )
    }

    #[test]
    fn fft_roundtrip() {
        let img = ramp(6, 10);
        let p = plane_f64(&img, 1);
        let back = ifft2_real(fft2(&p, 6, 10), 6, 10);
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_field_is_antisymmetric() {
        let (h, w) = (5, 8);
        let phi = phase_field(h, w, 1.0, 3);
        for y in 0..h {
            for x in 0..w {
                let j = ((h - y) % h) * w + (w - x) % w;
                assert_eq!(phi[y * w + x], -phi[j]);
            }
        }
        assert_eq!(phi[0], 0.0);
    }

    #[test]
    fn scrambling_keeps_mean() {
        let img = ramp(8, 8);
        let out = phase_scramble(&img, 1.0, 9);
        assert!((out.mean() - img.mean()).abs() < 1e-5);
        assert!(out.max_abs_diff(&img) > 1e-2);
    }

    #[test]
    fn false_color_keeps_luminance() {
        let img = ramp(4, 4);
        let out = false_color(&img);
        for (a, b) in img.luminance().iter().zip(out.luminance()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn parameter_domains() {
        assert!(DistortionSpec::new(DistortionKind::Contrast, 0.0).is_err());
        assert!(DistortionSpec::new(DistortionKind::Contrast, 1.2).is_err());
        assert!(DistortionSpec::new(DistortionKind::UniformNoise, -0.1).is_err());
        assert!(DistortionSpec::new(DistortionKind::Rotation, 45.0).is_err());
        assert!(DistortionSpec::new(DistortionKind::PhaseScrambling, 1.5).is_err());
        assert!(DistortionSpec::new(DistortionKind::Rotation, 270.0).is_ok());
    }
}
