//! Planar RGB image used by the world renderer, augmentation and distortions.

use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, Tensor};

/// Rec. 601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Three-channel float image, channel-major (`[3, H, W]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        assert_eq!(data.len(), 3 * height * width, "planar RGB buffer size");
        Image {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Per-pixel luma.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i]
            })
            .collect()
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let data = kernels::bilinear_resize(&self.data, 3, self.height, self.width, out_h, out_w);
        Image::new(out_h, out_w, data)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(
            top + h <= self.height && left + w <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::new(h, w, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.at(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Rotates by 90° counter-clockwise.
    pub fn rot90(&self) -> Image {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    // new image is w x h
                    let (ny, nx) = (w - 1 - x, y);
                    data[(c * w + ny) * h + nx] = self.at(c, y, x);
                }
            }
        }
        Image::new(w, h, data)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    /// Stacks same-sized images into an `[N,3,H,W]` batch.
    pub fn batch(images: &[Image]) -> Tensor<f32> {
        let first = &images[0];
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            assert_eq!(
                (im.height, im.width),
                (first.height, first.width),
                "batch of mixed sizes"
            );
            data.extend_from_slice(&im.data);
        }
        Tensor::new(vec![images.len(), 3, first.height, first.width], data)
            .expect("consistent dims")
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }
}
